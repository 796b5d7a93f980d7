//! Residual sweeps for the head-objective stationary point.
//! Run with `cargo run --release -p ltlab --example calibrate_head`.

use ltlab::theory::{nc_synth, theorem2_sweep, implicit_la_equivalence, analyze_stationary_point, NcSynthConfig, SolverConfig};
use ltlab::RngStream;

fn main() -> ltlab::Result<()> {
    let rng = RngStream::new(2024);
    for &(lambda, c0) in &[(0.1, 10.0), (0.1, 20.0)] {
        let base = NcSynthConfig { c0, ..NcSynthConfig::new(50, 64, 50.0, lambda) };
        let rows = theorem2_sweep(&base, &[(50.0, 50), (100.0, 50), (200.0, 50)], SolverConfig::default(), &rng)?;
        println!("lambda={lambda} c0={c0}");
        for w in rows.windows(2) {
            println!("  ratio {:.4}", w[1].max_residual / w[0].max_residual);
        }
        for r in &rows {
            println!("  rho={} res={:.4e} scaled={:.4e} wnorm_scaled={:.4e} it={}", r.rho, r.max_residual, r.scaled_residual, r.scaled_weight_norm, r.iterations);
        }
        let off = NcSynthConfig { offset: Some(vec![0.1; 64]), ..base.clone() };
        let rows = theorem2_sweep(&off, &[(50.0, 50), (100.0, 50), (200.0, 50)], SolverConfig::default(), &rng)?;
        for r in &rows {
            let excess = r.max_residual - r.offset_term;
            println!("  offset rho={} res={:.4e} offterm={:.4e} excess*(lrC)^2={:.4e}", r.rho, r.max_residual, r.offset_term, excess * (lambda * r.rho * 50.0f64).powi(2));
        }
    }
    for &(g0, seed, lambda) in &[(0.25, 1, 0.1), (0.25, 2, 0.1), (0.25, 3, 0.1), (0.25, 4, 0.1), (0.25, 5, 0.1), (0.25, 1, 1.0), (0.1, 1, 0.1), (0.5, 1, 1.0)] {
        let cfg = NcSynthConfig { gamma0: g0, ..NcSynthConfig::new(50, 64, 100.0, lambda) };
        let s = nc_synth(&cfg, &mut RngStream::new(seed))?;
        let a = analyze_stationary_point(&s.means, &s.counts, cfg.lambda, SolverConfig::default())?;
        let la = implicit_la_equivalence(&a.w_star, &s.means, &s.priors)?;
        let min_align = la.alignment.iter().map(|v| v.unwrap()).fold(1.0, f64::min);
        println!("gamma0={g0} seed={seed} lambda={lambda} min_align={min_align:.6} exponent={:.4} scale={:.4e}", la.fitted_exponent.unwrap(), la.fitted_scale.unwrap());
    }
    Ok(())
}
