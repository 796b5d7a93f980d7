//! Searches training settings under which the cone-bound premises hold,
//! and compares MaxNorm against one-time renormalization in the head stage.

use std::collections::HashMap;

use ltlab::classifier::EtfBasis;
use ltlab::dataset::{assign_groups, synth_gaussian_lt, GaussianSpec, GroupThresholds, LongTailProfile};
use ltlab::losses::head_norms;
use ltlab::network::NetSpec;
use ltlab::rng::keys;
use ltlab::theory::check_theorem1;
use ltlab::trainer::{run_preset, MethodPreset, PresetParams, SgdConfig};
use ltlab::RngStream;

fn main() -> ltlab::Result<()> {
    let args: HashMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.parse().unwrap())))
        .collect();
    let get = |k: &str, d: f64| *args.get(k).unwrap_or(&d);
    let mode = get("mode", 0.0);
    let (sep, cov, n1) = (get("sep", 3.0), get("cov", 1.0), get("n1", 500.0) as usize);
    let (epochs, lr, wd, fr, width, bs) = (get("epochs", 30.0) as usize, get("lr", 0.05), get("wd", 5e-3), get("fr", 0.01), get("width", 64.0) as usize, get("bs", 64.0) as usize);
    let seeds = get("seeds", 1.0) as u64;
    let profile = LongTailProfile::new(10, n1, get("rho", 100.0))?;
    let spec = GaussianSpec::new(16, sep, cov);
    let net_spec = NetSpec::mlp(16, width, 3, 10);
    let params = PresetParams { wd_stage1: wd, fr, etf_basis: match get("basis", 1.0) as u8 { 0 => EtfBasis::Canonical, 1 => EtfBasis::RandomQr, _ => EtfBasis::Blocks }, ..PresetParams::default() };
    for seed in 0..seeds {
        let root = RngStream::new(seed);
        let splits = synth_gaussian_lt(&profile, &spec, &mut root.substream(keys::DATA))?;
        let groups = assign_groups(&splits.train.class_counts, GroupThresholds::tertiles(&splits.train.class_counts))?;
        if mode == 0.0 {
            let preset = MethodPreset::named("wd-fr-etf", &params, 10)?;
            let out = run_preset(&preset, &net_spec, &splits, &[SgdConfig::new(lr, bs, epochs)], &groups, &root)?;
            let r = check_theorem1(&out.net, &splits.train, usize::MAX, &mut root.substream(keys::THEOREM))?;
            if get("diag", 0.0) == 1.0 {
                let cache = out.net.forward_pass(&splits.train.x, ltlab::network::Mode::Eval)?;
                let mut dl = ltlab::losses::softmax_rows(&cache.logits);
                for (i, &y) in splits.train.y.iter().enumerate() { dl[(i, y)] -= 1.0; }
                let g = out.net.backward(&cache, &dl, None)?.features.row_norms();
                let n = cache.features.row_norms();
                for (k, idx) in splits.train.indices_by_class().iter().enumerate() {
                    let mx = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).fold(0.0, f64::max);
                    let mn = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
                    println!("  class {k} n={} norm [{:.2},{:.2}] eps max {:.4}", idx.len(), mn(&n), mx(&n), mx(&g));
                }
            }
            println!("seed {seed}: {:?} eps {:.4} L {:.3} delta {:.4} maxcos {:?} bound {:?} acc {:.3}", r.verdict, r.measured["epsilon"], r.measured["feature_bound"], r.measured["delta"], r.measured.get("max_inter_class_cosine"), r.bound, out.report.accuracy.average);
        } else {
            let s2 = SgdConfig::new(get("lr2", 0.05), bs, get("epochs2", 10.0) as usize);
            let mut norms = Vec::new();
            for name in ["wb", "wb-renorm"] {
                let preset = MethodPreset::named(name, &params, 10)?;
                let out = run_preset(&preset, &net_spec, &splits, &[SgdConfig::new(lr, bs, epochs), s2.clone()], &groups, &root)?;
                norms.push(head_norms(&out.net));
            }
            let worst = norms[0].iter().zip(&norms[1]).map(|(a, b)| ((a - b) / a).abs()).fold(0.0, f64::max);
            println!("seed {seed}: worst rel diff {worst:.4}\n  maxnorm {:?}\n  renorm  {:?}", norms[0], norms[1]);
        }
    }
    Ok(())
}
