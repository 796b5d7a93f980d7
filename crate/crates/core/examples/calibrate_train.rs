//! Seed sweeps for the training-based directional checks.
//! `cargo run --release -p ltlab --example calibrate_train -- key=value ...`

use std::collections::HashMap;

use ltlab::dataset::{assign_groups, synth_gaussian_lt, GaussianSpec, Group, GroupThresholds, LongTailProfile};
use ltlab::metrics::{bn_stats, cosine_matrix, fdr, mean_norms, random_probe_fdr};
use ltlab::network::NetSpec;
use ltlab::rng::keys;
use ltlab::trainer::{run_preset, MethodPreset, PresetParams, SgdConfig};
use ltlab::RngStream;

fn main() -> ltlab::Result<()> {
    let args: HashMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.parse().unwrap())))
        .collect();
    let get = |k: &str, d: f64| *args.get(k).unwrap_or(&d);
    let (sep, cov, n1) = (get("sep", 3.0), get("cov", 1.0), get("n1", 500.0) as usize);
    let (epochs, lr, wd, width, bs) = (get("epochs", 30.0) as usize, get("lr", 0.05), get("wd", 5e-3), get("width", 64.0) as usize, get("bs", 64.0) as usize);
    let seeds = get("seeds", 5.0) as u64;
    let profile = LongTailProfile::new(10, n1, 100.0)?;
    let spec = GaussianSpec::new(16, sep, cov);
    let net_spec = NetSpec::mlp(16, width, 3, 10);
    let sgd = SgdConfig::new(lr, bs, epochs);
    let params = PresetParams { wd_stage1: wd, ..PresetParams::default() };
    for seed in 0..seeds {
        let root = RngStream::new(seed);
        let splits = synth_gaussian_lt(&profile, &spec, &mut root.substream(keys::DATA))?;
        let groups = assign_groups(&splits.train.class_counts, GroupThresholds::tertiles(&splits.train.class_counts))?;
        let mut line = format!("seed {seed}:");
        for name in ["ce", "wd", "wd+mult"] {
            let preset = MethodPreset::named(name, &params, 10)?;
            let out = run_preset(&preset, &net_spec, &splits, &[sgd.clone()], &groups, &root)?;
            let feats = out.net.features(&splits.train.x)?;
            let norms = mean_norms(&feats, &splits.train.y, 10)?;
            let gm = |g: Group| { let m = groups.members(g); m.iter().map(|&k| norms[k]).sum::<f64>() / m.len() as f64 };
            let cosm = cosine_matrix(&feats, &splits.train.y, 10, 10_000, &mut root.substream(keys::COSINE))?;
            let bn = bn_stats(&out.net)?;
            let probe = random_probe_fdr(&feats, &splits.train.y, 10, 3, &mut root.substream(keys::PROBE), None)?;
            let _ = fdr;
            line += &format!(
                "\n  {name:8} avg {:.3} few {:.3} many {:.3} | gamma {:.3} | fdr tr {:.2} te {:.2} | norm few/many {:.3} | offcos {:.3} | probe {:?} | la {:?} | loss {:.3} acc {:.3}",
                out.report.accuracy.average, out.report.accuracy.few.unwrap(), out.report.accuracy.many.unwrap(),
                bn.gamma_mean, out.report.fdr_train.unwrap_or(f64::NAN), out.report.fdr_test.unwrap_or(f64::NAN),
                gm(Group::Few) / gm(Group::Many), cosm.off_diagonal_mean().unwrap(),
                probe.fdr.iter().map(|f| f.map(|v| (v * 100.0).round() / 100.0)).collect::<Vec<_>>(), out.la,
                out.logs[0].epochs.last().unwrap().train_loss, out.logs[0].epochs.last().unwrap().train_acc,
            );
        }
        println!("{line}");
    }
    Ok(())
}
