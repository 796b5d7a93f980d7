use ltlab::dataset::LabeledSet;
use ltlab::metrics::{
    bn_stats, class_mean_cosines, cosine_matrix, fdr, random_probe_fdr, relu_fdr_profile, FeatureStats, MetricsSummary,
};
use ltlab::network::Mode;
use ltlab::rng::keys;
use ltlab::table::{fmt_opt, Table};
use ltlab::RngStream;

use super::Loaded;
use crate::error::CliResult;
use crate::output::OutputDir;

fn square_table(values: &[Vec<Option<f64>>]) -> Table {
    let c = values.len();
    let mut t = Table::new(std::iter::once("class".to_string()).chain((0..c).map(|k| k.to_string())));
    for (k, row) in values.iter().enumerate() {
        t.push(std::iter::once(k.to_string()).chain(row.iter().map(|v| fmt_opt(*v))).collect());
    }
    t
}

/// Writes `metrics.json`, `norms.csv`, `cosine.csv`, `class_mean_cosine.csv`,
/// `probe_fdr.csv` and `relu_fdr.csv` for eval-mode features of `set`.
pub fn run(loaded: &Loaded, set: &LabeledSet, out: &OutputDir) -> CliResult<MetricsSummary> {
    let m = &loaded.config.metrics;
    let root = RngStream::new(loaded.seed);
    let c = set.classes;
    let feats = loaded.net.features(&set.x)?;
    let stats = FeatureStats::compute(&feats, &set.y, c)?;
    let cos = cosine_matrix(&feats, &set.y, c, m.max_pairs, &mut root.substream(keys::COSINE))?;
    let probe = random_probe_fdr(&feats, &set.y, c, m.probes, &mut root.substream(keys::PROBE), m.jitter)?;
    let relu = relu_fdr_profile(&loaded.net, &set.x, &set.y, c, Mode::Eval, m.jitter)?;
    let bn = bn_stats(&loaded.net).ok();

    let summary = MetricsSummary {
        fdr: fdr(&feats, &set.y, c, m.jitter).ok(),
        cosine_off_diagonal: cos.off_diagonal_mean(),
        cosine_diagonal: cos.diagonal_mean(),
        mean_norms: stats.mean_norms.clone(),
        bn,
        probe_fdr: probe.fdr.clone(),
    };
    out.json("metrics.json", &summary)?;
    out.table("norms.csv", &stats.norms_table())?;
    out.table("cosine.csv", &cos.table())?;
    out.table("class_mean_cosine.csv", &square_table(&class_mean_cosines(&stats)))?;
    out.table("probe_fdr.csv", &probe.table())?;
    let mut t = Table::new(["sublayer", "relu_fdr"]);
    for (i, v) in relu.iter().enumerate() {
        t.push(vec![i.to_string(), fmt_opt(*v)]);
    }
    out.table("relu_fdr.csv", &t)?;
    Ok(summary)
}
