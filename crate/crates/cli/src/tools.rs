//! Small diagnostic subcommands: a sketch throughput benchmark and a
//! partition preview that shows how a dataset would be split across clients.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchfed::fed::{partition, DistributionTag, PartitionStrategy};
use sketchfed::nn::Label;
use sketchfed::numerics::Matrix;
use sketchfed::seeding::child_seed;
use sketchfed::sketch::SketchOperator;

use crate::config::ExperimentConfig;
use crate::dataset::load_dataset;
use crate::error::{CliError, CliResult};

const BENCH_SHAPES: [(usize, usize); 3] = [(256, 256), (512, 512), (1024, 512)];
const BENCH_BUDGET_MS: u128 = 60;

fn time_loop<F: FnMut()>(mut f: F) -> f64 {
    f();
    let start = Instant::now();
    let mut iters = 0u64;
    while start.elapsed().as_millis() < BENCH_BUDGET_MS {
        f();
        iters += 1;
    }
    start.elapsed().as_secs_f64() / iters.max(1) as f64
}

/// Times one-sided sketching and recovery at a few representative shapes,
/// at half-width operators. Returns a human-readable table.
pub fn bench_sketch(seed: u64) -> String {
    let mut out = String::from("shape        width    sketch Mval/s   recover Mval/s\n");
    for (i, &(d, n)) in BENCH_SHAPES.iter().enumerate() {
        let c = d / 2;
        let op = SketchOperator::new(d, c, child_seed(seed, &[1, i as u64])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[2, i as u64]));
        let w =
            Matrix::from_vec(d, n, (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let s = op.sketch_matrix(&w).unwrap();
        let per_sketch = time_loop(|| {
            std::hint::black_box(op.sketch_matrix(std::hint::black_box(&w)).unwrap());
        });
        let per_recover = time_loop(|| {
            std::hint::black_box(op.unsketch_matrix(std::hint::black_box(&s)).unwrap());
        });
        let values = (d * n) as f64;
        let _ = writeln!(
            out,
            "{:>4} x {:<4}  {:>5}    {:>13.1}   {:>14.1}",
            d,
            n,
            c,
            values / per_sketch / 1e6,
            values / per_recover / 1e6,
        );
    }
    out
}

fn label_summary(examples: &[sketchfed::nn::Example]) -> String {
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut all_classes = true;
    for e in examples {
        match &e.y {
            Label::Class(c) => *classes.entry(*c).or_insert(0) += 1,
            Label::Scalar(v) => {
                all_classes = false;
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
    }
    if all_classes {
        let parts: Vec<String> =
            classes.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        format!("classes {{{}}}", parts.join(" "))
    } else if classes.is_empty() {
        format!("scalar targets in [{lo:.3}, {hi:.3}]")
    } else {
        "mixed labels".to_string()
    }
}

fn strategy_name(s: PartitionStrategy) -> &'static str {
    match s {
        PartitionStrategy::Iid => "iid",
        PartitionStrategy::LabelShard => "label-shard",
        PartitionStrategy::SinglePoint => "single-point",
    }
}

fn tag_name(t: DistributionTag) -> &'static str {
    match t {
        DistributionTag::Full => "full",
        DistributionTag::Iid => "iid",
        DistributionTag::LabelShard => "label-shard",
        DistributionTag::SinglePoint => "single-point",
    }
}

/// Splits the configured dataset exactly as a run would and describes each
/// client's shard without training anything.
pub fn partition_preview(cfg: &ExperimentConfig) -> CliResult<String> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let shards = partition(&data, cfg.clients, cfg.partition, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = format!(
        "{} examples, {} strategy, {} clients, seed {}\n",
        data.len(),
        strategy_name(cfg.partition),
        cfg.clients,
        cfg.seed,
    );
    for (i, shard) in shards.iter().enumerate() {
        let _ = writeln!(
            out,
            "client {:>3}: {:>5} examples ({}) {}",
            i,
            shard.len(),
            tag_name(shard.distribution),
            label_summary(&shard.examples),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn bench_reports_all_shapes() {
        let report = bench_sketch(1);
        assert!(report.contains("256 x 256"));
        assert!(report.contains("512 x 512"));
        assert!(report.contains("1024 x 512"));
        assert_eq!(report.lines().count(), 4);
    }

    #[test]
    fn preview_lists_every_client() {
        let cfg = parse_config(
            "network = fc,8,8,1\ndataset = teacher-fc,d=8,n=40,seed=3\nclients = 4\nsampled = 2\n",
            "test",
        )
        .unwrap();
        let report = partition_preview(&cfg).unwrap();
        assert!(report.starts_with("40 examples, iid strategy, 4 clients"));
        assert_eq!(report.lines().count(), 5);
        assert!(report.contains("client   0:    10 examples (iid)"));
        assert!(report.contains("scalar targets in ["));
    }

    #[test]
    fn preview_histograms_class_labels() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lbl.idx");
        crate::dataset::generate_digits(&images, &labels, 30, 7).unwrap();
        let text = format!(
            "network = fc,784,8,10\ndataset = idx,{},{}\nclients = 3\nsampled = 2\npartition = label-shard\n",
            images.display(),
            labels.display(),
        );
        let cfg = parse_config(&text, "test").unwrap();
        let report = partition_preview(&cfg).unwrap();
        assert!(report.contains("label-shard strategy"));
        assert!(report.contains("classes {"));
    }

    #[test]
    fn preview_rejects_infeasible_split() {
        let cfg = parse_config(
            "network = fc,8,8,1\ndataset = teacher-fc,d=8,n=3,seed=3\nclients = 4\nsampled = 2\n",
            "test",
        )
        .unwrap();
        let err = partition_preview(&cfg).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }
}
