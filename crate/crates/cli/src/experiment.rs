//! Experiment orchestration: dataset to metrics CSV and JSON summary.
//!
//! A run is a pure function of its config. Every random stream (weight
//! init, partitioning, per-round hashing and client sampling) derives from
//! the root seed, so re-running writes a byte-identical metrics file except
//! for the wall-clock column.

use crate::config::ExperimentConfig;
use crate::dataset::load_dataset;
use crate::error::{CliError, CliResult};
use sketchfed::analysis::{convergence_report, prediction_error_bound, ErrorBoundReport};
use sketchfed::fed::{
    evaluate, partition, run_round, AssumptionMonitors, ClientDataset, CommLedger, Mode, Server,
};
use sketchfed::nn::{Example, Features, Label, Loss, NetworkSpec, NetworkState};
use sketchfed::numerics::Matrix;
use sketchfed::seeding::child_seed;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Fixed metrics column order; `wall_ms` is the only nondeterministic one.
pub const METRICS_HEADER: &str = "round,loss,acc,min_grad_norm,hh_ratio,down_vals,up_vals,wall_ms";
const METRICS_VERSION_LINE: &str = "# sketchfed metrics schema v1";
const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Accuracy placeholder for regression runs, where no accuracy exists.
pub const NO_ACCURACY: f64 = -1.0;

/// Seed-tree tag for weight initialization (the federated layer claims
/// lower tags for its own streams).
const STREAM_INIT: u64 = 10;

/// Failure probability target recorded in the summary's bound report.
const BOUND_DELTA: f64 = 0.1;

/// End-of-run report. Serialized as the run's `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    /// Eval accuracy after the final round; -1.0 for regression tasks.
    pub final_acc: f64,
    /// Mean training loss of the final round.
    pub final_loss: f64,
    /// Baseline-over-actual downlink value ratio, straight from the ledger.
    pub comp_ratio_down: f64,
    pub comp_ratio_up: f64,
    pub ledger: CommLedger,
    /// Layered prediction-error bound at the final weights; absent for
    /// baseline runs and image networks.
    pub bound_report: Option<ErrorBoundReport>,
    /// Log-log trend of the running-min squared gradient norm.
    pub convergence_slope: f64,
    pub monitors: AssumptionMonitors,
}

/// Paths and summary a finished run hands back.
#[derive(Debug)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

fn infer_loss(data: &ClientDataset) -> Loss {
    if data.examples.iter().all(|e| matches!(e.y, Label::Class(_))) {
        Loss::SoftmaxCrossEntropy
    } else {
        Loss::SquaredError
    }
}

/// Image networks take channel-by-pixel matrices; loaders emit flat rows.
fn adapt_features(data: ClientDataset, spec: &NetworkSpec) -> CliResult<ClientDataset> {
    let NetworkSpec::ConvResNet(cv) = spec else {
        return Ok(data);
    };
    let want = cv.input_channels * cv.pixels;
    let examples = data
        .examples
        .into_iter()
        .map(|ex| {
            let flat = ex.x.flat()?.clone();
            if flat.len() != want {
                return Err(CliError::Config(format!(
                    "{} feature values cannot fill {} channels of {} pixels",
                    flat.len(),
                    cv.input_channels,
                    cv.pixels
                )));
            }
            Ok(Example {
                x: Features::Image(Matrix::from_vec(
                    cv.input_channels,
                    cv.pixels,
                    flat.into_data(),
                )?),
                y: ex.y,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(ClientDataset::new(examples, data.distribution)?)
}

fn check_labels_fit(data: &ClientDataset, spec: &NetworkSpec) -> CliResult<()> {
    let out_dim = spec.output_dims().0;
    for (i, ex) in data.examples.iter().enumerate() {
        if let Label::Class(k) = ex.y {
            if k >= out_dim {
                return Err(CliError::Config(format!(
                    "example {i} has class {k} but the network emits {out_dim} logits"
                )));
            }
        }
    }
    Ok(())
}

fn fmt_row(
    round: u64,
    loss: f64,
    acc: f64,
    min_grad: f64,
    hh: f64,
    down: u64,
    up: u64,
    wall_ms: u128,
) -> String {
    format!("{round},{loss},{acc},{min_grad},{hh},{down},{up},{wall_ms}\n")
}

/// Per-entry recovery error scale the final-round bound is evaluated at:
/// the worst layer's Frobenius norm over the root of its sketch length.
fn bound_eps(server: &Server) -> f64 {
    let dims = server.net.spec.sketched_layer_dims();
    server
        .net
        .weights
        .iter()
        .zip(&dims)
        .map(|(w, &(d, _))| w.frobenius_norm() / (server.config.sketch_len(d) as f64).sqrt())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE)
}

fn final_bound_report(server: &Server, eval: &[Example]) -> Option<ErrorBoundReport> {
    if server.config.mode != Mode::Sketched {
        return None;
    }
    if !matches!(server.net.spec, NetworkSpec::Fc(_)) {
        return None;
    }
    let x = eval.first()?.x.flat().ok()?.clone();
    let (sknet, _) = server.broadcast().ok()?;
    prediction_error_bound(&server.net, &sknet, &x, bound_eps(server), BOUND_DELTA).ok()
}

/// Runs the configured experiment to completion, writing `metrics.csv` and
/// `summary.json` under the output directory.
///
/// On a numeric blow-up mid-run the rounds finished so far are flushed to
/// the metrics file before the error (exit code 3) surfaces.
pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<RunArtifacts> {
    cfg.validate()?;
    let train = adapt_features(load_dataset(&cfg.dataset)?, &cfg.network)?;
    let eval = match &cfg.eval_dataset {
        Some(src) => adapt_features(load_dataset(src)?, &cfg.network)?,
        None => train.clone(),
    };
    check_labels_fit(&train, &cfg.network)?;
    check_labels_fit(&eval, &cfg.network)?;
    let loss = infer_loss(&train);
    let net = NetworkState::init(cfg.network.clone(), child_seed(cfg.seed, &[STREAM_INIT]))?;
    let mut server = Server::new(net, cfg.fed_config(loss), cfg.seed)?;
    let clients = partition(&train, cfg.clients, cfg.partition, cfg.seed)?;

    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", cfg.out.display())))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let summary_path = cfg.out.join("summary.json");
    let file = std::fs::File::create(&metrics_path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", metrics_path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "{METRICS_VERSION_LINE}")?;
    writeln!(out, "{METRICS_HEADER}")?;

    let mut grad_series = Vec::with_capacity(cfg.rounds);
    let mut last_loss = f64::NAN;
    let mut last_acc = NO_ACCURACY;
    for _ in 0..cfg.rounds {
        let started = Instant::now();
        let report = match run_round(&mut server, &clients, cfg.sampled) {
            Ok(r) => r,
            Err(e) => {
                out.flush()?;
                return Err(e.into());
            }
        };
        let stats = match evaluate(&server.net, &eval.examples, loss) {
            Ok(s) if s.mean_loss.is_finite() => s,
            Ok(s) => {
                out.flush()?;
                return Err(CliError::Numeric(format!(
                    "eval loss {} after round {}",
                    s.mean_loss, report.round
                )));
            }
            Err(e) => {
                out.flush()?;
                return Err(e.into());
            }
        };
        let acc = stats.accuracy.unwrap_or(NO_ACCURACY);
        grad_series.push(report.grad_sq);
        last_loss = report.mean_loss;
        last_acc = acc;
        out.write_all(
            fmt_row(
                report.round,
                report.mean_loss,
                acc,
                report.min_grad_sq,
                report.hh_ratio,
                report.down_values,
                report.up_values,
                started.elapsed().as_millis(),
            )
            .as_bytes(),
        )?;
    }
    out.flush()?;

    let convergence_slope = convergence_report(&grad_series)?.slope;
    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        final_acc: last_acc,
        final_loss: last_loss,
        comp_ratio_down: server.ledger.compression_down(),
        comp_ratio_up: server.ledger.compression_up(),
        bound_report: final_bound_report(&server, &eval.examples),
        ledger: server.ledger.clone(),
        convergence_slope,
        monitors: server.monitors.clone(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Io(format!("summary serialization: {e}")))?;
    std::fs::write(&summary_path, json + "\n")
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", summary_path.display())))?;
    Ok(RunArtifacts { summary, metrics_path, summary_path })
}

/// Strips the wall-clock column: the replay-invariant part of a metrics row.
pub fn strip_wall_column(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|line| {
            if line.starts_with('#') {
                line.to_string()
            } else {
                match line.rsplit_once(',') {
                    Some((rest, _)) => rest.to_string(),
                    None => line.to_string(),
                }
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Convenience for tests and tools: run `cfg` into a fresh subdirectory of
/// `base` named `label`.
pub fn run_into(cfg: &ExperimentConfig, base: &Path, label: &str) -> CliResult<RunArtifacts> {
    let mut owned = cfg.clone();
    owned.out = base.join(label);
    run_experiment(&owned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tmp_base(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join(format!("sketchfed-exp-{}-{tag}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_cfg(extra: &str) -> ExperimentConfig {
        let text = format!(
            "network = fc,8,8,1\n\
             dataset = teacher-fc,d=8,n=48,seed=5\n\
             clients = 4\nsampled = 2\nrounds = 6\neta = 0.05\n{extra}"
        );
        parse_config(&text, "test").unwrap()
    }

    #[test]
    fn metrics_file_has_versioned_header_and_one_row_per_round() {
        let base = tmp_base("header");
        let art = run_into(&small_cfg(""), &base, "a").unwrap();
        let text = std::fs::read_to_string(&art.metrics_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_VERSION_LINE);
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 6);
        for (i, row) in rows.iter().enumerate() {
            let fields: Vec<&str> = row.split(',').collect();
            assert_eq!(fields.len(), 8);
            assert_eq!(fields[0], i.to_string(), "round indices count up from zero");
            assert_eq!(fields[2], "-1", "regression rows carry the accuracy sentinel");
        }
    }

    #[test]
    fn replay_is_byte_identical_without_wall_clock() {
        let base = tmp_base("replay");
        let a = run_into(&small_cfg(""), &base, "a").unwrap();
        let b = run_into(&small_cfg(""), &base, "b").unwrap();
        let ta = std::fs::read_to_string(&a.metrics_path).unwrap();
        let tb = std::fs::read_to_string(&b.metrics_path).unwrap();
        assert_eq!(strip_wall_column(&ta), strip_wall_column(&tb));
    }

    #[test]
    fn different_seeds_change_the_run() {
        let base = tmp_base("seeds");
        let a = run_into(&small_cfg("seed = 1\n"), &base, "a").unwrap();
        let b = run_into(&small_cfg("seed = 2\n"), &base, "b").unwrap();
        assert_ne!(a.summary.final_loss, b.summary.final_loss);
    }

    #[test]
    fn summary_reports_ledger_derived_ratios() {
        // One 64x64 hidden layer at ratio 0.5: downlink per client is
        // 32*64 + 64 values against a dense 64*64, so the ratio is 64/33.
        let text = "network = fc,64,64,1\n\
                    dataset = teacher-fc,d=64,n=32,seed=3\n\
                    clients = 4\nsampled = 2\nrounds = 2\n";
        let cfg = parse_config(text, "test").unwrap();
        let base = tmp_base("ratio");
        let art = run_into(&cfg, &base, "a").unwrap();
        let s = &art.summary;
        assert!((s.comp_ratio_down - 64.0 / 33.0).abs() <= 1e-12);
        assert!((s.comp_ratio_up - 2.0).abs() <= 1e-12);
        assert_eq!(
            s.comp_ratio_down,
            s.ledger.baseline_downlink_values as f64 / s.ledger.downlink_values as f64
        );
        assert!(s.bound_report.is_some());
        assert_eq!(s.schema_version, 1);
    }

    #[test]
    fn baseline_mode_charges_dense_traffic() {
        let base = tmp_base("baseline");
        let art = run_into(&small_cfg("mode = baseline\n"), &base, "a").unwrap();
        let s = &art.summary;
        assert_eq!(s.ledger.downlink_values, s.ledger.baseline_downlink_values);
        assert_eq!(s.comp_ratio_down, 1.0);
        assert!(s.bound_report.is_none());
    }

    #[test]
    fn blow_up_flushes_partial_metrics_and_reports_numeric_failure() {
        let base = tmp_base("blowup");
        let mut cfg = small_cfg("");
        cfg.eta = 1e60;
        cfg.rounds = 40;
        let err = run_into(&cfg, &base, "a").unwrap_err();
        assert!(matches!(err, CliError::Numeric(_)), "got {err}");
        let text = std::fs::read_to_string(base.join("a").join("metrics.csv")).unwrap();
        let rows = text.lines().skip(2).count();
        assert!(rows >= 1, "at least the first round should have flushed");
        assert!(rows < 40, "the run should have aborted early");
    }

    #[test]
    fn classification_runs_report_accuracy() {
        let dir = tmp_base("digits");
        let images = dir.join("img.idx");
        let labels = dir.join("lbl.idx");
        crate::dataset::generate_digits(&images, &labels, 60, 11).unwrap();
        let text = format!(
            "network = fc,784,16,10\n\
             dataset = idx,{},{}\n\
             clients = 3\nsampled = 2\nrounds = 3\neta = 0.05\n",
            images.display(),
            labels.display()
        );
        let cfg = parse_config(&text, "test").unwrap();
        let art = run_into(&cfg, &dir, "run").unwrap();
        assert!((0.0..=1.0).contains(&art.summary.final_acc));
        let csv = std::fs::read_to_string(&art.metrics_path).unwrap();
        let first_row = csv.lines().nth(2).unwrap();
        let acc: f64 = first_row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn class_labels_must_fit_the_output_layer() {
        let dir = tmp_base("fit");
        let images = dir.join("img.idx");
        let labels = dir.join("lbl.idx");
        crate::dataset::generate_digits(&images, &labels, 20, 12).unwrap();
        let text = format!(
            "network = fc,784,16,5\n\
             dataset = idx,{},{}\n\
             clients = 2\nsampled = 1\nrounds = 2\n",
            images.display(),
            labels.display()
        );
        let cfg = parse_config(&text, "test").unwrap();
        let err = run_into(&cfg, &dir, "run").unwrap_err().to_string();
        assert!(err.contains("logits"), "{err}");
    }
}
