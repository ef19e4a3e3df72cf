//! Flat key-value experiment configuration.
//!
//! The file format is one `key = value` pair per line, with `#` comments
//! and blank lines ignored. There are no sections; the format is meant to
//! diff cleanly. Unknown and duplicate keys are rejected by name and line
//! so typos cannot silently fall back to defaults.

use crate::error::{CliError, CliResult};
use sketchfed::fed::{FedConfig, Mode, PartitionStrategy, TopkBudget, Weighting};
use sketchfed::nn::{ConvSpec, FcSpec, Loss, NetworkSpec};
use sketchfed::sketch::SketchMode;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Where training examples come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    /// Inputs drawn from a standard normal, labeled by a hidden random
    /// fully connected network: `teacher-fc,d=<dim>,n=<count>,seed=<seed>`.
    TeacherFc { dim: usize, count: usize, seed: u64 },
    /// Numeric CSV with the label in the final column: `csv,<path>`.
    Csv(PathBuf),
    /// Big-endian IDX image/label pair: `idx,<images>,<labels>`.
    Idx { images: PathBuf, labels: PathBuf },
}

impl DatasetSource {
    pub fn parse(value: &str) -> CliResult<Self> {
        let parts: Vec<&str> = value.split(',').map(str::trim).collect();
        match parts.first().copied() {
            Some("teacher-fc") => {
                let mut dim = None;
                let mut count = None;
                let mut seed = None;
                for p in &parts[1..] {
                    let (k, v) = p.split_once('=').ok_or_else(|| {
                        CliError::Config(format!("teacher-fc parameter `{p}` is not key=value"))
                    })?;
                    match k.trim() {
                        "d" => dim = Some(parse_in::<usize>("d", v)?),
                        "n" => count = Some(parse_in::<usize>("n", v)?),
                        "seed" => seed = Some(parse_in::<u64>("seed", v)?),
                        other => {
                            return Err(CliError::Config(format!(
                                "teacher-fc does not take a `{other}` parameter"
                            )))
                        }
                    }
                }
                match (dim, count, seed) {
                    (Some(d), Some(n), Some(s)) => Ok(DatasetSource::TeacherFc {
                        dim: d,
                        count: n,
                        seed: s,
                    }),
                    _ => Err(CliError::Config(
                        "teacher-fc needs all of d=, n=, seed=".into(),
                    )),
                }
            }
            Some("csv") => match parts.len() {
                2 => Ok(DatasetSource::Csv(PathBuf::from(parts[1]))),
                _ => Err(CliError::Config("csv source takes exactly one path".into())),
            },
            Some("idx") => match parts.len() {
                3 => Ok(DatasetSource::Idx {
                    images: PathBuf::from(parts[1]),
                    labels: PathBuf::from(parts[2]),
                }),
                _ => Err(CliError::Config(
                    "idx source takes an image path and a label path".into(),
                )),
            },
            _ => Err(CliError::Config(format!(
                "dataset `{value}` is none of teacher-fc,... | csv,<path> | idx,<images>,<labels>"
            ))),
        }
    }
}

fn parse_in<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("value `{}` for `{key}` does not parse", value.trim())))
}

/// Everything a training run needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub dataset: DatasetSource,
    /// Held-out set for per-round evaluation; the training set doubles as
    /// the eval set when absent.
    pub eval_dataset: Option<DatasetSource>,
    pub partition: PartitionStrategy,
    /// Total clients the data is split across.
    pub clients: usize,
    /// Clients sampled per round.
    pub sampled: usize,
    pub rounds: usize,
    pub eta: f64,
    pub rho: f64,
    pub topk: f64,
    pub sketch_ratio: f64,
    pub sketch_count: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub mode: Mode,
    /// Replace random hash tables with the identity placement; requires a
    /// sketch ratio of 1.0 and makes the compressed run match the baseline.
    pub identity_hash: bool,
    pub weighting: Weighting,
    pub force_multi: bool,
    pub train_output: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkSpec::Fc(FcSpec { input_dim: 1, hidden_dims: vec![], output_dim: 1 }),
            dataset: DatasetSource::TeacherFc { dim: 1, count: 1, seed: 1 },
            eval_dataset: None,
            partition: PartitionStrategy::Iid,
            clients: 10,
            sampled: 5,
            rounds: 100,
            eta: 0.001,
            rho: 0.9,
            topk: 0.10,
            sketch_ratio: 0.5,
            sketch_count: 1,
            seed: 1,
            out: PathBuf::from("out"),
            mode: Mode::Sketched,
            identity_hash: false,
            weighting: Weighting::Uniform,
            force_multi: false,
            train_output: true,
        }
    }
}

fn parse_network(value: &str, act: Option<f64>, res: Option<f64>) -> CliResult<NetworkSpec> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.first().copied() {
        Some("fc") => {
            if act.is_some() || res.is_some() {
                return Err(CliError::Config(
                    "activation_scale/residual_scale apply to conv networks only".into(),
                ));
            }
            let dims: Vec<usize> = parts[1..]
                .iter()
                .map(|p| parse_in::<usize>("network", p))
                .collect::<CliResult<_>>()?;
            if dims.len() < 2 {
                return Err(CliError::Config(
                    "fc network needs at least input and output dims, e.g. fc,784,64,10".into(),
                ));
            }
            Ok(NetworkSpec::Fc(FcSpec {
                input_dim: dims[0],
                hidden_dims: dims[1..dims.len() - 1].to_vec(),
                output_dim: *dims.last().expect("len checked"),
            }))
        }
        Some("conv") => {
            let nums: Vec<usize> = parts[1..]
                .iter()
                .map(|p| parse_in::<usize>("network", p))
                .collect::<CliResult<_>>()?;
            let [in_ch, ch, pixels, patch, depth] = nums[..] else {
                return Err(CliError::Config(
                    "conv network takes in_channels,channels,pixels,patch,depth".into(),
                ));
            };
            Ok(NetworkSpec::ConvResNet(ConvSpec {
                input_channels: in_ch,
                channels: ch,
                pixels,
                patch,
                depth,
                activation_scale: act.unwrap_or(2.0),
                residual_scale: res.unwrap_or(0.5),
            }))
        }
        _ => Err(CliError::Config(format!(
            "network `{value}` is neither fc,<dims...> nor conv,<in_ch>,<ch>,<pixels>,<patch>,<depth>"
        ))),
    }
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!("`{key}` must be true or false, got `{value}`"))),
    }
}

pub fn parse_mode(value: &str) -> CliResult<Mode> {
    match value {
        "sketched" => Ok(Mode::Sketched),
        "baseline" => Ok(Mode::Baseline),
        _ => Err(CliError::Config(format!("mode `{value}` is neither sketched nor baseline"))),
    }
}

const KNOWN_KEYS: &[&str] = &[
    "network", "dataset", "eval_dataset", "partition", "clients", "sampled", "rounds", "eta",
    "rho", "topk", "sketch_ratio", "sketch_count", "seed", "out", "mode", "identity_hash",
    "weighting", "force_multi", "train_output", "activation_scale", "residual_scale",
];

/// Parses config text. `origin` names the source in error messages.
pub fn parse_config(text: &str, origin: &str) -> CliResult<ExperimentConfig> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut pairs: Vec<(&str, &str, usize)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{origin}: line {line_no} is not `key = value`"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        let known = KNOWN_KEYS
            .iter()
            .find(|k| **k == key)
            .copied()
            .ok_or_else(|| {
                CliError::Config(format!("{origin}: unknown key `{key}` on line {line_no}"))
            })?;
        if let Some(first) = seen.insert(known, line_no) {
            return Err(CliError::Config(format!(
                "{origin}: key `{key}` on line {line_no} repeats line {first}"
            )));
        }
        pairs.push((known, value, line_no));
    }

    let mut cfg = ExperimentConfig::default();
    let mut network_value: Option<&str> = None;
    let mut dataset_value: Option<&str> = None;
    let mut act: Option<f64> = None;
    let mut res: Option<f64> = None;
    for (key, value, _) in &pairs {
        match *key {
            "network" => network_value = Some(value),
            "dataset" => dataset_value = Some(value),
            "eval_dataset" => cfg.eval_dataset = Some(DatasetSource::parse(value)?),
            "partition" => {
                cfg.partition = match *value {
                    "iid" => PartitionStrategy::Iid,
                    "label-shard" => PartitionStrategy::LabelShard,
                    "single-point" => PartitionStrategy::SinglePoint,
                    other => {
                        return Err(CliError::Config(format!(
                            "partition `{other}` is none of iid | label-shard | single-point"
                        )))
                    }
                }
            }
            "clients" => cfg.clients = parse_in("clients", value)?,
            "sampled" => cfg.sampled = parse_in("sampled", value)?,
            "rounds" => cfg.rounds = parse_in("rounds", value)?,
            "eta" => cfg.eta = parse_in("eta", value)?,
            "rho" => cfg.rho = parse_in("rho", value)?,
            "topk" => cfg.topk = parse_in("topk", value)?,
            "sketch_ratio" => cfg.sketch_ratio = parse_in("sketch_ratio", value)?,
            "sketch_count" => cfg.sketch_count = parse_in("sketch_count", value)?,
            "seed" => cfg.seed = parse_in("seed", value)?,
            "out" => cfg.out = PathBuf::from(value),
            "mode" => cfg.mode = parse_mode(value)?,
            "identity_hash" => cfg.identity_hash = parse_bool("identity_hash", value)?,
            "weighting" => {
                cfg.weighting = match *value {
                    "uniform" => Weighting::Uniform,
                    "by-size" => Weighting::BySize,
                    other => {
                        return Err(CliError::Config(format!(
                            "weighting `{other}` is neither uniform nor by-size"
                        )))
                    }
                }
            }
            "force_multi" => cfg.force_multi = parse_bool("force_multi", value)?,
            "train_output" => cfg.train_output = parse_bool("train_output", value)?,
            "activation_scale" => act = Some(parse_in("activation_scale", value)?),
            "residual_scale" => res = Some(parse_in("residual_scale", value)?),
            _ => unreachable!("filtered against KNOWN_KEYS"),
        }
    }
    let network_value =
        network_value.ok_or_else(|| CliError::Config(format!("{origin}: `network` is required")))?;
    cfg.network = parse_network(network_value, act, res)?;
    let dataset_value =
        dataset_value.ok_or_else(|| CliError::Config(format!("{origin}: `dataset` is required")))?;
    cfg.dataset = DatasetSource::parse(dataset_value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.network
            .validate()
            .map_err(|e| CliError::Config(format!("network: {e}")))?;
        for (name, v) in [
            ("clients", self.clients),
            ("sampled", self.sampled),
            ("rounds", self.rounds),
            ("sketch_count", self.sketch_count),
        ] {
            if v == 0 {
                return Err(CliError::Config(format!("`{name}` must be at least 1")));
            }
        }
        if self.sampled > self.clients {
            return Err(CliError::Config(format!(
                "cannot sample {} of {} clients",
                self.sampled, self.clients
            )));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(CliError::Config(format!("`eta` must be positive, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(CliError::Config(format!("`rho` must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.topk > 0.0 && self.topk <= 1.0) {
            return Err(CliError::Config(format!("`topk` must lie in (0, 1], got {}", self.topk)));
        }
        if !(self.sketch_ratio > 0.0 && self.sketch_ratio <= 1.0) {
            return Err(CliError::Config(format!(
                "`sketch_ratio` must lie in (0, 1], got {}",
                self.sketch_ratio
            )));
        }
        if self.identity_hash && self.sketch_ratio != 1.0 {
            return Err(CliError::Config(
                "`identity_hash = true` requires `sketch_ratio = 1.0`".into(),
            ));
        }
        Ok(())
    }

    /// The federated-optimizer slice of this config, with the loss chosen
    /// by the caller from the dataset's label kind.
    pub fn fed_config(&self, loss: Loss) -> FedConfig {
        FedConfig {
            eta: self.eta,
            rho: self.rho,
            budget: TopkBudget::Fraction(self.topk),
            sketch_ratio: self.sketch_ratio,
            sketch_count: self.sketch_count,
            sketch_mode: if self.identity_hash { SketchMode::Identity } else { SketchMode::Random },
            mode: self.mode,
            weighting: self.weighting,
            force_multi: self.force_multi,
            train_output: self.train_output,
            loss,
        }
    }

    /// Applies the seed/out/mode overrides: a command line flag beats the
    /// environment, which beats the config file, which beats the default.
    pub fn apply_overrides(
        &mut self,
        flag_seed: Option<u64>,
        env_seed: Option<&str>,
        flag_out: Option<PathBuf>,
        flag_mode: Option<&str>,
    ) -> CliResult<()> {
        if let Some(raw) = env_seed {
            let parsed = raw.trim().parse::<u64>().map_err(|_| {
                CliError::Config(format!("SKETCHFED_SEED `{raw}` is not an unsigned integer"))
            })?;
            self.seed = parsed;
        }
        if let Some(s) = flag_seed {
            self.seed = s;
        }
        if let Some(out) = flag_out {
            self.out = out;
        }
        if let Some(mode) = flag_mode {
            self.mode = parse_mode(mode)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "network = fc,32,16,1\ndataset = teacher-fc,d=32,n=100,seed=1\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL, "test").unwrap();
        assert_eq!(cfg.eta, 0.001);
        assert_eq!(cfg.topk, 0.10);
        assert_eq!(cfg.rho, 0.9);
        assert_eq!(cfg.sketch_ratio, 0.5);
        assert_eq!(cfg.sketch_count, 1);
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.mode, Mode::Sketched);
        match &cfg.network {
            NetworkSpec::Fc(fc) => {
                assert_eq!(fc.input_dim, 32);
                assert_eq!(fc.hidden_dims, vec![16]);
                assert_eq!(fc.output_dim, 1);
            }
            _ => panic!("expected fc network"),
        }
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let text = format!("{MINIMAL}batch = 16\n");
        let err = parse_config(&text, "test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = format!("{MINIMAL}eta = 0.1\neta = 0.2\n");
        let msg = parse_config(&text, "test").unwrap_err().to_string();
        assert!(msg.contains("eta") && msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn momentum_of_one_is_rejected() {
        let text = format!("{MINIMAL}rho = 1.0\n");
        let msg = parse_config(&text, "test").unwrap_err().to_string();
        assert!(msg.contains("rho"), "{msg}");
    }

    #[test]
    fn quarter_ratio_on_sixty_four_gives_sixteen() {
        let text = format!("{MINIMAL}sketch_ratio = 0.25\n");
        let cfg = parse_config(&text, "test").unwrap();
        let fed = cfg.fed_config(Loss::SquaredError);
        assert_eq!(fed.sketch_len(64), 16);
    }

    #[test]
    fn identity_hash_needs_full_ratio() {
        let text = format!("{MINIMAL}identity_hash = true\n");
        assert!(parse_config(&text, "test").is_err());
        let ok = format!("{MINIMAL}identity_hash = true\nsketch_ratio = 1.0\n");
        let cfg = parse_config(&ok, "test").unwrap();
        assert_eq!(cfg.fed_config(Loss::SquaredError).sketch_mode, SketchMode::Identity);
    }

    #[test]
    fn missing_network_or_dataset_is_an_error() {
        assert!(parse_config("dataset = teacher-fc,d=4,n=10,seed=1\n", "t").is_err());
        assert!(parse_config("network = fc,4,1\n", "t").is_err());
    }

    #[test]
    fn bad_values_name_their_key() {
        let text = format!("{MINIMAL}clients = many\n");
        let msg = parse_config(&text, "test").unwrap_err().to_string();
        assert!(msg.contains("clients"), "{msg}");
        let text = format!("{MINIMAL}sampled = 20\nclients = 4\n");
        let msg = parse_config(&text, "test").unwrap_err().to_string();
        assert!(msg.contains("sample"), "{msg}");
    }

    #[test]
    fn dataset_forms_parse() {
        assert_eq!(
            DatasetSource::parse("teacher-fc,d=32,n=2000,seed=1").unwrap(),
            DatasetSource::TeacherFc { dim: 32, count: 2000, seed: 1 }
        );
        assert_eq!(
            DatasetSource::parse("csv,/tmp/data.csv").unwrap(),
            DatasetSource::Csv(PathBuf::from("/tmp/data.csv"))
        );
        assert_eq!(
            DatasetSource::parse("idx,a.idx,b.idx").unwrap(),
            DatasetSource::Idx { images: "a.idx".into(), labels: "b.idx".into() }
        );
        assert!(DatasetSource::parse("teacher-fc,d=32").is_err());
        assert!(DatasetSource::parse("parquet,x").is_err());
    }

    #[test]
    fn conv_network_parses_with_scales() {
        let text = "network = conv,1,4,9,4,2\ndataset = teacher-fc,d=9,n=10,seed=1\nactivation_scale = 1.5\nresidual_scale = 0.3\n";
        let cfg = parse_config(text, "test").unwrap();
        match &cfg.network {
            NetworkSpec::ConvResNet(c) => {
                assert_eq!(c.channels, 4);
                assert_eq!(c.activation_scale, 1.5);
                assert_eq!(c.residual_scale, 0.3);
            }
            _ => panic!("expected conv network"),
        }
        let bad = format!("{MINIMAL}activation_scale = 1.5\n");
        assert!(parse_config(&bad, "test").is_err());
    }

    #[test]
    fn overrides_follow_flag_env_config_order() {
        let mut cfg = parse_config(&format!("{MINIMAL}seed = 7\n"), "test").unwrap();
        cfg.apply_overrides(None, None, None, None).unwrap();
        assert_eq!(cfg.seed, 7);
        cfg.apply_overrides(None, Some("11"), None, None).unwrap();
        assert_eq!(cfg.seed, 11);
        cfg.apply_overrides(Some(13), Some("11"), None, None).unwrap();
        assert_eq!(cfg.seed, 13);
        assert!(cfg.apply_overrides(None, Some("soon"), None, None).is_err());
        cfg.apply_overrides(None, None, Some("elsewhere".into()), Some("baseline")).unwrap();
        assert_eq!(cfg.out, PathBuf::from("elsewhere"));
        assert_eq!(cfg.mode, Mode::Baseline);
    }
}
