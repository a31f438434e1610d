//! Flat `key = value` run configuration with dotted keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use era_core::data::{generate, load_csv, CsvSchema, Dataset, SyntheticSpec};
use era_core::distill::{BranchFeed, TeacherTopology, Topology, TrainConfig};
use era_core::inference::InferenceMode;
use era_core::losses::{LossWeights, Schedule};

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_DIR_ENV: &str = "ERA_OUTPUT_DIR";

/// Every accepted key with its default and a one-line description, in the
/// order the resolved config is written. Defaults describe the reference
/// task.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "run.id",
        "default",
        "run directory name under the output root",
    ),
    (
        "run.output_dir",
        "",
        "output root; empty means $ERA_OUTPUT_DIR, then ./runs",
    ),
    ("data.classes", "5", "number of classes M"),
    ("data.input_dim", "16", "input feature dimension"),
    (
        "data.samples_per_class",
        "400",
        "samples per class before the 80/20 train/test split",
    ),
    (
        "data.mean_spread",
        "1.0",
        "standard deviation of the random cluster means",
    ),
    (
        "data.cluster_scale",
        "1.0",
        "standard deviation around each mean",
    ),
    (
        "data.label_noise",
        "0.0",
        "fraction of labels redrawn uniformly",
    ),
    ("data.seed", "1000", "seed for cluster means and samples"),
    (
        "data.train_csv",
        "",
        "optional CSV training set; overrides the synthetic one",
    ),
    (
        "data.test_csv",
        "",
        "optional CSV test set; overrides the synthetic one",
    ),
    (
        "teacher.widths",
        "64x32",
        "teacher block widths; the last is C_t",
    ),
    ("teacher.epochs", "30", "teacher training epochs"),
    (
        "teacher.learning_rate",
        "0.05",
        "teacher base learning rate",
    ),
    ("teacher.batch_size", "128", "teacher batch size"),
    (
        "student.widths",
        "2x8",
        "student block widths; the last is C_s",
    ),
    ("model.branches", "4", "residual branch count K"),
    ("model.blocks", "2", "blocks per branch m"),
    (
        "model.branch_width",
        "0",
        "branch hidden width; 0 means C_s",
    ),
    ("model.branch_feed", "cascaded", "cascaded or parallel"),
    ("train.epochs", "100", "distillation epochs"),
    (
        "train.stop_epoch",
        "0",
        "stop after this epoch and checkpoint; 0 runs to the end",
    ),
    ("train.batch_size", "128", "distillation batch size"),
    (
        "train.learning_rate",
        "0.01",
        "distillation base learning rate",
    ),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.0005", "SGD weight decay"),
    ("train.seed", "0", "seed for initialization and batch order"),
    (
        "train.head_t_frozen",
        "true",
        "freeze the teacher classifier during distillation",
    ),
    (
        "train.detach_targets",
        "true",
        "treat residual targets as constants",
    ),
    ("loss.alpha", "1.0", "cross-entropy weight"),
    ("loss.beta", "2.0", "KL weight"),
    ("loss.gamma", "1.0", "feature-regression weight"),
    ("loss.lambda", "1.0", "per-branch classification weight"),
    ("loss.temperature", "4.0", "distillation temperature"),
    ("loss.schedule", "exp_decay", "per-branch weight schedule"),
    ("infer.mode", "st", "s, t or st"),
    ("infer.mu", "0.5", "student weight of the merged prediction"),
    (
        "infer.branches",
        "all",
        "branches used at inference; all means K",
    ),
    ("ablate.seeds", "5", "seeds per ablation setting"),
];

/// Raw key/value pairs, validated against [`KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> Result<&'static str, CliError> {
    KEYS.iter()
        .map(|&(k, _, _)| k)
        .find(|&k| k == key)
        .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = known(key)?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected `key = value`", no + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key in table order, one `key = value` line each.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|&(k, _, _)| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    pub fn resolve(&self) -> Result<Settings, CliError> {
        Settings::from_raw(self)
    }
}

fn parse<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.get(key)
        .parse()
        .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
}

fn parse_bool(raw: &RawConfig, key: &str) -> Result<bool, CliError> {
    match raw.get(key) {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(CliError::Usage(format!(
            "config key `{key}`: expected true or false, got `{other}`"
        ))),
    }
}

fn parse_widths(raw: &RawConfig, key: &str) -> Result<Vec<usize>, CliError> {
    raw.get(key)
        .split(['x', ','])
        .map(|w| w.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
}

fn optional_path(raw: &RawConfig, key: &str) -> Option<PathBuf> {
    let v = raw.get(key);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Typed view of a resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub raw: RawConfig,
    pub run_id: String,
    pub output_root: PathBuf,
    pub data: SyntheticData,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub teacher_widths: Vec<usize>,
    pub teacher_epochs: usize,
    pub teacher_learning_rate: f64,
    pub teacher_batch_size: usize,
    pub student_widths: Vec<usize>,
    pub branches: usize,
    pub blocks: usize,
    pub branch_width: usize,
    pub branch_feed: BranchFeed,
    pub train: TrainConfig,
    pub stop_epoch: usize,
    pub infer_mode: InferenceMode,
    /// `None` means all `K` branches.
    pub infer_branches: Option<usize>,
    pub ablate_seeds: u64,
}

/// Synthetic data parameters; means are drawn from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub mean_spread: f64,
    pub cluster_scale: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Settings {
    fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let run_id = raw.get("run.id").to_string();
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == "." || run_id == ".." {
            return Err(CliError::Usage(format!(
                "config key `run.id`: invalid run id `{run_id}`"
            )));
        }
        let output_root = match raw.get("run.output_dir") {
            "" => std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
            dir => PathBuf::from(dir),
        };
        let branches: usize = parse(raw, "model.branches")?;
        let weights = LossWeights {
            alpha: parse(raw, "loss.alpha")?,
            beta: parse(raw, "loss.beta")?,
            gamma: parse(raw, "loss.gamma")?,
            lambda: parse(raw, "loss.lambda")?,
            temperature: parse(raw, "loss.temperature")?,
            branches,
            schedule: parse::<Schedule>(raw, "loss.schedule")?,
            mu: parse(raw, "infer.mu")?,
        };
        let train = TrainConfig {
            epochs: parse(raw, "train.epochs")?,
            batch_size: parse(raw, "train.batch_size")?,
            learning_rate: parse(raw, "train.learning_rate")?,
            momentum: parse(raw, "train.momentum")?,
            weight_decay: parse(raw, "train.weight_decay")?,
            seed: parse(raw, "train.seed")?,
            weights,
            head_t_frozen: parse_bool(raw, "train.head_t_frozen")?,
            detach_targets: parse_bool(raw, "train.detach_targets")?,
        };
        train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let stop_epoch: usize = parse(raw, "train.stop_epoch")?;
        if stop_epoch > train.epochs {
            return Err(CliError::Usage(format!(
                "config key `train.stop_epoch`: {stop_epoch} exceeds train.epochs = {}",
                train.epochs
            )));
        }
        let infer_branches = match raw.get("infer.branches") {
            "all" => None,
            _ => Some(parse(raw, "infer.branches")?),
        };
        let mut resolved = raw.clone();
        resolved.set("run.output_dir", &output_root.to_string_lossy())?;
        let s = Settings {
            raw: resolved,
            run_id,
            output_root,
            data: SyntheticData {
                classes: parse(raw, "data.classes")?,
                input_dim: parse(raw, "data.input_dim")?,
                samples_per_class: parse(raw, "data.samples_per_class")?,
                mean_spread: parse(raw, "data.mean_spread")?,
                cluster_scale: parse(raw, "data.cluster_scale")?,
                label_noise: parse(raw, "data.label_noise")?,
                seed: parse(raw, "data.seed")?,
            },
            train_csv: optional_path(raw, "data.train_csv"),
            test_csv: optional_path(raw, "data.test_csv"),
            teacher_widths: parse_widths(raw, "teacher.widths")?,
            teacher_epochs: parse(raw, "teacher.epochs")?,
            teacher_learning_rate: parse(raw, "teacher.learning_rate")?,
            teacher_batch_size: parse(raw, "teacher.batch_size")?,
            student_widths: parse_widths(raw, "student.widths")?,
            branches,
            blocks: parse(raw, "model.blocks")?,
            branch_width: parse(raw, "model.branch_width")?,
            branch_feed: parse(raw, "model.branch_feed")?,
            train,
            stop_epoch,
            infer_mode: parse(raw, "infer.mode")?,
            infer_branches,
            ablate_seeds: parse(raw, "ablate.seeds")?,
        };
        s.topology()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        s.teacher_config(0)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(s)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.run_id)
    }

    pub fn teacher_topology(&self) -> TeacherTopology {
        TeacherTopology {
            input_dim: self.data.input_dim,
            num_classes: self.data.classes,
            widths: self.teacher_widths.clone(),
        }
    }

    pub fn topology(&self) -> Topology {
        Topology {
            teacher: self.teacher_topology(),
            student_widths: self.student_widths.clone(),
            branches: self.branches,
            blocks_per_branch: self.blocks,
            branch_width: self.branch_width,
            branch_feed: self.branch_feed,
        }
    }

    /// Distillation settings for seed offset `offset`.
    pub fn train_config(&self, offset: u64) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed + offset,
            ..self.train.clone()
        }
    }

    /// Teacher training shares momentum and weight decay with distillation.
    pub fn teacher_config(&self, offset: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs,
            batch_size: self.teacher_batch_size,
            learning_rate: self.teacher_learning_rate,
            ..self.train_config(offset)
        }
    }

    pub fn synthetic_spec(&self, offset: u64) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec::with_random_means(
            d.classes,
            d.input_dim,
            d.samples_per_class,
            d.mean_spread,
            d.cluster_scale,
            d.label_noise,
            d.seed + offset,
        )
    }

    /// Train and test sets for seed offset `offset`. CSV paths, when set,
    /// replace the matching synthetic split.
    pub fn datasets(&self, offset: u64) -> Result<(Dataset, Dataset), CliError> {
        let (mut train, mut test) =
            generate(&self.synthetic_spec(offset)).map_err(CliError::from_core)?;
        let schema = CsvSchema {
            input_dim: Some(self.data.input_dim),
            num_classes: Some(self.data.classes),
        };
        if let Some(p) = &self.train_csv {
            train = load_csv(p, schema).map_err(CliError::from_core)?;
        }
        if let Some(p) = &self.test_csv {
            test = load_csv(p, schema).map_err(CliError::from_core)?;
        }
        Ok((train, test))
    }

    /// Last epoch a distillation run executes.
    pub fn last_epoch(&self) -> usize {
        if self.stop_epoch == 0 {
            self.train.epochs
        } else {
            self.stop_epoch
        }
    }
}
