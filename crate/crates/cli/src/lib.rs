//! Command-line harness: configuration, teacher training, distillation,
//! evaluation, ablation grids and the gradient sweep.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use era_core::distill::distill_epochs;
use era_core::gradsuite::{run_suite, SuiteConfig, DEFAULT_EPS, DEFAULT_TOL};
use era_core::inference::{evaluate_accuracy, InferenceSpec};
use serde_json::{json, Value};

use crate::checkpoint::{save_era, save_teacher, Checkpoint};
use crate::config::{RawConfig, Settings, KEYS};
use crate::error::CliError;
use crate::experiment::{ablate, write_table, Suite};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher_metrics.jsonl";
pub const ERA_CKPT: &str = "era.ckpt";
pub const ERA_METRICS: &str = "era_metrics.jsonl";
pub const EVAL_JSON: &str = "eval.json";

/// Short flag spellings for frequently overridden keys.
const ALIASES: &[(&str, &str)] = &[
    ("run.id", "run_id"),
    ("run.output_dir", "output_dir"),
    ("infer.mode", "mode"),
    ("infer.mu", "mu"),
    ("infer.branches", "branches"),
];

fn with_config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("flat `key = value` config file"),
    );
    KEYS.iter().fold(cmd, |cmd, &(key, default, help)| {
        let mut arg = Arg::new(key)
            .long(key)
            .value_name("VALUE")
            .help(format!("{help} [default: {default}]"))
            .help_heading("Config keys");
        if let Some(&(_, alias)) = ALIASES.iter().find(|(k, _)| *k == key) {
            arg = arg.visible_alias(alias);
        }
        cmd.arg(arg)
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

pub fn command() -> Command {
    Command::new("era")
        .about("Residual-approximation feature distillation experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_args(
            Command::new("train-teacher").about("Train the teacher and write teacher.ckpt"),
        ))
        .subcommand(with_config_args(
            Command::new("distill")
                .about("Distill the student with residual branches and write era.ckpt")
                .arg(path_arg(
                    "teacher",
                    "teacher checkpoint [default: <run dir>/teacher.ckpt]",
                ))
                .arg(path_arg("resume", "continue from an era checkpoint")),
        ))
        .subcommand(with_config_args(
            Command::new("eval")
                .about("Top-1 accuracy of an era checkpoint on the test split")
                .arg(path_arg(
                    "checkpoint",
                    "era checkpoint [default: <run dir>/era.ckpt]",
                ))
                .arg(
                    Arg::new("sweep")
                        .long("sweep")
                        .action(ArgAction::SetTrue)
                        .help("evaluate every branch count 0..=K"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("ablate")
                .about("Run an ablation grid over seeds")
                .arg(
                    Arg::new("suite")
                        .required(true)
                        .value_parser(Suite::ALL.map(|s| s.as_str())),
                ),
        ))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every op, layer and loss")
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("100"),
                )
                .arg(
                    Arg::new("eps")
                        .long("eps")
                        .value_parser(clap::value_parser!(f64))
                        .help(format!("finite-difference step [default: {DEFAULT_EPS:e}]")),
                )
                .arg(
                    Arg::new("tol")
                        .long("tol")
                        .value_parser(clap::value_parser!(f64))
                        .help(format!(
                            "relative error tolerance [default: {DEFAULT_TOL:e}]"
                        )),
                )
                .arg(Arg::new("inject-fault").long("inject-fault").hide(true)),
        )
}

fn settings(m: &ArgMatches) -> Result<Settings, CliError> {
    let mut raw = RawConfig::default();
    if let Some(p) = m.get_one::<PathBuf>("config") {
        raw.apply_file(p)?;
    }
    for &(key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            raw.set(key, v)?;
        }
    }
    raw.resolve()
}

fn prepare_dir(s: &Settings, config_name: &str) -> Result<PathBuf, CliError> {
    let dir = s.run_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io("cannot create", &dir, e))?;
    write(&dir.join(config_name), &s.raw.render())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io("cannot write", path, e))
}

fn train_teacher_cmd(m: &ArgMatches) -> Result<(), CliError> {
    let s = settings(m)?;
    let dir = prepare_dir(&s, "teacher.conf")?;
    let p = experiment::prepare(&s, 0)?;
    let cfg = s.teacher_config(0);
    save_teacher(&p.teacher, cfg.epochs, cfg.seed).write(&dir.join(TEACHER_CKPT))?;
    write(
        &dir.join(TEACHER_METRICS),
        &metrics::join_lines(p.teacher_log.iter().map(metrics::teacher_record)),
    )?;
    let acc = p.teacher_log.last().map_or(f64::NAN, |e| e.acc);
    println!("teacher test accuracy {acc:.4}; wrote {}", dir.display());
    Ok(())
}

fn distill_cmd(m: &ArgMatches) -> Result<(), CliError> {
    let s = settings(m)?;
    let dir = prepare_dir(&s, "era.conf")?;
    let cfg = s.train_config(0);
    let last = s.last_epoch();
    let (train, test) = s.datasets(0)?;
    let metrics_path = dir.join(ERA_METRICS);
    let (mut model, first, mut lines) = match m.get_one::<PathBuf>("resume") {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            let want = s.topology().to_string();
            if ckpt.topology != want {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint topology `{}` does not match config topology `{want}`",
                    ckpt.topology
                )));
            }
            if ckpt.rng != cfg.seed {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint seed {} does not match train.seed {}",
                    ckpt.rng, cfg.seed
                )));
            }
            if ckpt.epoch >= last {
                return Err(CliError::Usage(format!(
                    "checkpoint is at epoch {}, nothing left before epoch {last}",
                    ckpt.epoch
                )));
            }
            let previous = fs::read_to_string(&metrics_path).unwrap_or_default();
            let kept = metrics::lines_through(&previous, ckpt.epoch)?;
            (ckpt.era()?, ckpt.epoch + 1, kept)
        }
        None => {
            let path = m
                .get_one::<PathBuf>("teacher")
                .cloned()
                .unwrap_or_else(|| dir.join(TEACHER_CKPT));
            let ckpt = Checkpoint::read(&path)?;
            let want = s.teacher_topology().to_string();
            if ckpt.topology != want {
                return Err(CliError::Checkpoint(format!(
                    "teacher checkpoint topology `{}` does not match config topology `{want}`",
                    ckpt.topology
                )));
            }
            let teacher = ckpt.teacher()?;
            let mut model = era_core::distill::EraModel::new(s.topology(), cfg.seed)
                .map_err(CliError::from_core)?;
            model.load_teacher(&teacher).map_err(CliError::from_core)?;
            (model, 0, Vec::new())
        }
    };
    let log = distill_epochs(&mut model, &train, &test, &cfg, first..=last)
        .map_err(CliError::from_core)?;
    lines.extend(log.iter().map(metrics::epoch_record));
    save_era(&model, last, cfg.seed).write(&dir.join(ERA_CKPT))?;
    write(&metrics_path, &metrics::join_lines(lines))?;
    if let Some(e) = log.last() {
        println!(
            "epoch {}: S {:.4} T {:.4} ST {:.4} approx_error {:.4}; wrote {}",
            e.epoch,
            e.acc_s,
            e.acc_t,
            e.acc_st,
            e.approx_error,
            dir.display()
        );
    }
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> Result<(), CliError> {
    let s = settings(m)?;
    let dir = prepare_dir(&s, "eval.conf")?;
    let path = m
        .get_one::<PathBuf>("checkpoint")
        .cloned()
        .unwrap_or_else(|| dir.join(ERA_CKPT));
    let model = Checkpoint::read(&path)?.era()?;
    let k = model.branches();
    let j = s.infer_branches.unwrap_or(k);
    if j > k {
        return Err(CliError::Usage(format!(
            "--branches {j} exceeds the checkpoint's K = {k}"
        )));
    }
    let (_, test) = s.datasets(0)?;
    let t = &model.topology.teacher;
    if test.input_dim() != t.input_dim || test.num_classes != t.num_classes {
        return Err(CliError::Checkpoint(format!(
            "checkpoint expects input {} with {} classes, dataset has input {} with {} classes",
            t.input_dim,
            t.num_classes,
            test.input_dim(),
            test.num_classes
        )));
    }
    let mu = s.train.weights.mu;
    let counts: Vec<usize> = if m.get_flag("sweep") {
        (0..=k).collect()
    } else {
        vec![j]
    };
    let mut records = Vec::new();
    for branches in counts {
        let spec = InferenceSpec {
            mode: s.infer_mode,
            mu,
            branches,
        };
        let acc = evaluate_accuracy(&model, &test, &spec).map_err(CliError::from_core)?;
        println!(
            "mode={} mu={mu} branches={branches} accuracy={acc:.4}",
            s.infer_mode.as_str()
        );
        records.push(json!({
            "mode": s.infer_mode.as_str(),
            "mu": mu,
            "branches": branches,
            "accuracy": acc,
        }));
    }
    let text = serde_json::to_string_pretty(&Value::Array(records)).expect("plain JSON values");
    write(&dir.join(EVAL_JSON), &(text + "\n"))
}

fn ablate_cmd(m: &ArgMatches) -> Result<(), CliError> {
    let s = settings(m)?;
    let suite: Suite = m.get_one::<String>("suite").expect("required").parse()?;
    let dir = prepare_dir(&s, &format!("ablate_{suite}.conf"))?;
    println!("{}", experiment::CSV_HEADER.join(","));
    let rows = ablate(&s, suite, |row| {
        println!("{}", experiment::row_fields(row).join(","))
    })?;
    let path = dir.join(format!("ablate_{suite}.csv"));
    write_table(&rows, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck_cmd(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = SuiteConfig {
        seeds: *m.get_one::<usize>("seeds").expect("defaulted"),
        eps: m.get_one::<f64>("eps").copied().unwrap_or(DEFAULT_EPS),
        tol: m.get_one::<f64>("tol").copied().unwrap_or(DEFAULT_TOL),
        fault: m.get_one::<String>("inject-fault").cloned(),
        ..SuiteConfig::default()
    };
    let outcomes = run_suite(&cfg).map_err(CliError::from_core)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<5} {:<34} cases={} redraws={} max_rel_error={:.3e} worst_seed={}",
            o.kind.as_str(),
            o.name,
            o.cases,
            o.redraws,
            o.max_rel_error,
            o.worst_seed
        );
        if !o.passed {
            failed.push(format!(
                "{} (max relative error {:.3e})",
                o.name, o.max_rel_error
            ));
        }
    }
    if failed.is_empty() {
        println!("all {} checks within {:e}", outcomes.len(), cfg.tol);
        Ok(())
    } else {
        Err(CliError::GradCheck(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match matches.subcommand() {
        Some(("train-teacher", m)) => train_teacher_cmd(m),
        Some(("distill", m)) => distill_cmd(m),
        Some(("eval", m)) => eval_cmd(m),
        Some(("ablate", m)) => ablate_cmd(m),
        Some(("gradcheck", m)) => gradcheck_cmd(m),
        _ => unreachable!("clap enforces a known subcommand"),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }
}
