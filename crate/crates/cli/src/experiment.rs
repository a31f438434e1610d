//! Per-seed pipelines and ablation grids.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use era_core::data::Dataset;
use era_core::distill::{
    distill, train_student_ce, train_teacher, BranchFeed, EpochMetrics, EraModel, TeacherEpoch,
    TeacherModel, Topology, TrainConfig,
};
use era_core::inference::evaluate_summary;
use era_core::losses::Schedule;

use crate::config::Settings;
use crate::error::CliError;

/// Data and trained teacher for one seed offset.
pub struct Prepared {
    pub offset: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: TeacherModel,
    pub teacher_log: Vec<TeacherEpoch>,
}

pub fn prepare(s: &Settings, offset: u64) -> Result<Prepared, CliError> {
    let (train, test) = s.datasets(offset)?;
    let (teacher, teacher_log) = train_teacher(
        s.teacher_topology(),
        &train,
        &test,
        &s.teacher_config(offset),
    )
    .map_err(CliError::from_core)?;
    Ok(Prepared {
        offset,
        train,
        test,
        teacher,
        teacher_log,
    })
}

/// A fresh student with the prepared teacher loaded.
pub fn student(p: &Prepared, topology: Topology, cfg: &TrainConfig) -> Result<EraModel, CliError> {
    let mut m = EraModel::new(topology, cfg.seed).map_err(CliError::from_core)?;
    m.load_teacher(&p.teacher).map_err(CliError::from_core)?;
    Ok(m)
}

pub enum Outcome {
    Finished {
        model: Box<EraModel>,
        log: Vec<EpochMetrics>,
    },
    /// A loss term went non-finite; the message names it.
    NanAbort(String),
}

/// Full distillation run. Divergence is an outcome, other errors propagate.
pub fn run_era(p: &Prepared, topology: Topology, cfg: &TrainConfig) -> Result<Outcome, CliError> {
    let mut model = student(p, topology, cfg)?;
    match distill(&mut model, &p.train, &p.test, cfg) {
        Ok(log) => Ok(Outcome::Finished {
            model: Box::new(model),
            log,
        }),
        Err(e) if e.is_numeric() => Ok(Outcome::NanAbort(e.to_string())),
        Err(e) => Err(CliError::from_core(e)),
    }
}

/// The same student trained with cross-entropy only.
pub fn run_ce(p: &Prepared, s: &Settings) -> Result<Vec<EpochMetrics>, CliError> {
    let mut topo = s.topology();
    topo.branches = 0;
    let mut cfg = s.train_config(p.offset);
    cfg.weights.branches = 0;
    let mut model = student(p, topo, &cfg)?;
    train_student_ce(&mut model, &p.train, &p.test, &cfg).map_err(CliError::from_core)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Schedule,
    Branches,
    KmGrid,
    FrozenHead,
    BranchFeed,
    Detach,
}

/// `(m, K)` pairs of the branch-shape grid.
pub const KM_GRID: [(usize, usize); 8] = [
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (2, 4),
    (2, 5),
    (3, 4),
];

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Schedule,
        Suite::Branches,
        Suite::KmGrid,
        Suite::FrozenHead,
        Suite::BranchFeed,
        Suite::Detach,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Schedule => "schedule",
            Suite::Branches => "branches",
            Suite::KmGrid => "km_grid",
            Suite::FrozenHead => "frozen_head",
            Suite::BranchFeed => "branch_feed",
            Suite::Detach => "detach",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Suite::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown ablation suite `{s}`")))
    }
}

/// Final test-set numbers of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub acc_s: f64,
    pub acc_t: f64,
    pub acc_st: f64,
    pub approx_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub suite: Suite,
    pub setting: String,
    pub seed: u64,
    /// `None` when the run diverged.
    pub scores: Option<Scores>,
}

impl AblationRow {
    pub fn status(&self) -> &'static str {
        if self.scores.is_some() {
            "ok"
        } else {
            "NaN-abort"
        }
    }
}

fn final_scores(log: &[EpochMetrics]) -> Scores {
    let e = log.last().expect("a finished run logs epoch 0");
    Scores {
        acc_s: e.acc_s,
        acc_t: e.acc_t,
        acc_st: e.acc_st,
        approx_error: e.approx_error,
    }
}

/// One configured variant of the settings' topology and training config.
struct Variant {
    setting: String,
    topology: Topology,
    config: TrainConfig,
}

fn variants(s: &Settings, suite: Suite, offset: u64) -> Vec<Variant> {
    let base = |setting: String| Variant {
        setting,
        topology: s.topology(),
        config: s.train_config(offset),
    };
    match suite {
        Suite::Schedule => Schedule::ALL
            .into_iter()
            .map(|k| {
                let mut v = base(k.to_string());
                v.config.weights.schedule = k;
                v
            })
            .collect(),
        Suite::Branches => vec![base(String::new())],
        Suite::KmGrid => KM_GRID
            .into_iter()
            .map(|(m, k)| {
                let mut v = base(format!("m={m} K={k}"));
                v.topology.blocks_per_branch = m;
                v.topology.branches = k;
                v.config.weights.branches = k;
                v
            })
            .collect(),
        Suite::FrozenHead => [("frozen", true), ("learnable", false)]
            .into_iter()
            .map(|(name, frozen)| {
                let mut v = base(name.into());
                v.config.head_t_frozen = frozen;
                v
            })
            .collect(),
        Suite::BranchFeed => [BranchFeed::Cascaded, BranchFeed::Parallel]
            .into_iter()
            .map(|feed| {
                let mut v = base(feed.to_string());
                v.topology.branch_feed = feed;
                v
            })
            .collect(),
        Suite::Detach => [("detached", true), ("attached", false)]
            .into_iter()
            .map(|(name, detach)| {
                let mut v = base(name.into());
                v.config.detach_targets = detach;
                v
            })
            .collect(),
    }
}

/// Runs the suite over seed offsets `0..ablate.seeds`, reporting each row as
/// it completes. The branches suite trains once per seed and evaluates every
/// truncation `j = 0..=K`.
pub fn ablate(
    s: &Settings,
    suite: Suite,
    mut report: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    for offset in 0..s.ablate_seeds {
        let p = prepare(s, offset)?;
        let mut push = |row: AblationRow| {
            report(&row);
            rows.push(row);
        };
        for v in variants(s, suite, offset) {
            let outcome = run_era(&p, v.topology, &v.config)?;
            match (suite, outcome) {
                (Suite::Branches, Outcome::Finished { model, .. }) => {
                    for j in 0..=model.branches() {
                        let e = evaluate_summary(&model, &p.test, j, v.config.weights.mu)
                            .map_err(CliError::from_core)?;
                        push(AblationRow {
                            suite,
                            setting: format!("j={j}"),
                            seed: offset,
                            scores: Some(Scores {
                                acc_s: e.acc_s,
                                acc_t: e.acc_t,
                                acc_st: e.acc_st,
                                approx_error: e.approx_error,
                            }),
                        });
                    }
                }
                (Suite::Branches, Outcome::NanAbort(_)) => push(AblationRow {
                    suite,
                    setting: "all".into(),
                    seed: offset,
                    scores: None,
                }),
                (_, outcome) => push(AblationRow {
                    suite,
                    setting: v.setting,
                    seed: offset,
                    scores: match outcome {
                        Outcome::Finished { log, .. } => Some(final_scores(&log)),
                        Outcome::NanAbort(_) => None,
                    },
                }),
            }
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 8] = [
    "suite",
    "setting",
    "seed",
    "status",
    "acc_s",
    "acc_t",
    "acc_st",
    "approx_error",
];

pub fn row_fields(row: &AblationRow) -> [String; 8] {
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let sc = row.scores;
    [
        row.suite.to_string(),
        row.setting.clone(),
        row.seed.to_string(),
        row.status().to_string(),
        f(sc.map(|s| s.acc_s)),
        f(sc.map(|s| s.acc_t)),
        f(sc.map(|s| s.acc_st)),
        f(sc.map(|s| s.approx_error)),
    ]
}

pub fn write_table(rows: &[AblationRow], path: &Path) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::io("cannot write", path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for row in rows {
        w.write_record(row_fields(row)).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io("cannot write", path, e))
}
