//! Prediction paths: student head only (S), the branch cascade scored by the
//! teacher head (T), and a convex blend of the two (ST).

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::distill::EraModel;
use crate::error::{Error, Result};
use crate::nn::{Graph, LinearLayer, Mode, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    S,
    T,
    ST,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::S => "s",
            InferenceMode::T => "t",
            InferenceMode::ST => "st",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(InferenceMode::S),
            "t" => Ok(InferenceMode::T),
            "st" => Ok(InferenceMode::ST),
            _ => Err(Error::Parameter(format!("unknown inference mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSpec {
    pub mode: InferenceMode,
    /// Weight of the student probabilities in ST mode.
    pub mu: f64,
    /// Number of branches `j` used by T and ST modes.
    pub branches: usize,
}

impl InferenceSpec {
    pub fn validate(&self, model: &EraModel) -> Result<()> {
        if self.branches > model.branches() {
            return Err(Error::Parameter(format!(
                "requested {} branches but the model has K = {}",
                self.branches,
                model.branches()
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Parameter(format!(
                "mu must lie in [0, 1], got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// Student and teacher-path probabilities from one eval-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub p_s: Tensor,
    pub p_t: Tensor,
    /// Mean `‖f_t − f̂_j‖` over the rows.
    pub approx_error: f64,
}

impl Predictions {
    /// `μ·p_s + (1 − μ)·p_t`.
    pub fn merged(&self, mu: f64) -> Tensor {
        let data = self
            .p_s
            .data()
            .iter()
            .zip(self.p_t.data())
            .map(|(s, t)| mu * s + (1.0 - mu) * t)
            .collect();
        Tensor::new(self.p_s.shape().to_vec(), data).expect("same shape")
    }

    pub fn select(&self, mode: InferenceMode, mu: f64) -> Tensor {
        match mode {
            InferenceMode::S => self.p_s.clone(),
            InferenceMode::T => self.p_t.clone(),
            InferenceMode::ST => self.merged(mu),
        }
    }
}

/// S and T probabilities with the first `j` branches, eval mode throughout.
pub fn predict(model: &EraModel, x: &Tensor, j: usize) -> Result<Predictions> {
    let net = &model.net;
    let mut g = Graph::read_only(&model.store);
    let xv = g.input(x.clone())?;
    let f_t = net.teacher_features(&mut g, xv)?;
    let f_s = net.student.forward(&mut g, xv, Mode::Eval)?;
    let state = net.cascade_from(&mut g, f_s, f_t, Mode::Eval, j, true)?;
    let logits_s = net.head_s.forward(&mut g, f_s)?;
    let p_s = g.tape.softmax(logits_s, 1.0)?;
    let last = *state.approximations.last().expect("f̂_0 always exists");
    let logits_t = net.head_t.forward(&mut g, last)?;
    let p_t = g.tape.softmax(logits_t, 1.0)?;
    Ok(Predictions {
        p_s: g.value(p_s).clone(),
        p_t: g.value(p_t).clone(),
        approx_error: state.approx_error(&g.tape),
    })
}

/// Class probabilities `batch × M` for the requested mode.
pub fn infer(model: &EraModel, x: &Tensor, spec: &InferenceSpec) -> Result<Tensor> {
    spec.validate(model)?;
    Ok(predict(model, x, spec.branches)?.select(spec.mode, spec.mu))
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate_accuracy(model: &EraModel, ds: &Dataset, spec: &InferenceSpec) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    Ok(accuracy(&infer(model, &ds.features, spec)?, &ds.labels))
}

/// Accuracies in all three modes plus the approximation error, from a single
/// pass with `j` branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub acc_s: f64,
    pub acc_t: f64,
    pub acc_st: f64,
    pub approx_error: f64,
}

pub fn evaluate_summary(model: &EraModel, ds: &Dataset, j: usize, mu: f64) -> Result<EvalSummary> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let p = predict(model, &ds.features, j)?;
    Ok(EvalSummary {
        acc_s: accuracy(&p.p_s, &ds.labels),
        acc_t: accuracy(&p.p_t, &ds.labels),
        acc_st: accuracy(&p.merged(mu), &ds.labels),
        approx_error: p.approx_error,
    })
}

/// Parameter and multiply-accumulate counts of the deployed paths.
/// Multiply-accumulates count linear layers only, per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub branches: usize,
    /// Student encoder plus student head: the S-mode network.
    pub s_params: usize,
    pub s_macs: usize,
    /// Student encoder, `P_0..P_j`, branches `1..j` and the teacher head.
    pub t_params: usize,
    pub t_macs: usize,
    /// Branches `1..j` plus `P_0..P_j`.
    pub overhead_params: usize,
    pub overhead_macs: usize,
}

fn linear_macs(layers: &[&LinearLayer]) -> usize {
    layers.iter().map(|l| l.in_dim * l.out_dim).sum()
}

pub fn cost_report(model: &EraModel, j: usize) -> Result<CostReport> {
    if j > model.branches() {
        return Err(Error::Parameter(format!(
            "requested {j} branches but the model has K = {}",
            model.branches()
        )));
    }
    let net = &model.net;
    let count = |ids: Vec<ParamId>| model.store.count(&ids);
    let encoder_params = count(net.student.params());
    let encoder_macs = linear_macs(
        &net.student
            .blocks
            .iter()
            .map(|b| &b.linear)
            .collect::<Vec<_>>(),
    );
    let mut overhead_ids = Vec::new();
    let mut overhead_layers: Vec<&LinearLayer> = Vec::new();
    for p in &net.projections[..=j] {
        overhead_ids.extend(p.params());
        overhead_layers.push(p);
    }
    for b in &net.branches[..j] {
        overhead_ids.extend(b.params());
        overhead_layers.extend(b.blocks.iter().map(|blk| &blk.linear));
    }
    let overhead_params = count(overhead_ids);
    let overhead_macs = linear_macs(&overhead_layers);
    Ok(CostReport {
        branches: j,
        s_params: encoder_params + count(net.head_s.params()),
        s_macs: encoder_macs + linear_macs(&[&net.head_s.linear]),
        t_params: encoder_params + overhead_params + count(net.head_t.params()),
        t_macs: encoder_macs + overhead_macs + linear_macs(&[&net.head_t.linear]),
        overhead_params,
        overhead_macs,
    })
}
