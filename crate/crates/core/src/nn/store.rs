use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not parameters: never differentiated,
    /// never touched by the optimizer.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "bn_scale",
            ParamKind::BnShift => "bn_shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "bn_scale" => ParamKind::BnScale,
            "bn_shift" => ParamKind::BnShift,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub trainable: bool,
    /// Optimizer momentum buffer, same length as `value`.
    pub velocity: Vec<f64>,
}

/// Flat, ordered container for every parameter and buffer of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n = value.len();
        self.params.push(Param {
            name,
            kind,
            value,
            trainable: !kind.is_buffer(),
            velocity: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Overwrites a value, keeping the shape fixed.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable && !p.kind.is_buffer();
    }

    /// Copies values (not optimizer state) for every name under `prefix`
    /// from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = self.find(&p.name).ok_or_else(|| {
                Error::Spec(format!(
                    "parameter {} missing from destination model",
                    p.name
                ))
            })?;
            self.set_value(id, p.value.clone())?;
            copied += 1;
        }
        Ok(copied)
    }

    /// Number of scalar entries across the given ids, excluding buffers.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter()
            .map(|&id| self.get(id))
            .filter(|p| !p.kind.is_buffer())
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds `N(0, scale²)` noise to every trainable, non-buffer parameter.
    /// Moves freshly initialized branches off their all-zero output.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        for p in &mut self.params {
            if !p.trainable || p.kind.is_buffer() {
                continue;
            }
            let mut rng = crate::seed::rng(seed, &format!("jitter.{}", p.name));
            for v in p.value.data_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}
