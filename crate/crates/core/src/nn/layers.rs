use rand_distr::{Distribution, Normal};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

use super::graph::Graph;
use super::store::{ParamId, ParamKind, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_width(what: &str, g: &Graph<'_>, x: Var, width: usize) -> Result<()> {
    let (_, c) = g.value(x).dims2()?;
    if c != width {
        return Err(Error::Dimension(format!(
            "{what} expects input width {width}, got {c}"
        )));
    }
    Ok(())
}

/// Fully connected layer `y = x·Wᵀ + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::zeros(vec![out_dim, in_dim]),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(vec![out_dim]),
            )
        });
        LinearLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero bias. The stream is
    /// keyed on the parameter name.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let name = store.get(self.weight).name.clone();
        let mut rng = seed::rng(seed, &name);
        let normal = Normal::new(0.0, (2.0 / self.in_dim as f64).sqrt()).expect("valid std");
        let w = &mut store.get_mut(self.weight).value;
        for v in w.data_mut() {
            *v = normal.sample(&mut rng);
        }
        if let Some(b) = self.bias {
            store.get_mut(b).value.data_mut().fill(0.0);
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).value.data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).value.data_mut().fill(0.0);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for id in self.params() {
            store.set_trainable(id, trainable);
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        check_width("linear layer", g, x, self.in_dim)?;
        let w = g.param(self.weight)?;
        let wt = g.tape.transpose(w)?;
        let y = g.tape.matmul(x, wt)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::BnScale,
            Tensor::filled(vec![channels], 1.0),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ParamKind::BnShift,
            Tensor::zeros(vec![channels]),
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::RunningMean,
            Tensor::zeros(vec![channels]),
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::RunningVar,
            Tensor::filled(vec![channels], 1.0),
        );
        BatchNormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.get_mut(self.gamma).value.data_mut().fill(1.0);
        store.get_mut(self.beta).value.data_mut().fill(0.0);
        store.get_mut(self.running_mean).value.data_mut().fill(0.0);
        store.get_mut(self.running_var).value.data_mut().fill(1.0);
    }

    /// Trainable affine parameters only.
    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        vec![self.running_mean, self.running_var]
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for id in self.params() {
            store.set_trainable(id, trainable);
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode only reads the
    /// running estimates.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: Mode) -> Result<Var> {
        check_width("batch norm", g, x, self.channels)?;
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let n = stats.count as f64;
                let m = self.momentum;
                let store = g.store_mut()?;
                let rm = store.get_mut(self.running_mean).value.data_mut();
                for (r, b) in rm.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                let rv = store.get_mut(self.running_var).value.data_mut();
                for (r, b) in rv.iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * b * n / (n - 1.0);
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = g.store();
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                g.tape
                    .batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

/// `Linear → BatchNorm → (ReLU)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub linear: LinearLayer,
    pub bn: BatchNormLayer,
    pub relu: bool,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        relu: bool,
    ) -> Self {
        Block {
            linear: LinearLayer::new(store, &format!("{name}.fc"), in_dim, out_dim, true),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), out_dim),
            relu,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.linear.init(store, seed);
        self.bn.init(store);
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.linear.params();
        p.extend(self.bn.params());
        p
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        self.bn.buffers()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.linear.forward(g, x)?;
        let h = self.bn.forward(g, h, mode)?;
        if self.relu {
            g.tape.relu(h)
        } else {
            Ok(h)
        }
    }
}
