use crate::error::{Error, Result};

use super::graph::Gradients;
use super::store::ParamStore;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.entries {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let w = p.value.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(p.velocity.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *wi);
                *wi -= self.lr * *vi;
            }
            if !p.value.all_finite() {
                return Err(Error::numeric(
                    "update",
                    format!("parameter {} became non-finite", p.name),
                ));
            }
        }
        Ok(())
    }
}
