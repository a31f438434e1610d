//! Parametric layers, composite blocks and the optimizer.

mod blocks;
mod graph;
mod layers;
mod optim;
mod store;

pub use blocks::{ClassifierHead, MlpEncoder, ResMBranch};
pub use graph::{Gradients, Graph};
pub use layers::{BatchNormLayer, Block, LinearLayer, Mode, BN_EPS, BN_MOMENTUM};
pub use optim::Sgd;
pub use store::{Param, ParamId, ParamKind, ParamStore};

use crate::autodiff::{compare_gradients, GradReport, Var};
use crate::error::{Error, Result};

/// Finite-difference check of `f` with respect to every trainable parameter
/// in `store`. `f` rebuilds the scalar objective from scratch on each call.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (id, ga) in &grads.entries {
        for (i, &a) in ga.iter().enumerate() {
            let orig = store.value(*id).data()[i];
            store.get_mut(*id).value.data_mut()[i] = orig + eps;
            let plus = eval(store, &f).map_err(|e| tag(e, store, *id, i))?;
            store.get_mut(*id).value.data_mut()[i] = orig - eps;
            let minus = eval(store, &f).map_err(|e| tag(e, store, *id, i))?;
            store.get_mut(*id).value.data_mut()[i] = orig;
            analytic.push(a);
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }
    Ok(compare_gradients(&analytic, &numeric, tol))
}

fn eval<F>(store: &mut ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

fn tag(e: Error, store: &ParamStore, id: ParamId, i: usize) -> Error {
    match e {
        Error::Numeric { term, detail } => Error::Numeric {
            term,
            detail: format!("{detail} (perturbing {}[{i}])", store.get(id).name),
        },
        other => other,
    }
}
