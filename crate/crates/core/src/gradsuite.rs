//! Finite-difference sweep over every tape operation, layer, block and
//! training objective, each on many independently drawn instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{check_gradients, GradReport, Tape, Var};
use crate::distill::{era_objective, BranchFeed, EraModel, TeacherTopology, Topology};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_logits, feature_mse, kl_distillation, logit_distillation, squared_error_mean,
    LossWeights,
};
use crate::nn::{
    check_param_gradients, BatchNormLayer, Block, ClassifierHead, Graph, LinearLayer, MlpEncoder,
    Mode, ParamStore, ResMBranch,
};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Instances with a relu input closer than this to zero are redrawn: a
/// central difference straddling the kink measures neither one-sided slope.
const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Layer,
    Loss,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Op => "op",
            CheckKind::Layer => "layer",
            CheckKind::Loss => "loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    /// Independent instances per check.
    pub seeds: usize,
    pub base_seed: u64,
    pub eps: f64,
    pub tol: f64,
    /// Name of a check whose analytic gradient is deliberately scaled by
    /// 1.01, as a negative control.
    pub fault: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: 100,
            base_seed: 0,
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub kind: CheckKind,
    pub cases: usize,
    /// Instances discarded for sitting on a relu kink.
    pub redraws: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

struct Ctx {
    eps: f64,
    tol: f64,
    fault: bool,
}

type CheckFn = fn(&mut ChaCha8Rng, &Ctx) -> Result<Option<GradReport>>;

struct Check {
    name: &'static str,
    kind: CheckKind,
    run: CheckFn,
}

const CHECKS: &[Check] = &[
    Check {
        name: "matmul_lhs",
        kind: CheckKind::Op,
        run: op_matmul_lhs,
    },
    Check {
        name: "matmul_rhs",
        kind: CheckKind::Op,
        run: op_matmul_rhs,
    },
    Check {
        name: "transpose",
        kind: CheckKind::Op,
        run: op_transpose,
    },
    Check {
        name: "add",
        kind: CheckKind::Op,
        run: op_add,
    },
    Check {
        name: "sub",
        kind: CheckKind::Op,
        run: op_sub,
    },
    Check {
        name: "mul",
        kind: CheckKind::Op,
        run: op_mul,
    },
    Check {
        name: "add_row_matrix",
        kind: CheckKind::Op,
        run: op_add_row_matrix,
    },
    Check {
        name: "add_row_vector",
        kind: CheckKind::Op,
        run: op_add_row_vector,
    },
    Check {
        name: "scale",
        kind: CheckKind::Op,
        run: op_scale,
    },
    Check {
        name: "relu",
        kind: CheckKind::Op,
        run: op_relu,
    },
    Check {
        name: "sum",
        kind: CheckKind::Op,
        run: op_sum,
    },
    Check {
        name: "mean",
        kind: CheckKind::Op,
        run: op_mean,
    },
    Check {
        name: "softmax",
        kind: CheckKind::Op,
        run: op_softmax,
    },
    Check {
        name: "log",
        kind: CheckKind::Op,
        run: op_log,
    },
    Check {
        name: "pick",
        kind: CheckKind::Op,
        run: op_pick,
    },
    Check {
        name: "batch_norm_train",
        kind: CheckKind::Op,
        run: op_bn_train,
    },
    Check {
        name: "batch_norm_eval",
        kind: CheckKind::Op,
        run: op_bn_eval,
    },
    Check {
        name: "linear_layer",
        kind: CheckKind::Layer,
        run: layer_linear,
    },
    Check {
        name: "batch_norm_layer_train",
        kind: CheckKind::Layer,
        run: layer_bn_train,
    },
    Check {
        name: "batch_norm_layer_eval",
        kind: CheckKind::Layer,
        run: layer_bn_eval,
    },
    Check {
        name: "block",
        kind: CheckKind::Layer,
        run: layer_block,
    },
    Check {
        name: "mlp_encoder",
        kind: CheckKind::Layer,
        run: layer_encoder,
    },
    Check {
        name: "resm_branch",
        kind: CheckKind::Layer,
        run: layer_branch,
    },
    Check {
        name: "classifier_head",
        kind: CheckKind::Layer,
        run: layer_head,
    },
    Check {
        name: "cross_entropy",
        kind: CheckKind::Loss,
        run: loss_ce,
    },
    Check {
        name: "kl_distillation",
        kind: CheckKind::Loss,
        run: loss_kl,
    },
    Check {
        name: "logit_distillation",
        kind: CheckKind::Loss,
        run: loss_kd,
    },
    Check {
        name: "feature_mse",
        kind: CheckKind::Loss,
        run: loss_feature_mse,
    },
    Check {
        name: "branch_feature_loss",
        kind: CheckKind::Loss,
        run: loss_branch_feature,
    },
    Check {
        name: "branch_classification_loss",
        kind: CheckKind::Loss,
        run: loss_branch_cls,
    },
    Check {
        name: "total_objective",
        kind: CheckKind::Loss,
        run: loss_total,
    },
];

/// Names and kinds of every check, in run order.
pub fn checks() -> Vec<(&'static str, CheckKind)> {
    CHECKS.iter().map(|c| (c.name, c.kind)).collect()
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    if cfg.seeds == 0 {
        return Err(Error::Parameter(
            "gradient suite needs at least one seed".into(),
        ));
    }
    if let Some(f) = &cfg.fault {
        if !CHECKS.iter().any(|c| c.name == f) {
            return Err(Error::Parameter(format!(
                "unknown check `{f}` for fault injection"
            )));
        }
    }
    CHECKS.iter().map(|c| run_check(c, cfg)).collect()
}

fn run_check(c: &Check, cfg: &SuiteConfig) -> Result<CheckOutcome> {
    let ctx = Ctx {
        eps: cfg.eps,
        tol: cfg.tol,
        fault: cfg.fault.as_deref() == Some(c.name),
    };
    let mut out = CheckOutcome {
        name: c.name,
        kind: c.kind,
        cases: 0,
        redraws: 0,
        max_rel_error: 0.0,
        worst_seed: cfg.base_seed,
        passed: true,
    };
    for i in 0..cfg.seeds as u64 {
        let s = cfg.base_seed + i;
        let mut report = None;
        for draw in 0..MAX_DRAWS {
            let mut rng = seed::rng(s, &format!("gradsuite.{}.{draw}", c.name));
            match (c.run)(&mut rng, &ctx).map_err(|e| e.in_term(c.name))? {
                Some(r) => {
                    report = Some(r);
                    break;
                }
                None => out.redraws += 1,
            }
        }
        let r = report.ok_or_else(|| {
            Error::State(format!("{}: no kink-free instance for seed {s}", c.name))
        })?;
        out.cases += 1;
        if r.max_rel_error > out.max_rel_error || r.max_rel_error.is_nan() {
            out.max_rel_error = r.max_rel_error;
            out.worst_seed = s;
        }
        out.passed &= r.passed();
    }
    Ok(out)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..m)).collect()
}

/// `Σ y ⊙ w`, so every output coordinate gets a distinct upstream gradient.
fn readout(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone())?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Identity in the forward pass. Under fault injection the backward rule
/// is wrong by 1%.
fn finish(t: &mut Tape, loss: Var, fault: bool) -> Result<Var> {
    if !fault {
        return Ok(loss);
    }
    t.custom_unary(
        "faulty_backward",
        loss,
        |x| x.to_vec(),
        |_, _, g| g.iter().map(|g| 1.01 * g).collect(),
    )
}

fn tape_check<F>(ctx: &Ctx, x: &Tensor, f: F) -> Result<Option<GradReport>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let fault = ctx.fault;
    let r = check_gradients(
        |t, v| {
            let l = f(t, v)?;
            finish(t, l, fault)
        },
        x,
        ctx.eps,
        ctx.tol,
    )?;
    Ok(Some(r))
}

fn op_matmul_lhs(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, b, w) = (
        normal(rng, &[3, 4]),
        normal(rng, &[4, 2]),
        normal(rng, &[3, 2]),
    );
    tape_check(ctx, &x, |t, v| {
        let b = t.constant(b.clone())?;
        let y = t.matmul(v, b)?;
        readout(t, y, &w)
    })
}

fn op_matmul_rhs(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (a, x, w) = (
        normal(rng, &[3, 4]),
        normal(rng, &[4, 2]),
        normal(rng, &[3, 2]),
    );
    tape_check(ctx, &x, |t, v| {
        let a = t.constant(a.clone())?;
        let y = t.matmul(a, v)?;
        readout(t, y, &w)
    })
}

fn op_transpose(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (normal(rng, &[3, 2]), normal(rng, &[2, 3]));
    tape_check(ctx, &x, |t, v| {
        let y = t.transpose(v)?;
        readout(t, y, &w)
    })
}

fn op_add(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, c, w) = (
        normal(rng, &[3, 4]),
        normal(rng, &[3, 4]),
        normal(rng, &[3, 4]),
    );
    tape_check(ctx, &x, |t, v| {
        let c = t.constant(c.clone())?;
        let y = t.add(v, c)?;
        let y = t.add(y, v)?;
        readout(t, y, &w)
    })
}

fn op_sub(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, c, w) = (
        normal(rng, &[3, 4]),
        normal(rng, &[3, 4]),
        normal(rng, &[3, 4]),
    );
    tape_check(ctx, &x, |t, v| {
        let c = t.constant(c.clone())?;
        let a = t.sub(c, v)?;
        let s = t.scale(v, 3.0)?;
        let y = t.sub(s, a)?;
        readout(t, y, &w)
    })
}

fn op_mul(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, c, w) = (
        normal(rng, &[3, 4]),
        normal(rng, &[3, 4]),
        normal(rng, &[3, 4]),
    );
    tape_check(ctx, &x, |t, v| {
        let c = t.constant(c.clone())?;
        let s = t.add(v, c)?;
        let y = t.mul(v, s)?;
        readout(t, y, &w)
    })
}

fn op_add_row_matrix(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, r, w) = (
        normal(rng, &[3, 4]),
        normal(rng, &[4]),
        normal(rng, &[3, 4]),
    );
    tape_check(ctx, &x, |t, v| {
        let r = t.constant(r.clone())?;
        let y = t.add_row(v, r)?;
        readout(t, y, &w)
    })
}

fn op_add_row_vector(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (m, x, w) = (
        normal(rng, &[3, 4]),
        normal(rng, &[4]),
        normal(rng, &[3, 4]),
    );
    tape_check(ctx, &x, |t, v| {
        let m = t.constant(m.clone())?;
        let y = t.add_row(m, v)?;
        readout(t, y, &w)
    })
}

fn op_scale(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (normal(rng, &[3, 4]), normal(rng, &[3, 4]));
    let c = rng.random_range(-3.0..3.0);
    tape_check(ctx, &x, |t, v| {
        let y = t.scale(v, c)?;
        readout(t, y, &w)
    })
}

fn op_relu(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (normal(rng, &[3, 4]), normal(rng, &[3, 4]));
    if x.data().iter().any(|v| v.abs() < KINK_MARGIN) {
        return Ok(None);
    }
    tape_check(ctx, &x, |t, v| {
        let y = t.relu(v)?;
        readout(t, y, &w)
    })
}

fn op_sum(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let x = normal(rng, &[3, 4]);
    tape_check(ctx, &x, |t, v| {
        let y = t.mul(v, v)?;
        t.sum(y)
    })
}

fn op_mean(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let x = normal(rng, &[3, 4]);
    tape_check(ctx, &x, |t, v| {
        let y = t.mul(v, v)?;
        t.mean(y)
    })
}

fn op_softmax(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (normal(rng, &[3, 5]), normal(rng, &[3, 5]));
    let temp = rng.random_range(0.5..5.0);
    tape_check(ctx, &x, |t, v| {
        let y = t.softmax(v, temp)?;
        readout(t, y, &w)
    })
}

fn op_log(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (uniform(rng, &[3, 4], 0.2, 3.0), normal(rng, &[3, 4]));
    tape_check(ctx, &x, |t, v| {
        let y = t.log_clamped(v, 1e-12)?;
        readout(t, y, &w)
    })
}

fn op_pick(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (normal(rng, &[4, 3]), normal(rng, &[4]));
    let idx = labels(rng, 4, 3);
    tape_check(ctx, &x, |t, v| {
        let y = t.pick(v, &idx)?;
        readout(t, y, &w)
    })
}

fn op_bn_train(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (normal(rng, &[6, 3]), normal(rng, &[6, 3]));
    let (gamma, beta) = (uniform(rng, &[3], 0.5, 2.0), normal(rng, &[3]));
    tape_check(ctx, &x, |t, v| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(beta.clone())?;
        let (y, _) = t.batch_norm_train(v, g, b, 1e-5)?;
        readout(t, y, &w)
    })
}

fn op_bn_eval(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, w) = (normal(rng, &[4, 3]), normal(rng, &[4, 3]));
    let (gamma, beta) = (normal(rng, &[3]), normal(rng, &[3]));
    let mean = normal(rng, &[3]).into_data();
    let var = uniform(rng, &[3], 0.1, 3.0).into_data();
    tape_check(ctx, &x, |t, v| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(beta.clone())?;
        let y = t.batch_norm_eval(v, g, b, &mean, &var, 1e-5)?;
        readout(t, y, &w)
    })
}

/// Checks every trainable parameter of `store` against a scalar built by
/// `f`, after confirming the instance keeps its relu inputs off the kink.
fn store_check<F>(ctx: &Ctx, store: &mut ParamStore, f: F) -> Result<Option<GradReport>>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let margin = {
        let mut probe = store.clone();
        let mut g = Graph::new(&mut probe);
        f(&mut g)?;
        g.tape.relu_margin()
    };
    if margin.is_some_and(|m| m < KINK_MARGIN) {
        return Ok(None);
    }
    let fault = ctx.fault;
    let r = check_param_gradients(
        store,
        |g| {
            let l = f(g)?;
            finish(&mut g.tape, l, fault)
        },
        ctx.eps,
        ctx.tol,
    )?;
    Ok(Some(r))
}

fn layer_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.random()
}

fn layer_linear(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let mut s = ParamStore::new();
    let l = LinearLayer::new(&mut s, "fc", 4, 3, true);
    l.init(&mut s, layer_seed(rng));
    s.jitter(layer_seed(rng), 0.3);
    let (x, w) = (normal(rng, &[5, 4]), normal(rng, &[5, 3]));
    store_check(ctx, &mut s, |g| {
        let xv = g.input(x.clone())?;
        let y = l.forward(g, xv)?;
        readout(&mut g.tape, y, &w)
    })
}

fn layer_bn(rng: &mut ChaCha8Rng, ctx: &Ctx, mode: Mode) -> Result<Option<GradReport>> {
    let mut s = ParamStore::new();
    let bn = BatchNormLayer::new(&mut s, "bn", 3);
    bn.init(&mut s);
    s.jitter(layer_seed(rng), 0.5);
    s.set_value(bn.running_mean, normal(rng, &[3]))?;
    s.set_value(bn.running_var, uniform(rng, &[3], 0.2, 2.0))?;
    let (x, w) = (normal(rng, &[6, 3]), normal(rng, &[6, 3]));
    store_check(ctx, &mut s, |g| {
        let xv = g.input(x.clone())?;
        let y = bn.forward(g, xv, mode)?;
        readout(&mut g.tape, y, &w)
    })
}

fn layer_bn_train(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    layer_bn(rng, ctx, Mode::Train)
}

fn layer_bn_eval(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    layer_bn(rng, ctx, Mode::Eval)
}

fn layer_block(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let mut s = ParamStore::new();
    let b = Block::new(&mut s, "blk", 4, 3, true);
    b.init(&mut s, layer_seed(rng));
    s.jitter(layer_seed(rng), 0.3);
    let (x, w) = (normal(rng, &[6, 4]), normal(rng, &[6, 3]));
    store_check(ctx, &mut s, |g| {
        let xv = g.input(x.clone())?;
        let y = b.forward(g, xv, Mode::Train)?;
        readout(&mut g.tape, y, &w)
    })
}

fn layer_encoder(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let mut s = ParamStore::new();
    let e = MlpEncoder::new(&mut s, "enc", 4, &[5, 3])?;
    e.init(&mut s, layer_seed(rng));
    s.jitter(layer_seed(rng), 0.3);
    let (x, w) = (normal(rng, &[6, 4]), normal(rng, &[6, 3]));
    store_check(ctx, &mut s, |g| {
        let xv = g.input(x.clone())?;
        let y = e.forward(g, xv, Mode::Train)?;
        readout(&mut g.tape, y, &w)
    })
}

fn layer_branch(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let mut s = ParamStore::new();
    let b = ResMBranch::new(&mut s, "branch", 4, 3, 3, 2)?;
    b.init(&mut s, layer_seed(rng));
    s.jitter(layer_seed(rng), 0.3);
    let (x, w) = (normal(rng, &[6, 4]), normal(rng, &[6, 3]));
    store_check(ctx, &mut s, |g| {
        let xv = g.input(x.clone())?;
        let y = b.forward(g, xv, Mode::Train)?;
        readout(&mut g.tape, y, &w)
    })
}

fn layer_head(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let mut s = ParamStore::new();
    let h = ClassifierHead::new(&mut s, "head", 4, 3);
    h.init(&mut s, layer_seed(rng));
    s.jitter(layer_seed(rng), 0.3);
    let (x, w) = (normal(rng, &[5, 4]), normal(rng, &[5, 3]));
    store_check(ctx, &mut s, |g| {
        let xv = g.input(x.clone())?;
        let y = h.forward(g, xv)?;
        readout(&mut g.tape, y, &w)
    })
}

fn random_weights(rng: &mut ChaCha8Rng, branches: usize) -> LossWeights {
    LossWeights {
        alpha: rng.random_range(0.5..2.0),
        beta: rng.random_range(0.5..3.0),
        gamma: rng.random_range(0.5..2.0),
        lambda: rng.random_range(0.5..2.0),
        temperature: rng.random_range(1.0..6.0),
        branches,
        ..LossWeights::default()
    }
}

fn loss_ce(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let x = normal(rng, &[5, 4]);
    let y = labels(rng, 5, 4);
    tape_check(ctx, &x, |t, v| cross_entropy_logits(t, v, &y))
}

fn loss_kl(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, teacher) = (normal(rng, &[5, 4]), normal(rng, &[5, 4]));
    let temp = rng.random_range(1.0..6.0);
    tape_check(ctx, &x, |t, v| {
        let gt = t.constant(teacher.clone())?;
        kl_distillation(t, gt, v, temp)
    })
}

fn loss_kd(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, teacher) = (normal(rng, &[5, 4]), normal(rng, &[5, 4]));
    let y = labels(rng, 5, 4);
    let w = random_weights(rng, 0);
    tape_check(ctx, &x, |t, v| {
        let gt = t.constant(teacher.clone())?;
        Ok(logit_distillation(t, gt, v, &y, &w)?.total)
    })
}

fn loss_feature_mse(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (x, target) = (normal(rng, &[4, 8]), normal(rng, &[4, 8]));
    tape_check(ctx, &x, |t, v| {
        let tv = t.constant(target.clone())?;
        feature_mse(t, tv, v)
    })
}

const TOY_BATCH: usize = 6;

/// Two-branch model with every trainable parameter moved off its initial
/// value. Feed wiring is drawn at random.
fn toy_model(
    rng: &mut ChaCha8Rng,
    head_t_frozen: bool,
) -> Result<(EraModel, Tensor, Vec<usize>, LossWeights)> {
    let feed = if rng.random::<bool>() {
        BranchFeed::Parallel
    } else {
        BranchFeed::Cascaded
    };
    let topo = Topology {
        teacher: TeacherTopology {
            input_dim: 4,
            num_classes: 3,
            widths: vec![6, 5],
        },
        student_widths: vec![5, 4],
        branches: 2,
        blocks_per_branch: 2,
        branch_width: 3,
        branch_feed: feed,
    };
    let mut model = EraModel::new(topo, layer_seed(rng))?;
    model.set_head_t_frozen(head_t_frozen);
    model.store.jitter(layer_seed(rng), 0.3);
    let x = normal(rng, &[TOY_BATCH, 4]);
    let y = labels(rng, TOY_BATCH, 3);
    let w = random_weights(rng, 2);
    Ok((model, x, y, w))
}

/// Branch feature losses with targets held at their values for the current
/// parameters, which is exactly what detaching them means for the gradient.
fn loss_branch_feature(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (mut model, x, _, _) = toy_model(rng, true)?;
    let net = model.net.clone();
    let targets = {
        let mut probe = model.store.clone();
        let mut g = Graph::new(&mut probe);
        let xv = g.input(x.clone())?;
        let st = net.cascade_forward(&mut g, xv, Mode::Train, true)?;
        st.snapshot(&g.tape).targets
    };
    let mut worst: Option<GradReport> = None;
    for (k, target) in targets.iter().enumerate() {
        let r = store_check(ctx, &mut model.store, |g| {
            let xv = g.input(x.clone())?;
            let st = net.cascade_forward(g, xv, Mode::Train, true)?;
            let tv = g.input(target.clone())?;
            squared_error_mean(&mut g.tape, tv, st.projected[k])
        })?;
        let Some(r) = r else { return Ok(None) };
        if worst
            .as_ref()
            .is_none_or(|w| r.max_rel_error > w.max_rel_error || !r.passed())
        {
            worst = Some(r);
        }
    }
    Ok(worst)
}

/// Run with a learnable teacher head so its gradient is covered too.
fn loss_branch_cls(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (mut model, x, y, w) = toy_model(rng, false)?;
    let net = model.net.clone();
    let mut worst: Option<GradReport> = None;
    for k in 0..net.branches.len() {
        let r = store_check(ctx, &mut model.store, |g| {
            let xv = g.input(x.clone())?;
            let o = era_objective(g, &net, xv, &y, &w, Mode::Train, true, 0.5)?;
            Ok(o.cls[k])
        })?;
        let Some(r) = r else { return Ok(None) };
        if worst
            .as_ref()
            .is_none_or(|w| r.max_rel_error > w.max_rel_error || !r.passed())
        {
            worst = Some(r);
        }
    }
    Ok(worst)
}

/// The full objective with residual targets attached and the teacher head
/// frozen: detached targets, or distillation logits from a learnable head,
/// make the analytic gradient a partial one that finite differences cannot
/// reproduce.
fn loss_total(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<Option<GradReport>> {
    let (mut model, x, y, w) = toy_model(rng, true)?;
    let net = model.net.clone();
    store_check(ctx, &mut model.store, |g| {
        let xv = g.input(x.clone())?;
        Ok(era_objective(g, &net, xv, &y, &w, Mode::Train, false, 0.5)?.total)
    })
}
