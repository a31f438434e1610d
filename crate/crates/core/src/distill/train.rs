use std::ops::RangeInclusive;

use crate::autodiff::Var;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::inference::{evaluate_summary, EvalSummary};
use crate::losses::{
    cross_entropy_logits, feature_mse, kl_distillation, logit_distillation, squared_error_mean,
    total_era_loss, LossWeights,
};
use crate::nn::{Graph, Mode, Sgd};
use crate::tensor::Tensor;

use super::model::{
    row_distance_sum, EraModel, EraNet, ResidualState, TeacherModel, TeacherTopology,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub head_t_frozen: bool,
    /// Treat residual targets as constants in the feature losses.
    pub detach_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            weights: LossWeights::default(),
            head_t_frozen: true,
            detach_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Step decay: ×0.1 once half the epochs are done and again at three
    /// quarters. `epoch` counts from 1.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let done = epoch.saturating_sub(1);
        if 2 * done < self.epochs {
            self.learning_rate
        } else if 4 * done < 3 * self.epochs {
            self.learning_rate * 0.1
        } else {
            self.learning_rate * 0.01
        }
    }

    fn optimizer(&self, epoch: usize) -> Sgd {
        Sgd {
            lr: self.learning_rate_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Tape handles of every term of the distillation objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub kd: Var,
    pub ce: Var,
    pub kl: Var,
    /// `L_FD_0..L_FD_K`.
    pub fd: Vec<Var>,
    /// `L_cls_1..L_cls_K`.
    pub cls: Vec<Var>,
    pub state: ResidualState,
}

/// Per-term loss values of one step (or an average over steps).
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_kd: f64,
    pub loss_fd: Vec<f64>,
    pub loss_cls: Vec<f64>,
    pub approx_error: f64,
}

impl StepMetrics {
    fn read(g: &Graph<'_>, o: &Objective) -> Self {
        let v = |x: Var| g.value(x).item();
        StepMetrics {
            loss_total: v(o.total),
            loss_kd: v(o.kd),
            loss_fd: o.fd.iter().map(|&x| v(x)).collect(),
            loss_cls: o.cls.iter().map(|&x| v(x)).collect(),
            approx_error: o.state.approx_error(&g.tape),
        }
    }

    fn mean(steps: &[StepMetrics]) -> Self {
        let n = steps.len() as f64;
        let avg = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let first = &steps[0];
        StepMetrics {
            loss_total: avg(&|s| s.loss_total),
            loss_kd: avg(&|s| s.loss_kd),
            loss_fd: (0..first.loss_fd.len())
                .map(|k| avg(&|s| s.loss_fd[k]))
                .collect(),
            loss_cls: (0..first.loss_cls.len())
                .map(|k| avg(&|s| s.loss_cls[k]))
                .collect(),
            approx_error: avg(&|s| s.approx_error),
        }
    }
}

/// One row of the training log. Epoch 0 is measured before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_kd: f64,
    pub loss_fd: Vec<f64>,
    pub loss_cls: Vec<f64>,
    /// Mean `‖f_t − f̂_K‖` on the evaluation set.
    pub approx_error: f64,
    pub acc_s: f64,
    pub acc_t: f64,
    pub acc_st: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, losses: StepMetrics, eval: EvalSummary) -> Self {
        EpochMetrics {
            epoch,
            loss_total: losses.loss_total,
            loss_kd: losses.loss_kd,
            loss_fd: losses.loss_fd,
            loss_cls: losses.loss_cls,
            approx_error: eval.approx_error,
            acc_s: eval.acc_s,
            acc_t: eval.acc_t,
            acc_st: eval.acc_st,
        }
    }
}

fn term<T>(r: Result<T>, name: &str) -> Result<T> {
    r.map_err(|e| e.in_term(name))
}

/// Builds the full training objective on `g` for inputs `x`.
#[allow(clippy::too_many_arguments)]
pub fn era_objective(
    g: &mut Graph<'_>,
    net: &EraNet,
    x: Var,
    labels: &[usize],
    weights: &LossWeights,
    mode: Mode,
    detach_targets: bool,
    epoch_fraction: f64,
) -> Result<Objective> {
    if weights.branches != net.branches.len() {
        return Err(Error::Contract(format!(
            "loss weights are set for K = {} but the model has {} branches",
            weights.branches,
            net.branches.len()
        )));
    }
    let state = term(net.cascade_forward(g, x, mode, detach_targets), "forward")?;
    let logits_s = term(net.head_s.forward(g, state.f_s), "forward")?;
    let logits_t = term(net.head_t.forward(g, state.f_t), "forward")?;
    let kd = term(
        logit_distillation(&mut g.tape, logits_t, logits_s, labels, weights),
        "loss_kd",
    )?;
    let mut fd = Vec::with_capacity(state.targets.len());
    for (k, (&target, &pred)) in state.targets.iter().zip(&state.projected).enumerate() {
        fd.push(term(
            squared_error_mean(&mut g.tape, target, pred),
            &format!("loss_fd_{k}"),
        )?);
    }
    let mut cls = Vec::with_capacity(net.branches.len());
    for k in 1..state.approximations.len() {
        let name = format!("loss_cls_{k}");
        let logits = term(net.head_t.forward(g, state.approximations[k]), &name)?;
        cls.push(term(
            cross_entropy_logits(&mut g.tape, logits, labels),
            &name,
        )?);
    }
    let total = term(
        total_era_loss(&mut g.tape, kd.total, &fd, &cls, weights, epoch_fraction),
        "loss_total",
    )?;
    Ok(Objective {
        total,
        kd: kd.total,
        ce: kd.ce,
        kl: kd.kl,
        fd,
        cls,
        state,
    })
}

/// Scalar objective of a training step, as a function of the graph, the
/// network, the batch, the epoch fraction and the layer mode.
pub type ObjectiveFn =
    dyn Fn(&mut Graph<'_>, &EraNet, Var, &[usize], f64, Mode) -> Result<(Var, StepMetrics)>;

fn era_objective_fn(cfg: &TrainConfig) -> Box<ObjectiveFn> {
    let weights = cfg.weights.clone();
    let detach = cfg.detach_targets;
    Box::new(
        move |g: &mut Graph<'_>, net: &EraNet, x: Var, y: &[usize], frac: f64, mode: Mode| {
            let o = era_objective(g, net, x, y, &weights, mode, detach, frac)?;
            Ok((o.total, StepMetrics::read(g, &o)))
        },
    )
}

fn objective_step(
    model: &mut EraModel,
    x: &Tensor,
    labels: &[usize],
    opt: &Sgd,
    epoch_fraction: f64,
    objective: &ObjectiveFn,
) -> Result<StepMetrics> {
    let net = &model.net;
    let (metrics, grads) = {
        let mut g = Graph::new(&mut model.store);
        let xv = g.input(x.clone())?;
        let (loss, m) = objective(&mut g, net, xv, labels, epoch_fraction, Mode::Train)?;
        (m, term(g.backward(loss), "backward")?)
    };
    opt.step(&mut model.store, &grads)?;
    Ok(metrics)
}

/// One SGD step on a batch with learning rate `lr`. Returns the loss terms
/// measured before the update.
pub fn train_step(
    model: &mut EraModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    epoch_fraction: f64,
) -> Result<StepMetrics> {
    let opt = Sgd {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    objective_step(
        model,
        x,
        labels,
        &opt,
        epoch_fraction,
        &*era_objective_fn(cfg),
    )
}

/// Loss terms over a whole dataset in eval mode, without updating anything.
pub fn evaluate_losses(model: &EraModel, ds: &Dataset, cfg: &TrainConfig) -> Result<StepMetrics> {
    eval_objective(model, ds, &*era_objective_fn(cfg))
}

fn eval_objective(model: &EraModel, ds: &Dataset, objective: &ObjectiveFn) -> Result<StepMetrics> {
    let mut g = Graph::read_only(&model.store);
    let x = g.input(ds.features.clone())?;
    let (_, m) = objective(&mut g, &model.net, x, &ds.labels, 0.0, Mode::Eval)?;
    Ok(m)
}

/// Runs the listed epochs. Epoch 0, if included, records metrics of the
/// untrained model: eval-mode losses over `train` and evaluation on `test`.
/// Epoch `e ≥ 1` trains on `batches(seed, e)` and records the mean step
/// losses plus evaluation on `test`. Training state lives entirely in
/// `model`, so a run split at any epoch boundary reproduces the
/// uninterrupted one.
pub fn distill_epochs(
    model: &mut EraModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    epochs: RangeInclusive<usize>,
) -> Result<Vec<EpochMetrics>> {
    run_epochs(model, train, test, cfg, epochs, &*era_objective_fn(cfg))
}

/// Full distillation run: epochs `0..=cfg.epochs`.
pub fn distill(
    model: &mut EraModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    distill_epochs(model, train, test, cfg, 0..=cfg.epochs)
}

fn run_epochs(
    model: &mut EraModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    epochs: RangeInclusive<usize>,
    objective: &ObjectiveFn,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    model.set_head_t_frozen(cfg.head_t_frozen);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let j = model.branches();
    let mut log = Vec::new();
    for epoch in epochs {
        if epoch == 0 {
            let losses = eval_objective(model, train, objective)?;
            let eval = evaluate_summary(model, test, j, cfg.weights.mu)?;
            log.push(EpochMetrics::new(0, losses, eval));
            continue;
        }
        if epoch > cfg.epochs {
            return Err(Error::Parameter(format!(
                "epoch {epoch} beyond the configured {}",
                cfg.epochs
            )));
        }
        let opt = cfg.optimizer(epoch);
        let order = batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut steps = Vec::with_capacity(order.len());
        for (i, idx) in order.iter().enumerate() {
            let frac = ((epoch - 1) * steps_per_epoch + i) as f64 / total_steps;
            let (x, y) = train.gather(idx)?;
            steps.push(objective_step(model, &x, &y, &opt, frac, objective)?);
        }
        let eval = evaluate_summary(model, test, j, cfg.weights.mu)?;
        log.push(EpochMetrics::new(epoch, StepMetrics::mean(&steps), eval));
    }
    Ok(log)
}

/// Handles of the one-step KD + feature-regression objective.
#[derive(Debug, Clone, Copy)]
pub struct KdFitnet {
    pub total: Var,
    pub kd: Var,
    pub fd: Var,
    pub p0: Var,
    pub f_t: Var,
}

/// `α·CE + β·T²·KL + γ·‖f_t − P_0 f_s‖²/N`, assembled directly from the loss
/// primitives. Operations are recorded in the same order as the general
/// objective so the two agree bit for bit at `K = 0`.
pub fn kd_fitnet_loss(
    g: &mut Graph<'_>,
    net: &EraNet,
    x: Var,
    labels: &[usize],
    w: &LossWeights,
    mode: Mode,
) -> Result<KdFitnet> {
    let f_t = net.teacher_features(g, x)?;
    let f_s = net.student.forward(g, x, mode)?;
    let p0 = net.projections[0].forward(g, f_s)?;
    let g_s = net.head_s.forward(g, f_s)?;
    let g_t = net.head_t.forward(g, f_t)?;
    let ce = cross_entropy_logits(&mut g.tape, g_s, labels)?;
    let kl = kl_distillation(&mut g.tape, g_t, g_s, w.temperature)?;
    let a = g.tape.scale(ce, w.alpha)?;
    let b = g.tape.scale(kl, w.beta)?;
    let kd = g.tape.add(a, b)?;
    let fd = feature_mse(&mut g.tape, f_t, p0)?;
    let c = g.tape.scale(fd, w.gamma)?;
    let total = g.tape.add(kd, c)?;
    Ok(KdFitnet {
        total,
        kd,
        fd,
        p0,
        f_t,
    })
}

/// The one-step KD + feature-regression baseline. Requires a model with
/// `K = 0`.
pub fn train_kd_fitnet(
    model: &mut EraModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if model.branches() != 0 {
        return Err(Error::Contract(
            "the KD + feature baseline uses K = 0".into(),
        ));
    }
    let w = cfg.weights.clone();
    let objective =
        move |g: &mut Graph<'_>, net: &EraNet, x: Var, y: &[usize], _frac: f64, mode: Mode| {
            let o = kd_fitnet_loss(g, net, x, y, &w, mode)?;
            let (sum, n) = row_distance_sum(g.value(o.f_t), g.value(o.p0));
            let m = StepMetrics {
                loss_total: g.value(o.total).item(),
                loss_kd: g.value(o.kd).item(),
                loss_fd: vec![g.value(o.fd).item()],
                loss_cls: Vec::new(),
                approx_error: sum / n as f64,
            };
            Ok((o.total, m))
        };
    run_epochs(model, train, test, cfg, 0..=cfg.epochs, &objective)
}

/// Student encoder and head trained with cross-entropy only; no teacher
/// signal. Only S-mode accuracy is meaningful in the returned log.
pub fn train_student_ce(
    model: &mut EraModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let objective =
        |g: &mut Graph<'_>, net: &EraNet, x: Var, y: &[usize], _frac: f64, mode: Mode| {
            let f_s = net.student.forward(g, x, mode)?;
            let logits = net.head_s.forward(g, f_s)?;
            let loss = term(cross_entropy_logits(&mut g.tape, logits, y), "loss_ce")?;
            let v = g.value(loss).item();
            let m = StepMetrics {
                loss_total: v,
                loss_kd: v,
                loss_fd: Vec::new(),
                loss_cls: Vec::new(),
                approx_error: 0.0,
            };
            Ok((loss, m))
        };
    run_epochs(model, train, test, cfg, 0..=cfg.epochs, &objective)
}

/// One row of the teacher training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEpoch {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's steps.
    pub loss: f64,
    /// Test-set top-1 accuracy after the epoch.
    pub acc: f64,
}

/// Trains a teacher with plain cross-entropy and returns it frozen. Uses the
/// optimizer and schedule fields of `cfg`; loss weights are ignored.
pub fn train_teacher(
    topology: TeacherTopology,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TeacherModel, Vec<TeacherEpoch>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut teacher = TeacherModel::new(topology, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let opt = cfg.optimizer(epoch);
        let mut total = 0.0;
        let order = batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for idx in &order {
            let (x, y) = train.gather(idx)?;
            let grads = {
                let mut g = Graph::new(&mut teacher.store);
                let xv = g.input(x)?;
                let f = teacher.encoder.forward(&mut g, xv, Mode::Train)?;
                let logits = teacher.head.forward(&mut g, f)?;
                let loss = term(cross_entropy_logits(&mut g.tape, logits, &y), "loss_ce")?;
                total += g.value(loss).item();
                g.backward(loss)?
            };
            opt.step(&mut teacher.store, &grads)?;
        }
        log.push(TeacherEpoch {
            epoch,
            loss: total / order.len() as f64,
            acc: teacher_accuracy(&teacher, test)?,
        });
    }
    teacher.freeze();
    Ok((teacher, log))
}

/// Eval-mode top-1 accuracy of a stand-alone teacher.
pub fn teacher_accuracy(teacher: &TeacherModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut g = Graph::read_only(&teacher.store);
    let x = g.input(ds.features.clone())?;
    let f = teacher.encoder.forward(&mut g, x, Mode::Eval)?;
    let logits = teacher.head.forward(&mut g, f)?;
    let p = g.tape.softmax(logits, 1.0)?;
    Ok(crate::inference::accuracy(g.value(p), &ds.labels))
}
