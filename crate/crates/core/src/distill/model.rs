use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    ClassifierHead, Graph, LinearLayer, MlpEncoder, Mode, ParamId, ParamStore, ResMBranch,
};
use crate::tensor::Tensor;

/// What each residual branch reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchFeed {
    /// Branch 1 reads the student features; branch `k > 1` reads the
    /// pre-projection output of branch `k − 1`.
    Cascaded,
    /// Every branch reads the student features.
    Parallel,
}

impl BranchFeed {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchFeed::Cascaded => "cascaded",
            BranchFeed::Parallel => "parallel",
        }
    }
}

impl fmt::Display for BranchFeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchFeed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cascaded" => Ok(BranchFeed::Cascaded),
            "parallel" => Ok(BranchFeed::Parallel),
            _ => Err(Error::Parameter(format!("unknown branch feed `{s}`"))),
        }
    }
}

/// Teacher-side dimensions; also the identity of a teacher checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherTopology {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Block widths; the last one is the teacher feature size `C_t`.
    pub widths: Vec<usize>,
}

impl TeacherTopology {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

impl fmt::Display for TeacherTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input={} classes={} teacher={}",
            self.input_dim,
            self.num_classes,
            join(&self.widths)
        )
    }
}

pub(crate) fn join(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub teacher: TeacherTopology,
    /// Student block widths; the last one is `C_s`.
    pub student_widths: Vec<usize>,
    /// Number of residual branches `K`.
    pub branches: usize,
    /// `Linear → BN → ReLU` blocks per branch.
    pub blocks_per_branch: usize,
    /// Hidden and output width of every branch; `0` means `C_s`.
    pub branch_width: usize,
    pub branch_feed: BranchFeed,
}

impl Topology {
    pub fn student_dim(&self) -> usize {
        *self.student_widths.last().unwrap_or(&0)
    }

    pub fn teacher_dim(&self) -> usize {
        self.teacher.feature_dim()
    }

    pub fn resolved_branch_width(&self) -> usize {
        if self.branch_width == 0 {
            self.student_dim()
        } else {
            self.branch_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.teacher;
        if t.input_dim == 0 || t.num_classes < 2 || t.widths.is_empty() || t.widths.contains(&0) {
            return Err(Error::Spec(format!("invalid teacher topology {t}")));
        }
        if self.student_widths.is_empty() || self.student_widths.contains(&0) {
            return Err(Error::Spec(format!(
                "invalid student widths {:?}",
                self.student_widths
            )));
        }
        if self.branches > 0 && self.blocks_per_branch == 0 {
            return Err(Error::Spec("branches need m >= 1 blocks".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} student={} K={} m={} branch_width={} feed={}",
            self.teacher,
            join(&self.student_widths),
            self.branches,
            self.blocks_per_branch,
            self.resolved_branch_width(),
            self.branch_feed
        )
    }
}

/// Layer handles of the full distillation network. Values live in the
/// owning [`EraModel`]'s store.
#[derive(Debug, Clone, PartialEq)]
pub struct EraNet {
    pub student: MlpEncoder,
    pub teacher: MlpEncoder,
    /// `P_0..P_K`, each mapping into the teacher feature space.
    pub projections: Vec<LinearLayer>,
    /// Branches `1..K` (index 0 is branch 1).
    pub branches: Vec<ResMBranch>,
    pub head_s: ClassifierHead,
    pub head_t: ClassifierHead,
    pub feed: BranchFeed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EraModel {
    pub topology: Topology,
    pub store: ParamStore,
    pub net: EraNet,
}

impl EraModel {
    /// Builds and initializes every trainable component from `seed`. Teacher
    /// parameters start at their initial values and are frozen; load trained
    /// ones with [`EraModel::load_teacher`].
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut store = ParamStore::new();
        let t = &topology.teacher;
        let c_s = topology.student_dim();
        let c_t = topology.teacher_dim();
        let width = topology.resolved_branch_width();

        let student =
            MlpEncoder::new(&mut store, "student", t.input_dim, &topology.student_widths)?;
        let teacher = MlpEncoder::new(&mut store, "teacher", t.input_dim, &t.widths)?;
        let head_s = ClassifierHead::new(&mut store, "head_s", c_s, t.num_classes);
        let head_t = ClassifierHead::new(&mut store, "head_t", c_t, t.num_classes);
        let mut projections = vec![LinearLayer::new(&mut store, "proj0", c_s, c_t, true)];
        let mut branches = Vec::with_capacity(topology.branches);
        for k in 1..=topology.branches {
            let input = match (topology.branch_feed, k) {
                (BranchFeed::Cascaded, k) if k > 1 => width,
                _ => c_s,
            };
            branches.push(ResMBranch::new(
                &mut store,
                &format!("branch{k}"),
                input,
                width,
                width,
                topology.blocks_per_branch,
            )?);
            projections.push(LinearLayer::new(
                &mut store,
                &format!("proj{k}"),
                width,
                c_t,
                true,
            ));
        }
        let net = EraNet {
            student,
            teacher,
            projections,
            branches,
            head_s,
            head_t,
            feed: topology.branch_feed,
        };
        net.student.init(&mut store, seed);
        net.teacher.init(&mut store, seed);
        net.head_s.init(&mut store, seed);
        net.head_t.init(&mut store, seed);
        for p in &net.projections {
            p.init(&mut store, seed);
        }
        for b in &net.branches {
            b.init(&mut store, seed);
        }
        net.teacher.set_trainable(&mut store, false);
        net.head_t.set_frozen(&mut store, true);
        Ok(EraModel {
            topology,
            store,
            net,
        })
    }

    /// Copies trained teacher encoder and head values into this model.
    pub fn load_teacher(&mut self, teacher: &TeacherModel) -> Result<()> {
        if teacher.topology != self.topology.teacher {
            return Err(Error::Spec(format!(
                "teacher topology mismatch: checkpoint has {}, model expects {}",
                teacher.topology, self.topology.teacher
            )));
        }
        self.store.copy_prefix_from(&teacher.store, "teacher.")?;
        self.store.copy_prefix_from(&teacher.store, "head_t.")?;
        Ok(())
    }

    pub fn set_head_t_frozen(&mut self, frozen: bool) {
        self.net.head_t.set_frozen(&mut self.store, frozen);
    }

    pub fn branches(&self) -> usize {
        self.net.branches.len()
    }

    /// Every parameter id belonging to the teacher encoder or its head,
    /// buffers included.
    pub fn teacher_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.net.teacher.params();
        ids.extend(self.net.teacher.buffers());
        ids.extend(self.net.head_t.params());
        ids
    }
}

/// Stand-alone teacher: encoder plus classifier, trained with cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub topology: TeacherTopology,
    pub store: ParamStore,
    pub encoder: MlpEncoder,
    pub head: ClassifierHead,
}

impl TeacherModel {
    pub fn new(topology: TeacherTopology, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = MlpEncoder::new(&mut store, "teacher", topology.input_dim, &topology.widths)?;
        let head = ClassifierHead::new(
            &mut store,
            "head_t",
            topology.feature_dim(),
            topology.num_classes,
        );
        encoder.init(&mut store, seed);
        head.init(&mut store, seed);
        Ok(TeacherModel {
            topology,
            store,
            encoder,
            head,
        })
    }

    pub fn freeze(&mut self) {
        self.encoder.set_trainable(&mut self.store, false);
        self.head.set_frozen(&mut self.store, true);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|(_, p)| !p.trainable)
    }
}

/// Intermediate quantities of one cascaded forward pass, as tape handles.
#[derive(Debug, Clone)]
pub struct ResidualState {
    /// Student features `f_s`.
    pub f_s: Var,
    /// Teacher features `f_t` (constant).
    pub f_t: Var,
    /// Raw branch outputs `Δf̂_1..Δf̂_K`.
    pub branch_outputs: Vec<Var>,
    /// `P_0 f_s, P_1 Δf̂_1, …, P_K Δf̂_K`.
    pub projected: Vec<Var>,
    /// Cumulative approximations `f̂_0..f̂_K`.
    pub approximations: Vec<Var>,
    /// Regression targets `Δf_0..Δf_K`.
    pub targets: Vec<Var>,
}

impl ResidualState {
    /// Mean over the batch of `‖f_t − f̂_K‖₂`.
    pub fn approx_error(&self, tape: &Tape) -> f64 {
        let last = *self.approximations.last().expect("f̂_0 always exists");
        let (sum, n) = row_distance_sum(tape.value(self.f_t), tape.value(last));
        sum / n as f64
    }

    pub fn snapshot(&self, tape: &Tape) -> ResidualTensors {
        let grab = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect();
        ResidualTensors {
            f_s: tape.value(self.f_s).clone(),
            f_t: tape.value(self.f_t).clone(),
            branch_outputs: grab(&self.branch_outputs),
            projected: grab(&self.projected),
            approximations: grab(&self.approximations),
            targets: grab(&self.targets),
            approx_error: self.approx_error(tape),
        }
    }
}

/// Owned copy of a [`ResidualState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTensors {
    pub f_s: Tensor,
    pub f_t: Tensor,
    pub branch_outputs: Vec<Tensor>,
    pub projected: Vec<Tensor>,
    pub approximations: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub approx_error: f64,
}

/// Sum over rows of the Euclidean distance between two matrices, and the row
/// count.
pub(crate) fn row_distance_sum(a: &Tensor, b: &Tensor) -> (f64, usize) {
    let n = a.shape()[0];
    let mut sum = 0.0;
    for i in 0..n {
        let d2: f64 = a
            .row(i)
            .iter()
            .zip(b.row(i))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        sum += d2.sqrt();
    }
    (sum, n)
}

/// `Δf_0 = f_t` and `Δf_k = f_t − f̂_{k−1}` for `k = 1..K`. With `detach`
/// the targets are constants on the tape.
pub fn residual_targets(
    tape: &mut Tape,
    f_t: Var,
    approximations: &[Var],
    branches: usize,
    detach: bool,
) -> Result<Vec<Var>> {
    if approximations.len() < branches {
        return Err(Error::State(format!(
            "residual targets for K = {branches} need f̂_0..f̂_{}, only {} available",
            branches.saturating_sub(1),
            approximations.len()
        )));
    }
    let mut targets = Vec::with_capacity(branches + 1);
    targets.push(f_t);
    for prev in &approximations[..branches] {
        let d = tape.sub(f_t, *prev)?;
        targets.push(if detach { tape.detach(d)? } else { d });
    }
    Ok(targets)
}

impl EraNet {
    /// Teacher features in eval mode, as a constant.
    pub fn teacher_features(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let f = self.teacher.forward(g, x, Mode::Eval)?;
        g.tape.detach(f)
    }

    /// Student features, projections, branch cascade and residual targets.
    /// `mode` applies to the student, branches and projections; the teacher
    /// always runs in eval mode.
    pub fn cascade_forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mode: Mode,
        detach_targets: bool,
    ) -> Result<ResidualState> {
        let f_t = self.teacher_features(g, x)?;
        let f_s = self.student.forward(g, x, mode)?;
        self.cascade_from(g, f_s, f_t, mode, self.branches.len(), detach_targets)
    }

    /// The cascade on precomputed features, truncated to the first `j`
    /// branches.
    pub fn cascade_from(
        &self,
        g: &mut Graph<'_>,
        f_s: Var,
        f_t: Var,
        mode: Mode,
        j: usize,
        detach_targets: bool,
    ) -> Result<ResidualState> {
        if j > self.branches.len() {
            return Err(Error::Parameter(format!(
                "requested {j} branches but the model has {}",
                self.branches.len()
            )));
        }
        let p0 = self.projections[0].forward(g, f_s)?;
        let mut projected = vec![p0];
        let mut approximations = vec![p0];
        let mut branch_outputs = Vec::with_capacity(j);
        let mut input = f_s;
        for k in 1..=j {
            let d = self.branches[k - 1].forward(g, input, mode)?;
            let pd = self.projections[k].forward(g, d)?;
            let prev = *approximations.last().expect("non-empty");
            let fk = g.tape.add(prev, pd)?;
            branch_outputs.push(d);
            projected.push(pd);
            approximations.push(fk);
            input = match self.feed {
                BranchFeed::Cascaded => d,
                BranchFeed::Parallel => f_s,
            };
        }
        let targets = residual_targets(&mut g.tape, f_t, &approximations, j, detach_targets)?;
        Ok(ResidualState {
            f_s,
            f_t,
            branch_outputs,
            projected,
            approximations,
            targets,
        })
    }
}
