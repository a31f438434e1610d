//! Text checkpoints with bit-exact parameter payloads.
//!
//! ```text
//! ERACKPT 1
//! kind era
//! topology input=16 classes=5 teacher=64x32 student=2x8 K=4 m=2 branch_width=8 feed=cascaded
//! epoch 100
//! rng 0
//! params 86
//! param student.0.fc.weight weight trainable 2x16
//! value 000000000000f03f...
//! velocity 0000000000000000...
//! ...
//! end
//! ```
//!
//! Every line ends in `\n`. Payloads are the little-endian bytes of each
//! `f64`, hex encoded in lower case, 16 characters per value.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use era_core::distill::{BranchFeed, EraModel, TeacherModel, TeacherTopology, Topology};
use era_core::nn::{ParamKind, ParamStore};
use era_core::Tensor;

use crate::error::CliError;

pub const MAGIC: &str = "ERACKPT 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Era,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Era => "era",
        }
    }
}

/// One parameter or buffer with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Canonical topology line, as printed by the topology's `Display`.
    pub topology: String,
    /// Last completed epoch.
    pub epoch: usize,
    /// Seed from which every batch order and initialization derives.
    pub rng: u64,
    pub sections: Vec<Section>,
}

fn bad(msg: impl std::fmt::Display) -> CliError {
    CliError::Checkpoint(format!("malformed checkpoint: {msg}"))
}

fn encode_floats(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    hex::encode(bytes)
}

fn decode_floats(s: &str, expected: usize, what: &str) -> Result<Vec<f64>, CliError> {
    let bytes = hex::decode(s).map_err(|e| bad(format!("{what}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(bad(format!(
            "{what}: {} bytes for {expected} values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>, CliError> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|e| bad(format!("shape `{s}`: {e}")))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_store(
        kind: ModelKind,
        topology: String,
        epoch: usize,
        rng: u64,
        store: &ParamStore,
    ) -> Self {
        let sections = store
            .iter()
            .map(|(_, p)| Section {
                name: p.name.clone(),
                kind: p.kind,
                trainable: p.trainable,
                shape: p.value.shape().to_vec(),
                value: p.value.data().to_vec(),
                velocity: p.velocity.clone(),
            })
            .collect();
        Checkpoint {
            kind,
            topology,
            epoch,
            rng,
            sections,
        }
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&format!("kind {}\n", self.kind.as_str()));
        out.push_str(&format!("topology {}\n", self.topology));
        out.push_str(&format!("epoch {}\n", self.epoch));
        out.push_str(&format!("rng {}\n", self.rng));
        out.push_str(&format!("params {}\n", self.sections.len()));
        for s in &self.sections {
            let state = if s.trainable { "trainable" } else { "frozen" };
            out.push_str(&format!(
                "param {} {} {} {}\n",
                s.name,
                s.kind.as_str(),
                state,
                shape_str(&s.shape)
            ));
            out.push_str(&format!("value {}\n", encode_floats(&s.value)));
            out.push_str(&format!("velocity {}\n", encode_floats(&s.velocity)));
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.split_terminator('\n');
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| bad(format!("missing {what} line")))
        };
        if next("magic")? != MAGIC {
            return Err(bad(format!("first line is not `{MAGIC}`")));
        }
        let field = |line: &str, key: &str| -> Result<String, CliError> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, got `{line}`")))
        };
        let kind = match field(next("kind")?, "kind")?.as_str() {
            "teacher" => ModelKind::Teacher,
            "era" => ModelKind::Era,
            other => return Err(bad(format!("unknown kind `{other}`"))),
        };
        let topology = field(next("topology")?, "topology")?;
        let num = |s: String, what: &str| s.parse::<u64>().map_err(|e| bad(format!("{what}: {e}")));
        let epoch = num(field(next("epoch")?, "epoch")?, "epoch")? as usize;
        let rng = num(field(next("rng")?, "rng")?, "rng")?;
        let count = num(field(next("params")?, "params")?, "params")? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let head = field(next("param")?, "param")?;
            let parts: Vec<&str> = head.split(' ').collect();
            let [name, kind, state, shape] = parts[..] else {
                return Err(bad(format!("param line `{head}`")));
            };
            let kind =
                ParamKind::parse(kind).ok_or_else(|| bad(format!("parameter kind `{kind}`")))?;
            let trainable = match state {
                "trainable" => true,
                "frozen" => false,
                other => return Err(bad(format!("parameter state `{other}`"))),
            };
            let shape = parse_shape(shape)?;
            let n = shape.iter().product();
            let value = decode_floats(&field(next("value")?, "value")?, n, name)?;
            let velocity = decode_floats(&field(next("velocity")?, "velocity")?, n, name)?;
            sections.push(Section {
                name: name.to_string(),
                kind,
                trainable,
                shape,
                value,
                velocity,
            });
        }
        if next("end")? != "end" {
            return Err(bad("missing `end` line"));
        }
        if lines.next().is_some() {
            return Err(bad("trailing data after `end`"));
        }
        if !text.ends_with('\n') {
            return Err(bad("missing final newline"));
        }
        Ok(Checkpoint {
            kind,
            topology,
            epoch,
            rng,
            sections,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::parse(&text).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.encode()).map_err(|e| CliError::io("cannot write", path, e))
    }

    /// Overwrites every parameter of `store`. Names, kinds and shapes must
    /// match section for section.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CliError> {
        if store.len() != self.sections.len() {
            return Err(CliError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.sections.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, s) in ids.into_iter().zip(&self.sections) {
            let p = store.get(id);
            if p.name != s.name || p.kind != s.kind || p.value.shape() != s.shape.as_slice() {
                return Err(CliError::Checkpoint(format!(
                    "checkpoint parameter {} {} {} does not match model parameter {} {} {}",
                    s.name,
                    s.kind.as_str(),
                    shape_str(&s.shape),
                    p.name,
                    p.kind.as_str(),
                    shape_str(p.value.shape())
                )));
            }
            let value = Tensor::new(s.shape.clone(), s.value.clone()).map_err(bad)?;
            store.set_value(id, value).map_err(bad)?;
            store.set_trainable(id, s.trainable);
            store.get_mut(id).velocity = s.velocity.clone();
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<(), CliError> {
        if self.kind != kind {
            return Err(CliError::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn teacher(&self) -> Result<TeacherModel, CliError> {
        self.expect_kind(ModelKind::Teacher)?;
        let topo = parse_teacher_topology(&self.topology)?;
        let mut t = TeacherModel::new(topo, 0).map_err(bad)?;
        self.restore_into(&mut t.store)?;
        Ok(t)
    }

    pub fn era(&self) -> Result<EraModel, CliError> {
        self.expect_kind(ModelKind::Era)?;
        let topo = parse_topology(&self.topology)?;
        let mut m = EraModel::new(topo, 0).map_err(bad)?;
        self.restore_into(&mut m.store)?;
        Ok(m)
    }
}

pub fn save_teacher(teacher: &TeacherModel, epoch: usize, rng: u64) -> Checkpoint {
    Checkpoint::from_store(
        ModelKind::Teacher,
        teacher.topology.to_string(),
        epoch,
        rng,
        &teacher.store,
    )
}

pub fn save_era(model: &EraModel, epoch: usize, rng: u64) -> Checkpoint {
    Checkpoint::from_store(
        ModelKind::Era,
        model.topology.to_string(),
        epoch,
        rng,
        &model.store,
    )
}

fn fields(line: &str) -> Result<BTreeMap<&str, &str>, CliError> {
    line.split(' ')
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| bad(format!("topology token `{kv}`")))
        })
        .collect()
}

fn take<'a>(f: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str, CliError> {
    f.get(key)
        .copied()
        .ok_or_else(|| bad(format!("topology lacks `{key}`")))
}

fn number(f: &BTreeMap<&str, &str>, key: &str) -> Result<usize, CliError> {
    take(f, key)?
        .parse()
        .map_err(|e| bad(format!("topology `{key}`: {e}")))
}

fn widths(f: &BTreeMap<&str, &str>, key: &str) -> Result<Vec<usize>, CliError> {
    take(f, key)?
        .split('x')
        .map(|w| w.parse().map_err(|e| bad(format!("topology `{key}`: {e}"))))
        .collect()
}

fn teacher_from(f: &BTreeMap<&str, &str>) -> Result<TeacherTopology, CliError> {
    Ok(TeacherTopology {
        input_dim: number(f, "input")?,
        num_classes: number(f, "classes")?,
        widths: widths(f, "teacher")?,
    })
}

pub fn parse_teacher_topology(line: &str) -> Result<TeacherTopology, CliError> {
    let f = fields(line)?;
    if f.len() != 3 {
        return Err(bad(format!("teacher topology `{line}`")));
    }
    teacher_from(&f)
}

pub fn parse_topology(line: &str) -> Result<Topology, CliError> {
    let f = fields(line)?;
    if f.len() != 8 {
        return Err(bad(format!("topology `{line}`")));
    }
    let feed: BranchFeed = take(&f, "feed")?.parse().map_err(bad)?;
    Ok(Topology {
        teacher: teacher_from(&f)?,
        student_widths: widths(&f, "student")?,
        branches: number(&f, "K")?,
        blocks_per_branch: number(&f, "m")?,
        branch_width: number(&f, "branch_width")?,
        branch_feed: feed,
    })
}
