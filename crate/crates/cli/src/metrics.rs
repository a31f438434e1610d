//! JSON-lines metric records.

use era_core::distill::{EpochMetrics, TeacherEpoch};
use serde_json::{Map, Value};

use crate::error::CliError;

fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Keys in order: `epoch, loss_total, loss_kd, loss_fd_0..K, loss_cls_1..K,
/// approx_error, acc_s, acc_t, acc_st`.
pub fn epoch_record(m: &EpochMetrics) -> String {
    let mut o = Map::new();
    o.insert("epoch".into(), m.epoch.into());
    o.insert("loss_total".into(), number(m.loss_total));
    o.insert("loss_kd".into(), number(m.loss_kd));
    for (k, v) in m.loss_fd.iter().enumerate() {
        o.insert(format!("loss_fd_{k}"), number(*v));
    }
    for (k, v) in m.loss_cls.iter().enumerate() {
        o.insert(format!("loss_cls_{}", k + 1), number(*v));
    }
    o.insert("approx_error".into(), number(m.approx_error));
    o.insert("acc_s".into(), number(m.acc_s));
    o.insert("acc_t".into(), number(m.acc_t));
    o.insert("acc_st".into(), number(m.acc_st));
    Value::Object(o).to_string()
}

pub fn teacher_record(m: &TeacherEpoch) -> String {
    let mut o = Map::new();
    o.insert("epoch".into(), m.epoch.into());
    o.insert("loss".into(), number(m.loss));
    o.insert("acc".into(), number(m.acc));
    Value::Object(o).to_string()
}

pub fn join_lines<I: IntoIterator<Item = String>>(lines: I) -> String {
    lines.into_iter().map(|l| l + "\n").collect()
}

/// Lines of an existing metrics file whose `epoch` is at most `last`.
pub fn lines_through(text: &str, last: usize) -> Result<Vec<String>, CliError> {
    let mut kept = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::Failure(format!("unreadable metrics line `{line}`: {e}")))?;
        let epoch = v
            .get("epoch")
            .and_then(Value::as_u64)
            .ok_or_else(|| CliError::Failure(format!("metrics line without epoch: `{line}`")))?;
        if epoch as usize <= last {
            kept.push(line.to_string());
        }
    }
    Ok(kept)
}
