//! Multi-task loss assembly: one fixed criterion per task, unit task
//! weights, plus the weighted routing balance term when present.

use crate::error::Result;
use crate::tape::{Tape, Value};
use crate::toybench::data::Dataset;
use crate::toybench::model::ToyOutput;
use crate::toybench::tasks::{TaskKind, TASKS};

/// Per-task loss values of one batch, read back off the tape.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    /// `(task index, loss value)` in prediction order.
    pub tasks: Vec<(usize, f64)>,
    /// Unweighted balance penalty; zero when the model has no router.
    pub balance: f64,
}

pub fn task_loss(
    tape: &mut Tape,
    task: usize,
    pred: Value,
    ds: &Dataset,
    idxs: &[usize],
) -> Result<Value> {
    let kind = TASKS[task].kind;
    match kind {
        TaskKind::Seg => {
            let labels = ds.seg_labels(idxs);
            tape.cross_entropy(pred, &labels)
        }
        TaskKind::Boundary => {
            let target = ds.targets(idxs, kind);
            tape.balanced_bce(pred, &target)
        }
        TaskKind::Distance | TaskKind::Normals => {
            let target = ds.targets(idxs, kind);
            tape.l1_loss(pred, &target)
        }
    }
}

/// Sums every covered task's loss (unit weights) and `lb_weight` times the
/// balance penalty.
pub fn batch_loss(
    tape: &mut Tape,
    out: &ToyOutput,
    ds: &Dataset,
    idxs: &[usize],
    lb_weight: f64,
) -> Result<(Value, LossBreakdown)> {
    let mut tasks = Vec::with_capacity(out.predictions.len());
    let mut total: Option<Value> = None;
    for (t, pred) in &out.predictions {
        let loss = task_loss(tape, *t, *pred, ds, idxs)?;
        tasks.push((*t, tape.value(loss).data[0]));
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let mut total = total.expect("at least one predicted task");
    let mut balance = 0.0;
    if let Some(b) = out.balance {
        balance = tape.value(b).data[0];
        let weighted = tape.scale_const(b, lb_weight);
        total = tape.add(total, weighted)?;
    }
    let breakdown = LossBreakdown { total: tape.value(total).data[0], tasks, balance };
    Ok((total, breakdown))
}
