//! Task metrics, multi-task evaluation and the averaged relative
//! multi-task performance delta.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor4;
use crate::toybench::data::Dataset;
use crate::toybench::model::ToyModel;
use crate::toybench::tasks::{TaskKind, SEG_CLASSES, TASKS};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: usize,
    pub name: String,
    pub metric: String,
    pub value: f64,
    pub higher_better: bool,
}

/// Mean intersection-over-union over classes present in prediction or
/// target, with argmax class decisions.
pub fn miou(logits: &Tensor4, labels: &[u8]) -> f64 {
    let mut inter = [0u64; SEG_CLASSES];
    let mut pred_n = [0u64; SEG_CLASSES];
    let mut gt_n = [0u64; SEG_CLASSES];
    accumulate_miou(logits, labels, &mut inter, &mut pred_n, &mut gt_n);
    finish_miou(&inter, &pred_n, &gt_n)
}

fn accumulate_miou(
    logits: &Tensor4,
    labels: &[u8],
    inter: &mut [u64; SEG_CLASSES],
    pred_n: &mut [u64; SEG_CLASSES],
    gt_n: &mut [u64; SEG_CLASSES],
) {
    let s = logits.shape;
    let hw = s.h * s.w;
    for n in 0..s.n {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..s.c {
                let v = logits.data[(n * s.c + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            let gt = labels[n * hw + p] as usize;
            pred_n[best] += 1;
            gt_n[gt] += 1;
            if best == gt {
                inter[gt] += 1;
            }
        }
    }
}

fn finish_miou(
    inter: &[u64; SEG_CLASSES],
    pred_n: &[u64; SEG_CLASSES],
    gt_n: &[u64; SEG_CLASSES],
) -> f64 {
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..SEG_CLASSES {
        let union = pred_n[c] + gt_n[c] - inter[c];
        if union > 0 {
            sum += inter[c] as f64 / union as f64;
            classes += 1;
        }
    }
    if classes == 0 {
        1.0
    } else {
        sum / classes as f64
    }
}

/// F1 of the positive class with predictions thresholded at probability
/// one half; returns 1 when neither predictions nor targets are positive.
pub fn f1_at_half(logits: &Tensor4, target: &Tensor4) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    accumulate_f1(logits, target, &mut tp, &mut fp, &mut fn_);
    finish_f1(tp, fp, fn_)
}

fn accumulate_f1(logits: &Tensor4, target: &Tensor4, tp: &mut u64, fp: &mut u64, fn_: &mut u64) {
    for (l, t) in logits.data.iter().zip(&target.data) {
        // sigmoid(l) > 0.5 exactly when l > 0
        let pred = *l > 0.0;
        let gt = *t > 0.5;
        match (pred, gt) {
            (true, true) => *tp += 1,
            (true, false) => *fp += 1,
            (false, true) => *fn_ += 1,
            (false, false) => {}
        }
    }
}

fn finish_f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn rmse(pred: &Tensor4, target: &Tensor4) -> f64 {
    let (mut sse, mut n) = (0.0, 0u64);
    accumulate_rmse(pred, target, &mut sse, &mut n);
    (sse / n.max(1) as f64).sqrt()
}

fn accumulate_rmse(pred: &Tensor4, target: &Tensor4, sse: &mut f64, n: &mut u64) {
    for (p, t) in pred.data.iter().zip(&target.data) {
        *sse += (p - t) * (p - t);
        *n += 1;
    }
}

/// Mean angular error in degrees over pixels whose target orientation is
/// defined. Predictions shorter than 1e-6 count as orthogonal (90 deg).
pub fn mean_angular_error_deg(pred: &Tensor4, target: &Tensor4) -> f64 {
    let (mut sum, mut n) = (0.0, 0u64);
    accumulate_merr(pred, target, &mut sum, &mut n);
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn accumulate_merr(pred: &Tensor4, target: &Tensor4, sum: &mut f64, n: &mut u64) {
    let s = pred.shape;
    let hw = s.h * s.w;
    for b in 0..s.n {
        for p in 0..hw {
            let ty = target.data[(b * 2) * hw + p];
            let tx = target.data[(b * 2 + 1) * hw + p];
            let tmag = (ty * ty + tx * tx).sqrt();
            if tmag < 0.5 {
                continue; // orientation undefined here
            }
            let py = pred.data[(b * 2) * hw + p];
            let px = pred.data[(b * 2 + 1) * hw + p];
            let pmag = (py * py + px * px).sqrt();
            let angle = if pmag < 1e-6 {
                90.0
            } else {
                let cos = ((py * ty + px * tx) / (pmag * tmag)).clamp(-1.0, 1.0);
                cos.acos().to_degrees()
            };
            *sum += angle;
            *n += 1;
        }
    }
}

/// Average relative multi-task performance difference against a baseline,
/// in percent; positive means `model` is better. Tasks are matched by
/// name, and every model task must have a baseline entry.
pub fn delta_m(model: &[TaskMetrics], baseline: &[TaskMetrics]) -> Result<f64> {
    if model.is_empty() {
        return Err(Error::Format("delta_m over zero tasks".to_string()));
    }
    let mut sum = 0.0;
    for m in model {
        let b = baseline
            .iter()
            .find(|b| b.name == m.name)
            .ok_or_else(|| Error::Format(format!("baseline lacks task {}", m.name)))?;
        if b.value.abs() < 1e-12 {
            return Err(Error::Format(format!("baseline {} is zero", m.name)));
        }
        let sign = if m.higher_better { 1.0 } else { -1.0 };
        sum += sign * (m.value - b.value) / b.value;
    }
    Ok(100.0 * sum / model.len() as f64)
}

/// Runs the model over the dataset in eval mode and computes every covered
/// task's metric, accumulated across batches (not averaged per batch).
pub fn evaluate(model: &ToyModel, ds: &Dataset, batch: usize) -> Result<Vec<TaskMetrics>> {
    let mut inter = [0u64; SEG_CLASSES];
    let mut pred_n = [0u64; SEG_CLASSES];
    let mut gt_n = [0u64; SEG_CLASSES];
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let (mut sse, mut sse_n) = (0.0, 0u64);
    let (mut ang, mut ang_n) = (0.0, 0u64);

    let idxs: Vec<usize> = (0..ds.len()).collect();
    for chunk in idxs.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let images = tape.constant(ds.images(chunk));
        let out = model.forward(&mut tape, images, false, None)?;
        for (t, pred) in &out.predictions {
            let pred = tape.value(*pred);
            match TASKS[*t].kind {
                TaskKind::Seg => {
                    let labels = ds.seg_labels(chunk);
                    accumulate_miou(pred, &labels, &mut inter, &mut pred_n, &mut gt_n);
                }
                TaskKind::Boundary => {
                    let target = ds.targets(chunk, TaskKind::Boundary);
                    accumulate_f1(pred, &target, &mut tp, &mut fp, &mut fn_);
                }
                TaskKind::Distance => {
                    let target = ds.targets(chunk, TaskKind::Distance);
                    accumulate_rmse(pred, &target, &mut sse, &mut sse_n);
                }
                TaskKind::Normals => {
                    let target = ds.targets(chunk, TaskKind::Normals);
                    accumulate_merr(pred, &target, &mut ang, &mut ang_n);
                }
            }
        }
    }

    let mut out = Vec::new();
    for t in model.variant.task_indices() {
        let spec = &TASKS[t];
        let value = match spec.kind {
            TaskKind::Seg => finish_miou(&inter, &pred_n, &gt_n),
            TaskKind::Boundary => finish_f1(tp, fp, fn_),
            TaskKind::Distance => (sse / sse_n.max(1) as f64).sqrt(),
            TaskKind::Normals => {
                if ang_n == 0 {
                    0.0
                } else {
                    ang / ang_n as f64
                }
            }
        };
        out.push(TaskMetrics {
            task: t,
            name: spec.name.to_string(),
            metric: spec.metric.to_string(),
            value,
            higher_better: spec.higher_better,
        });
    }
    Ok(out)
}

/// Human-readable results table, with per-task baselines and the averaged
/// delta when a baseline is supplied.
pub fn report(model: &[TaskMetrics], baseline: Option<&[TaskMetrics]>) -> Result<String> {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<6} {:>5} {:>12}{}\n",
        "task",
        "metric",
        "dir",
        "value",
        if baseline.is_some() { format!("{:>12}", "baseline") } else { String::new() }
    ));
    for m in model {
        let dir = if m.higher_better { "up" } else { "down" };
        let base = match baseline {
            Some(b) => match b.iter().find(|x| x.name == m.name) {
                Some(x) => format!("{:>12.6}", x.value),
                None => format!("{:>12}", "-"),
            },
            None => String::new(),
        };
        out.push_str(&format!(
            "{:<10} {:<6} {:>5} {:>12.6}{}\n",
            m.name, m.metric, dir, m.value, base
        ));
    }
    if let Some(b) = baseline {
        out.push_str(&format!("delta_m {:+.4}%\n", delta_m(model, b)?));
    }
    Ok(out)
}
