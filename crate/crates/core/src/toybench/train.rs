//! Training loop: seeded batching, Adam or SGD-with-momentum, per-step
//! loss logging, periodic gate logging and a final checkpoint.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::ParamSink;
use crate::rng;
use crate::tape::{ParamRef, Tape};
use crate::toybench::data::Dataset;
use crate::toybench::loss::batch_loss;
use crate::toybench::model::{ModelVariant, ToyModel};
use crate::toybench::tasks::TASKS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Momentum,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<OptimizerKind> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "momentum" => Some(OptimizerKind::Momentum),
            _ => None,
        }
    }
}

/// First-order optimizer over a fixed parameter list. Reads accumulated
/// gradients, updates values in place; the caller zeroes gradients.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    params: Vec<ParamRef>,
    /// Adam first/second moments, or the momentum velocity in `m`.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: Vec<ParamRef>) -> Optimizer {
        let sizes: Vec<usize> = params.iter().map(|p| p.borrow().value.data.len()).collect();
        Optimizer {
            kind,
            lr,
            params,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self) {
        self.steps += 1;
        for (i, p) in self.params.iter().enumerate() {
            let mut p = p.borrow_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                    for j in 0..p.value.data.len() {
                        let g = p.grad.data[j];
                        self.m[i][j] = ADAM_BETA1 * self.m[i][j] + (1.0 - ADAM_BETA1) * g;
                        self.v[i][j] = ADAM_BETA2 * self.v[i][j] + (1.0 - ADAM_BETA2) * g * g;
                        let mhat = self.m[i][j] / bc1;
                        let vhat = self.v[i][j] / bc2;
                        p.value.data[j] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Momentum => {
                    for j in 0..p.value.data.len() {
                        self.m[i][j] = MOMENTUM * self.m[i][j] + p.grad.data[j];
                        p.value.data[j] -= self.lr * self.m[i][j];
                    }
                }
            }
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.borrow_mut().zero_grad();
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub backbone_channels: usize,
    /// Gate statistics are logged every this many steps (decoder variant).
    pub log_every: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iters: 1000,
            batch: 1,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            backbone_channels: 16,
            log_every: 50,
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean total loss over the first tenth of the run.
    pub first_window: f64,
    /// Mean total loss over the last tenth of the run.
    pub last_window: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

impl TrainReport {
    /// Relative improvement of the late window over the early window.
    pub fn improvement(&self) -> f64 {
        if self.first_window.abs() < 1e-12 {
            0.0
        } else {
            (self.first_window - self.last_window) / self.first_window
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Trains `variant` on the dataset and writes `loss.csv`, `gates.csv`
/// (decoder variant only) and `model.ckpt` into `out_dir`.
pub fn train(
    cfg: &ModelConfig,
    variant: ModelVariant,
    ds: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if ds.is_empty() {
        return Err(Error::Config("training on an empty dataset".to_string()));
    }
    std::fs::create_dir_all(&opts.out_dir)?;

    let mut init = rng::substream(cfg.seed, "model-init");
    let model = ToyModel::new(cfg, variant, opts.backbone_channels, (ds.height, ds.width), &mut init)?;
    let mut sink = ParamSink::default();
    model.collect(&mut sink);
    let mut opt = Optimizer::new(opts.optimizer, opts.lr, sink.param_refs());

    let mut order_rng = rng::substream(cfg.seed, "batch-order");
    let mut noise_rng = rng::substream(cfg.seed, "router-noise");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;

    let task_names: Vec<&str> =
        variant.task_indices().iter().map(|&t| TASKS[t].name).collect();
    let mut loss_csv = format!("step,total,balance,{}\n", task_names.join(","));
    let mut gates_csv = String::from("step,module_id,expert_id,active_ratio,mean_gate\n");
    let mut totals = Vec::with_capacity(opts.iters);

    for step in 0..opts.iters {
        let mut idxs = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idxs.push(order[cursor]);
            cursor += 1;
        }

        let mut tape = Tape::new();
        let images = tape.constant(ds.images(&idxs));
        let noise = if cfg.noise { Some(&mut noise_rng) } else { None };
        let out = model.forward(&mut tape, images, true, noise)?;
        let (total, breakdown) = batch_loss(&mut tape, &out, ds, &idxs, cfg.lb_weight)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("total loss {}", breakdown.total),
            });
        }
        tape.backward(total)?;
        opt.step();
        opt.zero_grads();

        totals.push(breakdown.total);
        let tasks = breakdown
            .tasks
            .iter()
            .map(|(_, v)| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",");
        loss_csv.push_str(&format!(
            "{step},{:.6},{:.6},{tasks}\n",
            breakdown.total, breakdown.balance
        ));

        if !out.gate_log.is_empty() && step % opts.log_every.max(1) == 0 {
            for (module_id, log) in out.gate_log.iter().enumerate() {
                let mut active = vec![0u64; cfg.num_experts];
                let mut gate_sum = vec![0.0; cfg.num_experts];
                let mut routings = 0u64;
                for per_task in &log.snapshots {
                    for snap in per_task {
                        routings += 1;
                        for &e in &snap.active {
                            active[e] += 1;
                            gate_sum[e] += snap.gates[e];
                        }
                    }
                }
                for e in 0..cfg.num_experts {
                    let ratio = active[e] as f64 / routings.max(1) as f64;
                    let mean = if active[e] > 0 { gate_sum[e] / active[e] as f64 } else { 0.0 };
                    gates_csv.push_str(&format!("{step},{module_id},{e},{ratio:.6},{mean:.6}\n"));
                }
            }
        }
    }

    write_file(&opts.out_dir.join("loss.csv"), &loss_csv)?;
    if matches!(variant, ModelVariant::Mlore) {
        write_file(&opts.out_dir.join("gates.csv"), &gates_csv)?;
    }

    let ckpt_path = opts.out_dir.join("model.ckpt");
    crate::checkpoint::save(&ckpt_path, cfg, &model.checkpoint_meta(), &sink)?;

    let window = (opts.iters / 10).max(1).min(opts.iters);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(TrainReport {
        steps: opts.iters,
        first_window: mean(&totals[..window]),
        last_window: mean(&totals[opts.iters - window..]),
        final_loss: *totals.last().expect("at least one step"),
        checkpoint: ckpt_path,
    })
}
