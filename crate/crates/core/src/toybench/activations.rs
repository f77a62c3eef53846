//! Expert activation statistics: which experts fire, for which tasks, how
//! strongly, and how often one expert serves several tasks on the same
//! sample. Aggregated over eval-mode passes (deterministic routing).

use std::io::Write as _;
use std::path::Path;

use crate::config::ModelConfig;
use crate::decoder::ModuleGateLog;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::toybench::data::Dataset;
use crate::toybench::model::{ModelVariant, ToyModel};

#[derive(Clone, Debug)]
pub struct ModuleActivations {
    pub scale: usize,
    pub index: usize,
    /// Rank of each expert, from the configuration's schedule.
    pub ranks: Vec<usize>,
    /// `counts[expert][task]`: samples for which the expert was active.
    pub counts: Vec<Vec<u64>>,
    /// `gate_sums[expert][task]`: summed gate values over active samples.
    pub gate_sums: Vec<Vec<f64>>,
    /// `simultaneous[expert][j]`: samples for which the expert was active
    /// in exactly `j` tasks, `j` in `0..=tasks`.
    pub simultaneous: Vec<Vec<u64>>,
}

#[derive(Clone, Debug)]
pub struct ActivationStats {
    pub tasks: usize,
    pub samples: u64,
    pub modules: Vec<ModuleActivations>,
}

impl ActivationStats {
    pub fn new(cfg: &ModelConfig) -> ActivationStats {
        let ranks = cfg.ranks();
        ActivationStats {
            tasks: cfg.tasks,
            samples: 0,
            modules: Vec::new(),
        }
        .with_ranks(cfg, &ranks)
    }

    fn with_ranks(mut self, cfg: &ModelConfig, ranks: &[usize]) -> ActivationStats {
        for scale in 0..cfg.scales {
            for index in 0..cfg.stack_per_scale {
                self.modules.push(ModuleActivations {
                    scale,
                    index,
                    ranks: ranks.to_vec(),
                    counts: vec![vec![0; cfg.tasks]; cfg.num_experts],
                    gate_sums: vec![vec![0.0; cfg.tasks]; cfg.num_experts],
                    simultaneous: vec![vec![0; cfg.tasks + 1]; cfg.num_experts],
                });
            }
        }
        self
    }

    /// Folds one forward pass's gate log into the statistics.
    pub fn accumulate(&mut self, gate_log: &[ModuleGateLog]) -> Result<()> {
        if gate_log.len() != self.modules.len() {
            return Err(Error::shape(
                "activation_stats",
                format!("{} gate logs for {} modules", gate_log.len(), self.modules.len()),
            ));
        }
        let batch = gate_log
            .first()
            .and_then(|log| log.snapshots.first())
            .map_or(0, |per_task| per_task.len());
        for (stats, log) in self.modules.iter_mut().zip(gate_log) {
            if log.snapshots.len() != self.tasks {
                return Err(Error::shape(
                    "activation_stats",
                    format!("{} task snapshot lists, expected {}", log.snapshots.len(), self.tasks),
                ));
            }
            for sample in 0..batch {
                let mut active_tasks = vec![0usize; stats.counts.len()];
                for (task, per_task) in log.snapshots.iter().enumerate() {
                    let snap = &per_task[sample];
                    for &e in &snap.active {
                        stats.counts[e][task] += 1;
                        stats.gate_sums[e][task] += snap.gates[e];
                        active_tasks[e] += 1;
                    }
                }
                for (e, &n) in active_tasks.iter().enumerate() {
                    stats.simultaneous[e][n] += 1;
                }
            }
        }
        self.samples += batch as u64;
        Ok(())
    }

    /// Activation frequency of `(module, expert, task)`.
    pub fn ratio(&self, module: usize, expert: usize, task: usize) -> f64 {
        self.modules[module].counts[expert][task] as f64 / self.samples.max(1) as f64
    }

    /// Mean gate value over the samples where the expert was active; zero
    /// for never-active experts.
    pub fn mean_gate(&self, module: usize, expert: usize, task: usize) -> f64 {
        let n = self.modules[module].counts[expert][task];
        if n == 0 {
            0.0
        } else {
            self.modules[module].gate_sums[expert][task] / n as f64
        }
    }

    /// Smallest per-task activation frequency across all modules and
    /// experts: a direct read on whether any expert went unused.
    pub fn min_activation_ratio(&self) -> f64 {
        let mut min = f64::INFINITY;
        for m in 0..self.modules.len() {
            for e in 0..self.modules[m].counts.len() {
                for t in 0..self.tasks {
                    min = min.min(self.ratio(m, e, t));
                }
            }
        }
        if min.is_finite() {
            min
        } else {
            0.0
        }
    }

    /// Per-(module, expert, task) activation table.
    pub fn expert_csv(&self) -> String {
        let mut out = String::from("module_id,expert_id,rank,task_id,activation_ratio,mean_gate\n");
        for (m, stats) in self.modules.iter().enumerate() {
            for e in 0..stats.counts.len() {
                for t in 0..self.tasks {
                    out.push_str(&format!(
                        "{m},{e},{},{t},{:.6},{:.6}\n",
                        stats.ranks[e],
                        self.ratio(m, e, t),
                        self.mean_gate(m, e, t),
                    ));
                }
            }
        }
        out
    }

    /// Per-(module, expert) distribution over how many tasks the expert
    /// serves simultaneously on one sample.
    pub fn tasks_per_expert_csv(&self) -> String {
        let mut out = String::from("module_id,expert_id");
        for j in 0..=self.tasks {
            out.push_str(&format!(",tasks_{j}"));
        }
        out.push('\n');
        for (m, stats) in self.modules.iter().enumerate() {
            for (e, dist) in stats.simultaneous.iter().enumerate() {
                out.push_str(&format!("{m},{e}"));
                for &count in dist {
                    out.push_str(&format!(",{:.6}", count as f64 / self.samples.max(1) as f64));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Runs the decoder model over the dataset in eval mode and aggregates
/// activation statistics.
pub fn collect(model: &ToyModel, ds: &Dataset, batch: usize) -> Result<ActivationStats> {
    if model.variant != ModelVariant::Mlore {
        return Err(Error::Config("activation export needs the decoder variant".to_string()));
    }
    let mut stats = ActivationStats::new(&model.cfg);
    let idxs: Vec<usize> = (0..ds.len()).collect();
    for chunk in idxs.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let images = tape.constant(ds.images(chunk));
        let out = model.forward(&mut tape, images, false, None)?;
        stats.accumulate(&out.gate_log)?;
    }
    Ok(stats)
}

/// Writes both activation tables into `out_dir`.
pub fn export(stats: &ActivationStats, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut f = std::fs::File::create(out_dir.join("activations.csv"))?;
    f.write_all(stats.expert_csv().as_bytes())?;
    let mut f = std::fs::File::create(out_dir.join("tasks_per_expert.csv"))?;
    f.write_all(stats.tasks_per_expert_csv().as_bytes())?;
    Ok(())
}
