//! The decoder: per-task projections feeding three parallel paths — a
//! task-sharing generic 3x3 convolution (input-detached during training),
//! a pool of task-sharing low-rank experts under noisy top-k routing, and
//! one task-specific low-rank expert scaled by the router's extra output —
//! stacked per scale with BatchNorm-GELU-linear blocks between, fused
//! across scales by a learned pixel-wise mask, and finished with per-task
//! prediction heads.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, ParamSink};
use crate::router::{GateVector, Router, Routing};
use crate::tape::{Tape, Value};

/// Factored convolution: a 3x3 mapping into `rank` channels followed by a
/// 1x1 mapping out, with no activation anywhere so the pair composes to a
/// single 3x3 kernel.
pub struct LowRankExpert {
    pub down: Conv2d,
    pub up: Conv2d,
    pub rank: usize,
}

impl LowRankExpert {
    pub fn new(c_in: usize, rank: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        LowRankExpert {
            down: Conv2d::new(3, c_in, rank, rng),
            up: Conv2d::new(1, rank, c_out, rng),
            rank,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let mid = self.down.forward(tape, x)?;
        self.up.forward(tape, mid)
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        self.down.collect(&format!("{prefix}.down"), sink);
        self.up.collect(&format!("{prefix}.up"), sink);
    }
}

/// Task-sharing 3x3 convolution. With `detach_input` set (the training
/// default) its input is cut out of the gradient graph: the convolution's
/// own weights still learn, but nothing upstream hears from this path.
pub struct GenericPath {
    pub conv: Conv2d,
    pub detach_input: bool,
}

impl GenericPath {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        GenericPath { conv: Conv2d::new(3, channels, channels, rng), detach_input: true }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let input = if self.detach_input { tape.detach(x) } else { x };
        self.conv.forward(tape, input)
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        self.conv.collect(prefix, sink);
    }
}

/// Input to a module: the first module in a stack splits one shared
/// feature into per-task features; later modules re-project features that
/// are already per-task.
pub enum TaskFeatures {
    Shared(Value),
    PerTask(Vec<Value>),
}

pub struct ModuleOutput {
    /// Per-task output features.
    pub features: Vec<Value>,
    /// Gate mass per expert, summed over batch and tasks; `(1, N, 1, 1)`.
    pub importance: Value,
    /// Expected activation count per expert, same accumulation.
    pub load: Value,
    /// Routing snapshots indexed `[task][sample]`.
    pub snapshots: Vec<Vec<GateVector>>,
}

pub struct MloreModule {
    pub projections: Vec<Conv2d>,
    pub generic: GenericPath,
    pub shared_experts: Vec<LowRankExpert>,
    pub routers: Vec<Router>,
    pub expert_bn: Vec<BatchNorm>,
    pub specific_experts: Vec<LowRankExpert>,
}

impl MloreModule {
    /// `c_in` is the width of the incoming features (backbone width for
    /// the first module of a stack, decoder width after); `hw` the spatial
    /// size the routers are built for.
    pub fn new(c_in: usize, hw: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        let projections =
            (0..cfg.tasks).map(|_| Conv2d::new(1, c_in, c, rng)).collect();
        let generic = GenericPath::new(c, rng);
        let shared_experts = cfg
            .ranks()
            .into_iter()
            .map(|r| LowRankExpert::new(c, r, c, rng))
            .collect();
        let routers = (0..cfg.tasks)
            .map(|_| Router::new(c, hw, cfg.num_experts, cfg.top_k, rng))
            .collect::<Result<Vec<_>>>()?;
        let expert_bn = (0..cfg.tasks).map(|_| BatchNorm::new(c)).collect();
        let specific_experts = (0..cfg.tasks)
            .map(|_| LowRankExpert::new(c, cfg.specific_rank, c, rng))
            .collect();
        Ok(MloreModule {
            projections,
            generic,
            shared_experts,
            routers,
            expert_bn,
            specific_experts,
        })
    }

    pub fn tasks(&self) -> usize {
        self.projections.len()
    }

    /// Project the incoming features to task `t`'s split.
    pub fn project(&self, tape: &mut Tape, input: &TaskFeatures, t: usize) -> Result<Value> {
        match input {
            TaskFeatures::Shared(x) => self.projections[t].forward(tape, *x),
            TaskFeatures::PerTask(xs) => {
                if xs.len() != self.tasks() {
                    return Err(Error::shape(
                        "project",
                        format!("{} per-task features for {} tasks", xs.len(), self.tasks()),
                    ));
                }
                self.projections[t].forward(tape, xs[t])
            }
        }
    }

    /// Gate-weighted sum over the experts any sample in the batch
    /// activated, then task `t`'s BatchNorm. Experts outside every
    /// sample's active set are never evaluated, so they get no gradient.
    pub fn shared_expert_sum(
        &self,
        tape: &mut Tape,
        x_t: Value,
        routing: &Routing,
        t: usize,
        training: bool,
    ) -> Result<Value> {
        let union: BTreeSet<usize> = routing
            .snapshots
            .iter()
            .flat_map(|snap| snap.active.iter().copied())
            .collect();
        let mut acc: Option<Value> = None;
        for &k in &union {
            let out = self.shared_experts[k].forward(tape, x_t)?;
            let gated = tape.scale_rows(out, routing.gates, k)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, gated)?,
                None => gated,
            });
        }
        let summed = acc.ok_or_else(|| Error::Routing("empty active set".into()))?;
        self.expert_bn[t].forward(tape, summed, training)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &TaskFeatures,
        training: bool,
        mut noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ModuleOutput> {
        let mut features = Vec::with_capacity(self.tasks());
        let mut snapshots = Vec::with_capacity(self.tasks());
        let mut importance: Option<Value> = None;
        let mut load: Option<Value> = None;
        for t in 0..self.tasks() {
            let x_t = self.project(tape, input, t)?;
            let routing = self.routers[t].route(tape, x_t, noise.as_deref_mut())?;
            let generic = self.generic.forward(tape, x_t)?;
            let shared = self.shared_expert_sum(tape, x_t, &routing, t, training)?;
            let specific = self.specific_experts[t].forward(tape, x_t)?;
            let scaled = tape.scale_rows(specific, routing.scale, 0)?;
            let partial = tape.add(generic, shared)?;
            features.push(tape.add(partial, scaled)?);

            let imp_t = tape.sum_over_batch(routing.gates);
            let load_t = tape.sum_over_batch(routing.load);
            importance = Some(match importance {
                Some(v) => tape.add(v, imp_t)?,
                None => imp_t,
            });
            load = Some(match load {
                Some(v) => tape.add(v, load_t)?,
                None => load_t,
            });
            snapshots.push(routing.snapshots);
        }
        Ok(ModuleOutput {
            features,
            importance: importance.expect("at least one task"),
            load: load.expect("at least one task"),
            snapshots,
        })
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        for (t, p) in self.projections.iter().enumerate() {
            p.collect(&format!("{prefix}.proj{t}"), sink);
        }
        self.generic.collect(&format!("{prefix}.generic"), sink);
        for (n, e) in self.shared_experts.iter().enumerate() {
            e.collect(&format!("{prefix}.expert{n}"), sink);
        }
        for (t, r) in self.routers.iter().enumerate() {
            r.collect(&format!("{prefix}.router{t}"), sink);
        }
        for (t, bn) in self.expert_bn.iter().enumerate() {
            bn.collect(&format!("{prefix}.expert_bn{t}"), sink);
        }
        for (t, e) in self.specific_experts.iter().enumerate() {
            e.collect(&format!("{prefix}.specific{t}"), sink);
        }
    }
}

/// BatchNorm -> GELU -> 1x1 linear, channel preserving; the only
/// nonlinearity in the decoder, kept outside the re-parameterizable module.
pub struct NonlinearBlock {
    pub bn: BatchNorm,
    pub linear: Conv2d,
}

impl NonlinearBlock {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        NonlinearBlock { bn: BatchNorm::new(channels), linear: Conv2d::new(1, channels, channels, rng) }
    }

    pub fn forward(&self, tape: &mut Tape, x: Value, training: bool) -> Result<Value> {
        let n = self.bn.forward(tape, x, training)?;
        let g = tape.gelu(n);
        self.linear.forward(tape, g)
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        self.bn.collect(&format!("{prefix}.bn"), sink);
        self.linear.collect(&format!("{prefix}.linear"), sink);
    }
}

/// Per-task fusion of the per-scale features: a 1x1 convolution over the
/// concatenation produces one logit per scale per pixel, softmaxed into
/// weights for a pixel-wise convex combination.
pub struct ScaleFusion {
    pub mask: Conv2d,
    pub scales: usize,
}

impl ScaleFusion {
    pub fn new(scales: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ScaleFusion { mask: Conv2d::new(1, scales * channels, scales, rng), scales }
    }

    pub fn forward(&self, tape: &mut Tape, feats: &[Value]) -> Result<Value> {
        if feats.len() != self.scales {
            return Err(Error::shape(
                "multiscale_fuse",
                format!("{} features for {} scales", feats.len(), self.scales),
            ));
        }
        let cat = tape.concat_channels(feats)?;
        let logits = self.mask.forward(tape, cat)?;
        let weights = tape.softmax_channels(logits, None)?;
        tape.weighted_scale_sum(feats, weights)
    }

    pub fn collect(&self, prefix: &str, sink: &mut ParamSink) {
        self.mask.collect(&format!("{prefix}.mask"), sink);
    }
}

/// Per-module balance penalty: squared coefficient of variation of the
/// accumulated gate mass plus the same for the expected activation counts,
/// scaled by `lb_weight`. Zero when both are uniform across experts.
pub fn load_balance_loss(
    tape: &mut Tape,
    importance: Value,
    load: Value,
    lb_weight: f64,
) -> Result<Value> {
    let ci = tape.cv_squared(importance);
    let cl = tape.cv_squared(load);
    let sum = tape.add(ci, cl)?;
    Ok(tape.scale_const(sum, lb_weight))
}

/// One module's routing record within a decoder forward.
pub struct ModuleGateLog {
    pub scale: usize,
    pub index: usize,
    /// `[task][sample]` snapshots.
    pub snapshots: Vec<Vec<GateVector>>,
}

pub struct DecoderOutput {
    /// Per-task predictions at the finest feature resolution.
    pub predictions: Vec<Value>,
    /// Sum of per-module balance penalties, before `lb_weight`.
    pub balance: Value,
    pub gate_log: Vec<ModuleGateLog>,
}

pub struct DecoderStage {
    pub modules: Vec<MloreModule>,
    /// `blocks[m][t]`: the block following module `m` for task `t`.
    pub blocks: Vec<Vec<NonlinearBlock>>,
}

pub struct MloreDecoder {
    pub stages: Vec<DecoderStage>,
    pub fusions: Vec<ScaleFusion>,
    pub heads: Vec<Conv2d>,
    /// Feature size per scale, fixed at construction (the routers' position
    /// branches learn one weight per pixel).
    pub dims: Vec<(usize, usize)>,
    pub c_in: usize,
}

impl MloreDecoder {
    pub fn new(
        cfg: &ModelConfig,
        c_in: usize,
        dims: &[(usize, usize)],
        head_channels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if dims.len() != cfg.scales {
            return Err(Error::Config(format!(
                "{} scale dims for {} scales",
                dims.len(),
                cfg.scales
            )));
        }
        if head_channels.len() != cfg.tasks {
            return Err(Error::Config(format!(
                "{} head widths for {} tasks",
                head_channels.len(),
                cfg.tasks
            )));
        }
        let (fh, fw) = Self::finest(dims);
        for &(h, w) in dims {
            if h == 0 || w == 0 || fh % h != 0 || fw % w != 0 || fh / h != fw / w {
                return Err(Error::Config(format!(
                    "scale size {h}x{w} does not upsample integrally to {fh}x{fw}"
                )));
            }
        }
        let mut stages = Vec::with_capacity(cfg.scales);
        for &(h, w) in dims {
            let mut modules = Vec::with_capacity(cfg.stack_per_scale);
            let mut blocks = Vec::with_capacity(cfg.stack_per_scale);
            for m in 0..cfg.stack_per_scale {
                let width = if m == 0 { c_in } else { cfg.channels };
                modules.push(MloreModule::new(width, h * w, cfg, rng)?);
                blocks.push(
                    (0..cfg.tasks).map(|_| NonlinearBlock::new(cfg.channels, rng)).collect(),
                );
            }
            stages.push(DecoderStage { modules, blocks });
        }
        let fusions = (0..cfg.tasks)
            .map(|_| ScaleFusion::new(cfg.scales, cfg.channels, rng))
            .collect();
        let heads = head_channels
            .iter()
            .map(|&out| Conv2d::new(1, cfg.channels, out, rng))
            .collect();
        Ok(MloreDecoder { stages, fusions, heads, dims: dims.to_vec(), c_in })
    }

    fn finest(dims: &[(usize, usize)]) -> (usize, usize) {
        dims.iter().copied().max_by_key(|&(h, w)| h * w).expect("at least one scale")
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &[Value],
        training: bool,
        mut noise: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderOutput> {
        if features.len() != self.stages.len() {
            return Err(Error::shape(
                "decoder_forward",
                format!("{} features for {} scales", features.len(), self.stages.len()),
            ));
        }
        let tasks = self.tasks();
        let (fh, fw) = Self::finest(&self.dims);
        // scale_feats[t][s]: task t's feature from scale s, at finest size.
        let mut scale_feats: Vec<Vec<Value>> = vec![Vec::new(); tasks];
        let mut balance: Option<Value> = None;
        let mut gate_log = Vec::new();

        for (s, stage) in self.stages.iter().enumerate() {
            let xs = tape.shape(features[s]);
            if (xs.c, xs.h, xs.w) != (self.c_in, self.dims[s].0, self.dims[s].1) {
                return Err(Error::shape(
                    "decoder_forward",
                    format!(
                        "scale {s} expects ({}, {}, {}), got {xs}",
                        self.c_in, self.dims[s].0, self.dims[s].1
                    ),
                ));
            }
            let mut current = TaskFeatures::Shared(features[s]);
            for (m, module) in stage.modules.iter().enumerate() {
                let out = module.forward(tape, &current, training, noise.as_deref_mut())?;
                let per_module = load_balance_loss(tape, out.importance, out.load, 1.0)?;
                balance = Some(match balance {
                    Some(b) => tape.add(b, per_module)?,
                    None => per_module,
                });
                gate_log.push(ModuleGateLog { scale: s, index: m, snapshots: out.snapshots });
                let mut next = Vec::with_capacity(tasks);
                for t in 0..tasks {
                    next.push(stage.blocks[m][t].forward(tape, out.features[t], training)?);
                }
                current = TaskFeatures::PerTask(next);
            }
            let finals = match current {
                TaskFeatures::PerTask(v) => v,
                TaskFeatures::Shared(_) => unreachable!("stack_per_scale >= 1"),
            };
            let factor = fh / self.dims[s].0;
            for (t, f) in finals.into_iter().enumerate() {
                let up = tape.upsample_nearest(f, factor)?;
                scale_feats[t].push(up);
            }
        }
        debug_assert_eq!(fw / self.dims[0].1 * self.dims[0].1, fw);

        let mut predictions = Vec::with_capacity(tasks);
        for t in 0..tasks {
            let fused = self.fusions[t].forward(tape, &scale_feats[t])?;
            predictions.push(self.heads[t].forward(tape, fused)?);
        }
        Ok(DecoderOutput {
            predictions,
            balance: balance.expect("at least one module"),
            gate_log,
        })
    }

    pub fn collect(&self, sink: &mut ParamSink) {
        for (s, stage) in self.stages.iter().enumerate() {
            for (m, module) in stage.modules.iter().enumerate() {
                module.collect(&format!("decoder.s{s}.m{m}"), sink);
                for (t, b) in stage.blocks[m].iter().enumerate() {
                    b.collect(&format!("decoder.s{s}.m{m}.block{t}"), sink);
                }
            }
        }
        for (t, f) in self.fusions.iter().enumerate() {
            f.collect(&format!("decoder.fuse{t}"), sink);
        }
        for (t, h) in self.heads.iter().enumerate() {
            h.collect(&format!("decoder.head{t}"), sink);
        }
    }
}
