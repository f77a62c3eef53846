//! Inference-time re-parameterization: with BatchNorm frozen and gates
//! fixed, every path of a decoder module is affine in its input, so the
//! whole module collapses to one 3x3 convolution per task. This module
//! holds the folding algebra (generic over float width), an equivalence
//! verifier that sweeps random configurations, and a fused forward for the
//! whole decoder.

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{MloreDecoder, MloreModule, TaskFeatures};
use crate::error::{Error, Result};
use crate::kernels::{bn_affine, conv2d, KernelDims};
use crate::layers::{BatchNorm, Conv2d};
use crate::rng;
use crate::router::GateVector;
use crate::shape::Shape4;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor4;

fn cast<T: Float>(x: f64) -> T {
    T::from(x).expect("finite cast")
}

/// A convolution's raw numbers, detached from the tape.
#[derive(Clone)]
pub struct PlainConv<T> {
    pub dims: KernelDims,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl PlainConv<f64> {
    pub fn snapshot(conv: &Conv2d) -> Self {
        let w = conv.weight.borrow();
        let b = conv.bias.borrow();
        PlainConv {
            dims: KernelDims::from_shape(w.value.shape),
            weight: w.value.data.clone(),
            bias: b.value.data.clone(),
        }
    }
}

impl<T: Float> PlainConv<T> {
    pub fn to_precision<U: Float>(&self) -> PlainConv<U> {
        PlainConv {
            dims: self.dims,
            weight: self.weight.iter().map(|&v| U::from(v).expect("cast")).collect(),
            bias: self.bias.iter().map(|&v| U::from(v).expect("cast")).collect(),
        }
    }

    pub fn forward(&self, x: &[T], xs: Shape4) -> Result<Vec<T>> {
        conv2d(x, xs, &self.weight, self.dims, Some(&self.bias))
    }
}

/// Frozen normalization statistics, the only form folding accepts: the
/// running estimates a trained layer carries into inference. (Folding
/// against in-flight batch statistics is not representable.)
#[derive(Clone)]
pub struct BnFold<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl BnFold<f64> {
    pub fn snapshot(bn: &BatchNorm) -> Self {
        BnFold {
            gamma: bn.gamma.borrow().value.data.clone(),
            beta: bn.beta.borrow().value.data.clone(),
            mean: bn.running_mean.borrow().clone(),
            var: bn.running_var.borrow().clone(),
            eps: bn.eps,
        }
    }
}

impl<T: Float> BnFold<T> {
    pub fn to_precision<U: Float>(&self) -> BnFold<U> {
        BnFold {
            gamma: self.gamma.iter().map(|&v| U::from(v).expect("cast")).collect(),
            beta: self.beta.iter().map(|&v| U::from(v).expect("cast")).collect(),
            mean: self.mean.iter().map(|&v| U::from(v).expect("cast")).collect(),
            var: self.var.iter().map(|&v| U::from(v).expect("cast")).collect(),
            eps: U::from(self.eps).expect("cast"),
        }
    }

    fn scale(&self, c: usize) -> T {
        self.gamma[c] / (self.var[c] + self.eps).sqrt()
    }
}

/// Collapse a low-rank pair (3x3 into `r`, 1x1 out of `r`) into one 3x3
/// kernel: `W[i,j,c,o] = sum_r down.w[i,j,c,r] * up.w[0,0,r,o]` and
/// `b[o] = sum_r down.b[r] * up.w[0,0,r,o] + up.b[o]`.
pub fn compose_lowrank<T: Float>(down: &PlainConv<T>, up: &PlainConv<T>) -> Result<PlainConv<T>> {
    if up.dims.kh != 1 || up.dims.kw != 1 || up.dims.c_in != down.dims.c_out {
        return Err(Error::shape(
            "compose_lowrank",
            format!("cannot compose {:?} with {:?}", down.dims, up.dims),
        ));
    }
    let r = down.dims.c_out;
    let out_dims = KernelDims::new(down.dims.kh, down.dims.kw, down.dims.c_in, up.dims.c_out);
    let mut weight = vec![T::zero(); out_dims.kh * out_dims.kw * out_dims.c_in * out_dims.c_out];
    for i in 0..out_dims.kh {
        for j in 0..out_dims.kw {
            for c in 0..out_dims.c_in {
                for o in 0..out_dims.c_out {
                    let mut acc = T::zero();
                    for rr in 0..r {
                        acc = acc + down.weight[down.dims.at(i, j, c, rr)] * up.weight[up.dims.at(0, 0, rr, o)];
                    }
                    weight[out_dims.at(i, j, c, o)] = acc;
                }
            }
        }
    }
    let bias: Vec<T> = (0..out_dims.c_out)
        .map(|o| {
            let mut acc = up.bias[o];
            for rr in 0..r {
                acc = acc + down.bias[rr] * up.weight[up.dims.at(0, 0, rr, o)];
            }
            acc
        })
        .collect();
    Ok(PlainConv { dims: out_dims, weight, bias })
}

/// Fold the gated expert sum and its BatchNorm into one kernel:
/// `W = B(gamma / sqrt(var + eps)) * sum_k g_k W_k` with the matching bias
/// `(gamma / sqrt(var + eps)) * (sum_k g_k b_k - mean) + beta`.
pub fn fold_shared<T: Float>(
    gates: &[T],
    active: &[usize],
    composed: &[PlainConv<T>],
    bn: &BnFold<T>,
) -> Result<PlainConv<T>> {
    let first = composed.first().ok_or_else(|| Error::Routing("no experts".into()))?;
    let dims = first.dims;
    if gates.len() != composed.len() {
        return Err(Error::shape(
            "fold_shared",
            format!("{} gates for {} experts", gates.len(), composed.len()),
        ));
    }
    if bn.gamma.len() != dims.c_out {
        return Err(Error::shape(
            "fold_shared",
            format!("bn over {} channels, experts emit {}", bn.gamma.len(), dims.c_out),
        ));
    }
    if bn.var.iter().any(|&v| v + bn.eps <= T::zero()) {
        return Err(Error::Config("fold requires positive var + eps".into()));
    }
    let mut weight = vec![T::zero(); first.weight.len()];
    let mut bias = vec![T::zero(); dims.c_out];
    for &k in active {
        let e = &composed[k];
        if e.dims != dims {
            return Err(Error::shape("fold_shared", "expert kernel dims differ"));
        }
        let g = gates[k];
        for (acc, &w) in weight.iter_mut().zip(&e.weight) {
            *acc = *acc + g * w;
        }
        for (acc, &b) in bias.iter_mut().zip(&e.bias) {
            *acc = *acc + g * b;
        }
    }
    for i in 0..dims.kh {
        for j in 0..dims.kw {
            for c in 0..dims.c_in {
                for o in 0..dims.c_out {
                    let idx = dims.at(i, j, c, o);
                    weight[idx] = weight[idx] * bn.scale(o);
                }
            }
        }
    }
    for o in 0..dims.c_out {
        bias[o] = bn.scale(o) * (bias[o] - bn.mean[o]) + bn.beta[o];
    }
    Ok(PlainConv { dims, weight, bias })
}

/// Stack the three paths into the final per-task kernel:
/// `W_r = W_g + W_lre + s_t * W_se`, same for biases.
pub fn fuse_task<T: Float>(
    generic: &PlainConv<T>,
    folded: &PlainConv<T>,
    specific: &PlainConv<T>,
    s_t: T,
) -> Result<PlainConv<T>> {
    if generic.dims != folded.dims || generic.dims != specific.dims {
        return Err(Error::shape(
            "fuse_task",
            format!("{:?} vs {:?} vs {:?}", generic.dims, folded.dims, specific.dims),
        ));
    }
    let weight = generic
        .weight
        .iter()
        .zip(&folded.weight)
        .zip(&specific.weight)
        .map(|((&g, &f), &s)| g + f + s_t * s)
        .collect();
    let bias = generic
        .bias
        .iter()
        .zip(&folded.bias)
        .zip(&specific.bias)
        .map(|((&g, &f), &s)| g + f + s_t * s)
        .collect();
    Ok(PlainConv { dims: generic.dims, weight, bias })
}

/// Apply a fused kernel; identical contract to the plain convolution.
pub fn fused_forward<T: Float>(x: &[T], xs: Shape4, fused: &PlainConv<T>) -> Result<Vec<T>> {
    fused.forward(x, xs)
}

/// Average a batch of gate decisions into one dense vector for
/// fuse-once benchmarking. The result is NOT equivalent to per-sample
/// fusion unless every sample routed identically.
pub fn batch_average_gates(snapshots: &[GateVector]) -> GateVector {
    let n = snapshots.len().max(1);
    let experts = snapshots.first().map_or(0, |s| s.gates.len());
    let mut gates = vec![0.0; experts];
    let mut scale = 0.0;
    for snap in snapshots {
        for (acc, &g) in gates.iter_mut().zip(&snap.gates) {
            *acc += g / n as f64;
        }
        scale += snap.scale / n as f64;
    }
    let active = (0..experts).filter(|&e| gates[e] != 0.0).collect();
    GateVector { gates, active, scale }
}

// ---------------------------------------------------------------------------
// Random-configuration equivalence sweep.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-5,
            Precision::Double => 1e-10,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

#[derive(Debug)]
pub struct TrialReport {
    pub trial: usize,
    pub num_experts: usize,
    pub channels: usize,
    pub top_k: usize,
    pub max_rel_err: f64,
}

#[derive(Debug)]
pub struct EquivalenceReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub trials: Vec<TrialReport>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// One random module in plain-number form.
struct TrialModule {
    generic: PlainConv<f64>,
    experts: Vec<(PlainConv<f64>, PlainConv<f64>)>,
    specific: (PlainConv<f64>, PlainConv<f64>),
    bn: BnFold<f64>,
}

fn random_conv(k: usize, c_in: usize, c_out: usize, r: &mut ChaCha8Rng) -> PlainConv<f64> {
    let dims = KernelDims::new(k, k, c_in, c_out);
    let std = (2.0 / (k * k * c_in) as f64).sqrt();
    PlainConv {
        dims,
        weight: (0..k * k * c_in * c_out).map(|_| rng::normal(r) * std).collect(),
        bias: (0..c_out).map(|_| rng::normal(r) * 0.1).collect(),
    }
}

fn random_trial_module(
    channels: usize,
    ranks: &[usize],
    specific_rank: usize,
    r: &mut ChaCha8Rng,
) -> TrialModule {
    TrialModule {
        generic: random_conv(3, channels, channels, r),
        experts: ranks
            .iter()
            .map(|&rank| (random_conv(3, channels, rank, r), random_conv(1, rank, channels, r)))
            .collect(),
        specific: (
            random_conv(3, channels, specific_rank, r),
            random_conv(1, specific_rank, channels, r),
        ),
        bn: BnFold {
            gamma: (0..channels).map(|_| 1.0 + 0.3 * rng::normal(r)).collect(),
            beta: (0..channels).map(|_| 0.2 * rng::normal(r)).collect(),
            mean: (0..channels).map(|_| 0.5 * rng::normal(r)).collect(),
            var: (0..channels).map(|_| 0.5 + rng::uniform(r, 0.0, 1.0)).collect(),
            eps: BatchNorm::DEFAULT_EPS,
        },
    }
}

fn random_gate(num_experts: usize, k: usize, r: &mut ChaCha8Rng) -> GateVector {
    let mut idx: Vec<usize> = (0..num_experts).collect();
    idx.shuffle(r);
    let mut active: Vec<usize> = idx[..k].to_vec();
    active.sort_unstable();
    let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng::uniform(r, 0.0, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut gates = vec![0.0; num_experts];
    for (i, &e) in active.iter().enumerate() {
        gates[e] = raw[i] / total;
    }
    GateVector { gates, active, scale: rng::normal(r) }
}

/// Multi-branch eval forward of one trial module at precision `T`.
fn multibranch_eval<T: Float>(
    x: &[T],
    xs: Shape4,
    m: &TrialModule,
    gate: &GateVector,
) -> Result<Vec<T>> {
    let generic = m.generic.to_precision::<T>();
    let mut out = generic.forward(x, xs)?;

    let mut acc = vec![T::zero(); out.len()];
    for &k in &gate.active {
        let down = m.experts[k].0.to_precision::<T>();
        let up = m.experts[k].1.to_precision::<T>();
        let mid = down.forward(x, xs)?;
        let mid_shape = Shape4::new(xs.n, down.dims.c_out, xs.h, xs.w);
        let e = up.forward(&mid, mid_shape)?;
        let g = cast::<T>(gate.gates[k]);
        for (a, &v) in acc.iter_mut().zip(&e) {
            *a = *a + g * v;
        }
    }
    let bn = m.bn.to_precision::<T>();
    let normed = bn_affine(&acc, xs, &bn.gamma, &bn.beta, &bn.mean, &bn.var, bn.eps)?;

    let sdown = m.specific.0.to_precision::<T>();
    let sup = m.specific.1.to_precision::<T>();
    let mid = sdown.forward(x, xs)?;
    let mid_shape = Shape4::new(xs.n, sdown.dims.c_out, xs.h, xs.w);
    let spec = sup.forward(&mid, mid_shape)?;
    let s = cast::<T>(gate.scale);
    for ((o, &n), &sp) in out.iter_mut().zip(&normed).zip(&spec) {
        *o = *o + n + s * sp;
    }
    Ok(out)
}

/// Fused forward of the same trial module at precision `T`, with an
/// optional bias corruption applied after folding (negative-control hook).
fn fused_eval<T: Float>(
    x: &[T],
    xs: Shape4,
    m: &TrialModule,
    gate: &GateVector,
    corrupt_bias: f64,
) -> Result<Vec<T>> {
    let composed: Vec<PlainConv<T>> = m
        .experts
        .iter()
        .map(|(down, up)| compose_lowrank(&down.to_precision::<T>(), &up.to_precision::<T>()))
        .collect::<Result<_>>()?;
    let gates: Vec<T> = gate.gates.iter().map(|&g| cast(g)).collect();
    let folded = fold_shared(&gates, &gate.active, &composed, &m.bn.to_precision::<T>())?;
    let specific = compose_lowrank(
        &m.specific.0.to_precision::<T>(),
        &m.specific.1.to_precision::<T>(),
    )?;
    let mut fused = fuse_task(
        &m.generic.to_precision::<T>(),
        &folded,
        &specific,
        cast::<T>(gate.scale),
    )?;
    if corrupt_bias != 0.0 {
        fused.bias[0] = fused.bias[0] + cast::<T>(corrupt_bias);
    }
    fused_forward(x, xs, &fused)
}

fn rel_err_slices<T: Float>(a: &[T], b: &[T]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut mag: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let xf = x.to_f64().expect("finite");
        let yf = y.to_f64().expect("finite");
        diff = diff.max((xf - yf).abs());
        mag = mag.max(xf.abs()).max(yf.abs());
    }
    diff / mag.max(f64::MIN_POSITIVE)
}

/// Sweep random module configurations (expert count, width, k, rank
/// schedule) comparing the multi-branch eval forward against the fused
/// single-convolution forward at the requested precision.
pub fn verify_equivalence_opts(
    trials: usize,
    precision: Precision,
    seed: u64,
    corrupt_bias: f64,
) -> Result<EquivalenceReport> {
    let tolerance = precision.tolerance();
    let mut reports = Vec::with_capacity(trials);
    let mut max_rel_err: f64 = 0.0;
    for trial in 0..trials {
        let mut r = rng::substream(seed, &format!("verify-trial-{trial}"));
        let num_experts = [5usize, 15][r.gen_range(0..2)];
        let channels = [16usize, 64][r.gen_range(0..2)];
        let k = match r.gen_range(0..3) {
            0 => 3.min(num_experts),
            1 => 9.min(num_experts),
            _ => num_experts,
        };
        let ranks: Vec<usize> =
            (0..num_experts).map(|i| (16 + 8 * i).min(128)).collect();
        let module = random_trial_module(channels, &ranks, 64, &mut r);

        let xs = Shape4::new(2, channels, 5, 5);
        let x: Vec<f64> = (0..xs.numel()).map(|_| rng::normal(&mut r)).collect();

        let mut trial_err: f64 = 0.0;
        // Two independent gate draws stand in for two tasks.
        for _ in 0..2 {
            let gate = random_gate(num_experts, k, &mut r);
            let err = match precision {
                Precision::Double => {
                    let a = multibranch_eval::<f64>(&x, xs, &module, &gate)?;
                    let b = fused_eval::<f64>(&x, xs, &module, &gate, corrupt_bias)?;
                    rel_err_slices(&a, &b)
                }
                Precision::Single => {
                    let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
                    let a = multibranch_eval::<f32>(&xf, xs, &module, &gate)?;
                    let b = fused_eval::<f32>(&xf, xs, &module, &gate, corrupt_bias)?;
                    rel_err_slices(&a, &b)
                }
            };
            trial_err = trial_err.max(err);
        }
        max_rel_err = max_rel_err.max(trial_err);
        reports.push(TrialReport {
            trial,
            num_experts,
            channels,
            top_k: k,
            max_rel_err: trial_err,
        });
    }
    Ok(EquivalenceReport {
        precision,
        tolerance,
        trials: reports,
        max_rel_err,
        pass: max_rel_err < tolerance,
    })
}

pub fn verify_equivalence(trials: usize, precision: Precision, seed: u64) -> Result<EquivalenceReport> {
    verify_equivalence_opts(trials, precision, seed, 0.0)
}

// ---------------------------------------------------------------------------
// Folding a live module / decoder.
// ---------------------------------------------------------------------------

/// Fuse one live module for task `t` under one sample's gate decision,
/// reading eval-mode statistics from the module's BatchNorm.
pub fn fuse_module_task(
    module: &MloreModule,
    t: usize,
    gate: &GateVector,
) -> Result<PlainConv<f64>> {
    let composed: Vec<PlainConv<f64>> = module
        .shared_experts
        .iter()
        .map(|e| compose_lowrank(&PlainConv::snapshot(&e.down), &PlainConv::snapshot(&e.up)))
        .collect::<Result<_>>()?;
    let bn = BnFold::snapshot(&module.expert_bn[t]);
    let folded = fold_shared(&gate.gates, &gate.active, &composed, &bn)?;
    let spec = compose_lowrank(
        &PlainConv::snapshot(&module.specific_experts[t].down),
        &PlainConv::snapshot(&module.specific_experts[t].up),
    )?;
    let generic = PlainConv::snapshot(&module.generic.conv);
    fuse_task(&generic, &folded, &spec, gate.scale)
}

/// Eval-mode decoder forward that computes every module's three-path block
/// as one fused convolution per (task, sample). Routing, projections,
/// nonlinear blocks, fusion and heads run unchanged, so the output should
/// match `MloreDecoder::forward` in eval mode to folding precision.
pub fn fused_decoder_forward(
    decoder: &MloreDecoder,
    tape: &mut Tape,
    features: &[Value],
) -> Result<Vec<Value>> {
    if features.len() != decoder.stages.len() {
        return Err(Error::shape(
            "fused_decoder_forward",
            format!("{} features for {} scales", features.len(), decoder.stages.len()),
        ));
    }
    let tasks = decoder.tasks();
    let (fh, fw) = decoder
        .dims
        .iter()
        .copied()
        .max_by_key(|&(h, w)| h * w)
        .expect("at least one scale");
    let mut scale_feats: Vec<Vec<Value>> = vec![Vec::new(); tasks];

    for (s, stage) in decoder.stages.iter().enumerate() {
        let mut current = TaskFeatures::Shared(features[s]);
        for (m, module) in stage.modules.iter().enumerate() {
            let mut next = Vec::with_capacity(tasks);
            for t in 0..tasks {
                let x_t = module.project(tape, &current, t)?;
                let routing = module.routers[t].route(tape, x_t, None)?;
                let xs = tape.shape(x_t);
                let x_val = tape.value(x_t).clone();
                let per = xs.c * xs.h * xs.w;
                let mut out = Tensor4::zeros(xs);
                for (n, snap) in routing.snapshots.iter().enumerate() {
                    let fused = fuse_module_task(module, t, snap)?;
                    let sample = &x_val.data[n * per..(n + 1) * per];
                    let one = Shape4::new(1, xs.c, xs.h, xs.w);
                    let y = fused_forward(sample, one, &fused)?;
                    out.data[n * per..(n + 1) * per].copy_from_slice(&y);
                }
                let fused_feature = tape.constant(out);
                next.push(stage.blocks[m][t].forward(tape, fused_feature, false)?);
            }
            current = TaskFeatures::PerTask(next);
        }
        let finals = match current {
            TaskFeatures::PerTask(v) => v,
            TaskFeatures::Shared(_) => unreachable!("stack_per_scale >= 1"),
        };
        let factor = fh / decoder.dims[s].0;
        debug_assert_eq!(fw % decoder.dims[s].1, 0);
        for (t, f) in finals.into_iter().enumerate() {
            let up = tape.upsample_nearest(f, factor)?;
            scale_feats[t].push(up);
        }
    }

    let mut predictions = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let fused = decoder.fusions[t].forward(tape, &scale_feats[t])?;
        predictions.push(decoder.heads[t].forward(tape, fused)?);
    }
    Ok(predictions)
}
