//! Analytic parameter and FLOP accounting for the decoder's
//! mixture-of-experts core, comparing the low-rank design against a
//! standard full-rank mixture at matched structure.
//!
//! Conventions, stated once and used everywhere:
//! - convolution parameters: `kh*kw*c_in*c_out + c_out` (bias included);
//! - 1 multiply-accumulate = 2 FLOPs; convolution FLOPs are
//!   `2*kh*kw*c_in*c_out*H*W` (bias excluded), dense layers `2*in*out`;
//! - pooling, ReLU and softmax cost 1 FLOP per element;
//! - normalization layers carry `4*C` numbers (scale, shift and the two
//!   running statistics);
//! - FLOP counts model one inference pass: the low-rank variant is fully
//!   folded (one 3x3 convolution per task per module, reported under the
//!   `generic` slot, with normalization folded away), the full-rank
//!   variant runs its `k` routed experts; routers never fold and their
//!   noise head is idle at inference;
//! - prediction heads are counted at one output channel per task; real
//!   head widths are task-registry details identical across variants;
//! - scope is the expert core (projections, paths, routing, heads); the
//!   inter-module blocks and scale fusion are identical across variants
//!   and excluded.

use crate::config::ModelConfig;

/// Expert convolution pair: kernel sizes of the down and up convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKernels {
    /// Both convolutions 1x1.
    OneOne,
    /// 3x3 followed by 1x1 (the decoder's own layout).
    ThreeOne,
}

impl ExpertKernels {
    pub fn pair(self) -> (usize, usize) {
        match self {
            ExpertKernels::OneOne => (1, 1),
            ExpertKernels::ThreeOne => (3, 1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ExpertKernels::OneOne => "[1x1,1x1]",
            ExpertKernels::ThreeOne => "[3x3,1x1]",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Full-rank experts (`k1` conv to the expansion width, ReLU, `k2`
    /// conv back), no generic or task-specific paths.
    StandardMoe,
    /// The low-rank decoder: generic + routed low-rank experts +
    /// task-specific experts.
    Mlore,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::StandardMoe => "moe",
            Variant::Mlore => "mlore",
        }
    }
}

/// Per-component cost split. Components absent from a variant are zero;
/// in fused inference counts the single per-task convolution is reported
/// under `generic` and the folded expert/bn components are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Components {
    pub projections: u64,
    pub generic: u64,
    pub shared_experts: u64,
    pub specific_experts: u64,
    pub routers: u64,
    pub bn: u64,
    pub heads: u64,
}

impl Components {
    pub fn total(&self) -> u64 {
        self.projections
            + self.generic
            + self.shared_experts
            + self.specific_experts
            + self.routers
            + self.bn
            + self.heads
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub param_parts: Components,
    pub flop_parts: Components,
}

pub fn conv_params(kh: usize, kw: usize, c_in: usize, c_out: usize) -> u64 {
    (kh * kw * c_in * c_out + c_out) as u64
}

pub fn conv_flops(kh: usize, kw: usize, c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    2 * (kh * kw * c_in * c_out * h * w) as u64
}

pub fn dense_flops(inputs: usize, outputs: usize) -> u64 {
    2 * (inputs * outputs) as u64
}

/// Parameters of one low-rank expert (`k1` conv C->r, `k2` conv r->C).
pub fn lowrank_expert_params(kernels: ExpertKernels, c: usize, r: usize) -> u64 {
    let (k1, k2) = kernels.pair();
    conv_params(k1, k1, c, r) + conv_params(k2, k2, r, c)
}

/// Parameters of one full-rank expert (`k1` conv C->C_e, ReLU, `k2` conv
/// C_e->C).
pub fn fullrank_expert_params(kernels: ExpertKernels, c: usize, c_e: usize) -> u64 {
    let (k1, k2) = kernels.pair();
    conv_params(k1, k1, c, c_e) + conv_params(k2, k2, c_e, c)
}

fn router_params(c: usize, hw: usize, num_experts: usize, with_scale: bool) -> u64 {
    let c4 = c / 4;
    let head_out = num_experts + usize::from(with_scale);
    conv_params(1, 1, c, c4)            // content 1
        + conv_params(1, 1, c4, c4)     // content 2
        + hw as u64                      // spatial collapse
        + conv_params(1, 1, c, c4)      // position dense
        + conv_params(1, 1, 2 * c4, head_out)
        + conv_params(1, 1, 2 * c4, num_experts) // noise head
}

fn router_flops(c: usize, h: usize, w: usize, num_experts: usize, with_scale: bool) -> u64 {
    let c4 = c / 4;
    let hw = h * w;
    let head_out = num_experts + usize::from(with_scale);
    conv_flops(1, 1, c, c4, h, w)
        + conv_flops(1, 1, c4, c4, h, w)
        + (c4 * hw) as u64               // global average pool
        + (dense_flops(hw, 1) * c as u64) // spatial collapse, per channel
        + dense_flops(c, c4)
        + dense_flops(2 * c4, head_out)
        + num_experts as u64             // softmax over expert logits
}

/// Exact parameter counts from declared shapes, biases included. `h`/`w`
/// size the routers' spatial-collapse weights.
pub fn count_params(
    cfg: &ModelConfig,
    kernels: ExpertKernels,
    variant: Variant,
    h: usize,
    w: usize,
) -> CostReport {
    let c = cfg.channels;
    let t = cfg.tasks as u64;
    let modules = cfg.total_modules() as u64;
    let mut parts = Components::default();

    // Projections: the first module of each scale consumes backbone
    // features; accounting assumes backbone width == decoder width (the
    // comparison is variant-invariant in this choice).
    parts.projections = modules * t * conv_params(1, 1, c, c);
    parts.routers = modules
        * t
        * router_params(c, h * w, cfg.num_experts, matches!(variant, Variant::Mlore));
    parts.heads = t * conv_params(1, 1, c, 1);

    match variant {
        Variant::Mlore => {
            parts.generic = modules * conv_params(3, 3, c, c);
            parts.shared_experts = modules
                * cfg
                    .ranks()
                    .iter()
                    .map(|&r| lowrank_expert_params(kernels, c, r))
                    .sum::<u64>();
            parts.specific_experts =
                modules * t * lowrank_expert_params(kernels, c, cfg.specific_rank);
            parts.bn = modules * t * (4 * c) as u64;
        }
        Variant::StandardMoe => {
            parts.shared_experts = modules
                * cfg.num_experts as u64
                * fullrank_expert_params(kernels, c, cfg.expert_out_channels);
        }
    }

    CostReport { params: parts.total(), flops: 0, param_parts: parts, flop_parts: Components::default() }
}

/// FLOPs of one inference pass at feature size `h x w` (see module-level
/// conventions). The report carries the matching parameter counts too.
pub fn count_flops(
    cfg: &ModelConfig,
    kernels: ExpertKernels,
    variant: Variant,
    h: usize,
    w: usize,
) -> CostReport {
    let c = cfg.channels;
    let t = cfg.tasks as u64;
    let modules = cfg.total_modules() as u64;
    let (k1, k2) = kernels.pair();
    let mut parts = Components::default();

    parts.projections = modules * t * conv_flops(1, 1, c, c, h, w);
    parts.routers = modules
        * t
        * router_flops(c, h, w, cfg.num_experts, matches!(variant, Variant::Mlore));
    parts.heads = t * conv_flops(1, 1, c, 1, h, w);

    match variant {
        Variant::Mlore => {
            // Fully folded: one 3x3 C->C convolution per task per module.
            parts.generic = modules * t * conv_flops(3, 3, c, c, h, w);
        }
        Variant::StandardMoe => {
            let c_e = cfg.expert_out_channels;
            let per_expert = conv_flops(k1, k1, c, c_e, h, w)
                + (c_e * h * w) as u64 // ReLU
                + conv_flops(k2, k2, c_e, c, h, w);
            parts.shared_experts = modules * t * cfg.top_k as u64 * per_expert;
        }
    }

    let params = count_params(cfg, kernels, variant, h, w);
    CostReport {
        params: params.params,
        flops: parts.total(),
        param_parts: params.param_parts,
        flop_parts: parts,
    }
}

/// The full-scale configuration the savings trend is quoted at: decoder
/// width 384, expert expansion width 640, ranks 16..128 step 8.
pub fn full_scale_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.channels = 384;
    cfg.expert_out_channels = 640;
    cfg
}

/// Aligned comparison over {5, 10, 15} experts x both expert kernel
/// layouts x both variants, with marginal parameter cost per added expert.
pub fn compare_table(base: &ModelConfig, h: usize, w: usize) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "cost model: decoder width {}, expansion width {}, {} tasks, {} modules, \
         features {h}x{w}; 1 MAC = 2 FLOPs, biases in params only\n",
        base.channels,
        base.expert_out_channels,
        base.tasks,
        base.total_modules(),
    ));
    out.push_str(&format!(
        "{:<7} {:<10} {:>8} {:>12} {:>12} {:>16}\n",
        "variant", "kernels", "experts", "params (M)", "flops (G)", "marg params (M)"
    ));
    for kernels in [ExpertKernels::OneOne, ExpertKernels::ThreeOne] {
        for variant in [Variant::StandardMoe, Variant::Mlore] {
            let mut prev: Option<(usize, u64)> = None;
            for n in [5usize, 10, 15] {
                let mut cfg = base.clone();
                cfg.num_experts = n;
                cfg.top_k = cfg.top_k.min(n);
                let report = count_flops(&cfg, kernels, variant, h, w);
                let marginal = match prev {
                    Some((pn, pp)) => format!(
                        "{:>16.4}",
                        (report.params.saturating_sub(pp)) as f64
                            / (n - pn) as f64
                            / 1.0e6
                    ),
                    None => format!("{:>16}", "-"),
                };
                out.push_str(&format!(
                    "{:<7} {:<10} {:>8} {:>12.4} {:>12.4} {}\n",
                    variant.label(),
                    kernels.label(),
                    n,
                    report.params as f64 / 1.0e6,
                    report.flops as f64 / 1.0e9,
                    marginal,
                ));
                prev = Some((n, report.params));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_flop_formula_reference_values() {
        // 1x1 convolution, 2 -> 2 channels on a 4x4 map.
        assert_eq!(conv_flops(1, 1, 2, 2, 4, 4), 128);
        // Zero-size network.
        assert_eq!(conv_flops(3, 3, 0, 0, 16, 16), 0);
        assert_eq!(conv_params(3, 3, 0, 0), 0);
    }

    #[test]
    fn expert_and_generic_parameter_examples() {
        // One low-rank expert at width 384, rank 16.
        assert_eq!(lowrank_expert_params(ExpertKernels::ThreeOne, 384, 16), 61_840);
        // The generic 3x3 path at width 384.
        assert_eq!(conv_params(3, 3, 384, 384), 1_327_488);
    }

    #[test]
    fn fused_inference_conv_is_a_single_task_kernel() {
        let mut cfg = full_scale_config();
        cfg.channels = 64;
        cfg.tasks = 1;
        cfg.scales = 1;
        cfg.stack_per_scale = 1;
        let report = count_flops(&cfg, ExpertKernels::ThreeOne, Variant::Mlore, 16, 16);
        assert_eq!(report.flop_parts.generic, 18_874_368);
        assert_eq!(report.flop_parts.shared_experts, 0);
        assert_eq!(report.flop_parts.bn, 0);
    }

    #[test]
    fn parameter_ratio_beats_point_four_at_full_scale() {
        let cfg = full_scale_config();
        let mlore = count_params(&cfg, ExpertKernels::ThreeOne, Variant::Mlore, 40, 40);
        let moe = count_params(&cfg, ExpertKernels::ThreeOne, Variant::StandardMoe, 40, 40);
        let ratio = mlore.params as f64 / moe.params as f64;
        assert!(ratio < 0.40, "ratio {ratio}");
    }

    #[test]
    fn marginal_params_per_added_expert_beat_point_two_five() {
        let base = full_scale_config();
        for kernels in [ExpertKernels::OneOne, ExpertKernels::ThreeOne] {
            let at = |n: usize, variant| {
                let mut cfg = base.clone();
                cfg.num_experts = n;
                cfg.top_k = cfg.top_k.min(n);
                count_params(&cfg, kernels, variant, 40, 40).params
            };
            for (lo, hi) in [(5usize, 10usize), (10, 15)] {
                let d_mlore = at(hi, Variant::Mlore) - at(lo, Variant::Mlore);
                let d_moe = at(hi, Variant::StandardMoe) - at(lo, Variant::StandardMoe);
                let ratio = d_mlore as f64 / d_moe as f64;
                assert!(ratio < 0.25, "{} {lo}->{hi}: {ratio}", kernels.label());
            }
        }
    }

    #[test]
    fn params_grow_by_exactly_one_expert_cost() {
        let base = full_scale_config();
        for n in [2usize, 7, 14] {
            let mut small = base.clone();
            small.num_experts = n;
            small.top_k = 1;
            let mut big = base.clone();
            big.num_experts = n + 1;
            big.top_k = 1;
            let d = count_params(&big, ExpertKernels::ThreeOne, Variant::Mlore, 8, 8).params
                - count_params(&small, ExpertKernels::ThreeOne, Variant::Mlore, 8, 8).params;
            let new_rank = (16 + 8 * n).min(128);
            let expert = base.total_modules() as u64
                * lowrank_expert_params(ExpertKernels::ThreeOne, 384, new_rank);
            // One more expert also widens every router head by one logit
            // column (plus a noise column): 2*(C/2) weights + 2 biases
            // per router.
            let router_growth =
                (base.total_modules() * base.tasks) as u64 * (2 * (384 / 2) + 2) as u64;
            assert_eq!(d, expert + router_growth);
        }
    }

    #[test]
    fn moe_params_strictly_increase_with_n() {
        let base = full_scale_config();
        let mut last = 0;
        for n in [5usize, 10, 15] {
            let mut cfg = base.clone();
            cfg.num_experts = n;
            cfg.top_k = cfg.top_k.min(n);
            let p = count_params(&cfg, ExpertKernels::OneOne, Variant::StandardMoe, 8, 8).params;
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn fused_flops_constant_in_n_outside_routers() {
        let base = full_scale_config();
        let mut seen = None;
        for n in [5usize, 10, 15] {
            let mut cfg = base.clone();
            cfg.num_experts = n;
            cfg.top_k = cfg.top_k.min(n);
            let report = count_flops(&cfg, ExpertKernels::ThreeOne, Variant::Mlore, 20, 20);
            let non_router = report.flops - report.flop_parts.routers;
            match seen {
                None => seen = Some(non_router),
                Some(v) => assert_eq!(v, non_router),
            }
        }
    }

    #[test]
    fn breakdown_sums_to_totals_exactly() {
        let cfg = full_scale_config();
        for kernels in [ExpertKernels::OneOne, ExpertKernels::ThreeOne] {
            for variant in [Variant::StandardMoe, Variant::Mlore] {
                let report = count_flops(&cfg, kernels, variant, 12, 12);
                assert_eq!(report.params, report.param_parts.total());
                assert_eq!(report.flops, report.flop_parts.total());
            }
        }
    }

    #[test]
    fn table_is_self_consistent() {
        let base = full_scale_config();
        let table = compare_table(&base, 10, 10);
        assert_eq!(table.lines().count(), 2 + 12);
        // Cross-check one cell against a direct count.
        let mut cfg = base.clone();
        cfg.num_experts = 10;
        cfg.top_k = cfg.top_k.min(10);
        let report = count_flops(&cfg, ExpertKernels::OneOne, Variant::StandardMoe, 10, 10);
        let cell = format!("{:.4}", report.params as f64 / 1.0e6);
        let row = table
            .lines()
            .find(|l| l.starts_with("moe") && l.contains("[1x1,1x1]") && l.contains(" 10 "))
            .expect("row present");
        assert!(row.contains(&cell), "row {row} should contain {cell}");
    }
}
