//! End-to-end acceptance checks. Each criterion prints exactly one
//! PASS/FAIL line; the test fails if any criterion fails. Tolerances and
//! budgets are pinned here, next to the checks that use them.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mlore_core::accounting::{self, ExpertKernels, Variant};
use mlore_core::config::ModelConfig;
use mlore_core::decoder::{self, MloreDecoder, MloreModule, TaskFeatures};
use mlore_core::layers::ParamSink;
use mlore_core::reparam::{self, Precision};
use mlore_core::rng;
use mlore_core::router::{top_k_indices, Router};
use mlore_core::shape::Shape4;
use mlore_core::tape::{Param, Tape};
use mlore_core::tensor::Tensor4;
use mlore_core::toybench::data::Dataset;
use mlore_core::toybench::model::ToyModel;

const BIN: &str = env!("CARGO_BIN_EXE_mlore");

// Criterion 1: fused inference equivalence.
const REPARAM_TRIALS: usize = 100;
const REPARAM_TOL_DOUBLE: f64 = 1e-10;
const REPARAM_TOL_SINGLE: f64 = 1e-5;
const REPARAM_BUDGET_SECS: f64 = 60.0;

// Criterion 2: analytic gradients against central finite differences.
const GRAD_MIN_COORDS: usize = 50;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FD_STEP: f64 = 1e-5;
const GRAD_MEASURABLE_FLOOR: f64 = 1e-6;
const GRAD_BUDGET_SECS: f64 = 120.0;

// Criterion 5: cost accounting.
const PARAM_RATIO_MAX: f64 = 0.40;
const MARGINAL_RATIO_MAX: f64 = 0.25;

// Criterion 6: toy training.
const TRAIN_ITERS: usize = 1000;
const TRAIN_MIN_IMPROVEMENT: f64 = 0.30;
const TRAIN_BUDGET_SECS: f64 = 600.0;

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("spawn mlore");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

fn run_ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = run(args);
    assert_eq!(code, 0, "mlore {args:?} failed:\n{stdout}\n{stderr}");
    stdout
}

fn loss_totals(path: &Path) -> Vec<f64> {
    std::fs::read_to_string(path)
        .expect("loss.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn random_tensor(shape: Shape4, seed: u64, stream: &str) -> Tensor4 {
    let mut r = rng::substream(seed, stream);
    let data = (0..shape.numel()).map(|_| rng::normal(&mut r)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1: fused inference matches the multi-branch forward.
// ---------------------------------------------------------------------------

fn criterion_reparam() -> Result<String, String> {
    let t0 = Instant::now();
    let double = reparam::verify_equivalence(REPARAM_TRIALS, Precision::Double, 2024)
        .map_err(|e| e.to_string())?;
    let single = reparam::verify_equivalence(REPARAM_TRIALS, Precision::Single, 2024)
        .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();

    if double.tolerance != REPARAM_TOL_DOUBLE || single.tolerance != REPARAM_TOL_SINGLE {
        return Err("unexpected tolerance wiring".to_string());
    }
    if !double.pass {
        return Err(format!("double precision max_rel_err {:.3e}", double.max_rel_err));
    }
    if !single.pass {
        return Err(format!("single precision max_rel_err {:.3e}", single.max_rel_err));
    }
    // The sweep must actually cover the advertised grid.
    for n in [5usize, 15] {
        for c in [16usize, 64] {
            if !double.trials.iter().any(|t| t.num_experts == n && t.channels == c) {
                return Err(format!("no trial with {n} experts at width {c}"));
            }
        }
    }
    let k_small = double.trials.iter().any(|t| t.top_k == 3);
    let k_mid = double.trials.iter().any(|t| t.top_k == 9);
    let k_all = double.trials.iter().any(|t| t.top_k == t.num_experts);
    if !(k_small && k_mid && k_all) {
        return Err("top-k grid {3, 9, N} not covered".to_string());
    }
    if elapsed > REPARAM_BUDGET_SECS {
        return Err(format!("took {elapsed:.1}s (budget {REPARAM_BUDGET_SECS}s)"));
    }

    // Negative control through the CLI: an injected bias error must fail
    // with exit code 1.
    let (code, stdout, _) = run(&["verify-reparam", "--trials", "3", "--corrupt-bias", "1e-3"]);
    if code != 1 || !stdout.contains("FAIL") {
        return Err(format!("corrupted verification returned exit {code}"));
    }
    let (code, stdout, _) = run(&["verify-reparam", "--trials", "3"]);
    if code != 0 || !stdout.contains("PASS") {
        return Err(format!("clean verification returned exit {code}"));
    }

    Ok(format!(
        "{REPARAM_TRIALS} trials/precision, double max {:.2e} < {REPARAM_TOL_DOUBLE:.0e}, \
         single max {:.2e} < {REPARAM_TOL_SINGLE:.0e}, {elapsed:.1}s",
        double.max_rel_err, single.max_rel_err
    ))
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient fidelity (noise off, generic-path detach disabled
// so the analytic gradient is the true derivative everywhere).
// ---------------------------------------------------------------------------

fn grad_check_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.channels = 8;
    cfg.num_experts = 3;
    cfg.top_k = 2;
    cfg.rank_min = 2;
    cfg.rank_max = 4;
    cfg.rank_step = 1;
    cfg.specific_rank = 2;
    cfg.scales = 2;
    cfg.stack_per_scale = 1;
    cfg.lb_weight = 0.01;
    cfg.noise = false;
    cfg.seed = 11;
    cfg
}

fn criterion_gradients() -> Result<String, String> {
    let t0 = Instant::now();
    let cfg = grad_check_cfg();
    let mut init = rng::substream(cfg.seed, "acceptance-grad");
    let mut decoder = MloreDecoder::new(&cfg, 8, &[(8, 8), (4, 4)], &[4, 1, 1, 2], &mut init)
        .map_err(|e| e.to_string())?;
    for stage in &mut decoder.stages {
        for module in &mut stage.modules {
            module.generic.detach_input = false;
        }
    }
    let mut sink = ParamSink::default();
    decoder.collect(&mut sink);

    let f0 = random_tensor(Shape4::new(2, 8, 8, 8), 3, "grad-f0");
    let f1 = random_tensor(Shape4::new(2, 8, 4, 4), 3, "grad-f1");
    let weights: Vec<Tensor4> = [4usize, 1, 1, 2]
        .iter()
        .enumerate()
        .map(|(t, &c)| random_tensor(Shape4::new(2, c, 8, 8), 5, &format!("grad-w{t}")))
        .collect();

    // Fixed random projection of all task outputs plus the balance term;
    // every parameter is reachable.
    let eval_loss = |do_backward: bool| -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(f0.clone());
        let b = tape.constant(f1.clone());
        let out = decoder.forward(&mut tape, &[a, b], true, None).unwrap();
        let mut loss = None;
        for (pred, w) in out.predictions.iter().zip(&weights) {
            let weighted = tape.mul_const_tensor(*pred, w.clone()).unwrap();
            let s = tape.sum_all(weighted);
            loss = Some(match loss {
                Some(acc) => tape.add(acc, s).unwrap(),
                None => s,
            });
        }
        let balance = tape.scale_const(out.balance, 0.5);
        let total = tape.add(loss.unwrap(), balance).unwrap();
        let v = tape.value(total).data[0];
        if do_backward {
            tape.backward(total).unwrap();
        }
        v
    };

    eval_loss(true);

    // Pick measurable coordinates spread over every parameter tensor.
    let mut coords: Vec<(usize, usize, f64)> = Vec::new();
    for (pi, (_, p)) in sink.params.iter().enumerate() {
        let cell = p.borrow();
        let stride = (cell.grad.data.len() / 2).max(1);
        for idx in (0..cell.grad.data.len()).step_by(stride) {
            if cell.grad.data[idx].abs() >= GRAD_MEASURABLE_FLOOR {
                coords.push((pi, idx, cell.grad.data[idx]));
            }
        }
    }
    coords.truncate(80);
    if coords.len() < GRAD_MIN_COORDS {
        return Err(format!("only {} measurable coordinates", coords.len()));
    }

    let mut max_rel: f64 = 0.0;
    for &(pi, idx, analytic) in &coords {
        let nudge = |delta: f64| sink.params[pi].1.borrow_mut().value.data[idx] += delta;
        nudge(GRAD_FD_STEP);
        let plus = eval_loss(false);
        nudge(-2.0 * GRAD_FD_STEP);
        let minus = eval_loss(false);
        nudge(GRAD_FD_STEP);
        let fd = (plus - minus) / (2.0 * GRAD_FD_STEP);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
        if rel > GRAD_REL_TOL {
            return Err(format!(
                "param {} coord {idx}: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.2e})",
                sink.params[pi].0
            ));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    if elapsed > GRAD_BUDGET_SECS {
        return Err(format!("took {elapsed:.1}s (budget {GRAD_BUDGET_SECS}s)"));
    }
    Ok(format!(
        "{} coordinates, max rel err {max_rel:.2e} < {GRAD_REL_TOL:.0e}, {elapsed:.1}s",
        coords.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3: the generic path's stop-gradient contract.
// ---------------------------------------------------------------------------

fn criterion_stop_gradient() -> Result<String, String> {
    let mut cfg = grad_check_cfg();
    cfg.tasks = 2;
    cfg.scales = 1;
    let mut init = rng::substream(7, "acceptance-stopgrad");
    let mut module = MloreModule::new(8, 16, &cfg, &mut init).map_err(|e| e.to_string())?;
    // Silence every expert so the input can only hear the generic path.
    for e in module.shared_experts.iter().chain(module.specific_experts.iter()) {
        e.up.weight.borrow_mut().value.data.fill(0.0);
        e.up.bias.borrow_mut().value.data.fill(0.0);
    }

    let x = Param::new(random_tensor(Shape4::new(2, 8, 4, 4), 13, "stopgrad-x"));
    let probe = |module: &MloreModule| -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let out = module.forward(&mut tape, &TaskFeatures::Shared(xv), false, None).unwrap();
        let mut loss = None;
        for f in &out.features {
            let s = tape.sum_all(*f);
            loss = Some(match loss {
                Some(acc) => tape.add(acc, s).unwrap(),
                None => s,
            });
        }
        tape.backward(loss.unwrap()).unwrap();
        let max_abs = |data: &[f64]| data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x_grad = max_abs(&x.borrow().grad.data);
        let w_grad = max_abs(&module.generic.conv.weight.borrow().grad.data);
        let b_grad = max_abs(&module.generic.conv.bias.borrow().grad.data);
        x.borrow_mut().zero_grad();
        module.generic.conv.weight.borrow_mut().zero_grad();
        module.generic.conv.bias.borrow_mut().zero_grad();
        (x_grad, w_grad, b_grad)
    };

    if !module.generic.detach_input {
        return Err("detach is expected to be the construction default".to_string());
    }
    let (x_grad, w_grad, b_grad) = probe(&module);
    if x_grad != 0.0 {
        return Err(format!("detached input still received gradient {x_grad:.3e}"));
    }
    if w_grad == 0.0 || b_grad == 0.0 {
        return Err("generic path parameters received no gradient".to_string());
    }

    // Negative control: releasing the detach must reopen the input path.
    module.generic.detach_input = false;
    let (x_grad_open, _, _) = probe(&module);
    if x_grad_open <= 0.0 {
        return Err("negative control: input gradient stayed zero without detach".to_string());
    }
    Ok(format!(
        "detached input grad 0 exactly (path weights {w_grad:.2e}); \
         released detach leaks {x_grad_open:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4: gating invariants and balance-loss closed forms.
// ---------------------------------------------------------------------------

fn criterion_gating() -> Result<String, String> {
    let mut init = rng::substream(9, "acceptance-gating");
    let (n_experts, k) = (6usize, 3usize);
    let router = Router::new(8, 16, n_experts, k, &mut init).map_err(|e| e.to_string())?;
    let x = random_tensor(Shape4::new(3, 8, 4, 4), 17, "gating-x");

    let snapshots = |router: &Router| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let routing = router.route(&mut tape, xv, None).unwrap();
        routing.snapshots
    };

    let before = snapshots(&router);
    for snap in &before {
        if snap.active.len() != k {
            return Err(format!("{} active experts, expected {k}", snap.active.len()));
        }
        let sum: f64 = snap.gates.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(format!("gates sum to {sum}"));
        }
        for (e, g) in snap.gates.iter().enumerate() {
            let active = snap.active.contains(&e);
            if active && *g <= 0.0 {
                return Err("active gate is not positive".to_string());
            }
            if !active && *g != 0.0 {
                return Err("inactive gate is nonzero".to_string());
            }
        }
    }

    // Shifting every expert logit by a constant moves nothing.
    {
        let mut bias = router.head.bias.borrow_mut();
        for e in 0..n_experts {
            *bias.value.at_mut(0, 0, 0, e) += 3.25;
        }
    }
    let after = snapshots(&router);
    for (a, b) in before.iter().zip(&after) {
        if a.active != b.active {
            return Err("selection changed under a logit shift".to_string());
        }
        for (g1, g2) in a.gates.iter().zip(&b.gates) {
            if (g1 - g2).abs() > 1e-12 {
                return Err(format!("gate moved under a logit shift: {g1} vs {g2}"));
            }
        }
    }

    // Selection is invariant under any strictly increasing transform and
    // breaks ties toward the lower index.
    let logits = [0.3f64, -1.2, 2.4, 0.3, 1.9, -0.5];
    let monotone: Vec<f64> = logits.iter().map(|v| (3.0 * v).exp() + 7.0).collect();
    if top_k_indices(&logits, 3) != top_k_indices(&monotone, 3) {
        return Err("selection not invariant under a monotone transform".to_string());
    }
    if top_k_indices(&logits, 3) != vec![0, 2, 4] {
        return Err("unexpected top-k selection (0.3 tie must go to index 0)".to_string());
    }
    if top_k_indices(&[2.0, 2.0, 1.0], 1) != vec![0] {
        return Err("tie must resolve to the lower index".to_string());
    }

    // Balance-loss closed forms.
    let lb = 0.01;
    let n = n_experts;
    let mut tape = Tape::new();
    let uniform =
        tape.constant(Tensor4::from_vec(Shape4::new(1, n, 1, 1), vec![2.5; n]).unwrap());
    let loss = decoder::load_balance_loss(&mut tape, uniform, uniform, lb).unwrap();
    let uniform_v = tape.value(loss).data[0];
    if uniform_v.abs() > 1e-15 {
        return Err(format!("uniform usage scored {uniform_v:.3e}, expected 0"));
    }
    let mut one_hot = vec![0.0; n];
    one_hot[0] = 4.0;
    let hot = tape.constant(Tensor4::from_vec(Shape4::new(1, n, 1, 1), one_hot).unwrap());
    let loss = decoder::load_balance_loss(&mut tape, hot, hot, lb).unwrap();
    let hot_v = tape.value(loss).data[0];
    let expected = lb * 2.0 * (n as f64 - 1.0);
    if (hot_v - expected).abs() > 1e-12 {
        return Err(format!("one-hot usage scored {hot_v}, expected {expected}"));
    }

    Ok(format!(
        "k-sparse simplex gates, shift/monotone invariance, closed forms 0 and {expected}"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5: parameter and FLOP accounting.
// ---------------------------------------------------------------------------

fn criterion_accounting() -> Result<String, String> {
    // Frozen per-layer examples.
    if accounting::lowrank_expert_params(ExpertKernels::ThreeOne, 384, 16) != 61_840 {
        return Err("single low-rank expert count drifted".to_string());
    }
    if accounting::conv_params(3, 3, 384, 384) != 1_327_488 {
        return Err("generic path count drifted".to_string());
    }
    if accounting::conv_flops(1, 1, 2, 2, 4, 4) != 128 {
        return Err("convolution FLOP formula drifted".to_string());
    }

    let base = accounting::full_scale_config();
    let params = |n: usize, variant: Variant| {
        let mut cfg = base.clone();
        cfg.num_experts = n;
        cfg.top_k = cfg.top_k.min(n);
        accounting::count_params(&cfg, ExpertKernels::ThreeOne, variant, 40, 40).params
    };
    let ratio = params(15, Variant::Mlore) as f64 / params(15, Variant::StandardMoe) as f64;
    if ratio >= PARAM_RATIO_MAX {
        return Err(format!("15-expert parameter ratio {ratio:.3} >= {PARAM_RATIO_MAX}"));
    }
    let mut worst_marginal: f64 = 0.0;
    for (lo, hi) in [(5usize, 10usize), (10, 15)] {
        let d_mlore = (params(hi, Variant::Mlore) - params(lo, Variant::Mlore)) as f64;
        let d_moe = (params(hi, Variant::StandardMoe) - params(lo, Variant::StandardMoe)) as f64;
        worst_marginal = worst_marginal.max(d_mlore / d_moe);
    }
    if worst_marginal >= MARGINAL_RATIO_MAX {
        return Err(format!(
            "marginal per-expert ratio {worst_marginal:.3} >= {MARGINAL_RATIO_MAX}"
        ));
    }

    // Fused inference convolutions are independent of the expert count.
    let fused_non_router = |n: usize| {
        let mut cfg = base.clone();
        cfg.num_experts = n;
        cfg.top_k = cfg.top_k.min(n);
        let r = accounting::count_flops(&cfg, ExpertKernels::ThreeOne, Variant::Mlore, 20, 20);
        r.flops - r.flop_parts.routers
    };
    if fused_non_router(5) != fused_non_router(10) || fused_non_router(10) != fused_non_router(15)
    {
        return Err("fused conv FLOPs vary with the expert count".to_string());
    }
    let mut single = base.clone();
    single.channels = 64;
    single.tasks = 1;
    single.scales = 1;
    single.stack_per_scale = 1;
    let fused = accounting::count_flops(&single, ExpertKernels::ThreeOne, Variant::Mlore, 16, 16);
    if fused.flop_parts.generic != 18_874_368 {
        return Err(format!("fused per-task kernel counts {}", fused.flop_parts.generic));
    }

    Ok(format!(
        "ratio {ratio:.3} < {PARAM_RATIO_MAX}, worst marginal {worst_marginal:.3} < \
         {MARGINAL_RATIO_MAX}, fused conv FLOPs constant in N"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 6: toy training improves the multi-task loss.
// ---------------------------------------------------------------------------

fn write_train_cfg(path: &Path, lb_weight: f64, seed: u64) {
    let text = format!(
        "tasks = 4\nnum_experts = 5\ntop_k = 3\nchannels = 32\nrank_min = 16\n\
         rank_max = 48\nrank_step = 8\nspecific_rank = 16\nexpert_out_channels = 64\n\
         scales = 2\nstack_per_scale = 1\nlb_weight = {lb_weight}\nnoise = true\nseed = {seed}\n"
    );
    std::fs::write(path, text).unwrap();
}

fn criterion_training(dir: &Path) -> Result<String, String> {
    let cfg_path = dir.join("train.toml");
    write_train_cfg(&cfg_path, 0.01, 42);
    let data = dir.join("train.bin");
    run_ok(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--count",
        "64",
        "--height",
        "64",
        "--width",
        "64",
        "--seed",
        "42",
    ]);

    let out_dir = dir.join("mlore-run");
    let t0 = Instant::now();
    run_ok(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--iters",
        &TRAIN_ITERS.to_string(),
        "--batch",
        "1",
        "--backbone-channels",
        "16",
        "--log-every",
        "100",
    ]);
    let train_secs = t0.elapsed().as_secs_f64();
    if train_secs > TRAIN_BUDGET_SECS {
        return Err(format!("training took {train_secs:.0}s (budget {TRAIN_BUDGET_SECS}s)"));
    }

    let totals = loss_totals(&out_dir.join("loss.csv"));
    if totals.len() != TRAIN_ITERS {
        return Err(format!("{} logged steps, expected {TRAIN_ITERS}", totals.len()));
    }
    let window = TRAIN_ITERS / 10;
    let improvement = (mean(&totals[..window]) - mean(&totals[TRAIN_ITERS - window..]))
        / mean(&totals[..window]);
    if improvement < TRAIN_MIN_IMPROVEMENT {
        return Err(format!(
            "loss improved {:.1}% (< {:.0}%)",
            100.0 * improvement,
            100.0 * TRAIN_MIN_IMPROVEMENT
        ));
    }

    // Single-task baselines for the averaged multi-task delta.
    let mut baseline = String::new();
    for task in ["seg", "boundary", "distance", "normals"] {
        let st_dir = dir.join(format!("single-{task}"));
        run_ok(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            st_dir.to_str().unwrap(),
            "--model",
            &format!("single-{task}"),
            "--iters",
            "300",
            "--batch",
            "1",
            "--backbone-channels",
            "16",
        ]);
        let metrics = st_dir.join("metrics.txt");
        run_ok(&[
            "eval",
            "--ckpt",
            st_dir.join("model.ckpt").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--write-metrics",
            metrics.to_str().unwrap(),
        ]);
        baseline.push_str(&std::fs::read_to_string(metrics).unwrap());
    }
    let baseline_path = dir.join("baseline.txt");
    std::fs::write(&baseline_path, baseline).unwrap();

    let stdout = run_ok(&[
        "eval",
        "--ckpt",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--baseline",
        baseline_path.to_str().unwrap(),
    ]);
    let delta_m_line = stdout
        .lines()
        .find(|l| l.starts_with("delta_m"))
        .ok_or("evaluation printed no delta_m line")?
        .to_string();

    Ok(format!(
        "{TRAIN_ITERS} iters in {train_secs:.0}s, loss -{:.1}% (>= {:.0}%), {delta_m_line} \
         vs single-task baselines (reported, not gated)",
        100.0 * improvement,
        100.0 * TRAIN_MIN_IMPROVEMENT
    ))
}

// ---------------------------------------------------------------------------
// Criterion 7: activation export matches a recount; balancing keeps
// experts alive.
// ---------------------------------------------------------------------------

fn write_small_cfg(path: &Path, lb_weight: f64) {
    let text = format!(
        "tasks = 4\nnum_experts = 4\ntop_k = 2\nchannels = 16\nrank_min = 4\n\
         rank_max = 8\nrank_step = 1\nspecific_rank = 4\nexpert_out_channels = 32\n\
         scales = 1\nstack_per_scale = 1\nlb_weight = {lb_weight}\nnoise = true\nseed = 7\n"
    );
    std::fs::write(path, text).unwrap();
}

struct SmallRun {
    data: PathBuf,
    cfg: PathBuf,
    out_dir: PathBuf,
    acts_dir: PathBuf,
    min_ratio: f64,
}

fn small_run(dir: &Path, name: &str, lb_weight: f64) -> SmallRun {
    let cfg = dir.join(format!("{name}.toml"));
    write_small_cfg(&cfg, lb_weight);
    let data = dir.join(format!("{name}.bin"));
    run_ok(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--count",
        "32",
        "--height",
        "32",
        "--width",
        "32",
        "--seed",
        "7",
    ]);
    let out_dir = dir.join(format!("{name}-run"));
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--iters",
        "250",
        "--batch",
        "2",
        "--backbone-channels",
        "8",
    ]);
    let acts_dir = dir.join(format!("{name}-acts"));
    let stdout = run_ok(&[
        "export-activations",
        "--ckpt",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        acts_dir.to_str().unwrap(),
    ]);
    let min_ratio = stdout
        .lines()
        .find_map(|l| l.strip_prefix("min activation ratio "))
        .expect("min ratio line")
        .trim()
        .parse()
        .unwrap();
    SmallRun { data, cfg, out_dir, acts_dir, min_ratio }
}

/// Per-expert usage summed over tasks, then the minimum over experts.
/// `k * tasks / num_experts` under perfectly uniform routing.
fn min_expert_usage(csv: &Path) -> Result<f64, String> {
    let text = std::fs::read_to_string(csv).map_err(|e| e.to_string())?;
    let mut usage: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let expert: usize = fields[1].parse().map_err(|_| "bad expert id")?;
        let ratio: f64 = fields[4].parse().map_err(|_| "bad ratio")?;
        *usage.entry(expert).or_default() += ratio;
    }
    usage.values().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))))
        .ok_or_else(|| "empty activation table".to_string())
}

fn criterion_activations(dir: &Path) -> Result<(String, SmallRun), String> {
    let balanced = small_run(dir, "balanced", 0.1);
    let unbalanced = small_run(dir, "unbalanced", 0.0);

    // Independent recount: sample-by-sample forward passes, aggregated by
    // hand, must reproduce the exported table byte for byte.
    let ckpt = mlore_core::checkpoint::load(&balanced.out_dir.join("model.ckpt"))
        .map_err(|e| e.to_string())?;
    let model = ToyModel::from_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let ds = Dataset::load(&balanced.data).map_err(|e| e.to_string())?;
    let cfg = model.cfg.clone();
    let mut counts = vec![vec![0u64; cfg.tasks]; cfg.num_experts];
    let mut gate_sums = vec![vec![0.0f64; cfg.tasks]; cfg.num_experts];
    for i in 0..ds.len() {
        let mut tape = Tape::new();
        let images = tape.constant(ds.images(&[i]));
        let out = model.forward(&mut tape, images, false, None).map_err(|e| e.to_string())?;
        for (t, per_task) in out.gate_log[0].snapshots.iter().enumerate() {
            for &e in &per_task[0].active {
                counts[e][t] += 1;
                gate_sums[e][t] += per_task[0].gates[e];
            }
        }
    }
    let ranks = cfg.ranks();
    let mut expected =
        String::from("module_id,expert_id,rank,task_id,activation_ratio,mean_gate\n");
    for e in 0..cfg.num_experts {
        for t in 0..cfg.tasks {
            let ratio = counts[e][t] as f64 / ds.len() as f64;
            let mean_gate =
                if counts[e][t] > 0 { gate_sums[e][t] / counts[e][t] as f64 } else { 0.0 };
            expected.push_str(&format!("0,{e},{},{t},{ratio:.6},{mean_gate:.6}\n", ranks[e]));
        }
    }
    let exported = std::fs::read_to_string(balanced.acts_dir.join("activations.csv"))
        .map_err(|e| e.to_string())?;
    if exported != expected {
        return Err("exported activation table differs from an independent recount".to_string());
    }

    // Same seed, balancing on vs off: balancing must not lower the
    // worst-case activation frequency, per (expert, task) and aggregated
    // per expert.
    if balanced.min_ratio < unbalanced.min_ratio {
        return Err(format!(
            "min activation {:.6} with balancing < {:.6} without",
            balanced.min_ratio, unbalanced.min_ratio
        ));
    }
    let usage_on = min_expert_usage(&balanced.acts_dir.join("activations.csv"))?;
    let usage_off = min_expert_usage(&unbalanced.acts_dir.join("activations.csv"))?;
    if usage_on < usage_off {
        return Err(format!(
            "weakest expert usage {usage_on:.3} with balancing < {usage_off:.3} without"
        ));
    }
    let detail = format!(
        "export equals recount; min activation {:.3} >= {:.3} and weakest expert usage \
         {usage_on:.3} >= {usage_off:.3} (balanced vs unbalanced)",
        balanced.min_ratio, unbalanced.min_ratio
    );
    Ok((detail, balanced))
}

// ---------------------------------------------------------------------------
// Criterion 8: identical flags and seed give byte-identical artifacts.
// ---------------------------------------------------------------------------

fn criterion_determinism(dir: &Path, first: &SmallRun) -> Result<String, String> {
    let data2 = dir.join("repeat.bin");
    run_ok(&[
        "gen-data",
        "--out",
        data2.to_str().unwrap(),
        "--count",
        "32",
        "--height",
        "32",
        "--width",
        "32",
        "--seed",
        "7",
    ]);
    let bytes = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    if bytes(&data2)? != bytes(&first.data)? {
        return Err("dataset bytes differ across identical gen-data runs".to_string());
    }

    let out2 = dir.join("repeat-run");
    run_ok(&[
        "train",
        "--config",
        first.cfg.to_str().unwrap(),
        "--data",
        data2.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--iters",
        "250",
        "--batch",
        "2",
        "--backbone-channels",
        "8",
    ]);
    for artifact in ["loss.csv", "gates.csv", "model.ckpt"] {
        if bytes(&out2.join(artifact))? != bytes(&first.out_dir.join(artifact))? {
            return Err(format!("{artifact} differs across identical runs"));
        }
    }

    let acts2 = dir.join("repeat-acts");
    run_ok(&[
        "export-activations",
        "--ckpt",
        out2.join("model.ckpt").to_str().unwrap(),
        "--data",
        data2.to_str().unwrap(),
        "--out",
        acts2.to_str().unwrap(),
    ]);
    for artifact in ["activations.csv", "tasks_per_expert.csv"] {
        if bytes(&acts2.join(artifact))? != bytes(&first.acts_dir.join(artifact))? {
            return Err(format!("{artifact} differs across identical runs"));
        }
    }
    Ok("dataset, loss.csv, gates.csv, model.ckpt and both activation tables byte-identical \
        (manifest.txt timestamps excluded by design)"
        .to_string())
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    // Write to the raw handle so the lines survive libtest's capture and
    // show up in a plain `cargo test` run.
    let mut report = |n: usize, name: &str, result: Result<String, String>| {
        use std::io::Write;
        let line = match result {
            Ok(detail) => format!("criterion {n} PASS ({name}): {detail}"),
            Err(detail) => {
                failures.push(format!("criterion {n} ({name}): {detail}"));
                format!("criterion {n} FAIL ({name}): {detail}")
            }
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").and_then(|_| out.flush()).unwrap();
    };

    report(1, "reparameterization exactness", criterion_reparam());
    report(2, "gradient fidelity", criterion_gradients());
    report(3, "stop-gradient contract", criterion_stop_gradient());
    report(4, "gating and balance", criterion_gating());
    report(5, "cost accounting", criterion_accounting());
    report(6, "toy training", criterion_training(dir.path()));

    let mut small: Option<SmallRun> = None;
    match criterion_activations(dir.path()) {
        Ok((detail, run)) => {
            small = Some(run);
            report(7, "activation export", Ok(detail));
        }
        Err(detail) => report(7, "activation export", Err(detail)),
    }
    match &small {
        Some(run) => report(8, "determinism", criterion_determinism(dir.path(), run)),
        None => report(8, "determinism", Err("skipped: criterion 7 failed".to_string())),
    }

    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
