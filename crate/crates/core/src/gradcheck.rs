//! Central-difference verification of analytic gradients.
//!
//! The caller runs one forward/backward pass, hands over the analytic
//! gradients, and provides a deterministic closure that re-evaluates the
//! scalar objective from current parameter values. Sampled coordinates are
//! perturbed by `±step`; the relative error of a coordinate is
//! `|analytic - central| / max(|analytic|, |central|, 1e-12)`.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::ParamRef;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy)]
pub struct FdCoord {
    /// Index into the parameter list.
    pub param: usize,
    /// Flat element index inside that parameter.
    pub index: usize,
    pub analytic: f64,
    pub central: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub coords: Vec<FdCoord>,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, central: f64) -> f64 {
    (analytic - central).abs() / analytic.abs().max(central.abs()).max(1e-12)
}

/// Check up to `coords` sampled coordinates spread over `params` against
/// central differences of `f`. `f` must be deterministic and read parameter
/// values at call time; original values are restored bit-exactly.
///
/// Coordinates whose analytic gradient magnitude falls below
/// `min_analytic_mag` are sampled only if too few larger ones exist;
/// central differences cannot resolve gradients near the round-off floor
/// of `f`, so callers pin the measurable range explicitly.
pub fn finite_difference_check(
    params: &[ParamRef],
    analytic: &[Tensor4],
    f: &mut dyn FnMut() -> Result<f64>,
    coords: usize,
    step: f64,
    min_analytic_mag: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FdReport> {
    if params.len() != analytic.len() {
        return Err(Error::Autodiff(format!(
            "{} params but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    if coords == 0 || step <= 0.0 {
        return Err(Error::Autodiff("coords and step must be positive".into()));
    }
    // Spread the budget over parameters: each tensor contributes candidates,
    // preferring coordinates with measurable analytic gradient.
    let mut preferred = Vec::new();
    let mut fallback = Vec::new();
    for (pi, grad) in analytic.iter().enumerate() {
        for (ei, g) in grad.data.iter().enumerate() {
            if g.abs() >= min_analytic_mag {
                preferred.push((pi, ei));
            } else {
                fallback.push((pi, ei));
            }
        }
    }
    preferred.shuffle(rng);
    fallback.shuffle(rng);
    preferred.extend(fallback);
    let chosen: Vec<(usize, usize)> = preferred.into_iter().take(coords).collect();
    if chosen.is_empty() {
        return Err(Error::Autodiff("no coordinates available to check".into()));
    }

    let mut report = FdReport { coords: Vec::with_capacity(chosen.len()), max_rel_err: 0.0 };
    for (pi, ei) in chosen {
        let original = params[pi].borrow().value.data[ei];
        params[pi].borrow_mut().value.data[ei] = original + step;
        let up = f()?;
        params[pi].borrow_mut().value.data[ei] = original - step;
        let down = f()?;
        params[pi].borrow_mut().value.data[ei] = original;
        let central = (up - down) / (2.0 * step);
        let a = analytic[pi].data[ei];
        let e = rel_err(a, central);
        report.max_rel_err = report.max_rel_err.max(e);
        report.coords.push(FdCoord { param: pi, index: ei, analytic: a, central, rel_err: e });
    }
    Ok(report)
}

/// Test support: verify every measurable coordinate of `params` against
/// central differences. `forward` must run a full forward/backward pass,
/// accumulating into `param.grad`, and return the loss value. Coordinates
/// with analytic gradient below `1e-6` are skipped: they sit under the
/// round-off floor of a double-precision central difference.
#[cfg(test)]
pub(crate) fn assert_grads_match_fd(
    params: &[ParamRef],
    forward: &mut dyn FnMut() -> Result<f64>,
    tol: f64,
) {
    const FLOOR: f64 = 1e-6;
    for p in params {
        p.borrow_mut().zero_grad();
    }
    let _ = forward().expect("forward for analytic gradients");
    let analytic: Vec<Tensor4> = params.iter().map(|p| p.borrow().grad.clone()).collect();
    for p in params {
        p.borrow_mut().zero_grad();
    }
    let measurable: usize =
        analytic.iter().map(|g| g.data.iter().filter(|v| v.abs() >= FLOOR).count()).sum();
    assert!(measurable > 0, "no measurable gradient coordinates");
    let mut rng = crate::rng::substream(0xfd, "gradcheck-assert");
    let mut value_only = || -> Result<f64> {
        let v = forward()?;
        for p in params {
            p.borrow_mut().zero_grad();
        }
        Ok(v)
    };
    let rep = finite_difference_check(
        params,
        &analytic,
        &mut value_only,
        measurable,
        1e-5,
        FLOOR,
        &mut rng,
    )
    .expect("finite difference check");
    assert!(
        rep.max_rel_err < tol,
        "fd max rel err {} over {} coords",
        rep.max_rel_err,
        rep.coords.len()
    );
}
