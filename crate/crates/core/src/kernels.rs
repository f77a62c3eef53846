//! Precision-generic numeric kernels.
//!
//! These are the single source of truth for the forward math shared by the
//! autodiff engine (at `f64`) and the re-parameterization equivalence
//! checks (at `f32` and `f64`). Keeping one implementation means the
//! equivalence suite exercises exactly the arithmetic the model runs.
//!
//! Convolution here is cross-correlation (no kernel flip), stride 1, zero
//! padding of `floor(k/2)` so spatial size is preserved. Weights are laid
//! out `(kh, kw, c_in, c_out)`, which makes the innermost loop a contiguous
//! run over output channels.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::shape::Shape4;

/// Axis reading of a convolution weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelDims {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl KernelDims {
    pub const fn new(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        KernelDims { kh, kw, c_in, c_out }
    }

    /// The `Shape4` a weight tensor with these dims carries.
    pub const fn shape(&self) -> Shape4 {
        Shape4::new(self.kh, self.kw, self.c_in, self.c_out)
    }

    pub const fn from_shape(s: Shape4) -> Self {
        KernelDims { kh: s.n, kw: s.c, c_in: s.h, c_out: s.w }
    }

    pub const fn numel(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out
    }

    #[inline(always)]
    pub const fn at(&self, kh: usize, kw: usize, ci: usize, co: usize) -> usize {
        ((kh * self.kw + kw) * self.c_in + ci) * self.c_out + co
    }
}

fn check_conv_args<T>(x: &[T], xs: Shape4, w: &[T], k: KernelDims, b: Option<&[T]>) -> Result<()> {
    if x.len() != xs.numel() {
        return Err(Error::shape("conv2d", format!("input buffer {} vs shape {xs}", x.len())));
    }
    if w.len() != k.numel() {
        return Err(Error::shape("conv2d", format!("weight buffer {} vs dims {k:?}", w.len())));
    }
    if k.kh != k.kw || k.kh % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {k:?}")));
    }
    if xs.c != k.c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} vs kernel c_in {}", xs.c, k.c_in),
        ));
    }
    if let Some(b) = b {
        if b.len() != k.c_out {
            return Err(Error::shape("conv2d", format!("bias {} vs c_out {}", b.len(), k.c_out)));
        }
    }
    Ok(())
}

/// Same-size 2-D cross-correlation. Returns the output buffer, shaped
/// `(xs.n, k.c_out, xs.h, xs.w)`.
pub fn conv2d<T: Float>(
    x: &[T],
    xs: Shape4,
    w: &[T],
    k: KernelDims,
    b: Option<&[T]>,
) -> Result<Vec<T>> {
    check_conv_args(x, xs, w, k, b)?;
    let os = Shape4::new(xs.n, k.c_out, xs.h, xs.w);
    let mut out = vec![T::zero(); os.numel()];
    let pad = k.kh / 2;
    let mut acc = vec![T::zero(); k.c_out];
    for n in 0..xs.n {
        for oh in 0..xs.h {
            for ow in 0..xs.w {
                match b {
                    Some(b) => acc.copy_from_slice(b),
                    None => acc.fill(T::zero()),
                }
                for kh in 0..k.kh {
                    let ih = (oh + kh).wrapping_sub(pad);
                    if ih >= xs.h {
                        continue;
                    }
                    for kw in 0..k.kw {
                        let iw = (ow + kw).wrapping_sub(pad);
                        if iw >= xs.w {
                            continue;
                        }
                        for ci in 0..k.c_in {
                            let xv = x[xs.at(n, ci, ih, iw)];
                            let wrow = &w[k.at(kh, kw, ci, 0)..k.at(kh, kw, ci, 0) + k.c_out];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a = *a + xv * wv;
                            }
                        }
                    }
                }
                for (co, &a) in acc.iter().enumerate() {
                    out[os.at(n, co, oh, ow)] = a;
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping patch embedding: a `p x p` kernel applied at stride `p`.
/// Weight layout `(p, p, c_in, c_out)`; output is `(n, c_out, h/p, w/p)`.
pub fn patch_embed<T: Float>(
    x: &[T],
    xs: Shape4,
    w: &[T],
    k: KernelDims,
    b: &[T],
    patch: usize,
) -> Result<(Vec<T>, Shape4)> {
    if patch == 0 || xs.h % patch != 0 || xs.w % patch != 0 || xs.h < patch || xs.w < patch {
        return Err(Error::shape(
            "patch_embed",
            format!("input {xs} not divisible into {patch}x{patch} patches"),
        ));
    }
    if k.kh != patch || k.kw != patch || k.c_in != xs.c {
        return Err(Error::shape("patch_embed", format!("kernel {k:?} vs input {xs}")));
    }
    if w.len() != k.numel() || b.len() != k.c_out {
        return Err(Error::shape("patch_embed", "weight/bias buffer size".to_string()));
    }
    let os = Shape4::new(xs.n, k.c_out, xs.h / patch, xs.w / patch);
    let mut out = vec![T::zero(); os.numel()];
    let mut acc = vec![T::zero(); k.c_out];
    for n in 0..xs.n {
        for oh in 0..os.h {
            for ow in 0..os.w {
                acc.copy_from_slice(b);
                for ph in 0..patch {
                    for pw in 0..patch {
                        for ci in 0..k.c_in {
                            let xv = x[xs.at(n, ci, oh * patch + ph, ow * patch + pw)];
                            let wrow = &w[k.at(ph, pw, ci, 0)..k.at(ph, pw, ci, 0) + k.c_out];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a = *a + xv * wv;
                            }
                        }
                    }
                }
                for (co, &a) in acc.iter().enumerate() {
                    out[os.at(n, co, oh, ow)] = a;
                }
            }
        }
    }
    Ok((out, os))
}

/// Batch-norm inference transform: per channel `c`,
/// `y = (x - mean[c]) / sqrt(var[c] + eps) * gamma[c] + beta[c]`.
pub fn bn_affine<T: Float>(
    x: &[T],
    xs: Shape4,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Vec<T>> {
    if [gamma.len(), beta.len(), mean.len(), var.len()] != [xs.c; 4] {
        return Err(Error::shape("bn_affine", format!("stats length vs {} channels", xs.c)));
    }
    let mut out = vec![T::zero(); x.len()];
    let plane = xs.h * xs.w;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let g = gamma[c] / (var[c] + eps).sqrt();
            let off = beta[c] - mean[c] * g;
            let base = xs.at(n, c, 0, 0);
            for i in 0..plane {
                out[base + i] = x[base + i] * g + off;
            }
        }
    }
    Ok(out)
}
