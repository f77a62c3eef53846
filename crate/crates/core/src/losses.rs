//! Scalar objectives recorded on the tape: per-task losses and the
//! expert-balance penalty pieces.

use crate::error::{Error, Result};
use crate::ops::{sigmoid, softplus_scalar, std_normal_cdf, std_normal_pdf};
use crate::tape::{Node, Tape, TapeOp, Value};
use crate::tensor::Tensor4;

// ---------------------------------------------------------------------------
// Cross-entropy over class channels.
// ---------------------------------------------------------------------------

struct CrossEntropyOp {
    logits: usize,
    out: usize,
    probs: Tensor4,
    targets: Vec<u8>,
}

impl TapeOp for CrossEntropyOp {
    fn out(&self) -> usize {
        self.out
    }

    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        if !nodes[self.logits].needs_grad {
            return Vec::new();
        }
        let s = self.probs.shape;
        let count = (s.n * s.h * s.w) as f64;
        let g = gout.data[0] / count;
        let mut gx = self.probs.clone();
        let mut ti = 0;
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let t = self.targets[ti] as usize;
                    ti += 1;
                    *gx.at_mut(n, t, h, w) -= 1.0;
                }
            }
        }
        gx.scale(g);
        vec![(self.logits, gx)]
    }
}

// ---------------------------------------------------------------------------
// Class-balanced binary cross-entropy with logits.
// ---------------------------------------------------------------------------

struct BalancedBceOp {
    logits: usize,
    out: usize,
    targets: Tensor4,
    w_pos: f64,
    w_neg: f64,
}

impl TapeOp for BalancedBceOp {
    fn out(&self) -> usize {
        self.out
    }

    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        if !nodes[self.logits].needs_grad {
            return Vec::new();
        }
        let z = &nodes[self.logits].value;
        let count = z.numel() as f64;
        let g = gout.data[0] / count;
        let mut gx = Tensor4::zeros(z.shape);
        for i in 0..z.data.len() {
            let p = sigmoid(z.data[i]);
            let y = self.targets.data[i];
            gx.data[i] = g * (self.w_pos * y * (p - 1.0) + self.w_neg * (1.0 - y) * p);
        }
        vec![(self.logits, gx)]
    }
}

// ---------------------------------------------------------------------------
// Mean absolute error against a constant target.
// ---------------------------------------------------------------------------

struct L1Op {
    pred: usize,
    out: usize,
    target: Tensor4,
}

impl TapeOp for L1Op {
    fn out(&self) -> usize {
        self.out
    }

    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        if !nodes[self.pred].needs_grad {
            return Vec::new();
        }
        let p = &nodes[self.pred].value;
        let g = gout.data[0] / p.numel() as f64;
        let mut gx = Tensor4::zeros(p.shape);
        for i in 0..p.data.len() {
            let d = p.data[i] - self.target.data[i];
            gx.data[i] = if d > 0.0 {
                g
            } else if d < 0.0 {
                -g
            } else {
                0.0
            };
        }
        vec![(self.pred, gx)]
    }
}

// ---------------------------------------------------------------------------
// Squared coefficient of variation.
// ---------------------------------------------------------------------------

struct Cv2Op {
    x: usize,
    out: usize,
}

impl TapeOp for Cv2Op {
    fn out(&self) -> usize {
        self.out
    }

    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        if !nodes[self.x].needs_grad {
            return Vec::new();
        }
        let v = &nodes[self.x].value;
        let n = v.numel() as f64;
        let mean = v.data.iter().sum::<f64>() / n;
        let mut gx = Tensor4::zeros(v.shape);
        if mean > 0.0 {
            let var = v.data.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let g = gout.data[0];
            for i in 0..v.data.len() {
                gx.data[i] =
                    g * (2.0 * (v.data[i] - mean) / (n * mean * mean) - 2.0 * var / (n * mean * mean * mean));
            }
        }
        vec![(self.x, gx)]
    }
}

// ---------------------------------------------------------------------------
// Smooth activation-probability estimator under Gaussian routing noise.
// ---------------------------------------------------------------------------

struct PhiLoadOp {
    clean: usize,
    sigma: usize,
    out: usize,
    thresholds: Vec<f64>,
}

impl TapeOp for PhiLoadOp {
    fn out(&self) -> usize {
        self.out
    }

    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        let clean = &nodes[self.clean].value;
        let sigma = &nodes[self.sigma].value;
        let mut res = Vec::new();
        let need_c = nodes[self.clean].needs_grad;
        let need_s = nodes[self.sigma].needs_grad;
        let mut gc = need_c.then(|| Tensor4::zeros(clean.shape));
        let mut gs = need_s.then(|| Tensor4::zeros(sigma.shape));
        for i in 0..clean.data.len() {
            let s = sigma.data[i];
            let z = (clean.data[i] - self.thresholds[i]) / s;
            let pdf = std_normal_pdf(z);
            if let Some(gc) = gc.as_mut() {
                gc.data[i] = gout.data[i] * pdf / s;
            }
            if let Some(gs) = gs.as_mut() {
                gs.data[i] = gout.data[i] * pdf * (-z / s);
            }
        }
        if let Some(gc) = gc {
            res.push((self.clean, gc));
        }
        if let Some(gs) = gs {
            res.push((self.sigma, gs));
        }
        res
    }
}

impl Tape {
    /// Mean pixel-wise cross-entropy: `logits` is `(n, classes, h, w)`,
    /// `targets` one class id per `(n, h, w)` site in row-major order.
    pub fn cross_entropy(&mut self, logits: Value, targets: &[u8]) -> Result<Value> {
        let s = self.shape(logits);
        if targets.len() != s.n * s.h * s.w {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {s}", targets.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t as usize >= s.c) {
            return Err(Error::shape("cross_entropy", format!("class {t} out of {} channels", s.c)));
        }
        let x = &self.nodes[logits.0].value;
        let mut probs = Tensor4::zeros(s);
        let mut loss = 0.0;
        let mut ti = 0;
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let mut mx = f64::NEG_INFINITY;
                    for c in 0..s.c {
                        mx = mx.max(x.at(n, c, h, w));
                    }
                    let mut z = 0.0;
                    for c in 0..s.c {
                        z += (x.at(n, c, h, w) - mx).exp();
                    }
                    for c in 0..s.c {
                        *probs.at_mut(n, c, h, w) = (x.at(n, c, h, w) - mx).exp() / z;
                    }
                    let t = targets[ti] as usize;
                    ti += 1;
                    // log-prob via the shifted logits, not via probs, to
                    // keep the loss finite for extreme logits.
                    loss -= x.at(n, t, h, w) - mx - z.ln();
                }
            }
        }
        loss /= (s.n * s.h * s.w) as f64;
        let needs = self.needs_grad(logits);
        let out = self.push_node(Tensor4::scalar(loss), needs);
        self.record(Box::new(CrossEntropyOp {
            logits: logits.0,
            out: out.0,
            probs,
            targets: targets.to_vec(),
        }));
        Ok(out)
    }

    /// Binary cross-entropy with logits, classes re-weighted by inverse
    /// frequency within the batch: positives weigh `n_neg/n`, negatives
    /// `n_pos/n`. A single-class batch therefore contributes zero loss.
    pub fn balanced_bce(&mut self, logits: Value, targets: &Tensor4) -> Result<Value> {
        let s = self.shape(logits);
        if s != targets.shape {
            return Err(Error::shape("balanced_bce", format!("{s} vs {}", targets.shape)));
        }
        if targets.data.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::shape("balanced_bce", "targets must be 0/1".to_string()));
        }
        let n = targets.numel() as f64;
        let n_pos: f64 = targets.data.iter().sum();
        let w_pos = (n - n_pos) / n;
        let w_neg = n_pos / n;
        let z = &self.nodes[logits.0].value;
        let mut loss = 0.0;
        for i in 0..z.data.len() {
            let zi = z.data[i];
            // ln sigmoid(z) = -softplus(-z); ln(1 - sigmoid(z)) = -softplus(z)
            let log_p = -softplus_scalar(-zi);
            let log_np = -softplus_scalar(zi);
            loss -= w_pos * targets.data[i] * log_p + w_neg * (1.0 - targets.data[i]) * log_np;
        }
        loss /= n;
        let needs = self.needs_grad(logits);
        let out = self.push_node(Tensor4::scalar(loss), needs);
        self.record(Box::new(BalancedBceOp {
            logits: logits.0,
            out: out.0,
            targets: targets.clone(),
            w_pos,
            w_neg,
        }));
        Ok(out)
    }

    /// Mean absolute error against a constant target tensor.
    pub fn l1_loss(&mut self, pred: Value, target: &Tensor4) -> Result<Value> {
        let s = self.shape(pred);
        if s != target.shape {
            return Err(Error::shape("l1_loss", format!("{s} vs {}", target.shape)));
        }
        let p = &self.nodes[pred.0].value;
        let loss =
            p.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.numel() as f64;
        let needs = self.needs_grad(pred);
        let out = self.push_node(Tensor4::scalar(loss), needs);
        self.record(Box::new(L1Op { pred: pred.0, out: out.0, target: target.clone() }));
        Ok(out)
    }

    /// Squared coefficient of variation `var(x) / mean(x)^2` with biased
    /// variance. Defined as zero when the mean is zero (degenerate batch),
    /// with zero gradient.
    pub fn cv_squared(&mut self, x: Value) -> Value {
        let v = &self.nodes[x.0].value;
        let n = v.numel() as f64;
        let mean = v.data.iter().sum::<f64>() / n;
        let val = if mean > 0.0 {
            let var = v.data.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            var / (mean * mean)
        } else {
            0.0
        };
        let needs = self.needs_grad(x);
        let out = self.push_node(Tensor4::scalar(val), needs);
        self.record(Box::new(Cv2Op { x: x.0, out: out.0 }));
        out
    }

    /// Per-entry probability that a noisy logit clears its top-k threshold:
    /// `Phi((clean - threshold) / sigma)`. `thresholds` is a constant with
    /// one entry per element of `clean`; `sigma` must be strictly positive.
    pub fn phi_exceed(&mut self, clean: Value, sigma: Value, thresholds: &[f64]) -> Result<Value> {
        let cs = self.shape(clean);
        if self.shape(sigma) != cs || thresholds.len() != cs.numel() {
            return Err(Error::shape(
                "phi_exceed",
                format!("clean {cs} vs sigma {} vs {} thresholds", self.shape(sigma), thresholds.len()),
            ));
        }
        if self.nodes[sigma.0].value.data.iter().any(|&s| s <= 0.0) {
            return Err(Error::Routing("noise scale must be positive".into()));
        }
        let c = &self.nodes[clean.0].value;
        let sg = &self.nodes[sigma.0].value;
        let mut value = Tensor4::zeros(cs);
        for i in 0..c.data.len() {
            value.data[i] = std_normal_cdf((c.data[i] - thresholds[i]) / sg.data[i]);
        }
        let needs = self.needs_grad(clean) || self.needs_grad(sigma);
        let out = self.push_node(value, needs);
        self.record(Box::new(PhiLoadOp {
            clean: clean.0,
            sigma: sigma.0,
            out: out.0,
            thresholds: thresholds.to_vec(),
        }));
        Ok(out)
    }
}
