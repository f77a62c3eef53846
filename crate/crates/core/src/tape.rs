//! Reverse-mode automatic differentiation over rank-4 tensors.
//!
//! A [`Tape`] is a Wengert list: every forward constructor appends one node
//! holding the result and one operation record that knows how to push
//! gradient back to its inputs. [`Tape::backward`] walks the records in
//! reverse and then folds leaf gradients into their bound [`Param`]s.
//!
//! Ops are trait objects rather than one big enum so each operation's
//! forward constructor and backward rule sit next to each other; the
//! structural ops live here, convolution and friends in `ops`, and the
//! scalar losses in `losses`.
//!
//! Gradient flow is pruned with a `needs_grad` flag: a node needs gradient
//! only if a parameter (or an explicit grad-tracking input) is upstream.
//! [`Tape::detach`] re-enters a value as a fresh constant, which is the
//! stop-gradient primitive used by the decoder's generic path.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::shape::Shape4;
use crate::tensor::Tensor4;

/// Trainable tensor. Gradients accumulate across backward passes until
/// [`Param::zero_grad`] is called, so gradient checks can re-run forward
/// passes without touching optimizer state.
#[derive(Debug)]
pub struct Param {
    pub value: Tensor4,
    pub grad: Tensor4,
}

pub type ParamRef = Rc<RefCell<Param>>;

impl Param {
    pub fn new(value: Tensor4) -> ParamRef {
        let grad = Tensor4::zeros(value.shape);
        Rc::new(RefCell::new(Param { value, grad }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.fill(0.0);
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

pub(crate) struct Node {
    pub value: Tensor4,
    pub grad: Option<Tensor4>,
    pub needs_grad: bool,
    pub param: Option<ParamRef>,
}

/// One recorded operation: `out` names the produced node, `backward`
/// returns `(input_node, gradient_contribution)` pairs given the output
/// gradient. Contributions for inputs whose `needs_grad` is false may be
/// skipped by the op; the engine drops them regardless.
pub(crate) trait TapeOp {
    fn out(&self) -> usize;
    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)>;
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) ops: Vec<Box<dyn TapeOp>>,
    param_cache: HashMap<*const RefCell<Param>, Value>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub(crate) fn push_node(&mut self, value: Tensor4, needs_grad: bool) -> Value {
        self.nodes.push(Node { value, grad: None, needs_grad, param: None });
        Value(self.nodes.len() - 1)
    }

    /// Constant leaf: carries a value, never receives gradient.
    pub fn constant(&mut self, value: Tensor4) -> Value {
        self.push_node(value, false)
    }

    /// Gradient-tracking leaf that is not a parameter. Lets callers inspect
    /// d(loss)/d(input) for contract tests.
    pub fn input(&mut self, value: Tensor4) -> Value {
        self.push_node(value, true)
    }

    /// Stage a parameter onto the tape. Staging the same parameter twice
    /// returns the same node, so gradient contributions from every use site
    /// accumulate before the epilogue writes them into `param.grad`.
    pub fn param(&mut self, p: &ParamRef) -> Value {
        let key = Rc::as_ptr(p);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let value = p.borrow().value.clone();
        let v = self.push_node(value, true);
        self.nodes[v.0].param = Some(Rc::clone(p));
        self.param_cache.insert(key, v);
        v
    }

    /// Stop-gradient: re-enter `v`'s value as a fresh constant. The value
    /// flows forward unchanged; no gradient ever reaches `v`'s producers
    /// through the returned handle.
    pub fn detach(&mut self, v: Value) -> Value {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Value) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> Shape4 {
        self.nodes[v.0].value.shape
    }

    /// Gradient accumulated at `v` by the last backward pass, if any.
    pub fn grad(&self, v: Value) -> Option<&Tensor4> {
        self.nodes[v.0].grad.as_ref()
    }

    pub(crate) fn needs_grad(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn record(&mut self, op: Box<dyn TapeOp>) {
        self.ops.push(op);
    }

    /// Reverse sweep from the scalar `loss`. Fails on a non-scalar node and
    /// on a second call: a tape is consumed by backward.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.consumed {
            return Err(Error::Autodiff("backward called twice on one tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar, got shape {}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Tensor4::scalar(1.0));
        for i in (0..self.ops.len()).rev() {
            let out = self.ops[i].out();
            // Temporarily move the output gradient out so the op can read
            // node values while the engine mutates input gradients.
            let Some(gout) = self.nodes[out].grad.take() else { continue };
            let contributions = self.ops[i].backward(&self.nodes, &gout);
            self.nodes[out].grad = Some(gout);
            for (id, delta) in contributions {
                if !self.nodes[id].needs_grad {
                    continue;
                }
                debug_assert_eq!(delta.shape, self.nodes[id].value.shape);
                match &mut self.nodes[id].grad {
                    Some(g) => g.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        for node in &self.nodes {
            if let (Some(p), Some(g)) = (&node.param, &node.grad) {
                p.borrow_mut().grad.add_assign(g);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Structural ops.
// ---------------------------------------------------------------------------

struct AddOp {
    a: usize,
    b: usize,
    out: usize,
}

impl TapeOp for AddOp {
    fn out(&self) -> usize {
        self.out
    }
    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        let mut res = Vec::new();
        if nodes[self.a].needs_grad {
            res.push((self.a, gout.clone()));
        }
        if nodes[self.b].needs_grad {
            res.push((self.b, gout.clone()));
        }
        res
    }
}

struct ScaleConstOp {
    x: usize,
    out: usize,
    c: f64,
}

impl TapeOp for ScaleConstOp {
    fn out(&self) -> usize {
        self.out
    }
    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        if !nodes[self.x].needs_grad {
            return Vec::new();
        }
        let mut g = gout.clone();
        g.scale(self.c);
        vec![(self.x, g)]
    }
}

struct MulConstTensorOp {
    x: usize,
    out: usize,
    k: Tensor4,
}

impl TapeOp for MulConstTensorOp {
    fn out(&self) -> usize {
        self.out
    }
    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        if !nodes[self.x].needs_grad {
            return Vec::new();
        }
        let mut g = gout.clone();
        for (gi, ki) in g.data.iter_mut().zip(&self.k.data) {
            *gi *= ki;
        }
        vec![(self.x, g)]
    }
}

/// Per-sample scalar scaling: `out[n, ...] = x[n, ...] * coef[n, col]`.
struct ScaleRowsOp {
    x: usize,
    coef: usize,
    out: usize,
    col: usize,
}

impl TapeOp for ScaleRowsOp {
    fn out(&self) -> usize {
        self.out
    }
    fn backward(&self, nodes: &[Node], gout: &Tensor4) -> Vec<(usize, Tensor4)> {
        let x = &nodes[self.x].value;
        let coef = &nodes[self.coef].value;
        let per = x.shape.c * x.shape.h * x.shape.w;
        let mut res = Vec::new();
        if nodes[self.x].needs_grad {
            let mut gx = gout.clone();
            for n in 0..x.shape.n {
                let c = coef.at(n, self.col, 0, 0);
                for v in &mut gx.data[n * per..(n + 1) * per] {
                    *v *= c;
                }
            }
            res.push((self.x, gx));
        }
        if nodes[self.coef].needs_grad {
            let mut gc = Tensor4::zeros(coef.shape);
            for n in 0..x.shape.n {
                let mut s = 0.0;
                for (gv, xv) in gout.data[n * per..(n + 1) * per]
                    .iter()
                    .zip(&x.data[n * per..(n + 1) * per])
                {
                    s += gv * xv;
                }
                *gc.at_mut(n, self.col, 0, 0) = s;
            }
            res.push((self.coef, gc));
        }
        res
    }
}

impl Tape {
    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let mut value = self.nodes[a.0].value.clone();
        value.add_assign(&self.nodes[b.0].value);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push_node(value, needs);
        self.record(Box::new(AddOp { a: a.0, b: b.0, out: out.0 }));
        Ok(out)
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale_const(&mut self, x: Value, c: f64) -> Value {
        let mut value = self.nodes[x.0].value.clone();
        value.scale(c);
        let needs = self.needs_grad(x);
        let out = self.push_node(value, needs);
        self.record(Box::new(ScaleConstOp { x: x.0, out: out.0, c }));
        out
    }

    /// Elementwise multiply by a constant tensor (no gradient into `k`).
    pub fn mul_const_tensor(&mut self, x: Value, k: Tensor4) -> Result<Value> {
        if self.shape(x) != k.shape {
            return Err(Error::shape("mul_const_tensor", format!("{} vs {}", self.shape(x), k.shape)));
        }
        let mut value = self.nodes[x.0].value.clone();
        for (v, kv) in value.data.iter_mut().zip(&k.data) {
            *v *= kv;
        }
        let needs = self.needs_grad(x);
        let out = self.push_node(value, needs);
        self.record(Box::new(MulConstTensorOp { x: x.0, out: out.0, k }));
        Ok(out)
    }

    /// Scale each batch row of `x` by `coef[n, col]`, where `coef` is a
    /// `(n, m, 1, 1)` node. Used for gate-weighted expert outputs and the
    /// task-specific scaling value.
    pub fn scale_rows(&mut self, x: Value, coef: Value, col: usize) -> Result<Value> {
        let xs = self.shape(x);
        let cs = self.shape(coef);
        if cs.n != xs.n || cs.h != 1 || cs.w != 1 || col >= cs.c {
            return Err(Error::shape(
                "scale_rows",
                format!("coef {cs} with column {col} against input {xs}"),
            ));
        }
        let per = xs.c * xs.h * xs.w;
        let mut value = self.nodes[x.0].value.clone();
        for n in 0..xs.n {
            let c = self.nodes[coef.0].value.at(n, col, 0, 0);
            for v in &mut value.data[n * per..(n + 1) * per] {
                *v *= c;
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(coef);
        let out = self.push_node(value, needs);
        self.record(Box::new(ScaleRowsOp { x: x.0, coef: coef.0, out: out.0, col }));
        Ok(out)
    }
}
