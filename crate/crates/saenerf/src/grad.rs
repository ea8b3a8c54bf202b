//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each primitive operation appends one record that caches the local partial
//! derivative for every differentiable operand, so the backward sweep is a
//! single reverse pass of multiply-accumulates. Inner products (`Dot`) and
//! reductions (`Sum`) are single records with many operands; that keeps tapes
//! for MLP-shaped graphs proportional to the number of weights rather than
//! blowing up into per-scalar nodes.
//!
//! Constants are `Var`s without a node id; they fold into the partials of the
//! records that consume them and never allocate tape space. One tape per
//! worker thread; merging gradients across workers is the caller's job.

use std::cell::RefCell;

use thiserror::Error;

/// Division by anything smaller in magnitude is refused outright.
/// Soft guards (adding an epsilon to a denominator) belong to callers; a raw
/// denominator this small in renderer or loss code is a bug to surface early.
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Abs,
    Max,
    Sigmoid,
    Softplus,
    /// Inner product; operands are the two vectors concatenated, equal halves.
    Dot,
    Sum,
}

#[derive(Debug, Error)]
pub enum GradError {
    #[error("division guard: |denominator| = {denominator:e} is below {DIV_GUARD:e}")]
    DivisionGuard { denominator: f64 },
    #[error("log domain: input {input:e} is not strictly positive")]
    LogDomain { input: f64 },
    #[error("backward target is a constant; nothing on the tape to differentiate")]
    ConstantOutput,
    #[error("non-finite value {value} while evaluating {context}")]
    NonFinite { value: f64, context: &'static str },
}

#[derive(Default)]
struct TapeBuf {
    kind: Vec<OpKind>,
    value: Vec<f64>,
    arg_start: Vec<u32>,
    arg_len: Vec<u32>,
    arg_id: Vec<u32>,
    arg_partial: Vec<f64>,
}

impl TapeBuf {
    fn begin_args(&self) -> u32 {
        self.arg_id.len() as u32
    }

    fn finish_node(&mut self, kind: OpKind, value: f64, start: u32) -> u32 {
        let len = self.arg_id.len() as u32 - start;
        self.kind.push(kind);
        self.value.push(value);
        self.arg_start.push(start);
        self.arg_len.push(len);
        (self.kind.len() - 1) as u32
    }

    fn push_arg(&mut self, id: Option<u32>, partial: f64) {
        if let Some(id) = id {
            self.arg_id.push(id);
            self.arg_partial.push(partial);
        }
    }
}

/// Wengert tape. Interior mutability lets `Var`s record through shared
/// references; `clear` takes `&mut self` so no stale `Var` can outlive a
/// reset (the borrow checker refuses it).
#[derive(Default)]
pub struct Tape {
    buf: RefCell<TapeBuf>,
}

/// A value tracked on a tape. Copyable; 24 bytes. `node == None` marks a
/// constant that gradients never reach.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    node: Option<u32>,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("node", &self.node).field("value", &self.value).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps allocated capacity for reuse.
    pub fn clear(&mut self) {
        let b = self.buf.get_mut();
        b.kind.clear();
        b.value.clear();
        b.arg_start.clear();
        b.arg_len.clear();
        b.arg_id.clear();
        b.arg_partial.clear();
    }

    pub fn node_count(&self) -> usize {
        self.buf.borrow().kind.len()
    }

    /// A constant: no tape node, zero gradient, costs nothing.
    pub fn constant(&self, value: f64) -> Var<'_> {
        Var { tape: self, node: None, value }
    }

    /// Registers an independent variable as a tape node.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let mut b = self.buf.borrow_mut();
        let start = b.begin_args();
        let id = b.finish_node(OpKind::Leaf, value, start);
        drop(b);
        Var { tape: self, node: Some(id), value }
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    /// Checked generic entry point: validates domains, appends exactly one
    /// node. Operand count must match the op (`Dot` takes the two vectors
    /// concatenated; `Sum` any count); mismatches are programming errors and
    /// panic.
    pub fn record<'t>(&'t self, op: OpKind, operands: &[Var<'t>]) -> Result<Var<'t>, GradError> {
        for o in operands {
            debug_assert!(std::ptr::eq(o.tape, self), "operand recorded on another tape");
        }
        let bin = |ops: &[Var<'t>]| -> (Var<'t>, Var<'t>) {
            assert!(ops.len() == 2, "{op:?} takes exactly 2 operands");
            (ops[0], ops[1])
        };
        let una = |ops: &[Var<'t>]| -> Var<'t> {
            assert!(ops.len() == 1, "{op:?} takes exactly 1 operand");
            ops[0]
        };
        match op {
            OpKind::Leaf => panic!("leaves are created with Tape::leaf, not record()"),
            OpKind::Add => {
                let (a, b) = bin(operands);
                Ok(self.binary(OpKind::Add, a.value + b.value, a, 1.0, b, 1.0))
            }
            OpKind::Sub => {
                let (a, b) = bin(operands);
                Ok(self.binary(OpKind::Sub, a.value - b.value, a, 1.0, b, -1.0))
            }
            OpKind::Mul => {
                let (a, b) = bin(operands);
                Ok(self.binary(OpKind::Mul, a.value * b.value, a, b.value, b, a.value))
            }
            OpKind::Div => {
                let (a, b) = bin(operands);
                if b.value.abs() < DIV_GUARD {
                    return Err(GradError::DivisionGuard { denominator: b.value });
                }
                // Forward value is a true division so plain `/` and the tape
                // agree bit for bit; the partials only need the derivative.
                let inv = 1.0 / b.value;
                Ok(self.binary(OpKind::Div, a.value / b.value, a, inv, b, -a.value * inv * inv))
            }
            OpKind::Neg => {
                let a = una(operands);
                Ok(self.unary(OpKind::Neg, -a.value, a, -1.0))
            }
            OpKind::Exp => {
                let a = una(operands);
                let e = a.value.exp();
                Ok(self.unary(OpKind::Exp, e, a, e))
            }
            OpKind::Log => {
                let a = una(operands);
                if !(a.value > 0.0) {
                    return Err(GradError::LogDomain { input: a.value });
                }
                Ok(self.unary(OpKind::Log, a.value.ln(), a, 1.0 / a.value))
            }
            OpKind::Abs => {
                let a = una(operands);
                // Subgradient 0 at the kink.
                let partial = if a.value > 0.0 {
                    1.0
                } else if a.value < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                Ok(self.unary(OpKind::Abs, a.value.abs(), a, partial))
            }
            OpKind::Max => {
                let (a, b) = bin(operands);
                // Ties route the gradient to the first operand.
                if a.value >= b.value {
                    Ok(self.unary_with_kind(OpKind::Max, a.value, a, 1.0))
                } else {
                    Ok(self.unary_with_kind(OpKind::Max, b.value, b, 1.0))
                }
            }
            OpKind::Sigmoid => {
                let a = una(operands);
                let s = sigmoid(a.value);
                Ok(self.unary(OpKind::Sigmoid, s, a, s * (1.0 - s)))
            }
            OpKind::Softplus => {
                let a = una(operands);
                let v = softplus(a.value);
                Ok(self.unary(OpKind::Softplus, v, a, sigmoid(a.value)))
            }
            OpKind::Dot => {
                assert!(operands.len() % 2 == 0, "Dot takes two concatenated equal halves");
                let (a, b) = operands.split_at(operands.len() / 2);
                Ok(self.dot(a, b))
            }
            OpKind::Sum => Ok(self.sum(operands)),
        }
    }

    fn unary<'t>(&'t self, kind: OpKind, value: f64, a: Var<'t>, pa: f64) -> Var<'t> {
        let mut b = self.buf.borrow_mut();
        let start = b.begin_args();
        b.push_arg(a.node, pa);
        let id = b.finish_node(kind, value, start);
        drop(b);
        Var { tape: self, node: Some(id), value }
    }

    // Same as `unary` but used where the op is binary by arity and only one
    // operand caught the gradient (Max).
    fn unary_with_kind<'t>(&'t self, kind: OpKind, value: f64, a: Var<'t>, pa: f64) -> Var<'t> {
        self.unary(kind, value, a, pa)
    }

    fn binary<'t>(
        &'t self,
        kind: OpKind,
        value: f64,
        a: Var<'t>,
        pa: f64,
        b: Var<'t>,
        pb: f64,
    ) -> Var<'t> {
        let mut buf = self.buf.borrow_mut();
        let start = buf.begin_args();
        buf.push_arg(a.node, pa);
        buf.push_arg(b.node, pb);
        let id = buf.finish_node(kind, value, start);
        drop(buf);
        Var { tape: self, node: Some(id), value }
    }

    /// Inner product of two equal-length vectors, one tape node.
    pub fn dot<'t>(&'t self, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
        assert!(a.len() == b.len(), "dot over mismatched lengths {} vs {}", a.len(), b.len());
        let mut buf = self.buf.borrow_mut();
        let start = buf.begin_args();
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x.value * y.value;
            buf.push_arg(x.node, y.value);
        }
        for (x, y) in a.iter().zip(b) {
            buf.push_arg(y.node, x.value);
        }
        let id = buf.finish_node(OpKind::Dot, acc, start);
        drop(buf);
        Var { tape: self, node: Some(id), value: acc }
    }

    /// Inner product against a plain constant vector; args only for `a`.
    pub fn dot_const<'t>(&'t self, a: &[Var<'t>], k: &[f64]) -> Var<'t> {
        assert!(a.len() == k.len(), "dot over mismatched lengths {} vs {}", a.len(), k.len());
        let mut buf = self.buf.borrow_mut();
        let start = buf.begin_args();
        let mut acc = 0.0;
        for (x, &c) in a.iter().zip(k) {
            acc += x.value * c;
            buf.push_arg(x.node, c);
        }
        let id = buf.finish_node(OpKind::Dot, acc, start);
        drop(buf);
        Var { tape: self, node: Some(id), value: acc }
    }

    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let mut buf = self.buf.borrow_mut();
        let start = buf.begin_args();
        let mut acc = 0.0;
        for x in xs {
            acc += x.value;
            buf.push_arg(x.node, 1.0);
        }
        let id = buf.finish_node(OpKind::Sum, acc, start);
        drop(buf);
        Var { tape: self, node: Some(id), value: acc }
    }

    /// Reverse sweep from `output`. Seeds the output adjoint with 1 and
    /// returns the adjoint of every node; constants are not on the tape and
    /// read back as zero through [`Gradients::of`].
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, GradError> {
        let root = output.node.ok_or(GradError::ConstantOutput)? as usize;
        let b = self.buf.borrow();
        let mut adj = vec![0.0; b.kind.len()];
        adj[root] = 1.0;
        for i in (0..=root).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let s = b.arg_start[i] as usize;
            let e = s + b.arg_len[i] as usize;
            for k in s..e {
                adj[b.arg_id[k] as usize] += g * b.arg_partial[k];
            }
        }
        Ok(Gradients { adj })
    }
}

/// Dense adjoint map produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn of(&self, v: Var<'_>) -> f64 {
        v.node.map_or(0.0, |id| self.adj[id as usize])
    }

    pub fn by_id(&self, id: u32) -> f64 {
        self.adj[id as usize]
    }
}

/// Overflow-safe logistic function; shared by the tape op and plain-`f64`
/// evaluation paths so both produce identical bits.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe ln(1 + e^x); same sharing rationale as [`sigmoid`].
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn node_id(self) -> Option<u32> {
        self.node
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.record(OpKind::Exp, &[self]).expect("exp is total")
    }

    /// Panics on non-positive input; use [`Var::try_ln`] where the domain is
    /// not already guaranteed.
    pub fn ln(self) -> Var<'t> {
        self.try_ln().unwrap()
    }

    pub fn try_ln(self) -> Result<Var<'t>, GradError> {
        self.tape.record(OpKind::Log, &[self])
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.record(OpKind::Abs, &[self]).expect("abs is total")
    }

    pub fn max(self, other: Var<'t>) -> Var<'t> {
        self.tape.record(OpKind::Max, &[self, other]).expect("max is total")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.record(OpKind::Sigmoid, &[self]).expect("sigmoid is total")
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.record(OpKind::Softplus, &[self]).expect("softplus is total")
    }

    pub fn try_div(self, rhs: Var<'t>) -> Result<Var<'t>, GradError> {
        self.tape.record(OpKind::Div, &[self, rhs])
    }

    fn constant_on_same_tape(self, value: f64) -> Var<'t> {
        Var { tape: self.tape, node: None, value }
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.record($op, &[self, rhs]).unwrap()
            }
        }
        impl<'t> std::ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let rhs = self.constant_on_same_tape(rhs);
                self.tape.record($op, &[self, rhs]).unwrap()
            }
        }
        impl<'t> std::ops::$trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let lhs = rhs.constant_on_same_tape(self);
                rhs.tape.record($op, &[lhs, rhs]).unwrap()
            }
        }
    };
}

var_binop!(Add, add, OpKind::Add);
var_binop!(Sub, sub, OpKind::Sub);
var_binop!(Mul, mul, OpKind::Mul);
var_binop!(Div, div, OpKind::Div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.record(OpKind::Neg, &[self]).expect("neg is total")
    }
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences with step `h`. Returns the worst relative error
/// `|g_ad - g_fd| / max(1, |g_fd|)` over all coordinates.
///
/// Meaningful only where `f` is smooth at `x`; a kink or a branch flip inside
/// the stencil makes the finite difference itself wrong.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> Result<f64, GradError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    let leaves = tape.leaves(x);
    let out = f(&tape, &leaves);
    if !out.value().is_finite() {
        return Err(GradError::NonFinite { value: out.value(), context: "grad_check forward" });
    }
    let grads = match tape.backward(out) {
        Ok(g) => Some(g),
        // A constant output has zero gradient everywhere; still checkable.
        Err(GradError::ConstantOutput) => None,
        Err(e) => return Err(e),
    };
    let eval = |xs: &[f64]| -> f64 {
        let t = Tape::new();
        let vs = t.leaves(xs);
        f(&t, &vs).value()
    };
    let mut xs = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = eval(&xs);
        xs[i] = orig - h;
        let fm = eval(&xs);
        xs[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        if !fd.is_finite() {
            return Err(GradError::NonFinite { value: fd, context: "grad_check finite difference" });
        }
        let ad = grads.as_ref().map_or(0.0, |g| g.of(leaves[i]));
        worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
