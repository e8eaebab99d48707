//! Reverse-mode automatic differentiation over a closed scalar operation set.
//!
//! A [`Tape`] records one node per scalar operation; each node stores the
//! operand indices and the *local partial derivatives precomputed during the
//! forward pass*, so the backward sweep is a single uniform loop with no
//! operation dispatch. A [`Var`] carries its value inline, which lets the
//! same forward code run in two modes: a recording tape for gradient steps
//! and a non-recording tape for plain evaluation (nothing is pushed, only
//! values flow).
//!
//! Non-finite intermediates are latched at the first occurrence together
//! with the operation that produced them; [`Tape::check`] and
//! [`Tape::backward`] surface them as hard errors.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by operation `{op}` at node {node}")]
    NonFiniteValue { op: &'static str, node: usize },
    #[error("non-finite gradient flowing into operation `{op}` at node {node}")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("backward() on a non-recording tape")]
    NotRecording,
}

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    da: f64,
    db: f64,
    op: &'static str,
}

/// Index marking a `Var` that lives on a non-recording tape.
const UNRECORDED: u32 = u32::MAX;

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    poisoned: RefCell<Option<(&'static str, usize)>>,
}

impl Tape {
    /// A recording tape: every operation becomes a node.
    pub fn new() -> Tape {
        let tape = Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            poisoned: RefCell::new(None),
        };
        // Node 0 is a sink for unused operand slots.
        tape.nodes.borrow_mut().push(Node {
            a: 0,
            b: 0,
            da: 0.0,
            db: 0.0,
            op: "sink",
        });
        tape
    }

    /// A pass-through tape: values flow, nothing is recorded.
    pub fn evaluation_only() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            poisoned: RefCell::new(None),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input (parameter) with the given value.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        self.push1("leaf", 0, 0.0, value)
    }

    /// A value treated as a constant: gradients never flow into it.
    pub fn constant(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            val: value,
            idx: UNRECORDED,
        }
    }

    fn push1(&self, op: &'static str, a: u32, da: f64, val: f64) -> Var<'_> {
        self.push2(op, a, 0, da, 0.0, val)
    }

    fn push2(&self, op: &'static str, a: u32, b: u32, da: f64, db: f64, val: f64) -> Var<'_> {
        if !val.is_finite() {
            let mut p = self.poisoned.borrow_mut();
            if p.is_none() {
                *p = Some((op, self.nodes.borrow().len()));
            }
        }
        if !self.recording {
            return Var {
                tape: self,
                val,
                idx: UNRECORDED,
            };
        }
        // Constants carry the sentinel index; their gradient goes to the sink.
        let a = if a == UNRECORDED { 0 } else { a };
        let b = if b == UNRECORDED { 0 } else { b };
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { a, b, da, db, op });
        Var {
            tape: self,
            val,
            idx,
        }
    }

    /// Error out if any forward operation produced a non-finite value.
    pub fn check(&self) -> Result<(), AutodiffError> {
        match *self.poisoned.borrow() {
            Some((op, node)) => Err(AutodiffError::NonFiniteValue { op, node }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from `loss`; returns one gradient slot per node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        self.check()?;
        if !self.recording || loss.idx == UNRECORDED {
            return Err(AutodiffError::NotRecording);
        }
        let nodes = self.nodes.borrow();
        let mut grad = vec![0.0f64; nodes.len()];
        grad[loss.idx as usize] = 1.0;
        for i in (1..nodes.len()).rev() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            let n = &nodes[i];
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { op: n.op, node: i });
            }
            grad[n.a as usize] += g * n.da;
            grad[n.b as usize] += g * n.db;
        }
        Ok(Gradients { grad })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub struct Gradients {
    grad: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> f64 {
        if var.idx == UNRECORDED {
            0.0
        } else {
            self.grad[var.idx as usize]
        }
    }
}

/// A scalar on a tape. Copyable; carries its value inline.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    val: f64,
    idx: u32,
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.val
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.val.exp();
        self.tape.push1("exp", self.idx, v, v)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.push1("ln", self.idx, 1.0 / self.val, self.val.ln())
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.val.sqrt();
        self.tape.push1("sqrt", self.idx, 0.5 / v, v)
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.push1("sin", self.idx, self.val.cos(), self.val.sin())
    }

    pub fn cos(self) -> Var<'t> {
        self.tape
            .push1("cos", self.idx, -self.val.sin(), self.val.cos())
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.val.tanh();
        self.tape.push1("tanh", self.idx, 1.0 - v * v, v)
    }

    pub fn acos(self) -> Var<'t> {
        let d = -1.0 / (1.0 - self.val * self.val).sqrt();
        self.tape.push1("acos", self.idx, d, self.val.acos())
    }

    pub fn square(self) -> Var<'t> {
        self.tape
            .push1("square", self.idx, 2.0 * self.val, self.val * self.val)
    }

    /// max(self, c): derivative 1 above the floor, 0 below.
    pub fn max_const(self, c: f64) -> Var<'t> {
        let (v, d) = if self.val > c { (self.val, 1.0) } else { (c, 0.0) };
        self.tape.push1("max_const", self.idx, d, v)
    }

    /// Clamp into [lo, hi] with pass-through gradient strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let (v, d) = if self.val < lo {
            (lo, 0.0)
        } else if self.val > hi {
            (hi, 0.0)
        } else {
            (self.val, 1.0)
        };
        self.tape.push1("clamp", self.idx, d, v)
    }

    /// An operation defined by a precomputed value and local derivative.
    /// The closed-form log-density primitives are wired through this.
    pub fn custom_unary(self, op: &'static str, value: f64, dvalue: f64) -> Var<'t> {
        self.tape.push1(op, self.idx, dvalue, value)
    }

    /// Treat the current value as a constant, cutting the gradient path.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.val)
    }
}

/// Fixed-order sum; deterministic reduction for batch losses.
pub fn sum<'t>(vars: &[Var<'t>]) -> Var<'t> {
    let mut iter = vars.iter();
    let first = *iter.next().expect("sum of empty slice");
    iter.fold(first, |acc, &v| acc + v)
}

macro_rules! impl_binary {
    ($trait:ident, $fn:ident, $op:literal, $val:expr, $da:expr, $db:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $fn(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                self.tape.push2(
                    $op,
                    self.idx,
                    rhs.idx,
                    $da(self.val, rhs.val),
                    $db(self.val, rhs.val),
                    $val(self.val, rhs.val),
                )
            }
        }

        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $fn(self, rhs: f64) -> Var<'t> {
                self.tape.push1(
                    $op,
                    self.idx,
                    $da(self.val, rhs),
                    $val(self.val, rhs),
                )
            }
        }
    };
}

impl_binary!(Add, add, "add", |a: f64, b: f64| a + b, |_, _| 1.0, |_, _| 1.0);
impl_binary!(Sub, sub, "sub", |a: f64, b: f64| a - b, |_, _| 1.0, |_, _| -1.0);
impl_binary!(Mul, mul, "mul", |a: f64, b: f64| a * b, |_, b: f64| b, |a: f64, _| a);
impl_binary!(
    Div,
    div,
    "div",
    |a: f64, b: f64| a / b,
    |_, b: f64| 1.0 / b,
    |a: f64, b: f64| -a / (b * b)
);

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.push1("sub", rhs.idx, -1.0, self - rhs.val)
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.push1(
            "div",
            rhs.idx,
            -self / (rhs.val * rhs.val),
            self / rhs.val,
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push1("neg", self.idx, -1.0, -self.val)
    }
}
