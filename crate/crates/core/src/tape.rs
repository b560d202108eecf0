//! Reverse-mode scalar differentiation with a first-class stop-gradient.
//!
//! A [`Tape`] is an append-only arena of nodes. Every [`Var`] is a handle into
//! one tape together with its forward value. Composite nodes record their
//! parents and the local partial derivatives at creation time, so a backward
//! pass is a single reverse sweep over the arena.
//!
//! Stop-gradient nodes (`sg`) copy the parent value and record no parents, so
//! nothing flows back through them. This is what lets the estimators be written
//! as literal formulas such as `r = exp(log_pi - sg(log_pi))`.
//!
//! Domain violations (log of a non-positive number, division by zero, ...) do
//! not panic. The first one is remembered on the tape and reported by
//! [`Tape::check`] and [`Tape::grad`].

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::TapeError;

/// Operation tag of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Param,
    Const,
    StopGradient,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Ln,
    Exp,
    Sqrt,
    Abs,
    Powf,
    Sign,
    Sum,
    LogSumExp,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    value: f64,
    op: Op,
    start: usize,
    len: usize,
}

#[derive(Default)]
struct Arena {
    nodes: Vec<Node>,
    // (parent index, local partial) pairs; node i owns parents[start..start + len]
    parents: Vec<(usize, f64)>,
    error: Option<TapeError>,
}

/// Expression graph for one evaluation episode.
///
/// Interior mutability keeps the `Var` operators ergonomic; a tape is confined to
/// one thread (`!Sync`), independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    arena: RefCell<Arena>,
}

/// A scalar on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("value", &self.value)
            .finish()
    }
}

/// Partial derivatives of one output with respect to a list of handles,
/// in the order the handles were requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Gradient(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &Gradient) {
        assert_eq!(self.0.len(), other.0.len(), "gradient length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for Gradient {
    fn from(v: Vec<f64>) -> Self {
        Gradient(v)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.arena.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, op: Op, parents: &[(usize, f64)]) -> Var<'_> {
        let mut arena = self.arena.borrow_mut();
        let start = arena.parents.len();
        arena.parents.extend_from_slice(parents);
        let index = arena.nodes.len();
        arena.nodes.push(Node {
            value,
            op,
            start,
            len: parents.len(),
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn push_iter<I>(&self, value: f64, op: Op, parents: I) -> Var<'_>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut arena = self.arena.borrow_mut();
        let start = arena.parents.len();
        arena.parents.extend(parents);
        let len = arena.parents.len() - start;
        let index = arena.nodes.len();
        arena.nodes.push(Node {
            value,
            op,
            start,
            len,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn domain_error(&self, op: &'static str, value: f64) {
        let mut arena = self.arena.borrow_mut();
        if arena.error.is_none() {
            arena.error = Some(TapeError::Domain { op, value });
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: f64) -> Var<'_> {
        self.push(value, Op::Param, &[])
    }

    pub fn params(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.param(v)).collect()
    }

    /// A constant leaf (never receives gradient).
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(value, Op::Const, &[])
    }

    /// Sum of many terms as one node (keeps long sums shallow).
    pub fn sum(&self, terms: &[Var<'_>]) -> Var<'_> {
        let mut value = 0.0;
        for t in terms {
            self.assert_same(t);
            value += t.value;
        }
        self.push_iter(value, Op::Sum, terms.iter().map(|t| (t.index, 1.0)))
    }

    /// `log Σ exp(x_i)`, max-shifted. Partials are the softmax weights.
    pub fn log_sum_exp(&self, terms: &[Var<'_>]) -> Var<'_> {
        if terms.is_empty() {
            self.domain_error("log_sum_exp", f64::NAN);
            return self.push(f64::NEG_INFINITY, Op::LogSumExp, &[]);
        }
        let max = terms
            .iter()
            .map(|t| t.value)
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = terms.iter().map(|t| (t.value - max).exp()).collect();
        let total: f64 = shifted.iter().sum();
        let value = max + total.ln();
        self.push_iter(
            value,
            Op::LogSumExp,
            terms
                .iter()
                .zip(&shifted)
                .map(|(t, e)| (t.index, e / total)),
        )
    }

    fn assert_same(&self, v: &Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variables from different tapes cannot be combined"
        );
    }

    /// First recorded domain violation, if any.
    pub fn check(&self) -> Result<(), TapeError> {
        match &self.arena.borrow().error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Value stored in the arena for `v`.
    pub fn recorded_value(&self, v: Var<'_>) -> f64 {
        self.arena.borrow().nodes[v.index].value
    }

    pub fn op_of(&self, v: Var<'_>) -> Op {
        self.arena.borrow().nodes[v.index].op
    }

    /// Adjoints of every node up to and including `output`.
    fn adjoints(&self, output: Var<'_>) -> Result<Vec<f64>, TapeError> {
        self.assert_same(&output);
        self.check()?;
        let arena = self.arena.borrow();
        let mut adj = vec![0.0; output.index + 1];
        adj[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = arena.nodes[i];
            for &(parent, partial) in &arena.parents[node.start..node.start + node.len] {
                adj[parent] += a * partial;
            }
        }
        Ok(adj)
    }

    /// d output / d wrt_j for every requested handle.
    ///
    /// Handles created after `output` (or on another tape) cannot influence it
    /// and get an exact zero.
    pub fn grad(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Gradient, TapeError> {
        let adj = self.adjoints(output)?;
        Ok(Gradient(
            wrt.iter()
                .map(|w| {
                    if std::ptr::eq(self, w.tape) && w.index < adj.len() {
                        adj[w.index]
                    } else {
                        0.0
                    }
                })
                .collect(),
        ))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, op: Op, partial: f64) -> Var<'t> {
        self.tape.push(value, op, &[(self.index, partial)])
    }

    fn binary(self, other: Var<'t>, value: f64, op: Op, da: f64, db: f64) -> Var<'t> {
        self.tape.assert_same(&other);
        self.tape
            .push(value, op, &[(self.index, da), (other.index, db)])
    }

    /// Stop-gradient: same value, no backward flow.
    pub fn sg(self) -> Var<'t> {
        self.tape.push(self.value, Op::StopGradient, &[])
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value;
        if !(x > 0.0) {
            self.tape.domain_error("ln", x);
        }
        self.unary(x.ln(), Op::Ln, 1.0 / x)
    }

    pub fn exp(self) -> Var<'t> {
        let y = self.value.exp();
        self.unary(y, Op::Exp, y)
    }

    pub fn sqrt(self) -> Var<'t> {
        let x = self.value;
        if !(x > 0.0) {
            self.tape.domain_error("sqrt", x);
        }
        let y = x.sqrt();
        self.unary(y, Op::Sqrt, 0.5 / y)
    }

    /// |x| with d|x|/dx = sign(x) and sign(0) = 0.
    pub fn abs(self) -> Var<'t> {
        let x = self.value;
        self.unary(x.abs(), Op::Abs, sign(x))
    }

    /// sign(x) in {-1, 0, 1}; piecewise constant, zero derivative.
    pub fn signum(self) -> Var<'t> {
        self.unary(sign(self.value), Op::Sign, 0.0)
    }

    /// x^c for a constant exponent. Negative bases need an integer exponent.
    pub fn powf(self, c: f64) -> Var<'t> {
        let x = self.value;
        if x < 0.0 && c.fract() != 0.0 {
            self.tape.domain_error("powf", x);
        }
        let partial = if c == 0.0 { 0.0 } else { c * x.powf(c - 1.0) };
        self.unary(x.powf(c), Op::Powf, partial)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }
}

/// sign with sign(0) = 0.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, Op::Add, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, Op::Sub, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, Op::Mul, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let b = rhs.value;
        if b == 0.0 {
            self.tape.domain_error("div", b);
        }
        self.binary(rhs, self.value / b, Op::Div, 1.0 / b, -self.value / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, Op::Neg, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, Op::Add, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, Op::Sub, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, Op::Mul, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            self.tape.domain_error("div", rhs);
        }
        self.unary(self.value / rhs, Op::Div, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(self - rhs.value, Op::Sub, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let b = rhs.value;
        if b == 0.0 {
            rhs.tape.domain_error("div", b);
        }
        rhs.unary(self / b, Op::Div, -self / (b * b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let t = Tape::new();
        let x = t.param(3.0);
        let y = x * x;
        assert_eq!(t.grad(y, &[x]).unwrap().0, vec![6.0]);
    }

    #[test]
    fn log_derivative() {
        let t = Tape::new();
        let x = t.param(2.0);
        assert_eq!(t.grad(x.ln(), &[x]).unwrap().0, vec![0.5]);
    }

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let x = t.param(2.0);
        let y = t.param(5.0);
        let g = t.grad(x * y, &[x, y]).unwrap();
        assert_eq!(g.0, vec![5.0, 2.0]);
    }

    #[test]
    fn stop_gradient_passes_value_blocks_gradient() {
        let t = Tape::new();
        let five = t.param(5.0);
        assert_eq!(five.sg().value(), 5.0);
        let x = t.param(1.7);
        assert_eq!(t.grad(x.sg(), &[x]).unwrap().0, vec![0.0]);

        let x = t.param(2.0);
        let g = t.grad(x / x.sg(), &[x]).unwrap();
        assert_eq!(g.0, vec![0.5]);
        assert_eq!((x / x.sg()).value(), 1.0);
    }

    #[test]
    fn backward_examples() {
        let t = Tape::new();
        let x = t.param(2.0);
        assert_eq!(t.grad(x * x.sg(), &[x]).unwrap().0, vec![2.0]);

        let x = t.param(3.0);
        let g = t.grad((x / x.sg()).ln(), &[x]).unwrap();
        assert!((g.0[0] - 1.0 / 3.0).abs() < 1e-15);

        // sg(w) * log(w), w = exp(u): d/du = sg(w) * 1
        let u = t.param(0.5);
        let w = u.exp();
        let y = w.sg() * w.ln();
        let g = t.grad(y, &[u]).unwrap();
        assert!((g.0[0] - 1.648_721_270_700_128).abs() < 1e-12);
    }

    #[test]
    fn abs_and_sign_at_zero() {
        let t = Tape::new();
        let x = t.param(0.0);
        assert_eq!(t.grad(x.abs(), &[x]).unwrap().0, vec![0.0]);
        assert_eq!(x.signum().value(), 0.0);
        let y = t.param(-2.0);
        assert_eq!(t.grad(y.abs(), &[y]).unwrap().0, vec![-1.0]);
    }

    #[test]
    fn domain_errors_name_the_op() {
        let t = Tape::new();
        let x = t.param(-1.0);
        let y = x.ln();
        match t.grad(y, &[x]) {
            Err(TapeError::Domain { op, .. }) => assert_eq!(op, "ln"),
            other => panic!("expected domain error, got {other:?}"),
        }

        let t = Tape::new();
        let x = t.param(1.0);
        let z = t.constant(0.0);
        let _ = x / z;
        assert!(matches!(t.check(), Err(TapeError::Domain { op: "div", .. })));

        let t = Tape::new();
        let x = t.param(0.0);
        let _ = x.sqrt();
        assert!(matches!(t.check(), Err(TapeError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn unreachable_and_foreign_handles_get_zero() {
        let t = Tape::new();
        let x = t.param(1.0);
        let y = t.param(2.0);
        let out = x * 3.0;
        let later = t.param(4.0);
        let other = Tape::new();
        let foreign = other.param(1.0);
        let g = t.grad(out, &[x, y, later, foreign]).unwrap();
        assert_eq!(g.0, vec![3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_sum_exp_is_shift_stable() {
        let t = Tape::new();
        let xs = t.params(&[1000.0, 1000.0]);
        let l = t.log_sum_exp(&xs);
        assert!((l.value() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let g = t.grad(l, &xs).unwrap();
        assert_eq!(g.0, vec![0.5, 0.5]);
    }

    #[test]
    fn sum_node() {
        let t = Tape::new();
        let xs = t.params(&[1.0, 2.0, 3.0]);
        let sq: Vec<_> = xs.iter().map(|x| *x * *x).collect();
        let s = t.sum(&sq);
        assert_eq!(s.value(), 14.0);
        assert_eq!(t.grad(s, &xs).unwrap().0, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn op_tags_recorded() {
        let t = Tape::new();
        let x = t.param(1.0);
        assert_eq!(t.op_of(x), Op::Param);
        assert_eq!(t.op_of(x.sg()), Op::StopGradient);
        assert_eq!(t.op_of(x.exp()), Op::Exp);
    }
}
