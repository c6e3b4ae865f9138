//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! Operations on [`Var`] record local partial derivatives on a [`Tape`];
//! [`Tape::gradients`] replays the tape backwards to obtain the adjoint of
//! every recorded variable. The tape is used where hand-written reverse
//! passes would be error-prone (gradients of Jacobian functionals); hot
//! paths keep dedicated `f64` implementations.
//!
//! The [`Scalar`] trait abstracts over `f64` and [`Var`] so numerical
//! kernels can be written once and instantiated either way.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Records the computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [0, 0],
            partials: [0.0, 0.0],
        });
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    /// Lift a slice of values onto the tape.
    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(node);
        idx
    }

    /// Adjoints of every recorded variable with respect to `output`.
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[output.idx as usize] = 1.0;
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            adj[node.parents[0] as usize] += a * node.partials[0];
            // Self-referencing parents mark leaves; their partials are zero,
            // so the double visit above is harmless. Still skip duplicates.
            if node.parents[1] != node.parents[0] || node.partials[1] != 0.0 {
                adj[node.parents[1] as usize] += a * node.partials[1];
            }
        }
        Gradients { adj }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adj[var.idx as usize]
    }
}

/// A value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.val
    }

    fn unary(self, val: f64, partial: f64) -> Var<'t> {
        let idx = self.tape.push(Node {
            parents: [self.idx, self.idx],
            partials: [partial, 0.0],
        });
        Var {
            tape: self.tape,
            idx,
            val,
        }
    }

    fn binary(self, rhs: Var<'t>, val: f64, dl: f64, dr: f64) -> Var<'t> {
        let idx = self.tape.push(Node {
            parents: [self.idx, rhs.idx],
            partials: [dl, dr],
        });
        Var {
            tape: self.tape,
            idx,
            val,
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            self.val / rhs.val,
            1.0 / rhs.val,
            -self.val / (rhs.val * rhs.val),
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.val * rhs, rhs)
    }
}

impl<'t> Var<'t> {
    pub fn tanh(self) -> Var<'t> {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.val.exp();
        self.unary(e, e)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(self.val.sin(), self.val.cos())
    }
}

/// Differentiable scalar: implemented by `f64` and by [`Var`].
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn value(self) -> f64;
}

impl Scalar for f64 {
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn value(self) -> f64 {
        self
    }
}

impl<'t> Scalar for Var<'t> {
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn value(self) -> f64 {
        Var::value(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(4.0);
        let z = x * y + x;
        assert_eq!(z.value(), 15.0);
        let g = tape.gradients(z);
        assert_eq!(g.wrt(x), 5.0);
        assert_eq!(g.wrt(y), 3.0);
    }

    #[test]
    fn chained_nonlinearities_match_finite_differences() {
        let f = |x: f64| ((x * 2.0).tanh() + x.exp() * 0.1).sqrt();
        let x0 = 0.7;
        let tape = Tape::new();
        let x = tape.var(x0);
        let y = ((x * 2.0).tanh() + x.exp() * 0.1).sqrt();
        let g = tape.gradients(y).wrt(x);
        let h = 1e-6;
        let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        assert!((g - fd).abs() < 1e-9, "ad {g} vs fd {fd}");
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = x * x * x; // x^3
        let g = tape.gradients(y).wrt(x);
        assert!((g - 12.0).abs() < 1e-12);
    }

    #[test]
    fn division_partials() {
        let tape = Tape::new();
        let a = tape.var(1.0);
        let b = tape.var(4.0);
        let q = a / b;
        let g = tape.gradients(q);
        assert!((g.wrt(a) - 0.25).abs() < 1e-15);
        assert!((g.wrt(b) + 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_trait_is_shared_between_f64_and_var() {
        fn poly<S: Scalar>(x: S) -> S {
            (x * 0.5 + 1.0).tanh() * x + (-x).exp()
        }
        let x0 = 0.3;
        let direct = poly(x0);
        let tape = Tape::new();
        let v = tape.var(x0);
        let lifted = poly(v);
        assert_eq!(direct, lifted.value());
    }
}
