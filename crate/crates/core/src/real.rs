//! Scalar abstraction shared by every chart and mixer.
//!
//! All constructions in this crate are written once against [`Real`]. With
//! `f64` they are the plain numerical maps; with [`Dual`] they carry a
//! forward-mode tangent, which is how chart Jacobians and end-to-end
//! gradients through stacks of layers are computed.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar field used by the generic constructions.
pub trait Real:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn tanh(&self) -> Self;
    fn sigmoid(&self) -> Self;

    fn scale(&self, k: f64) -> Self {
        self.clone() * Self::constant(k)
    }

    fn zero() -> Self {
        Self::constant(0.0)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

impl Real for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    #[inline]
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    #[inline]
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    #[inline]
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    #[inline]
    fn sigmoid(&self) -> Self {
        sigmoid(*self)
    }
    #[inline]
    fn scale(&self, k: f64) -> Self {
        self * k
    }
}

/// Larger of two values; ties keep `a`.
pub fn max_of<S: Real>(a: S, b: S) -> S {
    if b.value() > a.value() {
        b
    } else {
        a
    }
}

/// Smaller of two values; ties keep `a`.
pub fn min_of<S: Real>(a: S, b: S) -> S {
    if b.value() < a.value() {
        b
    } else {
        a
    }
}

/// Clamp to `[0, 1]`. Outside the open interval the result is constant, so the
/// derivative there is zero.
pub fn clip_unit<S: Real>(t: S) -> S {
    let v = t.value();
    if v <= 0.0 {
        S::constant(0.0)
    } else if v >= 1.0 {
        S::constant(1.0)
    } else {
        t
    }
}

/// Numerically stable softmax.
pub fn softmax<S: Real>(logits: &[S]) -> Vec<S> {
    let Some(max) = logits.iter().map(Real::value).reduce(f64::max) else {
        return Vec::new();
    };
    let exps: Vec<S> = logits
        .iter()
        .map(|l| (l.clone() - S::constant(max)).exp())
        .collect();
    let total = sum(exps.iter().cloned());
    exps.into_iter().map(|e| e / total.clone()).collect()
}

/// Sum in iteration order.
pub fn sum<S: Real>(items: impl IntoIterator<Item = S>) -> S {
    items
        .into_iter()
        .reduce(|a, b| a + b)
        .unwrap_or_else(S::zero)
}

/// Forward-mode dual number with a dense tangent vector.
///
/// An empty tangent stands for the zero vector, so constants allocate nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub tangent: Vec<f64>,
}

impl Dual {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            tangent: Vec::new(),
        }
    }

    /// The `index`-th of `dim` independent variables.
    pub fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut tangent = vec![0.0; dim];
        tangent[index] = 1.0;
        Self { value, tangent }
    }

    /// Seeds one variable per entry of `values`.
    pub fn variables(values: &[f64]) -> Vec<Self> {
        let dim = values.len();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Self::variable(v, i, dim))
            .collect()
    }

    /// Tangent component `i` (zero when the tangent is implicit).
    pub fn d(&self, i: usize) -> f64 {
        self.tangent.get(i).copied().unwrap_or(0.0)
    }

    fn chain(&self, value: f64, derivative: f64) -> Self {
        Self {
            value,
            tangent: self.tangent.iter().map(|g| g * derivative).collect(),
        }
    }
}

/// `a * ta + b * tb` with implicit zeros.
fn combine(ta: &[f64], a: f64, tb: &[f64], b: f64) -> Vec<f64> {
    let len = ta.len().max(tb.len());
    (0..len)
        .map(|i| {
            let x = ta.get(i).copied().unwrap_or(0.0);
            let y = tb.get(i).copied().unwrap_or(0.0);
            a * x + b * y
        })
        .collect()
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        let tangent = if rhs.tangent.is_empty() {
            self.tangent
        } else if self.tangent.is_empty() {
            rhs.tangent
        } else {
            combine(&self.tangent, 1.0, &rhs.tangent, 1.0)
        };
        Dual {
            value: self.value + rhs.value,
            tangent,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        let tangent = if rhs.tangent.is_empty() {
            self.tangent
        } else {
            combine(&self.tangent, 1.0, &rhs.tangent, -1.0)
        };
        Dual {
            value: self.value - rhs.value,
            tangent,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value * rhs.value,
            tangent: combine(&self.tangent, rhs.value, &rhs.tangent, self.value),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let value = self.value / rhs.value;
        let inv = 1.0 / rhs.value;
        Dual {
            value,
            tangent: combine(&self.tangent, inv, &rhs.tangent, -value * inv),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.chain(-self.value, -1.0)
    }
}

impl Real for Dual {
    fn constant(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    fn ln(&self) -> Self {
        self.chain(self.value.ln(), 1.0 / self.value)
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn sigmoid(&self) -> Self {
        let s = sigmoid(self.value);
        self.chain(s, s * (1.0 - s))
    }
    fn scale(&self, k: f64) -> Self {
        self.chain(self.value * k, k)
    }
}
