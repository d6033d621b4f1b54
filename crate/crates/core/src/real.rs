//! Scalar abstraction shared by the network code.
//!
//! Every layer is written once against [`Real`]. Running it with `f64`
//! gives the ordinary forward pass; running it with [`Dual`] carries a
//! tangent alongside each value, which yields the exact derivative of any
//! output with respect to one seeded parameter (forward-mode
//! differentiation). The gradient checks use the latter.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Mul<f64, Output = Self>
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn is_finite(self) -> bool;

    /// Row-major `c = a · b` with `a: m×k`, `b: k×n`, `c: m×n` (overwritten).
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn sigmoid(self) -> Self {
        let one = Self::from_f64(1.0);
        one / (one + (-self).exp())
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    fn softplus(self) -> Self {
        let v = self.value();
        if v > 30.0 {
            self
        } else {
            (Self::from_f64(1.0) + self.exp()).ln()
        }
    }
}

fn dgemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the slices are exactly m×k, k×n and m×n, row-major with the
    // strides given below, as asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        dgemm(m, k, n, a, b, c)
    }
}

/// Value plus first-order tangent.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }

    pub fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, s: f64) -> Dual {
        Dual::new(self.v * s, self.d * s)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual::new(self.v * inv, (self.d * o.v - self.v * o.d) * inv * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, o: Dual) {
        self.v -= o.v;
        self.d -= o.d;
    }
}

impl MulAssign for Dual {
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Real for Dual {
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, self.d / (2.0 * s))
    }
    fn is_finite(self) -> bool {
        self.v.is_finite() && self.d.is_finite()
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        let av: Vec<f64> = a.iter().map(|x| x.v).collect();
        let ad: Vec<f64> = a.iter().map(|x| x.d).collect();
        let bv: Vec<f64> = b.iter().map(|x| x.v).collect();
        let bd: Vec<f64> = b.iter().map(|x| x.d).collect();
        let mut cv = vec![0.0; m * n];
        let mut t1 = vec![0.0; m * n];
        let mut t2 = vec![0.0; m * n];
        dgemm(m, k, n, &av, &bv, &mut cv);
        dgemm(m, k, n, &ad, &bv, &mut t1);
        dgemm(m, k, n, &av, &bd, &mut t2);
        for (i, out) in c.iter_mut().enumerate() {
            *out = Dual::new(cv[i], t1[i] + t2[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_chain_rule_matches_closed_form() {
        // f(x) = sigmoid(x) * ln(1 + x^2), f'(x) computed by hand.
        let x = 0.7;
        let xd = Dual::new(x, 1.0);
        let one = Dual::constant(1.0);
        let f = xd.sigmoid() * (one + xd * xd).ln();
        let s = 1.0 / (1.0 + (-x).exp());
        let expect = s * (1.0 - s) * (1.0 + x * x).ln() + s * 2.0 * x / (1.0 + x * x);
        assert!((f.d - expect).abs() < 1e-14);
    }

    #[test]
    fn dual_gemm_matches_naive() {
        let a: Vec<Dual> = (0..6).map(|i| Dual::new(i as f64 * 0.3, (i % 2) as f64)).collect();
        let b: Vec<Dual> = (0..12).map(|i| Dual::new(1.0 - i as f64 * 0.1, 0.5)).collect();
        let mut c = vec![Dual::default(); 8];
        Dual::gemm(2, 3, 4, &a, &b, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = Dual::default();
                for p in 0..3 {
                    acc += a[i * 3 + p] * b[p * 4 + j];
                }
                assert!((acc.v - c[i * 4 + j].v).abs() < 1e-12);
                assert!((acc.d - c[i * 4 + j].d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(1000.0f64.softplus(), 1000.0);
        assert!((0.0f64.softplus() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
