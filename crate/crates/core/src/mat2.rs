//! Dense 2×2 complex matrices, the carrier for block-constant observables.

use num_complex::Complex64;
use std::ops::{Add, Mul, Neg, Sub};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Mat2(pub [[C64; 2]; 2]);

impl Mat2 {
    pub const fn new(a: C64, b: C64, c: C64, d: C64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    pub fn identity() -> Self {
        Mat2::new(ONE, ZERO, ZERO, ONE)
    }

    pub fn zero() -> Self {
        Mat2::default()
    }

    pub fn diag(a: C64, d: C64) -> Self {
        Mat2::new(a, ZERO, ZERO, d)
    }

    /// `<A> = tr(A)/2`.
    pub fn ntrace(&self) -> C64 {
        (self.0[0][0] + self.0[1][1]) * 0.5
    }

    pub fn det(&self) -> C64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn transpose(&self) -> Self {
        Mat2::new(self.0[0][0], self.0[1][0], self.0[0][1], self.0[1][1])
    }

    pub fn adjoint(&self) -> Self {
        let t = self.transpose();
        t.map(|x| x.conj())
    }

    pub fn scale(&self, s: C64) -> Self {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Mat2::new(f(self.0[0][0]), f(self.0[0][1]), f(self.0[1][0]), f(self.0[1][1]))
    }

    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d.norm() == 0.0 {
            return None;
        }
        Some(Mat2::new(self.0[1][1], -self.0[0][1], -self.0[1][0], self.0[0][0]).scale(1.0 / d))
    }

    /// Frobenius norm.
    pub fn norm_fro(&self) -> f64 {
        self.0.iter().flatten().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Spectral (operator) norm.
    pub fn norm_op(&self) -> f64 {
        // largest eigenvalue of A*A
        let h = self.adjoint() * *self;
        let a = h.0[0][0].re;
        let d = h.0[1][1].re;
        let b = h.0[0][1].norm();
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        (mid + rad).max(0.0).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat2) -> f64 {
        (*self - *other).0.iter().flatten().map(|x| x.norm()).fold(0.0, f64::max)
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, r: Mat2) -> Mat2 {
        let a = &self.0;
        let b = &r.0;
        Mat2::new(a[0][0] + b[0][0], a[0][1] + b[0][1], a[1][0] + b[1][0], a[1][1] + b[1][1])
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, r: Mat2) -> Mat2 {
        self + (-r)
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    fn neg(self) -> Mat2 {
        self.map(|x| -x)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, r: Mat2) -> Mat2 {
        let a = &self.0;
        let b = &r.0;
        Mat2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

impl Mul<C64> for Mat2 {
    type Output = Mat2;
    fn mul(self, s: C64) -> Mat2 {
        self.scale(s)
    }
}

impl Mul<f64> for Mat2 {
    type Output = Mat2;
    fn mul(self, s: f64) -> Mat2 {
        self.map(|x| x * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_norms() {
        let a = Mat2::new(C64::new(1.0, 2.0), C64::new(0.5, 0.0), C64::new(-1.0, 1.0), C64::new(3.0, 0.0));
        let p = a * a.inverse().unwrap();
        assert!(p.max_abs_diff(&Mat2::identity()) < 1e-14);
        let d = Mat2::diag(C64::new(3.0, 0.0), C64::new(0.0, -4.0));
        assert!((d.norm_op() - 4.0).abs() < 1e-14);
        assert!((d.norm_fro() - 5.0).abs() < 1e-14);
        assert_eq!(d.ntrace(), C64::new(1.5, -2.0));
    }
}
