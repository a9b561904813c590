//! Block-constant observables, the self-energy, and the two-body stability operator.

use crate::error::{LabError, Result};
use crate::mat2::{Mat2, C64, ONE, ZERO};
use crate::mde::{solve_mde, DensityProfile, MdePoint};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SymmetryClass {
    #[default]
    Complex,
    Real,
}

/// A block-constant observable with coefficients over `(E+, E-, F, F*)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Observable {
    pub coeffs: [C64; 4],
}

impl Observable {
    pub const fn new(e_plus: C64, e_minus: C64, f: C64, f_star: C64) -> Self {
        Observable { coeffs: [e_plus, e_minus, f, f_star] }
    }

    pub fn e_plus() -> Self {
        Observable::new(ONE, ZERO, ZERO, ZERO)
    }

    pub fn e_minus() -> Self {
        Observable::new(ZERO, ONE, ZERO, ZERO)
    }

    pub fn f() -> Self {
        Observable::new(ZERO, ZERO, ONE, ZERO)
    }

    pub fn f_star() -> Self {
        Observable::new(ZERO, ZERO, ZERO, ONE)
    }

    pub fn as_matrix2(&self) -> Mat2 {
        let [a, b, c, d] = self.coeffs;
        Mat2::new(a + b, c, d, a - b)
    }

    pub fn from_matrix2(m: &Mat2) -> Self {
        let [[p, c], [d, q]] = m.0;
        Observable::new((p + q) * 0.5, (p - q) * 0.5, c, d)
    }
}

impl Add for Observable {
    type Output = Observable;
    fn add(self, r: Observable) -> Observable {
        let mut c = self.coeffs;
        for (x, y) in c.iter_mut().zip(r.coeffs) {
            *x += y;
        }
        Observable { coeffs: c }
    }
}

impl Mul<C64> for Observable {
    type Output = Observable;
    fn mul(self, s: C64) -> Observable {
        Observable { coeffs: self.coeffs.map(|x| x * s) }
    }
}

impl From<Observable> for Mat2 {
    fn from(o: Observable) -> Mat2 {
        o.as_matrix2()
    }
}

pub fn e_minus() -> Mat2 {
    Mat2::diag(ONE, -ONE)
}

/// `S[R] = <R> E+ - <R E-> E-`, plus the `1/N` transposition terms for the real class.
pub fn self_energy(r: &Mat2, class: SymmetryClass, n: usize) -> Mat2 {
    let em = e_minus();
    let base = Mat2::identity() * r.ntrace() - em * (*r * em).ntrace();
    match class {
        SymmetryClass::Complex => base,
        SymmetryClass::Real => {
            let rt = r.transpose();
            let torsion = rt - em * rt * em;
            base + torsion * (1.0 / n as f64)
        }
    }
}

/// `B12[R] = R - M1 S[R] M2` with the complex-class self-energy.
pub fn apply_b12(m1: &Mat2, m2: &Mat2, r: &Mat2) -> Mat2 {
    *r - *m1 * self_energy(r, SymmetryClass::Complex, 1) * *m2
}

/// The 4×4 matrix of `R ↦ B12[R]` in the orthonormal entry basis of 2×2 matrices.
pub fn b12_matrix4(m1: &Mat2, m2: &Mat2) -> faer::Mat<C64> {
    let basis = |k: usize| {
        let mut e = Mat2::zero();
        e.0[k / 2][k % 2] = ONE;
        e
    };
    let cols: Vec<Mat2> = (0..4).map(|k| apply_b12(m1, m2, &basis(k))).collect();
    faer::Mat::from_fn(4, 4, |i, j| cols[j].0[i / 2][i % 2])
}

/// Explicit eigenvalues `(beta_+, beta_-)`; the other two eigenvalues of `B12` equal 1.
pub fn beta_pm_from(p1: &MdePoint, p2: &MdePoint) -> (C64, C64) {
    let zz = p1.z * p2.z.conj();
    let uu = p1.u * p2.u;
    let mm = p1.m * p1.m * p2.m * p2.m;
    let root = (mm - zz.im * zz.im * uu * uu).sqrt();
    let base = ONE - zz.re * uu;
    (base + root, base - root)
}

pub fn beta_pm(z1: C64, z2: C64, w1: C64, w2: C64) -> Result<(C64, C64)> {
    Ok(beta_pm_from(&solve_mde(z1, w1)?, &solve_mde(z2, w2)?))
}

fn beta_star(p1: &MdePoint, p2: &MdePoint) -> f64 {
    let (bp, bm) = beta_pm_from(p1, p2);
    bp.norm().min(bm.norm())
}

fn conjugation_choices(p1: &MdePoint, p2: &MdePoint) -> [(MdePoint, MdePoint); 4] {
    [(*p1, *p2), (p1.conj_w(), *p2), (*p1, p2.conj_w()), (p1.conj_w(), p2.conj_w())]
}

/// `min` over the four conjugation choices of `beta_* ∧ 1`.
pub fn beta_hat_from(p1: &MdePoint, p2: &MdePoint) -> f64 {
    conjugation_choices(p1, p2).iter().map(|(a, b)| beta_star(a, b).min(1.0)).fold(1.0, f64::min)
}

/// Operator-norm variant: smallest singular value of the 4×4 representation, minimized over
/// the conjugation choices.
pub fn beta_hat_opnorm_from(p1: &MdePoint, p2: &MdePoint) -> Result<f64> {
    let mut best = 1.0f64;
    for (a, b) in conjugation_choices(p1, p2) {
        let sv = b12_matrix4(&a.matrix(), &b.matrix())
            .singular_values()
            .map_err(|e| LabError::Numerical(format!("4x4 singular values failed: {e:?}")))?;
        best = best.min(sv.iter().copied().fold(f64::INFINITY, f64::min));
    }
    Ok(best)
}

pub fn beta_hat(z1: C64, z2: C64, w1: C64, w2: C64) -> Result<f64> {
    Ok(beta_hat_from(&solve_mde(z1, w1)?, &solve_mde(z2, w2)?))
}

/// The full two-body state at `(z1, w1; z2, w2)`.
#[derive(Clone, Copy, Debug)]
pub struct StabilityState {
    pub p1: MdePoint,
    pub p2: MdePoint,
    pub beta_plus: C64,
    pub beta_minus: C64,
    pub beta_star: f64,
    pub beta_hat: f64,
    pub gamma: f64,
    pub lt: f64,
}

impl StabilityState {
    pub fn new(z1: C64, z2: C64, w1: C64, w2: C64) -> Result<Self> {
        let p1 = solve_mde(z1, w1)?;
        let p2 = solve_mde(z2, w2)?;
        let (beta_plus, beta_minus) = beta_pm_from(&p1, &p2);
        let g = gamma_from(&p1, &p2);
        Ok(StabilityState {
            p1,
            p2,
            beta_plus,
            beta_minus,
            beta_star: beta_plus.norm().min(beta_minus.norm()),
            beta_hat: beta_hat_from(&p1, &p2),
            gamma: g.gamma,
            lt: g.lt,
        })
    }

    pub fn apply(&self, r: &Observable) -> Observable {
        stability_apply(r, self)
    }
}

pub fn stability_apply(r: &Observable, state: &StabilityState) -> Observable {
    Observable::from_matrix2(&apply_b12(&state.p1.matrix(), &state.p2.matrix(), &r.as_matrix2()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaControl {
    pub gamma: f64,
    /// The signed linear term; `gamma` uses its absolute value.
    pub lt: f64,
}

fn sgn0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn gamma_from(p1: &MdePoint, p2: &MdePoint) -> GammaControl {
    let (e1, e2) = (p1.w.re, p2.w.re);
    let (eta1, eta2) = (p1.w.im.abs(), p2.w.im.abs());
    let ratio = p1.u.im / p1.m.im;
    let dz = p1.z - p2.z;
    let lt = e1.abs() - e2.abs() - sgn0(e1) * ratio * (p1.z.conj() * dz).re;
    let de = e1.abs() - e2.abs();
    GammaControl { gamma: dz.norm_sqr() + lt.abs() + de * de + eta1 + eta2, lt }
}

/// `gamma` and `LT`; a positive `kappa` enforces bulk membership of both energies.
pub fn gamma_control(z1: C64, z2: C64, w1: C64, w2: C64, kappa: f64) -> Result<GammaControl> {
    if kappa > 0.0 {
        for (z, w) in [(z1, w1), (z2, w2)] {
            if !DensityProfile::new(z).in_bulk(w.re, kappa)? {
                return Err(LabError::Domain(format!("E = {} is outside the {kappa}-bulk of rho at z = {z}", w.re)));
            }
        }
    }
    Ok(gamma_from(&solve_mde(z1, w1)?, &solve_mde(z2, w2)?))
}

/// Real-class control parameter: minimum over conjugations of `z1` and `z2`.
pub fn gamma_hat(z1: C64, z2: C64, w1: C64, w2: C64) -> Result<f64> {
    let mut best = f64::INFINITY;
    for a in [z1, z1.conj()] {
        for b in [z2, z2.conj()] {
            best = best.min(gamma_control(a, b, w1, w2, 0.0)?.gamma);
        }
    }
    Ok(best)
}
