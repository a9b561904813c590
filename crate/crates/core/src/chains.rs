//! Deterministic approximations of resolvent chains and the covariance predictors.

use crate::error::{LabError, Result};
use crate::girko::TestFunction;
use crate::mat2::{Mat2, C64, ONE};
use crate::mde::{solve_mde, MdePoint};
use crate::quad::{integrate, integrate_2d, QuadOptions};
use crate::stability::{e_minus, self_energy, Observable, SymmetryClass};
use std::f64::consts::PI;

/// Smallest accepted `|det P|` in the two-body inversion.
pub const P_DET_TOL: f64 = 1e-14;
/// Longest supported chain.
pub const MAX_CHAIN_ORDER: usize = 10;
/// Smallest accepted `|D|` in the covariance kernel.
pub const LOG_KERNEL_TOL: f64 = 1e-12;

/// Solves `X - M1 S[X] M2 = R` through the 2×2 system for `(<X>, <X E->)`.
pub fn stability_inverse(m1: &Mat2, m2: &Mat2, r: &Mat2) -> Result<Mat2> {
    let em = e_minus();
    let p11 = ONE - (*m1 * *m2).ntrace();
    let p12 = (*m1 * em * *m2).ntrace();
    let p21 = -(*m1 * *m2 * em).ntrace();
    let p22 = ONE + (*m1 * em * *m2 * em).ntrace();
    let det = p11 * p22 - p12 * p21;
    if det.norm() <= P_DET_TOL {
        return Err(LabError::StabilityDegenerate { det: det.norm() });
    }
    let b1 = r.ntrace();
    let b2 = (*r * em).ntrace();
    let x1 = (p22 * b1 - p12 * b2) / det;
    let x2 = (p11 * b2 - p21 * b1) / det;
    let s = Mat2::identity() * x1 - em * x2;
    Ok(*r + *m1 * s * *m2)
}

/// `M12^B = B12^{-1}[M1 B M2]` from solved points.
pub fn m12_from(p1: &MdePoint, p2: &MdePoint, b: &Mat2) -> Result<Mat2> {
    let (m1, m2) = (p1.matrix(), p2.matrix());
    stability_inverse(&m1, &m2, &(m1 * *b * m2))
}

pub fn m12(b: &Observable, z1: C64, z2: C64, w1: C64, w2: C64) -> Result<Mat2> {
    m12_from(&solve_mde(z1, w1)?, &solve_mde(z2, w2)?, &b.as_matrix2())
}

/// `A = (1 - <M^2>)^{-1} M`.
pub fn a_matrix(p: &MdePoint) -> Mat2 {
    p.matrix() * (ONE / (ONE - p.trace_m2))
}

#[derive(Clone, Debug)]
pub struct ChainApprox {
    pub order: usize,
    pub params: Vec<(C64, C64)>,
    pub observables: Vec<Observable>,
    pub value: Mat2,
}

/// Deterministic approximation of `G1 B1 G2 ... B_{k-1} Gk` from solved points.
pub fn chain_from_points(points: &[MdePoint], observables: &[Mat2]) -> Result<Mat2> {
    let k = points.len();
    if k == 0 || observables.len() + 1 != k {
        return Err(LabError::Domain(format!(
            "a chain of {k} resolvents needs {} observables, got {}",
            k.saturating_sub(1),
            observables.len()
        )));
    }
    if k > MAX_CHAIN_ORDER {
        return Err(LabError::Domain(format!("chain order {k} exceeds {MAX_CHAIN_ORDER}")));
    }
    let ms: Vec<Mat2> = points.iter().map(|p| p.matrix()).collect();
    // table[i][j] = M_[i..=j]
    let mut table = vec![vec![Mat2::zero(); k]; k];
    for i in 0..k {
        table[i][i] = ms[i];
    }
    for len in 1..k {
        for i in 0..k - len {
            let j = i + len;
            let mut rhs = ms[i] * observables[i] * table[i + 1][j];
            for l in i + 1..j {
                rhs = rhs + ms[i] * self_energy(&table[i][l], SymmetryClass::Complex, 1) * table[l][j];
            }
            table[i][j] = stability_inverse(&ms[i], &ms[j], &rhs)?;
        }
    }
    Ok(table[0][k - 1])
}

pub fn m_chain(params: &[(C64, C64)], observables: &[Observable]) -> Result<ChainApprox> {
    let points: Vec<MdePoint> = params.iter().map(|&(z, w)| solve_mde(z, w)).collect::<Result<_>>()?;
    let obs: Vec<Mat2> = observables.iter().map(Observable::as_matrix2).collect();
    let value = chain_from_points(&points, &obs)?;
    Ok(ChainApprox { order: params.len(), params: params.to_vec(), observables: observables.to_vec(), value })
}

/// `D = 1 + (u1 u2 |z1||z2|)^2 - m1^2 m2^2 - 2 u1 u2 Re(z1 conj z2)`.
pub fn cov_kernel(p1: &MdePoint, p2: &MdePoint) -> C64 {
    let zz = p1.z.norm() * p2.z.norm();
    let uu = p1.u * p2.u;
    let re = (p1.z * p2.z.conj()).re;
    ONE + uu * uu * zz * zz - p1.m * p1.m * p2.m * p2.m - 2.0 * uu * re
}

/// `V12 = -1/2 d_{w1} d_{w2} log D` by the chain rule.
pub fn v12_from(p1: &MdePoint, p2: &MdePoint) -> Result<C64> {
    let d = cov_kernel(p1, p2);
    if d.norm() <= LOG_KERNEL_TOL {
        return Err(LabError::LogSingularity { value: d.norm() });
    }
    let zz2 = p1.z.norm_sqr() * p2.z.norm_sqr();
    let re = (p1.z * p2.z.conj()).re;
    let (m1, u1, m2, u2) = (p1.m, p1.u, p2.m, p2.u);
    let (dm1, du1, dm2, du2) = (p1.dm_dw, p1.du_dw, p2.dm_dw, p2.du_dw);
    let d_m1 = -2.0 * m1 * m2 * m2;
    let d_u1 = 2.0 * u1 * u2 * u2 * zz2 - 2.0 * u2 * re;
    let d_m2 = -2.0 * m1 * m1 * m2;
    let d_u2 = 2.0 * u1 * u1 * u2 * zz2 - 2.0 * u1 * re;
    let d1 = d_m1 * dm1 + d_u1 * du1;
    let d2 = d_m2 * dm2 + d_u2 * du2;
    let d_m1m2 = -4.0 * m1 * m2;
    let d_u1u2 = 4.0 * u1 * u2 * zz2 - 2.0 * re;
    let d12 = d_m1m2 * dm1 * dm2 + d_u1u2 * du1 * du2;
    Ok(-0.5 * (d12 * d - d1 * d2) / (d * d))
}

pub fn v12(z1: C64, z2: C64, w1: C64, w2: C64) -> Result<C64> {
    v12_from(&solve_mde(z1, w1)?, &solve_mde(z2, w2)?)
}

/// Nested central differences of `-1/2 log D`, Richardson-extrapolated from steps `h` and `h/2`
/// with `h = 0.02 min(eta, 1)` in each variable.
pub fn v12_finite_difference(z1: C64, z2: C64, w1: C64, w2: C64) -> Result<C64> {
    let h1 = 0.02 * w1.im.abs().min(1.0);
    let h2 = 0.02 * w2.im.abs().min(1.0);
    let d = |s1: f64, s2: f64| -> Result<C64> {
        Ok(cov_kernel(&solve_mde(z1, w1 + s1 * h1)?, &solve_mde(z2, w2 + s2 * h2)?))
    };
    let mixed = |k: f64| -> Result<C64> {
        let ratio = (d(k, k)? * d(-k, -k)?) / (d(k, -k)? * d(-k, k)?);
        Ok(-0.5 * ratio.ln() / (4.0 * k * k * h1 * h2))
    };
    let (coarse, fine) = (mixed(1.0)?, mixed(0.5)?);
    Ok((4.0 * fine - coarse) / 3.0)
}

/// `U = -(1/sqrt 2) d_w m^2`.
pub fn u_coefficient(p: &MdePoint) -> C64 {
    -std::f64::consts::SQRT_2 * p.m * p.dm_dw
}

#[derive(Clone, Copy, Debug)]
pub struct CovPredictor {
    pub z1: C64,
    pub z2: C64,
    pub w1: C64,
    pub w2: C64,
    /// `V12`, or `V12(z1, z2) + V12(z1, conj z2)` for the real class.
    pub v12: C64,
    pub u1: C64,
    pub u2: C64,
    pub kappa4: f64,
    pub class: SymmetryClass,
    pub n: usize,
    pub value: C64,
}

/// Leading term `(V + kappa4 U1 U2) / (2 N^2)` of the resolvent-trace covariance.
pub fn cov_predict(
    z1: C64,
    z2: C64,
    w1: C64,
    w2: C64,
    kappa4: f64,
    class: SymmetryClass,
    n: usize,
) -> Result<CovPredictor> {
    let p1 = solve_mde(z1, w1)?;
    let p2 = solve_mde(z2, w2)?;
    let mut v = v12_from(&p1, &p2)?;
    if class == SymmetryClass::Real {
        v += v12_from(&p1, &p2.conj_z())?;
    }
    let (u1, u2) = (u_coefficient(&p1), u_coefficient(&p2));
    let n2 = (n as f64) * (n as f64);
    let value = (v + kappa4 * u1 * u2) / (2.0 * n2);
    Ok(CovPredictor { z1, z2, w1, w2, v12: v, u1, u2, kappa4, class, n, value })
}

/// Limiting variance of a smooth linear statistic.
pub fn vf_functional(f: &dyn TestFunction, kappa4: f64) -> Result<f64> {
    let opts = QuadOptions { abs_tol: 1e-10, rel_tol: 1e-9, max_intervals: 400 };
    let polar = |r: f64, th: f64| C64::from_polar(r, th);
    let grad2 = integrate_2d(
        |r, th| {
            let (gx, gy) = f.gradient(polar(r, th));
            (gx * gx + gy * gy) * r
        },
        (0.0, 1.0),
        (0.0, 2.0 * PI),
        opts,
    )?;
    let mut v = grad2 / (4.0 * PI * PI);
    if kappa4 != 0.0 {
        let bulk = integrate_2d(|r, th| f.value(polar(r, th)) * r, (0.0, 1.0), (0.0, 2.0 * PI), opts)?;
        let boundary = integrate(|th| f.value(polar(1.0, th)), 0.0, 2.0 * PI, opts)?;
        let gap = bulk / PI - boundary / (2.0 * PI);
        v += kappa4 * gap * gap;
    }
    Ok(v)
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Right-hand side of the even `E-` trace identity in terms of `<G^{s+1}>`, `s < n`.
pub fn e_minus_identity_rhs(traces: &[C64], n: usize, w: C64) -> Result<C64> {
    if n == 0 || traces.len() < n {
        return Err(LabError::Domain(format!("need at least n = {n} >= 1 traces, got {}", traces.len())));
    }
    let mut acc = C64::new(0.0, 0.0);
    for (s, t) in traces.iter().take(n).enumerate() {
        let sign = if s % 2 == 0 { -1.0 } else { 1.0 };
        let c = binom(2 * n - 2 - s, n - 1);
        acc += sign * c * *t / (2.0 * w).powu((2 * n - s - 1) as u32);
    }
    Ok(2.0 * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat2::{I, ZERO};
    use crate::stability::apply_b12;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn f_observable_passes_through() {
        let (w1, w2) = (c(0.2, 0.1), c(-0.4, 0.3));
        let p1 = solve_mde(ZERO, w1).unwrap();
        let p2 = solve_mde(ZERO, w2).unwrap();
        let exact = Observable::f().as_matrix2() * (p1.m * p2.m);
        let got = m12(&Observable::f(), ZERO, ZERO, w1, w2).unwrap();
        let diff = got.max_abs_diff(&exact);
        assert!(diff < 1e-14, "{diff:e}");
        let (z1, z2, w1, w2) = (c(0.3, 0.2), c(-0.1, 0.5), c(0.2, 0.1), c(-0.4, 0.3));
        let (p1, p2) = (solve_mde(z1, w1).unwrap(), solve_mde(z2, w2).unwrap());
        let f = Observable::f().as_matrix2();
        let x = m12(&Observable::f(), z1, z2, w1, w2).unwrap();
        let back = apply_b12(&p1.matrix(), &p2.matrix(), &x);
        assert!(back.max_abs_diff(&(p1.matrix() * f * p2.matrix())) < 1e-13);
    }

    #[test]
    fn identity_observable_is_w_derivative() {
        let (z, w) = (c(0.4, -0.3), c(0.25, 0.2));
        let p = solve_mde(z, w).unwrap();
        let got = m12_from(&p, &p, &Mat2::identity()).unwrap();
        let expected = p.matrix() * p.matrix() * (ONE / (ONE - p.trace_m2));
        assert!(got.max_abs_diff(&expected) < 1e-13);
        let h = 1e-5;
        let fd = (solve_mde(z, w + h).unwrap().matrix() - solve_mde(z, w - h).unwrap().matrix()) * (0.5 / h);
        assert!(got.max_abs_diff(&fd) < 1e-8);
        assert!(got.max_abs_diff(&(a_matrix(&p) * p.matrix())) < 1e-14);
    }

    #[test]
    fn f_star_f_closed_form() {
        let z = c(0.5, 0.1);
        for &eta in &[0.5, 0.05, 1e-4] {
            let p = solve_mde(z, c(0.0, eta)).unwrap();
            let got =
                (m12_from(&p, &p, &Observable::f_star().as_matrix2()).unwrap() * Observable::f().as_matrix2()).ntrace();
            let (m, u) = (p.m, p.u);
            let zu = z.norm_sqr() * u * u;
            let expected = m * m * 0.5 * (ONE - m * m + zu) / (ONE - m * m - zu);
            assert!((got - expected).norm() < 1e-12);
            if eta < 1e-3 {
                assert!((got + 0.5).norm() < 1e-3);
            }
        }
    }

    #[test]
    fn chain_base_case_and_derivative_identity() {
        let params = [(c(0.3, 0.0), c(0.1, 0.2)), (c(-0.2, 0.1), c(0.0, 0.4))];
        let b = Observable::new(c(0.2, 0.0), ONE, c(0.0, 0.5), ZERO);
        let ch = m_chain(&params, &[b]).unwrap();
        let direct = m12(&b, params[0].0, params[1].0, params[0].1, params[1].1).unwrap();
        assert!(ch.value.max_abs_diff(&direct) < 1e-15);

        // <M_[k](E+, ..., E+)> = d^{k-1} m / (k-1)!, checked against the closed form of m' and m''
        let (z, w) = (c(0.3, 0.4), c(0.1, 0.3));
        let p = solve_mde(z, w).unwrap();
        let k3 = m_chain(&[(z, w); 3], &[Observable::e_plus(); 2]).unwrap().value.ntrace();
        let h = 1e-4;
        let d1 = |w: C64| solve_mde(z, w).unwrap().dm_dw;
        let m2 = (d1(w + h) - d1(w - h)) / (2.0 * h) * 0.5;
        assert!((k3 - m2).norm() < 1e-7 * m2.norm());
        let k2 = m_chain(&[(z, w); 2], &[Observable::e_plus()]).unwrap().value.ntrace();
        assert!((k2 - p.dm_dw).norm() < 1e-13);
    }

    #[test]
    fn deterministic_e_minus_identities() {
        let (z, w) = (c(0.35, -0.2), c(0.15, 0.25));
        let mut traces = Vec::new();
        for s in 0..4 {
            let ch = m_chain(&vec![(z, w); s + 1], &vec![Observable::e_plus(); s]).unwrap();
            traces.push(ch.value.ntrace());
        }
        let em = e_minus();
        for n in 1..=4 {
            let odd = m_chain(&vec![(z, w); 2 * n - 1], &vec![Observable::e_minus(); 2 * n - 2]).unwrap();
            assert!((odd.value * em).ntrace().norm() < 1e-12);
            let even = m_chain(&vec![(z, w); 2 * n], &vec![Observable::e_minus(); 2 * n - 1]).unwrap();
            let lhs = (even.value * em).ntrace();
            let rhs = e_minus_identity_rhs(&traces, n, w).unwrap();
            assert!((lhs - rhs).norm() <= 1e-9 * rhs.norm(), "n={n}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn identity_rhs_small_cases() {
        let w = c(0.3, 0.7);
        let t = [c(0.1, 0.9), c(-0.4, 0.2)];
        assert!((e_minus_identity_rhs(&t, 1, w).unwrap() + t[0] / w).norm() < 1e-15);
        let n2 = 2.0 * (-2.0 * t[0] / (2.0 * w).powu(3) + t[1] / (2.0 * w).powu(2));
        assert!((e_minus_identity_rhs(&t, 2, w).unwrap() - n2).norm() < 1e-14);
    }

    #[test]
    fn u_at_origin() {
        let p = solve_mde(ZERO, ZERO).unwrap();
        assert!((u_coefficient(&p) - I / 2f64.sqrt()).norm() < 1e-14);
    }

    #[test]
    fn complex_ginibre_predictor_is_pure_v() {
        let (z1, z2, w) = (c(0.2, 0.1), c(-0.3, 0.2), c(0.0, 0.3));
        let p = cov_predict(z1, z2, w, w, 0.0, SymmetryClass::Complex, 128).unwrap();
        assert!((p.value - p.v12 / (2.0 * 128.0 * 128.0)).norm() < 1e-20);
        let real = cov_predict(z1, z2, w, w, 0.0, SymmetryClass::Real, 128).unwrap();
        let extra = v12(z1, z2.conj(), w, w).unwrap();
        assert!((real.v12 - p.v12 - extra).norm() < 1e-14);
    }

    #[test]
    fn singular_kernel_is_reported() {
        let z = c(0.3, 0.0);
        assert!(matches!(v12(z, z, ZERO, ZERO), Err(LabError::LogSingularity { .. })));
    }

    #[test]
    fn degenerate_p_system_is_reported() {
        let p = solve_mde(c(0.3, 0.0), ZERO).unwrap();
        assert!(matches!(m12_from(&p, &p, &Mat2::identity()), Err(LabError::StabilityDegenerate { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(150))]

        #[test]
        fn v12_matches_finite_differences(r1 in 0.0..0.8f64, t1 in 0.0..std::f64::consts::TAU, r2 in 0.0..0.8f64, t2 in 0.0..std::f64::consts::TAU,
                                          e1 in -0.5..0.5f64, e2 in -0.5..0.5f64, l1 in -1.5..0.0f64, l2 in -1.5..0.0f64) {
            let (z1, z2) = (C64::from_polar(r1, t1), C64::from_polar(r2, t2));
            let (w1, w2) = (c(e1, 10f64.powf(l1)), c(e2, 10f64.powf(l2)));
            let a = v12(z1, z2, w1, w2).unwrap();
            let fd = v12_finite_difference(z1, z2, w1, w2).unwrap();
            prop_assert!((a - fd).norm() <= 1e-6 * a.norm(), "{a} vs {fd}");
        }

        #[test]
        fn predictor_swap_symmetry(r1 in 0.0..0.8f64, r2 in 0.0..0.8f64, t in 0.0..std::f64::consts::TAU, l1 in -1.5..0.0f64, l2 in -1.5..0.0f64, k in -2.0..1.0f64) {
            let (z1, z2) = (c(r1, 0.0), C64::from_polar(r2, t));
            let (w1, w2) = (c(0.0, 10f64.powf(l1)), c(0.0, 10f64.powf(l2)));
            let a = cov_predict(z1, z2, w1, w2, k, SymmetryClass::Complex, 64).unwrap().value;
            let b = cov_predict(z2, z1, w2, w1, k, SymmetryClass::Complex, 64).unwrap().value;
            prop_assert!((a - b.conj()).norm() <= 1e-12 * a.norm());
        }

        #[test]
        fn chain_norm_bound(r in 0.0..0.8f64, t in 0.0..std::f64::consts::TAU, e in -0.5..0.5f64, l in -2.0..0.0f64, k in 2usize..5) {
            let eta = 10f64.powf(l);
            let params: Vec<(C64, C64)> = (0..k).map(|j| (C64::from_polar(r, t + 0.3 * j as f64), c(e, eta * (1.0 + j as f64)))).collect();
            let obs = vec![Observable::e_minus(); k - 1];
            let ch = m_chain(&params, &obs).unwrap();
            let eta_star = eta.min(1.0);
            prop_assert!(ch.value.norm_op() * eta_star.powi(k as i32 - 1) <= 10.0);
        }
    }
}
