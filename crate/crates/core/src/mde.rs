//! Scalar Dyson equation `-1/m = w + m - |z|^2/(w+m)` and everything derived from it.

use crate::error::{LabError, Result};
use crate::mat2::{Mat2, C64, ZERO};
use crate::quad::{integrate, QuadOptions};
use std::f64::consts::PI;

/// Largest accepted residual of the Dyson equation.
pub const RESIDUAL_TOL: f64 = 1e-12;
/// Smallest accepted `|1 - <M^2>|` for derivative formulas.
pub const DERIVATIVE_GAP_TOL: f64 = 1e-10;

const CONTINUATION_TOP: f64 = 10.0;
const CONTINUATION_STEPS: usize = 80;

/// The solved Dyson state at one `(z, w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdePoint {
    pub z: C64,
    pub w: C64,
    pub m: C64,
    pub u: C64,
    pub trace_m2: C64,
    pub dm_dw: C64,
    pub du_dw: C64,
}

impl MdePoint {
    pub fn assemble(z: C64, w: C64, m: C64) -> Self {
        let u = m / (w + m);
        let trace_m2 = m * m + z.norm_sqr() * u * u;
        let gap = C64::new(1.0, 0.0) - trace_m2;
        MdePoint { z, w, m, u, trace_m2, dm_dw: trace_m2 / gap, du_dw: 2.0 * m * u / gap }
    }

    /// `M = [[m, -z u], [-conj(z) u, m]]`.
    pub fn matrix(&self) -> Mat2 {
        Mat2::new(self.m, -self.z * self.u, -self.z.conj() * self.u, self.m)
    }

    pub fn residual(&self) -> f64 {
        mde_residual(self.z, self.w, self.m)
    }

    pub fn eta(&self) -> f64 {
        self.w.im
    }

    /// The solution at the conjugate spectral parameter, `m(conj w) = conj m(w)`.
    pub fn conj_w(&self) -> Self {
        MdePoint {
            z: self.z,
            w: self.w.conj(),
            m: self.m.conj(),
            u: self.u.conj(),
            trace_m2: self.trace_m2.conj(),
            dm_dw: self.dm_dw.conj(),
            du_dw: self.du_dw.conj(),
        }
    }

    /// The solution at `conj(z)`; `m` and `u` depend on `|z|` only.
    pub fn conj_z(&self) -> Self {
        MdePoint { z: self.z.conj(), ..*self }
    }

    fn derivative_gap(&self) -> Result<C64> {
        let gap = C64::new(1.0, 0.0) - self.trace_m2;
        if gap.norm() <= DERIVATIVE_GAP_TOL {
            return Err(LabError::SingularDerivative { z: self.z, w: self.w, gap: gap.norm() });
        }
        Ok(gap)
    }
}

pub fn mde_residual(z: C64, w: C64, m: C64) -> f64 {
    (1.0 / m + w + m - z.norm_sqr() / (w + m)).norm()
}

/// `(dm/dw, du/dw)`.
pub fn derivatives(point: &MdePoint) -> Result<(C64, C64)> {
    point.derivative_gap()?;
    Ok((point.dm_dw, point.du_dw))
}

/// Derivative of `m` in `z` along the unit direction `zeta`.
pub fn directional_z_derivative(point: &MdePoint, zeta: C64) -> Result<C64> {
    let gap = point.derivative_gap()?;
    let re = (point.z.conj() * zeta).re;
    Ok(-2.0 * re * point.m * point.u / gap)
}

/// Coefficients `(a2, a1, a0)` of the monic cubic `m^3 + a2 m^2 + a1 m + a0`.
fn cubic(z: C64, w: C64) -> [C64; 3] {
    [2.0 * w, w * w + (1.0 - z.norm_sqr()), w]
}

fn polish(coef: &[C64; 3], mut r: C64) -> C64 {
    let [a2, a1, a0] = *coef;
    for _ in 0..4 {
        let p = ((r + a2) * r + a1) * r + a0;
        let dp = (3.0 * r + 2.0 * a2) * r + a1;
        if dp.norm() == 0.0 {
            break;
        }
        let step = p / dp;
        r -= step;
        if step.norm() <= 1e-16 * r.norm().max(1e-300) {
            break;
        }
    }
    r
}

/// All three roots of the cleared Dyson equation, from the companion matrix spectrum.
pub fn cubic_roots(z: C64, w: C64) -> Result<[C64; 3]> {
    let coef = cubic(z, w);
    let [a2, a1, a0] = coef;
    let one = C64::new(1.0, 0.0);
    let comp = faer::Mat::<C64>::from_fn(3, 3, |i, j| match (i, j) {
        (0, 0) => -a2,
        (0, 1) => -a1,
        (0, 2) => -a0,
        (1, 0) | (2, 1) => one,
        _ => ZERO,
    });
    let ev = comp
        .eigenvalues()
        .map_err(|e| LabError::Numerical(format!("companion eigensolver failed at z={z}, w={w}: {e:?}")))?;
    Ok([polish(&coef, ev[0]), polish(&coef, ev[1]), polish(&coef, ev[2])])
}

fn finish(z: C64, w: C64, m: C64) -> Result<MdePoint> {
    let mut m = m;
    let mut res = mde_residual(z, w, m);
    // a few Newton steps on the uncleared equation when the polish left a residual
    let mut iter = 0;
    while res >= RESIDUAL_TOL && iter < 20 {
        let s = w + m;
        let f = 1.0 / m + w + m - z.norm_sqr() / s;
        let df = -1.0 / (m * m) + 1.0 + z.norm_sqr() / (s * s);
        m -= f / df;
        res = mde_residual(z, w, m);
        iter += 1;
    }
    if !(res < RESIDUAL_TOL) {
        return Err(LabError::SolverFailure { z, w, residual: res });
    }
    Ok(MdePoint::assemble(z, w, m))
}

/// Solves at `Im w > 0` by continuation from `Re w + 10i`, following the nearest root.
fn continue_down(z: C64, w: C64) -> Result<C64> {
    let top = CONTINUATION_TOP.max(w.im);
    let ratio = (w.im / top).powf(1.0 / CONTINUATION_STEPS as f64);
    let start = C64::new(w.re, top);
    let mut prev =
        upper_root(&cubic_roots(z, start)?).ok_or(LabError::SolverFailure { z, w: start, residual: f64::NAN })?;
    let mut eta = top;
    for k in 1..=CONTINUATION_STEPS {
        eta = if k == CONTINUATION_STEPS { w.im } else { eta * ratio };
        let roots = cubic_roots(z, C64::new(w.re, eta))?;
        prev = *roots.iter().min_by(|a, b| (**a - prev).norm().total_cmp(&(**b - prev).norm())).expect("three roots");
    }
    Ok(prev)
}

/// The unique root in the upper half plane, if unambiguous.
fn upper_root(roots: &[C64; 3]) -> Option<C64> {
    let mut up = roots.iter().filter(|r| r.im > 0.0);
    let first = *up.next()?;
    if up.next().is_some() {
        None
    } else {
        Some(first)
    }
}

/// Solves the scalar Dyson equation. A real `w` is treated as the boundary value `E + i0`.
pub fn solve_mde(z: C64, w: C64) -> Result<MdePoint> {
    if w.im == 0.0 {
        return solve_boundary(z, w.re, None);
    }
    if w.im < 0.0 {
        return solve_mde(z, w.conj()).map(|p| p.conj_w());
    }
    let roots = cubic_roots(z, w)?;
    let m = match upper_root(&roots) {
        Some(m) => m,
        None => continue_down(z, w)?,
    };
    let p = finish(z, w, m)?;
    if !(p.m.im > 0.0) {
        return Err(LabError::SolverFailure { z, w, residual: p.residual() });
    }
    Ok(p)
}

/// Discriminant of the real cubic at `w = E`, as a function of `x = E^2`.
/// Negative values mean a complex-conjugate root pair, i.e. positive density.
pub fn discriminant(z: C64, energy: f64) -> f64 {
    let q = 1.0 - z.norm_sqr();
    let x = energy * energy;
    4.0 * z.norm_sqr() * x * x + (36.0 * q - 27.0 - 8.0 * q * q) * x - 4.0 * q * q * q
}

/// Positive support edges of the density: `[edge]` for `|z| < 1`, `[inner, outer]` for `|z| > 1`.
pub fn support_edges(z: C64) -> Vec<f64> {
    let q = 1.0 - z.norm_sqr();
    let a = 4.0 * z.norm_sqr();
    let b = 36.0 * q - 27.0 - 8.0 * q * q;
    let c = -4.0 * q * q * q;
    let mut xs = Vec::new();
    if a.abs() < 1e-300 {
        if b != 0.0 {
            xs.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            // stable quadratic roots
            let t = -0.5 * (b + b.signum() * sq);
            xs.push(t / a);
            if t != 0.0 {
                xs.push(c / t);
            }
        }
    }
    let mut edges: Vec<f64> = xs.into_iter().filter(|x| *x > 0.0).map(f64::sqrt).collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    edges
}

/// Boundary value `m(E + i0)`. An `anchor` selects among real roots by proximity where the
/// density vanishes inside the gap of `|z| > 1`.
pub fn solve_boundary(z: C64, energy: f64, anchor: Option<C64>) -> Result<MdePoint> {
    if energy < 0.0 {
        // m(-E + i0) = -conj(m(E + i0))
        return solve_boundary(z, -energy, anchor.map(|a| -a.conj()))
            .map(|p| MdePoint::assemble(z, C64::new(-energy, 0.0), -p.m.conj()));
    }
    let w = C64::new(energy, 0.0);
    let roots = cubic_roots(z, w)?;
    if discriminant(z, energy) < 0.0 {
        let m = *roots.iter().max_by(|a, b| a.im.total_cmp(&b.im)).expect("three roots");
        let m = if m.im < 0.0 { m.conj() } else { m };
        return finish(z, w, m);
    }
    let reals: Vec<C64> = roots.iter().map(|r| C64::new(r.re, 0.0)).collect();
    let nearest = |target: C64| {
        *reals.iter().min_by(|a, b| (**a - target).norm().total_cmp(&(**b - target).norm())).expect("three roots")
    };
    if let Some(a) = anchor {
        return finish(z, w, nearest(a));
    }
    if z.norm() > 1.0 {
        let edges = support_edges(z);
        if edges.len() == 2 && energy < edges[0] {
            return Err(LabError::BranchAmbiguity { z, energy });
        }
    }
    let eps = 1e-9 * energy.max(1.0);
    let nearby = solve_mde(z, C64::new(energy, eps))?;
    finish(z, w, nearest(nearby.m))
}

/// `rho^z(E) = |Im m(E + i0)| / pi`.
pub fn density(z: C64, energy: f64) -> Result<f64> {
    if discriminant(z, energy) >= 0.0 {
        // every root is real, whichever branch is meant
        return Ok(0.0);
    }
    Ok(solve_boundary(z, energy, None)?.m.im.abs() / PI)
}

/// The density at fixed `z`, with support, bulk and quantiles.
#[derive(Clone, Debug)]
pub struct DensityProfile {
    pub z: C64,
    edges: Vec<f64>,
}

impl DensityProfile {
    pub fn new(z: C64) -> Self {
        DensityProfile { z, edges: support_edges(z) }
    }

    pub fn rho_at(&self, energy: f64) -> Result<f64> {
        density(self.z, energy)
    }

    /// Supports on the positive half line.
    pub fn support(&self) -> Vec<(f64, f64)> {
        match self.edges.as_slice() {
            [e] => vec![(0.0, *e)],
            [a, b] => vec![(*a, *b)],
            _ => Vec::new(),
        }
    }

    pub fn right_edge(&self) -> f64 {
        self.edges.last().copied().unwrap_or(0.0)
    }

    /// Maximal intervals of `[0, edge]` where `rho >= kappa`; the full bulk is their mirror union.
    pub fn bulk(&self, kappa: f64) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        for (lo, hi) in self.support() {
            let n = 800;
            let grid: Vec<f64> = (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect();
            let inside: Vec<bool> = grid.iter().map(|&e| self.rho_at(e).map(|r| r >= kappa)).collect::<Result<_>>()?;
            let mut k = 0;
            while k <= n {
                if !inside[k] {
                    k += 1;
                    continue;
                }
                let start = if k == 0 { grid[0] } else { self.refine(grid[k - 1], grid[k], kappa)? };
                let mut j = k;
                while j < n && inside[j + 1] {
                    j += 1;
                }
                let end = if j == n { grid[n] } else { self.refine(grid[j], grid[j + 1], kappa)? };
                out.push((start, end));
                k = j + 1;
            }
        }
        Ok(out)
    }

    pub fn in_bulk(&self, energy: f64, kappa: f64) -> Result<bool> {
        Ok(self.rho_at(energy.abs())? >= kappa)
    }

    fn refine(&self, mut a: f64, mut b: f64, kappa: f64) -> Result<f64> {
        let fa = self.rho_at(a)? >= kappa;
        for _ in 0..60 {
            let mid = 0.5 * (a + b);
            if (self.rho_at(mid)? >= kappa) == fa {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    }

    fn integral(&self, a: f64, b: f64) -> Result<f64> {
        let z = self.z;
        integrate(
            |e| density(z, e).unwrap_or(f64::NAN),
            a,
            b,
            QuadOptions { abs_tol: 1e-13, rel_tol: 1e-13, max_intervals: 4000 },
        )
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(LabError::Numerical(format!("density integral on [{a}, {b}] is not finite")))
            }
        })
    }

    /// `int_0^E rho`.
    pub fn cumulative(&self, energy: f64) -> Result<f64> {
        let mut total = 0.0;
        for (lo, hi) in self.support() {
            let b = hi.min(energy);
            if b > lo {
                total += self.integral(lo, b)?;
            }
        }
        Ok(total)
    }

    /// Positive quantiles `gamma_1 < ... < gamma_N` with `int_0^{gamma_i} rho = i/(2N)`.
    pub fn quantiles(&self, n: usize) -> Result<Vec<f64>> {
        if self.z.norm() >= 1.0 {
            return Err(LabError::Domain(format!("quantiles need |z| < 1, got |z| = {}", self.z.norm())));
        }
        let edge = self.right_edge();
        let total = self.cumulative(edge)?;
        if (total - 0.5).abs() > 1e-10 {
            return Err(LabError::Numerical(format!("density mass on [0, edge] is {total}, expected 1/2")));
        }
        let step = 0.5 / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut x_prev = 0.0;
        let mut f_prev = 0.0;
        for i in 1..n {
            let target = step * i as f64;
            // g(x) = F(x) - target, monotone on [x_prev, edge]
            let mut lo = x_prev;
            let mut hi = edge;
            let rho_prev = self.rho_at(x_prev)?;
            let mut x =
                if rho_prev > 1e-8 { (x_prev + (target - f_prev) / rho_prev).min(edge) } else { 0.5 * (lo + hi) };
            let mut found = None;
            for _ in 0..200 {
                let g = f_prev + self.integral(x_prev, x)? - target;
                if g.abs() < 1e-13 {
                    found = Some((x, g + target));
                    break;
                }
                if g > 0.0 {
                    hi = x;
                } else {
                    lo = x;
                }
                if hi - lo < 1e-15 * edge {
                    found = Some((x, g + target));
                    break;
                }
                let r = self.rho_at(x)?;
                let newton = x - g / r;
                x = if r > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            }
            let (x, f) = found.ok_or_else(|| {
                LabError::Numerical(format!("quantile root-finder failed for i={i}, N={n}, z={}", self.z))
            })?;
            out.push(x);
            x_prev = x;
            f_prev = f;
        }
        out.push(edge);
        Ok(out)
    }
}

pub fn quantiles(z: C64, n: usize) -> Result<Vec<f64>> {
    DensityProfile::new(z).quantiles(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat2::I;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn free_case_on_imaginary_axis() {
        let p = solve_mde(ZERO, c(0.0, 2.0)).unwrap();
        assert!((p.m - c(0.0, 2f64.sqrt() - 1.0)).norm() < 1e-14);
    }

    #[test]
    fn boundary_at_origin() {
        let p = solve_mde(c(0.6, 0.0), c(0.0, 0.0)).unwrap();
        assert!((p.m - c(0.0, 0.8)).norm() < 1e-14);
        assert!((p.u - c(1.0, 0.0)).norm() < 1e-14);
        let rot = solve_mde(c(0.0, 0.6), ZERO).unwrap();
        assert!((rot.m - p.m).norm() < 1e-14);
    }

    #[test]
    fn derivatives_at_origin() {
        let p = solve_mde(ZERO, ZERO).unwrap();
        assert!((p.m - I).norm() < 1e-14);
        let (dm, du) = derivatives(&p).unwrap();
        assert!((dm - c(-0.5, 0.0)).norm() < 1e-14);
        assert!((du - I).norm() < 1e-14);
    }

    #[test]
    fn densities_at_zero_energy() {
        assert!((density(ZERO, 0.0).unwrap() - 1.0 / PI).abs() < 1e-15);
        assert!((density(c(0.6, 0.0), 0.0).unwrap() - 0.8 / PI).abs() < 1e-15);
        assert!((density(ZERO, 1.0).unwrap() - 3f64.sqrt() / (2.0 * PI)).abs() < 1e-14);
        assert_eq!(density(ZERO, 2.5).unwrap(), 0.0);
    }

    #[test]
    fn edges() {
        assert_eq!(support_edges(ZERO), vec![2.0]);
        let e = support_edges(c(0.5, 0.0));
        assert_eq!(e.len(), 1);
        assert!(density(c(0.5, 0.0), e[0] * 0.999).unwrap() > 0.0);
        assert_eq!(density(c(0.5, 0.0), e[0] * 1.001).unwrap(), 0.0);
        let e2 = support_edges(c(1.3, 0.0));
        assert_eq!(e2.len(), 2);
    }

    #[test]
    fn gap_branch_is_ambiguous() {
        let z = c(1.2, 0.0);
        assert!(matches!(solve_boundary(z, 0.01, None), Err(LabError::BranchAmbiguity { .. })));
        let anchored = solve_boundary(z, 0.01, Some(ZERO)).unwrap();
        assert!(anchored.residual() < RESIDUAL_TOL);
        assert_eq!(density(z, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn beyond_edge_is_continuous_limit() {
        let z = c(0.4, 0.0);
        let p = solve_boundary(z, 3.0, None).unwrap();
        let q = solve_mde(z, c(3.0, 1e-6)).unwrap();
        assert!((p.m - q.m).norm() < 1e-5);
    }

    #[test]
    fn free_quantiles() {
        let n = 200;
        let g = quantiles(ZERO, n).unwrap();
        assert_eq!(g.len(), n);
        assert_eq!(g[n - 1], 2.0);
        // small-index linear regime, gamma_i ~ i/(2 N rho(0))
        assert!((g[0] - PI / (2.0 * n as f64)).abs() < 1e-5);
        assert!(g.windows(2).all(|p| p[0] < p[1]));
        let prof = DensityProfile::new(ZERO);
        for (i, x) in g.iter().enumerate().step_by(37) {
            let f = prof.cumulative(*x).unwrap();
            assert!((f - (i + 1) as f64 / (2.0 * n as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn quantiles_scale_with_index() {
        let n = 128;
        let g = quantiles(c(0.3, 0.4), n).unwrap();
        for (k, x) in g.iter().enumerate() {
            let r = x * n as f64 / (k + 1) as f64;
            assert!(r > 0.5 && r < 5.0, "ratio {r} at i={}", k + 1);
        }
    }

    #[test]
    fn bulk_intervals() {
        let b = DensityProfile::new(ZERO).bulk(0.1).unwrap();
        assert_eq!(b.len(), 1);
        // semicircle sqrt(4-E^2)/(2 pi) = 0.1
        let edge = (4.0 - (0.2 * PI).powi(2)).sqrt();
        assert!((b[0].1 - edge).abs() < 1e-10);
    }

    fn fd_step(eta: f64) -> f64 {
        1e-5 * eta.max(1.0)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for &(zr, zi, e, eta) in
            &[(0.0, 0.0, 0.3, 1e-3), (0.5, 0.2, -0.4, 0.05), (0.7, -0.3, 0.1, 2.0), (0.2, 0.8, 0.0, 10.0)]
        {
            let z = c(zr, zi);
            let w = c(e, eta);
            let p = solve_mde(z, w).unwrap();
            let h = fd_step(eta);
            let fp = solve_mde(z, w + h).unwrap();
            let fm = solve_mde(z, w - h).unwrap();
            let dm = (fp.m - fm.m) / (2.0 * h);
            let du = (fp.u - fm.u) / (2.0 * h);
            assert!((dm - p.dm_dw).norm() <= 1e-6 * p.dm_dw.norm(), "dm at {z} {w}");
            assert!((du - p.du_dw).norm() <= 1e-6 * p.du_dw.norm().max(1e-3), "du at {z} {w}");
        }
    }

    #[test]
    fn z_derivative() {
        let w = c(0.0, 0.1);
        let p = solve_mde(c(0.5, 0.0), w).unwrap();
        let analytic = directional_z_derivative(&p, c(1.0, 0.0)).unwrap();
        let h = 1e-5;
        let fd = (solve_mde(c(0.5 + h, 0.0), w).unwrap().m - solve_mde(c(0.5 - h, 0.0), w).unwrap().m) / (2.0 * h);
        assert!((fd - analytic).norm() <= 1e-6 * analytic.norm());
        assert_eq!(directional_z_derivative(&p, I).unwrap(), ZERO);
        let p0 = solve_mde(ZERO, w).unwrap();
        assert_eq!(directional_z_derivative(&p0, c(0.6, 0.8)).unwrap().norm(), 0.0);
    }

    #[test]
    fn u_is_contracting_in_bulk() {
        for &(zr, e, eta) in &[(0.9, 0.0, 1e-3), (0.5, 0.5, 0.01), (0.8, -0.2, 1.0)] {
            let p = solve_mde(c(zr, 0.0), c(e, eta)).unwrap();
            assert!(p.u.norm() < 1.0);
            let mm = p.matrix();
            assert_eq!(mm.0[0][0], mm.0[1][1]);
            assert!((mm.ntrace() - p.m).norm() < 1e-15);
            assert!(((mm * mm).ntrace() - p.trace_m2).norm() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn residual_branch_and_conjugation(r in 0.0..0.9f64, th in 0.0..std::f64::consts::TAU, e in -3.0..3.0f64, le in -3.0..1.0f64) {
            let z = C64::from_polar(r, th);
            let w = c(e, 10f64.powf(le));
            let p = solve_mde(z, w).unwrap();
            prop_assert!(p.residual() < RESIDUAL_TOL);
            prop_assert!(p.m.im > 0.0);
            let q = solve_mde(z, w.conj()).unwrap();
            prop_assert!(q.m.im < 0.0);
            prop_assert!((q.m - p.m.conj()).norm() < 1e-14);
        }

        #[test]
        fn density_is_even(r in 0.0..0.95f64, e in 0.0..2.5f64) {
            let z = c(r, 0.0);
            prop_assert_eq!(density(z, e).unwrap(), density(z, -e).unwrap());
        }
    }
}
