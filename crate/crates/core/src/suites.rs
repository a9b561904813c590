//! Exact-identity check suites shared by `selftest` and the acceptance harness.

use crate::chains::{e_minus_identity_rhs, m_chain, v12, v12_finite_difference};
use crate::error::Result;
use crate::experiments::{flow_check, FlowCheckParams, Runner};
use crate::girko::{
    direct_statistic, envelopes, girko_evaluate, mollify, DomainSpec, GirkoGrid, Regimes, Shape, TestFunction,
};
use crate::mat2::{Mat2, C64};
use crate::mde::{cubic_roots, density, mde_residual, solve_mde, DensityProfile, MdePoint, RESIDUAL_TOL};
use crate::report::ExperimentResult;
use crate::spectra::chain_trace;
use crate::spectra::{complex_spectrum, derive_seed, sample, sample_rng, ChainLeg, EnsembleSpec};
use crate::stability::{b12_matrix4, e_minus, Observable, StabilityState, SymmetryClass};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Deliberate defects for exercising the checks themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Replace the selected MDE root with another root of the cubic.
    CorruptMdeBranch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// What the check is about.
    pub reference: &'static str,
    /// Worst value seen; compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn below(name: &'static str, reference: &'static str, value: f64, tolerance: f64, detail: String) -> Self {
        Check { name, reference, value, tolerance, passed: value <= tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<24} {:<58} worst {:.3e} (tol {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.reference,
            self.value,
            self.tolerance,
            self.detail
        )
    }
}

pub fn to_result(experiment: &str, checks: &[Check]) -> ExperimentResult {
    let mut r = ExperimentResult::new(experiment, &["check", "reference", "value", "tolerance", "passed", "detail"]);
    for c in checks {
        r.push(vec![
            c.name.into(),
            c.reference.into(),
            c.value.into(),
            c.tolerance.into(),
            c.passed.into(),
            c.detail.clone().into(),
        ]);
    }
    r.diag("failed", checks.iter().filter(|c| !c.passed).count());
    r
}

fn rng(seed: u64, label: &str) -> ChaCha8Rng {
    sample_rng(derive_seed(seed, label), 0)
}

fn disk_point(rng: &mut ChaCha8Rng, radius: f64) -> C64 {
    C64::from_polar(radius * rng.random::<f64>().sqrt(), 2.0 * PI * rng.random::<f64>())
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
}

fn corrupt(point: MdePoint) -> Result<MdePoint> {
    let roots = cubic_roots(point.z, point.w)?;
    let other = roots
        .iter()
        .copied()
        .filter(|r| (*r - point.m).norm() > 1e-9)
        .min_by(|a, b| a.im.total_cmp(&b.im))
        .unwrap_or(-point.m);
    Ok(MdePoint::assemble(point.z, point.w, other))
}

/// Residual of the cubic plus the branch condition `Im m > 0`, `|u| < 1` over a random grid,
/// and the density at zero energy against `sqrt(1 - |z|^2) / pi`.
pub fn mde_exactness(points: usize, seed: u64, fault: Option<Fault>) -> Vec<Check> {
    let mut g = rng(seed, "mde-grid");
    let grid: Vec<(C64, C64)> = (0..points)
        .map(|_| {
            let z = disk_point(&mut g, 0.9);
            let e = g.random_range(-3.0..3.0);
            (z, C64::new(e, log_uniform(&mut g, 1e-3, 10.0)))
        })
        .collect();
    let per: Vec<(f64, bool)> = grid
        .par_iter()
        .map(|&(z, w)| {
            let p =
                solve_mde(z, w).and_then(|p| if fault == Some(Fault::CorruptMdeBranch) { corrupt(p) } else { Ok(p) });
            match p {
                Ok(p) => {
                    (mde_residual(z, w, p.m), p.m.im > 0.0 && (p.m * p.m.conj()).re.is_finite() && p.u.norm() < 1.0)
                }
                Err(_) => (f64::INFINITY, false),
            }
        })
        .collect();
    let worst = per.iter().map(|t| t.0).fold(0.0, f64::max);
    let violations = per.iter().filter(|t| !t.1).count();
    let residual = Check {
        name: "mde-residual",
        reference: "cubic self-consistent equation residual and Im m > 0 branch",
        value: worst,
        tolerance: RESIDUAL_TOL,
        passed: worst < RESIDUAL_TOL && violations == 0,
        detail: format!("{points} points, {violations} branch violations"),
    };
    let mut worst_rho = 0.0f64;
    for k in 0..=90 {
        let z = C64::from_polar(0.9 * k as f64 / 90.0, 0.37 * k as f64);
        let rho = density(z, 0.0).unwrap_or(f64::NAN);
        let exact = (1.0 - z.norm_sqr()).sqrt() / PI;
        worst_rho = worst_rho.max(if rho.is_finite() { (rho - exact).abs() } else { f64::INFINITY });
    }
    vec![
        residual,
        Check::below(
            "density-at-zero",
            "zero-energy density equals sqrt(1-|z|^2)/pi",
            worst_rho,
            1e-10,
            "91 radii up to 0.9".into(),
        ),
    ]
}

/// Hermitized trace identities with `E-` on sampled matrices and their deterministic analogues.
pub fn trace_identities(n: usize, seeds: u64) -> Result<Vec<Check>> {
    let (z, w) = (C64::new(0.3, 0.1), C64::new(0.05, 0.4));
    let em = e_minus();
    let per: Vec<(f64, f64)> = (0..seeds)
        .into_par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let x = sample(&EnsembleSpec::ginibre(n, SymmetryClass::Complex, s), 0)?;
            let leg = ChainLeg::new(z, w);
            let powers = (1..=4)
                .map(|k| chain_trace(&x, &vec![leg; k], &vec![Mat2::identity(); k - 1]))
                .collect::<Result<Vec<_>>>()?;
            let (mut odd, mut even) = (0.0f64, 0.0f64);
            for k in 1..=4 {
                odd = odd.max(chain_trace(&x, &vec![leg; 2 * k - 1], &vec![em; 2 * k - 1])?.norm());
                let lhs = chain_trace(&x, &vec![leg; 2 * k], &vec![em; 2 * k])?;
                let rhs = e_minus_identity_rhs(&powers, k, w)?;
                even = even.max((lhs - rhs).norm() / lhs.norm().max(rhs.norm()));
            }
            Ok((odd, even))
        })
        .collect::<Result<_>>()?;
    let odd = per.iter().map(|t| t.0).fold(0.0, f64::max);
    let even = per.iter().map(|t| t.1).fold(0.0, f64::max);

    let mut traces = Vec::new();
    for s in 0..4 {
        traces.push(m_chain(&vec![(z, w); s + 1], &vec![Observable::e_plus(); s])?.value.ntrace());
    }
    let (mut dodd, mut deven) = (0.0f64, 0.0f64);
    for k in 1..=4 {
        let o = m_chain(&vec![(z, w); 2 * k - 1], &vec![Observable::e_minus(); 2 * k - 2])?;
        dodd = dodd.max((o.value * em).ntrace().norm());
        let e = m_chain(&vec![(z, w); 2 * k], &vec![Observable::e_minus(); 2 * k - 1])?;
        let lhs = (e.value * em).ntrace();
        let rhs = e_minus_identity_rhs(&traces, k, w)?;
        deven = deven.max((lhs - rhs).norm() / lhs.norm().max(rhs.norm()));
    }
    let detail = format!("N = {n}, {seeds} seeds, n = 1..4");
    Ok(vec![
        Check::below("trace-odd-e-minus", "odd powers of G E- have zero trace", odd, 1e-9, detail.clone()),
        Check::below("trace-even-e-minus", "even powers of G E- reduce to powers of G", even, 1e-9, detail),
        Check::below("chain-odd-e-minus", "deterministic chains: odd E- chains vanish", dodd, 1e-9, "n = 1..4".into()),
        Check::below("chain-even-e-minus", "deterministic chains: even E- reduction", deven, 1e-9, "n = 1..4".into()),
    ])
}

/// Uniform draw from the `kappa`-bulk by rejection on the support.
fn bulk_energy(g: &mut ChaCha8Rng, z: C64, kappa: f64) -> Result<f64> {
    let edge = DensityProfile::new(z).right_edge();
    for _ in 0..10_000 {
        let e = g.random_range(-edge..edge);
        if density(z, e)? >= kappa {
            return Ok(e);
        }
    }
    Err(crate::error::LabError::Domain(format!("empty {kappa}-bulk at z = {z}")))
}

/// `beta_hat / gamma` on a random bulk grid and the 4x4 eigenvalue cross-check of `beta_pm`.
pub fn stability_equivalence(points: usize, seed: u64) -> Result<Vec<Check>> {
    let pts: Vec<(C64, C64, C64, C64)> = (0..points as u64)
        .into_par_iter()
        .map(|k| -> Result<_> {
            let mut g = sample_rng(derive_seed(seed, "stability-grid"), k);
            let z1 = disk_point(&mut g, 0.8);
            let z2 = disk_point(&mut g, 0.8);
            let e1 = bulk_energy(&mut g, z1, 0.1)?;
            let e2 = bulk_energy(&mut g, z2, 0.1)?;
            Ok((z1, z2, C64::new(e1, log_uniform(&mut g, 1e-3, 1.0)), C64::new(e2, log_uniform(&mut g, 1e-3, 1.0))))
        })
        .collect::<Result<_>>()?;
    let per: Vec<(f64, f64)> = pts
        .par_iter()
        .map(|&(z1, z2, w1, w2)| -> Result<(f64, f64)> {
            let s = StabilityState::new(z1, z2, w1, w2)?;
            let ev = eigenvalues4(&b12_matrix4(&s.p1.matrix(), &s.p2.matrix()));
            let expect = [s.beta_plus, s.beta_minus, C64::new(1.0, 0.0), C64::new(1.0, 0.0)];
            Ok((s.beta_hat / s.gamma, multiset_distance(&ev, &expect)))
        })
        .collect::<Result<_>>()?;
    let lo = per.iter().map(|t| t.0).fold(f64::INFINITY, f64::min);
    let hi = per.iter().map(|t| t.0).fold(0.0, f64::max);
    let fitted = hi.max(1.0 / lo);
    let spec = per.iter().map(|t| t.1).fold(0.0, f64::max);
    Ok(vec![
        Check {
            name: "beta-hat-vs-gamma",
            reference: "stability bound beta_hat ~ gamma in the bulk",
            value: fitted,
            tolerance: 50.0,
            passed: fitted <= 50.0,
            detail: format!("{points} points, ratio in [{lo:.4}, {hi:.4}]"),
        },
        Check::below(
            "stability-spectrum",
            "{beta+, beta-, 1, 1} is the 4x4 spectrum",
            spec,
            1e-9,
            format!("{points} points"),
        ),
    ])
}

fn eigenvalues4(a: &faer::Mat<C64>) -> Vec<C64> {
    a.eigenvalues().unwrap_or_default()
}

/// Greedy matching distance between two small multisets.
fn multiset_distance(a: &[C64], b: &[C64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for x in a {
        let (k, d) = b
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, y)| (k, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .expect("same length");
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}

/// Richardson-extrapolated central difference in `w` of a smooth map.
fn dw(f: impl Fn(C64) -> Result<C64>, w: C64, h: f64) -> Result<C64> {
    let c = |h: f64| -> Result<C64> { Ok((f(w + h)? - f(w - h)?) / (2.0 * h)) };
    Ok((4.0 * c(h / 2.0)? - c(h)?) / 3.0)
}

/// Analytic `dm/dw`, `du/dw` and `V12` against finite differences.
pub fn derivative_oracles(points: usize, seed: u64) -> Result<Vec<Check>> {
    let per: Vec<[f64; 3]> = (0..points as u64)
        .into_par_iter()
        .map(|k| -> Result<[f64; 3]> {
            let mut g = sample_rng(derive_seed(seed, "derivative-grid"), k);
            let z = disk_point(&mut g, 0.9);
            let w = C64::new(g.random_range(-2.5..2.5), log_uniform(&mut g, 1e-2, 10.0));
            let p = solve_mde(z, w)?;
            let h = 0.01 * w.im.min(1.0);
            let dm = dw(|w| Ok(solve_mde(z, w)?.m), w, h)?;
            let du = dw(|w| Ok(solve_mde(z, w)?.u), w, h)?;
            let rm = (dm - p.dm_dw).norm() / p.dm_dw.norm();
            let ru = (du - p.du_dw).norm() / p.du_dw.norm().max(1e-3);
            let z2 = disk_point(&mut g, 0.9);
            let w2 = C64::new(g.random_range(-2.5..2.5), log_uniform(&mut g, 0.05, 10.0));
            let w1 = C64::new(w.re, w.im.max(0.05));
            let exact = v12(z, z2, w1, w2)?;
            let fd = v12_finite_difference(z, z2, w1, w2)?;
            Ok([rm, ru, (exact - fd).norm() / exact.norm()])
        })
        .collect::<Result<_>>()?;
    let worst = |i: usize| per.iter().map(|t| t[i]).fold(0.0, f64::max);
    let d = format!("{points} points");
    Ok(vec![
        Check::below("dm-dw", "dm/dw = <M^2>/(1-<M^2>) against finite differences", worst(0), 1e-6, d.clone()),
        Check::below("du-dw", "du/dw = 2mu/(1-<M^2>) against finite differences", worst(1), 1e-6, d.clone()),
        Check::below("covariance-kernel", "V12 = -1/2 d_w1 d_w2 log D against finite differences", worst(2), 1e-6, d),
    ])
}

/// Closed-form characteristics, `M` scaling and the straight-line law for `beta`.
pub fn flow_suite(runner: &Runner, trajectories: usize, seed: u64) -> Result<Vec<Check>> {
    let p = FlowCheckParams { trajectories, ..FlowCheckParams::default() };
    let r = flow_check(runner, &p, seed)?;
    let col = |c: &str| r.column(c).unwrap_or_default().into_iter().fold(0.0, f64::max);
    let monotone = r.column("eta_decreasing").unwrap_or_default().iter().all(|v| *v == 1.0);
    let d = format!("{trajectories} trajectories");
    Ok(vec![
        Check::below(
            "flow-closed-form",
            "characteristic closed form against RK4",
            col("closed_vs_rk4"),
            1e-8,
            d.clone(),
        ),
        Check::below("flow-m-scaling", "m_t = e^{t/2} m_0 along characteristics", col("m_scaling"), 1e-10, d.clone()),
        Check::below("flow-beta-line", "1 - beta_t = e^t (1 - beta_0)", col("beta_line"), 1e-10, d.clone()),
        Check {
            name: "flow-eta-decreasing",
            reference: "eta_t decreases along forward characteristics",
            value: if monotone { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: monotone,
            detail: d,
        },
    ])
}

pub fn envelope_shapes() -> Vec<DomainSpec> {
    vec![
        DomainSpec::disk(0.5),
        DomainSpec {
            shape: Shape::AnnulusSector { r_inner: 0.2, r_outer: 0.6, theta_start: -0.5, theta_end: 1.7 },
            center: [0.0, 0.0],
            alpha: 0.0,
        },
        DomainSpec { shape: Shape::Rectangle { half_width: 0.4, half_height: 0.25 }, center: [0.1, -0.1], alpha: 0.0 },
        DomainSpec {
            shape: Shape::ClippedDisk { radius: 0.5, normal_angle: 0.3, offset: 0.2 },
            center: [0.0, 0.0],
            alpha: 0.0,
        },
    ]
}

/// `f- <= 1_Omega <= f+` at random points, including points inside the mollification tube.
pub fn envelope_ordering(points: usize, seed: u64, n: usize, a: f64) -> Result<Vec<Check>> {
    let mut violations = 0usize;
    let mut tested = 0usize;
    for (k, domain) in envelope_shapes().iter().enumerate() {
        let (fm, fp) = envelopes(domain, a, n)?;
        let dom = domain.at(n);
        let eps = fm.mollifier.eps;
        let share = points / envelope_shapes().len() + usize::from(k < points % envelope_shapes().len());
        let v: usize = (0..share as u64)
            .into_par_iter()
            .map(|j| {
                let mut g = sample_rng(derive_seed(seed, "envelope-points") ^ k as u64, j);
                let s = if j % 2 == 0 {
                    domain.center() + disk_point(&mut g, 1.2 * dom.bounding_radius())
                } else {
                    // near the boundary
                    let mut p = domain.center() + disk_point(&mut g, 1.2 * dom.bounding_radius());
                    for _ in 0..20 {
                        let d = dom.signed_distance(p);
                        if d.abs() < 3.0 * eps {
                            break;
                        }
                        p = domain.center() + disk_point(&mut g, 1.2 * dom.bounding_radius());
                    }
                    p
                };
                let ind = if dom.contains(s) { 1.0 } else { 0.0 };
                usize::from(!(fm.value(s) <= ind && ind <= fp.value(s)))
            })
            .sum();
        violations += v;
        tested += share;
    }
    Ok(vec![Check {
        name: "envelope-ordering",
        reference: "smooth envelopes bracket the sharp indicator",
        value: violations as f64,
        tolerance: 0.0,
        passed: violations == 0,
        detail: format!("{tested} points over 4 shapes"),
    }])
}

/// Girko's formula for a mollified disk against the direct eigenvalue sum.
pub fn girko_identity(runner: &Runner, n: usize, seed: u64, a: f64) -> Result<Vec<Check>> {
    let spec = EnsembleSpec::ginibre(n, SymmetryClass::Complex, seed);
    let x = sample(&spec, 0)?;
    let f = mollify(&DomainSpec::disk(0.5), a, n)?;
    let direct = direct_statistic(&complex_spectrum(&x)?, &f as &dyn TestFunction);
    let g = runner.map(1, |_| girko_evaluate(&x, &f, &Regimes::for_size(n), &GirkoGrid::default()))?.remove(0);
    Ok(vec![
        Check::below(
            "girko-formula",
            "regime decomposition of the eta-integral against the eigenvalue sum",
            (g.total - direct).abs(),
            1e-3 * n as f64,
            format!("N = {n}, {} nodes, sum {direct:.6}", g.nodes),
        ),
        Check::below(
            "girko-log-det",
            "regime sum equals the log-determinant form on the same nodes",
            (g.total - g.identity).abs(),
            1e-6 * n as f64,
            format!("N = {n}"),
        ),
    ])
}

/// Everything, at sizes that finish well within a minute.
pub fn selftest(runner: &Runner, fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut out = mde_exactness(2000, 0, fault);
    out.extend(trace_identities(32, 4)?);
    out.extend(stability_equivalence(400, 0)?);
    out.extend(derivative_oracles(100, 0)?);
    out.extend(flow_suite(runner, 20, 0)?);
    out.extend(envelope_ordering(4000, 0, 64, 0.6)?);
    out.extend(girko_identity(runner, 24, 0, 0.6)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes_and_fault_is_caught_at_the_residual_check() {
        let runner = Runner::new(2, None).unwrap();
        let checks = selftest(&runner, None).unwrap();
        for c in &checks {
            assert!(c.passed, "{}", c.line());
        }
        let bad = mde_exactness(200, 0, Some(Fault::CorruptMdeBranch));
        assert!(!bad[0].passed && bad[0].name == "mde-residual");
    }

    #[test]
    fn multiset_matching() {
        let a = [C64::new(1.0, 0.0), C64::new(2.0, 0.0), C64::new(1.0, 0.0)];
        let b = [C64::new(2.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 1e-12)];
        assert!(multiset_distance(&a, &b) < 2e-12);
        assert!(multiset_distance(&a, &b[..2]).is_infinite());
    }
}
