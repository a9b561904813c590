//! Characteristic flow of the Dyson equation and matrix-valued Brownian/OU flows.

use crate::error::{LabError, Result};
use crate::mat2::C64;
use crate::mde::{solve_mde, MdePoint};
use crate::spectra::{derive_seed, resolvent_trace, sample, sample_rng, singular_values_shifted, EnsembleSpec, Matrix};
use crate::stability::{beta_hat_from, beta_pm_from, SymmetryClass};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Largest admissible time step of the matrix flows.
pub const MAX_FLOW_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub z: C64,
    pub w: C64,
    pub m: C64,
    pub u: C64,
    pub eta: f64,
    /// `(β₊, β₋)` of the pair `(z_t, w_t)`, `(z_t, w̄_t)`.
    pub beta: (C64, C64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowDirection {
    /// The given point is the value at the final time.
    BackwardFromFinal,
    /// The given point is the initial condition.
    Forward,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<FlowState>,
    /// RK4 values of `(z_t, w_t)` on the same grid.
    pub numerical: Vec<(C64, C64)>,
}

fn state_from(t: f64, p: &MdePoint) -> FlowState {
    let beta = beta_pm_from(p, &p.conj_w());
    FlowState { t, z: p.z, w: p.w, m: p.m, u: p.u, eta: p.w.im.abs(), beta }
}

/// Time at which the flow started from `(w0, m0)` reaches the real axis.
pub fn crossing_time(w0: C64, m0: C64) -> f64 {
    (1.0 + w0.im.abs() / m0.im.abs()).ln()
}

/// `z_t = e^{-t/2} z₀`, `w_t = e^{-t/2} w₀ - 2 m^{z₀}(w₀) sinh(t/2)`.
pub fn closed_form(z0: C64, w0: C64, m0: C64, t: f64) -> (C64, C64) {
    let decay = (-0.5 * t).exp();
    (z0 * decay, w0 * decay - 2.0 * m0 * (0.5 * t).sinh())
}

/// Initial condition whose flow reaches `(z_end, w_end)` at time `t_end`.
pub fn backward_anchor(z_end: C64, w_end: C64, t_end: f64) -> Result<MdePoint> {
    let end = solve_mde(z_end, w_end)?;
    let grow = (0.5 * t_end).exp();
    let m0 = end.m / grow;
    let z0 = z_end * grow;
    let w0 = grow * (w_end + 2.0 * m0 * (0.5 * t_end).sinh());
    let start = solve_mde(z0, w0)?;
    let miss = (start.m - m0).norm();
    if !(miss <= 1e-12 * m0.norm().max(1.0)) {
        return Err(LabError::Numerical(format!(
            "backward characteristic anchor is inconsistent: |m(z0,w0) - m0| = {miss:e}"
        )));
    }
    Ok(start)
}

fn rk4_rhs(z: C64, w: C64) -> Result<(C64, C64)> {
    let p = solve_mde(z, w)?;
    Ok((-0.5 * z, -0.5 * w - p.m))
}

fn rk4_step(z: C64, w: C64, h: f64) -> Result<(C64, C64)> {
    let (k1z, k1w) = rk4_rhs(z, w)?;
    let (k2z, k2w) = rk4_rhs(z + k1z * (h / 2.0), w + k1w * (h / 2.0))?;
    let (k3z, k3w) = rk4_rhs(z + k2z * (h / 2.0), w + k2w * (h / 2.0))?;
    let (k4z, k4w) = rk4_rhs(z + k3z * h, w + k3w * h)?;
    Ok((z + (k1z + 2.0 * k2z + 2.0 * k3z + k4z) * (h / 6.0), w + (k1w + 2.0 * k2w + 2.0 * k3w + k4w) * (h / 6.0)))
}

/// Runs the flow over `[0, t_span]` on `points` equispaced times, with the closed form on the
/// states and an independent RK4 integration (`substeps` per grid interval) alongside.
pub fn characteristic_flow(
    z: C64,
    w: C64,
    t_span: f64,
    direction: FlowDirection,
    points: usize,
    substeps: usize,
) -> Result<Trajectory> {
    if w.im == 0.0 {
        return Err(LabError::Domain(format!("characteristic flow needs w off the real axis, got {w}")));
    }
    if !(t_span >= 0.0) || points < 1 {
        return Err(LabError::config("flow", "t_span must be nonnegative and points at least 1"));
    }
    let start = match direction {
        FlowDirection::Forward => solve_mde(z, w)?,
        FlowDirection::BackwardFromFinal => backward_anchor(z, w, t_span)?,
    };
    let t_cross = crossing_time(start.w, start.m);
    if t_span >= t_cross {
        return Err(LabError::FlowTermination { time: t_cross });
    }
    let grid: Vec<f64> =
        (0..points).map(|k| if points == 1 { 0.0 } else { t_span * k as f64 / (points - 1) as f64 }).collect();
    let grow = |t: f64| (0.5 * t).exp();
    let mut states = Vec::with_capacity(points);
    for &t in &grid {
        let (zt, wt) = closed_form(start.z, start.w, start.m, t);
        let p = MdePoint::assemble(zt, wt, start.m * grow(t));
        states.push(state_from(t, &p));
    }
    let mut numerical = Vec::with_capacity(points);
    let (mut zn, mut wn) = (start.z, start.w);
    numerical.push((zn, wn));
    for k in 1..points {
        let h = (grid[k] - grid[k - 1]) / substeps.max(1) as f64;
        for _ in 0..substeps.max(1) {
            let (a, b) = rk4_step(zn, wn, h)?;
            zn = a;
            wn = b;
        }
        numerical.push((zn, wn));
    }
    Ok(Trajectory { states, numerical })
}

/// Residuals of the flow laws along one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlowReport {
    /// `max_t |(z_t, w_t)_closed - (z_t, w_t)_RK4|`.
    pub closed_vs_rk4: f64,
    /// `max_t ‖M^{z_t}(w_t) - e^{t/2} M^{z_0}(w_0)‖`, with `M^{z_t}(w_t)` solved afresh.
    pub m_scaling: f64,
    /// `max_t |β_t - (1 - e^t (1 - β_0))|` over both signs.
    pub beta_line: f64,
    pub eta_decreasing: bool,
    /// Range of `η_s / (η_t + |s - t|)` over grid pairs `s ≤ t`.
    pub eta_equivalence: (f64, f64),
    /// `β̂` of the pair `(w_t, w̄_t)` is nonincreasing in `t`.
    pub beta_hat_monotone: bool,
}

pub fn flow_invariant_report(traj: &Trajectory) -> Result<FlowReport> {
    let s0 = traj.states.first().ok_or_else(|| LabError::Domain("empty trajectory".into()))?;
    let p0 = solve_mde(s0.z, s0.w)?;
    let beta0 = beta_pm_from(&p0, &p0.conj_w());
    let mut rep = FlowReport {
        closed_vs_rk4: 0.0,
        m_scaling: 0.0,
        beta_line: 0.0,
        eta_decreasing: true,
        eta_equivalence: (f64::INFINITY, 0.0),
        beta_hat_monotone: true,
    };
    let mut prev_hat = f64::INFINITY;
    for (k, (s, &(zn, wn))) in traj.states.iter().zip(&traj.numerical).enumerate() {
        rep.closed_vs_rk4 = rep.closed_vs_rk4.max((s.z - zn).norm().max((s.w - wn).norm()));
        let p = solve_mde(s.z, s.w)?;
        let g = (0.5 * s.t).exp();
        rep.m_scaling = rep.m_scaling.max(p.matrix().max_abs_diff(&(p0.matrix() * g)));
        let (bp, bm) = beta_pm_from(&p, &p.conj_w());
        let e = s.t.exp();
        let line_p = 1.0 - e * (1.0 - beta0.0);
        let line_m = 1.0 - e * (1.0 - beta0.1);
        rep.beta_line = rep.beta_line.max((bp - line_p).norm().max((bm - line_m).norm()));
        if k > 0 && !(s.eta < traj.states[k - 1].eta) {
            rep.eta_decreasing = false;
        }
        let hat = beta_hat_from(&p, &p.conj_w());
        if hat > prev_hat * (1.0 + 1e-12) {
            rep.beta_hat_monotone = false;
        }
        prev_hat = hat;
        for earlier in &traj.states[..=k] {
            if earlier.t == s.t {
                continue;
            }
            let r = earlier.eta / (s.eta + (s.t - earlier.t));
            rep.eta_equivalence.0 = rep.eta_equivalence.0.min(r);
            rep.eta_equivalence.1 = rep.eta_equivalence.1.max(r);
        }
    }
    if traj.states.len() < 2 {
        rep.eta_equivalence = (1.0, 1.0);
    }
    Ok(rep)
}

impl Trajectory {
    /// CSV rows `(t, Re z, Im z, Re w, Im w, Re m, Im m, Re β₊, Im β₊, Re β₋, Im β₋)`.
    pub fn rows(&self) -> Vec<[f64; 11]> {
        self.states
            .iter()
            .map(|s| {
                [
                    s.t,
                    s.z.re,
                    s.z.im,
                    s.w.re,
                    s.w.im,
                    s.m.re,
                    s.m.im,
                    s.beta.0.re,
                    s.beta.0.im,
                    s.beta.1.re,
                    s.beta.1.im,
                ]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    /// `dX = dB / √N`.
    Brownian,
    /// `dX = -X/2 dt + dB / √N`.
    OrnsteinUhlenbeck,
}

/// What to record at each node of the time grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTracking {
    pub zs: Vec<[f64; 2]>,
    /// 1-based singular value indices.
    #[serde(default)]
    pub indices: Vec<usize>,
    /// Resolvent traces are recorded at `w = iη` for these `η`.
    #[serde(default)]
    pub etas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MatrixFlowPath {
    pub kind: FlowKind,
    pub times: Vec<f64>,
    /// `[time][z][index]`.
    pub lambdas: Vec<Vec<Vec<f64>>>,
    /// `[time][z][eta]`.
    pub traces: Vec<Vec<Vec<C64>>>,
    pub final_matrix: Matrix,
}

/// One exact transition of the flow over `dt`, applied in place.
fn advance(x: &mut Matrix, kind: FlowKind, dt: f64, class: SymmetryClass, noise: bool, rng: &mut impl Rng) {
    let n = x.nrows();
    let (decay, sd) = match kind {
        FlowKind::Brownian => (1.0, (dt / n as f64).sqrt()),
        FlowKind::OrnsteinUhlenbeck => ((-0.5 * dt).exp(), ((1.0 - (-dt).exp()) / n as f64).sqrt()),
    };
    for i in 0..n {
        for j in 0..n {
            let xi = if !noise {
                C64::new(0.0, 0.0)
            } else if class == SymmetryClass::Complex {
                C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                    * std::f64::consts::FRAC_1_SQRT_2
            } else {
                C64::new(rng.sample(StandardNormal), 0.0)
            };
            x[(i, j)] = x[(i, j)] * decay + xi * sd;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    pub dt: f64,
    /// Switch off the stochastic increments.
    pub noise: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { dt: MAX_FLOW_STEP, noise: true }
    }
}

/// Runs sample `index` of the ensemble along the flow, recording the tracked quantities on `t_grid`.
///
/// Steps use the exact Gaussian transition of each flow, so the time step only controls how often
/// fresh increments are drawn.
pub fn matrix_flow(
    spec: &EnsembleSpec,
    index: u64,
    kind: FlowKind,
    t_grid: &[f64],
    tracking: &FlowTracking,
    opts: FlowOptions,
) -> Result<MatrixFlowPath> {
    if !(opts.dt > 0.0 && opts.dt <= MAX_FLOW_STEP) {
        return Err(LabError::config("flow.dt", format!("time step {} must lie in (0, {MAX_FLOW_STEP}]", opts.dt)));
    }
    if spec.n > 512 {
        return Err(LabError::config("ensemble.n", "matrix flows are limited to n <= 512"));
    }
    if t_grid.iter().any(|t| !(*t >= 0.0)) || t_grid.windows(2).any(|p| p[1] < p[0]) {
        return Err(LabError::config("flow.t_grid", "time grid must be nonnegative and ascending"));
    }
    if tracking.indices.iter().any(|&i| i == 0 || i > spec.n) {
        return Err(LabError::config("flow.tracking.indices", format!("indices must lie in 1..={}", spec.n)));
    }
    let mut x = sample(spec, index)?;
    let mut rng = sample_rng(derive_seed(spec.seed, "matrix-flow"), index);
    let mut t = 0.0;
    let mut out = MatrixFlowPath {
        kind,
        times: t_grid.to_vec(),
        lambdas: Vec::new(),
        traces: Vec::new(),
        final_matrix: Matrix::zeros(0, 0),
    };
    for &target in t_grid {
        while target - t > 1e-15 {
            let h = opts.dt.min(target - t);
            advance(&mut x, kind, h, spec.class, opts.noise, &mut rng);
            t += h;
        }
        t = target;
        let mut lam_t = Vec::with_capacity(tracking.zs.len());
        let mut tr_t = Vec::with_capacity(tracking.zs.len());
        for z in &tracking.zs {
            let z = C64::new(z[0], z[1]);
            if tracking.indices.is_empty() && tracking.etas.is_empty() {
                lam_t.push(Vec::new());
                tr_t.push(Vec::new());
                continue;
            }
            let sv = singular_values_shifted(&x, z)?;
            lam_t.push(tracking.indices.iter().map(|&i| sv[i - 1]).collect());
            tr_t.push(tracking.etas.iter().map(|&eta| resolvent_trace(&sv, C64::new(0.0, eta))).collect());
        }
        out.lambdas.push(lam_t);
        out.traces.push(tr_t);
    }
    out.final_matrix = x;
    Ok(out)
}
