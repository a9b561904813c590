//! Mollified indicators, envelopes and Girko's Hermitization formula.

use crate::error::{LabError, Result};
use crate::mat2::C64;
use crate::quad::{integrate, kronrod15, QuadOptions};
use crate::spectra::{hessenberg_form, shifted, singular_values_shifted, Matrix, Spectrum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

/// `exp(-1/(1-r^2))` on the unit disk, unnormalized.
fn bump(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r * r)).exp()
    }
}

fn bump_dr(r: f64) -> f64 {
    let b = bump(r);
    if b == 0.0 {
        return 0.0;
    }
    let s = 1.0 - r * r;
    b * (-2.0 * r / (s * s))
}

fn bump_laplacian(r: f64) -> f64 {
    let b = bump(r);
    if b == 0.0 {
        return 0.0;
    }
    let s = 1.0 - r * r;
    let r2 = r * r;
    b * (4.0 * r2 / (s * s * s * s) - 4.0 / (s * s) - 8.0 * r2 / (s * s * s))
}

fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| {
        2.0 * PI
            * integrate(|r| bump(r) * r, 0.0, 1.0, QuadOptions { abs_tol: 1e-16, rel_tol: 1e-15, max_intervals: 500 })
                .expect("bump mass quadrature")
    })
}

/// The unit-mass radial mollifier `omega_eps(x) = eps^{-2} omega(x/eps)`.
#[derive(Clone, Copy, Debug)]
pub struct Mollifier {
    pub eps: f64,
    norm: f64,
}

impl Mollifier {
    pub fn new(eps: f64) -> Self {
        Mollifier { eps, norm: 1.0 / bump_mass() }
    }

    /// `eps = N^{-a}`.
    pub fn at_scale(a: f64, n: usize) -> Self {
        Mollifier::new((n as f64).powf(-a))
    }

    pub fn value(&self, r: f64) -> f64 {
        self.norm * bump(r / self.eps) / (self.eps * self.eps)
    }

    pub fn dr(&self, r: f64) -> f64 {
        self.norm * bump_dr(r / self.eps) / self.eps.powi(3)
    }

    pub fn laplacian(&self, r: f64) -> f64 {
        self.norm * bump_laplacian(r / self.eps) / self.eps.powi(4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    MollifiedIndicator,
    AnalyticSmooth,
}

/// A real test function on the plane with evaluable derivatives.
pub trait TestFunction: Send + Sync {
    fn value(&self, z: C64) -> f64;
    fn gradient(&self, z: C64) -> (f64, f64);
    fn laplacian(&self, z: C64) -> f64;
    /// A disk containing the support.
    fn support(&self) -> (C64, f64);
    fn construction(&self) -> Construction;
    /// Scale exponent `a` of the mollifier, zero for analytic functions.
    fn scale_exponent(&self) -> f64 {
        0.0
    }
    /// Midpoint cells covering the support of the Laplacian.
    fn laplacian_nodes(&self, grid: &GirkoGrid) -> Vec<QuadCell>;
}

/// Midpoint cell: node `z` and weight equal to the cell area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadCell {
    pub z: C64,
    pub weight: f64,
}

impl QuadCell {
    pub fn square(z: C64, h: f64) -> Self {
        QuadCell { z, weight: h * h }
    }

    /// Annular sector around `center` with mid-radius `r`, radial width `dr` and opening `dphi`.
    pub fn polar(center: C64, r: f64, theta: f64, dr: f64, dphi: f64) -> Self {
        QuadCell { z: center + C64::from_polar(r, theta), weight: r * dr * dphi }
    }
}

/// Base shapes, before centering and `N^{-alpha}` scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Shape {
    Disk {
        radius: f64,
    },
    AnnulusSector {
        r_inner: f64,
        r_outer: f64,
        theta_start: f64,
        theta_end: f64,
    },
    Rectangle {
        half_width: f64,
        half_height: f64,
    },
    /// `{|x| < radius} ∩ {Re(conj(e^{i normal_angle}) x) < offset}`.
    ClippedDisk {
        radius: f64,
        normal_angle: f64,
        offset: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub shape: Shape,
    #[serde(default)]
    pub center: [f64; 2],
    /// `Omega_N = center + N^{-alpha} * shape`.
    #[serde(default)]
    pub alpha: f64,
}

impl DomainSpec {
    pub fn disk(radius: f64) -> Self {
        DomainSpec { shape: Shape::Disk { radius }, center: [0.0, 0.0], alpha: 0.0 }
    }

    pub fn center(&self) -> C64 {
        C64::new(self.center[0], self.center[1])
    }

    pub fn at(&self, n: usize) -> ScaledDomain {
        ScaledDomain { shape: self.shape.clone(), center: self.center(), scale: (n as f64).powf(-self.alpha) }
    }

    pub fn validate(&self, max_abs_z: f64) -> Result<()> {
        let bad = |m: String| Err(LabError::config("domain", m));
        match self.shape {
            Shape::Disk { radius } if !(radius > 0.0) => return bad("disk radius must be positive".into()),
            Shape::AnnulusSector { r_inner, r_outer, theta_start, theta_end }
                if !(0.0 <= r_inner
                    && r_inner < r_outer
                    && theta_start < theta_end
                    && theta_end - theta_start < 2.0 * PI) =>
            {
                return bad("annulus sector needs 0 <= r_inner < r_outer and 0 < theta_end - theta_start < 2 pi".into())
            }
            Shape::Rectangle { half_width, half_height } if !(half_width > 0.0 && half_height > 0.0) => {
                return bad("rectangle half sizes must be positive".into())
            }
            Shape::ClippedDisk { radius, offset, .. } if !(radius > 0.0 && offset.abs() < radius) => {
                return bad("clipped disk needs radius > 0 and |offset| < radius".into())
            }
            _ => {}
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return bad(format!("alpha = {} must lie in [0, 1/2)", self.alpha));
        }
        let reach = self.center().norm() + self.at(1).bounding_radius();
        if reach > max_abs_z {
            return bad(format!("domain reaches |z| = {reach:.4}, beyond the allowed {max_abs_z}"));
        }
        Ok(())
    }
}

fn seg_dist(p: C64, a: C64, b: C64) -> f64 {
    let d = b - a;
    let t = (((p - a) * d.conj()).re / d.norm_sqr()).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

fn angle_in(theta: f64, start: f64, end: f64) -> bool {
    let span = end - start;
    let t = (theta - start).rem_euclid(2.0 * PI);
    t <= span
}

/// Distance from `p` to the arc of radius `r` about the origin, angles `[start, end]`.
fn arc_dist(p: C64, r: f64, start: f64, end: f64) -> f64 {
    if angle_in(p.arg(), start, end) && p.norm() > 0.0 {
        (p.norm() - r).abs()
    } else {
        let a = C64::from_polar(r, start);
        let b = C64::from_polar(r, end);
        (p - a).norm().min((p - b).norm())
    }
}

/// A domain at a concrete `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledDomain {
    pub shape: Shape,
    pub center: C64,
    pub scale: f64,
}

impl ScaledDomain {
    fn base(&self, z: C64) -> C64 {
        (z - self.center) / self.scale
    }

    pub fn contains(&self, z: C64) -> bool {
        let p = self.base(z);
        match self.shape {
            Shape::Disk { radius } => p.norm() < radius,
            Shape::AnnulusSector { r_inner, r_outer, theta_start, theta_end } => {
                let r = p.norm();
                r > r_inner && r < r_outer && angle_in(p.arg(), theta_start, theta_end)
            }
            Shape::Rectangle { half_width, half_height } => p.re.abs() < half_width && p.im.abs() < half_height,
            Shape::ClippedDisk { radius, normal_angle, offset } => {
                p.norm() < radius && (p * C64::from_polar(1.0, -normal_angle)).re < offset
            }
        }
    }

    /// Negative inside, positive outside, magnitude = distance to the boundary.
    pub fn signed_distance(&self, z: C64) -> f64 {
        let p = self.base(z);
        let d = match self.shape {
            Shape::Disk { radius } => return (p.norm() - radius) * self.scale,
            Shape::Rectangle { half_width, half_height } => {
                let qx = p.re.abs() - half_width;
                let qy = p.im.abs() - half_height;
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                return (outside + qx.max(qy).min(0.0)) * self.scale;
            }
            Shape::AnnulusSector { r_inner, r_outer, theta_start, theta_end } => {
                let mut d = arc_dist(p, r_outer, theta_start, theta_end);
                if r_inner > 0.0 {
                    d = d.min(arc_dist(p, r_inner, theta_start, theta_end));
                }
                for th in [theta_start, theta_end] {
                    d = d.min(seg_dist(p, C64::from_polar(r_inner, th), C64::from_polar(r_outer, th)));
                }
                d
            }
            Shape::ClippedDisk { radius, normal_angle, offset } => {
                let half = (offset / radius).acos();
                let a = C64::from_polar(radius, normal_angle + half);
                let b = C64::from_polar(radius, normal_angle - half);
                let arc = arc_dist(p, radius, normal_angle + half, normal_angle + 2.0 * PI - half);
                arc.min(seg_dist(p, a, b))
            }
        };
        if self.contains(z) {
            -d * self.scale
        } else {
            d * self.scale
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        let r = match self.shape {
            Shape::Disk { radius } => radius,
            Shape::AnnulusSector { r_outer, .. } => r_outer,
            Shape::Rectangle { half_width, half_height } => half_width.hypot(half_height),
            Shape::ClippedDisk { radius, .. } => radius,
        };
        r * self.scale
    }

    /// Radius of a disk guaranteed to fit inside.
    pub fn inradius(&self) -> f64 {
        let r = match self.shape {
            Shape::Disk { radius } => radius,
            Shape::AnnulusSector { r_inner, r_outer, theta_start, theta_end } => {
                let radial = 0.5 * (r_outer - r_inner);
                let mid = 0.5 * (r_outer + r_inner);
                let angular = mid * (0.5 * (theta_end - theta_start)).min(0.5 * PI).sin();
                radial.min(angular)
            }
            Shape::Rectangle { half_width, half_height } => half_width.min(half_height),
            Shape::ClippedDisk { radius, offset, .. } => 0.5 * (radius + offset),
        };
        r * self.scale
    }

    pub fn area(&self) -> f64 {
        let a = match self.shape {
            Shape::Disk { radius } => PI * radius * radius,
            Shape::AnnulusSector { r_inner, r_outer, theta_start, theta_end } => {
                0.5 * (theta_end - theta_start) * (r_outer * r_outer - r_inner * r_inner)
            }
            Shape::Rectangle { half_width, half_height } => 4.0 * half_width * half_height,
            Shape::ClippedDisk { radius, offset, .. } => {
                let h = (offset / radius).acos();
                radius * radius * (PI - h + h.sin() * h.cos())
            }
        };
        a * self.scale * self.scale
    }

    pub fn perimeter(&self) -> f64 {
        let l = match self.shape {
            Shape::Disk { radius } => 2.0 * PI * radius,
            Shape::AnnulusSector { r_inner, r_outer, theta_start, theta_end } => {
                (theta_end - theta_start) * (r_inner + r_outer) + 2.0 * (r_outer - r_inner)
            }
            Shape::Rectangle { half_width, half_height } => 4.0 * (half_width + half_height),
            Shape::ClippedDisk { radius, offset, .. } => {
                let h = (offset / radius).acos();
                2.0 * radius * (PI - h) + 2.0 * radius * h.sin()
            }
        };
        l * self.scale
    }
}

/// Resolution of the z-quadrature on the Laplacian support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GirkoGrid {
    /// Midpoint nodes across the `2 eps` tube.
    pub across: usize,
    /// Uniform refinement factor applied in every direction.
    pub refine: usize,
}

impl Default for GirkoGrid {
    fn default() -> Self {
        GirkoGrid { across: 16, refine: 1 }
    }
}

/// Angular measure of `{theta : |rho - s e^{i theta}| < radius}` seen from distance `rho`,
/// together with the half-opening angle.
fn opening(rho: f64, s: f64, radius: f64) -> Option<f64> {
    if rho + s <= radius {
        return Some(PI);
    }
    if (rho - s).abs() >= radius || radius <= 0.0 {
        if s >= rho + radius {
            return None;
        }
        return Some(0.0);
    }
    let x = ((rho * rho + s * s - radius * radius) / (2.0 * rho * s)).clamp(-1.0, 1.0);
    Some(x.acos())
}

/// `1_Omega * omega_eps`, where `Omega` is the sub-level set `{d_Omega < offset}`.
#[derive(Clone, Debug)]
pub struct MollifiedIndicator {
    pub domain: ScaledDomain,
    pub mollifier: Mollifier,
    /// Signed offset of the level set: `0` for the domain, `±eps` for the envelopes.
    pub offset: f64,
    pub a: f64,
}

const RADIAL_OPTS: QuadOptions = QuadOptions { abs_tol: 0.0, rel_tol: 1e-13, max_intervals: 400 };

impl MollifiedIndicator {
    fn disk_radius(&self) -> Option<f64> {
        match self.domain.shape {
            Shape::Disk { radius } => Some(radius * self.domain.scale + self.offset),
            _ => None,
        }
    }

    fn radial(&self, rho: f64, kernel: impl Fn(f64) -> f64, weight: impl Fn(f64) -> f64) -> f64 {
        let eps = self.mollifier.eps;
        let radius = self.disk_radius().expect("disk");
        let kink = (rho - radius).abs().min(eps);
        let f = |s: f64| kernel(s) * s * weight(s);
        // the opening angle has a square-root onset at s = kink; s = kink + (eps - kink) t^2 removes it
        let span = eps - kink;
        let partial = |t: f64| 2.0 * span * t * f(kink + span * t * t);
        let peak = [0.0, 0.3, 0.6, 0.9].iter().map(|t| kernel(t * eps).abs()).fold(0.0, f64::max);
        let opts = QuadOptions { abs_tol: 1e-14 * peak * eps * eps, ..RADIAL_OPTS };
        let v = integrate(f, 0.0, kink, opts).and_then(|a| Ok(a + integrate(partial, 0.0, 1.0, opts)?));
        v.unwrap_or(f64::NAN)
    }

    /// Level-set depth; the value is exactly 1 (or 0) once the mollifier ball is inside (outside).
    fn depth(&self, z: C64) -> f64 {
        self.domain.signed_distance(z) - self.offset
    }

    fn polar_sum(&self, z: C64, kernel: impl Fn(f64) -> f64) -> f64 {
        let eps = self.mollifier.eps;
        let n_theta = 96;
        let mut acc = 0.0;
        for &(s, ws) in kronrod15(0.0, eps).iter() {
            let k = kernel(s) * s * ws;
            if k == 0.0 {
                continue;
            }
            let mut inside = 0usize;
            for j in 0..n_theta {
                let th = 2.0 * PI * (j as f64 + 0.5) / n_theta as f64;
                if self.depth(z - C64::from_polar(s, th)) < 0.0 {
                    inside += 1;
                }
            }
            acc += k * 2.0 * PI * inside as f64 / n_theta as f64;
        }
        acc
    }
}

impl TestFunction for MollifiedIndicator {
    fn value(&self, z: C64) -> f64 {
        let eps = self.mollifier.eps;
        let d = self.depth(z);
        if d <= -eps {
            return 1.0;
        }
        if d >= eps {
            return 0.0;
        }
        let v = match self.disk_radius() {
            Some(radius) => {
                let rho = (z - self.domain.center).norm();
                let m = self.mollifier;
                self.radial(rho, |s| m.value(s), |s| 2.0 * opening(rho, s, radius).unwrap_or(0.0))
            }
            None => {
                let m = self.mollifier;
                self.polar_sum(z, |s| m.value(s))
            }
        };
        v.clamp(0.0, 1.0)
    }

    fn gradient(&self, z: C64) -> (f64, f64) {
        let eps = self.mollifier.eps;
        let d = self.depth(z);
        if d.abs() >= eps {
            return (0.0, 0.0);
        }
        match self.disk_radius() {
            Some(radius) => {
                let v = z - self.domain.center;
                let rho = v.norm();
                if rho == 0.0 {
                    return (0.0, 0.0);
                }
                let m = self.mollifier;
                let df = self.radial(rho, |s| m.dr(s), |s| 2.0 * opening(rho, s, radius).unwrap_or(0.0).sin());
                (df * v.re / rho, df * v.im / rho)
            }
            None => {
                let h = 1e-3 * eps;
                let fx = (self.value(z + h) - self.value(z - h)) / (2.0 * h);
                let fy = (self.value(z + C64::new(0.0, h)) - self.value(z - C64::new(0.0, h))) / (2.0 * h);
                (fx, fy)
            }
        }
    }

    fn laplacian(&self, z: C64) -> f64 {
        let eps = self.mollifier.eps;
        if self.depth(z).abs() >= eps {
            return 0.0;
        }
        let m = self.mollifier;
        match self.disk_radius() {
            Some(radius) => {
                let rho = (z - self.domain.center).norm();
                self.radial(rho, |s| m.laplacian(s), |s| 2.0 * opening(rho, s, radius).unwrap_or(0.0))
            }
            None => self.polar_sum(z, |s| m.laplacian(s)),
        }
    }

    fn support(&self) -> (C64, f64) {
        (self.domain.center, self.domain.bounding_radius() + self.offset.max(0.0) + self.mollifier.eps)
    }

    fn construction(&self) -> Construction {
        Construction::MollifiedIndicator
    }

    fn scale_exponent(&self) -> f64 {
        self.a
    }

    fn laplacian_nodes(&self, grid: &GirkoGrid) -> Vec<QuadCell> {
        let eps = self.mollifier.eps;
        let across = grid.across.max(1) * grid.refine.max(1);
        let h = 2.0 * eps / across as f64;
        if let Some(radius) = self.disk_radius() {
            let lo = (radius - eps).max(0.0);
            let hi = radius + eps;
            let nr = ((hi - lo) / h).ceil() as usize;
            let hr = (hi - lo) / nr as f64;
            let nphi = ((2.0 * PI * hi / hr).ceil() as usize).max(8);
            let hphi = 2.0 * PI / nphi as f64;
            let mut out = Vec::with_capacity(nr * nphi);
            for i in 0..nr {
                let r = lo + (i as f64 + 0.5) * hr;
                for j in 0..nphi {
                    out.push(QuadCell::polar(self.domain.center, r, j as f64 * hphi, hr, hphi));
                }
            }
            return out;
        }
        let (c, reach) = self.support();
        let n = (2.0 * reach / h).ceil() as usize;
        let hh = 2.0 * reach / n as f64;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let z = c + C64::new(-reach + (i as f64 + 0.5) * hh, -reach + (j as f64 + 0.5) * hh);
                if self.depth(z).abs() < eps {
                    out.push(QuadCell::square(z, hh));
                }
            }
        }
        out
    }
}

/// `f = 1_{Omega_N} * omega_{a,N}`.
pub fn mollify(domain: &DomainSpec, a: f64, n: usize) -> Result<MollifiedIndicator> {
    if !(a >= 0.0) {
        return Err(LabError::config("girko.a", format!("scale exponent a = {a} must be nonnegative")));
    }
    Ok(MollifiedIndicator { domain: domain.at(n), mollifier: Mollifier::at_scale(a, n), offset: 0.0, a })
}

/// `(f_-, f_+)`, mollified indicators of the inward and outward `N^{-a}` offsets.
pub fn envelopes(domain: &DomainSpec, a: f64, n: usize) -> Result<(MollifiedIndicator, MollifiedIndicator)> {
    let f = mollify(domain, a, n)?;
    let eps = f.mollifier.eps;
    if eps >= f.domain.inradius() {
        return Err(LabError::Domain(format!(
            "inward offset by {eps:.4} exceeds the inradius {:.4}; the inner envelope would not stay simply connected",
            f.domain.inradius()
        )));
    }
    let minus = MollifiedIndicator { offset: -eps, ..f.clone() };
    let plus = MollifiedIndicator { offset: eps, ..f };
    Ok((minus, plus))
}

/// `amplitude * exp(-|z - center|^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub center: [f64; 2],
    pub width: f64,
    pub amplitude: f64,
}

impl GaussianBump {
    fn c(&self) -> C64 {
        C64::new(self.center[0], self.center[1])
    }
}

impl TestFunction for GaussianBump {
    fn value(&self, z: C64) -> f64 {
        self.amplitude * (-(z - self.c()).norm_sqr() / (2.0 * self.width * self.width)).exp()
    }

    fn gradient(&self, z: C64) -> (f64, f64) {
        let d = z - self.c();
        let g = -self.value(z) / (self.width * self.width);
        (g * d.re, g * d.im)
    }

    fn laplacian(&self, z: C64) -> f64 {
        let s2 = self.width * self.width;
        self.value(z) * ((z - self.c()).norm_sqr() / (s2 * s2) - 2.0 / s2)
    }

    fn support(&self) -> (C64, f64) {
        (self.c(), 9.0 * self.width)
    }

    fn construction(&self) -> Construction {
        Construction::AnalyticSmooth
    }

    fn laplacian_nodes(&self, grid: &GirkoGrid) -> Vec<QuadCell> {
        let reach = self.support().1;
        let nr = grid.across.max(1) * grid.refine.max(1) * 4;
        let hr = reach / nr as f64;
        let nphi = ((2.0 * PI * reach / hr).ceil() as usize).max(8);
        let hphi = 2.0 * PI / nphi as f64;
        let mut out = Vec::with_capacity(nr * nphi);
        for i in 0..nr {
            let r = (i as f64 + 0.5) * hr;
            for j in 0..nphi {
                out.push(QuadCell::polar(self.c(), r, j as f64 * hphi, hr, hphi));
            }
        }
        out
    }
}

/// Cutoffs of the eta-integration, `0 < eta_l < eta_0 < eta_c < t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regimes {
    pub eta_l: f64,
    pub eta_0: f64,
    pub eta_c: f64,
    pub t: f64,
}

impl Regimes {
    pub fn for_size(n: usize) -> Self {
        let n = n as f64;
        Regimes { eta_l: n.powf(-10.0), eta_0: n.powf(-1.05), eta_c: n.powf(-0.9), t: n.powi(3) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eta_l >= 0.0 && self.eta_l < self.eta_0 && self.eta_0 < self.eta_c && self.eta_c < self.t;
        if !ok || !self.t.is_finite() {
            return Err(LabError::config(
                "regimes",
                format!(
                    "cutoffs must satisfy 0 <= η_L < η_0 < η_c < T, got η_L={}, η_0={}, η_c={}, T={}",
                    self.eta_l, self.eta_0, self.eta_c, self.t
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GirkoBreakdown {
    pub j_t: f64,
    pub i_0_l: f64,
    pub i_l_0: f64,
    pub i_0_c: f64,
    pub i_c_t: f64,
    pub total: f64,
    /// `(1/2 pi) sum_nodes Delta f log|det(X - z)|` on the same nodes.
    pub identity: f64,
    pub nodes: usize,
}

#[derive(Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Regime integrands at one node, before the `weight * Laplacian` factor.
///
/// Every piece is a difference of `log det((X - z)(X - z)* + eta^2)`, taken from Cholesky and LU
/// factorizations; nodes where that route cannot resolve a piece fall back to singular values.
fn node_pieces(h: &Matrix, z: C64, regimes: &Regimes) -> Result<[f64; 6]> {
    match logdet_pieces(h, z, regimes) {
        Some(p) => Ok(p),
        None => singular_value_pieces(h, z, regimes),
    }
}

/// Relative size below which a piece no longer changes a double-precision sum of the others.
const NEGLIGIBLE: f64 = 1e-20;

/// `h` is the Hessenberg form of the sample.
fn logdet_pieces(h: &Matrix, z: C64, regimes: &Regimes) -> Option<[f64; 6]> {
    let Regimes { eta_l, eta_0, eta_c, t } = *regimes;
    let y = shifted(h, z);
    let n = y.nrows() as f64;
    let gram = &y * y.adjoint();
    let log_abs_det = hessenberg_log_abs_det(y)?;
    let ld_0 = shifted_logdet(&gram, eta_0)?;
    let ld_c = shifted_logdet(&gram, eta_c)?;
    // sum ln(1 + eta_0^2 / s^2) >= ln(1 + eta_0^2 / s_min^2) bounds s_min from below
    let d0 = ld_0 - 2.0 * log_abs_det;
    let lower_piece_bound = n * (eta_l / eta_0).powi(2) * d0.exp_m1();
    if !(lower_piece_bound < NEGLIGIBLE) {
        return None;
    }
    let frob2 = gram.diagonal().column_vector().iter().map(|v| v.re).sum::<f64>();
    let tail = if frob2 < 1e-6 * t * t {
        let gram_frob2: f64 = (0..gram.ncols()).map(|j| gram.col(j).iter().map(|v| v.norm_sqr()).sum::<f64>()).sum();
        frob2 / (t * t) - 0.5 * gram_frob2 / t.powi(4)
    } else {
        shifted_logdet(&gram, t)? - 2.0 * n * t.ln()
    };
    Some([tail, 0.0, ld_0 - 2.0 * log_abs_det, ld_c - ld_0, tail - ld_c, log_abs_det])
}

/// `log|det Y|` for upper Hessenberg `Y`, by elimination with adjacent-row pivoting.
fn hessenberg_log_abs_det(mut y: Matrix) -> Option<f64> {
    let n = y.nrows();
    let mut v = 0.0;
    for k in 0..n {
        if k + 1 < n && y[(k + 1, k)].norm() > y[(k, k)].norm() {
            for j in k..n {
                let t = y[(k, j)];
                y[(k, j)] = y[(k + 1, j)];
                y[(k + 1, j)] = t;
            }
        }
        let pivot = y[(k, k)];
        v += pivot.norm().ln();
        if k + 1 < n && pivot != C64::new(0.0, 0.0) {
            let l = y[(k + 1, k)] / pivot;
            for j in k + 1..n {
                let t = y[(k, j)];
                y[(k + 1, j)] -= l * t;
            }
        }
    }
    v.is_finite().then_some(v)
}

fn shifted_logdet(gram: &Matrix, eta: f64) -> Option<f64> {
    let mut h = gram.clone();
    for i in 0..h.nrows() {
        h[(i, i)] += eta * eta;
    }
    let l = h.llt(faer::Side::Lower).ok()?;
    let l = l.L();
    let v: f64 = (0..h.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum();
    v.is_finite().then_some(v)
}

fn singular_value_pieces(x: &Matrix, z: C64, regimes: &Regimes) -> Result<[f64; 6]> {
    let sv = singular_values_shifted(x, z)?;
    let Regimes { eta_l, eta_0, eta_c, t } = *regimes;
    let mut acc = [0.0; 6];
    for &l in &sv {
        if l == 0.0 {
            return Err(LabError::SingularIntegral);
        }
        let l2 = l * l;
        let tail = (l2 / (t * t)).ln_1p();
        acc[0] += tail;
        acc[1] += ((l2 + eta_l * eta_l) / l2).ln();
        acc[2] += log_ratio(l2, eta_0, eta_l);
        acc[3] += log_ratio(l2, eta_c, eta_0);
        acc[4] += tail - (l2 + eta_c * eta_c).ln();
        acc[5] += l.ln();
    }
    Ok(acc)
}

fn log_ratio(l2: f64, hi: f64, lo: f64) -> f64 {
    ((l2 + hi * hi) / (l2 + lo * lo)).ln()
}

/// Girko's formula evaluated regime by regime on the f-adapted midpoint grid.
///
/// The `log T^2` constant of `log|det(H - iT)|` is dropped from both `J_T` and `I_{eta_c}^T`:
/// it multiplies `int Delta f = 0` and cancels exactly between the two.
pub fn girko_evaluate(x: &Matrix, f: &dyn TestFunction, regimes: &Regimes, grid: &GirkoGrid) -> Result<GirkoBreakdown> {
    regimes.validate()?;
    if grid.across * grid.refine < 16 {
        return Err(LabError::config(
            "girko.grid.across",
            format!("{} nodes across the tube is below 8 per mollification length", grid.across * grid.refine),
        ));
    }
    let cells = f.laplacian_nodes(grid);
    let h = hessenberg_form(x);
    let pieces: Vec<[f64; 6]> = cells
        .par_iter()
        .map(|cell| {
            let lap = f.laplacian(cell.z);
            if !lap.is_finite() {
                return Err(LabError::Numerical(format!(
                    "Laplacian of the test function is not finite at z = {}",
                    cell.z
                )));
            }
            if lap == 0.0 {
                return Ok([0.0; 6]);
            }
            let s = cell.weight * lap;
            Ok(node_pieces(&h, cell.z, regimes)?.map(|v| v * s))
        })
        .collect::<Result<_>>()?;
    let mut sums = [Neumaier::default(); 6];
    for p in &pieces {
        for (s, v) in sums.iter_mut().zip(p) {
            s.add(*v);
        }
    }
    let k = 1.0 / (4.0 * PI);
    let j_t = k * sums[0].value();
    let i_0_l = -k * sums[1].value();
    let i_l_0 = -k * sums[2].value();
    let i_0_c = -k * sums[3].value();
    let i_c_t = -k * sums[4].value();
    Ok(GirkoBreakdown {
        j_t,
        i_0_l,
        i_l_0,
        i_0_c,
        i_c_t,
        total: j_t + i_0_l + i_l_0 + i_0_c + i_c_t,
        identity: sums[5].value() / (2.0 * PI),
        nodes: cells.len(),
    })
}

/// `sum_i f(sigma_i)`.
pub fn direct_statistic(spectrum: &Spectrum, f: &dyn TestFunction) -> f64 {
    let mut s = Neumaier::default();
    for &z in &spectrum.sigmas {
        s.add(f.value(z));
    }
    s.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_2d;
    use rand::{Rng, SeedableRng};

    fn area_integral(f: &dyn Fn(C64) -> f64, reach: f64) -> f64 {
        let opts = QuadOptions { abs_tol: 1e-9, rel_tol: 1e-9, max_intervals: 800 };
        integrate_2d(|r, th| f(C64::from_polar(r, th)) * r, (0.0, reach), (0.0, 2.0 * PI), opts).unwrap()
    }

    #[test]
    fn mollifier_has_unit_mass() {
        let m = Mollifier::new(0.07);
        let mass = 2.0 * PI * integrate(|r| m.value(r) * r, 0.0, 0.07, QuadOptions::default()).unwrap();
        assert!((mass - 1.0).abs() < 1e-12);
        let lap = 2.0 * PI * integrate(|r| m.laplacian(r) * r, 0.0, 0.07, QuadOptions::default()).unwrap();
        assert!(lap.abs() < 1e-8 / 0.07f64.powi(2));
    }

    #[test]
    fn disk_indicator_integrals() {
        let dom = DomainSpec::disk(0.5);
        let f = mollify(&dom, 0.6, 64).unwrap();
        let eps = f.mollifier.eps;
        let opts = QuadOptions { abs_tol: 1e-10, rel_tol: 1e-10, max_intervals: 500 };
        let tube = 2.0 * PI * integrate(|r| f.value(C64::new(r, 0.0)) * r, 0.5 - eps, 0.5 + eps, opts).unwrap();
        let mass = PI * (0.5 - eps).powi(2) + tube;
        assert!((mass - PI * 0.25).abs() < 1e-9, "{mass}");
        let lap = 2.0 * PI * integrate(|r| f.laplacian(C64::new(r, 0.0)) * r, 0.5 - eps, 0.5 + eps, opts).unwrap();
        assert!(lap.abs() < 1e-7, "{lap}");
        assert_eq!(f.value(C64::new(0.5 - 1.01 * eps, 0.0)), 1.0);
        assert_eq!(f.value(C64::new(0.0, 0.5 + 1.01 * eps)), 0.0);
    }

    #[test]
    fn gradient_and_laplacian_match_differences() {
        let f = mollify(&DomainSpec::disk(0.5), 0.6, 64).unwrap();
        let z = C64::new(0.3, 0.4 + 0.01);
        let h = 1e-5;
        let fx = (f.value(z + h) - f.value(z - h)) / (2.0 * h);
        let fy = (f.value(z + C64::new(0.0, h)) - f.value(z - C64::new(0.0, h))) / (2.0 * h);
        let (gx, gy) = f.gradient(z);
        assert!((gx - fx).abs() < 1e-5 * gx.abs().max(1.0));
        assert!((gy - fy).abs() < 1e-5 * gy.abs().max(1.0));
        let h = 1e-4;
        let lap_fd = (f.value(z + h) + f.value(z - h) + f.value(z + C64::new(0.0, h)) + f.value(z - C64::new(0.0, h))
            - 4.0 * f.value(z))
            / (h * h);
        assert!((f.laplacian(z) - lap_fd).abs() < 1e-3 * f.laplacian(z).abs().max(1.0));
    }

    #[test]
    fn laplacian_l1_scaling() {
        let dom = DomainSpec::disk(0.5);
        let mut norms = Vec::new();
        for &n in &[64usize, 256, 1024] {
            let f = mollify(&dom, 0.6, n).unwrap();
            let eps = f.mollifier.eps;
            let l1 = 2.0
                * PI
                * integrate(
                    |r| f.laplacian(C64::new(r, 0.0)).abs() * r,
                    0.5 - eps,
                    0.5 + eps,
                    QuadOptions { abs_tol: 1e-6, rel_tol: 1e-7, max_intervals: 500 },
                )
                .unwrap();
            norms.push(l1 / (n as f64).powf(0.6));
        }
        let spread = norms.iter().cloned().fold(0.0, f64::max) / norms.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1.2, "{norms:?}");
    }

    #[test]
    fn envelope_ordering_on_random_points() {
        let shapes = [
            DomainSpec::disk(0.5),
            DomainSpec {
                shape: Shape::Rectangle { half_width: 0.4, half_height: 0.25 },
                center: [0.1, -0.1],
                alpha: 0.0,
            },
            DomainSpec {
                shape: Shape::AnnulusSector { r_inner: 0.2, r_outer: 0.6, theta_start: 0.3, theta_end: 2.5 },
                center: [0.0, 0.0],
                alpha: 0.0,
            },
            DomainSpec {
                shape: Shape::ClippedDisk { radius: 0.5, normal_angle: 0.7, offset: 0.2 },
                center: [0.0, 0.1],
                alpha: 0.1,
            },
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for dom in &shapes {
            let (fm, fp) = envelopes(dom, 0.6, 64).unwrap();
            let sd = dom.at(64);
            for _ in 0..2000 {
                let z = C64::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9));
                let ind = if sd.contains(z) { 1.0 } else { 0.0 };
                assert!(fm.value(z) <= ind && ind <= fp.value(z), "{dom:?} at {z}");
            }
        }
    }

    #[test]
    fn envelope_gap_area() {
        let dom = DomainSpec::disk(0.5);
        for &n in &[64usize, 256] {
            let (fm, fp) = envelopes(&dom, 0.6, n).unwrap();
            let eps = fm.mollifier.eps;
            let gap = 2.0
                * PI
                * integrate(
                    |r| (fp.value(C64::new(r, 0.0)) - fm.value(C64::new(r, 0.0))) * r,
                    0.5 - 2.0 * eps,
                    0.5 + 2.0 * eps,
                    QuadOptions { abs_tol: 1e-10, rel_tol: 1e-10, max_intervals: 500 },
                )
                .unwrap();
            let bound = 2.0 * eps * 2.0 * PI * 0.5 * 1.01;
            assert!(gap <= bound && gap > 0.5 * bound);
        }
    }

    #[test]
    fn signed_distance_shapes() {
        let rect = DomainSpec {
            shape: Shape::Rectangle { half_width: 0.4, half_height: 0.2 },
            center: [0.0, 0.0],
            alpha: 0.0,
        }
        .at(1);
        assert!((rect.signed_distance(C64::new(0.0, 0.0)) + 0.2).abs() < 1e-15);
        assert!((rect.signed_distance(C64::new(0.7, 0.6)) - 0.5).abs() < 1e-15);
        let sector = DomainSpec {
            shape: Shape::AnnulusSector { r_inner: 0.2, r_outer: 0.6, theta_start: 0.0, theta_end: PI / 2.0 },
            center: [0.0, 0.0],
            alpha: 0.0,
        }
        .at(1);
        assert!((sector.signed_distance(C64::from_polar(0.4, PI / 4.0)) + 0.2).abs() < 1e-12);
        assert!((sector.signed_distance(C64::new(0.4, -0.1)) - 0.1).abs() < 1e-12);
        let clipped = DomainSpec {
            shape: Shape::ClippedDisk { radius: 0.5, normal_angle: 0.0, offset: 0.1 },
            center: [0.0, 0.0],
            alpha: 0.0,
        }
        .at(1);
        assert!((clipped.signed_distance(C64::new(0.2, 0.0)) - 0.1).abs() < 1e-12);
        assert!((clipped.signed_distance(C64::new(-0.3, 0.0)) + 0.2).abs() < 1e-12);
        let sector_area = sector.area();
        assert!((sector_area - 0.25 * PI * (0.36 - 0.04)).abs() < 1e-14);
    }

    #[test]
    fn generic_shape_mass_matches_area() {
        let dom = DomainSpec {
            shape: Shape::Rectangle { half_width: 0.3, half_height: 0.2 },
            center: [0.0, 0.0],
            alpha: 0.0,
        };
        let f = mollify(&dom, 1.0, 20).unwrap();
        let h = 0.004;
        let mut acc = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                let z = C64::new(-0.4 + (i as f64 + 0.5) * h, -0.4 + (j as f64 + 0.5) * h);
                acc += f.value(z) * h * h;
            }
        }
        assert!((acc - 0.24).abs() < 2e-3);
    }

    #[test]
    fn sharp_limit() {
        let dom = DomainSpec::disk(0.5);
        let (fm, fp) = envelopes(&dom, 6.0, 64).unwrap();
        for &r in &[0.2, 0.49, 0.51, 0.8] {
            let z = C64::new(r, 0.0);
            let ind = if r < 0.5 { 1.0 } else { 0.0 };
            assert_eq!(fm.value(z), ind);
            assert_eq!(fp.value(z), ind);
        }
    }

    #[test]
    fn gaussian_bump_derivatives() {
        let g = GaussianBump { center: [0.1, 0.2], width: 0.2, amplitude: 1.5 };
        let total = area_integral(&|z| g.laplacian(z + g.c()), 2.0);
        assert!(total.abs() < 1e-8);
    }

    #[test]
    fn regimes_are_ordered() {
        let r = Regimes::for_size(64);
        r.validate().unwrap();
        let bad = Regimes { eta_0: 1e-20, ..r };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("η_L < η_0 < η_c < T"));
    }

    #[test]
    fn logdet_route_matches_singular_values() {
        use crate::spectra::{complex_spectrum, sample, EnsembleSpec};
        use crate::stability::SymmetryClass;
        let n = 48;
        let x = sample(&EnsembleSpec::ginibre(n, SymmetryClass::Complex, 3), 0).unwrap();
        let h = hessenberg_form(&x);
        let regimes = Regimes::for_size(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = C64::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
            let a = logdet_pieces(&h, z, &regimes).expect("generic node");
            let b = singular_value_pieces(&x, z, &regimes).unwrap();
            for k in 0..6 {
                let scale = b[k].abs().max(1e-6);
                assert!((a[k] - b[k]).abs() < 1e-9 * scale.max(1.0), "piece {k} at {z}: {} vs {}", a[k], b[k]);
            }
        }
        let sigma = complex_spectrum(&x).unwrap().sigmas[7];
        let near = sigma + C64::new(1e-13, 0.0);
        assert!(logdet_pieces(&h, near, &regimes).is_none());
        let p = node_pieces(&h, near, &regimes).unwrap();
        assert!(p[1] > 0.0 && p.iter().all(|v| v.is_finite()));
        let tight = Regimes { t: 2.0, ..regimes };
        let z = C64::new(0.1, -0.2);
        let (a, b) = (logdet_pieces(&h, z, &tight).unwrap(), singular_value_pieces(&x, z, &tight).unwrap());
        assert!((a[0] - b[0]).abs() < 1e-9 * b[0].abs());
    }
}
