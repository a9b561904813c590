//! Adaptive Gauss–Kronrod (7/15) quadrature.
#![allow(clippy::excessive_precision)]

use crate::error::{LabError, Result};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

#[derive(Clone, Copy, Debug)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { abs_tol: 1e-12, rel_tol: 1e-12, max_intervals: 2000 }
    }
}

fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Nodes and weights of the fixed 15-point Kronrod rule on `[a, b]`.
pub fn kronrod15(a: f64, b: f64) -> [(f64, f64); 15] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [(c, WGK[7] * h); 15];
    for j in 0..7 {
        out[2 * j] = (c - h * XGK[j], WGK[j] * h);
        out[2 * j + 1] = (c + h * XGK[j], WGK[j] * h);
    }
    out
}

/// Integrates `f` over `[a, b]` by global adaptive bisection.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, opts: QuadOptions) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut segs = vec![{
        let (v, e) = gk15(&mut f, a, b);
        (a, b, v, e)
    }];
    loop {
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let err: f64 = segs.iter().map(|s| s.3).sum();
        if err <= opts.abs_tol.max(opts.rel_tol * total.abs()) {
            return Ok(total);
        }
        if segs.len() >= opts.max_intervals {
            return Err(LabError::Numerical(format!(
                "adaptive quadrature on [{a}, {b}] stalled with error estimate {err:e}"
            )));
        }
        let (idx, _) = segs.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).expect("non-empty");
        let (lo, hi, _, _) = segs.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Err(LabError::Numerical(format!("quadrature interval collapsed near {mid}")));
        }
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
    }
}

/// Nested adaptive quadrature of `f(x, y)` over `[ax, bx] × [ay, by]`.
pub fn integrate_2d(
    f: impl Fn(f64, f64) -> f64,
    (ax, bx): (f64, f64),
    (ay, by): (f64, f64),
    opts: QuadOptions,
) -> Result<f64> {
    let inner_opts = QuadOptions { abs_tol: opts.abs_tol * 0.1, rel_tol: opts.rel_tol * 0.1, ..opts };
    let mut failure = None;
    let v = integrate(
        |x| match integrate(|y| f(x, y), ay, by, inner_opts) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        ax,
        bx,
        opts,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_sqrt_edge() {
        let v = integrate(|x| x * x * x - 2.0 * x, 0.0, 2.0, QuadOptions::default()).unwrap();
        assert!((v - 0.0).abs() < 1e-13);
        let semicircle = integrate(
            |x| (4.0 - x * x).max(0.0).sqrt() / (2.0 * std::f64::consts::PI),
            -2.0,
            2.0,
            QuadOptions::default(),
        )
        .unwrap();
        assert!((semicircle - 1.0).abs() < 1e-11);
    }

    #[test]
    fn fixed_rule_is_exact_for_polynomials() {
        let v: f64 = kronrod15(-1.0, 3.0).iter().map(|(x, w)| w * x.powi(20)).sum();
        assert!((v - (3f64.powi(21) + 1.0) / 21.0).abs() < 1e-12 * v);
    }

    #[test]
    fn two_dimensional_gaussian() {
        let v = integrate_2d(
            |x, y| (-(x * x + y * y)).exp(),
            (-6.0, 6.0),
            (-6.0, 6.0),
            QuadOptions { abs_tol: 1e-10, rel_tol: 1e-10, max_intervals: 500 },
        )
        .unwrap();
        assert!((v - std::f64::consts::PI).abs() < 1e-9);
    }
}
