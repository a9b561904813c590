//! Acceptance criteria, one PASS/FAIL line each. Set `ACCEPTANCE_ONLY=3,7` to run a subset.

use hyperlab::experiments::*;
use hyperlab::girko::{DomainSpec, GirkoGrid, Regimes};
use hyperlab::spectra::{EnsembleSpec, EntryLaw};
use hyperlab::stability::SymmetryClass;
use hyperlab::suites::{self, Check};
use std::cell::RefCell;
use std::process::ExitCode;
use std::time::Instant;

type Outcome = hyperlab::Result<(bool, String)>;

fn from_checks(checks: Vec<Check>) -> Outcome {
    let passed = checks.iter().all(|c| c.passed);
    let detail =
        checks.iter().map(|c| format!("{} {:.2e}/{:.1e}", c.name, c.value, c.tolerance)).collect::<Vec<_>>().join("; ");
    Ok((passed, detail))
}

fn runner() -> Runner {
    Runner::new(1, None).expect("runner")
}

fn numvar_params(control: bool) -> NumVarParams {
    NumVarParams {
        n_list: vec![128, 256, 512, 1024],
        samples: 400,
        control,
        envelope_a: (!control).then_some(0.6),
        exclude_smallest: false,
    }
}

thread_local! {
    static NUMVAR: RefCell<Option<Vec<NumVarCell>>> = const { RefCell::new(None) };
}

fn c1() -> Outcome {
    from_checks(suites::mde_exactness(10_000, 1, None))
}

fn c2() -> Outcome {
    from_checks(suites::trace_identities(32, 20)?)
}

fn c3() -> Outcome {
    let n = 64;
    let spec = EnsembleSpec::ginibre(n, SymmetryClass::Complex, 0);
    let p = GirkoCheckParams { a: 0.6, samples: 8, refine_check: true };
    let r =
        girko_check(&runner(), &p, &spec, &DomainSpec::disk(0.5), Some(&Regimes::for_size(n)), &GirkoGrid::default())?;
    let refine = r.column("refine").unwrap();
    let res = r.column("residual").unwrap();
    let coarse: Vec<f64> = res.iter().zip(&refine).filter(|(_, f)| **f == 1.0).map(|(v, _)| *v).collect();
    let fine: Vec<f64> = res.iter().zip(&refine).filter(|(_, f)| **f == 2.0).map(|(v, _)| *v).collect();
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let tol = 1e-3 * n as f64;
    let worst = coarse.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ratio = rms(&coarse) / rms(&fine);
    Ok((
        worst < tol && ratio >= 2f64.powf(1.5),
        format!("max |total - direct| {worst:.2e} < {tol:.3}; rms error ratio under 2x refinement {ratio:.2} (need >= 2.83)"),
    ))
}

fn c4() -> Outcome {
    from_checks(suites::stability_equivalence(10_000, 1)?)
}

fn c5() -> Outcome {
    from_checks(suites::derivative_oracles(1000, 1)?)
}

fn c6() -> Outcome {
    let spec = EnsembleSpec::ginibre(128, SymmetryClass::Complex, 6);
    let p = TraceCovParams { samples: 20_000, ..TraceCovParams::default() };
    let (_, cells) = trace_covariance(&runner(), &p, &spec)?;
    let ok = cells.iter().all(|c| c.z_score().abs() <= 3.0);
    let detail = cells
        .iter()
        .map(|c| {
            format!(
                "|dz|={:.1}: {:.3e}±{:.1e} vs {:.3e} (z={:+.2})",
                (c.cell.z1[0] - c.cell.z2[0]).hypot(c.cell.z1[1] - c.cell.z2[1]),
                c.bilinear.0.value,
                c.bilinear.0.se,
                c.predictor.re,
                c.z_score()
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((ok, detail))
}

fn c7() -> Outcome {
    let spec = EnsembleSpec::ginibre(128, SymmetryClass::Real, 7).with_law(EntryLaw::Bernoulli);
    let cell = PairCell { z1: [0.0, 0.5], z2: [0.0, 0.5], w1: [0.0, 0.3], w2: [0.0, 0.3] };
    let p = TraceCovParams { cells: vec![cell], samples: 20_000, compare_gaussian: true };
    let (_, cells) = trace_covariance(&runner(), &p, &spec)?;
    let (diff, predicted) = cells[0].kappa_difference.expect("paired run");
    let z = diff.z_score(predicted);
    Ok((
        z.abs() <= 3.0 && spec.kappa4() == -2.0,
        format!(
            "Bernoulli - GinOE {:.3e}±{:.1e} vs kappa4 U1 U2/(2N^2) {:.3e} (z={z:+.2})",
            diff.value, diff.se, predicted
        ),
    ))
}

fn smallest_cell_portmanteau(cells: &[NumVarCell]) -> (bool, String) {
    let c = &cells[0];
    let e = c.envelopes.expect("envelopes");
    (c.var.value <= e[4], format!("N={} Var {:.3} <= bound {:.3}", c.n, c.var.value, e[4]))
}

fn c8() -> Outcome {
    let spec = EnsembleSpec::ginibre(128, SymmetryClass::Complex, 8);
    let domain = DomainSpec::disk(0.5);
    let (r, cells) = number_variance(&runner(), &numvar_params(false), &spec, &domain)?;
    let fit = r.fits["variance_exponent"];
    let (rc, _) = number_variance(&runner(), &numvar_params(true), &spec, &domain)?;
    let control = rc.fits["variance_exponent"];
    NUMVAR.with(|s| *s.borrow_mut() = Some(cells));
    let ok = fit.slope_ci.1 < 0.9 && (0.35..=0.65).contains(&fit.slope) && (control.slope - 1.0).abs() <= 0.1;
    Ok((
        ok,
        format!(
            "GinUE exponent {:.3} (95% CI [{:.3}, {:.3}]); uniform control {:.3}±{:.3}",
            fit.slope, fit.slope_ci.0, fit.slope_ci.1, control.slope, control.slope_se
        ),
    ))
}

fn c9() -> Outcome {
    let spec = EnsembleSpec::ginibre(128, SymmetryClass::Complex, 9);
    let p = RigidityParams { z: [0.3, 0.0], n_list: vec![128, 256, 512], samples: 200, bulk_fraction: 0.9 };
    let (_, cells) = rigidity(&runner(), &p, &spec)?;
    let growth: Vec<f64> = cells.windows(2).map(|w| w[1].median / w[0].median).collect();
    let medians: Vec<String> = cells.iter().map(|c| format!("{:.2}", c.median)).collect();
    Ok((
        growth.iter().all(|g| *g < 2.5),
        format!("medians {} ; growth per doubling {:.3?}", medians.join(", "), growth),
    ))
}

fn c10() -> Outcome {
    let spec = EnsembleSpec::ginibre(128, SymmetryClass::Complex, 10);
    let r = smallest_eig_tail(&runner(), &TailParams { samples: 50_000, ..TailParams::default() }, &spec)?;
    let fit = r.fits.get("tail_slope").copied();
    match fit {
        Some(f) => Ok((
            (1.7..=2.3).contains(&f.slope),
            format!("slope {:.3} ± {:.3} on x in [0.05, 0.5]", f.slope, f.slope_se),
        )),
        None => Ok((false, "no fit".into())),
    }
}

fn c11() -> Outcome {
    let spec = EnsembleSpec::ginibre(256, SymmetryClass::Complex, 11);
    let p = OverlapParams { z2s: vec![[-0.2, 0.0], [0.0, 0.0], [0.4, 0.0]], samples: 200, ..OverlapParams::default() };
    let (_, cells) = overlap_decay(&runner(), &p, &spec)?;
    let at = |dz: f64, off: usize| *cells.iter().find(|c| (c.dz - dz).abs() < 1e-9 && c.offset == off).expect("cell");
    let not_above =
        |a: &OverlapCell, b: &OverlapCell| b.scaled.value <= a.scaled.value + 1.96 * a.scaled.se.hypot(b.scaled.se);
    let in_dz = [at(0.2, 0), at(0.4, 0), at(0.8, 0)];
    let in_off = [at(0.4, 0), at(0.4, 16), at(0.4, 64)];
    let ok = in_dz.windows(2).all(|w| not_above(&w[0], &w[1])) && in_off.windows(2).all(|w| not_above(&w[0], &w[1]));
    let fmt = |v: &[OverlapCell]| {
        v.iter().map(|c| format!("{:.3}±{:.3}", c.scaled.value, c.scaled.se)).collect::<Vec<_>>().join(" > ")
    };
    Ok((ok, format!("i=j over |dz| 0.2,0.4,0.8: {}; |dz|=0.4 over |i-j| 0,16,64: {}", fmt(&in_dz), fmt(&in_off))))
}

fn c12() -> Outcome {
    from_checks(suites::flow_suite(&runner(), 100, 12)?)
}

fn c13() -> Outcome {
    let (ordering, d1) = from_checks(suites::envelope_ordering(100_000, 13, 128, 0.6)?)?;
    let cells = match NUMVAR.with(|s| s.borrow().clone()) {
        Some(c) => c,
        None => {
            let p = NumVarParams { n_list: vec![128], ..numvar_params(false) };
            number_variance(
                &runner(),
                &p,
                &EnsembleSpec::ginibre(128, SymmetryClass::Complex, 8),
                &DomainSpec::disk(0.5),
            )?
            .1
        }
    };
    let (bound, d2) = smallest_cell_portmanteau(&cells);
    Ok((ordering && bound, format!("{d1}; {d2}")))
}

type Criterion = (u32, &'static str, f64, fn() -> Outcome);

fn main() -> ExitCode {
    let list: [Criterion; 13] = [
        (1, "dyson equation exactness", 10.0, c1),
        (2, "exact trace identities", 30.0, c2),
        (3, "girko formula", 120.0, c3),
        (4, "stability equivalence", 60.0, c4),
        (5, "derivative oracles", 30.0, c5),
        (6, "covariance prediction", 1800.0, c6),
        (7, "fourth cumulant sensitivity", 1800.0, c7),
        (8, "hyperuniformity", 3600.0, c8),
        (9, "rigidity", 1200.0, c9),
        (10, "smallest singular value tail", 1800.0, c10),
        (11, "overlap decay", 1800.0, c11),
        (12, "flow suite", 10.0, c12),
        (13, "envelope ordering and variance bound", 600.0, c13),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, title, limit, f) in list {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (ok && secs < limit, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {id:>2} {title}: {detail} [{secs:.1} s, limit {limit:.0} s]",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
