//! Dispatch of a validated [`RunConfig`] to its experiment.

use crate::config::{Command, RunConfig};
use crate::error::{LabError, Result};
use crate::experiments::{
    dbm_decorrelation, flow_check, girko_check, mde_report, number_variance, overlap_decay, predict_cov_report,
    rigidity, smallest_eig_tail, stab_report, trace_covariance, Runner,
};
use crate::report::ExperimentResult;
use crate::suites::{self, Fault};

/// Runs the configured command; the result carries the config hash and the seed.
pub fn execute(config: &RunConfig, runner: &Runner, fault: Option<Fault>) -> Result<ExperimentResult> {
    config.validate()?;
    let c = config.resolved();
    let spec = c.ensemble.clone().expect("resolved ensemble");
    let mut r = match c.command {
        Command::Mde => mde_report(&got(&c.mde))?,
        Command::Stab => stab_report(&got(&c.stab))?,
        Command::PredictCov => predict_cov_report(&got(&c.predict_cov), &spec)?,
        Command::GirkoCheck => {
            girko_check(runner, &got(&c.girko_check), &spec, &got(&c.domain), c.regimes.as_ref(), &got(&c.grid))?
        }
        Command::Numvar => number_variance(runner, &got(&c.numvar), &spec, &got(&c.domain))?.0,
        Command::TraceCov => trace_covariance(runner, &got(&c.trace_cov), &spec)?.0,
        Command::Rigidity => rigidity(runner, &got(&c.rigidity), &spec)?.0,
        Command::Tail => smallest_eig_tail(runner, &got(&c.tail), &spec)?,
        Command::Overlaps => overlap_decay(runner, &got(&c.overlaps), &spec)?.0,
        Command::Dbm => dbm_decorrelation(runner, &got(&c.dbm), &spec)?,
        Command::FlowCheck => flow_check(runner, &got(&c.flow_check), c.seed)?,
        Command::Selftest => suites::to_result("selftest", &suites::selftest(runner, fault)?),
    };
    r.config_hash = config.hash()?;
    r.seed = c.seed;
    r.diag("ensemble", &spec);
    r.diag("kappa4", spec.kappa4());
    Ok(r)
}

fn got<T: Clone>(slot: &Option<T>) -> T {
    slot.clone().expect("resolved table")
}

/// Config table an error is attributed to.
pub fn error_path(err: &LabError, command: Command) -> String {
    match err {
        LabError::Config { path, .. } => path.clone(),
        LabError::Io { path, .. } => path.clone(),
        _ => command.name().replace('-', "_"),
    }
}

/// `2` for bad inputs, `3` for numerical failures.
pub fn exit_code(err: &LabError) -> i32 {
    if err.is_validation() || matches!(err, LabError::Io { .. }) {
        2
    } else {
        3
    }
}
