//! Run configuration: one TOML file per run.

use crate::error::{LabError, Result};
use crate::experiments::{
    DbmParams, FlowCheckParams, GirkoCheckParams, MdeParams, NumVarParams, OverlapParams, PairCell, PairParams, Point,
    RigidityParams, TailParams, TraceCovParams,
};
use crate::girko::{DomainSpec, GirkoGrid, Regimes};
use crate::spectra::EnsembleSpec;
use crate::stability::SymmetryClass;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const DEFAULT_MAX_ABS_Z: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Mde,
    Stab,
    PredictCov,
    GirkoCheck,
    Numvar,
    TraceCov,
    Rigidity,
    Tail,
    Overlaps,
    Dbm,
    FlowCheck,
    Selftest,
}

impl Command {
    pub const ALL: [Command; 12] = [
        Command::Mde,
        Command::Stab,
        Command::PredictCov,
        Command::GirkoCheck,
        Command::Numvar,
        Command::TraceCov,
        Command::Rigidity,
        Command::Tail,
        Command::Overlaps,
        Command::Dbm,
        Command::FlowCheck,
        Command::Selftest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Mde => "mde",
            Command::Stab => "stab",
            Command::PredictCov => "predict-cov",
            Command::GirkoCheck => "girko-check",
            Command::Numvar => "numvar",
            Command::TraceCov => "trace-cov",
            Command::Rigidity => "rigidity",
            Command::Tail => "tail",
            Command::Overlaps => "overlaps",
            Command::Dbm => "dbm",
            Command::FlowCheck => "flow-check",
            Command::Selftest => "selftest",
        }
    }

    /// Matrix size used when the config has no `[ensemble]` table.
    pub fn default_size(self) -> usize {
        match self {
            Command::GirkoCheck | Command::Dbm | Command::Selftest => 64,
            Command::Overlaps => 256,
            _ => 128,
        }
    }
}

fn default_workers() -> usize {
    1
}

fn default_out() -> String {
    "out".into()
}

fn default_max_abs_z() -> f64 {
    DEFAULT_MAX_ABS_Z
}

fn is_default_max_abs_z(v: &f64) -> bool {
    *v == DEFAULT_MAX_ABS_Z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: String,
    /// Largest `|z|` any parameter may reach.
    #[serde(default = "default_max_abs_z", skip_serializing_if = "is_default_max_abs_z")]
    pub max_abs_z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<Regimes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GirkoGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mde: Option<MdeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stab: Option<PairParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict_cov: Option<PairParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub girko_check: Option<GirkoCheckParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numvar: Option<NumVarParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_cov: Option<TraceCovParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rigidity: Option<RigidityParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<TailParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlaps: Option<OverlapParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dbm: Option<DbmParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_check: Option<FlowCheckParams>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            seed: 0,
            workers: 1,
            out: default_out(),
            max_abs_z: DEFAULT_MAX_ABS_Z,
            ensemble: None,
            domain: None,
            regimes: None,
            grid: None,
            mde: None,
            stab: None,
            predict_cov: None,
            girko_check: None,
            numvar: None,
            trace_cov: None,
            rigidity: None,
            tail: None,
            overlaps: None,
            dbm: None,
            flow_check: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| key_path_at(text, s.start))
                .filter(|p| !p.is_empty())
                .unwrap_or_else(|| "<root>".into());
            LabError::config(path, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Numerical(format!("config serialization: {e}")))
    }

    /// Every table filled in with its default, seeds applied.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let n = c.ensemble.as_ref().map_or(self.command.default_size(), |e| e.n);
        let mut ens = c.ensemble.take().unwrap_or_else(|| EnsembleSpec::ginibre(n, SymmetryClass::Complex, 0));
        ens.seed = self.seed;
        c.ensemble = Some(ens);
        match self.command {
            Command::Mde => fill(&mut c.mde),
            Command::Stab => fill(&mut c.stab),
            Command::PredictCov => fill(&mut c.predict_cov),
            Command::GirkoCheck => {
                fill(&mut c.girko_check);
                c.domain.get_or_insert_with(|| DomainSpec::disk(0.5));
                c.regimes.get_or_insert_with(|| Regimes::for_size(n));
                fill(&mut c.grid);
            }
            Command::Numvar => {
                fill(&mut c.numvar);
                c.domain.get_or_insert_with(|| DomainSpec::disk(0.5));
            }
            Command::TraceCov => fill(&mut c.trace_cov),
            Command::Rigidity => fill(&mut c.rigidity),
            Command::Tail => fill(&mut c.tail),
            Command::Overlaps => fill(&mut c.overlaps),
            Command::Dbm => fill(&mut c.dbm),
            Command::FlowCheck => fill(&mut c.flow_check),
            Command::Selftest => {}
        }
        c
    }

    pub fn ensemble(&self) -> EnsembleSpec {
        self.resolved().ensemble.expect("resolved ensemble")
    }

    /// Hash of everything that determines the numbers: the resolved config without
    /// `workers` and `out`.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.resolved();
        c.workers = 1;
        c.out = String::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().take(16).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let zmax = self.max_abs_z;
        if !(zmax > 0.0 && zmax < 1.0) {
            return Err(LabError::config("max_abs_z", format!("max_abs_z = {zmax} must lie in (0, 1)")));
        }
        if self.workers == 0 || self.workers > 1024 {
            return Err(LabError::config("workers", "workers must lie in 1..=1024"));
        }
        if self.ensemble.as_ref().is_some_and(|e| e.seed != 0 && e.seed != self.seed) {
            return Err(LabError::config("ensemble.seed", "set the seed at the top level or with --seed"));
        }
        let c = self.resolved();
        c.ensemble.as_ref().expect("resolved").validate()?;
        let z_ok = |path: String, z: Point| -> Result<()> {
            let r = z[0].hypot(z[1]);
            if r > zmax || !r.is_finite() {
                Err(LabError::config(path, format!("|z| = {r:.4} exceeds {zmax}; edge and outside points are not supported (raise max_abs_z to override)")))
            } else {
                Ok(())
            }
        };
        let w_ok = |path: String, w: Point| -> Result<()> {
            if !(w[1] > 0.0) || !w[0].is_finite() || !w[1].is_finite() {
                Err(LabError::config(path, format!("η = Im w = {} must be positive", w[1])))
            } else {
                Ok(())
            }
        };
        let cells_ok = |table: &str, cells: &[PairCell]| -> Result<()> {
            for (k, cell) in cells.iter().enumerate() {
                z_ok(format!("{table}.cells[{k}].z1"), cell.z1)?;
                z_ok(format!("{table}.cells[{k}].z2"), cell.z2)?;
                w_ok(format!("{table}.cells[{k}].w1"), cell.w1)?;
                w_ok(format!("{table}.cells[{k}].w2"), cell.w2)?;
            }
            Ok(())
        };
        if let Some(d) = &c.domain {
            d.validate(zmax)?;
        }
        if let Some(r) = &c.regimes {
            r.validate()?;
        }
        if let Some(g) = &c.grid {
            if g.across * g.refine < 16 {
                return Err(LabError::config("grid", "across * refine must be at least 16"));
            }
        }
        if let Some(p) = &c.mde {
            for (k, z) in p.zs.iter().enumerate() {
                z_ok(format!("mde.zs[{k}]"), *z)?;
            }
            for (k, w) in p.ws.iter().enumerate() {
                w_ok(format!("mde.ws[{k}]"), *w)?;
            }
        }
        if let Some(p) = &c.stab {
            cells_ok("stab", &p.cells)?;
        }
        if let Some(p) = &c.predict_cov {
            cells_ok("predict_cov", &p.cells)?;
        }
        if let Some(p) = &c.trace_cov {
            cells_ok("trace_cov", &p.cells)?;
            if p.samples < 1000 {
                return Err(LabError::config("trace_cov.samples", "at least 1000 samples are needed"));
            }
        }
        if let Some(p) = &c.girko_check {
            if !(p.a > 0.0 && p.a < 1.0) {
                return Err(LabError::config("girko_check.a", "mollification exponent must lie in (0, 1)"));
            }
        }
        if let Some(p) = &c.numvar {
            if p.n_list.is_empty() || p.n_list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(LabError::config("numvar.n_list", "sizes must be non-empty and strictly ascending"));
            }
            if p.samples < 100 {
                return Err(LabError::config("numvar.samples", "at least 100 samples per size are needed"));
            }
        }
        if let Some(p) = &c.rigidity {
            z_ok("rigidity.z".into(), p.z)?;
        }
        if let Some(p) = &c.tail {
            z_ok("tail.z".into(), p.z)?;
            if p.x_grid.iter().any(|x| !(*x > 0.0)) {
                return Err(LabError::config("tail.x_grid", "grid points must be positive"));
            }
        }
        if let Some(p) = &c.overlaps {
            z_ok("overlaps.z1".into(), p.z1)?;
            for (k, z) in p.z2s.iter().enumerate() {
                z_ok(format!("overlaps.z2s[{k}]"), *z)?;
            }
        }
        if let Some(p) = &c.dbm {
            z_ok("dbm.z1".into(), p.z1)?;
            for (k, z) in p.z2s.iter().enumerate() {
                z_ok(format!("dbm.z2s[{k}]"), *z)?;
            }
            if !(p.dt > 0.0 && p.dt <= crate::flows::MAX_FLOW_STEP) {
                return Err(LabError::config(
                    "dbm.dt",
                    format!("step must lie in (0, {}]", crate::flows::MAX_FLOW_STEP),
                ));
            }
        }
        if let Some(p) = &c.flow_check {
            if !(p.z_max >= 0.0 && p.z_max <= zmax) {
                return Err(LabError::config("flow_check.z_max", format!("z_max must lie in [0, {zmax}]")));
            }
            if !(p.t_span > 0.0) || p.points < 2 || p.substeps == 0 {
                return Err(LabError::config("flow_check", "need t_span > 0, points >= 2 and substeps >= 1"));
            }
        }
        Ok(())
    }
}

fn fill<T: Default>(slot: &mut Option<T>) {
    slot.get_or_insert_with(T::default);
}

/// Dotted key path of the innermost table or key enclosing byte offset `at`.
fn key_path_at(text: &str, at: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if offset > at {
            break;
        }
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// Commented reference of every command's resolved defaults.
pub fn reference_config() -> Result<String> {
    let mut out = String::from(
        "# hyperlab run configuration reference.\n\
         # One file per run; every table is optional and falls back to the values shown.\n\
         # `seed`, `workers` and `out` can be overridden with --seed, --workers and --out.\n\
         # `max_abs_z` (default 0.95) bounds every z parameter.\n\
         # The ensemble seed always equals the top-level seed.\n",
    );
    for cmd in Command::ALL {
        if cmd == Command::Selftest {
            continue;
        }
        out.push_str(&format!("\n# ---- {} ----\n", cmd.name()));
        let text = RunConfig::new(cmd).resolved().to_toml()?;
        for line in text.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_resolved_default_round_trips() {
        for cmd in Command::ALL {
            let c = RunConfig::new(cmd).resolved();
            let text = c.to_toml().unwrap();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, c, "{text}");
            assert_eq!(back.to_toml().unwrap(), text);
            c.validate().unwrap();
        }
    }

    #[test]
    fn awkward_floats_round_trip() {
        let mut c = RunConfig::new(Command::PredictCov);
        c.predict_cov = Some(PairParams {
            cells: vec![PairCell {
                z1: [0.1 + 0.2, -1e-300],
                z2: [1.0 / 3.0, 0.0],
                w1: [f64::MIN_POSITIVE, 0.3],
                w2: [-0.0, 5e-324],
            }],
        });
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        let (a, b) = (&c.predict_cov.unwrap().cells[0], &back.predict_cov.unwrap().cells[0]);
        for (x, y) in
            a.z1.iter().chain(&a.z2).chain(&a.w1).chain(&a.w2).zip(b.z1.iter().chain(&b.z2).chain(&b.w1).chain(&b.w2))
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let e = RunConfig::parse("command = \"tail\"\n[tail]\nsamples = 10000\nbogus = 1\n").unwrap_err();
        match e {
            LabError::Config { path, message } => {
                assert!(path.starts_with("tail"), "{path}");
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other}"),
        }
        assert!(RunConfig::parse("command = \"mde\"\ncolour = 1\n").is_err());
        assert!(RunConfig::parse("command = \"nope\"\n").is_err());
    }

    #[test]
    fn out_of_theory_parameters_are_rejected() {
        let mut c = RunConfig::new(Command::Tail);
        c.tail = Some(TailParams { z: [0.96, 0.0], ..TailParams::default() });
        let e = c.validate().unwrap_err();
        assert!(matches!(&e, LabError::Config { path, .. } if path == "tail.z"), "{e}");
        c.max_abs_z = 0.97;
        c.validate().unwrap();

        let mut c = RunConfig::new(Command::Stab);
        let mut p = PairParams::default();
        p.cells[1].w2 = [0.0, 0.0];
        c.stab = Some(p);
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("stab.cells[1].w2") && e.to_string().contains("η"), "{e}");
    }

    #[test]
    fn regime_ordering_message_names_the_constraint() {
        let mut c = RunConfig::new(Command::GirkoCheck);
        c.regimes = Some(Regimes { eta_l: 1e-3, eta_0: 1e-4, eta_c: 0.1, t: 1e6 });
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("η_L < η_0 < η_c < T"), "{e}");
        assert!(e.is_validation());
    }

    #[test]
    fn hash_ignores_workers_and_out() {
        let mut a = RunConfig::new(Command::Numvar);
        let mut b = a.clone();
        b.workers = 8;
        b.out = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        a.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(
            RunConfig::new(Command::Numvar).hash().unwrap(),
            RunConfig::new(Command::Numvar).resolved().hash().unwrap()
        );
    }

    #[test]
    fn ensemble_seed_follows_top_level() {
        let c = RunConfig::parse("command = \"tail\"\nseed = 9\n[ensemble]\nn = 32\n").unwrap();
        assert_eq!(c.ensemble().seed, 9);
        let c = RunConfig::parse("command = \"tail\"\nseed = 9\n[ensemble]\nn = 32\nseed = 3\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn reference_lists_every_command() {
        let r = reference_config().unwrap();
        for cmd in Command::ALL.iter().filter(|c| **c != Command::Selftest) {
            assert!(r.contains(&format!("command = \"{}\"", cmd.name())));
        }
    }
}
