//! Sampling, Hermitization and sample-level spectral quantities.

use crate::error::{LabError, Result};
use crate::mat2::{Mat2, C64};
use crate::stability::SymmetryClass;
use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub type Matrix = Mat<C64>;

/// Degeneracy threshold for singular values in overlap computations.
pub const DEGENERACY_GAP: f64 = 1e-12;

fn sequential() {
    faer::set_global_parallelism(faer::Par::Seq);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EntryLaw {
    #[default]
    Gaussian,
    /// `±1` (real) or uniform on `{±1, ±i}` (complex).
    Bernoulli,
    /// Uniform on `[-√3, √3]` (real) or on the disk of radius `√2` (complex).
    Uniform,
    /// Three-point law `{-a, 0, a}` (real) or `a·e^{iθ}` with an atom at zero (complex),
    /// tuned to a prescribed fourth absolute moment.
    CustomMoments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub n: usize,
    #[serde(default)]
    pub class: SymmetryClass,
    #[serde(default)]
    pub law: EntryLaw,
    /// Weight `s` of the Gaussian component in `√(1-s²) X₀ + s X̃`.
    #[serde(default)]
    pub mixing: f64,
    /// `E|χ|⁴` for the custom-moments law.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourth_moment: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn ginibre(n: usize, class: SymmetryClass, seed: u64) -> Self {
        EnsembleSpec { n, class, law: EntryLaw::Gaussian, mixing: 0.0, fourth_moment: None, seed }
    }

    pub fn with_law(mut self, law: EntryLaw) -> Self {
        self.law = law;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > 2048 {
            return Err(LabError::config("ensemble.n", format!("n = {} must lie in 1..=2048", self.n)));
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(LabError::config("ensemble.mixing", format!("mixing = {} must lie in [0, 1]", self.mixing)));
        }
        match (self.law, self.fourth_moment) {
            (EntryLaw::CustomMoments, Some(m4)) if m4 >= 1.0 && m4.is_finite() => Ok(()),
            (EntryLaw::CustomMoments, Some(m4)) => Err(LabError::config(
                "ensemble.fourth_moment",
                format!("fourth moment {m4} is below the Cauchy-Schwarz floor 1"),
            )),
            (EntryLaw::CustomMoments, None) => {
                Err(LabError::config("ensemble.fourth_moment", "custom-moments law needs fourth_moment"))
            }
            (_, Some(_)) => Err(LabError::config("ensemble.fourth_moment", "only used by the custom-moments law")),
            _ => Ok(()),
        }
    }

    /// `E|χ|⁴` of the base law `χ` (before Gaussian mixing).
    pub fn base_fourth_moment(&self) -> f64 {
        let complex = self.class == SymmetryClass::Complex;
        match self.law {
            EntryLaw::Gaussian => {
                if complex {
                    2.0
                } else {
                    3.0
                }
            }
            EntryLaw::Bernoulli => 1.0,
            EntryLaw::Uniform => {
                if complex {
                    4.0 / 3.0
                } else {
                    1.8
                }
            }
            EntryLaw::CustomMoments => self.fourth_moment.unwrap_or(if complex { 2.0 } else { 3.0 }),
        }
    }

    /// Normalized fourth cumulant of the entry law, `E|χ|⁴ - 2` (complex) or `E χ⁴ - 3` (real).
    pub fn kappa4(&self) -> f64 {
        let gauss = if self.class == SymmetryClass::Complex { 2.0 } else { 3.0 };
        let s2 = self.mixing * self.mixing;
        (1.0 - s2).powi(2) * (self.base_fourth_moment() - gauss)
    }

    /// A 64-bit digest of the ensemble, stable across runs and platforms.
    pub fn digest(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("spec serializes");
        let h = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(h[..8].try_into().unwrap())
    }
}

/// Generator for sample `index` of a run with base seed `seed`: the ChaCha stream id
/// carries the sample index, so every sample is independent of scheduling.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derive a sub-seed for a named cell of an experiment.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One entry of unit variance from the base law.
fn draw_base(law: EntryLaw, class: SymmetryClass, m4: f64, rng: &mut ChaCha8Rng) -> C64 {
    let complex = class == SymmetryClass::Complex;
    match (law, complex) {
        (EntryLaw::Gaussian, false) => C64::new(std_normal(rng), 0.0),
        (EntryLaw::Gaussian, true) => C64::new(std_normal(rng), std_normal(rng)) * FRAC_1_SQRT_2,
        (EntryLaw::Bernoulli, false) => C64::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0),
        (EntryLaw::Bernoulli, true) => {
            [C64::new(1.0, 0.0), C64::new(-1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.0, -1.0)]
                [rng.random_range(0..4usize)]
        }
        (EntryLaw::Uniform, false) => C64::new(rng.random_range(-3f64.sqrt()..3f64.sqrt()), 0.0),
        (EntryLaw::Uniform, true) => {
            let r = (2.0 * rng.random::<f64>()).sqrt();
            C64::from_polar(r, 2.0 * PI * rng.random::<f64>())
        }
        (EntryLaw::CustomMoments, _) => {
            // P(|χ| = a) = p = 1/m4, a² = m4
            let p = 1.0 / m4;
            let hit = rng.random::<f64>() < p;
            let a = m4.sqrt();
            if complex {
                let phase = 2.0 * PI * rng.random::<f64>();
                if hit {
                    C64::from_polar(a, phase)
                } else {
                    C64::new(0.0, 0.0)
                }
            } else {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                C64::new(if hit { sign * a } else { 0.0 }, 0.0)
            }
        }
    }
}

/// Draw one entry of the declared law, already mixed with the Gaussian component.
pub fn draw_entry(spec: &EnsembleSpec, rng: &mut ChaCha8Rng) -> C64 {
    let m4 = spec.base_fourth_moment();
    let s = spec.mixing;
    if s == 0.0 {
        return draw_base(spec.law, spec.class, m4, rng);
    }
    let x0 = draw_base(spec.law, spec.class, m4, rng);
    let g = draw_base(EntryLaw::Gaussian, spec.class, m4, rng);
    x0 * (1.0 - s * s).sqrt() + g * s
}

/// Sample `index` of the ensemble, entries scaled by `N^{-1/2}`, filled row by row.
pub fn sample(spec: &EnsembleSpec, index: u64) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    Ok(sample_with(spec, &mut rng))
}

pub fn sample_with(spec: &EnsembleSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let n = spec.n;
    let scale = 1.0 / (n as f64).sqrt();
    let mut entries = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        entries.push(draw_entry(spec, rng) * scale);
    }
    Mat::from_fn(n, n, |i, j| entries[i * n + j])
}

/// `X - z`.
pub fn shifted(x: &Matrix, z: C64) -> Matrix {
    Mat::from_fn(x.nrows(), x.ncols(), |i, j| if i == j { x[(i, j)] - z } else { x[(i, j)] })
}

/// `H^z = [[0, X - z], [(X - z)*, 0]]`.
pub fn hermitize(x: &Matrix, z: C64) -> Matrix {
    let n = x.nrows();
    Mat::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, false) => {
            let (a, b) = (i, j - n);
            if a == b {
                x[(a, b)] - z
            } else {
                x[(a, b)]
            }
        }
        (false, true) => {
            let (a, b) = (j, i - n);
            let v = if a == b { x[(a, b)] - z } else { x[(a, b)] };
            v.conj()
        }
        _ => C64::new(0.0, 0.0),
    })
}

/// Upper Hessenberg `H = Q* X Q` for a unitary `Q`; `H - z` has the singular values of `X - z`.
pub fn hessenberg_form(x: &Matrix) -> Matrix {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::evd::hessenberg;
    sequential();
    let n = x.nrows();
    let mut h = x.clone();
    if n < 3 {
        return h;
    }
    let bs = faer::linalg::qr::no_pivoting::factor::recommended_blocksize::<C64>(n - 1, n - 1);
    let mut householder = Matrix::zeros(bs, n - 1);
    let mut buf =
        MemBuffer::new(hessenberg::hessenberg_in_place_scratch::<C64>(n, bs, faer::Par::Seq, Default::default()));
    hessenberg::hessenberg_in_place(
        h.as_mut(),
        householder.as_mut(),
        faer::Par::Seq,
        MemStack::new(&mut buf),
        Default::default(),
    );
    for j in 0..n {
        for i in j + 2..n {
            h[(i, j)] = C64::new(0.0, 0.0);
        }
    }
    h
}

/// Singular values of `X - z`, ascending.
pub fn singular_values_shifted(x: &Matrix, z: C64) -> Result<Vec<f64>> {
    sequential();
    let mut s = shifted(x, z)
        .singular_values()
        .map_err(|e| LabError::Numerical(format!("singular value iteration failed at z = {z}: {e:?}")))?;
    s.reverse();
    Ok(s)
}

/// Singular values of `X - z`, ascending, from the Hermitian eigenproblem of `(X - z)(X - z)*`.
///
/// Faster than the direct SVD; singular values below `~1e-8 ‖X - z‖` lose relative accuracy.
pub fn gram_singular_values(x: &Matrix, z: C64) -> Result<Vec<f64>> {
    sequential();
    let y = shifted(x, z);
    let gram = &y * y.adjoint();
    let ev = gram
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| LabError::Numerical(format!("Hermitian eigensolver failed at z = {z}: {e:?}")))?;
    Ok(ev.into_iter().map(|v| v.max(0.0).sqrt()).collect())
}

/// `Im ⟨G^z(iη)⟩ = (η/N) tr[((X - z)(X - z)* + η²)^{-1}]` through a Cholesky factorization.
pub fn imaginary_axis_trace(x: &Matrix, z: C64, eta: f64) -> Result<f64> {
    sequential();
    let n = x.nrows();
    let y = shifted(x, z);
    let mut a = &y * y.adjoint();
    for i in 0..n {
        a[(i, i)] += eta * eta;
    }
    let llt = a
        .llt(faer::Side::Lower)
        .map_err(|e| LabError::Numerical(format!("Cholesky factorization failed at z = {z}, eta = {eta}: {e:?}")))?;
    let inv = llt.inverse();
    let tr: f64 = (0..n).map(|i| inv[(i, i)].re).sum();
    Ok(eta * tr / n as f64)
}

/// Singular values and vectors of `X - z`, ascending, with `(X - z) v_i = λ_i u_i`.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub z: C64,
    pub lambdas: Vec<f64>,
    /// Column `i` is `u_i`.
    pub left: Matrix,
    /// Column `i` is `v_i`.
    pub right: Matrix,
}

impl SpectralData {
    pub fn compute(x: &Matrix, z: C64) -> Result<Self> {
        sequential();
        let n = x.nrows();
        let svd = shifted(x, z).svd().map_err(|e| LabError::Numerical(format!("SVD failed at z = {z}: {e:?}")))?;
        let s = svd.S().column_vector();
        let lambdas: Vec<f64> = (0..n).rev().map(|i| s[i].re).collect();
        let (u, v) = (svd.U(), svd.V());
        let left = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
        let right = Mat::from_fn(n, n, |i, j| v[(i, n - 1 - j)]);
        Ok(SpectralData { z, lambdas, left, right })
    }

    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    pub fn resolvent_trace(&self, w: C64) -> C64 {
        resolvent_trace(&self.lambdas, w)
    }
}

/// `⟨G^z(w)⟩ = (1/2N) Σ_i [1/(λ_i - w) + 1/(-λ_i - w)]`.
pub fn resolvent_trace(lambdas: &[f64], w: C64) -> C64 {
    let n = lambdas.len() as f64;
    if w.re == 0.0 {
        // keeps the value exactly imaginary on the imaginary axis
        let eta = w.im;
        let s: f64 = lambdas.iter().map(|&l| eta / (l * l + eta * eta)).sum();
        return C64::new(0.0, s / n);
    }
    let mut s = C64::new(0.0, 0.0);
    for &l in lambdas {
        s += w / (l * l - w * w);
    }
    s / n
}

/// One resolvent in a chain: `G^z(w)` or its transpose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainLeg {
    pub z: C64,
    pub w: C64,
    pub transpose: bool,
}

impl ChainLeg {
    pub fn new(z: C64, w: C64) -> Self {
        ChainLeg { z, w, transpose: false }
    }
}

/// Dense `(H^z - w)^{-1}`.
pub fn dense_resolvent(x: &Matrix, z: C64, w: C64) -> Result<Matrix> {
    sequential();
    let n = 2 * x.nrows();
    let mut h = hermitize(x, z);
    for i in 0..n {
        h[(i, i)] -= w;
    }
    let inv = h.partial_piv_lu().inverse();
    if inv.as_ref().norm_max().is_finite() {
        Ok(inv)
    } else {
        Err(LabError::Numerical(format!("resolvent at z = {z}, w = {w} is singular")))
    }
}

/// A block-constant observable expanded to `2N × 2N`: `B ⊗ I_N`.
fn expand(b: &Mat2, n: usize) -> Matrix {
    Mat::from_fn(2 * n, 2 * n, |i, j| if i % n == j % n { b.0[i / n][j / n] } else { C64::new(0.0, 0.0) })
}

/// Normalized trace of `G_1 B_1 G_2 ⋯ G_k [B_k]`.
pub fn chain_trace(x: &Matrix, legs: &[ChainLeg], observables: &[Mat2]) -> Result<C64> {
    if legs.is_empty() || !(observables.len() + 1 == legs.len() || observables.len() == legs.len()) {
        return Err(LabError::config(
            "chain",
            format!(
                "{} resolvents need {} or {} observables, got {}",
                legs.len(),
                legs.len() - 1,
                legs.len(),
                observables.len()
            ),
        ));
    }
    sequential();
    let n = x.nrows();
    let mut acc: Option<Matrix> = None;
    for (k, leg) in legs.iter().enumerate() {
        if leg.w.im == 0.0 {
            return Err(LabError::Domain(format!("chain leg {k} has real spectral parameter {}", leg.w)));
        }
        let g = dense_resolvent(x, leg.z, leg.w)?;
        let g = if leg.transpose { g.transpose().to_owned() } else { g };
        let mut term = match acc {
            None => g,
            Some(a) => &a * &g,
        };
        if let Some(b) = observables.get(k) {
            term = &term * &expand(b, n);
        }
        acc = Some(term);
    }
    let a = acc.unwrap();
    let mut tr = C64::new(0.0, 0.0);
    for i in 0..2 * n {
        tr += a[(i, i)];
    }
    Ok(tr / (2 * n) as f64)
}

/// Complex eigenvalues of `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub sigmas: Vec<C64>,
}

pub fn complex_spectrum(x: &Matrix) -> Result<Spectrum> {
    if x.nrows() > 2048 {
        return Err(LabError::config("ensemble.n", "eigenvalue solver is limited to n <= 2048"));
    }
    sequential();
    let sigmas = x.eigenvalues().map_err(|e| LabError::Numerical(format!("Hessenberg QR did not converge: {e:?}")))?;
    Ok(Spectrum { sigmas })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    /// `None` for pairs excluded because of a degenerate singular value.
    pub values: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

fn degenerate(l: &[f64], i: usize) -> bool {
    (i > 0 && (l[i] - l[i - 1]).abs() < DEGENERACY_GAP) || (i + 1 < l.len() && (l[i + 1] - l[i]).abs() < DEGENERACY_GAP)
}

fn inner(a: &Matrix, i: usize, b: &Matrix, j: usize) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for k in 0..a.nrows() {
        s += a[(k, i)].conj() * b[(k, j)];
    }
    s
}

/// `|⟨u_i, u_j⟩|² + |⟨v_i, v_j⟩|²` with `‖u‖ = ‖v‖ = 1/2`. Indices are 1-based
/// (`±i` name the eigenvalues `±λ_i` of the Hermitization and give the same value).
pub fn overlaps(d1: &SpectralData, d2: &SpectralData, pairs: &[(i64, i64)]) -> Result<OverlapReport> {
    let n = d1.n();
    if d2.n() != n {
        return Err(LabError::config("overlaps", "spectral data of different sizes"));
    }
    let bulk = (0.9 * n as f64).floor() as i64;
    let mut values = Vec::with_capacity(pairs.len());
    let mut warnings = Vec::new();
    for &(i, j) in pairs {
        if i == 0 || j == 0 || i.abs() > bulk || j.abs() > bulk {
            return Err(LabError::Domain(format!("overlap indices ({i}, {j}) outside the bulk range 1..={bulk}")));
        }
        let (a, b) = (i.unsigned_abs() as usize - 1, j.unsigned_abs() as usize - 1);
        if degenerate(&d1.lambdas, a) || degenerate(&d2.lambdas, b) {
            warnings.push(format!("degenerate singular value at pair ({i}, {j}); vector choice ambiguous"));
            values.push(None);
            continue;
        }
        let uu = inner(&d1.left, a, &d2.left, b).norm_sqr();
        let vv = inner(&d1.right, a, &d2.right, b).norm_sqr();
        values.push(Some((uu + vv) / 16.0));
    }
    Ok(OverlapReport { values, warnings })
}

const CACHE_MAGIC: &[u8; 8] = b"HYPLABSD";
const CACHE_VERSION: u64 = 1;

/// On-disk store of singular values keyed by `(ensemble digest, z, sample index)`.
///
/// Each file is a 32-byte header (magic, version, N, count as little-endian u64)
/// followed by `count` little-endian f64 values.
#[derive(Clone, Debug)]
pub struct SpectralCache {
    pub dir: PathBuf,
}

impl SpectralCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SpectralCache { dir: dir.into() }
    }

    /// The cache named by `HYPERLAB_CACHE`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os("HYPERLAB_CACHE").filter(|v| !v.is_empty()).map(SpectralCache::new)
    }

    pub fn path_for(&self, digest: u64, z: C64, index: u64) -> PathBuf {
        self.dir.join(format!("{digest:016x}-{:016x}-{:016x}-{index}.bin", z.re.to_bits(), z.im.to_bits()))
    }

    pub fn load(&self, digest: u64, z: C64, index: u64) -> Result<Option<Vec<f64>>> {
        let path = self.path_for(digest, z, index);
        if !path.exists() {
            return Ok(None);
        }
        read_f64_file(&path).map(|(_, v)| Some(v))
    }

    pub fn store(&self, digest: u64, z: C64, index: u64, lambdas: &[f64]) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| LabError::io(&self.dir, e))?;
        let path = self.path_for(digest, z, index);
        let tmp = path.with_extension("tmp");
        write_f64_file(&tmp, lambdas.len() as u64, lambdas)?;
        std::fs::rename(&tmp, &path).map_err(|e| LabError::io(&path, e))
    }

    /// Singular values of sample `index` at `z`, served from the cache when present.
    pub fn singular_values(&self, spec: &EnsembleSpec, z: C64, index: u64) -> Result<Vec<f64>> {
        let digest = spec.digest();
        if let Some(v) = self.load(digest, z, index)? {
            if v.len() == spec.n {
                return Ok(v);
            }
        }
        let x = sample(spec, index)?;
        let v = singular_values_shifted(&x, z)?;
        self.store(digest, z, index, &v)?;
        Ok(v)
    }
}

pub fn write_f64_file(path: &Path, n: u64, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * values.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(&buf).map_err(|e| LabError::io(path, e))
}

/// Returns `(N, values)`.
pub fn read_f64_file(path: &Path) -> Result<(u64, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| LabError::io(path, e))?;
    let bad = |m: &str| LabError::Numerical(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a spectral cache file"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    if word(1) != CACHE_VERSION {
        return Err(bad("unsupported cache version"));
    }
    let (n, count) = (word(2), word(3) as usize);
    if bytes.len() != 32 + 8 * count {
        return Err(bad("truncated payload"));
    }
    let values = bytes[32..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((n, values))
}
