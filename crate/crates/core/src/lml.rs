//! Gaussian-process log marginal likelihood of an audioframe.
//!
//! The real-time path uses [`lml_cholesky`] against factors precomputed once
//! per distinct note set; [`lml_direct`] evaluates the textbook formula with
//! an LU solve and exists as a reference.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{contract, Error, Result};
use crate::exec::Exec;
use crate::kernel::{build_covariance, CovarianceSpec, KernelSettings};
use crate::score::Score;

/// Canonical cache key: sorted, deduplicated MIDI note numbers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NoteKey(Vec<u8>);

impl NoteKey {
    pub fn new(notes: &[u8]) -> Self {
        let mut v = notes.to_vec();
        v.sort_unstable();
        v.dedup();
        NoteKey(v)
    }

    pub fn notes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for NoteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|n| n.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Lower Cholesky factor of `K + σ_n² I` with its log-determinant half.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    log_det_term: f64,
    key: Option<NoteKey>,
}

impl CholeskyFactor {
    /// Factorizes `k + noise_sigma² I`.
    pub fn new(k: &DMatrix<f64>, noise_sigma: f64) -> Result<Self> {
        if !k.is_square() {
            return Err(contract("covariance must be square"));
        }
        let mut a = k.clone();
        let ridge = noise_sigma * noise_sigma;
        for i in 0..a.nrows() {
            a[(i, i)] += ridge;
        }
        let l = a.cholesky().ok_or_else(|| Error::Numeric("K + sigma_n^2 I is not positive definite".into()))?.unpack();
        let log_det_term = l.diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self { l, log_det_term, key: None })
    }

    pub fn with_key(mut self, key: NoteKey) -> Self {
        self.key = Some(key);
        self
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `Σ_i log L_ii`, i.e. half of `log |K + σ_n² I|`.
    pub fn log_det_term(&self) -> f64 {
        self.log_det_term
    }

    pub fn frame_length(&self) -> usize {
        self.l.nrows()
    }

    pub fn key(&self) -> Option<&NoteKey> {
        self.key.as_ref()
    }
}

fn normalizer(n: usize) -> f64 {
    0.5 * n as f64 * (2.0 * PI).ln()
}

/// Reference LML: explicit LU solve plus log-determinant from the LU pivots.
pub fn lml_direct(y: &[f64], k: &DMatrix<f64>, noise_sigma: f64) -> Result<f64> {
    let n = y.len();
    if k.nrows() != n || k.ncols() != n {
        return Err(contract(format!("frame has {n} samples but K is {}x{}", k.nrows(), k.ncols())));
    }
    if !(noise_sigma > 0.0) {
        return Err(contract("noise_sigma must be positive"));
    }
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += noise_sigma * noise_sigma;
    }
    let lu = a.lu();
    let yv = DVector::from_column_slice(y);
    let x = lu.solve(&yv).ok_or_else(|| Error::Numeric("singular covariance".into()))?;
    let u = lu.u();
    let mut log_det = 0.0;
    let mut negative = lu.p().determinant::<f64>() < 0.0;
    for i in 0..n {
        let d = u[(i, i)];
        if d == 0.0 {
            return Err(Error::Numeric("singular covariance".into()));
        }
        negative ^= d < 0.0;
        log_det += d.abs().ln();
    }
    if negative {
        return Err(Error::Numeric("covariance has negative determinant".into()));
    }
    Ok(-0.5 * yv.dot(&x) - 0.5 * log_det - normalizer(n))
}

/// Stable LML via two triangular solves against a cached factor.
pub fn lml_cholesky(y: &[f64], factor: &CholeskyFactor) -> Result<f64> {
    let n = factor.frame_length();
    if y.len() != n {
        return Err(contract(format!("frame has {} samples, factor expects {n}", y.len())));
    }
    let yv = DVector::from_column_slice(y);
    let l = factor.lower();
    let v = l.solve_lower_triangular(&yv).ok_or_else(|| Error::Numeric("zero pivot in Cholesky factor".into()))?;
    let alpha =
        l.tr_solve_lower_triangular(&v).ok_or_else(|| Error::Numeric("zero pivot in Cholesky factor".into()))?;
    Ok(-0.5 * yv.dot(&alpha) - factor.log_det_term() - normalizer(n))
}

/// Factor for an arbitrary set of fundamentals with uniform weights.
pub fn factor_for_fundamentals(
    spec: &CovarianceSpec,
    settings: &KernelSettings,
    fundamentals: &[f64],
) -> Result<CholeskyFactor> {
    let params = settings.for_fundamentals(fundamentals)?;
    let k = build_covariance(spec, &params)?;
    CholeskyFactor::new(&k, settings.noise_sigma)
}

/// Per-note-set Cholesky factors, built once before following starts.
#[derive(Debug)]
pub struct CholeskyCache {
    spec: CovarianceSpec,
    factors: BTreeMap<NoteKey, CholeskyFactor>,
    factorizations: u64,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CholeskyCache {
    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Number of factorizations performed while building the cache.
    pub fn factorizations(&self) -> u64 {
        self.factorizations
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Looks up the factor for a note set; never factorizes.
    pub fn get(&self, notes: &[u8]) -> Option<&CholeskyFactor> {
        let found = self.factors.get(&NoteKey::new(notes));
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    pub fn keys(&self) -> impl Iterator<Item = &NoteKey> {
        self.factors.keys()
    }
}

/// Factorizes one covariance per distinct note set in the score.
pub fn precompute_cache(
    score: &Score,
    spec: &CovarianceSpec,
    settings: &KernelSettings,
    exec: Exec,
) -> Result<CholeskyCache> {
    if score.states().is_empty() {
        return Err(contract("score has no states"));
    }
    // first state index for every distinct key, in key order
    let mut first_index: BTreeMap<NoteKey, (usize, Vec<f64>)> = BTreeMap::new();
    for state in score.states() {
        first_index.entry(NoteKey::new(&state.midi_notes)).or_insert_with(|| (state.index, state.fundamentals.clone()));
    }
    let jobs: Vec<(NoteKey, usize, Vec<f64>)> = first_index.into_iter().map(|(k, (i, f))| (k, i, f)).collect();
    let factors = exec.try_map(&jobs, |(key, index, fundamentals)| {
        factor_for_fundamentals(spec, settings, fundamentals).map(|f| (key.clone(), f.with_key(key.clone()))).map_err(
            |e| match e {
                Error::Numeric(m) => Error::Numeric(format!("state {index} {key}: {m}")),
                other => other,
            },
        )
    })?;
    Ok(CholeskyCache {
        spec: *spec,
        factorizations: factors.len() as u64,
        factors: factors.into_iter().collect(),
        hits: AtomicU64::new(0),
        misses: AtomicU64::new(0),
    })
}
