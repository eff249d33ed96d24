//! Harmonic spectral-mixture covariance model.
//!
//! Each note source `q` contributes `M` Gaussian peaks in the frequency
//! domain, centred on its (inharmonicity-corrected) partials and weighted by
//! the spectral envelope `E_m = 1 / (1 + T m^v)`. The time-domain kernel is
//! the inverse Fourier transform of that mixture: a sum of cosines under a
//! common Gaussian decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};

pub const DEFAULT_NUM_HARMONICS: usize = 9;
pub const DEFAULT_ENVELOPE_T: f64 = 0.465;
pub const DEFAULT_ENVELOPE_V: f64 = 2.37;
pub const DEFAULT_SIGMA_F: f64 = 0.005;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_HUM_FREQ: f64 = 50.0;

/// Legal range for the observation noise.
pub const NOISE_SIGMA_RANGE: (f64, f64) = (1e-4, 10.0);

/// Mains-hum component: a Gaussian mirrored at `±freq` with total mass `amp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hum {
    pub freq: f64,
    pub amp: f64,
}

/// Everything in the kernel except the note content of a state.
///
/// This is what the hyperparameter config file holds; combine with a set of
/// fundamentals via [`KernelSettings::for_fundamentals`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSettings {
    pub num_harmonics: usize,
    pub sigma_f: f64,
    pub envelope_t: f64,
    pub envelope_v: f64,
    /// MIDI note number -> inharmonicity constant `B`.
    pub inharmonicity: BTreeMap<u8, f64>,
    pub noise_sigma: f64,
    pub hum: Option<Hum>,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            num_harmonics: DEFAULT_NUM_HARMONICS,
            sigma_f: DEFAULT_SIGMA_F,
            envelope_t: DEFAULT_ENVELOPE_T,
            envelope_v: DEFAULT_ENVELOPE_V,
            inharmonicity: BTreeMap::new(),
            noise_sigma: DEFAULT_NOISE_SIGMA,
            hum: None,
        }
    }
}

impl KernelSettings {
    /// Hyperparameters for a state with the given fundamentals and uniform weights.
    pub fn for_fundamentals(&self, fundamentals: &[f64]) -> Result<SpectralHyperparams> {
        if fundamentals.is_empty() {
            return Err(contract("at least one fundamental is required"));
        }
        let q = fundamentals.len();
        let params = SpectralHyperparams {
            fundamentals: fundamentals.to_vec(),
            weights: vec![1.0 / q as f64; q],
            settings: self.clone(),
        };
        params.validate()?;
        Ok(params)
    }

    /// Inharmonicity constant for the note nearest to `freq` (0 when absent).
    pub fn inharmonicity_for(&self, freq: f64) -> f64 {
        if self.inharmonicity.is_empty() {
            return 0.0;
        }
        let note = (69.0 + 12.0 * (freq / 440.0).log2()).round();
        if !(0.0..=127.0).contains(&note) {
            return 0.0;
        }
        self.inharmonicity.get(&(note as u8)).copied().unwrap_or(0.0)
    }

    /// Clamps `noise_sigma` into [`NOISE_SIGMA_RANGE`], returning whether it moved.
    pub fn clamp_noise_sigma(&mut self) -> bool {
        let (lo, hi) = NOISE_SIGMA_RANGE;
        let clamped = self.noise_sigma.clamp(lo, hi);
        let moved = clamped != self.noise_sigma;
        self.noise_sigma = clamped;
        moved
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_harmonics < 1 {
            return Err(contract("num_harmonics must be >= 1"));
        }
        if !(self.sigma_f > 0.0) || !self.sigma_f.is_finite() {
            return Err(contract("sigma_f must be positive"));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(contract("noise_sigma must be positive"));
        }
        if !(self.envelope_t >= 0.0) || !self.envelope_v.is_finite() {
            return Err(contract("envelope T must be >= 0 and v finite"));
        }
        if let Some((note, b)) = self.inharmonicity.iter().find(|(_, b)| !(**b >= 0.0)) {
            return Err(contract(format!("inharmonicity for note {note} is negative: {b}")));
        }
        if let Some(h) = self.hum {
            if !(h.freq > 0.0) || !(h.amp >= 0.0) {
                return Err(contract("hum frequency must be positive and amplitude nonnegative"));
            }
        }
        Ok(())
    }

    /// Parses the plain-text `key=value` hyperparameter format.
    ///
    /// Recognised keys: `M`, `T`, `v`, `sigma_f`, `sigma_n`, `hum_freq`,
    /// `hum_amp`, and bare MIDI note numbers mapping to inharmonicity
    /// constants. Blank lines and `#` comments are ignored. Unspecified keys
    /// keep their defaults.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut s = KernelSettings::default();
        let mut hum_freq = None;
        let mut hum_amp = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("line {}: {what}: {raw:?}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let key = key.trim();
            let value = value.trim();
            let num = || value.parse::<f64>().map_err(|_| bad("not a number"));
            match key {
                "M" => s.num_harmonics = value.parse::<usize>().map_err(|_| bad("M must be a positive integer"))?,
                "T" => s.envelope_t = num()?,
                "v" => s.envelope_v = num()?,
                "sigma_f" => s.sigma_f = num()?,
                "sigma_n" => s.noise_sigma = num()?,
                "hum_freq" => hum_freq = Some(num()?),
                "hum_amp" => hum_amp = Some(num()?),
                _ => {
                    let note: u8 = key.parse().map_err(|_| bad("unknown key"))?;
                    if note > 127 {
                        return Err(bad("MIDI note out of range"));
                    }
                    s.inharmonicity.insert(note, num()?);
                }
            }
        }
        if hum_freq.is_some() || hum_amp.is_some() {
            s.hum = Some(Hum { freq: hum_freq.unwrap_or(DEFAULT_HUM_FREQ), amp: hum_amp.unwrap_or(0.0) });
        }
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_config(&std::fs::read_to_string(path)?)
    }

    /// Serializes to the config format read by [`KernelSettings::parse_config`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "M={}", self.num_harmonics);
        let _ = writeln!(out, "T={}", self.envelope_t);
        let _ = writeln!(out, "v={}", self.envelope_v);
        let _ = writeln!(out, "sigma_f={}", self.sigma_f);
        let _ = writeln!(out, "sigma_n={}", self.noise_sigma);
        if let Some(h) = self.hum {
            let _ = writeln!(out, "hum_freq={}", h.freq);
            let _ = writeln!(out, "hum_amp={}", h.amp);
        }
        for (note, b) in &self.inharmonicity {
            let _ = writeln!(out, "{note}={b}");
        }
        out
    }
}

/// Full kernel hyperparameters for one hypothesis (state).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralHyperparams {
    pub fundamentals: Vec<f64>,
    pub weights: Vec<f64>,
    pub settings: KernelSettings,
}

impl SpectralHyperparams {
    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        if self.fundamentals.is_empty() {
            return Err(contract("Q must be >= 1"));
        }
        if self.weights.len() != self.fundamentals.len() {
            return Err(contract("weights and fundamentals differ in length"));
        }
        if self.fundamentals.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(contract("fundamentals must be positive"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(contract("weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(contract(format!("weights must sum to 1, got {total}")));
        }
        Ok(())
    }

    /// Flattened list of `(frequency, weight)` cosine components, including hum.
    pub fn components(&self) -> Vec<(f64, f64)> {
        let s = &self.settings;
        let mut out = Vec::with_capacity(self.fundamentals.len() * s.num_harmonics + 1);
        for (&f, &w) in self.fundamentals.iter().zip(&self.weights) {
            let b = s.inharmonicity_for(f);
            for m in 1..=s.num_harmonics {
                let e = envelope_weight(m, s.envelope_t, s.envelope_v);
                out.push((m as f64 * f * inharmonic_factor(m, b), w * e));
            }
        }
        if let Some(h) = s.hum {
            out.push((h.freq, h.amp));
        }
        out
    }

    /// `Σ_q w_q Σ_m E_m` (plus hum amplitude), i.e. `k(0)`.
    pub fn total_power(&self) -> f64 {
        self.components().iter().map(|(_, a)| a).sum()
    }
}

/// Frame geometry for covariance construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSpec {
    pub frame_length: usize,
    pub sample_rate: f64,
}

impl CovarianceSpec {
    pub fn new(frame_length: usize, sample_rate: f64) -> Result<Self> {
        if frame_length < 2 {
            return Err(contract("frame_length must be >= 2"));
        }
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(contract("sample_rate must be positive"));
        }
        Ok(Self { frame_length, sample_rate })
    }
}

/// Spectral envelope weight `E_m = 1 / (1 + T m^v)`.
pub fn envelope_weight(m: usize, t: f64, v: f64) -> f64 {
    1.0 / (1.0 + t * (m as f64).powf(v))
}

/// Partial stretch factor `sqrt(1 + B m^2)`.
pub fn inharmonic_factor(m: usize, b: f64) -> f64 {
    let m = m as f64;
    (1.0 + b * m * m).sqrt()
}

fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// Power spectral density `S(f)` of the harmonic mixture.
pub fn spectral_density(freq: f64, params: &SpectralHyperparams) -> f64 {
    let sd = params.settings.sigma_f;
    params
        .components()
        .iter()
        .map(|&(mu, a)| 0.5 * a * (gaussian_pdf(freq, mu, sd) + gaussian_pdf(freq, -mu, sd)))
        .sum()
}

/// Stationary kernel `k(τ)`.
pub fn kernel_value(tau: f64, params: &SpectralHyperparams) -> f64 {
    kernel_from_components(tau, params.settings.sigma_f, &params.components())
}

fn kernel_from_components(tau: f64, sigma_f: f64, components: &[(f64, f64)]) -> f64 {
    let decay = (-2.0 * PI * PI * sigma_f * sigma_f * tau * tau).exp();
    let sum: f64 = components.iter().map(|&(f, a)| a * (2.0 * PI * f * tau).cos()).sum();
    decay * sum
}

/// Kernel values at lags `0, 1/f_s, …, (ℓ-1)/f_s`.
pub fn kernel_lags(spec: &CovarianceSpec, params: &SpectralHyperparams) -> Vec<f64> {
    let components = params.components();
    let sigma_f = params.settings.sigma_f;
    (0..spec.frame_length).map(|j| kernel_from_components(j as f64 / spec.sample_rate, sigma_f, &components)).collect()
}

/// Dense symmetric Toeplitz covariance for one frame.
///
/// Only `ℓ` kernel evaluations are made; the matrix is filled from the lag
/// vector.
pub fn build_covariance(spec: &CovarianceSpec, params: &SpectralHyperparams) -> Result<DMatrix<f64>> {
    params.validate()?;
    let n = spec.frame_length;
    let len = n
        .checked_mul(n)
        .filter(|len| len.checked_mul(std::mem::size_of::<f64>()).is_some())
        .ok_or_else(|| contract(format!("frame_length {n} too large for a dense covariance")))?;
    let mut data: Vec<f64> = Vec::new();
    data.try_reserve_exact(len).map_err(|e| contract(format!("cannot allocate {n}x{n} covariance: {e}")))?;
    let lags = kernel_lags(spec, params);
    // column-major; symmetric so the layout choice does not matter
    for j in 0..n {
        for i in 0..n {
            data.push(lags[i.abs_diff(j)]);
        }
    }
    Ok(DMatrix::from_vec(n, n, data))
}

/// Draws one GP sample path of length `ℓ`.
///
/// Jitter starts at `1e-10 k(0)` and grows tenfold up to `1e-4 k(0)` until
/// the factorization succeeds.
pub fn sample_gp(spec: &CovarianceSpec, params: &SpectralHyperparams, seed: u64) -> Result<Vec<f64>> {
    let k = build_covariance(spec, params)?;
    let l = jittered_cholesky(&k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_iterator(k.nrows(), (0..k.nrows()).map(|_| StandardNormal.sample(&mut rng)));
    Ok((l * z).iter().copied().collect())
}

pub(crate) fn jittered_cholesky(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = k[(0, 0)].abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-10;
    while jitter <= 1e-4 * (1.0 + 1e-9) {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter * scale;
        }
        if let Some(chol) = a.cholesky() {
            return Ok(chol.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::Numeric("covariance not positive definite even with 1e-4 relative jitter".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(f: f64, m: usize, t: f64) -> SpectralHyperparams {
        let settings = KernelSettings { num_harmonics: m, envelope_t: t, sigma_f: 5.0, ..KernelSettings::default() };
        settings.for_fundamentals(&[f]).unwrap()
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(envelope_weight(1, 0.0, 2.37), 1.0);
        assert!((envelope_weight(1, 0.465, 2.37) - 0.682594).abs() < 1e-6);
        // frozen from a 40-digit mpmath evaluation of 1/(1+0.465*4^2.37)
        let expected = 0.074_481_747_207_968_8;
        let got = envelope_weight(4, 0.465, 2.37);
        assert!(((got - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn envelope_strictly_decreasing() {
        for m in 1..20 {
            let a = envelope_weight(m, 0.465, 2.37);
            let b = envelope_weight(m + 1, 0.465, 2.37);
            assert!(a > b && b > 0.0);
        }
    }

    #[test]
    fn inharmonic_examples() {
        assert_eq!(inharmonic_factor(5, 0.0), 1.0);
        assert!((inharmonic_factor(10, 0.001) - 1.1f64.sqrt()).abs() < 1e-15);
        assert!((inharmonic_factor(10, 0.001) - 1.048809).abs() < 1e-6);
        assert!((inharmonic_factor(1, 0.0004) - 1.000200).abs() < 1e-6);
    }

    #[test]
    fn density_on_peak() {
        let p = SpectralHyperparams {
            settings: KernelSettings { num_harmonics: 1, envelope_t: 0.0, ..KernelSettings::default() },
            fundamentals: vec![440.0],
            weights: vec![1.0],
        };
        let sd = p.settings.sigma_f;
        let expected = 0.5 / (sd * (2.0 * PI).sqrt());
        assert!((spectral_density(440.0, &p) - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn density_integrates_to_envelope_mass() {
        let p = single(220.0, 9, 0.465);
        let sd = p.settings.sigma_f;
        // composite Simpson over disjoint ±6σ windows around every peak
        let mut total = 0.0;
        for &(mu, _) in &p.components() {
            for centre in [mu, -mu] {
                let (a, b) = (centre - 6.0 * sd, centre + 6.0 * sd);
                let n = 2000;
                let h = (b - a) / n as f64;
                let acc: f64 = (0..=n)
                    .map(|i| {
                        let w = if i == 0 || i == n {
                            1.0
                        } else if i % 2 == 1 {
                            4.0
                        } else {
                            2.0
                        };
                        w * spectral_density(a + i as f64 * h, &p)
                    })
                    .sum();
                total += acc * h / 3.0;
            }
        }
        let mass: f64 = (1..=9).map(|m| envelope_weight(m, 0.465, 2.37)).sum();
        assert!((total - mass).abs() < 1e-8, "{total} vs {mass}");
    }

    #[test]
    fn kernel_at_zero_sums_weights() {
        let s = KernelSettings { envelope_t: 0.0, ..KernelSettings::default() };
        let p = s.for_fundamentals(&[196.0, 283.0, 440.0]).unwrap();
        assert!((kernel_value(0.0, &p) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_is_toeplitz() {
        let spec = CovarianceSpec::new(3, 44100.0).unwrap();
        let p = single(440.0, 3, 0.465);
        let k = build_covariance(&spec, &p).unwrap();
        let d = 1.0 / 44100.0;
        for i in 0..3 {
            for j in 0..3 {
                let lag = (i as f64 - j as f64).abs() * d;
                assert_eq!(k[(i, j)], kernel_value(lag, &p));
            }
        }
        assert_eq!(k[(0, 1)], k[(1, 2)]);
        assert_eq!(k[(0, 2)], k[(2, 0)]);
    }

    #[test]
    fn covariance_rejects_absurd_size() {
        let spec = CovarianceSpec { frame_length: usize::MAX / 2, sample_rate: 44100.0 };
        let p = single(440.0, 1, 0.0);
        assert!(matches!(build_covariance(&spec, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn gp_samples_are_deterministic() {
        let spec = CovarianceSpec::new(64, 44100.0).unwrap();
        let p = single(440.0, 9, 0.465);
        assert_eq!(sample_gp(&spec, &p, 7).unwrap(), sample_gp(&spec, &p, 7).unwrap());
        assert_ne!(sample_gp(&spec, &p, 7).unwrap(), sample_gp(&spec, &p, 8).unwrap());
    }

    #[test]
    fn gp_sample_moments() {
        let spec = CovarianceSpec::new(32, 44100.0).unwrap();
        let p = single(440.0, 9, 0.465);
        let draws: Vec<Vec<f64>> = (0..500).map(|s| sample_gp(&spec, &p, s).unwrap()).collect();
        let idx = 10;
        let var = draws.iter().map(|d| d[idx] * d[idx]).sum::<f64>() / 500.0;
        let cov1 = draws.iter().map(|d| d[idx] * d[idx + 1]).sum::<f64>() / 500.0;
        let k0 = kernel_value(0.0, &p);
        let k1 = kernel_value(1.0 / 44100.0, &p);
        assert!((var - k0).abs() / k0 < 0.15, "{var} vs {k0}");
        assert!((cov1 - k1).abs() / k1 < 0.15, "{cov1} vs {k1}");
    }

    #[test]
    fn config_round_trip_and_errors() {
        let text =
            "# piano\nM=12\nT=0.5\nv=2\nsigma_f=0.01\nsigma_n=0.2\nhum_freq=60\nhum_amp=0.01\n60=0.0004\n72 = 0.0007\n";
        let s = KernelSettings::parse_config(text).unwrap();
        assert_eq!(s.num_harmonics, 12);
        assert_eq!(s.hum, Some(Hum { freq: 60.0, amp: 0.01 }));
        assert_eq!(s.inharmonicity[&72], 0.0007);
        assert_eq!(KernelSettings::parse_config(&s.to_config_string()).unwrap(), s);
        assert!(KernelSettings::parse_config("foo=1").is_err());
        assert!(KernelSettings::parse_config("M=zero").is_err());
        assert!(KernelSettings::parse_config("60=-1").is_err());
        let hum_default = KernelSettings::parse_config("hum_amp=0.1").unwrap();
        assert_eq!(hum_default.hum.unwrap().freq, 50.0);
    }

    #[test]
    fn inharmonicity_lookup_by_nearest_note() {
        let mut s = KernelSettings::default();
        s.inharmonicity.insert(69, 0.001);
        assert_eq!(s.inharmonicity_for(440.0), 0.001);
        assert_eq!(s.inharmonicity_for(441.5), 0.001);
        assert_eq!(s.inharmonicity_for(261.6), 0.0);
    }

    #[test]
    fn weights_must_be_normalized() {
        let mut p = single(440.0, 1, 0.0);
        p.weights = vec![0.9];
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn kernel_even_and_bounded(
            f in 50.0f64..2000.0,
            m in 1usize..12,
            sf in 0.001f64..30.0,
            tau in -0.1f64..0.1,
        ) {
            let s = KernelSettings { num_harmonics: m, sigma_f: sf, ..KernelSettings::default() };
            let p = s.for_fundamentals(&[f]).unwrap();
            let k0 = kernel_value(0.0, &p);
            prop_assert_eq!(kernel_value(tau, &p), kernel_value(-tau, &p));
            prop_assert!(kernel_value(tau, &p).abs() <= k0 + 1e-12);
            prop_assert_eq!(spectral_density(tau * 1e4, &p), spectral_density(-tau * 1e4, &p));
        }
    }
}
