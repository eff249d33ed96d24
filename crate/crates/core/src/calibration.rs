//! Offline hyperparameter fitting and LML sweeps.

use nalgebra::{DMatrix, DVector};

use crate::error::{contract, Error, Result};
use crate::exec::Exec;
use crate::kernel::{envelope_weight, spectral_density, CovarianceSpec, KernelSettings};
use crate::lml::{factor_for_fundamentals, lml_cholesky, CholeskyFactor};

/// Search interval for the per-note inharmonicity constant.
pub const INHARMONICITY_BOUNDS: (f64, f64) = (0.0, 0.01);
/// Half-width of the search window around each nominal harmonic, relative.
pub const PEAK_WINDOW: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub lmls: Vec<f64>,
    pub argmax_freq: f64,
}

impl SweepResult {
    fn from_curve(grid: Vec<f64>, lmls: Vec<f64>) -> Self {
        // ties go to the lower frequency so the result ignores grid order
        let mut best = 0;
        for i in 1..grid.len() {
            if lmls[i] > lmls[best] || (lmls[i] == lmls[best] && grid[i] < grid[best]) {
                best = i;
            }
        }
        let argmax_freq = grid[best];
        Self { grid, lmls, argmax_freq }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency,lml\n");
        for (f, l) in self.grid.iter().zip(&self.lmls) {
            out.push_str(&format!("{f},{l}\n"));
        }
        out
    }
}

fn tag_frequency(err: Error, freq: f64) -> Error {
    match err {
        Error::Numeric(m) => Error::Numeric(format!("at {freq} Hz: {m}")),
        Error::Contract(m) => Error::Contract(format!("at {freq} Hz: {m}")),
        other => other,
    }
}

fn sweep_factors(
    grid: &[f64],
    settings: &KernelSettings,
    spec: &CovarianceSpec,
    exec: Exec,
) -> Result<Vec<CholeskyFactor>> {
    if grid.is_empty() {
        return Err(contract("sweep grid is empty"));
    }
    if let Some(g) = grid.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(contract(format!("sweep frequency {g} is not positive")));
    }
    exec.try_map(grid, |&g| factor_for_fundamentals(spec, settings, &[g]).map_err(|e| tag_frequency(e, g)))
}

/// LML of `frame` under a single-note model at every grid frequency.
pub fn lml_sweep(
    frame: &[f64],
    grid: &[f64],
    settings: &KernelSettings,
    spec: &CovarianceSpec,
    exec: Exec,
) -> Result<SweepResult> {
    let mut all = lml_sweep_many(&[frame.to_vec()], grid, settings, spec, exec)?;
    Ok(all.remove(0))
}

/// [`lml_sweep`] over many frames, factoring each grid covariance once.
pub fn lml_sweep_many(
    frames: &[Vec<f64>],
    grid: &[f64],
    settings: &KernelSettings,
    spec: &CovarianceSpec,
    exec: Exec,
) -> Result<Vec<SweepResult>> {
    let factors = sweep_factors(grid, settings, spec, exec)?;
    exec.try_map(frames, |frame| {
        let lmls = grid
            .iter()
            .zip(&factors)
            .map(|(&g, f)| lml_cholesky(frame, f).map_err(|e| tag_frequency(e, g)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(SweepResult::from_curve(grid.to_vec(), lmls))
    })
}

/// Least-squares mixture weights for a measured power spectrum.
///
/// Column `q` of the design matrix is the model density of note `q` alone.
/// Negative weights are clamped to zero before normalizing to unit sum.
pub fn estimate_weights(spectrum: &[(f64, f64)], fundamentals: &[f64], settings: &KernelSettings) -> Result<Vec<f64>> {
    if fundamentals.is_empty() {
        return Err(contract("estimate_weights needs at least one fundamental"));
    }
    if spectrum.is_empty() {
        return Err(contract("estimate_weights needs a nonempty spectrum"));
    }
    if fundamentals.len() == 1 {
        return Ok(vec![1.0]);
    }
    let columns = fundamentals.iter().map(|&f| settings.for_fundamentals(&[f])).collect::<Result<Vec<_>>>()?;
    let a = DMatrix::from_fn(spectrum.len(), fundamentals.len(), |i, q| spectral_density(spectrum[i].0, &columns[q]));
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("design matrix is all zeros at the given bins".into()));
    }
    let b = DVector::from_iterator(spectrum.len(), spectrum.iter().map(|p| p.1));
    let w =
        a.svd(true, true).solve(&b, 1e-12).map_err(|e| Error::Numeric(format!("least-squares solve failed: {e}")))?;
    let clamped: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate("no note has a positive least-squares weight".into()));
    }
    Ok(clamped.iter().map(|x| x / total).collect())
}

/// Sub-bin peak location and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub freq: f64,
    pub power: f64,
}

/// Vertex of the parabola through three equally spaced points, as an offset in bins.
fn parabolic_vertex(a: f64, b: f64, c: f64) -> (f64, f64) {
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return (0.0, b);
    }
    let delta = 0.5 * (a - c) / denom;
    (delta, b - 0.25 * (a - c) * delta)
}

/// Largest interior local maximum within `±PEAK_WINDOW` of `target`.
///
/// Interpolation runs on log power when the three bins are positive, which
/// is exact for Gaussian-shaped peaks.
pub fn find_peak(spectrum: &[(f64, f64)], target: f64) -> Option<Peak> {
    let lo = target * (1.0 - PEAK_WINDOW);
    let hi = target * (1.0 + PEAK_WINDOW);
    let mut best: Option<usize> = None;
    for i in 1..spectrum.len().saturating_sub(1) {
        let (f, p) = spectrum[i];
        if f < lo || f > hi {
            continue;
        }
        if p > spectrum[i - 1].1 && p >= spectrum[i + 1].1 && best.is_none_or(|b| p > spectrum[b].1) {
            best = Some(i);
        }
    }
    let i = best?;
    let (a, b, c) = (spectrum[i - 1].1, spectrum[i].1, spectrum[i + 1].1);
    let step = spectrum[i + 1].0 - spectrum[i].0;
    let (delta, power) = if a > 0.0 && c > 0.0 {
        let (d, lp) = parabolic_vertex(a.ln(), b.ln(), c.ln());
        (d, lp.exp())
    } else {
        parabolic_vertex(a, b, c)
    };
    Some(Peak { freq: spectrum[i].0 + delta * step, power })
}

/// Peaks near `m·f0·√(1+B m²)` for `m = 1..=num_harmonics`.
pub fn harmonic_peaks(spectrum: &[(f64, f64)], f0: f64, num_harmonics: usize, b: f64) -> Vec<Option<Peak>> {
    (1..=num_harmonics).map(|m| find_peak(spectrum, m as f64 * f0 * (1.0 + b * (m * m) as f64).sqrt())).collect()
}

/// A measured power spectrum of a single note.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteSpectrum {
    pub fundamental: f64,
    pub bins: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeFit {
    pub t: f64,
    pub v: f64,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
}

/// Relative harmonic powers `P_m / P_1` per spectrum; harmonics without a peak are skipped.
fn relative_powers(spectra: &[NoteSpectrum], num_harmonics: usize) -> Vec<Vec<(usize, f64)>> {
    spectra
        .iter()
        .filter_map(|s| {
            let peaks = harmonic_peaks(&s.bins, s.fundamental, num_harmonics, 0.0);
            let p1 = peaks[0]?.power;
            if !(p1 > 0.0) {
                return None;
            }
            Some(peaks.iter().enumerate().filter_map(|(i, p)| p.map(|p| (i + 1, p.power / p1))).collect())
        })
        .collect()
}

fn envelope_objective(data: &[Vec<(usize, f64)>], t: f64, v: f64) -> f64 {
    let e1 = envelope_weight(1, t, v);
    data.iter()
        .flatten()
        .map(|&(m, r)| {
            let d = r - envelope_weight(m, t, v) / e1;
            d * d
        })
        .sum()
}

/// Fits the harmonic envelope `(T, v)` to measured harmonic power ratios.
///
/// Finite-difference gradient descent in `(ln T, ln v)` with Armijo
/// backtracking; the returned objective never exceeds the initial one.
pub fn fit_envelope(spectra: &[NoteSpectrum], num_harmonics: usize, initial: (f64, f64)) -> Result<EnvelopeFit> {
    if spectra.is_empty() {
        return Err(contract("fit_envelope needs at least one spectrum"));
    }
    if !(initial.0 > 0.0 && initial.1 > 0.0 && initial.0.is_finite() && initial.1.is_finite()) {
        return Err(contract("initial (T, v) must be finite and positive"));
    }
    let data = relative_powers(spectra, num_harmonics.max(1));
    if data.is_empty() {
        return Err(Error::InsufficientData("no spectrum has a resolvable fundamental peak".into()));
    }
    let f = |x: [f64; 2]| envelope_objective(&data, x[0].exp(), x[1].exp());
    let mut x = [initial.0.ln(), initial.1.ln()];
    let mut fx = f(x);
    let initial_objective = fx;
    if !fx.is_finite() {
        return Err(Error::Numeric("envelope objective is not finite at the initial point".into()));
    }
    let h = 1e-6;
    let mut iterations = 0;
    let mut step: f64 = 1.0;
    while iterations < 20_000 {
        iterations += 1;
        let g = [
            (f([x[0] + h, x[1]]) - f([x[0] - h, x[1]])) / (2.0 * h),
            (f([x[0], x[1] + h]) - f([x[0], x[1] - h])) / (2.0 * h),
        ];
        let gg = g[0] * g[0] + g[1] * g[1];
        if !gg.is_finite() {
            return Err(Error::Numeric("envelope gradient is not finite".into()));
        }
        if gg < 1e-24 {
            break;
        }
        // grow the trial step a little each iteration, shrink on failure
        step = (step * 4.0).min(1e6);
        let mut accepted = false;
        while step > 1e-16 {
            let trial = [x[0] - step * g[0], x[1] - step * g[1]];
            let ft = f(trial);
            if ft.is_finite() && ft <= fx - 1e-4 * step * gg {
                x = trial;
                fx = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(EnvelopeFit { t: x[0].exp(), v: x[1].exp(), objective: fx, initial_objective, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InharmonicityFit {
    pub b: f64,
    pub objective: f64,
    pub initial_objective: f64,
    pub peaks_used: usize,
}

fn inharmonicity_objective(peaks: &[(usize, f64)], f0: f64, b: f64) -> f64 {
    peaks
        .iter()
        .map(|&(m, f)| {
            let model = m as f64 * f0 * (1.0 + b * (m * m) as f64).sqrt();
            (f - model) * (f - model)
        })
        .sum()
}

/// Fits `B` to known harmonic peak frequencies `(m, f_m)` by golden-section
/// search over [`INHARMONICITY_BOUNDS`].
pub fn fit_inharmonicity_peaks(peaks: &[(usize, f64)], f0: f64, initial_b: f64) -> Result<InharmonicityFit> {
    if peaks.len() < 3 {
        return Err(Error::InsufficientData(format!("need at least 3 harmonic peaks, found {}", peaks.len())));
    }
    if !(f0 > 0.0) {
        return Err(contract("fundamental must be positive"));
    }
    let obj = |b: f64| inharmonicity_objective(peaks, f0, b);
    let (mut a, mut c) = INHARMONICITY_BOUNDS;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = c - ratio * (c - a);
    let mut x2 = a + ratio * (c - a);
    let (mut f1, mut f2) = (obj(x1), obj(x2));
    while c - a > 1e-12 {
        if f1 <= f2 {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - ratio * (c - a);
            f1 = obj(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (c - a);
            f2 = obj(x2);
        }
    }
    // the bound itself may beat the interior bracket
    let mut best = (0.5 * (a + c), obj(0.5 * (a + c)));
    for b in [INHARMONICITY_BOUNDS.0, INHARMONICITY_BOUNDS.1] {
        let fb = obj(b);
        if fb < best.1 {
            best = (b, fb);
        }
    }
    let start = initial_b.clamp(INHARMONICITY_BOUNDS.0, INHARMONICITY_BOUNDS.1);
    let initial_objective = obj(start);
    if initial_objective < best.1 {
        best = (start, initial_objective);
    }
    if !best.1.is_finite() {
        return Err(Error::Numeric("inharmonicity objective is not finite".into()));
    }
    Ok(InharmonicityFit { b: best.0, objective: best.1, initial_objective, peaks_used: peaks.len() })
}

/// Fits `B` for one note from its power spectrum.
///
/// Peaks are searched around the positions predicted by `initial_b`.
pub fn fit_inharmonicity(
    spectrum: &[(f64, f64)],
    f0: f64,
    num_harmonics: usize,
    initial_b: f64,
) -> Result<InharmonicityFit> {
    let peaks: Vec<(usize, f64)> = harmonic_peaks(spectrum, f0, num_harmonics, initial_b.max(0.0))
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i + 1, p.freq)))
        .collect();
    fit_inharmonicity_peaks(&peaks, f0, initial_b)
}

/// Samples the model density of `fundamentals` on `[0, max_freq]` every `step` Hz.
pub fn model_spectrum(
    fundamentals: &[f64],
    weights: Option<&[f64]>,
    settings: &KernelSettings,
    step: f64,
    max_freq: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(step > 0.0) || !(max_freq > step) {
        return Err(contract("model_spectrum needs 0 < step < max_freq"));
    }
    let mut params = settings.for_fundamentals(fundamentals)?;
    if let Some(w) = weights {
        params.weights = w.to_vec();
        params.validate()?;
    }
    let n = (max_freq / step).floor() as usize;
    Ok((0..=n)
        .map(|i| {
            let f = i as f64 * step;
            (f, spectral_density(f, &params))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{sample_gp, CovarianceSpec};
    use std::collections::BTreeMap;

    fn wide() -> KernelSettings {
        KernelSettings { sigma_f: 2.0, ..KernelSettings::default() }
    }

    #[test]
    fn sweep_single_point_and_ordering() {
        let spec = CovarianceSpec::new(200, 44100.0).unwrap();
        let s = KernelSettings::default();
        let y = sample_gp(&spec, &s.for_fundamentals(&[349.0]).unwrap(), 1).unwrap();
        let one = lml_sweep(&y, &[440.0], &s, &spec, Exec::Sequential).unwrap();
        assert_eq!(one.argmax_freq, 440.0);
        let grid = [87.25, 174.5, 349.0, 698.0];
        let a = lml_sweep(&y, &grid, &s, &spec, Exec::Sequential).unwrap();
        let mut rev = grid;
        rev.reverse();
        let b = lml_sweep(&y, &rev, &s, &spec, Exec::Parallel).unwrap();
        assert_eq!(a.argmax_freq, 349.0);
        assert_eq!(a.argmax_freq, b.argmax_freq);
        assert!(a.lmls.iter().all(|v| v.is_finite()));
        assert!(lml_sweep(&y, &[], &s, &spec, Exec::Sequential).is_err());
        assert!(lml_sweep(&y, &[0.0], &s, &spec, Exec::Sequential).is_err());
        assert!(a.to_csv().starts_with("frequency,lml\n87.25,"));
    }

    #[test]
    fn weights_recovered() {
        let s = wide();
        let spec = model_spectrum(&[196.0, 293.66], Some(&[0.2, 0.8]), &s, 0.5, 3000.0).unwrap();
        let w = estimate_weights(&spec, &[196.0, 293.66], &s).unwrap();
        assert!((w[0] - 0.2).abs() < 0.02 && (w[1] - 0.8).abs() < 0.02, "{w:?}");
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(estimate_weights(&spec, &[440.0], &s).unwrap(), vec![1.0]);
    }

    #[test]
    fn weights_degenerate() {
        let s = wide();
        let far = [(20000.0, 1.0), (20001.0, 2.0)];
        assert!(matches!(estimate_weights(&far, &[100.0, 150.0], &s), Err(Error::Degenerate(_))));
        assert!(estimate_weights(&[], &[100.0, 150.0], &s).is_err());
    }

    #[test]
    fn envelope_recovered() {
        let s = wide();
        let spectra: Vec<NoteSpectrum> = [220.0, 330.0]
            .iter()
            .map(|&f| NoteSpectrum { fundamental: f, bins: model_spectrum(&[f], None, &s, 0.25, 4000.0).unwrap() })
            .collect();
        let fit = fit_envelope(&spectra, 9, (1.0, 1.5)).unwrap();
        assert!((fit.t / 0.465 - 1.0).abs() < 0.05, "{fit:?}");
        assert!((fit.v / 2.37 - 1.0).abs() < 0.05, "{fit:?}");
        assert!(fit.objective <= fit.initial_objective);
    }

    #[test]
    fn envelope_no_worse_from_optimum_and_single_harmonic() {
        let s = wide();
        let spectra =
            vec![NoteSpectrum { fundamental: 220.0, bins: model_spectrum(&[220.0], None, &s, 0.25, 3000.0).unwrap() }];
        let fit = fit_envelope(&spectra, 9, (0.465, 2.37)).unwrap();
        assert!(fit.objective <= fit.initial_objective);
        let fit = fit_envelope(&spectra, 1, (0.5, 2.0)).unwrap();
        assert_eq!(fit.objective, 0.0);
        assert!(fit_envelope(&[], 9, (0.5, 2.0)).is_err());
    }

    #[test]
    fn inharmonicity_recovered() {
        let mut s = wide();
        s.inharmonicity = BTreeMap::from([(57, 5e-4)]);
        let spec = model_spectrum(&[220.0], None, &s, 0.25, 3000.0).unwrap();
        let fit = fit_inharmonicity(&spec, 220.0, 9, 0.0).unwrap();
        assert!((fit.b / 5e-4 - 1.0).abs() < 0.1, "{fit:?}");
        assert!(fit.objective <= fit.initial_objective);
    }

    #[test]
    fn inharmonicity_zero_cases() {
        let exact: Vec<(usize, f64)> = (1..=9).map(|m| (m, m as f64 * 261.63)).collect();
        assert!(fit_inharmonicity_peaks(&exact, 261.63, 0.0).unwrap().b < 1e-6);
        let bin = 44100.0 / 4096.0;
        let jittered: Vec<(usize, f64)> =
            exact.iter().enumerate().map(|(i, &(m, f))| (m, f + if i % 2 == 0 { 0.1 } else { -0.1 } * bin)).collect();
        assert!(fit_inharmonicity_peaks(&jittered, 261.63, 0.0).unwrap().b < 1e-4);
        assert!(matches!(fit_inharmonicity_peaks(&exact[..2], 261.63, 0.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn peak_interpolation_is_exact_for_gaussians() {
        let bins: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let f = i as f64;
                (f, (-(f - 100.3) * (f - 100.3) / 8.0).exp())
            })
            .collect();
        let p = find_peak(&bins, 100.0).unwrap();
        assert!((p.freq - 100.3).abs() < 1e-9);
        assert!((p.power - 1.0).abs() < 1e-9);
        assert!(find_peak(&bins, 50.0).is_none());
    }
}
