//! Additive synthesis of a score, for end-to-end tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::Audioframe;
use crate::error::{contract, Result};
use crate::kernel::{envelope_weight, inharmonic_factor, KernelSettings};
use crate::score::Score;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub sample_rate: f64,
    /// Multiplies every notated duration; 1.5 plays 50% slower.
    pub stretch: f64,
    /// Signal-to-noise ratio of the added white noise; `None` renders clean audio.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { sample_rate: 44100.0, stretch: 1.0, snr_db: Some(20.0), seed: 0 }
    }
}

/// Rendered audio and the sample span of every state.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub pcm: Vec<f64>,
    /// `spans[k-1]` is the half-open sample range of state `k`.
    pub spans: Vec<(usize, usize)>,
    pub sample_rate: f64,
}

impl Rendering {
    /// 1-based state sounding at `sample`, clamped to the last state.
    pub fn state_at(&self, sample: usize) -> usize {
        match self.spans.iter().position(|&(s, e)| sample >= s && sample < e) {
            Some(i) => i + 1,
            None if sample < self.spans[0].0 => 1,
            None => self.spans.len(),
        }
    }

    /// Ground-truth state at the centre of each frame.
    pub fn ground_truth(&self, frames: &[Audioframe]) -> Vec<usize> {
        frames.iter().map(|f| self.state_at(f.start_sample + f.samples.len() / 2)).collect()
    }

    pub fn duration(&self) -> f64 {
        self.pcm.len() as f64 / self.sample_rate
    }
}

/// Renders each state as `Σ_q Σ_m E_m cos(2π m f_q b_m t + φ)` with random phases.
pub fn render(score: &Score, settings: &KernelSettings, opts: &SynthOptions) -> Result<Rendering> {
    if !(opts.stretch > 0.0) || !(opts.sample_rate > 0.0) {
        return Err(contract("stretch and sample_rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pcm = Vec::new();
    let mut spans = Vec::with_capacity(score.num_states());
    for state in score.states() {
        let start = pcm.len();
        let len = (state.time_to_next * opts.stretch * opts.sample_rate).round() as usize;
        let mut partials = Vec::new();
        for &f in &state.fundamentals {
            let b = settings.inharmonicity_for(f);
            for m in 1..=settings.num_harmonics {
                let freq = m as f64 * f * inharmonic_factor(m, b);
                if freq < opts.sample_rate / 2.0 {
                    let amp = envelope_weight(m, settings.envelope_t, settings.envelope_v);
                    partials.push((freq, amp, rng.gen_range(0.0..std::f64::consts::TAU)));
                }
            }
        }
        pcm.extend((0..len).map(|i| {
            let t = (start + i) as f64 / opts.sample_rate;
            partials.iter().map(|&(f, a, phase)| a * (std::f64::consts::TAU * f * t + phase).cos()).sum::<f64>()
        }));
        spans.push((start, pcm.len()));
    }
    if let Some(snr) = opts.snr_db {
        let power = pcm.iter().map(|x| x * x).sum::<f64>() / pcm.len().max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        for x in pcm.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *x += sigma * n;
        }
    }
    Ok(Rendering { pcm, spans, sample_rate: opts.sample_rate })
}
