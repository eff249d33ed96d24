//! Audioframe slicing, energy gating, WAV I/O and windowed spectra.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{contract, Error, Result};

pub const DEFAULT_FRAME_LENGTH: usize = 800;
pub const DEFAULT_HOP_LENGTH: usize = 4000;
pub const DEFAULT_ENERGY_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_SAMPLE_RATE: f64 = 44100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    /// RMS floor below which frames are withheld.
    pub energy_threshold: f64,
    pub sample_rate: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_length: DEFAULT_FRAME_LENGTH,
            hop_length: DEFAULT_HOP_LENGTH,
            energy_threshold: DEFAULT_ENERGY_THRESHOLD,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_length < 2 {
            return Err(contract("frame_length must be >= 2"));
        }
        if self.hop_length < 1 {
            return Err(contract("hop_length must be >= 1"));
        }
        if !(self.energy_threshold >= 0.0) {
            return Err(contract("energy_threshold must be >= 0"));
        }
        if !(self.sample_rate > 0.0) {
            return Err(contract("sample_rate must be positive"));
        }
        Ok(())
    }

    /// Audioframes per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate / self.hop_length as f64
    }

    /// Seconds between consecutive frame starts.
    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Audioframe {
    pub samples: Vec<f64>,
    /// Ordinal of the frame among all candidate frames, gated or not.
    pub frame_index: usize,
    pub start_sample: usize,
}

/// Root-mean-square amplitude.
pub fn frame_energy(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Cuts `pcm` into hop-spaced frames and drops those below the energy gate.
pub fn slice_wav(pcm: &[f64], cfg: &FrameConfig) -> Result<Vec<Audioframe>> {
    cfg.validate()?;
    if pcm.len() < cfg.frame_length {
        return Err(contract(format!(
            "audio has {} samples, shorter than one {}-sample frame",
            pcm.len(),
            cfg.frame_length
        )));
    }
    let mut slicer = FrameSlicer::new(*cfg);
    let mut frames = slicer.push(pcm);
    frames.shrink_to_fit();
    Ok(frames)
}

/// Incremental slicer: feed arbitrary-sized blocks, get the same frames
/// [`slice_wav`] would produce on the concatenation.
#[derive(Debug, Clone)]
pub struct FrameSlicer {
    cfg: FrameConfig,
    buffer: Vec<f64>,
    /// Stream position of `buffer[0]`.
    buffer_start: usize,
    next_index: usize,
    gated: usize,
}

impl FrameSlicer {
    pub fn new(cfg: FrameConfig) -> Self {
        Self { cfg, buffer: Vec::new(), buffer_start: 0, next_index: 0, gated: 0 }
    }

    /// Number of frames withheld by the energy gate so far.
    pub fn gated(&self) -> usize {
        self.gated
    }

    pub fn push(&mut self, block: &[f64]) -> Vec<Audioframe> {
        self.buffer.extend_from_slice(block);
        let (len, hop) = (self.cfg.frame_length, self.cfg.hop_length);
        let mut out = Vec::new();
        loop {
            let start = self.next_index * hop;
            let Some(rel) = start.checked_sub(self.buffer_start) else { break };
            if rel + len > self.buffer.len() {
                break;
            }
            let samples = &self.buffer[rel..rel + len];
            if frame_energy(samples) >= self.cfg.energy_threshold {
                out.push(Audioframe { samples: samples.to_vec(), frame_index: self.next_index, start_sample: start });
            } else {
                self.gated += 1;
            }
            self.next_index += 1;
        }
        // drop samples no future frame can touch
        let keep_from = (self.next_index * hop).saturating_sub(self.buffer_start).min(self.buffer.len());
        if keep_from > 0 {
            self.buffer.drain(..keep_from);
            self.buffer_start += keep_from;
        }
        out
    }
}

/// Symmetric Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Hann-windowed power spectrum over the nonnegative-frequency bins.
///
/// Returns `(i * sample_rate / ℓ, |X_i|²)` for `i = 0..=ℓ/2`.
pub fn hann_power_spectrum(samples: &[f64], sample_rate: f64) -> Result<Vec<(f64, f64)>> {
    let n = samples.len();
    if n < 2 {
        return Err(contract("spectrum needs at least 2 samples"));
    }
    let window = hann_window(n);
    let mut buf: Vec<Complex<f64>> = samples.iter().zip(&window).map(|(x, w)| Complex::new(x * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok(buf[..=n / 2].iter().enumerate().map(|(i, c)| (i as f64 * sample_rate / n as f64, c.norm_sqr())).collect())
}

/// Reads a WAV file as mono `f64` samples in [-1, 1].
///
/// Supports 16/24-bit integer PCM and 32-bit float; multichannel input is
/// averaged. The file's sample rate must equal `expected_rate`.
pub fn read_wav(path: &Path, expected_rate: f64) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path).map_err(wav_error)?;
    let spec = reader.spec();
    if (spec.sample_rate as f64 - expected_rate).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{} is sampled at {} Hz but the follower is configured for {} Hz",
            path.display(),
            spec.sample_rate,
            expected_rate
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<std::result::Result<_, _>>()
        }
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = (1u32 << (bits - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()
        }
        (fmt, bits) => {
            return Err(Error::Config(format!("unsupported WAV encoding: {fmt:?} {bits}-bit")));
        }
    }
    .map_err(wav_error)?;
    Ok(interleaved.chunks(channels).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect())
}

/// Writes mono 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec =
        hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_error)?;
    for &s in samples {
        w.write_sample(s as f32).map_err(wav_error)?;
    }
    w.finalize().map_err(wav_error)
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Parse { offset: 0, message: other.to_string() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cfg(frame: usize, hop: usize) -> FrameConfig {
        FrameConfig { frame_length: frame, hop_length: hop, ..FrameConfig::default() }
    }

    #[test]
    fn slice_positions() {
        let pcm = vec![0.5; 10_000];
        let frames = slice_wav(&pcm, &cfg(800, 2000)).unwrap();
        let starts: Vec<usize> = frames.iter().map(|f| f.start_sample).collect();
        assert_eq!(starts, vec![0, 2000, 4000, 6000, 8000]);
        assert!(frames.iter().enumerate().all(|(i, f)| f.frame_index == i));
    }

    #[test]
    fn silence_is_gated() {
        assert!(slice_wav(&vec![0.0; 10_000], &cfg(800, 2000)).unwrap().is_empty());
        let quiet = vec![5e-5; 4000];
        assert!(slice_wav(&quiet, &cfg(800, 800)).unwrap().is_empty());
        let loud = vec![2e-4; 4000];
        assert_eq!(slice_wav(&loud, &cfg(800, 800)).unwrap().len(), 5);
    }

    #[test]
    fn gated_frames_consume_indices() {
        let mut pcm = vec![0.3; 5000];
        pcm[1000..2000].iter_mut().for_each(|x| *x = 0.0);
        let frames = slice_wav(&pcm, &cfg(500, 1000)).unwrap();
        let idx: Vec<usize> = frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![0, 2, 3, 4]);
        for f in &frames {
            assert_eq!(f.samples, pcm[f.start_sample..f.start_sample + 500]);
        }
    }

    #[test]
    fn short_input_rejected() {
        assert!(matches!(slice_wav(&[0.1; 799], &cfg(800, 100)), Err(Error::Contract(_))));
    }

    #[test]
    fn overlapping_frames_allowed() {
        let pcm: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.1).sin()).collect();
        let frames = slice_wav(&pcm, &cfg(100, 50)).unwrap();
        assert_eq!(frames.len(), 19);
    }

    #[test]
    fn incremental_matches_batch() {
        let pcm: Vec<f64> = (0..20_000).map(|i| ((i / 3000) % 2) as f64 * (i as f64 * 0.01).sin()).collect();
        let c = cfg(800, 1300);
        let batch = slice_wav(&pcm, &c).unwrap();
        let mut s = FrameSlicer::new(c);
        let mut inc = Vec::new();
        for block in pcm.chunks(517) {
            inc.extend(s.push(block));
        }
        assert_eq!(batch, inc);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(frame_energy(&[0.0; 10]), 0.0);
        assert_eq!(frame_energy(&[0.5; 10]), 0.5);
        let sine: Vec<f64> = (0..4410).map(|i| (2.0 * PI * 100.0 * i as f64 / 44100.0).sin()).collect();
        assert!((frame_energy(&sine) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
    }

    #[test]
    fn spectrum_peaks_at_bin() {
        let n = 1024;
        let sr = 44100.0;
        let bin = 37;
        let f = bin as f64 * sr / n as f64;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * f * i as f64 / sr).sin()).collect();
        let spec = hann_power_spectrum(&x, sr).unwrap();
        assert_eq!(spec.len(), n / 2 + 1);
        let peak = spec.iter().enumerate().max_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).unwrap().0;
        assert_eq!(peak, bin);
        assert!((spec[bin].0 - f).abs() < 1e-9);
        assert!(hann_power_spectrum(&[0.0; 64], sr).unwrap().iter().all(|p| p.1 == 0.0));
    }

    #[test]
    fn spectrum_energy_bound() {
        let x: Vec<f64> = (0..800).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        let spec = hann_power_spectrum(&x, 44100.0).unwrap();
        let total: f64 = spec.iter().map(|p| p.1).sum();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!(total <= 800.0 * energy);
    }

    #[test]
    fn wav_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let x: Vec<f64> = (0..100).map(|i| (i as f64 / 100.0) - 0.5).collect();
        write_wav(&path, &x, 44100).unwrap();
        let y = read_wav(&path, 44100.0).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-7));
        assert!(matches!(read_wav(&path, 48000.0), Err(Error::Config(_))));
    }

    #[test]
    fn stereo_16_bit_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-32768, -32768)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&path, 8000.0).unwrap(), vec![0.25, -1.0]);
    }
}
