//! Online (windowed) and offline Viterbi decoding over a left-to-right chain.
//!
//! Both decoders share one recurrence. For each state `k` at frame `n`:
//!
//! ```text
//! Π[k,n] = lml(k) + max( Π[k,n-1]   + log p_self(k, d_k),
//!                        Π[k-1,n-1] + log p_adv(k-1, d_{k-1}) )
//! ```
//!
//! where `d_k` is the run of self-transitions on the best path into `k`.
//! The first frame is pinned to state 1. Ties in the max prefer the
//! advancing predecessor; ties in the argmax prefer the higher state.

use std::io::{BufRead, Write};

use crate::duration::{expected_frames_static, log_transition_probs, DurationModel, TempoTracker, TransitionModel};
use crate::error::{contract, Error, Result};
use crate::score::Score;

pub const DEFAULT_WINDOW_LENGTH: usize = 6;
pub const DEFAULT_WINDOW_THRESHOLD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub window_length: usize,
    /// Offset within the window past which the window slides forward.
    pub window_threshold: usize,
    pub duration: DurationModel,
    /// Audioframes per second (sample_rate / hop_length).
    pub frame_rate: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            window_length: DEFAULT_WINDOW_LENGTH,
            window_threshold: DEFAULT_WINDOW_THRESHOLD,
            duration: DurationModel::default(),
            frame_rate: 44100.0 / 4000.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 {
            return Err(contract("window_length must be >= 1"));
        }
        if self.window_threshold >= self.window_length {
            return Err(contract("window_threshold must be smaller than window_length"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(contract("frame_rate must be positive"));
        }
        self.duration.validate()
    }
}

/// One step of a recurrence: picks the better predecessor.
#[inline]
fn relax(stay: f64, advance: f64) -> (f64, bool) {
    if advance >= stay {
        (advance, true)
    } else {
        (stay, false)
    }
}

/// Index of the maximum, preferring the later index on ties.
fn argmax_last(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some(b) if values[b] > v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Windowed Viterbi working set.
#[derive(Debug, Clone)]
pub struct WindowedDecoder {
    times_to_next: Vec<f64>,
    config: DecoderConfig,
    window_start: usize,
    log_probs: Vec<f64>,
    run_lengths: Vec<u32>,
    estimate: usize,
    frame_count: usize,
    tracker: TempoTracker,
    dwell_state: usize,
    dwell_frames: u32,
}

impl WindowedDecoder {
    /// Decoder positioned before the first frame, all mass on state 1.
    pub fn new(score: &Score, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let times_to_next: Vec<f64> = score.states().iter().map(|s| s.time_to_next).collect();
        let span = match config.duration {
            DurationModel::StateDuration { span, .. } => span,
            DurationModel::Fixed { .. } => 1,
        };
        let width = config.window_length.min(times_to_next.len());
        let mut log_probs = vec![f64::NEG_INFINITY; width];
        log_probs[0] = 0.0;
        Ok(Self {
            tracker: TempoTracker::new(span, config.frame_rate)?,
            times_to_next,
            config,
            window_start: 1,
            log_probs,
            run_lengths: vec![0; width],
            estimate: 1,
            frame_count: 0,
            dwell_state: 1,
            dwell_frames: 0,
        })
    }

    pub fn num_states(&self) -> usize {
        self.times_to_next.len()
    }

    /// States (1-based, inclusive) the next step needs LMLs for.
    pub fn window(&self) -> std::ops::RangeInclusive<usize> {
        self.window_start..=self.window_start + self.log_probs.len() - 1
    }

    pub fn window_start(&self) -> usize {
        self.window_start
    }

    pub fn current_estimate(&self) -> usize {
        self.estimate
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    /// Current column of path log-probabilities, aligned with [`Self::window`].
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn run_lengths(&self) -> &[u32] {
        &self.run_lengths
    }

    pub fn tempo(&self) -> &TempoTracker {
        &self.tracker
    }

    /// Best path log-probability in the window.
    pub fn best_log_prob(&self) -> f64 {
        self.log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn log_transitions(&self, state: usize, d: u32) -> (f64, f64) {
        let ttn = self.times_to_next[state - 1];
        match self.config.duration {
            DurationModel::Fixed { p_self } => (p_self.ln(), (1.0 - p_self).ln()),
            DurationModel::StateDuration { adaptive: false, .. } => {
                log_transition_probs(expected_frames_static(ttn, self.config.frame_rate), d)
            }
            DurationModel::StateDuration { adaptive: true, .. } => {
                log_transition_probs(self.tracker.expected_frames_adaptive(ttn), d)
            }
        }
    }

    /// Consumes one frame's LMLs (one per window state, in window order)
    /// and returns the new estimate.
    pub fn step(&mut self, frame_lmls: &[f64]) -> Result<usize> {
        let width = self.log_probs.len();
        if frame_lmls.len() != width {
            return Err(contract(format!(
                "expected {width} LMLs for window {:?}, got {}",
                self.window(),
                frame_lmls.len()
            )));
        }
        if frame_lmls.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(contract("LMLs must be finite or -inf"));
        }

        let mut next = vec![f64::NEG_INFINITY; width];
        let mut runs = vec![0u32; width];
        if self.frame_count == 0 {
            for i in 0..width {
                next[i] = self.log_probs[i] + frame_lmls[i];
            }
        } else {
            for i in 0..width {
                let k = self.window_start + i;
                let stay = if self.log_probs[i] > f64::NEG_INFINITY {
                    self.log_probs[i] + self.log_transitions(k, self.run_lengths[i]).0
                } else {
                    f64::NEG_INFINITY
                };
                let advance = if i > 0 && self.log_probs[i - 1] > f64::NEG_INFINITY {
                    self.log_probs[i - 1] + self.log_transitions(k - 1, self.run_lengths[i - 1]).1
                } else {
                    f64::NEG_INFINITY
                };
                let (best, advanced) = relax(stay, advance);
                if best > f64::NEG_INFINITY {
                    next[i] = best + frame_lmls[i];
                    runs[i] = if advanced { 0 } else { self.run_lengths[i] + 1 };
                }
            }
        }
        self.log_probs = next;
        self.run_lengths = runs;
        self.frame_count += 1;

        // an all -inf column leaves the previous estimate in place
        if let Some(i) = argmax_last(&self.log_probs) {
            self.estimate = self.window_start + i;
        }
        self.update_tempo();
        self.slide_window();
        Ok(self.estimate)
    }

    fn update_tempo(&mut self) {
        use std::cmp::Ordering::*;
        match self.estimate.cmp(&self.dwell_state) {
            Equal => self.dwell_frames += 1,
            Greater => {
                let ttn = self.times_to_next[self.dwell_state - 1];
                self.tracker.record(self.dwell_frames, ttn);
                self.dwell_state = self.estimate;
                self.dwell_frames = 1;
            }
            Less => {
                self.dwell_state = self.estimate;
                self.dwell_frames = 1;
            }
        }
    }

    fn slide_window(&mut self) {
        let k = self.num_states();
        let len = self.config.window_length;
        let phi = self.config.window_threshold;
        if self.estimate <= self.window_start + phi {
            return;
        }
        let max_start = if k > len { k - len + 1 } else { 1 };
        let new_start = (self.estimate - phi).min(max_start);
        if new_start <= self.window_start {
            return;
        }
        let shift = new_start - self.window_start;
        self.window_start = new_start;
        let width = self.log_probs.len();
        self.log_probs.drain(..shift.min(width));
        self.run_lengths.drain(..shift.min(width));
        self.log_probs.resize(width, f64::NEG_INFINITY);
        self.run_lengths.resize(width, 0);
    }
}

/// Exact recurrence over the whole trellis with traceback.
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    /// 1-based state per frame.
    pub states: Vec<usize>,
    pub log_prob: f64,
}

/// Offline Viterbi over all frames. `frame_lmls[n][k-1]` is the LML of
/// frame `n` under state `k`.
pub fn full_viterbi<T: TransitionModel + ?Sized>(frame_lmls: &[Vec<f64>], model: &T) -> Result<ViterbiPath> {
    let n_frames = frame_lmls.len();
    if n_frames == 0 {
        return Err(contract("full_viterbi needs at least one frame"));
    }
    let k = frame_lmls[0].len();
    if k == 0 || frame_lmls.iter().any(|row| row.len() != k) {
        return Err(contract("every frame must carry one LML per state"));
    }

    let mut column = vec![f64::NEG_INFINITY; k];
    column[0] = frame_lmls[0][0];
    let mut runs = vec![0u32; k];
    // advanced[n][i]: best path into state i+1 at frame n came from state i
    let mut advanced = vec![vec![false; k]; n_frames];
    for n in 1..n_frames {
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut next_runs = vec![0u32; k];
        for i in 0..k {
            let state = i + 1;
            let stay = if column[i] > f64::NEG_INFINITY {
                column[i] + model.log_transitions(state, runs[i]).0
            } else {
                f64::NEG_INFINITY
            };
            let advance = if i > 0 && column[i - 1] > f64::NEG_INFINITY {
                column[i - 1] + model.log_transitions(state - 1, runs[i - 1]).1
            } else {
                f64::NEG_INFINITY
            };
            let (best, adv) = relax(stay, advance);
            if best > f64::NEG_INFINITY {
                next[i] = best + frame_lmls[n][i];
                next_runs[i] = if adv { 0 } else { runs[i] + 1 };
                advanced[n][i] = adv;
            }
        }
        column = next;
        runs = next_runs;
    }

    let last = argmax_last(&column).ok_or_else(|| Error::Numeric("every path has zero probability".into()))?;
    let mut states = vec![0usize; n_frames];
    let mut i = last;
    for n in (0..n_frames).rev() {
        states[n] = i + 1;
        if n > 0 && advanced[n][i] {
            i -= 1;
        }
    }
    Ok(ViterbiPath { states, log_prob: column[last] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub frame_index: usize,
    pub state: usize,
    pub log_prob: f64,
}

pub type AlignmentTrace = Vec<TraceEntry>;

/// `frame_index<TAB>state<TAB>log_prob` with six decimals, one line per frame.
pub fn write_trace<W: Write>(trace: &[TraceEntry], mut sink: W) -> Result<()> {
    for e in trace {
        writeln!(sink, "{}\t{}\t{:.6}", e.frame_index, e.state, e.log_prob)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(source: R) -> Result<AlignmentTrace> {
    let mut out = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Parse { offset: lineno, message: format!("bad trace line {line:?}") };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad());
        }
        out.push(TraceEntry {
            frame_index: cols[0].parse().map_err(|_| bad())?,
            state: cols[1].parse().map_err(|_| bad())?,
            log_prob: cols[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
