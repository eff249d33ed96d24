//! Duration-dependent transition model.
//!
//! The number of self-transitions `Z` spent in a state is geometric with
//! mean `E[Z]`. After `d` self-transitions the probability of staying is
//! `(E[Z] / (1 + E[Z]))^(d+1)`; the remainder goes to the next state.
//! `E[Z]` comes either from the notated duration at the notated tempo, or
//! from a moving-average estimate of the performer's tempo.

use std::collections::VecDeque;

use crate::error::{contract, Result};

pub const DEFAULT_TEMPO_SPAN: usize = 4;
pub const DEFAULT_FALLBACK_P_SELF: f64 = 0.95;

/// `E[Z]` assuming the notated tempo: `time_to_next × frame_rate`.
pub fn expected_frames_static(time_to_next: f64, frame_rate: f64) -> f64 {
    time_to_next * frame_rate
}

/// `(p_self, p_advance)` after `d` self-transitions.
pub fn transition_probs(expected_z: f64, d: u32) -> (f64, f64) {
    let p_self = (expected_z / (1.0 + expected_z)).powi(d as i32 + 1);
    (p_self, 1.0 - p_self)
}

/// Log-domain `(log p_self, log p_advance)`, accurate at both extremes.
pub fn log_transition_probs(expected_z: f64, d: u32) -> (f64, f64) {
    // log(E/(1+E)) = -log1p(1/E)
    let log_self = -(d as f64 + 1.0) * (1.0 / expected_z).ln_1p();
    (log_self, log1m_exp(log_self))
}

/// `log(1 - exp(x))` for `x <= 0`.
pub(crate) fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Moving average of observed frames per score-second over the last `h` notes.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoTracker {
    history: VecDeque<(u32, f64)>,
    span: usize,
    frame_rate: f64,
}

impl TempoTracker {
    pub fn new(span: usize, frame_rate: f64) -> Result<Self> {
        if span == 0 {
            return Err(contract("tempo span h must be >= 1"));
        }
        if !(frame_rate > 0.0) {
            return Err(contract("frame_rate must be positive"));
        }
        Ok(Self { history: VecDeque::with_capacity(span), span, frame_rate })
    }

    /// Records a completed note: `frames` audioframes for `time_to_next` seconds of score.
    pub fn record(&mut self, frames: u32, time_to_next: f64) {
        if frames == 0 || !(time_to_next > 0.0) {
            return;
        }
        if self.history.len() == self.span {
            self.history.pop_front();
        }
        self.history.push_back((frames, time_to_next));
    }

    pub fn history(&self) -> impl Iterator<Item = &(u32, f64)> {
        self.history.iter()
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    /// Frames per second of score time; the notated rate before any note completes.
    pub fn conversion_rate(&self) -> f64 {
        if self.history.is_empty() {
            return self.frame_rate;
        }
        let sum: f64 = self.history.iter().map(|&(z, t)| z as f64 / t).sum();
        sum / self.history.len() as f64
    }

    pub fn expected_frames_adaptive(&self, time_to_next: f64) -> f64 {
        self.conversion_rate() * time_to_next
    }
}

/// How the decoder obtains transition probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DurationModel {
    /// Geometric state-duration model; `adaptive` selects the tempo tracker.
    StateDuration { adaptive: bool, span: usize },
    /// Duration-independent constant self-transition probability.
    Fixed { p_self: f64 },
}

impl Default for DurationModel {
    fn default() -> Self {
        DurationModel::StateDuration { adaptive: true, span: DEFAULT_TEMPO_SPAN }
    }
}

impl DurationModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DurationModel::StateDuration { span: 0, .. } => Err(contract("h must be >= 1")),
            DurationModel::Fixed { p_self } if !(p_self > 0.0 && p_self < 1.0) => {
                Err(contract("fallback p_self must lie in (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// Log transition probabilities for a left-to-right chain.
pub trait TransitionModel {
    /// `(log p_self, log p_advance)` for leaving 1-based `state` after `d` self-transitions.
    fn log_transitions(&self, state: usize, d: u32) -> (f64, f64);
}

/// Per-state `E[Z]` fixed in advance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedDurations {
    pub expected: Vec<f64>,
}

impl ExpectedDurations {
    /// `E[Z]` for every state at the notated tempo.
    pub fn notated(times_to_next: impl IntoIterator<Item = f64>, frame_rate: f64) -> Self {
        Self { expected: times_to_next.into_iter().map(|t| expected_frames_static(t, frame_rate)).collect() }
    }
}

impl TransitionModel for ExpectedDurations {
    fn log_transitions(&self, state: usize, d: u32) -> (f64, f64) {
        log_transition_probs(self.expected[state - 1], d)
    }
}

/// Constant-hazard model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedHazard {
    pub p_self: f64,
}

impl TransitionModel for FixedHazard {
    fn log_transitions(&self, _state: usize, _d: u32) -> (f64, f64) {
        (self.p_self.ln(), (1.0 - self.p_self).ln())
    }
}
