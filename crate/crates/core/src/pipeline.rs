//! The four-stage follower: frame source, decoder, backend emitter and player.
//!
//! Stages are threads joined by bounded queues. The source pushes
//! audioframes, the decoder turns each into a position estimate, and the
//! backend sends every estimate as a datagram and appends it to the trace.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::audio::{read_wav, Audioframe, FrameConfig, FrameSlicer};
use crate::capture::{live_capture, BoundedQueue, CaptureDevice, DEFAULT_FRAME_QUEUE_CAPACITY};
use crate::duration::{DurationModel, DEFAULT_FALLBACK_P_SELF, DEFAULT_TEMPO_SPAN};
use crate::error::{contract, Error, Result};
use crate::exec::Exec;
use crate::kernel::{CovarianceSpec, KernelSettings};
use crate::lml::{lml_cholesky, precompute_cache, CholeskyCache};
use crate::score::{apply_sustain, load_midi, Score};
use crate::viterbi::{
    write_trace, AlignmentTrace, DecoderConfig, TraceEntry, WindowedDecoder, DEFAULT_WINDOW_LENGTH,
    DEFAULT_WINDOW_THRESHOLD,
};

pub const DEFAULT_ESTIMATE_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Prerecorded,
    Live,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub score_path: PathBuf,
    pub audio_path: Option<PathBuf>,
    pub frames: FrameConfig,
    pub kernel: KernelSettings,
    pub sustain: usize,
    /// `false` switches to the constant `fallback_p_self` transition model.
    pub state_duration: bool,
    pub fallback_p_self: f64,
    /// Moving-average span for the tempo tracker; 0 keeps the notated tempo.
    pub tempo_span: usize,
    pub window_length: usize,
    pub window_threshold: usize,
    pub udp: Option<String>,
    pub trace: Option<PathBuf>,
    pub paced: bool,
    pub play: bool,
    pub exec: Exec,
    pub frame_queue_capacity: usize,
    pub estimate_queue_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Prerecorded,
            score_path: PathBuf::new(),
            audio_path: None,
            frames: FrameConfig::default(),
            kernel: KernelSettings::default(),
            sustain: 0,
            state_duration: true,
            fallback_p_self: DEFAULT_FALLBACK_P_SELF,
            tempo_span: DEFAULT_TEMPO_SPAN,
            window_length: DEFAULT_WINDOW_LENGTH,
            window_threshold: DEFAULT_WINDOW_THRESHOLD,
            udp: None,
            trace: None,
            paced: false,
            play: false,
            exec: Exec::default(),
            frame_queue_capacity: DEFAULT_FRAME_QUEUE_CAPACITY,
            estimate_queue_capacity: DEFAULT_ESTIMATE_QUEUE_CAPACITY,
        }
    }
}

impl RunConfig {
    pub fn duration_model(&self) -> DurationModel {
        match (self.state_duration, self.tempo_span) {
            (false, _) => DurationModel::Fixed { p_self: self.fallback_p_self },
            (true, 0) => DurationModel::StateDuration { adaptive: false, span: 1 },
            (true, span) => DurationModel::StateDuration { adaptive: true, span },
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            window_length: self.window_length,
            window_threshold: self.window_threshold,
            duration: self.duration_model(),
            frame_rate: self.frames.frame_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Contract(m) => Error::Config(m),
            other => other,
        };
        if self.mode == Mode::Prerecorded && self.audio_path.is_none() {
            return Err(Error::Config("prerecorded mode needs an audio file".into()));
        }
        if self.frame_queue_capacity == 0 || self.estimate_queue_capacity == 0 {
            return Err(Error::Config("queue capacities must be >= 1".into()));
        }
        self.frames.validate().map_err(as_config)?;
        self.kernel.validate().map_err(as_config)?;
        self.decoder_config().validate().map_err(as_config)
    }
}

/// Window LML evaluation plus decoder state for one score.
pub struct Follower {
    score: Score,
    cache: CholeskyCache,
    decoder: WindowedDecoder,
    exec: Exec,
}

impl Follower {
    /// Precomputes every state's Cholesky factor and positions the decoder at state 1.
    pub fn new(
        score: Score,
        frames: &FrameConfig,
        kernel: &KernelSettings,
        decoder: DecoderConfig,
        exec: Exec,
    ) -> Result<Self> {
        let spec = CovarianceSpec::new(frames.frame_length, frames.sample_rate)?;
        let cache = precompute_cache(&score, &spec, kernel, exec)?;
        let decoder = WindowedDecoder::new(&score, decoder)?;
        Ok(Self { score, cache, decoder, exec })
    }

    pub fn score(&self) -> &Score {
        &self.score
    }

    pub fn cache(&self) -> &CholeskyCache {
        &self.cache
    }

    pub fn decoder(&self) -> &WindowedDecoder {
        &self.decoder
    }

    /// LML of `samples` under every state in the current window.
    pub fn window_lmls(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let states: Vec<usize> = self.decoder.window().collect();
        self.exec.try_map(&states, |&k| {
            let notes = &self.score.state(k).midi_notes;
            let factor = self.cache.get(notes).ok_or_else(|| contract(format!("no cached factor for state {k}")))?;
            lml_cholesky(samples, factor)
        })
    }

    pub fn process(&mut self, frame: &Audioframe) -> Result<TraceEntry> {
        let lmls = self.window_lmls(&frame.samples)?;
        let state = self.decoder.step(&lmls)?;
        let offset = state - self.decoder.window_start();
        Ok(TraceEntry { frame_index: frame.frame_index, state, log_prob: self.decoder.log_probs()[offset] })
    }
}

/// `<frame_index> <state_index> <num_states>\n` in ASCII.
pub fn position_payload(frame_index: usize, state: usize, num_states: usize) -> String {
    format!("{frame_index} {state} {num_states}\n")
}

/// Sends one position datagram; fire-and-forget.
pub fn emit_position(
    socket: &UdpSocket,
    target: SocketAddr,
    frame_index: usize,
    state: usize,
    num_states: usize,
) -> io::Result<()> {
    socket.send_to(position_payload(frame_index, state, num_states).as_bytes(), target).map(|_| ())
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| Error::Config(format!("bad UDP target {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| Error::Config(format!("UDP target {addr:?} resolves to nothing")))
}

/// Starts an external player for `wav`; `None` (with a warning) if none is usable.
pub fn play_audio(wav: &Path) -> Option<Child> {
    for (cmd, args) in [("aplay", &["-q"][..]), ("paplay", &[][..]), ("afplay", &[][..])] {
        match Command::new(cmd).args(args).arg(wav).stdin(Stdio::null()).stdout(Stdio::null()).spawn() {
            Ok(child) => return Some(child),
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => {
                warn!("could not start {cmd}: {e}");
                return None;
            }
        }
    }
    warn!("no audio player found; continuing without playback");
    None
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunStats {
    pub frames_processed: u64,
    pub frames_gated: u64,
    pub overruns: u64,
    pub cache_entries: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub mean_step_secs: f64,
    pub max_step_secs: f64,
    /// Steps that took longer than one hop period.
    pub latency_violations: u64,
    pub datagrams_sent: u64,
    pub datagram_errors: u64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: AlignmentTrace,
    pub stats: RunStats,
    pub num_states: usize,
}

/// Where frames come from.
pub enum FrameSource {
    /// Whole recording in memory; sliced up front, released on the hop clock when paced.
    Pcm(Vec<f64>),
    /// Live device; runs until end of stream or the stop flag.
    Device(Box<dyn CaptureDevice>),
}

struct BoxedDevice(Box<dyn CaptureDevice>);

impl CaptureDevice for BoxedDevice {
    fn sample_rate(&self) -> f64 {
        self.0.sample_rate()
    }

    fn read(&mut self, buf: &mut [f64]) -> io::Result<usize> {
        self.0.read(buf)
    }
}

fn tag(stage: &str, err: Error) -> Error {
    match err {
        Error::Contract(m) => Error::Contract(format!("{stage}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{stage}: {m}")),
        Error::Config(m) => Error::Config(format!("{stage}: {m}")),
        Error::Environment(m) => Error::Environment(format!("{stage}: {m}")),
        Error::Io(e) => Error::Io(io::Error::new(e.kind(), format!("{stage}: {e}"))),
        other => other,
    }
}

fn join<T>(handle: thread::JoinHandle<Result<T>>, stage: &str) -> Result<T> {
    handle.join().map_err(|_| Error::Environment(format!("{stage} thread panicked")))?
}

struct BackendReport {
    trace: AlignmentTrace,
    sent: u64,
    errors: u64,
}

fn backend(
    estimates: Arc<BoundedQueue<TraceEntry>>,
    num_states: usize,
    udp: Option<SocketAddr>,
    trace_path: Option<PathBuf>,
) -> Result<BackendReport> {
    let socket = match udp {
        Some(_) => Some(UdpSocket::bind("0.0.0.0:0").map_err(|e| tag("backend", e.into()))?),
        None => None,
    };
    let mut sink = match &trace_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| tag("backend", e.into()))?)),
        None => None,
    };
    let mut report = BackendReport { trace: Vec::new(), sent: 0, errors: 0 };
    while let Some(entry) = estimates.pop() {
        if let (Some(sock), Some(target)) = (&socket, udp) {
            match emit_position(sock, target, entry.frame_index, entry.state, num_states) {
                Ok(()) => report.sent += 1,
                Err(e) => {
                    if report.errors == 0 {
                        warn!("datagram to {target} failed: {e}");
                    }
                    report.errors += 1;
                }
            }
        }
        if let Some(w) = sink.as_mut() {
            write_trace(std::slice::from_ref(&entry), &mut *w).map_err(|e| tag("backend", e))?;
        }
        report.trace.push(entry);
    }
    if let Some(mut w) = sink {
        w.flush().map_err(|e| tag("backend", e.into()))?;
    }
    Ok(report)
}

/// Runs the four stages over `source` until it is exhausted or `stop` is set.
pub fn run_session(
    score: Score,
    source: FrameSource,
    config: &RunConfig,
    stop: Option<Arc<AtomicBool>>,
) -> Result<RunOutput> {
    config.validate()?;
    let score = apply_sustain(&score, config.sustain);
    let num_states = score.num_states();
    let udp = config.udp.as_deref().map(resolve).transpose()?;
    let mut follower = Follower::new(score, &config.frames, &config.kernel, config.decoder_config(), config.exec)
        .map_err(|e| tag("score", e))?;
    let stop = stop.unwrap_or_default();

    let frames: Arc<BoundedQueue<(Audioframe, Instant)>> = BoundedQueue::new(config.frame_queue_capacity);
    let estimates: Arc<BoundedQueue<TraceEntry>> = BoundedQueue::new(config.estimate_queue_capacity);

    let backend_handle = {
        let estimates = Arc::clone(&estimates);
        let trace = config.trace.clone();
        thread::Builder::new().name("backend".into()).spawn(move || backend(estimates, num_states, udp, trace))?
    };

    let started = Instant::now();
    let player = match (&source, config.play, &config.audio_path) {
        (FrameSource::Pcm(_), true, Some(path)) => play_audio(path),
        _ => None,
    };

    let cfg = config.frames;
    let paced = config.paced;
    let source_handle = match source {
        FrameSource::Pcm(pcm) => {
            let frames = Arc::clone(&frames);
            let stop = Arc::clone(&stop);
            thread::Builder::new().name("source".into()).spawn(move || -> Result<(u64, u64)> {
                let mut slicer = FrameSlicer::new(cfg);
                let sliced = slicer.push(&pcm);
                for frame in sliced {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let release = started
                        + Duration::from_secs_f64((frame.start_sample + cfg.frame_length) as f64 / cfg.sample_rate);
                    if paced {
                        let now = Instant::now();
                        if release > now {
                            thread::sleep(release - now);
                        }
                    }
                    if frames.push((frame, Instant::now())).is_err() {
                        break;
                    }
                }
                frames.close();
                Ok((slicer.gated() as u64, 0))
            })?
        }
        FrameSource::Device(device) => {
            let capture =
                live_capture(cfg, BoxedDevice(device), config.frame_queue_capacity).map_err(|e| tag("capture", e))?;
            let frames = Arc::clone(&frames);
            let stop = Arc::clone(&stop);
            thread::Builder::new().name("source".into()).spawn(move || -> Result<(u64, u64)> {
                let live = capture.frames();
                // forward with a short poll so an interrupt is noticed promptly
                loop {
                    if stop.load(Ordering::SeqCst) {
                        capture.request_stop();
                        live.close();
                        break;
                    }
                    match live.pop_timeout(Duration::from_millis(50)) {
                        Some(Some(frame)) => {
                            if frames.push((frame, Instant::now())).is_err() {
                                break;
                            }
                        }
                        Some(None) => break,
                        None => {}
                    }
                }
                frames.close();
                let overruns = live.dropped();
                if stop.load(Ordering::SeqCst) {
                    // the device may be blocked in a read that never returns
                    capture.detach();
                    return Ok((0, overruns));
                }
                let stats = capture.wait()?;
                Ok((stats.frames_gated, overruns))
            })?
        }
    };

    let hop_period = cfg.hop_seconds();
    let mut stats = RunStats::default();
    let mut total_step = 0.0;
    let mut decode_error = None;
    while let Some((frame, _released)) = frames.pop() {
        let t0 = Instant::now();
        match follower.process(&frame) {
            Ok(entry) => {
                let step = t0.elapsed().as_secs_f64();
                total_step += step;
                stats.max_step_secs = stats.max_step_secs.max(step);
                if step > hop_period {
                    stats.latency_violations += 1;
                }
                stats.frames_processed += 1;
                if estimates.push(entry).is_err() {
                    break;
                }
            }
            Err(e) => {
                decode_error = Some(tag("decoder", e));
                stop.store(true, Ordering::SeqCst);
                frames.close();
                break;
            }
        }
    }
    estimates.close();

    let source_result = join(source_handle, "source");
    let backend_result = join(backend_handle, "backend");
    if let Some(mut child) = player {
        if paced {
            match child.wait() {
                Ok(status) if !status.success() => warn!("audio player exited with {status}"),
                Err(e) => warn!("audio player: {e}"),
                Ok(_) => {}
            }
        } else {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
    if let Some(e) = decode_error {
        return Err(e);
    }
    let (gated, overruns) = source_result.map_err(|e| tag("source", e))?;
    let report = backend_result?;

    stats.frames_gated = gated;
    stats.overruns = overruns;
    stats.cache_entries = follower.cache().len();
    stats.cache_hits = follower.cache().hits();
    stats.cache_misses = follower.cache().misses();
    stats.mean_step_secs = if stats.frames_processed > 0 { total_step / stats.frames_processed as f64 } else { 0.0 };
    stats.datagrams_sent = report.sent;
    stats.datagram_errors = report.errors;
    stats.wall_secs = started.elapsed().as_secs_f64();
    info!(
        "processed {} frames ({} gated), mean step {:.2} ms, {} latency violations",
        stats.frames_processed,
        stats.frames_gated,
        stats.mean_step_secs * 1e3,
        stats.latency_violations
    );
    Ok(RunOutput { trace: report.trace, stats, num_states })
}

/// Loads the score (and recording in prerecorded mode) and runs the follower.
///
/// Live mode needs a device; use [`run_session`] with [`FrameSource::Device`].
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    if config.mode == Mode::Live {
        return Err(Error::Config("live mode needs a capture device; use run_session".into()));
    }
    let score = load_midi(&config.score_path)?;
    let audio = config.audio_path.as_ref().expect("validated");
    let pcm = read_wav(audio, config.frames.sample_rate)?;
    run_session(score, FrameSource::Pcm(pcm), config, None)
}
