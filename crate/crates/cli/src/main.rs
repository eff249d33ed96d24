use std::io::{self, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use smfollow::audio::{hann_power_spectrum, read_wav, FrameConfig};
use smfollow::calibration::{estimate_weights, fit_envelope, fit_inharmonicity, lml_sweep, NoteSpectrum};
use smfollow::capture::{RawFormat, RawPcmDevice};
use smfollow::kernel::{CovarianceSpec, KernelSettings};
use smfollow::pipeline::{run_session, FrameSource, Mode, RunConfig, RunOutput};
use smfollow::score::{load_midi, midi_to_freq};
use smfollow::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "smfollow", version, about = "Real-time score follower")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Follow a performance against a MIDI score.
    Follow(FollowArgs),
    /// LML of one audio frame against a grid of single-note fundamentals.
    Sweep(SweepArgs),
    /// Fit the harmonic envelope (T, v) to single-note recordings.
    FitEnvelope(FitEnvelopeArgs),
    /// Fit per-note inharmonicity; prints config-file lines.
    FitInharmonicity(FitInharmonicityArgs),
    /// Least-squares mixture weights of a chord recording.
    EstimateWeights(EstimateWeightsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Prerecorded,
    Live,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RawFormatArg {
    F32le,
    S16le,
}

#[derive(Args)]
struct FollowArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    score: PathBuf,
    /// WAV recording (prerecorded mode).
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long, default_value_t = smfollow::audio::DEFAULT_FRAME_LENGTH)]
    frame_length: usize,
    #[arg(long, default_value_t = smfollow::audio::DEFAULT_HOP_LENGTH)]
    hop_length: usize,
    #[arg(long, default_value_t = smfollow::audio::DEFAULT_ENERGY_THRESHOLD)]
    energy_threshold: f64,
    #[arg(long, default_value_t = smfollow::audio::DEFAULT_SAMPLE_RATE)]
    sample_rate: f64,
    /// Observation noise; overrides the params file.
    #[arg(long)]
    sigma_n: Option<f64>,
    /// Merge each state with this many preceding states' notes.
    #[arg(long, default_value_t = 0)]
    sustain: usize,
    /// Use a constant self-transition probability instead of the duration model.
    #[arg(long)]
    no_state_duration: bool,
    #[arg(long, default_value_t = smfollow::duration::DEFAULT_FALLBACK_P_SELF)]
    fallback_p_self: f64,
    #[arg(long, default_value_t = smfollow::viterbi::DEFAULT_WINDOW_LENGTH)]
    window_length: usize,
    #[arg(long, default_value_t = smfollow::viterbi::DEFAULT_WINDOW_THRESHOLD)]
    window_threshold: usize,
    /// Notes in the tempo moving average; 0 keeps the notated tempo.
    #[arg(long, default_value_t = smfollow::duration::DEFAULT_TEMPO_SPAN)]
    h: usize,
    /// Send each estimate as a datagram to host:port.
    #[arg(long)]
    udp: Option<String>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Release frames at recording speed.
    #[arg(long)]
    paced: bool,
    /// Play the recording while following.
    #[arg(long)]
    play: bool,
    /// Hyperparameter config file.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Sample format of raw PCM on stdin in live mode.
    #[arg(long, value_enum, default_value_t = RawFormatArg::F32le)]
    raw_format: RawFormatArg,
    /// Run without the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SpectrumSource {
    #[arg(long)]
    params: Option<PathBuf>,
    /// Peak width of the model spectrum in Hz; overrides the params file.
    /// Spectra of short recordings need roughly the FFT bin spacing.
    #[arg(long)]
    sigma_f: Option<f64>,
    #[arg(long, default_value_t = smfollow::audio::DEFAULT_SAMPLE_RATE)]
    sample_rate: f64,
    /// First sample of the analysed segment.
    #[arg(long, default_value_t = 0)]
    offset: usize,
    /// Segment length in samples; defaults to the rest of the file.
    #[arg(long)]
    length: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    audio: PathBuf,
    /// Comma-separated candidate fundamentals in Hz.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long, default_value_t = smfollow::audio::DEFAULT_FRAME_LENGTH)]
    frame_length: usize,
    #[command(flatten)]
    source: SpectrumSource,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct FitEnvelopeArgs {
    /// Single-note recordings; pair each with a --note.
    #[arg(long, required = true)]
    audio: Vec<PathBuf>,
    /// MIDI note of each recording, in the same order.
    #[arg(long, required = true)]
    note: Vec<u8>,
    #[arg(long, default_value_t = smfollow::kernel::DEFAULT_NUM_HARMONICS)]
    harmonics: usize,
    #[arg(long, default_value_t = smfollow::kernel::DEFAULT_ENVELOPE_T)]
    t0: f64,
    #[arg(long, default_value_t = smfollow::kernel::DEFAULT_ENVELOPE_V)]
    v0: f64,
    #[command(flatten)]
    source: SpectrumSource,
}

#[derive(Args)]
struct FitInharmonicityArgs {
    #[arg(long, required = true)]
    audio: Vec<PathBuf>,
    #[arg(long, required = true)]
    note: Vec<u8>,
    #[arg(long, default_value_t = smfollow::kernel::DEFAULT_NUM_HARMONICS)]
    harmonics: usize,
    #[arg(long, default_value_t = 0.0)]
    initial_b: f64,
    #[command(flatten)]
    source: SpectrumSource,
}

#[derive(Args)]
struct EstimateWeightsArgs {
    #[arg(long)]
    audio: PathBuf,
    /// MIDI notes sounding in the recording.
    #[arg(long, value_delimiter = ',', required = true)]
    notes: Vec<u8>,
    #[command(flatten)]
    source: SpectrumSource,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn load_settings(path: Option<&Path>) -> Result<KernelSettings> {
    match path {
        Some(p) => KernelSettings::load(p),
        None => Ok(KernelSettings::default()),
    }
}

fn calibration_settings(src: &SpectrumSource) -> Result<KernelSettings> {
    let mut settings = load_settings(src.params.as_deref())?;
    if let Some(s) = src.sigma_f {
        settings.sigma_f = s;
    }
    settings.validate().map_err(|e| match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    })?;
    Ok(settings)
}

fn segment(path: &Path, src: &SpectrumSource) -> Result<Vec<f64>> {
    let pcm = read_wav(path, src.sample_rate)?;
    let end = match src.length {
        Some(n) => src.offset.checked_add(n).filter(|e| *e <= pcm.len()),
        None => Some(pcm.len()),
    };
    match end {
        Some(end) if end > src.offset => Ok(pcm[src.offset..end].to_vec()),
        _ => Err(Error::Config(format!("{}: segment lies outside the {} samples of audio", path.display(), pcm.len()))),
    }
}

fn paired<'a>(audio: &'a [PathBuf], notes: &'a [u8]) -> Result<impl Iterator<Item = (&'a PathBuf, u8)>> {
    if audio.len() != notes.len() {
        return Err(Error::Config(format!("{} recordings but {} notes", audio.len(), notes.len())));
    }
    Ok(audio.iter().zip(notes.iter().copied()))
}

fn follow(args: FollowArgs) -> Result<()> {
    let mut kernel = load_settings(args.params.as_deref())?;
    if let Some(s) = args.sigma_n {
        kernel.noise_sigma = s;
    }
    if kernel.clamp_noise_sigma() {
        warn!("sigma_n clamped to {}", kernel.noise_sigma);
    }
    let config = RunConfig {
        mode: match args.mode {
            ModeArg::Prerecorded => Mode::Prerecorded,
            ModeArg::Live => Mode::Live,
        },
        score_path: args.score,
        audio_path: args.audio,
        frames: FrameConfig {
            frame_length: args.frame_length,
            hop_length: args.hop_length,
            energy_threshold: args.energy_threshold,
            sample_rate: args.sample_rate,
        },
        kernel,
        sustain: args.sustain,
        state_duration: !args.no_state_duration,
        fallback_p_self: args.fallback_p_self,
        tempo_span: args.h,
        window_length: args.window_length,
        window_threshold: args.window_threshold,
        udp: args.udp,
        trace: args.trace,
        paced: args.paced,
        play: args.play,
        exec: exec(args.sequential),
        ..RunConfig::default()
    };
    config.validate()?;
    let score = load_midi(&config.score_path)?;
    let output = match config.mode {
        Mode::Prerecorded => {
            let pcm = read_wav(config.audio_path.as_ref().expect("validated"), config.frames.sample_rate)?;
            run_session(score, FrameSource::Pcm(pcm), &config, None)?
        }
        Mode::Live => {
            let stdin = io::stdin();
            if stdin.is_terminal() {
                return Err(Error::Environment(
                    "live mode reads raw PCM from stdin; pipe a recorder into it (e.g. arecord -t raw -f FLOAT_LE -c 1 -r 44100)".into(),
                ));
            }
            let format = match args.raw_format {
                RawFormatArg::F32le => RawFormat::F32Le,
                RawFormatArg::S16le => RawFormat::S16Le,
            };
            let stop = Arc::new(AtomicBool::new(false));
            {
                let stop = Arc::clone(&stop);
                ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))
                    .map_err(|e| Error::Environment(format!("cannot install interrupt handler: {e}")))?;
            }
            let device = RawPcmDevice::new(stdin, config.frames.sample_rate, format);
            run_session(score, FrameSource::Device(Box::new(device)), &config, Some(stop))?
        }
    };
    report(&output);
    Ok(())
}

fn report(out: &RunOutput) {
    let s = &out.stats;
    let last = out.trace.last().map_or(0, |e| e.state);
    eprintln!(
        "frames {} (gated {}, overruns {}), final state {last}/{}, cache {} entries ({} hits), mean step {:.2} ms, max {:.2} ms, latency violations {}, datagrams {} sent / {} failed",
        s.frames_processed,
        s.frames_gated,
        s.overruns,
        out.num_states,
        s.cache_entries,
        s.cache_hits,
        s.mean_step_secs * 1e3,
        s.max_step_secs * 1e3,
        s.latency_violations,
        s.datagrams_sent,
        s.datagram_errors,
    );
}

fn sweep(args: SweepArgs) -> Result<()> {
    let settings = calibration_settings(&args.source)?;
    let source = SpectrumSource { length: Some(args.frame_length), ..args.source };
    let frame = segment(&args.audio, &source)?;
    let spec = CovarianceSpec::new(args.frame_length, source.sample_rate)?;
    let result = lml_sweep(&frame, &args.grid, &settings, &spec, exec(args.sequential))?;
    print!("{}", result.to_csv());
    eprintln!("argmax {} Hz", result.argmax_freq);
    Ok(())
}

fn spectrum(path: &Path, src: &SpectrumSource) -> Result<Vec<(f64, f64)>> {
    hann_power_spectrum(&segment(path, src)?, src.sample_rate)
}

fn fit_envelope_cmd(args: FitEnvelopeArgs) -> Result<()> {
    let spectra = paired(&args.audio, &args.note)?
        .map(|(path, note)| Ok(NoteSpectrum { fundamental: midi_to_freq(note)?, bins: spectrum(path, &args.source)? }))
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_envelope(&spectra, args.harmonics, (args.t0, args.v0))?;
    println!("parameter,value");
    println!("T,{}", fit.t);
    println!("v,{}", fit.v);
    println!("objective,{}", fit.objective);
    Ok(())
}

fn fit_inharmonicity_cmd(args: FitInharmonicityArgs) -> Result<()> {
    let mut out = io::stdout().lock();
    for (path, note) in paired(&args.audio, &args.note)? {
        let fit =
            fit_inharmonicity(&spectrum(path, &args.source)?, midi_to_freq(note)?, args.harmonics, args.initial_b)?;
        writeln!(out, "{note}={}", fit.b)?;
    }
    Ok(())
}

fn estimate_weights_cmd(args: EstimateWeightsArgs) -> Result<()> {
    let settings = calibration_settings(&args.source)?;
    let fundamentals = args.notes.iter().map(|&n| midi_to_freq(n)).collect::<Result<Vec<_>>>()?;
    let w = estimate_weights(&spectrum(&args.audio, &args.source)?, &fundamentals, &settings)?;
    println!("fundamental,weight");
    for (f, w) in fundamentals.iter().zip(&w) {
        println!("{f},{w}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Follow(a) => follow(a),
        Command::Sweep(a) => sweep(a),
        Command::FitEnvelope(a) => fit_envelope_cmd(a),
        Command::FitInharmonicity(a) => fit_inharmonicity_cmd(a),
        Command::EstimateWeights(a) => estimate_weights_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
