//! Score model: MIDI parsing into note-onset states.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use midly::{MetaMessage, MidiMessage, Timing, TrackEventKind};

use crate::error::{contract, Error, Result};

/// Onsets closer than this (seconds) are merged into one state.
pub const SIMULTANEITY_TOLERANCE: f64 = 0.010;

/// Microseconds per quarter note at the MIDI default of 120 BPM.
const DEFAULT_TEMPO_US: u32 = 500_000;

/// Equal-tempered frequency of a MIDI note, A4 = 440 Hz.
pub fn midi_to_freq(note: u8) -> Result<f64> {
    if note > 127 {
        return Err(contract(format!("MIDI note {note} out of range 0..=127")));
    }
    Ok(440.0 * 2f64.powf((note as f64 - 69.0) / 12.0))
}

/// One latent state: the notes sounding from an onset until the next onset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreState {
    /// 1-based position in the score.
    pub index: usize,
    /// Sorted, deduplicated MIDI notes.
    pub midi_notes: Vec<u8>,
    pub fundamentals: Vec<f64>,
    /// Seconds of score time until the next state's onset.
    pub time_to_next: f64,
}

impl ScoreState {
    pub fn new(index: usize, notes: &[u8], time_to_next: f64) -> Result<Self> {
        let set: BTreeSet<u8> = notes.iter().copied().collect();
        if set.is_empty() {
            return Err(contract(format!("state {index} has no notes")));
        }
        if !(time_to_next > 0.0) || !time_to_next.is_finite() {
            return Err(contract(format!("state {index} has non-positive time_to_next {time_to_next}")));
        }
        let midi_notes: Vec<u8> = set.into_iter().collect();
        let fundamentals = midi_notes.iter().map(|&n| midi_to_freq(n)).collect::<Result<_>>()?;
        Ok(Self { index, midi_notes, fundamentals, time_to_next })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    states: Vec<ScoreState>,
}

impl Score {
    pub fn new(states: Vec<ScoreState>) -> Result<Self> {
        if states.is_empty() {
            return Err(contract("score must contain at least one state"));
        }
        if let Some((pos, s)) = states.iter().enumerate().find(|(i, s)| s.index != i + 1) {
            return Err(contract(format!("state at position {pos} has index {}", s.index)));
        }
        Ok(Self { states })
    }

    /// Builds a score from `(notes, time_to_next)` pairs.
    pub fn from_notes<N: AsRef<[u8]>>(states: &[(N, f64)]) -> Result<Self> {
        let states = states
            .iter()
            .enumerate()
            .map(|(i, (n, t))| ScoreState::new(i + 1, n.as_ref(), *t))
            .collect::<Result<_>>()?;
        Self::new(states)
    }

    pub fn states(&self) -> &[ScoreState] {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// State by 1-based index.
    pub fn state(&self, k: usize) -> &ScoreState {
        &self.states[k - 1]
    }

    /// Total notated length in seconds.
    pub fn duration(&self) -> f64 {
        self.states.iter().map(|s| s.time_to_next).sum()
    }

    /// Plain-text dump: `k<TAB>notes<TAB>time_to_next` per line.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for s in &self.states {
            let notes: Vec<String> = s.midi_notes.iter().map(|n| n.to_string()).collect();
            let _ = writeln!(out, "{}\t{}\t{}", s.index, notes.join(","), s.time_to_next);
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut states = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Config(format!("score dump line {}: {line:?}", lineno + 1));
            let mut cols = line.split('\t');
            let (k, notes, t) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
                (Some(k), Some(n), Some(t), None) => (k, n, t),
                _ => return Err(bad()),
            };
            let k: usize = k.parse().map_err(|_| bad())?;
            let notes: Vec<u8> =
                notes.split(',').map(|n| n.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            let t: f64 = t.parse().map_err(|_| bad())?;
            states.push(ScoreState::new(k, &notes, t)?);
        }
        Self::new(states)
    }
}

/// Adds the notes of up to `depth` preceding states to every state.
pub fn apply_sustain(score: &Score, depth: usize) -> Score {
    if depth == 0 {
        return score.clone();
    }
    let states = score.states();
    let sustained = states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let lo = i.saturating_sub(depth);
            let notes: BTreeSet<u8> = states[lo..=i].iter().flat_map(|p| p.midi_notes.iter().copied()).collect();
            let notes: Vec<u8> = notes.into_iter().collect();
            ScoreState::new(s.index, &notes, s.time_to_next).expect("union of valid states is valid")
        })
        .collect();
    Score::new(sustained).expect("same shape as input")
}

/// Byte offsets of the `MTrk` chunks, used to locate parse failures.
fn track_chunk_offsets(bytes: &[u8]) -> Result<Vec<usize>> {
    let chunk_header = |at: usize| -> Result<(&[u8], usize)> {
        let head = bytes
            .get(at..at + 8)
            .ok_or_else(|| Error::Parse { offset: at, message: "truncated chunk header".into() })?;
        let len = u32::from_be_bytes([head[4], head[5], head[6], head[7]]) as usize;
        Ok((&head[..4], len))
    };
    let (id, len) = chunk_header(0)?;
    if id != b"MThd" {
        return Err(Error::Parse { offset: 0, message: "missing MThd header".into() });
    }
    if len < 6 {
        return Err(Error::Parse { offset: 4, message: format!("header length {len} < 6") });
    }
    let mut offsets = Vec::new();
    let mut at = 8 + len;
    while at < bytes.len() {
        let (id, len) = chunk_header(at)?;
        if id == b"MTrk" {
            offsets.push(at);
        }
        at = at
            .checked_add(8 + len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| Error::Parse { offset: at, message: format!("chunk length {len} runs past end of file") })?;
    }
    Ok(offsets)
}

/// Converts absolute ticks to seconds through a tempo map.
struct TempoMap {
    /// (tick, seconds at tick, microseconds per quarter from here on)
    segments: Vec<(u64, f64, u32)>,
    ticks_per_quarter: Option<f64>,
    seconds_per_tick_timecode: f64,
}

impl TempoMap {
    fn new(timing: Timing, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|c| c.0);
        let (ticks_per_quarter, spt) = match timing {
            Timing::Metrical(t) => (Some(t.as_int().max(1) as f64), 0.0),
            Timing::Timecode(fps, sub) => (None, 1.0 / (fps.as_f32() as f64 * sub.max(1) as f64)),
        };
        let mut segments = vec![(0u64, 0.0, DEFAULT_TEMPO_US)];
        if let Some(tpq) = ticks_per_quarter {
            for (tick, tempo) in changes {
                let &(t0, s0, us) = segments.last().unwrap();
                let secs = s0 + (tick - t0) as f64 * us as f64 * 1e-6 / tpq;
                if tick == t0 {
                    segments.last_mut().unwrap().2 = tempo;
                } else {
                    segments.push((tick, secs, tempo));
                }
            }
        }
        Self { segments, ticks_per_quarter, seconds_per_tick_timecode: spt }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let Some(tpq) = self.ticks_per_quarter else {
            return tick as f64 * self.seconds_per_tick_timecode;
        };
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (t0, s0, us) = self.segments[idx];
        s0 + (tick - t0) as f64 * us as f64 * 1e-6 / tpq
    }
}

#[derive(Debug, Clone, Copy)]
struct NoteSpan {
    onset: f64,
    end: f64,
    key: u8,
}

/// Parses a standard MIDI file (format 0 or 1) into a score.
///
/// Note-ons are grouped into states when their onsets fall within
/// [`SIMULTANEITY_TOLERANCE`] of the first onset of the group. Note-offs
/// only matter for the final state's duration.
pub fn parse_midi(bytes: &[u8]) -> Result<Score> {
    let offsets = track_chunk_offsets(bytes)?;
    let (header, tracks) = midly::parse(bytes).map_err(|e| Error::Parse { offset: 0, message: e.to_string() })?;

    let mut tempo_changes = Vec::new();
    // (abs tick, channel, key, is_on)
    let mut note_events: Vec<(u64, u8, u8, bool)> = Vec::new();
    for (i, track) in tracks.enumerate() {
        let offset = offsets.get(i).copied().unwrap_or(0);
        let err = |e: midly::Error| Error::Parse { offset, message: format!("track {i}: {e}") };
        let mut tick = 0u64;
        for ev in track.map_err(err)? {
            let ev = ev.map_err(err)?;
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => tempo_changes.push((tick, t.as_int())),
                TrackEventKind::Midi { channel, message } => match message {
                    MidiMessage::NoteOn { key, vel } => {
                        note_events.push((tick, channel.as_int(), key.as_int(), vel.as_int() > 0))
                    }
                    MidiMessage::NoteOff { key, .. } => note_events.push((tick, channel.as_int(), key.as_int(), false)),
                    _ => {}
                },
                _ => {}
            }
        }
    }
    let tempo = TempoMap::new(header.timing, tempo_changes);

    // stable sort keeps note-off before note-on at equal ticks only if they came first;
    // order offs first so a retrigger at the same tick closes the old note
    note_events.sort_by_key(|&(tick, _, _, on)| (tick, on));
    let mut open: HashMap<(u8, u8), VecDeque<usize>> = HashMap::new();
    let mut spans: Vec<NoteSpan> = Vec::new();
    let mut last_tick = 0u64;
    for &(tick, ch, key, on) in &note_events {
        last_tick = last_tick.max(tick);
        let t = tempo.seconds(tick);
        if on {
            open.entry((ch, key)).or_default().push_back(spans.len());
            spans.push(NoteSpan { onset: t, end: f64::NAN, key });
        } else if let Some(i) = open.get_mut(&(ch, key)).and_then(|q| q.pop_front()) {
            spans[i].end = t;
        }
    }
    if spans.is_empty() {
        return Err(contract("MIDI file contains no notes"));
    }
    let file_end = tempo.seconds(last_tick);
    for s in &mut spans {
        if s.end.is_nan() {
            s.end = file_end;
        }
    }
    spans.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.key.cmp(&b.key)));

    // group onsets
    let mut groups: Vec<(f64, Vec<NoteSpan>)> = Vec::new();
    for span in spans {
        match groups.last_mut() {
            Some((start, members)) if span.onset - *start <= SIMULTANEITY_TOLERANCE => members.push(span),
            _ => groups.push((span.onset, vec![span])),
        }
    }

    let mut states = Vec::with_capacity(groups.len());
    for (i, (onset, members)) in groups.iter().enumerate() {
        let time_to_next = match groups.get(i + 1) {
            Some((next, _)) => next - onset,
            None => {
                let end = members.iter().map(|m| m.end).fold(f64::NEG_INFINITY, f64::max);
                let d = end - onset;
                if d > 0.0 {
                    d
                } else {
                    // zero-length final chord: fall back to one beat at the default tempo
                    DEFAULT_TEMPO_US as f64 * 1e-6
                }
            }
        };
        let notes: Vec<u8> = members.iter().map(|m| m.key).collect();
        states.push(ScoreState::new(i + 1, &notes, time_to_next)?);
    }
    Score::new(states)
}

pub fn load_midi(path: &std::path::Path) -> Result<Score> {
    parse_midi(&std::fs::read(path)?)
}

/// One note for [`write_midi`]: onset and duration in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidiNote {
    pub onset: f64,
    pub duration: f64,
    pub key: u8,
}

/// Writes a single-track format-0 MIDI file at a fixed tempo.
pub fn write_midi(notes: &[MidiNote], bpm: f64) -> Result<Vec<u8>> {
    use midly::num::{u15, u24, u28, u4, u7};
    use midly::{Format, Header, Smf, TrackEvent};

    const TPQ: u16 = 960;
    let us_per_quarter = (60e6 / bpm).round() as u32;
    let ticks_per_second = TPQ as f64 * 1e6 / us_per_quarter as f64;
    let to_tick = |t: f64| (t * ticks_per_second).round() as u64;

    let mut events: Vec<(u64, bool, u8)> = Vec::new();
    for n in notes {
        if n.key > 127 || !(n.duration > 0.0) || !(n.onset >= 0.0) {
            return Err(contract(format!("invalid note {n:?}")));
        }
        events.push((to_tick(n.onset), true, n.key));
        events.push((to_tick(n.onset + n.duration), false, n.key));
    }
    events.sort_by_key(|&(t, on, k)| (t, on, k));

    let mut track = vec![TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us_per_quarter))),
    }];
    let mut prev = 0u64;
    for (tick, on, key) in events {
        let message = if on {
            MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(80) }
        } else {
            MidiMessage::NoteOff { key: u7::new(key), vel: u7::new(0) }
        };
        track.push(TrackEvent {
            delta: u28::new((tick - prev) as u32),
            kind: TrackEventKind::Midi { channel: u4::new(0), message },
        });
        prev = tick;
    }
    track.push(TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });

    let mut smf = Smf::new(Header::new(Format::SingleTrack, Timing::Metrical(u15::new(TPQ))));
    smf.tracks.push(track);
    let mut out = Vec::new();
    smf.write_std(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn note(onset: f64, duration: f64, key: u8) -> MidiNote {
        MidiNote { onset, duration, key }
    }

    #[test]
    fn midi_to_freq_examples() {
        assert_eq!(midi_to_freq(69).unwrap(), 440.0);
        assert_eq!(midi_to_freq(81).unwrap(), 880.0);
        assert!((midi_to_freq(60).unwrap() - 261.625_565_300_598_6).abs() < 1e-9);
        assert!(matches!(midi_to_freq(128), Err(Error::Contract(_))));
    }

    #[test]
    fn single_note_file() {
        let bytes = write_midi(&[note(0.0, 1.0, 60)], 120.0).unwrap();
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.num_states(), 1);
        let s = score.state(1);
        assert_eq!(s.midi_notes, vec![60]);
        assert!((s.fundamentals[0] - 261.6256).abs() < 1e-4);
        assert!((s.time_to_next - 1.0).abs() < 1e-9);
    }

    #[test]
    fn simultaneous_notes_form_one_state() {
        let bytes = write_midi(&[note(0.0, 0.5, 64), note(0.0, 0.5, 60), note(0.5, 0.5, 69)], 100.0).unwrap();
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.num_states(), 2);
        assert_eq!(score.state(1).midi_notes, vec![60, 64]);
        assert_eq!(score.state(2).fundamentals, vec![440.0]);
        assert!((score.state(1).time_to_next - 0.5).abs() < 1e-6);
    }

    #[test]
    fn near_simultaneous_onsets_merge() {
        let bytes = write_midi(&[note(0.0, 0.5, 60), note(0.008, 0.5, 64), note(0.03, 0.5, 67)], 120.0).unwrap();
        let score = parse_midi(&bytes).unwrap();
        assert_eq!(score.num_states(), 2);
        assert_eq!(score.state(1).midi_notes, vec![60, 64]);
    }

    #[test]
    fn rests_extend_previous_state() {
        let bytes = write_midi(&[note(0.0, 0.25, 60), note(1.0, 0.5, 62)], 120.0).unwrap();
        let score = parse_midi(&bytes).unwrap();
        assert!((score.state(1).time_to_next - 1.0).abs() < 1e-6);
        assert!((score.state(2).time_to_next - 0.5).abs() < 1e-6);
    }

    #[test]
    fn tempo_changes_are_honoured() {
        use midly::num::{u15, u24, u28, u4, u7};
        use midly::{Format, Header, Smf, TrackEvent};
        // format 1: conductor track with 120 -> 60 BPM at beat 1, notes on track 2
        let tempo_track = vec![
            TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(500_000))) },
            TrackEvent { delta: u28::new(480), kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(1_000_000))) },
            TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) },
        ];
        let on = |d: u32, k: u8| TrackEvent {
            delta: u28::new(d),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message: MidiMessage::NoteOn { key: u7::new(k), vel: u7::new(64) },
            },
        };
        let off = |d: u32, k: u8| TrackEvent {
            delta: u28::new(d),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message: MidiMessage::NoteOn { key: u7::new(k), vel: u7::new(0) },
            },
        };
        let notes = vec![
            on(0, 60),
            off(480, 60),
            on(0, 62),
            off(480, 62),
            on(0, 64),
            off(240, 64),
            TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) },
        ];
        let mut smf = Smf::new(Header::new(Format::Parallel, Timing::Metrical(u15::new(480))));
        smf.tracks.push(tempo_track);
        smf.tracks.push(notes);
        let mut bytes = Vec::new();
        smf.write_std(&mut bytes).unwrap();
        let score = parse_midi(&bytes).unwrap();
        let t: Vec<f64> = score.states().iter().map(|s| s.time_to_next).collect();
        assert_eq!(t.len(), 3);
        assert!((t[0] - 0.5).abs() < 1e-12);
        assert!((t[1] - 1.0).abs() < 1e-12);
        assert!((t[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn malformed_input_reports_offset() {
        assert!(matches!(parse_midi(b"RIFF1234"), Err(Error::Parse { offset: 0, .. })));
        let mut bytes = write_midi(&[note(0.0, 1.0, 60)], 120.0).unwrap();
        bytes.truncate(bytes.len() - 3);
        match parse_midi(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_contract_error() {
        let bytes = write_midi(&[], 120.0).unwrap();
        assert!(matches!(parse_midi(&bytes), Err(Error::Contract(_))));
    }

    #[test]
    fn sustain_examples() {
        let s = Score::from_notes(&[(vec![60u8], 0.5), (vec![64], 0.5)]).unwrap();
        assert_eq!(apply_sustain(&s, 0), s);
        let d1 = apply_sustain(&s, 1);
        assert_eq!(d1.state(2).midi_notes, vec![60, 64]);
        assert_eq!(d1.state(1).midi_notes, vec![60]);
        let s3 = Score::from_notes(&[(vec![60u8], 0.5), (vec![62], 0.25), (vec![64], 1.0)]).unwrap();
        let d2 = apply_sustain(&s3, 2);
        let notes: Vec<Vec<u8>> = d2.states().iter().map(|s| s.midi_notes.clone()).collect();
        assert_eq!(notes, vec![vec![60], vec![60, 62], vec![60, 62, 64]]);
        assert_eq!(d2.state(2).time_to_next, 0.25);
    }

    #[test]
    fn dump_round_trip_exact() {
        let s = Score::from_notes(&[(vec![60u8, 67], 0.123456789), (vec![62], 1.0 / 3.0)]).unwrap();
        let text = s.to_dump();
        assert_eq!(text.lines().next().unwrap(), "1\t60,67\t0.123456789");
        assert_eq!(Score::from_dump(&text).unwrap(), s);
        assert!(Score::from_dump("1\t60").is_err());
    }

    proptest! {
        #[test]
        fn parsed_durations_cover_the_piece(
            gaps in proptest::collection::vec((1u32..40, 0u8..3), 1..12),
            tail in 1u32..20,
            bpm in 40.0f64..200.0,
        ) {
            let mut notes = Vec::new();
            let mut t = 0.0;
            for (i, (gap, chord)) in gaps.iter().enumerate() {
                for c in 0..=*chord {
                    notes.push(note(t, 0.05, 50 + (i as u8 % 20) + 4 * c));
                }
                t += *gap as f64 * 0.05;
            }
            let last_dur = tail as f64 * 0.05;
            notes.push(note(t, last_dur, 90));
            let bytes = write_midi(&notes, bpm).unwrap();
            let score = parse_midi(&bytes).unwrap();
            prop_assert_eq!(score.num_states(), gaps.len() + 1);
            let tick = 60.0 / bpm / 960.0;
            prop_assert!((score.duration() - (t + last_dur)).abs() < 4.0 * tick);
            prop_assert_eq!(Score::from_dump(&score.to_dump()).unwrap(), score.clone());
            for depth in 0..3 {
                let sus = apply_sustain(&score, depth);
                for (a, b) in score.states().iter().zip(sus.states()) {
                    prop_assert!(a.midi_notes.iter().all(|n| b.midi_notes.contains(n)));
                }
            }
        }
    }
}
