use std::path::Path;
use std::process::Command;

use smfollow::audio::write_wav;
use smfollow::kernel::KernelSettings;
use smfollow::score::{write_midi, MidiNote, Score};
use smfollow::synth::{render, SynthOptions};

fn smfollow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smfollow"))
}

const NOTES: [u8; 4] = [60, 64, 67, 72];

fn fixtures(dir: &Path) -> (String, String) {
    let midi: Vec<MidiNote> =
        NOTES.iter().enumerate().map(|(i, &key)| MidiNote { onset: i as f64 * 0.5, duration: 0.5, key }).collect();
    let midi_path = dir.join("s.mid");
    std::fs::write(&midi_path, write_midi(&midi, 120.0).unwrap()).unwrap();
    let states: Vec<(Vec<u8>, f64)> = NOTES.iter().map(|&n| (vec![n], 0.5)).collect();
    let r = render(&Score::from_notes(&states).unwrap(), &KernelSettings::default(), &SynthOptions::default()).unwrap();
    let wav_path = dir.join("s.wav");
    write_wav(&wav_path, &r.pcm, 44100).unwrap();
    (midi_path.display().to_string(), wav_path.display().to_string())
}

#[test]
fn follow_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (midi, wav) = fixtures(dir.path());
    let trace = dir.path().join("t.tsv");
    let out = smfollow()
        .args(["follow", "--mode", "prerecorded", "--score", &midi, "--audio", &wav, "--trace"])
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&trace).unwrap();
    let last = text.lines().last().unwrap();
    assert_eq!(last.split('\t').nth(1), Some("4"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (midi, wav) = fixtures(dir.path());
    let code = |args: &[&str]| smfollow().args(args).output().unwrap().status.code();
    assert_eq!(code(&["follow", "--mode", "prerecorded", "--score", &midi]), Some(1));
    assert_eq!(code(&["follow", "--mode", "prerecorded", "--score", "/nonexistent.mid", "--audio", &wav]), Some(2));
    assert_eq!(code(&["follow", "--mode", "bogus", "--score", &midi]), Some(1));
    assert_eq!(
        code(&[
            "follow",
            "--mode",
            "prerecorded",
            "--score",
            &midi,
            "--audio",
            &wav,
            "--window-length",
            "3",
            "--window-threshold",
            "3"
        ]),
        Some(1)
    );
    assert_eq!(code(&["--help"]), Some(0));
}

#[test]
fn sweep_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (_, wav) = fixtures(dir.path());
    let out = smfollow().args(["sweep", "--audio", &wav, "--grid", "130.81,261.63,523.25"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("frequency,lml"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn inharmonicity_output_is_config_format() {
    let dir = tempfile::tempdir().unwrap();
    let (_, wav) = fixtures(dir.path());
    // first note only: middle C for half a second
    let out =
        smfollow().args(["fit-inharmonicity", "--audio", &wav, "--note", "60", "--length", "22050"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = KernelSettings::parse_config(&text).unwrap();
    assert!(parsed.inharmonicity[&60] < 1e-4, "{text}");
}

#[test]
fn estimate_weights_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, wav) = fixtures(dir.path());
    let out = smfollow()
        .args(["estimate-weights", "--audio", &wav, "--notes", "60,64", "--length", "22050", "--sigma-f", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let w: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    // only middle C sounds in the analysed segment
    assert!(w[0] > 0.9, "{w:?}");
}

#[test]
fn live_mode_reads_stdin() {
    use std::io::Write;
    use std::process::Stdio;
    let dir = tempfile::tempdir().unwrap();
    let (midi, _) = fixtures(dir.path());
    let states: Vec<(Vec<u8>, f64)> = NOTES.iter().map(|&n| (vec![n], 0.5)).collect();
    let r = render(&Score::from_notes(&states).unwrap(), &KernelSettings::default(), &SynthOptions::default()).unwrap();
    let bytes: Vec<u8> = r.pcm.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    let trace = dir.path().join("live.tsv");
    let mut child = smfollow()
        .args(["follow", "--mode", "live", "--score", &midi, "--trace"])
        .arg(&trace)
        .stdin(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&bytes).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().last().unwrap().split('\t').nth(1), Some("4"));
}
