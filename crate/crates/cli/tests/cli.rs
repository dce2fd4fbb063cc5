use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn diarkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diarkit"))
        .current_dir(dir)
        .env_remove("DIARKIT_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = diarkit(dir, args);
    assert!(
        out.status.success(),
        "diarkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SYNTH: &str =
    "speakers=4\ntrain_utts_per_speaker=3\ntrain_utt_s=5\nconversations=3\nconversation_s=20\n";

/// A small synthetic corpus with a trained model and back-end, built once.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("diarkit-cli-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("synth.cfg"), SYNTH).unwrap();
        ok(
            &dir,
            &[
                "synth",
                "--config",
                "synth.cfg",
                "--out",
                "data",
                "--seed",
                "5",
                "-q",
            ],
        );
        ok(
            &dir,
            &[
                "train",
                "--manifest",
                "data/train/manifest.lst",
                "--out",
                "net.xvec",
                "--set",
                "epochs=1",
                "--set",
                "examples_per_epoch=64",
                "--set",
                "minibatch=16",
                "-q",
            ],
        );
        ok(
            &dir,
            &[
                "embed",
                "--model",
                "net.xvec",
                "--manifest",
                "data/train/manifest.lst",
                "--out",
                "train.emb",
                "--labels-out",
                "train.lab",
                "-q",
            ],
        );
        ok(
            &dir,
            &[
                "backend-fit",
                "--embeddings",
                "train.emb",
                "--labels",
                "train.lab",
                "--pca-dim",
                "16",
                "--out",
                "backend.bin",
                "-q",
            ],
        );
        dir
    })
}

fn diarize_args<'a>(stop: &'a [&'a str], out: &'a str) -> Vec<&'a str> {
    let mut args = vec![
        "diarize",
        "--model",
        "net.xvec",
        "--backend",
        "backend.bin",
        "--conversations",
        "data/test/conversations.lst",
        "--sad",
        "data/test/sad.txt",
        "--out",
        out,
        "-q",
    ];
    args.extend_from_slice(stop);
    args
}

#[test]
fn scoring_a_reference_against_itself_gives_zero() {
    let dir = fixture();
    let out = ok(
        dir,
        &[
            "score",
            "--ref",
            "data/test/ref.rttm",
            "--hyp",
            "data/test/ref.rttm",
            "--breakdown",
        ],
    );
    let total = out.lines().find(|l| l.starts_with("TOTAL")).unwrap();
    assert!(total.ends_with(" 0.000"), "{total}");
    assert!(out.lines().any(|l| l.starts_with("2 ")));
}

#[test]
fn oracle_k_of_one_yields_one_speaker_over_all_speech() {
    let dir = fixture();
    fs::write(dir.join("one.k"), "conv000 1\nconv001 1\nconv002 1\n").unwrap();
    ok(dir, &diarize_args(&["--oracle-k", "one.k"], "one.rttm"));
    let hyp = fs::read_to_string(dir.join("one.rttm")).unwrap();
    for conv in ["conv000", "conv001", "conv002"] {
        let lines: Vec<Vec<&str>> = hyp
            .lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>())
            .filter(|f| f[1] == conv)
            .collect();
        assert_eq!(lines.len(), 1, "{conv}: {lines:?}");
        assert_eq!(lines[0][3], "0.000");
        assert_eq!(lines[0][4], "20.000");
    }
}

#[test]
fn oracle_k_and_threshold_runs_score_against_the_reference() {
    let dir = fixture();
    ok(
        dir,
        &diarize_args(&["--oracle-k", "data/test/conversations.lst"], "k.rttm"),
    );
    let report = ok(
        dir,
        &[
            "score",
            "--ref",
            "data/test/ref.rttm",
            "--hyp",
            "k.rttm",
            "--sad",
            "data/test/sad.txt",
        ],
    );
    assert_eq!(report.lines().count(), 5);
    let cal = ok(
        dir,
        &[
            "calibrate",
            "--model",
            "net.xvec",
            "--backend",
            "backend.bin",
            "--conversations",
            "data/test/conversations.lst",
            "--sad",
            "data/test/sad.txt",
            "--ref",
            "data/test/ref.rttm",
            "--out",
            "cal.rttm",
            "-q",
        ],
    );
    assert!(cal.starts_with("fold threshold dev_der eval_der\n"));
    assert!(cal.lines().last().unwrap().starts_with("cv "));
    assert!(dir.join("cal.rttm").is_file());
}

#[test]
fn outputs_do_not_depend_on_the_job_count() {
    let dir = fixture();
    ok(dir, &diarize_args(&["--threshold", "0"], "j1.rttm"));
    let mut args = diarize_args(&["--threshold", "0"], "j3.rttm");
    args.extend(["--jobs", "3"]);
    ok(dir, &args);
    assert_eq!(
        fs::read(dir.join("j1.rttm")).unwrap(),
        fs::read(dir.join("j3.rttm")).unwrap()
    );
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.cfg"), SYNTH).unwrap();
    ok(
        dir.path(),
        &[
            "synth", "--config", "s.cfg", "--out", "a", "--seed", "11", "-q",
        ],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_diarkit"))
        .current_dir(dir.path())
        .env("DIARKIT_SEED", "11")
        .args(["synth", "--config", "s.cfg", "--out", "b", "-q"])
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(
        dir.path(),
        &[
            "synth", "--config", "s.cfg", "--out", "c", "--seed", "12", "-q",
        ],
    );
    let read = |d: &str| fs::read(dir.path().join(d).join("test/conv000.fea")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(
        fs::read(dir.path().join("a/test/ref.rttm")).unwrap(),
        fs::read(dir.path().join("b/test/ref.rttm")).unwrap()
    );
}

#[test]
fn dry_run_validates_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.cfg"), SYNTH).unwrap();
    let out = ok(
        dir.path(),
        &["--dry-run", "synth", "--config", "s.cfg", "--out", "data"],
    );
    assert!(out.starts_with("dry run"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let code = |args: &[&str]| diarkit(p, args).status.code().unwrap();
    // unknown configuration key
    assert_eq!(code(&["synth", "--out", "x", "--set", "colour=blue"]), 2);
    // missing input
    assert_eq!(
        code(&["score", "--ref", "nope.rttm", "--hyp", "nope.rttm"]),
        3
    );
    // malformed input
    fs::write(
        p.join("bad.rttm"),
        "SPEAKER c 1 zero 1.0 <NA> <NA> a <NA> <NA>\n",
    )
    .unwrap();
    assert_eq!(
        code(&["score", "--ref", "bad.rttm", "--hyp", "bad.rttm"]),
        4
    );
    // nothing to score
    fs::write(
        p.join("a.rttm"),
        "SPEAKER c 1 0.0 1.0 <NA> <NA> a <NA> <NA>\n",
    )
    .unwrap();
    fs::write(p.join("sad.txt"), "c 5.0 6.0\n").unwrap();
    assert_eq!(
        code(&["score", "--ref", "a.rttm", "--hyp", "a.rttm", "--sad", "sad.txt"]),
        7
    );
    // usage error from argument parsing
    assert_eq!(code(&["diarize"]), 2);
}
