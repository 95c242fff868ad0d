use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use veil::synth::{write_corpus, ToyCorpusConfig};
use veil::trainer::{gradcheck_extractor, steps_per_epoch};
use veil::{load_wav, Manifest, TrainingConfig};

fn veil_cmd(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veil"))
        .args(args)
        .env("VEIL_CACHE_DIR", cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn veil")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    extractor: PathBuf,
    checkpoint: PathBuf,
}

const TINY_TOML: &str = "\
epochs = 1
batch_size = 4
seg_len = 1024
channels = [4, 4]
learning_rate = 1e-3
";

/// Small corpus, small random extractor, one-epoch checkpoint.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    write_corpus(
        &ToyCorpusConfig {
            speakers: 2,
            utterances_per_speaker: 4,
            held_out_per_speaker: 2,
            ..ToyCorpusConfig::default()
        },
        root.join("corpus"),
    )
    .unwrap();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY_TOML).unwrap();
    let extractor = root.join("extractor.bin");
    gradcheck_extractor(3).unwrap().save(&extractor).unwrap();
    let checkpoint = root.join("model.bin");
    ok(&veil_cmd(
        &root.join("cache"),
        &[
            "train",
            "--manifest",
            s(&root.join("corpus/train.jsonl")),
            "--config",
            s(&config),
            "--extractor",
            s(&extractor),
            "--out",
            s(&checkpoint),
        ],
    ));
    Fixture {
        _dir: dir,
        root,
        extractor,
        checkpoint,
    }
}

#[test]
fn train_writes_checkpoint_and_loss_curve() {
    let f = fixture();
    assert!(f.checkpoint.exists());
    let csv = std::fs::read_to_string(f.root.join("model.loss.csv")).unwrap();
    let manifest = Manifest::load(f.root.join("corpus/train.jsonl")).unwrap();
    let lengths: Vec<usize> = manifest
        .entries
        .iter()
        .map(|e| manifest.load_entry(e).unwrap().len())
        .collect();
    let config = TrainingConfig::from_toml_str(TINY_TOML).unwrap();
    let rows = csv.lines().count() - 1;
    assert_eq!(rows, config.epochs * steps_per_epoch(lengths, &config));
    assert!(csv.starts_with("step,L_angular,L_quality,L_SSED,L_noise,L_mask,L_rpt,L"));
    assert!(f.root.join("cache/snapshots/epoch001.bin").exists());
    assert_eq!(veil::Checkpoint::load(&f.checkpoint).unwrap().epoch, 1);
}

#[test]
fn train_resume_extends_epochs() {
    let f = fixture();
    let out = f.root.join("model2.bin");
    ok(&veil_cmd(
        &f.root.join("cache"),
        &[
            "train",
            "--manifest",
            s(&f.root.join("corpus/train.jsonl")),
            "--extractor",
            s(&f.extractor),
            "--resume",
            s(&f.checkpoint),
            "--epochs",
            "2",
            "--out",
            s(&out),
        ],
    ));
    assert_eq!(veil::Checkpoint::load(&out).unwrap().epoch, 2);
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = veil_cmd(
        dir.path(),
        &["train", "--manifest", s(&missing), "--out", s(&dir.path().join("m.bin"))],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn protect_restore_round_trip() {
    let f = fixture();
    let cache = f.root.join("cache");
    let wav = f.root.join("corpus/wav/spk0_u02.wav");
    let single = f.root.join("single.wav");
    ok(&veil_cmd(
        &cache,
        &["protect", "--wav", s(&wav), "--checkpoint", s(&f.checkpoint), "--out", s(&single)],
    ));
    let x = load_wav(&wav).unwrap();
    let y = load_wav(&single).unwrap();
    let dist = max_abs_diff(&x.samples, &y.samples);
    // ε plus half a PCM16 step of rounding on the written file.
    assert!(dist < 0.05 + 1.0 / 32767.0, "{dist}");

    let test = f.root.join("corpus/test.jsonl");
    for dir in ["adv1", "adv2"] {
        ok(&veil_cmd(
            &cache,
            &[
                "protect",
                "--manifest",
                s(&test),
                "--checkpoint",
                s(&f.checkpoint),
                "--epsilon",
                "0.05",
                "--out",
                s(&f.root.join(dir)),
            ],
        ));
    }
    let held = Manifest::load(&test).unwrap();
    for e in &held.entries {
        let name = format!("{}.wav", e.utterance_id);
        let a = std::fs::read(f.root.join("adv1/wav").join(&name)).unwrap();
        let b = std::fs::read(f.root.join("adv2/wav").join(&name)).unwrap();
        assert_eq!(a, b);
    }
    let written = Manifest::load(f.root.join("adv1/manifest.jsonl")).unwrap();
    assert_eq!(written.entries.len(), held.entries.len());

    let stdout = ok(&veil_cmd(
        &cache,
        &[
            "restore",
            "--manifest",
            s(&f.root.join("adv1/manifest.jsonl")),
            "--checkpoint",
            s(&f.checkpoint),
            "--ref",
            s(&test),
            "--out",
            s(&f.root.join("rst")),
        ],
    ));
    let logged = stdout.lines().filter(|l| l.contains("snr_rst_db=")).count();
    assert_eq!(logged, held.entries.len());

    let bad_eps = veil_cmd(
        &cache,
        &[
            "protect",
            "--wav",
            s(&wav),
            "--checkpoint",
            s(&f.checkpoint),
            "--epsilon",
            "0.01",
            "--out",
            s(&single),
        ],
    );
    assert!(!bad_eps.status.success());
    assert!(String::from_utf8_lossy(&bad_eps.stderr).contains("epsilon mismatch"));
}

#[test]
fn restore_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = veil_cmd(dir.path(), &["restore", "--wav", "x.wav", "--out", "y.wav"]);
    assert!(!out.status.success());
}

#[test]
fn restoring_unprotected_audio_stays_within_epsilon() {
    let f = fixture();
    let wav = f.root.join("corpus/wav/spk1_u00.wav");
    let out = f.root.join("r.wav");
    ok(&veil_cmd(
        &f.root.join("cache"),
        &["restore", "--wav", s(&wav), "--checkpoint", s(&f.checkpoint), "--out", s(&out)],
    ));
    let x = load_wav(&wav).unwrap();
    let y = load_wav(&out).unwrap();
    assert!(max_abs_diff(&x.samples, &y.samples) < 0.05 + 1.0 / 32767.0);
}

#[test]
fn purify_methods() {
    let f = fixture();
    let cache = f.root.join("cache");
    let wav = f.root.join("corpus/wav/spk0_u00.wav");
    let q = f.root.join("q.wav");
    ok(&veil_cmd(&cache, &["purify", "--wav", s(&wav), "--method", "quantize", "--out", s(&q)]));
    for v in load_wav(&q).unwrap().samples {
        let scaled = v * 256.0;
        assert!((scaled - scaled.round()).abs() < 256.0 / 32767.0);
    }
    let bad = veil_cmd(
        &cache,
        &["purify", "--wav", s(&wav), "--method", "median", "--kernel", "4", "--out", s(&q)],
    );
    assert!(!bad.status.success());
    let mut outputs = Vec::new();
    for name in ["n1.wav", "n2.wav"] {
        let p = f.root.join(name);
        ok(&veil_cmd(
            &cache,
            &["purify", "--wav", s(&wav), "--method", "add_noise", "--seed", "7", "--out", s(&p)],
        ));
        outputs.push(std::fs::read(p).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let stdout = ok(&veil_cmd(
        &cache,
        &[
            "purify",
            "--manifest",
            s(&f.root.join("corpus/test.jsonl")),
            "--method",
            "median_smooth",
            "--out",
            s(&f.root.join("ms")),
        ],
    ));
    assert_eq!(stdout.lines().count(), 4);
}

fn validator() -> jsonschema::Validator {
    let schema: serde_json::Value = serde_json::from_str(veil::metrics::REPORT_SCHEMA).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn evaluate_recording_against_itself() {
    let f = fixture();
    let test = f.root.join("corpus/test.jsonl");
    let report = f.root.join("report.json");
    ok(&veil_cmd(
        &f.root.join("cache"),
        &[
            "evaluate",
            "--manifest",
            &format!("rec-rec={}", s(&test)),
            "--extractor",
            s(&f.extractor),
            "--nontargets-per-speaker",
            "2",
            "--asr-cmd",
            "echo placeholder; :",
            "--quality-cmd",
            "echo 4.5; :",
            "--out",
            s(&report),
        ],
    ));
    let json = read_json(&report);
    assert!(validator().is_valid(&json), "{json}");
    assert_eq!(json["condition"], "rec-rec");
    assert_eq!(json["snr_db"], "inf");
    assert_eq!(json["pitch_corr_mean"], 1.0);
    assert_eq!(json["pitch_corr_std"], 0.0);
    assert_eq!(json["quality_score"], 4.5);
    assert_eq!(json["n_utterances"], 4);
    // The stand-in recognizer answers every utterance with one fixed word.
    assert!(json["wer_percent"].as_f64().unwrap() > 0.0);
    assert!(f.root.join("report.rec-rec.scores").exists());
}

#[test]
fn evaluate_several_conditions() {
    let f = fixture();
    let cache = f.root.join("cache");
    let test = f.root.join("corpus/test.jsonl");
    ok(&veil_cmd(
        &cache,
        &[
            "protect",
            "--manifest",
            s(&test),
            "--checkpoint",
            s(&f.checkpoint),
            "--out",
            s(&f.root.join("adv")),
        ],
    ));
    let trials = f.root.join("trials.txt");
    veil::speaker::build_trials(&Manifest::load(&test).unwrap(), 1, 2, 0)
        .unwrap()
        .save(&trials)
        .unwrap();
    let report = f.root.join("all.json");
    ok(&veil_cmd(
        &cache,
        &[
            "evaluate",
            "--ref",
            s(&test),
            "--manifest",
            &format!("rec-rec={}", s(&test)),
            "--manifest",
            &format!("rec-adv={}", s(&f.root.join("adv/manifest.jsonl"))),
            "--trials",
            s(&trials),
            "--extractor",
            s(&f.extractor),
            "--out",
            s(&report),
        ],
    ));
    let json = read_json(&report);
    let reports = json.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let v = validator();
    for r in reports {
        assert!(v.is_valid(r), "{r}");
        assert!(r.get("quality_score").is_none() && r.get("wer_percent").is_none());
    }
    assert!(reports[1]["snr_db"].as_f64().unwrap().is_finite());

    let bad = f.root.join("bad_trials.txt");
    std::fs::write(&bad, "spk0_u02 ghost target\n").unwrap();
    let out = veil_cmd(
        &cache,
        &[
            "evaluate",
            "--manifest",
            s(&test),
            "--trials",
            s(&bad),
            "--extractor",
            s(&f.extractor),
            "--out",
            s(&report),
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));

    std::fs::write(&bad, "spk0_u02 spk1_u02 maybe\n").unwrap();
    let out = veil_cmd(
        &cache,
        &[
            "evaluate",
            "--manifest",
            s(&test),
            "--trials",
            s(&bad),
            "--extractor",
            s(&f.extractor),
            "--out",
            s(&report),
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn gradcheck_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&veil_cmd(dir.path(), &["gradcheck"]));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
    let schema = ok(&veil_cmd(dir.path(), &["schema"]));
    serde_json::from_str::<serde_json::Value>(&schema).unwrap();
}

#[test]
fn synth_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&veil_cmd(
        dir.path(),
        &["synth", "--out", s(&out), "--speakers", "2", "--utterances", "3", "--held-out", "1"],
    ));
    assert_eq!(Manifest::load(out.join("all.jsonl")).unwrap().entries.len(), 6);
    assert_eq!(Manifest::load(out.join("test.jsonl")).unwrap().entries.len(), 2);
}
