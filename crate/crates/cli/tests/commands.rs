use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn arwlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arwlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = arwlab(args);
    assert!(
        out.status.success(),
        "arwlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(dir: &TempDir, seed: &str) -> PathBuf {
    let path = dir.path().join(format!("fixture-{seed}.arwc"));
    ok(&[
        "gen-data",
        "--preset",
        "fairness-fixture",
        "--seed",
        seed,
        "--out",
        p(&path),
    ]);
    path
}

fn short_train(corpus: &Path, out: &Path, variant: &str, seed: &str) {
    ok(&[
        "train",
        "--corpus",
        p(corpus),
        "--out-dir",
        p(out),
        "--variant",
        variant,
        "--seed",
        seed,
        "--epochs",
        "2",
        "--warmup-epochs",
        "1",
        "--batches-per-epoch",
        "3",
    ]);
}

#[test]
fn gen_data_is_byte_identical_and_follows_preset() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.arwc");
    let b = dir.path().join("b.arwc");
    for path in [&a, &b] {
        ok(&[
            "gen-data",
            "--preset",
            "table1-gender",
            "--seed",
            "7",
            "--out",
            p(path),
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let corpus = arwlab_core::data::load_corpus(&a).unwrap();
    let female = corpus
        .speakers
        .iter()
        .filter(|s| s.split == arwlab_core::Split::Train && s.groups[0] == 0)
        .count();
    assert_eq!(female, 45);
    assert_eq!(corpus.indices(arwlab_core::Split::Train).len(), 100);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a.arwc.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seeds"][0], 7);
    assert!(manifest["timings_ms"]["total"].is_number());
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = arwlab(&["gen-data", "--preset", "table1-gender"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = TempDir::new().unwrap();
    let mut cfg = serde_json::to_value(arwlab_core::GenConfig::fairness_fixture(0)).unwrap();
    cfg["utterances_per_speaker"] = 1.into();
    let path = dir.path().join("gen.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = arwlab(&[
        "gen-data",
        "--config",
        p(&path),
        "--out",
        p(&dir.path().join("c.arwc")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("utterances_per_speaker"));
}

#[test]
fn unknown_variant_lists_valid_ones() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture(&dir, "1");
    let out = arwlab(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out-dir",
        p(&dir.path().join("t")),
        "--variant",
        "pw-magic",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for v in [
        "baseline",
        "aps-inner",
        "aps-cosexp",
        "pl",
        "pw-sim",
        "pw-lik",
    ] {
        assert!(err.contains(v), "{err}");
    }
}

#[test]
fn untrained_model_scores_near_chance() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture(&dir, "2");
    let train_dir = dir.path().join("t");
    ok(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out-dir",
        p(&train_dir),
        "--variant",
        "baseline",
        "--epochs",
        "0",
    ]);
    assert_eq!(fs::read(train_dir.join("history.jsonl")).unwrap(), b"");
    let eval_dir = dir.path().join("e");
    ok(&[
        "eval",
        "--corpus",
        p(&corpus),
        "--checkpoint",
        p(&train_dir.join("learner.arwm")),
        "--out-dir",
        p(&eval_dir),
    ]);
    let report: arwlab_core::FairnessReport =
        serde_json::from_slice(&fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert!(
        report.overall_eer_percent > 25.0,
        "{}",
        report.overall_eer_percent
    );

    let csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "axis,group,eer_percent,gap,std,threshold,genuine_trials,impostor_trials"
    );
    assert!(rows[1].starts_with("overall,all,"));
    assert!(rows[2].starts_with("group,majority,"));
    assert!(rows[3].starts_with("group,minority,"));
    assert_eq!(rows.len(), 4);

    let scores = fs::read_to_string(eval_dir.join("scores.csv")).unwrap();
    assert_eq!(
        scores.lines().count(),
        1 + report.genuine_trials + report.impostor_trials
    );

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(eval_dir.join("manifest.json")).unwrap()).unwrap();
    for artifact in manifest["artifacts"].as_object().unwrap().values() {
        assert!(Path::new(artifact.as_str().unwrap()).exists());
    }
}

#[test]
fn training_and_evaluation_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture(&dir, "3");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    short_train(&corpus, &a, "pw-lik", "3");
    short_train(&corpus, &b, "pw-lik", "3");
    for file in [
        "history.jsonl",
        "learner.arwm",
        "adversary.arwm",
        "train-config.json",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    assert!(!fs::read(a.join("history.jsonl")).unwrap().is_empty());

    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    for (ckpt, out) in [(&a, &ea), (&b, &eb)] {
        ok(&[
            "eval",
            "--corpus",
            p(&corpus),
            "--checkpoint",
            p(&ckpt.join("learner.arwm")),
            "--out-dir",
            p(out),
        ]);
    }
    for file in ["report.json", "report.csv", "scores.csv"] {
        assert_eq!(
            fs::read(ea.join(file)).unwrap(),
            fs::read(eb.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn cluster_count_flag_accepts_uppercase_alias() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture(&dir, "4");
    let out = dir.path().join("pl");
    ok(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out-dir",
        p(&out),
        "--variant",
        "pl",
        "--K",
        "32",
        "--epochs",
        "1",
        "--warmup-epochs",
        "0",
        "--batches-per-epoch",
        "1",
    ]);
    let cfg: arwlab_core::TrainConfig =
        serde_json::from_slice(&fs::read(out.join("train-config.json")).unwrap()).unwrap();
    assert_eq!(cfg.k, 32);

    let too_many = arwlab(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out-dir",
        p(&dir.path().join("x")),
        "--variant",
        "pl",
        "--K",
        "128",
        "--epochs",
        "1",
        "--warmup-epochs",
        "0",
    ]);
    assert_eq!(too_many.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&too_many.stderr).contains("k: 128 clusters"));
}

#[test]
fn dimension_mismatch_fails_eval() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture(&dir, "5");
    let train_dir = dir.path().join("t");
    ok(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out-dir",
        p(&train_dir),
        "--epochs",
        "0",
    ]);

    let mut cfg = serde_json::to_value(arwlab_core::GenConfig::fairness_fixture(5)).unwrap();
    cfg["feature_dim"] = 32.into();
    let cfg_path = dir.path().join("narrow.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let narrow = dir.path().join("narrow.arwc");
    ok(&["gen-data", "--config", p(&cfg_path), "--out", p(&narrow)]);

    let out = arwlab(&[
        "eval",
        "--corpus",
        p(&narrow),
        "--checkpoint",
        p(&train_dir.join("learner.arwm")),
        "--out-dir",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture(&dir, "6");
    let bad = dir.path().join("bad.arwm");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = arwlab(&[
        "eval",
        "--corpus",
        p(&corpus),
        "--checkpoint",
        p(&bad),
        "--out-dir",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_filters() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        text.lines().count(),
        arwlab_core::gradcheck::Component::ALL.len()
    );

    let out = ok(&["gradcheck", "--component", "pw-sim", "--seed", "40"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("pw-sim"));

    let bad = arwlab(&["gradcheck", "--component", "nope"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn experiment_writes_tables_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let mut cfg = arwlab_core::ExperimentConfig::fairness_smoke();
    cfg.data.train_speakers = 40;
    cfg.data.eval_speakers = 20;
    cfg.train.epochs = 2;
    cfg.train.warmup_epochs = 1;
    cfg.train.batches_per_epoch = Some(2);
    cfg.train.speakers_per_batch = 10;
    cfg.trials_per_speaker = 5;
    let cfg_path = dir.path().join("exp.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, workers) in [(&a, "2"), (&b, "1")] {
        ok(&[
            "experiment",
            "--config",
            p(&cfg_path),
            "--seeds",
            "2",
            "--variants",
            "pl,pw-lik",
            "--workers",
            workers,
            "--out-dir",
            p(out),
        ]);
    }
    for file in ["experiment.json", "experiment.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let csv = fs::read_to_string(a.join("experiment.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "variant,completed,failed,overall_eer,group:majority,group:minority,group:gap,group:std"
    );
    assert!(rows[1].starts_with("baseline,2,0,"));
    assert!(rows[2].starts_with("pl,2,0,"));
    assert!(rows[3].starts_with("pw-lik,2,0,"));
    assert_eq!(rows.len(), 4);
}

#[test]
fn experiment_keeps_partial_results_on_failure() {
    let dir = TempDir::new().unwrap();
    let mut cfg = arwlab_core::ExperimentConfig::fairness_smoke();
    cfg.data.train_speakers = 20;
    cfg.data.eval_speakers = 10;
    cfg.train.epochs = 1;
    cfg.train.warmup_epochs = 0;
    cfg.train.batches_per_epoch = Some(1);
    cfg.train.speakers_per_batch = 10;
    cfg.train.k = 50;
    cfg.variants = vec![arwlab_core::Variant::Baseline, arwlab_core::Variant::Pl];
    cfg.seeds = vec![1];
    cfg.trials_per_speaker = 3;
    let cfg_path = dir.path().join("exp.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = arwlab(&[
        "experiment",
        "--config",
        p(&cfg_path),
        "--out-dir",
        p(&out_dir),
    ]);
    assert_ne!(out.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("experiment.json")).unwrap()).unwrap();
    assert!(report["replicas"][0]["report"].is_object());
    assert!(report["replicas"][1]["error"].is_string());
}
