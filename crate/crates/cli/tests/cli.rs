use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use scenesynth::dataset::{read_labels, read_manifest, registry_of, ACCESS_LOG_ENV};
use scenesynth::environment::{ground_truth_graph, Camera, Scene3D, DEFAULT_PREDICATE_MARGIN};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scenesynth"));
    c.env("RUST_LOG", "warn").env_remove(ACCESS_LOG_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, train: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json!({ "version": 1, "train": train }).to_string()).unwrap();
    path
}

fn tiny_train(epochs: usize) -> Value {
    json!({
        "epochs": epochs,
        "iters_per_epoch": 3,
        "batch_size": 2,
        "warmup_epochs": epochs.min(1),
        "sdr_count": 6,
    })
}

fn gen(dir: &Path, domain: &str, count: usize, seed: u64, labels: bool) -> PathBuf {
    let out = dir.join(format!("{domain}-{count}-{seed}-{labels}"));
    let (count, seed) = (count.to_string(), seed.to_string());
    let mut args = vec!["gen", "--domain", domain, "--out", s(&out), "--count", &count, "--seed", &seed];
    if labels {
        args.push("--with-labels");
    }
    ok(&args);
    out
}

#[test]
fn gen_writes_count_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "source", 10, 7, false);
    let m = read_manifest(&a).unwrap();
    assert_eq!(m.count, 10);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 10);
    assert_eq!(fs::read_dir(a.join("graphs")).unwrap().count(), 10);

    let b = tmp.path().join("again");
    ok(&["gen", "--domain", "source", "--out", s(&b), "--count", "10", "--seed", "7"]);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(fs::read(a.join("images/000003.ppm")).unwrap(), fs::read(b.join("images/000003.ppm")).unwrap());
}

#[test]
fn target_datasets_are_unlabeled_unless_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let t = gen(tmp.path(), "target", 4, 1, false);
    assert!(!t.join("graphs").exists());
    assert!(!t.join("scenes").exists());
    assert!(!read_manifest(&t).unwrap().labeled);
    assert!(read_labels(&t, &read_manifest(&t).unwrap()).is_err());
}

#[test]
fn labeled_target_graphs_match_the_predicate_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let t = gen(tmp.path(), "target", 8, 2, true);
    let m = read_manifest(&t).unwrap();
    let registry = registry_of(&t, &m).unwrap();
    let graphs = read_labels(&t, &m).unwrap();
    for (i, g) in graphs.iter().enumerate() {
        let text = fs::read_to_string(t.join(format!("scenes/{i:06}.json"))).unwrap();
        let scene = Scene3D::from_json(&text, &registry).unwrap();
        assert_eq!(&ground_truth_graph(&scene, &Camera::default(), DEFAULT_PREDICATE_MARGIN), g);
    }
}

#[test]
fn train_with_zero_epochs_writes_initial_checkpoint_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", tiny_train(0));
    let t = gen(tmp.path(), "target", 4, 1, false);
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--target-dir", s(&t), "--out", s(&out)]);
    let mut ckpts: Vec<String> = fs::read_dir(out.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    ckpts.sort();
    assert_eq!(ckpts, ["epoch_000.ckpt", "epoch_000.json"]);
    let log = fs::read_to_string(out.join("log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(out.join("checkpoints/epoch_000.ckpt")).unwrap());
}

#[test]
fn train_is_deterministic_and_never_reads_target_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", tiny_train(2));
    // Labeled on disk, so a stray read would show up in the access log.
    let t = gen(tmp.path(), "target", 6, 1, true);
    let ev = gen(tmp.path(), "target", 4, 9, true);
    let access = tmp.path().join("access.log");
    let mut logs = Vec::new();
    for run_dir in ["r1", "r2"] {
        let out = tmp.path().join(run_dir);
        let status = bin()
            .env(ACCESS_LOG_ENV, &access)
            .args(["train", "--config", s(&cfg), "--target-dir", s(&t), "--eval-dir", s(&ev), "--out", s(&out)])
            .output()
            .unwrap();
        assert_eq!(code(&status), 0, "{}", String::from_utf8_lossy(&status.stderr));
        logs.push(fs::read(out.join("log.ndjson")).unwrap());
        assert!(out.join("checkpoints/epoch_002.ckpt").exists());
        assert!(out.join("report.json").exists());
    }
    assert_eq!(logs[0], logs[1]);
    let text = String::from_utf8(logs[0].clone()).unwrap();
    let iters = text.lines().filter(|l| l.contains("\"kind\":\"iter\"")).count();
    assert_eq!(iters, 6);

    let reads = fs::read_to_string(&access).unwrap();
    let t_str = s(&t).to_string();
    assert!(reads.lines().any(|l| l.starts_with(&t_str) && l.contains("images")));
    for line in reads.lines().filter(|l| l.starts_with(&t_str)) {
        assert!(!line.contains("graphs") && !line.contains("scenes"), "train read target label {line}");
    }
    assert!(reads.lines().any(|l| l.starts_with(s(&ev)) && l.contains("graphs")));
}

#[test]
fn numeric_failure_exits_3_and_keeps_partial_log() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train = tiny_train(2);
    train["lr"] = json!(1e4);
    let cfg = write_config(tmp.path(), "nan.json", train);
    let t = gen(tmp.path(), "target", 4, 1, false);
    let out_dir = tmp.path().join("run");
    let out = run(&["train", "--config", s(&cfg), "--target-dir", s(&t), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(out_dir.join("log.ndjson")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"kind\":\"iter\"")));
    assert!(log.lines().last().unwrap().contains("\"kind\":\"error\""));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["gen", "--domain", "source"])), 1);
    assert_eq!(code(&run(&["gen", "--domain", "sideways", "--out", "x"])), 1);
    assert_eq!(code(&run(&["gen", "--domain", "source", "--out", "x", "--count", "many"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);

    let tmp = tempfile::tempdir().unwrap();
    let t = gen(tmp.path(), "target", 2, 1, true);
    let out = run(&["train", "--target-dir", s(&t), "--eval-dir", s(&t), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_and_data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    let out = tmp.path().join("out");
    for text in [r#"{"version":1,"extra":0}"#, r#"{"version":2}"#, r#"{"version":1,"train":{"epochs":1,"warmup_epochs":5}}"#, "not json"] {
        fs::write(&bad, text).unwrap();
        let r = run(&["gen", "--domain", "source", "--config", s(&bad), "--out", s(&out)]);
        assert_eq!(code(&r), 2, "{text}");
    }
    assert_eq!(code(&run(&["eval", "--pred", "/nonexistent", "--gt", "/nonexistent", "--out", s(&out)])), 2);

    // Corrupt an image: its checksum no longer matches the manifest.
    let t = gen(tmp.path(), "source", 2, 1, false);
    let img = t.join("images/000001.ppm");
    let mut bytes = fs::read(&img).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&img, bytes).unwrap();
    let r = run(&["eval", "--pred", s(&t), "--gt", s(&t), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "eval reads labels only");
    let cfg = write_config(tmp.path(), "c.json", tiny_train(0));
    let r = run(&["train", "--config", s(&cfg), "--target-dir", s(&t), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("checksum"));
}

#[test]
fn checkpoint_hash_mismatch_exits_2_with_both_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", tiny_train(0));
    let t = gen(tmp.path(), "target", 2, 1, false);
    let run_dir = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--target-dir", s(&t), "--out", s(&run_dir)]);
    let ckpt = run_dir.join("model.ckpt");
    let side: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("model.json")).unwrap()).unwrap();
    let expected = side["checkpoint_sha256"].as_str().unwrap().to_string();
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.push(0);
    fs::write(&ckpt, &bytes).unwrap();
    let r = run(&["infer", "--model", s(&ckpt), "--images", s(&t), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(code(&r), 2);
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains(&expected), "{err}");
    assert!(err.contains(&scenesynth::hash::sha256_hex(&bytes)), "{err}");
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gen(tmp.path(), "source", 6, 3, false);
    let out = tmp.path().join("report.json");
    ok(&["eval", "--pred", s(&d), "--gt", s(&d), "--out", s(&out)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["version"], 1);
    assert_eq!(r["map50"], 1.0);
    // Four-object scenes can carry more than 20 triplets, so only K = 50
    // covers every ground-truth edge.
    assert!(r["counts"]["gt_triplets"].as_u64().unwrap() > 0);
    assert_eq!(r["recall"]["50"], 1.0);
    let r20 = r["recall"]["20"].as_f64().unwrap();
    assert!(r20 > 0.9 && r20 <= 1.0);
}

#[test]
fn reconstruct_of_empty_graphs_renders_background_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("empty.json");
    let mut doc: Value = serde_json::from_str(&String::from_utf8(run(&["config"]).stdout).unwrap()).unwrap();
    doc["env"]["source"]["count"] = json!([0, 0]);
    fs::write(&cfg, doc.to_string()).unwrap();
    let d = tmp.path().join("empty");
    ok(&["gen", "--domain", "source", "--config", s(&cfg), "--out", s(&d), "--count", "3"]);
    let rec = tmp.path().join("rec");
    ok(&["reconstruct", "--graphs", s(&d), "--out", s(&rec), "--seed", "5"]);
    let m = read_manifest(&rec).unwrap();
    let registry = registry_of(&rec, &m).unwrap();
    for (i, g) in read_labels(&rec, &m).unwrap().iter().enumerate() {
        assert!(g.nodes.is_empty() && g.edges.is_empty());
        let scene = Scene3D::from_json(&fs::read_to_string(rec.join(format!("scenes/{i:06}.json"))).unwrap(), &registry).unwrap();
        assert!(scene.objects.is_empty());
        let ids = scenesynth::environment::object_id_buffer(&scene, &Camera::default());
        assert!(ids.iter().all(Option::is_none));
    }
    let rec2 = tmp.path().join("rec2");
    ok(&["reconstruct", "--graphs", s(&d), "--out", s(&rec2), "--seed", "5"]);
    assert_eq!(fs::read(rec.join("manifest.json")).unwrap(), fs::read(rec2.join("manifest.json")).unwrap());
}

#[test]
fn infer_and_diagnose_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", tiny_train(1));
    let t = gen(tmp.path(), "target", 4, 1, false);
    let src = gen(tmp.path(), "source", 5, 2, false);
    let run_dir = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--target-dir", s(&t), "--out", s(&run_dir)]);
    let model = run_dir.join("model.ckpt");

    let p1 = tmp.path().join("p1");
    let p2 = tmp.path().join("p2");
    ok(&["infer", "--model", s(&model), "--images", s(&src), "--out", s(&p1)]);
    ok(&["infer", "--model", s(&model), "--images", s(&src), "--out", s(&p2)]);
    assert_eq!(fs::read(p1.join("manifest.json")).unwrap(), fs::read(p2.join("manifest.json")).unwrap());
    assert_eq!(read_manifest(&p1).unwrap().count, 5);
    ok(&["eval", "--pred", s(&p1), "--gt", s(&src), "--out", s(&tmp.path().join("e.json"))]);

    let gap = tmp.path().join("gap.json");
    ok(&["diagnose", "--model", s(&model), "--source", s(&src), "--target", s(&src), "--out", s(&gap)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&gap).unwrap()).unwrap();
    assert_eq!(r["gap"], 0.0);
    assert_eq!(r["label_gap"], 0.0);
    assert!(r["eps_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_subcommand_prints_a_loadable_default() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["config"]);
    let path = tmp.path().join("c.json");
    fs::write(&path, &out.stdout).unwrap();
    let again = ok(&["config", "--config", s(&path)]);
    assert_eq!(out.stdout, again.stdout);
}
