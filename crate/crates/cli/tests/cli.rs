use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pestvl_caption::stub::{StubReply, StubServer};
use pestvl_core::checkpoint::decode_dump;
use pestvl_core::data::{load_gray, save_rgb_png, synthetic_dataset, write_synthetic_tree};
use pestvl_core::spectral::{saliency_map, SaliencyParams};
use serde_json::Value;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config() -> String {
    workspace().join("configs/toy.toml").display().to_string()
}

fn pestvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pestvl"))
        .args(args)
        .env_remove("RUST_LOG")
        .env_remove("MLLM_API_URL")
        .env_remove("MLLM_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let v: Value = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"));
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(workspace().join("docs/cli-output.schema.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?} in {v}");
    v
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn png(dir: &Path) -> PathBuf {
    let (img, _) = synthetic_dataset(4, 1, 32, 3).remove(2);
    let path = dir.join("pest.png");
    save_rgb_png(&img, 32, &path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_documents_subcommands_and_exit_codes() {
    let out = pestvl(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "saliency",
        "partition-viz",
        "caption-gen",
        "encode-text",
        "split",
        "train",
        "eval",
        "export-features",
        "self-test",
        "MLLM_API_URL",
        "MLLM_API_KEY",
        "--override",
        "--json",
    ] {
        assert!(text.contains(name), "--help lacks {name}");
    }
    for c in ["2  usage", "3  configuration", "4  data", "5  runtime"] {
        assert!(text.contains(c), "--help lacks exit code {c}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = pestvl(&["saliency", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out_png = dir.path().join("sal.png");
    let img = png(dir.path());
    let out = pestvl(&["--json", "--override", "model.widht=3", "saliency", "--in", s(&img), "--out", s(&out_png)]);
    assert_eq!(code(&out), 3);
    let v = stdout_json(&out);
    assert_eq!(v["error"]["category"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("model.widht"));
    assert!(!out_png.exists());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[optimizer]\nlr = -1.0\n").unwrap();
    assert_eq!(code(&pestvl(&["--config", s(&bad), "self-test"])), 3);
}

#[test]
fn saliency_writes_png_and_raw_dump_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let img = png(dir.path());
    let (out_png, raw) = (dir.path().join("sal.png"), dir.path().join("sal.pvlt"));
    let run = || pestvl(&["--json", "saliency", "--in", s(&img), "--out", s(&out_png), "--raw", s(&raw)]);
    let first = run();
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let v = stdout_json(&first);
    assert_eq!((v["result"]["height"].as_u64(), v["result"]["width"].as_u64()), (Some(32), Some(32)));
    let (a, b) = (std::fs::read(&out_png).unwrap(), std::fs::read(&raw).unwrap());
    assert_eq!(code(&run()), 0);
    assert_eq!(std::fs::read(&out_png).unwrap(), a);
    assert_eq!(std::fs::read(&raw).unwrap(), b);

    let expect = saliency_map(&load_gray(&img).unwrap(), &SaliencyParams::default()).unwrap().map;
    let dump = decode_dump(&b).unwrap();
    assert_eq!(dump[0].0, "saliency");
    assert_eq!(dump[0].1.data().len(), expect.data.len());
    for (x, y) in dump[0].1.data().iter().zip(&expect.data) {
        assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0));
    }
    let decoded = image::open(&out_png).unwrap().to_luma8();
    assert_eq!(decoded.dimensions(), (32, 32));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pestvl(&["saliency", "--in", "/no/such.png", "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&out), 4);
}

#[test]
fn partition_viz_reports_the_top_window() {
    let dir = tempfile::tempdir().unwrap();
    let img = png(dir.path());
    let out_png = dir.path().join("overlay.png");
    let out = pestvl(&[
        "--json", "--config", &toy_config(), "partition-viz", "--in", s(&img), "--out", s(&out_png), "--scale", "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let e: Vec<f64> = v["result"]["energies"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let best = (0..4).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
    assert_eq!(v["result"]["selected"], serde_json::json!([best]));
    assert_eq!(image::open(&out_png).unwrap().to_rgb8().dimensions(), (96, 96));
}

#[test]
fn split_train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_synthetic_tree(&root, 2, 10, 32, 5).unwrap();
    let manifest = dir.path().join("manifest.json");
    let out = pestvl(&["--json", "split", "--root", s(&root), "--out", s(&manifest)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    for c in v["result"]["classes"].as_array().unwrap() {
        assert_eq!((c["train"].as_u64(), c["val"].as_u64(), c["test"].as_u64()), (Some(7), Some(1), Some(2)));
    }
    let bytes = std::fs::read(&manifest).unwrap();
    assert_eq!(code(&pestvl(&["split", "--root", s(&root), "--out", s(&manifest)])), 0);
    assert_eq!(std::fs::read(&manifest).unwrap(), bytes);

    let data = format!("data.manifest={}", s(&manifest));
    let run_dir = dir.path().join("run");
    let train = || {
        pestvl(&[
            "--json", "--config", &toy_config(), "--override", "optimizer.epochs=1", "--override", "model.classes=2",
            "--override", &data, "train", "--out", s(&run_dir),
        ])
    };
    let out = train();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["result"]["epochs"], 1);
    // 14 training images in batches of 8.
    assert_eq!(v["result"]["steps"], 2);
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,split,accuracy,precision,f1,gm,loss");
    assert!(lines[1].starts_with("1,train,") && lines[2].starts_with("1,val,"), "{csv}");
    let ck = std::fs::read(run_dir.join("checkpoint.pvlc")).unwrap();
    assert_eq!(code(&train()), 0);
    assert_eq!(std::fs::read(run_dir.join("checkpoint.pvlc")).unwrap(), ck);
    assert_eq!(std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap(), csv);

    let ck_path = run_dir.join("checkpoint.pvlc");
    let report = dir.path().join("report.json");
    let out = pestvl(&["--json", "eval", "--checkpoint", s(&ck_path), "--split", "test", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["result"]["samples"], 4);
    let conf = v["result"]["metrics"]["confusion"].as_array().unwrap();
    let total: u64 = conf.iter().flat_map(|r| r.as_array().unwrap()).map(|x| x.as_u64().unwrap()).sum();
    assert_eq!(total, 4);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved, v["result"]);

    let maps = dir.path().join("maps");
    let img = root.join("class_00/img_00.png");
    let out = pestvl(&[
        "--json", "export-features", "--checkpoint", s(&ck_path), "--in", s(&img), "--stages", "0,4", "--out", s(&maps),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["result"]["files"].as_array().unwrap().len(), 2);
    assert_eq!(image::open(maps.join("stage_4.png")).unwrap().to_rgb8().dimensions(), (8, 8));
    let out = pestvl(&["export-features", "--checkpoint", s(&ck_path), "--in", s(&img), "--stages", "5", "--out", s(&maps)]);
    assert_eq!(code(&out), 4);
}

#[test]
fn resumed_training_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--config", &toy_config(), "--override", "model.classes=2", "--override", "model.stages=2"];
    let run = |epochs: &str, out: &Path, resume: Option<&Path>| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(["--override", epochs, "train", "--synthetic", "4", "--out", s(out)]);
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        let o = pestvl(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (straight, first, second) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run("optimizer.epochs=2", &straight, None);
    run("optimizer.epochs=1", &first, None);
    run("optimizer.epochs=2", &second, Some(&first.join("checkpoint.pvlc")));
    assert_eq!(
        std::fs::read(straight.join("checkpoint.pvlc")).unwrap(),
        std::fs::read(second.join("checkpoint.pvlc")).unwrap()
    );
}

#[test]
fn caption_then_encode_against_a_stub_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_synthetic_tree(&root, 2, 2, 32, 1).unwrap();
    let fixtures = workspace().join("crates/caption/tests/fixtures");
    let kb = dir.path().join("kb.toml");
    std::fs::write(
        &kb,
        "[[species]]\nname = \"class_00\"\nattributes = [{ facet = \"color\", description = \"green\" }]\n\
         [[species]]\nname = \"class_01\"\nattributes = [{ facet = \"color\", description = \"brown\" }]\n",
    )
    .unwrap();
    let template = fixtures.join("cot_template.toml");
    let captions = dir.path().join("captions.jsonl");
    let data = format!("data.root={}", s(&root));
    let args = |mode: &'static str| {
        vec![
            "--json".to_string(),
            "--override".into(),
            data.clone(),
            "caption-gen".into(),
            "--knowledge".into(),
            s(&kb).into(),
            "--template".into(),
            s(&template).into(),
            "--out".into(),
            s(&captions).into(),
            "--mode".into(),
            mode.into(),
        ]
    };

    let missing = Command::new(env!("CARGO_BIN_EXE_pestvl"))
        .args(args("per-image"))
        .env_remove("MLLM_API_URL")
        .env_remove("MLLM_API_KEY")
        .output()
        .unwrap();
    assert_eq!(code(&missing), 3);

    let server = StubServer::start(vec![
        StubReply::new(503, "busy"),
        StubReply::caption("A green beetle with ridged wing cases."),
    ])
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pestvl"))
        .args(args("per-class"))
        .env("MLLM_API_URL", server.url())
        .env("MLLM_API_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["result"]["written"], 4);
    assert_eq!(v["result"]["retries"], 1);
    // One request per class plus the retried one.
    assert_eq!(server.hits(), 3);
    let records = pestvl_caption::read_jsonl(&captions).unwrap();
    assert_eq!(records.len(), 4);

    let store = dir.path().join("emb.pvle");
    let encode = || {
        pestvl(&[
            "--json", "--override", "model.embedding_dim=16", "encode-text", "--captions", s(&captions), "--out", s(&store),
        ])
    };
    let out = encode();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!((v["result"]["captions"].as_u64(), v["result"]["distinct"].as_u64()), (Some(4), Some(1)));
    let bytes = std::fs::read(&store).unwrap();
    assert_eq!(&bytes[..4], b"PVLE");
    assert_eq!(code(&encode()), 0);
    assert_eq!(std::fs::read(&store).unwrap(), bytes);

    // The stored captions and embeddings feed training.
    let out = pestvl(&[
        "--config", &toy_config(), "--override", "optimizer.epochs=1", "--override", "model.classes=2",
        "--override", "model.embedding_dim=16", "--override", &data,
        "--override", &format!("data.caption_file={}", s(&captions)),
        "--override", &format!("data.embeddings={}", s(&store)),
        "train", "--out", s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn self_test_reports_each_suite() {
    let out = pestvl(&["--json", "self-test"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    let suites = v["result"]["suites"].as_array().unwrap();
    assert_eq!(suites.len(), 4);
    assert!(suites.iter().all(|s| s["passed"] == true && s["max_error"].as_f64().unwrap() >= 0.0));

    let out = pestvl(&["--json", "self-test", "--inject-fault", "attention"]);
    assert_eq!(code(&out), 5);
    let v = stdout_json(&out);
    let failed: Vec<&str> = v["result"]["suites"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["passed"] == false)
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["attention"]);
}
