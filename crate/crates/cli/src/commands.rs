use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};

use pestvl_caption::{
    run_batch, BatchOptions, CaptionJob, CaptionMode, CaptionWriter, ClientConfig, CotTemplate, EmbeddingStore,
    KnowledgeBase, MllmClient, MockEncoder, RemoteEncoder, TextEncoder,
};
use pestvl_core::checkpoint::{encode_dump, Checkpoint};
use pestvl_core::config::{CaptionMode as DataCaptionMode, Config};
use pestvl_core::data::{build_manifest, load_gray, load_image};
use pestvl_core::featuremap::{export_feature_maps, partition_overlay, save_gray_png};
use pestvl_core::metrics::MetricsReport;
use pestvl_core::model::{saliency_energies, Sample};
use pestvl_core::partition::topk_select;
use pestvl_core::selftest::run_self_test;
use pestvl_core::spectral::saliency_map;
use pestvl_core::train::Trainer;
use pestvl_core::Tensor;

use crate::dataset::{self, image_id, manifest_from_config};
use crate::error::{CliError, Result};
use crate::{Cli, Command};

pub struct Output {
    /// False when the command ran but its verdict is a failure (self-test).
    pub ok: bool,
    pub result: Value,
    pub text: String,
}

impl Output {
    fn ok(result: Value, text: String) -> Self {
        Self { ok: true, result, text }
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => Ok(std::fs::create_dir_all(d)?),
        _ => Ok(()),
    }
}

pub fn run(cli: &Cli) -> Result<Output> {
    // Config problems surface before any work starts.
    let cfg = Config::load_with_overrides(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Saliency(a) => saliency(&cfg, &a.input, &a.out, a.raw.as_deref()),
        Command::PartitionViz(a) => partition_viz(&cfg, &a.input, &a.out, a.scale),
        Command::CaptionGen(a) => caption_gen(&cfg, a),
        Command::EncodeText(a) => encode_text(&cfg, a),
        Command::Split(a) => split(&cfg, a.root.as_deref(), &a.out),
        Command::Train(a) => train(cfg, a.out.as_path(), a.synthetic, a.resume.as_deref()),
        Command::Eval(a) => eval(&cfg, a),
        Command::ExportFeatures(a) => export_features(a),
        Command::SelfTest(a) => self_test(a.inject_fault.as_deref()),
    }
}

fn saliency(cfg: &Config, input: &Path, out: &Path, raw: Option<&Path>) -> Result<Output> {
    let img = load_gray(input)?;
    let sal = saliency_map(&img, &cfg.saliency)?;
    parent_dir(out)?;
    save_gray_png(&sal.map, out)?;
    if let Some(raw) = raw {
        let t = Tensor::matrix(sal.map.height, sal.map.width, sal.map.data.clone())?;
        parent_dir(raw)?;
        std::fs::write(raw, encode_dump(&[("saliency", &t)]))?;
    }
    let result = json!({
        "input": path_str(input),
        "output": path_str(out),
        "raw": raw.map(path_str),
        "height": sal.map.height,
        "width": sal.map.width,
        "min": sal.map.min(),
        "max": sal.map.max(),
    });
    let text = format!("saliency map {}x{} -> {}", sal.map.height, sal.map.width, out.display());
    Ok(Output::ok(result, text))
}

fn partition_viz(cfg: &Config, input: &Path, out: &Path, scale: usize) -> Result<Output> {
    if scale == 0 {
        return Err(CliError::config("--scale must be positive"));
    }
    let side = cfg.model.image_size;
    let image = load_image(input, side)?;
    let energies = saliency_energies(&image, side, cfg.model.feature_side(), &cfg.saliency)?;
    let selected = topk_select(&energies, cfg.partition.top_k)?;
    let overlay = partition_overlay(&image, side, &selected, scale)?;
    parent_dir(out)?;
    overlay
        .save(out)
        .map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let result = json!({
        "input": path_str(input),
        "output": path_str(out),
        "energies": energies,
        "selected": selected,
    });
    let text = format!("selected window(s) {selected:?} of energies {energies:.4?} -> {}", out.display());
    Ok(Output::ok(result, text))
}

fn caption_mode(cfg: &Config, flag: Option<&str>) -> Result<CaptionMode> {
    match flag {
        Some(m) => Ok(m.parse()?),
        None => Ok(match cfg.data.captions {
            DataCaptionMode::PerImage => CaptionMode::PerImage,
            DataCaptionMode::PerClass => CaptionMode::PerClass,
        }),
    }
}

fn caption_gen(cfg: &Config, a: &crate::CaptionArgs) -> Result<Output> {
    let kb = KnowledgeBase::load(&a.knowledge)?;
    let template = CotTemplate::load(&a.template)?;
    let mode = caption_mode(cfg, a.mode.as_deref())?;
    if a.concurrency == 0 {
        return Err(CliError::config("--concurrency must be positive"));
    }
    let mut client_cfg = ClientConfig::from_env(&a.model_id)?;
    client_cfg.max_attempts = a.max_attempts;
    client_cfg.timeout = Duration::from_secs(a.timeout_secs);
    let manifest = manifest_from_config(cfg)?;
    let jobs: Vec<CaptionJob> = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| CaptionJob {
            image_path: manifest.image_path(i),
            image_id: image_id(&s.path),
            species: manifest.classes[s.class_id].clone(),
        })
        .collect();
    parent_dir(&a.out)?;
    let mut writer = if a.append {
        CaptionWriter::append(&a.out)?
    } else {
        CaptionWriter::create(&a.out)?
    };
    let client = MllmClient::new(client_cfg);
    let opts = BatchOptions {
        concurrency: a.concurrency,
        mode,
    };
    let report = run_batch(&jobs, &kb, &template, &client, opts, &mut writer)?;
    let text = format!(
        "{} caption(s) written to {}, {} failure(s), {} retr(ies)",
        report.records.len(),
        a.out.display(),
        report.failures.len(),
        report.retries
    );
    let result = json!({
        "output": path_str(&a.out),
        "written": report.records.len(),
        "retries": report.retries,
        "failures": report.failures,
    });
    Ok(Output::ok(result, text))
}

fn encode_text(cfg: &Config, a: &crate::EncodeArgs) -> Result<Output> {
    let dim = cfg.model.embedding_dim;
    let encoder: Box<dyn TextEncoder> = match a.encoder.as_str() {
        "mock" => Box::new(MockEncoder::new(dim, a.seed)?),
        "remote" => {
            let url = a
                .encoder_url
                .as_deref()
                .ok_or_else(|| CliError::config("--encoder remote needs --encoder-url"))?;
            let key = std::env::var(pestvl_caption::client::ENV_KEY)
                .map_err(|_| CliError::config("MLLM_API_KEY is not set"))?;
            Box::new(RemoteEncoder::new(url, &key, &a.encoder_model, dim, Duration::from_secs(60)))
        }
        other => return Err(CliError::config(format!("unknown encoder {other:?} (mock or remote)"))),
    };
    let records = pestvl_caption::read_jsonl(&a.captions)?;
    let mut store = EmbeddingStore::new(dim)?;
    for r in &records {
        let hash = pestvl_caption::caption_hash(&r.caption);
        if store.get(&hash).is_none() {
            let e = encoder.encode(&r.caption)?;
            store.insert(hash, e.vector.iter().map(|&v| v as f32).collect())?;
        }
    }
    parent_dir(&a.out)?;
    store.save(&a.out)?;
    let text = format!(
        "{} caption(s), {} distinct, {}-dim {} embeddings -> {}",
        records.len(),
        store.len(),
        dim,
        encoder.id(),
        a.out.display()
    );
    let result = json!({
        "output": path_str(&a.out),
        "captions": records.len(),
        "distinct": store.len(),
        "dimension": dim,
        "encoder_id": encoder.id(),
    });
    Ok(Output::ok(result, text))
}

fn split(cfg: &Config, root: Option<&Path>, out: &Path) -> Result<Output> {
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| CliError::config("no dataset root: pass --root or set data.root"))?;
    let m = build_manifest(&root, cfg.data.ratio, cfg.data.split_seed)?;
    parent_dir(out)?;
    m.save(out)?;
    let count = |idx: &[usize], c: usize| idx.iter().filter(|&&i| m.samples[i].class_id == c).count();
    let classes: Vec<Value> = m
        .classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            json!({
                "name": name,
                "train": count(&m.splits.train, c),
                "val": count(&m.splits.val, c),
                "test": count(&m.splits.test, c),
            })
        })
        .collect();
    let text = format!(
        "{} images in {} classes: {}/{}/{} train/val/test -> {}",
        m.samples.len(),
        m.classes.len(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        out.display()
    );
    let result = json!({ "output": path_str(out), "samples": m.samples.len(), "classes": classes });
    Ok(Output::ok(result, text))
}

fn metrics_json(m: &MetricsReport, loss: f64) -> Value {
    json!({
        "accuracy": m.accuracy,
        "precision": m.precision,
        "f1": m.f1,
        "gm": m.gm,
        "loss": loss,
        "confusion": m.confusion,
        "warnings": m.warnings,
    })
}

fn train(cfg: Config, out: &Path, synthetic: Option<usize>, resume: Option<&Path>) -> Result<Output> {
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            // Extending a run is the point of resuming.
            t.model.cfg.optimizer.epochs = cfg.optimizer.epochs;
            t
        }
        None => Trainer::new(&cfg)?,
    };
    let cfg = trainer.config().clone();
    let data = dataset::load(&cfg, synthetic)?;
    let train = data.training(&cfg)?;
    let val = data.subset("val")?;
    trainer.fit(&train, Some(&val), |t| {
        if let Some(r) = t.log.iter().rev().find(|r| r.split == "train") {
            log::info!("epoch {} train loss {:.5} accuracy {:.4}", r.epoch, r.loss, r.accuracy);
        }
    })?;
    std::fs::create_dir_all(out)?;
    let ck_path = out.join("checkpoint.pvlc");
    let csv_path = out.join("metrics.csv");
    trainer.to_checkpoint().save(&ck_path)?;
    trainer.write_metrics_csv(&csv_path)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let ev = trainer.evaluate(&train)?;
    let text = format!(
        "{} epoch(s), {} step(s); train accuracy {:.4}, loss {:.5}; wrote {} and {}",
        trainer.epoch,
        trainer.optim.steps,
        ev.metrics.accuracy,
        ev.loss,
        ck_path.display(),
        csv_path.display()
    );
    let result = json!({
        "epochs": trainer.epoch,
        "steps": trainer.optim.steps,
        "samples": train.len(),
        "checkpoint": path_str(&ck_path),
        "metrics_csv": path_str(&csv_path),
        "train": metrics_json(&ev.metrics, ev.loss),
    });
    Ok(Output::ok(result, text))
}

fn eval(cli_cfg: &Config, a: &crate::EvalArgs) -> Result<Output> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ck.config.clone();
    // The model comes from the checkpoint; the data may be pointed elsewhere.
    if cli_cfg.data.root.is_some() || cli_cfg.data.manifest.is_some() {
        cfg.data = cli_cfg.data.clone();
    }
    let trainer = Trainer::from_checkpoint(&Checkpoint { config: cfg.clone(), ..ck })?;
    let data = dataset::load(&cfg, a.synthetic)?;
    let indices = data.indices(&a.split)?;
    if indices.is_empty() {
        return Err(CliError::data(format!("split {} is empty", a.split)));
    }
    let subset: Vec<Sample> = indices.iter().map(|&i| data.samples[i].clone()).collect();
    let ev = trainer.evaluate(&subset)?;
    let misclassified: Vec<Value> = indices
        .iter()
        .zip(&ev.predictions)
        .filter(|(&i, &p)| data.samples[i].label != p)
        .map(|(&i, &p)| json!({ "image_id": data.image_ids[i], "label": data.samples[i].label, "predicted": p }))
        .collect();
    let result = json!({
        "checkpoint": path_str(&a.checkpoint),
        "split": a.split,
        "samples": subset.len(),
        "classes": data.classes,
        "metrics": metrics_json(&ev.metrics, ev.loss),
        "misclassified": misclassified,
    });
    if let Some(out) = &a.out {
        parent_dir(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&result).expect("json") + "\n")?;
    }
    let m = &ev.metrics;
    let text = format!(
        "{} ({} samples): accuracy {:.4} precision {:.4} f1 {:.4} gm {:.4} loss {:.5}",
        a.split,
        subset.len(),
        m.accuracy,
        m.precision,
        m.f1,
        m.gm,
        ev.loss
    );
    Ok(Output::ok(result, text))
}

fn export_features(a: &crate::ExportArgs) -> Result<Output> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let cfg = trainer.config();
    let side = cfg.model.image_size;
    let image = load_image(&a.input, side)?;
    let energies = saliency_energies(&image, side, cfg.model.feature_side(), &cfg.saliency)?;
    // Stage outputs precede fusion, so the caption does not affect them.
    let sample = Sample {
        image,
        energies,
        caption: Tensor::zeros(&[1, cfg.model.embedding_dim]),
        label: 0,
    };
    let stages: Vec<usize> = if a.stages.is_empty() {
        (0..cfg.model.stages).collect()
    } else {
        a.stages.clone()
    };
    let written: Vec<PathBuf> = export_feature_maps(&trainer.model, &trainer.params, &sample, &stages, &a.out)?;
    let files: Vec<String> = written.iter().map(|p| path_str(p)).collect();
    let text = format!("{} feature map(s) in {}", files.len(), a.out.display());
    Ok(Output::ok(json!({ "stages": stages, "files": files }), text))
}

fn self_test(fault: Option<&str>) -> Result<Output> {
    if let Some(f) = fault {
        if !pestvl_core::selftest::SUITES.contains(&f) {
            return Err(CliError::config(format!("unknown suite {f:?}")));
        }
    }
    let reports = run_self_test(fault)?;
    let passed = reports.iter().all(|r| r.passed);
    let text = reports
        .iter()
        .map(|r| {
            format!(
                "{:<10} {}  max error {:.3e} (tolerance {:.0e})",
                r.name,
                if r.passed { "pass" } else { "FAIL" },
                r.max_error,
                r.tolerance
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Output {
        ok: passed,
        result: json!({ "passed": passed, "suites": reports }),
        text,
    })
}
