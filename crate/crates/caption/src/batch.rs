//! Captioning a list of images with a bounded worker pool.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::client::{CaptionService, Generated};
use crate::error::{CaptionError, Result};
use crate::knowledge::KnowledgeBase;
use crate::record::{CaptionRecord, CaptionWriter};
use crate::template::{build_prompt, CotTemplate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionMode {
    #[default]
    PerImage,
    /// One request per species; every image of the species shares it.
    PerClass,
}

impl CaptionMode {
    /// Value bound to `{image_context}`. Per-class prompts carry none, so
    /// all records of a species share one prompt hash.
    pub fn image_context(self, image_id: &str) -> &str {
        match self {
            CaptionMode::PerImage => image_id,
            CaptionMode::PerClass => "",
        }
    }
}

impl FromStr for CaptionMode {
    type Err = CaptionError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" => Ok(CaptionMode::PerImage),
            "per-class" => Ok(CaptionMode::PerClass),
            _ => Err(CaptionError::Invalid(format!("caption mode {s:?} (expected per-image or per-class)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionJob {
    pub image_path: PathBuf,
    pub image_id: String,
    pub species: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BatchFailure {
    pub image_id: String,
    pub species: String,
    pub category: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BatchReport {
    pub records: Vec<CaptionRecord>,
    pub failures: Vec<BatchFailure>,
    /// Retried attempts summed over all requests.
    pub retries: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub concurrency: usize,
    pub mode: CaptionMode,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            mode: CaptionMode::PerImage,
        }
    }
}

struct Request {
    job: usize,
    prompt: String,
    /// Jobs that receive this caption.
    covers: Vec<usize>,
}

fn plan(jobs: &[CaptionJob], kb: &KnowledgeBase, template: &CotTemplate, mode: CaptionMode) -> Result<Vec<Request>> {
    let mut requests: Vec<Request> = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        if mode == CaptionMode::PerClass {
            if let Some(r) = requests.iter_mut().find(|r| jobs[r.job].species == job.species) {
                r.covers.push(i);
                continue;
            }
        }
        let prompt = build_prompt(kb.get(&job.species)?, template, mode.image_context(&job.image_id))?;
        requests.push(Request {
            job: i,
            prompt,
            covers: vec![i],
        });
    }
    Ok(requests)
}

/// Captions every job. Prompts are built up front, so an unknown species or a
/// bad template fails before any request is sent. Per-request failures are
/// collected and the run goes on, except an authentication failure, which
/// stops dispatch and is returned. Records are written by this thread in job
/// order whatever the completion order was.
pub fn run_batch(
    jobs: &[CaptionJob],
    kb: &KnowledgeBase,
    template: &CotTemplate,
    service: &dyn CaptionService,
    opts: BatchOptions,
    writer: &mut CaptionWriter,
) -> Result<BatchReport> {
    let requests = plan(jobs, kb, template, opts.mode)?;
    let results: Mutex<Vec<Option<Result<Generated>>>> = Mutex::new((0..requests.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = opts.concurrency.clamp(1, requests.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let r = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(r) else { break };
                let job = &jobs[req.job];
                let out = service.caption(&job.image_path, &job.image_id, &job.species, &req.prompt);
                if matches!(out, Err(CaptionError::Auth(_))) {
                    stop.store(true, Ordering::Relaxed);
                }
                results.lock().expect("no panics while held")[r] = Some(out);
            });
        }
    });

    let mut per_job: Vec<Option<std::result::Result<CaptionRecord, (String, String)>>> = vec![None; jobs.len()];
    let mut report = BatchReport::default();
    for (req, out) in requests.iter().zip(results.into_inner().expect("workers joined")) {
        let outcome = match out {
            None => continue,
            Some(Err(e @ CaptionError::Auth(_))) => return Err(e),
            Some(Ok(g)) => {
                report.retries += g.retries.len();
                Ok(g.record)
            }
            Some(Err(e)) => Err((e.category().to_string(), e.to_string())),
        };
        for &j in &req.covers {
            per_job[j] = Some(outcome.clone().map(|mut rec| {
                rec.image_id.clone_from(&jobs[j].image_id);
                rec
            }));
        }
    }
    for (job, outcome) in jobs.iter().zip(per_job) {
        match outcome {
            Some(Ok(rec)) => {
                writer.write(&rec)?;
                report.records.push(rec);
            }
            Some(Err((category, message))) => {
                log::warn!("{}: {message}", job.image_id);
                report.failures.push(BatchFailure {
                    image_id: job.image_id.clone(),
                    species: job.species.clone(),
                    category,
                    message,
                });
            }
            None => unreachable!("every request ran unless auth failed"),
        }
    }
    Ok(report)
}
