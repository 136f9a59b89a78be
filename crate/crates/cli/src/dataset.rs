//! Turning a config into model samples: images, splits and caption embeddings.

use std::collections::HashMap;
use std::path::Path;

use pestvl_caption::{read_jsonl, EmbeddingStore, FileEncoder, MockEncoder, TextEncoder};
use pestvl_core::config::{CaptionMode, Config};
use pestvl_core::data::{build_manifest, flip_horizontal, load_image, synthetic_dataset, DatasetManifest, Splits};
use pestvl_core::model::Sample;
use pestvl_core::train::build_samples;
use pestvl_core::Tensor;

use crate::error::{CliError, Result};

/// Seed of the mock text encoder. Fixed so embeddings do not move with the
/// training seed.
pub const MOCK_SEED: u64 = 0;

pub struct Dataset {
    pub classes: Vec<String>,
    pub image_ids: Vec<String>,
    pub samples: Vec<Sample>,
    pub splits: Splits,
}

impl Dataset {
    pub fn indices(&self, which: &str) -> Result<Vec<usize>> {
        match which {
            "train" => Ok(self.splits.train.clone()),
            "val" => Ok(self.splits.val.clone()),
            "test" => Ok(self.splits.test.clone()),
            "all" => Ok((0..self.samples.len()).collect()),
            other => Err(CliError::config(format!("unknown split {other:?} (train, val, test or all)"))),
        }
    }

    pub fn subset(&self, which: &str) -> Result<Vec<Sample>> {
        Ok(self.indices(which)?.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Training samples, with mirrored copies when `data.horizontal_flip` is set.
    pub fn training(&self, cfg: &Config) -> Result<Vec<Sample>> {
        let mut train = self.subset("train")?;
        if cfg.data.horizontal_flip {
            let side = cfg.model.image_size;
            let flipped: Vec<(Tensor, usize)> =
                train.iter().map(|s| (flip_horizontal(&s.image, side), s.label)).collect();
            let captions = train.iter().map(|s| s.caption.clone()).collect();
            train.extend(build_samples(cfg, flipped, captions)?);
        }
        Ok(train)
    }
}

pub fn manifest_from_config(cfg: &Config) -> Result<DatasetManifest> {
    if let Some(m) = &cfg.data.manifest {
        return Ok(DatasetManifest::load(m)?);
    }
    if let Some(root) = &cfg.data.root {
        return Ok(build_manifest(root, cfg.data.ratio, cfg.data.split_seed)?);
    }
    Err(CliError::config("no data source: set data.root or data.manifest (or pass --synthetic)"))
}

pub fn image_id(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

fn encoder(cfg: &Config) -> Result<Box<dyn TextEncoder>> {
    let dim = cfg.model.embedding_dim;
    match &cfg.data.embeddings {
        Some(path) => {
            let store = EmbeddingStore::load(path)?;
            if store.dimension() != dim {
                return Err(CliError::config(format!(
                    "{} holds {}-dim embeddings but model.embedding_dim is {dim}",
                    path.display(),
                    store.dimension()
                )));
            }
            Ok(Box::new(FileEncoder::new(store, format!("file:{}", path.display()))))
        }
        None => Ok(Box::new(MockEncoder::new(dim, MOCK_SEED)?)),
    }
}

/// Caption text per sample. Without a caption file the class name stands in,
/// which gives one embedding per class.
fn caption_texts(cfg: &Config, ids: &[String], species: &[&str]) -> Result<Vec<String>> {
    let Some(path) = &cfg.data.caption_file else {
        return Ok(species.iter().map(|s| s.to_string()).collect());
    };
    let records = read_jsonl(path)?;
    let mut by_image = HashMap::new();
    let mut by_species = HashMap::new();
    for r in &records {
        by_image.entry(r.image_id.as_str()).or_insert(r.caption.as_str());
        by_species.entry(r.species_label.as_str()).or_insert(r.caption.as_str());
    }
    ids.iter()
        .zip(species)
        .map(|(id, sp)| {
            let hit = match cfg.data.captions {
                CaptionMode::PerImage => by_image.get(id.as_str()),
                CaptionMode::PerClass => by_species.get(sp),
            };
            hit.map(|c| c.to_string())
                .ok_or_else(|| CliError::data(format!("{}: no caption for {id} ({sp})", path.display())))
        })
        .collect()
}

fn embed(cfg: &Config, texts: &[String]) -> Result<Vec<Tensor>> {
    let enc = encoder(cfg)?;
    texts
        .iter()
        .map(|t| {
            let e = enc.encode(t)?;
            Ok(Tensor::matrix(1, e.dimension, e.vector)?)
        })
        .collect()
}

/// Loads the configured dataset, or `per_class` synthetic images per class
/// (all of them in the train and test splits).
pub fn load(cfg: &Config, synthetic: Option<usize>) -> Result<Dataset> {
    let side = cfg.model.image_size;
    let (classes, ids, images, splits) = match synthetic {
        Some(n) => {
            if n == 0 {
                return Err(CliError::config("--synthetic needs at least one image per class"));
            }
            let images = synthetic_dataset(cfg.model.classes, n, side, cfg.data.split_seed);
            let classes: Vec<String> = (0..cfg.model.classes).map(|c| format!("class_{c:02}")).collect();
            let ids: Vec<String> = images
                .iter()
                .enumerate()
                .map(|(i, (_, l))| format!("{}/img_{:02}.png", classes[*l], i % n))
                .collect();
            let all: Vec<usize> = (0..images.len()).collect();
            let splits = Splits {
                train: all.clone(),
                val: Vec::new(),
                test: all,
            };
            (classes, ids, images, splits)
        }
        None => {
            let m = manifest_from_config(cfg)?;
            if m.classes.len() != cfg.model.classes {
                return Err(CliError::config(format!(
                    "dataset has {} classes but model.classes is {}",
                    m.classes.len(),
                    cfg.model.classes
                )));
            }
            let mut images = Vec::with_capacity(m.samples.len());
            for (i, s) in m.samples.iter().enumerate() {
                images.push((load_image(&m.image_path(i), side)?, s.class_id));
            }
            let ids: Vec<String> = m.samples.iter().map(|s| image_id(&s.path)).collect();
            (m.classes, ids, images, m.splits)
        }
    };
    let species: Vec<&str> = images.iter().map(|(_, l)| classes[*l].as_str()).collect();
    let captions = embed(cfg, &caption_texts(cfg, &ids, &species)?)?;
    let samples = build_samples(cfg, images, captions)?;
    Ok(Dataset {
        classes,
        image_ids: ids,
        samples,
        splits,
    })
}
