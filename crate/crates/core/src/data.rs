//! Dataset manifests, image loading and the synthetic texture dataset.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::spectral::{rgb_to_gray, GrayImage};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSample {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_hash: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<ManifestSample>,
    pub splits: Splits,
}

/// Splits `n` items by `ratio` with largest-remainder rounding; remainders
/// that tie go to the earlier split.
pub fn split_counts(n: usize, ratio: [usize; 3]) -> [usize; 3] {
    let total: usize = ratio.iter().sum();
    let mut counts = [0usize; 3];
    let mut rems = [0usize; 3];
    for i in 0..3 {
        counts[i] = n * ratio[i] / total;
        rems[i] = n * ratio[i] % total;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scans `root/<class>/<image>` and splits every class by `ratio`.
pub fn build_manifest(root: &Path, ratio: [usize; 3], seed: u64) -> Result<DatasetManifest> {
    if ratio.iter().sum::<usize>() == 0 {
        return Err(CoreError::Config("split ratio must not be all zero".into()));
    }
    let mut classes: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| CoreError::Data(format!("{}: {e}", root.display())))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            classes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(CoreError::Data(format!("no class directories under {}", root.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut splits = Splits::default();
    for (class_id, class) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image(p))
            .map(|p| PathBuf::from(class).join(p.file_name().expect("file name")))
            .collect();
        if files.is_empty() {
            return Err(CoreError::Data(format!("class directory {class:?} contains no images")));
        }
        files.sort();
        let base = samples.len();
        let mut idx: Vec<usize> = (base..base + files.len()).collect();
        for path in files {
            samples.push(ManifestSample {
                path,
                class_id,
                caption_hash: None,
            });
        }
        idx.shuffle(&mut rng);
        let [a, b, _] = split_counts(idx.len(), ratio);
        splits.train.extend_from_slice(&idx[..a]);
        splits.val.extend_from_slice(&idx[a..a + b]);
        splits.test.extend_from_slice(&idx[a + b..]);
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        samples,
        splits,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        let mut seen = BTreeSet::new();
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= n {
                return Err(CoreError::Data(format!("split index {i} out of {n} samples")));
            }
            if !seen.insert(i) {
                return Err(CoreError::Data(format!("sample {i} appears in more than one split")));
            }
        }
        if let Some(s) = self.samples.iter().find(|s| s.class_id >= self.classes.len()) {
            return Err(CoreError::Data(format!(
                "{} has class id {} but only {} classes exist",
                s.path.display(),
                s.class_id,
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| CoreError::format("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.samples[index].path)
    }
}

/// Reads an image, resizes it to `side x side` and returns `[side * side, 3]`
/// RGB values in `[0, 1]`.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| CoreError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize != side || rgb.height() as usize != side {
        image::imageops::resize(&rgb, side as u32, side as u32, image::imageops::FilterType::Triangle)
    } else {
        rgb
    };
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::matrix(side * side, 3, data)
}

/// Reads an image at its own resolution as luminance in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| CoreError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let data: Vec<f64> = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    rgb_to_gray(rgb.height() as usize, rgb.width() as usize, &data)
}

/// Mirrors a `[side * side, 3]` image left to right.
pub fn flip_horizontal(image: &Tensor, side: usize) -> Tensor {
    Tensor::from_fn(side * side, 3, |p, c| {
        let (y, x) = (p / side, p % side);
        image.at(y * side + (side - 1 - x), c)
    })
}

pub fn save_rgb_png(image: &Tensor, side: usize, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(side as u32, side as u32, bytes)
        .ok_or_else(|| CoreError::shape("image buffer size"))?;
    buf.save(path).map_err(|source| CoreError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Oriented, tinted gratings with a bright class-placed blob and per-image
/// noise. Returns `(image, label)` pairs ordered by class.
pub fn synthetic_dataset(classes: usize, per_class: usize, side: usize, seed: u64) -> Vec<(Tensor, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = PI * c as f64 / classes as f64;
        let freq = 2.0 + (c % 3) as f64;
        let hue = 2.0 * PI * c as f64 / classes as f64;
        let tint = [
            0.5 + 0.4 * hue.cos(),
            0.5 + 0.4 * (hue + 2.0 * PI / 3.0).cos(),
            0.5 + 0.4 * (hue + 4.0 * PI / 3.0).cos(),
        ];
        let quadrant = c % 4;
        for _ in 0..per_class {
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let jitter: f64 = rng.random_range(-0.15..0.15);
            let (cy, cx) = (
                (quadrant / 2) as f64 * 0.5 + 0.25 + rng.random_range(-0.05..0.05),
                (quadrant % 2) as f64 * 0.5 + 0.25 + rng.random_range(-0.05..0.05),
            );
            let mut data = Vec::with_capacity(side * side * 3);
            for y in 0..side {
                for x in 0..side {
                    let (u, v) = (y as f64 / side as f64, x as f64 / side as f64);
                    let t = (u * (angle + jitter).sin() + v * (angle + jitter).cos()) * freq * 2.0 * PI + phase;
                    let wave = 0.5 + 0.5 * t.sin();
                    let d2 = (u - cy).powi(2) + (v - cx).powi(2);
                    let blob = (-d2 / 0.01).exp();
                    for ch in 0..3 {
                        let noise: f64 = rng.random_range(-0.05..0.05);
                        let value = 0.6 * wave * tint[ch] + 0.4 * blob + noise;
                        data.push(value.clamp(0.0, 1.0));
                    }
                }
            }
            out.push((Tensor::matrix(side * side, 3, data).expect("shape"), c));
        }
    }
    out
}

/// Writes [`synthetic_dataset`] as `root/class_XX/img_YY.png`.
pub fn write_synthetic_tree(root: &Path, classes: usize, per_class: usize, side: usize, seed: u64) -> Result<()> {
    for (i, (img, label)) in synthetic_dataset(classes, per_class, side, seed).iter().enumerate() {
        let dir = root.join(format!("class_{label:02}"));
        std::fs::create_dir_all(&dir)?;
        save_rgb_png(img, side, &dir.join(format!("img_{:02}.png", i % per_class)))?;
    }
    Ok(())
}

/// Deterministic unit vectors, one per class; a stand-in for caption
/// embeddings in tests.
pub fn class_embeddings(classes: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Tensor::matrix(1, dim, v.iter().map(|x| x / n).collect()).expect("shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(split_counts(10, [7, 1, 2]), [7, 1, 2]);
        // 6.3, 0.9, 1.8 -> floors 6, 0, 1; remainders favour val then test
        assert_eq!(split_counts(9, [7, 1, 2]), [6, 1, 2]);
        assert_eq!(split_counts(1, [7, 1, 2]), [1, 0, 0]);
        assert_eq!(split_counts(0, [7, 1, 2]), [0, 0, 0]);
        for n in 0..50 {
            assert_eq!(split_counts(n, [7, 1, 2]).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = synthetic_dataset(3, 2, 16, 9);
        let b = synthetic_dataset(3, 2, 16, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|(t, _)| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a[0].0, a[2].0);
    }

    #[test]
    fn flip_twice_is_identity() {
        let (img, _) = &synthetic_dataset(1, 1, 8, 0)[0];
        assert_eq!(&flip_horizontal(&flip_horizontal(img, 8), 8), img);
    }

    #[test]
    fn embeddings_are_unit() {
        for e in class_embeddings(4, 16, 1) {
            let n: f64 = e.data().iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
