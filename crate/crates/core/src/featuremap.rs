//! PNG renderings: saliency maps, feature heat maps, partition overlays.

use std::path::{Path, PathBuf};

use image::{GrayImage as Gray8, Rgb, RgbImage};

use crate::autograd::Graph;
use crate::error::{CoreError, Result};
use crate::model::{Model, Noise, Sample, Trace};
use crate::params::{Ctx, ParamStore};
use crate::spectral::{min_max_normalize, Plane};
use crate::tensor::Tensor;

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> CoreError + '_ {
    move |source| CoreError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale PNG of a plane with values in `[0, 1]`.
pub fn save_gray_png(plane: &Plane, path: &Path) -> Result<()> {
    let bytes = plane.data.iter().map(|&v| to_byte(v)).collect();
    let img = Gray8::from_raw(plane.width as u32, plane.height as u32, bytes)
        .ok_or_else(|| CoreError::shape("plane buffer size"))?;
    img.save(path).map_err(image_err(path))
}

/// Blue-cyan-yellow-red ramp for `t` in `[0, 1]`.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [0.8, 0.0, 0.0]];
    let x = t * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    [0, 1, 2].map(|c| to_byte(a[c] + (b[c] - a[c]) * f))
}

/// Channel mean of a `[h * w, c]` feature, min-max normalized.
pub fn channel_mean_map(feature: &Tensor, height: usize, width: usize) -> Result<Plane> {
    if feature.rows() != height * width {
        return Err(CoreError::shape(format!(
            "{} tokens for a {height}x{width} map",
            feature.rows()
        )));
    }
    let c = feature.cols().max(1) as f64;
    let plane = Plane::from_fn(height, width, |y, x| feature.row(y * width + x).iter().sum::<f64>() / c);
    Ok(min_max_normalize(&plane))
}

pub fn save_heat_png(plane: &Plane, path: &Path) -> Result<()> {
    let mut img = RgbImage::new(plane.width as u32, plane.height as u32);
    for y in 0..plane.height {
        for x in 0..plane.width {
            img.put_pixel(x as u32, y as u32, Rgb(heat_color(plane.at(y, x))));
        }
    }
    img.save(path).map_err(image_err(path))
}

/// Normalized channel-mean maps of the requested stage outputs.
pub fn stage_maps(model: &Model, params: &ParamStore, sample: &Sample, stages: &[usize]) -> Result<Vec<Plane>> {
    let n = model.cfg.model.stages;
    if let Some(&bad) = stages.iter().find(|&&s| s >= n) {
        return Err(CoreError::Domain(format!("stage {bad} out of range (model has {n})")));
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, params);
    let mut trace = Trace::default();
    model.forward(&mut ctx, sample, Noise::Zero, &mut trace)?;
    let side = model.feature_side();
    stages
        .iter()
        .map(|&s| channel_mean_map(ctx.g.value(trace.stages[s]), side, side))
        .collect()
}

/// Writes `stage_<i>.png` heat maps into `dir`.
pub fn export_feature_maps(
    model: &Model,
    params: &ParamStore,
    sample: &Sample,
    stages: &[usize],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = stage_maps(model, params, sample, stages)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (s, map) in stages.iter().zip(&maps) {
        let path = dir.join(format!("stage_{s}.png"));
        save_heat_png(map, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// RGB image (`[side * side, 3]`) with coarse window borders in white, the
/// selected windows tinted and their fine borders in yellow. `scale` enlarges
/// each pixel.
pub fn partition_overlay(image: &Tensor, side: usize, selected: &[usize], scale: usize) -> Result<RgbImage> {
    if image.shape() != [side * side, 3] || side % 4 != 0 {
        return Err(CoreError::shape(format!("overlay needs a [{0}*{0}, 3] image with side divisible by 4", side)));
    }
    let n = side * scale;
    let half = n / 2;
    let quarter = n / 4;
    let mut img = RgbImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let p = (y / scale) * side + x / scale;
            let win = (y / half) * 2 + x / half;
            let mut rgb = [image.at(p, 0), image.at(p, 1), image.at(p, 2)];
            let chosen = selected.contains(&win);
            if chosen {
                rgb = [0.6 * rgb[0] + 0.4, 0.6 * rgb[1], 0.6 * rgb[2]];
            }
            let mut px = rgb.map(to_byte);
            if chosen && (y % quarter == 0 || x % quarter == 0) {
                px = [255, 255, 0];
            }
            if y == half || x == half || y == 0 || x == 0 || y == n - 1 || x == n - 1 {
                px = [255, 255, 255];
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}
