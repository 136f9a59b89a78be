//! Spectral-residual saliency.
//!
//! All arithmetic here is `f64` regardless of the model's storage precision.
//! The transform is unitary: both directions scale by `1 / sqrt(H * W)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A real `height × width` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Single-channel image with finite intensities (nominally in `[0, 1]`).
pub type GrayImage = Plane;

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::Domain(format!("empty plane {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(CoreError::shape(format!(
                "{height}x{width} plane needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn same_dims(&self, other: &Plane, what: &str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(CoreError::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Domain(format!("{what}: non-finite value at index {i}")));
        }
        Ok(())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` of an interleaved RGB buffer.
pub fn rgb_to_gray(height: usize, width: usize, rgb: &[f64]) -> Result<GrayImage> {
    if rgb.len() != height * width * 3 {
        return Err(CoreError::shape(format!(
            "rgb buffer of {} values for {height}x{width}",
            rgb.len()
        )));
    }
    let data = rgb
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Plane::new(height, width, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if n == 0 || self.re.len() != n || self.im.len() != n {
            return Err(CoreError::shape(format!(
                "spectrum {}x{} with {} / {} values",
                self.height,
                self.width,
                self.re.len(),
                self.im.len()
            )));
        }
        if self.re.iter().chain(&self.im).any(|v| !v.is_finite()) {
            return Err(CoreError::Domain("spectrum has non-finite entries".into()));
        }
        Ok(())
    }

    /// Real part as a plane.
    pub fn real(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.re.clone(),
        }
    }
}

fn fft2(height: usize, width: usize, buf: &mut [Complex<f64>], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
    let norm = 1.0 / ((height * width) as f64).sqrt();
    buf.iter_mut().for_each(|c| *c *= norm);
}

/// Unitary 2-D DFT of a real image.
pub fn dft2(img: &GrayImage) -> Result<ComplexSpectrum> {
    img.ensure_finite("dft2 input")?;
    let mut buf: Vec<Complex<f64>> = img.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(img.height, img.width, &mut buf, false);
    Ok(ComplexSpectrum {
        height: img.height,
        width: img.width,
        re: buf.iter().map(|c| c.re).collect(),
        im: buf.iter().map(|c| c.im).collect(),
    })
}

/// Inverse of [`dft2`] under the same normalization; the result is complex.
pub fn idft2(spec: &ComplexSpectrum) -> Result<ComplexSpectrum> {
    spec.validate()?;
    let mut buf: Vec<Complex<f64>> = spec
        .re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();
    fft2(spec.height, spec.width, &mut buf, true);
    Ok(ComplexSpectrum {
        height: spec.height,
        width: spec.width,
        re: buf.iter().map(|c| c.re).collect(),
        im: buf.iter().map(|c| c.im).collect(),
    })
}

/// Magnitude and phase in `(-π, π]`; zero-magnitude cells get phase 0.
pub fn amplitude_phase(spec: &ComplexSpectrum) -> (Plane, Plane) {
    let mut amp = Vec::with_capacity(spec.re.len());
    let mut phase = Vec::with_capacity(spec.re.len());
    for (&r, &i) in spec.re.iter().zip(&spec.im) {
        amp.push(r.hypot(i));
        let p = if r == 0.0 && i == 0.0 { 0.0 } else { i.atan2(r) };
        phase.push(if p <= -PI { PI } else { p });
    }
    (
        Plane {
            height: spec.height,
            width: spec.width,
            data: amp,
        },
        Plane {
            height: spec.height,
            width: spec.width,
            data: phase,
        },
    )
}

/// Elementwise `ln(A + ε)`.
pub fn log_amplitude(amplitude: &Plane, epsilon: f64) -> Result<Plane> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(CoreError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if amplitude.data.iter().any(|&a| a < 0.0 || !a.is_finite()) {
        return Err(CoreError::Domain("amplitude must be finite and nonnegative".into()));
    }
    Ok(Plane {
        height: amplitude.height,
        width: amplitude.width,
        data: amplitude.data.iter().map(|a| (a + epsilon).ln()).collect(),
    })
}

/// `n × n` box mean with replicate (edge-clamp) padding.
pub fn mean_filter(plane: &Plane, n: usize) -> Result<Plane> {
    if n == 0 || n % 2 == 0 {
        return Err(CoreError::Domain(format!("mean filter size must be odd and positive, got {n}")));
    }
    if n > plane.height.min(plane.width) {
        return Err(CoreError::Domain(format!(
            "mean filter size {n} exceeds the {}x{} plane",
            plane.height, plane.width
        )));
    }
    let r = (n / 2) as isize;
    let (h, w) = (plane.height as isize, plane.width as isize);
    // Clamped indexing is separable: filter rows, then columns.
    let mut tmp = vec![0.0; plane.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let xx = (x + d).clamp(0, w - 1);
                acc += plane.data[(y * w + xx) as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; plane.data.len()];
    let scale = 1.0 / (n * n) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let yy = (y + d).clamp(0, h - 1);
                acc += tmp[(yy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc * scale;
        }
    }
    Ok(Plane {
        height: plane.height,
        width: plane.width,
        data: out,
    })
}

/// Elementwise `L - L_avg`.
pub fn spectral_residual(log_amp: &Plane, avg_log_amp: &Plane) -> Result<Plane> {
    log_amp.same_dims(avg_log_amp, "spectral residual")?;
    Ok(Plane {
        height: log_amp.height,
        width: log_amp.width,
        data: log_amp
            .data
            .iter()
            .zip(&avg_log_amp.data)
            .map(|(a, b)| a - b)
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyParams {
    pub epsilon: f64,
    pub kernel: usize,
    /// Gaussian smoothing of the squared-magnitude map; 0 disables it.
    pub sigma: f64,
    /// Reconstruct with `exp(R)` instead of `R` as the amplitude.
    pub exponentiate: bool,
}

impl Default for SaliencyParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            kernel: 3,
            sigma: 0.0,
            exponentiate: false,
        }
    }
}

/// Intermediate planes of the residual computation.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub amplitude: Plane,
    pub phase: Plane,
    pub log_amplitude: Plane,
    pub avg_log_amplitude: Plane,
    pub residual: Plane,
    pub epsilon: f64,
    pub kernel_size: usize,
}

pub fn spectral_analysis(img: &GrayImage, epsilon: f64, kernel: usize) -> Result<SpectralData> {
    let spec = dft2(img)?;
    let (amplitude, phase) = amplitude_phase(&spec);
    let log_amp = log_amplitude(&amplitude, epsilon)?;
    let avg = mean_filter(&log_amp, kernel)?;
    let residual = spectral_residual(&log_amp, &avg)?;
    Ok(SpectralData {
        amplitude,
        phase,
        log_amplitude: log_amp,
        avg_log_amplitude: avg,
        residual,
        epsilon,
        kernel_size: kernel,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub map: Plane,
    pub normalized: bool,
}

/// Squared magnitude of the field reconstructed from the spectral residual
/// (as amplitude) and the original phase, before smoothing/normalization.
pub fn saliency_energy(img: &GrayImage, params: &SaliencyParams) -> Result<Plane> {
    let sd = spectral_analysis(img, params.epsilon, params.kernel)?;
    let mut spec = ComplexSpectrum::zeros(img.height, img.width);
    for i in 0..spec.re.len() {
        let r = sd.residual.data[i];
        let amp = if params.exponentiate { r.exp() } else { r };
        let ph = sd.phase.data[i];
        spec.re[i] = amp * ph.cos();
        spec.im[i] = amp * ph.sin();
    }
    let field = idft2(&spec)?;
    Ok(Plane {
        height: img.height,
        width: img.width,
        data: field
            .re
            .iter()
            .zip(&field.im)
            .map(|(r, i)| r * r + i * i)
            .collect(),
    })
}

/// Relative magnitude below which a saliency energy map is treated as zero.
pub const ENERGY_FLOOR: f64 = 1e-24;

/// Full saliency pipeline, min-max normalized to `[0, 1]`.
pub fn saliency_map(img: &GrayImage, params: &SaliencyParams) -> Result<SaliencyMap> {
    let mut energy = saliency_energy(img, params)?;
    // A residual that is zero up to rounding (e.g. a flat spectrum) carries no
    // saliency; without this floor, normalization would amplify the rounding.
    let scale = img.data.iter().map(|v| v * v).sum::<f64>() / img.data.len() as f64;
    if energy.max() <= ENERGY_FLOOR * scale.max(1.0) {
        energy.data.iter_mut().for_each(|v| *v = 0.0);
    }
    if params.sigma > 0.0 {
        energy = gaussian_blur(&energy, params.sigma);
    }
    Ok(SaliencyMap {
        map: min_max_normalize(&energy),
        normalized: true,
    })
}

/// Rescales to `[0, 1]`; constant planes become all-zero.
pub fn min_max_normalize(plane: &Plane) -> Plane {
    let (lo, hi) = (plane.min(), plane.max());
    let span = hi - lo;
    let data = if span > 0.0 {
        plane.data.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; plane.data.len()]
    };
    Plane {
        height: plane.height,
        width: plane.width,
        data,
    }
}

/// Separable Gaussian blur with radius `ceil(3σ)` and replicate padding.
pub fn gaussian_blur(plane: &Plane, sigma: f64) -> Plane {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (h, w) = (plane.height as isize, plane.width as isize);
    let mut tmp = vec![0.0; plane.data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = (-radius..=radius)
                .map(|d| weights[(d + radius) as usize] * plane.data[(y * w + (x + d).clamp(0, w - 1)) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.data.len()];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = (-radius..=radius)
                .map(|d| weights[(d + radius) as usize] * tmp[((y + d).clamp(0, h - 1) * w + x) as usize])
                .sum();
        }
    }
    Plane {
        height: plane.height,
        width: plane.width,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse(h: usize, w: usize) -> Plane {
        let mut p = Plane::zeros(h, w);
        p.data[0] = 1.0;
        p
    }

    #[test]
    fn single_pixel_spectrum() {
        let s = dft2(&Plane::new(1, 1, vec![0.7]).unwrap()).unwrap();
        assert!((s.re[0] - 0.7).abs() < 1e-15);
        assert_eq!(s.im[0], 0.0);
    }

    #[test]
    fn impulse_has_flat_amplitude() {
        let (amp, _) = amplitude_phase(&dft2(&impulse(4, 6)).unwrap());
        let expected = 1.0 / 24f64.sqrt();
        for a in amp.data {
            assert!((a - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = Plane::new(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(dft2(&p), Err(CoreError::Domain(_))));
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let f = idft2(&ComplexSpectrum::zeros(3, 5)).unwrap();
        assert!(f.re.iter().chain(&f.im).all(|&v| v == 0.0));
    }

    #[test]
    fn three_four_five() {
        let spec = ComplexSpectrum {
            height: 1,
            width: 2,
            re: vec![3.0, 0.0],
            im: vec![4.0, 0.0],
        };
        let (a, p) = amplitude_phase(&spec);
        assert_eq!(a.data, vec![5.0, 0.0]);
        assert_eq!(p.data, vec![4f64.atan2(3.0), 0.0]);
    }

    #[test]
    fn log_amplitude_values() {
        let a = Plane::new(1, 2, vec![0.0, 1.0]).unwrap();
        let l = log_amplitude(&a, 1e-6).unwrap();
        assert!((l.data[0] - (-13.815510557964274)).abs() < 1e-12);
        assert!((l.data[1] - 9.999995e-7).abs() < 1e-12);
        assert!(log_amplitude(&a, 0.0).is_err());
        assert!(log_amplitude(&a, -1.0).is_err());
    }

    #[test]
    fn mean_filter_cases() {
        let p = Plane::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let m = mean_filter(&p, 3).unwrap();
        assert!((m.at(1, 1) - 5.0).abs() < 1e-15);
        let c = Plane::new(4, 5, vec![2.5; 20]).unwrap();
        for n in [1, 3] {
            assert_eq!(mean_filter(&c, n).unwrap().data, c.data);
        }
        assert!(mean_filter(&p, 2).is_err());
        assert!(mean_filter(&p, 0).is_err());
        assert!(mean_filter(&p, 5).is_err());
    }

    #[test]
    fn residual_cases() {
        let a = Plane::new(1, 1, vec![2.0]).unwrap();
        let b = Plane::new(1, 1, vec![0.5]).unwrap();
        assert_eq!(spectral_residual(&a, &b).unwrap().data, vec![1.5]);
        assert_eq!(spectral_residual(&a, &a).unwrap().data, vec![0.0]);
        assert!(spectral_residual(&a, &Plane::zeros(1, 2)).is_err());
    }

    #[test]
    fn impulse_saliency_is_zero() {
        let params = SaliencyParams::default();
        let e = saliency_energy(&impulse(8, 8), &params).unwrap();
        assert!(e.data.iter().all(|v| v.abs() < 1e-12));
        let s = saliency_map(&impulse(8, 8), &params).unwrap();
        assert!(s.map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_map_attains_one() {
        let img = Plane::from_fn(16, 16, |y, x| if (4..8).contains(&y) && (9..12).contains(&x) { 1.0 } else { 0.1 });
        for exponentiate in [false, true] {
            for sigma in [0.0, 1.0] {
                let params = SaliencyParams {
                    exponentiate,
                    sigma,
                    ..Default::default()
                };
                let s = saliency_map(&img, &params).unwrap();
                assert!(s.map.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert_eq!(s.map.max(), 1.0);
            }
        }
    }

    #[test]
    fn luminance_weights() {
        let g = rgb_to_gray(1, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((g.data[0] - 0.299).abs() < 1e-15);
        assert!((g.data[1] - 1.0).abs() < 1e-12);
    }
}
