//! Slow reference implementations and a finite-difference gradient checker.
//!
//! Everything here favours obviousness over speed: direct sums, explicit
//! loops, no shared code with the fast paths it is used to test.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::params::{Ctx, ParamStore};
use crate::spectral::{ComplexSpectrum, GrayImage, Plane, SaliencyParams};
use crate::tensor::Tensor;
use crate::wkv::Segment;

fn direct_dft(h: usize, w: usize, re: &[f64], im: &[f64], sign: f64) -> ComplexSpectrum {
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut out = ComplexSpectrum::zeros(h, w);
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let theta = sign * 2.0 * PI * ((y * u) as f64 / h as f64 + (x * v) as f64 / w as f64);
                    let (s, c) = theta.sin_cos();
                    let (a, b) = (re[y * w + x], im[y * w + x]);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            out.re[u * w + v] = sr * norm;
            out.im[u * w + v] = si * norm;
        }
    }
    out
}

/// Quadruple-loop unitary forward DFT.
pub fn naive_dft2(img: &GrayImage) -> ComplexSpectrum {
    let zeros = vec![0.0; img.data.len()];
    direct_dft(img.height, img.width, &img.data, &zeros, -1.0)
}

/// Quadruple-loop unitary inverse DFT.
pub fn naive_idft2(spec: &ComplexSpectrum) -> ComplexSpectrum {
    direct_dft(spec.height, spec.width, &spec.re, &spec.im, 1.0)
}

/// Windowed mean with edge clamping, one cell at a time.
pub fn naive_mean_filter(plane: &Plane, n: usize) -> Plane {
    let r = (n / 2) as isize;
    let (h, w) = (plane.height as isize, plane.width as isize);
    Plane::from_fn(plane.height, plane.width, |y, x| {
        let mut sum = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, h - 1);
                let xx = (x as isize + dx).clamp(0, w - 1);
                sum += plane.at(yy as usize, xx as usize);
            }
        }
        sum / (n * n) as f64
    })
}

/// Saliency energy built step by step from the direct oracles.
pub fn naive_saliency_energy(img: &GrayImage, params: &SaliencyParams) -> Plane {
    let spec = naive_dft2(img);
    let n = spec.re.len();
    let amp: Vec<f64> = (0..n).map(|i| spec.re[i].hypot(spec.im[i])).collect();
    let phase: Vec<f64> = (0..n)
        .map(|i| if amp[i] == 0.0 { 0.0 } else { spec.im[i].atan2(spec.re[i]) })
        .collect();
    let log_amp = Plane::new(img.height, img.width, amp.iter().map(|a| (a + params.epsilon).ln()).collect())
        .expect("shape");
    let avg = naive_mean_filter(&log_amp, params.kernel);
    let mut rec = ComplexSpectrum::zeros(img.height, img.width);
    for i in 0..n {
        let r = log_amp.data[i] - avg.data[i];
        let a = if params.exponentiate { r.exp() } else { r };
        rec.re[i] = a * phase[i].cos();
        rec.im[i] = a * phase[i].sin();
    }
    let field = naive_idft2(&rec);
    let energy = (0..n).map(|i| field.re[i] * field.re[i] + field.im[i] * field.im[i]).collect();
    Plane::new(img.height, img.width, energy).expect("shape")
}

/// Min-max normalized [`naive_saliency_energy`].
pub fn naive_saliency_map(img: &GrayImage, params: &SaliencyParams) -> Plane {
    let e = naive_saliency_energy(img, params);
    let lo = e.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = e.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = e
        .data
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect();
    Plane::new(e.height, e.width, data).expect("shape")
}

/// Double-loop Ga-WKV straight from the definition.
pub fn naive_wkv(k: &Tensor, v: &Tensor, w: &[f64], u: &[f64], segments: &[Segment]) -> Tensor {
    let c = k.cols();
    let mut out = Tensor::zeros(&[k.rows(), c]);
    for seg in segments {
        let len = seg.len as f64;
        for ch in 0..c {
            for t in 0..seg.len {
                let (mut num, mut den) = (0.0, 0.0);
                let mut weights = Vec::with_capacity(seg.len);
                for i in 0..seg.len {
                    let z = if i == t {
                        u[ch] + k.at(seg.start + t, ch)
                    } else {
                        let dist = (t as f64 - i as f64).abs();
                        -(dist - 1.0) / len * w[ch] + k.at(seg.start + i, ch)
                    };
                    weights.push(z);
                }
                let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for (i, z) in weights.iter().enumerate() {
                    let e = (z - m).exp();
                    num += e * v.at(seg.start + i, ch);
                    den += e;
                }
                out.set(seg.start + t, ch, num / den);
            }
        }
    }
    out
}

/// `softmax(q kᵀ / √d) v` with explicit loops; `d` is the key width.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let d = q.cols() as f64;
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    for i in 0..q.rows() {
        let logits: Vec<f64> = (0..k.rows())
            .map(|j| (0..q.cols()).map(|a| q.at(i, a) * k.at(j, a)).sum::<f64>() / d.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..v.cols() {
            let s: f64 = (0..k.rows()).map(|j| e[j] / z * v.at(j, c)).sum();
            out.set(i, c, s);
        }
    }
    out
}

/// Sliding-window convolution over a `[h * w, cin]` token matrix with weights
/// laid out `[cout, cin * k * k]`.
pub fn naive_conv2d(x: &Tensor, weight: &Tensor, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Tensor {
    let cin = x.cols();
    let cout = weight.rows();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Tensor::from_fn(oh * ow, cout, |o, co| {
        let (oy, ox) = (o / ow, o % ow);
        let mut s = 0.0;
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let xx = (ox * stride + kx) as isize - pad as isize;
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                        s += weight.at(co, (ci * k + ky) * k + kx) * x.at(y as usize * w + xx as usize, ci);
                    }
                }
            }
        }
        s
    })
}

/// Per-channel `k x k` zero-padded convolution, kernel laid out `[c, k * k]`.
pub fn naive_depthwise(x: &Tensor, kernel: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.cols();
    let k = (kernel.cols() as f64).sqrt() as usize;
    let r = (k / 2) as isize;
    Tensor::from_fn(h * w, c, |p, ch| {
        let (y, x0) = ((p / w) as isize, (p % w) as isize);
        let mut s = 0.0;
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                let yy = y + ky - r;
                let xx = x0 + kx - r;
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                    s += kernel.at(ch, (ky * k as isize + kx) as usize) * x.at((yy * w as isize + xx) as usize, ch);
                }
            }
        }
        s
    })
}

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    /// Absolute floor for entries whose true gradient is near zero.
    pub atol: f64,
    /// Fraction of entries to probe per input; 1 checks everything.
    pub fraction: f64,
    pub seed: u64,
}

impl GradCheck {
    pub fn f64_default() -> Self {
        Self {
            step: 1e-6,
            rtol: 1e-6,
            atol: 1e-8,
            fraction: 1.0,
            seed: 0,
        }
    }

    pub fn sampled(fraction: f64, seed: u64) -> Self {
        Self {
            fraction,
            seed,
            ..Self::f64_default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|)` over entries above the absolute floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

fn eval_loss<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares reverse-mode gradients of `build` against central differences.
pub fn check_gradient<F>(inputs: &[Tensor], build: &F, cfg: GradCheck) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let n = input.len();
        let indices: Vec<usize> = if cfg.fraction >= 1.0 {
            (0..n).collect()
        } else {
            let count = ((n as f64 * cfg.fraction).ceil() as usize).clamp(1, n);
            let mut idx = sample(&mut rng, n, count).into_vec();
            idx.sort_unstable();
            idx
        };
        for j in indices {
            let base = input.data()[j];
            probe[i].data_mut()[j] = base + cfg.step;
            let up = eval_loss(&probe, build)?;
            probe[i].data_mut()[j] = base - cfg.step;
            let down = eval_loss(&probe, build)?;
            probe[i].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(CoreError::Domain(format!("non-finite gradient at input {i}[{j}]")));
            }
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(diff);
            if scale > cfg.atol {
                report.max_rel_error = report.max_rel_error.max(diff / scale);
            }
            if diff > cfg.rtol * scale + cfg.atol {
                report.failures.push(Mismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Store filled by `init` and then redrawn uniformly in `[-1, 1)`, so no
/// gradient path hides behind an identity-like initialization.
pub fn randomized_store(init: impl Fn(&mut ParamStore, &mut ChaCha8Rng), seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init(&mut store, &mut rng);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    store
}

/// Gradient check of a module: `f` gets the `extra` inputs as graph
/// variables and a context where every parameter under `prefix` is bound to
/// a probed leaf. The output is reduced with fixed random weights.
pub fn check_params<F>(store: &ParamStore, prefix: &str, extra: Vec<Tensor>, cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().into_iter().filter(|n| n.starts_with(prefix)).collect();
    if names.is_empty() {
        return Err(CoreError::Domain(format!("no parameters under {prefix}")));
    }
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(names.iter().map(|n| store.get(n).cloned()).collect::<Result<Vec<_>>>()?);
    let bound = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let mut ctx = Ctx::new(g, store);
        for (n, v) in names.iter().zip(&vars[n_extra..]) {
            ctx.bind(n.clone(), *v);
        }
        f(&mut ctx, &vars[..n_extra])
    };
    let weights: Vec<f64> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = bound(&mut g, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..g.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let build = |g: &mut Graph, vars: &[Var]| {
        let y = bound(g, vars)?;
        g.dot(y, &weights)
    };
    check_gradient(&inputs, &build, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dft_of_single_pixel() {
        let s = naive_dft2(&Plane::new(1, 1, vec![0.7]).unwrap());
        assert!((s.re[0] - 0.7).abs() < 1e-15 && s.im[0].abs() < 1e-15);
    }

    #[test]
    fn attention_single_key_copies_value() {
        let q = Tensor::from_fn(3, 2, |i, j| (i + j) as f64);
        let k = Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = naive_attention(&q, &k, &v);
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn checker_flags_wrong_gradient() {
        // affine(x, 2, 0) but the loss adds a term the tape does not see.
        let inputs = vec![Tensor::vector(vec![1.0, -2.0])];
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.affine(v[0], 2.0, 0.0);
            g.dot(y, &[1.0, 1.0])
        };
        assert!(check_gradient(&inputs, &build, GradCheck::f64_default()).unwrap().passed());
        let wrong = |g: &mut Graph, v: &[Var]| {
            let bump = g.value(v[0]).data()[0].powi(2);
            let y = g.affine(v[0], 2.0, bump);
            g.dot(y, &[1.0, 1.0])
        };
        let r = check_gradient(&inputs, &wrong, GradCheck::f64_default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures[0].index, 0);
    }
}
