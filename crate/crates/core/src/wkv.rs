//! Granularity-aware WKV attention.
//!
//! For every window segment of length `L` and every channel, position `t`
//! aggregates the segment's values with weights `exp(-(|t-i|-1)/L * w + k_i)`
//! for `i != t` and `exp(u + k_t)` for itself, normalized by the sum of the
//! weights. Segments are independent.
//!
//! Both passes run in `O(L)` per channel using a left and a right scan. The
//! scans keep their running sums as `mantissa * exp(p)` with `p` the running
//! maximum exponent, so large keys or bonuses never overflow.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// A contiguous token range that attends only within itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

/// A single segment covering the whole sequence.
pub fn whole_sequence(len: usize) -> Vec<Segment> {
    vec![Segment::new(0, len)]
}

/// Checks that `segments` tile `[0, total)` in order without gaps or overlap.
pub fn validate_segments(segments: &[Segment], total: usize) -> Result<()> {
    let mut cursor = 0;
    for s in segments {
        if s.len == 0 {
            return Err(CoreError::Domain(format!("empty segment at {}", s.start)));
        }
        if s.start != cursor {
            return Err(CoreError::Domain(format!(
                "segments do not tile the sequence: expected start {cursor}, got {}",
                s.start
            )));
        }
        cursor += s.len;
    }
    if cursor != total {
        return Err(CoreError::Domain(format!(
            "segments cover {cursor} tokens, sequence has {total}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Acc {
    p: f64,
    a: [f64; 2],
    d: [f64; 2],
}

const EMPTY: Acc = Acc {
    p: f64::NEG_INFINITY,
    a: [0.0; 2],
    d: [0.0; 2],
};

#[inline]
fn rescale(from: f64, to: f64) -> f64 {
    if from == f64::NEG_INFINITY {
        0.0
    } else {
        (from - to).exp()
    }
}

/// Writes into `out[i]` the decayed sums over positions strictly before `i`
/// (strictly after when `reverse`): `a = Σ exp(-(dist)λ + x_t) z_t` and the
/// distance-weighted `d = Σ dist · exp(-(dist)λ + x_t) z_t`, where
/// `dist = |t - i| - 1`.
fn scan(x: &[f64], z0: &[f64], z1: &[f64], lambda: f64, reverse: bool, out: &mut [Acc]) {
    let n = x.len();
    let mut acc = EMPTY;
    for step in 0..n {
        let i = if reverse { n - 1 - step } else { step };
        out[i] = acc;
        let q = acc.p - lambda;
        let p = q.max(x[i]);
        let s = rescale(acc.p, p + lambda);
        let e = (x[i] - p).exp();
        acc = Acc {
            p,
            a: [acc.a[0] * s + z0[i] * e, acc.a[1] * s + z1[i] * e],
            d: [(acc.d[0] + acc.a[0]) * s, (acc.d[1] + acc.a[1]) * s],
        };
    }
}

/// Merges the left and right partial sums with an optional self term.
fn combine(l: &Acc, r: &Acc, self_exp: f64, self_z: [f64; 2]) -> Acc {
    let p = l.p.max(r.p).max(self_exp);
    if p == f64::NEG_INFINITY {
        return EMPTY;
    }
    let (sl, sr, ss) = (rescale(l.p, p), rescale(r.p, p), rescale(self_exp, p));
    Acc {
        p,
        a: [
            l.a[0] * sl + r.a[0] * sr + self_z[0] * ss,
            l.a[1] * sl + r.a[1] * sr + self_z[1] * ss,
        ],
        d: [l.d[0] * sl + r.d[0] * sr, l.d[1] * sl + r.d[1] * sr],
    }
}

struct Workspace {
    x: Vec<f64>,
    z0: Vec<f64>,
    z1: Vec<f64>,
    left: Vec<Acc>,
    right: Vec<Acc>,
}

impl Workspace {
    fn new(max_len: usize) -> Self {
        Self {
            x: vec![0.0; max_len],
            z0: vec![0.0; max_len],
            z1: vec![0.0; max_len],
            left: vec![EMPTY; max_len],
            right: vec![EMPTY; max_len],
        }
    }

    fn run(&mut self, len: usize, lambda: f64) {
        scan(
            &self.x[..len],
            &self.z0[..len],
            &self.z1[..len],
            lambda,
            false,
            &mut self.left[..len],
        );
        scan(
            &self.x[..len],
            &self.z0[..len],
            &self.z1[..len],
            lambda,
            true,
            &mut self.right[..len],
        );
    }
}

fn check_inputs(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor, segments: &[Segment]) -> Result<()> {
    if k.shape() != v.shape() || k.shape().len() != 2 {
        return Err(CoreError::shape(format!(
            "wkv keys {:?} and values {:?} must be equal [T, C] matrices",
            k.shape(),
            v.shape()
        )));
    }
    let c = k.cols();
    if w.len() != c || u.len() != c {
        return Err(CoreError::shape(format!(
            "wkv decay/bonus need {c} channels, got {} and {}",
            w.len(),
            u.len()
        )));
    }
    validate_segments(segments, k.rows())
}

/// Forward pass. Returns the output and, per `[t, c]`, the log of the
/// normalizer (needed by the backward pass).
pub(crate) fn forward(
    k: &Tensor,
    v: &Tensor,
    w: &Tensor,
    u: &Tensor,
    segments: &[Segment],
) -> Result<(Tensor, Vec<f64>)> {
    check_inputs(k, v, w, u, segments)?;
    let (t_len, c) = (k.rows(), k.cols());
    let (kd, vd) = (k.data(), v.data());
    let mut out = vec![0.0; t_len * c];
    let mut log_den = vec![0.0; t_len * c];
    let max_len = segments.iter().map(|s| s.len).max().unwrap_or(0);
    let mut ws = Workspace::new(max_len);
    ws.z1.iter_mut().for_each(|z| *z = 1.0);

    for seg in segments {
        let len = seg.len;
        for ch in 0..c {
            let lambda = w.data()[ch] / len as f64;
            let bonus = u.data()[ch];
            for j in 0..len {
                let idx = (seg.start + j) * c + ch;
                ws.x[j] = kd[idx];
                ws.z0[j] = vd[idx];
            }
            ws.run(len, lambda);
            for j in 0..len {
                let idx = (seg.start + j) * c + ch;
                let acc = combine(&ws.left[j], &ws.right[j], bonus + kd[idx], [vd[idx], 1.0]);
                out[idx] = acc.a[0] / acc.a[1];
                log_den[idx] = acc.p + acc.a[1].ln();
            }
        }
    }
    Ok((Tensor::matrix(t_len, c, out)?, log_den))
}

pub(crate) struct WkvGrads {
    pub k: Tensor,
    pub v: Tensor,
    pub w: Tensor,
    pub u: Tensor,
}

/// Backward pass given the forward output, its log-normalizers, and the
/// upstream gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    k: &Tensor,
    v: &Tensor,
    w: &Tensor,
    u: &Tensor,
    segments: &[Segment],
    out: &Tensor,
    log_den: &[f64],
    grad: &Tensor,
) -> WkvGrads {
    let (t_len, c) = (k.rows(), k.cols());
    let (kd, vd, yd, gd) = (k.data(), v.data(), out.data(), grad.data());
    let mut dk = vec![0.0; t_len * c];
    let mut dv = vec![0.0; t_len * c];
    let mut dw = vec![0.0; c];
    let mut du = vec![0.0; c];
    let max_len = segments.iter().map(|s| s.len).max().unwrap_or(0);
    let mut ws = Workspace::new(max_len);

    for seg in segments {
        let len = seg.len;
        for ch in 0..c {
            let lambda = w.data()[ch] / len as f64;
            let bonus = u.data()[ch];
            for j in 0..len {
                let idx = (seg.start + j) * c + ch;
                ws.x[j] = -log_den[idx];
                ws.z0[j] = gd[idx];
                ws.z1[j] = -gd[idx] * yd[idx];
            }
            ws.run(len, lambda);
            let mut dw_acc = 0.0;
            for j in 0..len {
                let idx = (seg.start + j) * c + ch;
                let acc = combine(&ws.left[j], &ws.right[j], f64::NEG_INFINITY, [0.0; 2]);
                let f = if acc.p == f64::NEG_INFINITY {
                    0.0
                } else {
                    (acc.p + kd[idx]).exp()
                };
                let sf = (bonus + kd[idx] - log_den[idx]).exp();
                let dvi = f * acc.a[0] + sf * gd[idx];
                dv[idx] = dvi;
                dk[idx] = vd[idx] * dvi + f * acc.a[1] - sf * gd[idx] * yd[idx];
                du[ch] += sf * gd[idx] * (vd[idx] - yd[idx]);
                dw_acc += f * (vd[idx] * acc.d[0] + acc.d[1]);
            }
            dw[ch] -= dw_acc / len as f64;
        }
    }
    WkvGrads {
        k: Tensor::new(k.shape().to_vec(), dk).expect("shape"),
        v: Tensor::new(v.shape().to_vec(), dv).expect("shape"),
        w: Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        u: Tensor::new(u.shape().to_vec(), du).expect("shape"),
    }
}

/// Evaluates Ga-WKV attention over `[T, C]` keys and values with per-channel
/// decay `w` and bonus `u`; `segments` must tile the sequence.
pub fn ga_wkv(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor, segments: &[Segment]) -> Result<Tensor> {
    forward(k, v, w, u, segments).map(|(out, _)| out)
}
