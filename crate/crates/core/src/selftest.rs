//! Embedded oracle suites for a quick installation check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::oracle::{check_gradient, naive_attention, naive_dft2, naive_wkv, GradCheck};
use crate::spectral::{dft2, Plane};
use crate::tensor::Tensor;
use crate::wkv::{ga_wkv, Segment};

pub const SUITES: [&str; 4] = ["dft", "wkv", "attention", "gradients"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn report(name: &str, max_error: f64, tolerance: f64) -> SuiteReport {
    SuiteReport {
        name: name.to_string(),
        passed: max_error.is_finite() && max_error <= tolerance,
        max_error,
        tolerance,
    }
}

fn dft_suite(rng: &mut ChaCha8Rng, fault: f64) -> Result<SuiteReport> {
    let mut err: f64 = 0.0;
    for n in [4, 8] {
        let img = Plane::from_fn(n, n, |_, _| rng.random());
        let fast = dft2(&img)?;
        let slow = naive_dft2(&img);
        for i in 0..fast.re.len() {
            err = err.max((fast.re[i] + fault - slow.re[i]).abs()).max((fast.im[i] - slow.im[i]).abs());
        }
    }
    Ok(report("dft", err, 1e-10))
}

fn wkv_suite(rng: &mut ChaCha8Rng, fault: f64) -> Result<SuiteReport> {
    let mut err: f64 = 0.0;
    for len in [1, 4, 16] {
        let (k, v) = (random(rng, len, 3), random(rng, len, 3));
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..4.0)).collect();
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let segs = [Segment::new(0, len)];
        let fast = ga_wkv(&k, &v, &Tensor::vector(w.clone()), &Tensor::vector(u.clone()), &segs)?;
        let slow = naive_wkv(&k, &v, &w, &u, &segs);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            err = err.max((a + fault - b).abs() / b.abs().max(1e-12).max(a.abs()));
        }
    }
    Ok(report("wkv", err, 1e-5))
}

fn attention_suite(rng: &mut ChaCha8Rng, fault: f64) -> Result<SuiteReport> {
    let (q, k, v) = (random(rng, 4, 5), random(rng, 3, 5), random(rng, 3, 2));
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let logits = g.matmul_nt(qv, kv)?;
    let logits = g.affine(logits, 1.0 / 5f64.sqrt(), 0.0);
    let att = g.softmax_rows(logits);
    let out = g.matmul(att, vv)?;
    let slow = naive_attention(&q, &k, &v);
    let err = g.value(out).max_abs_diff(&slow) + fault;
    Ok(report("attention", err, 1e-6))
}

fn gradient_suite(rng: &mut ChaCha8Rng, fault: f64) -> Result<SuiteReport> {
    let inputs = vec![random(rng, 6, 2), random(rng, 6, 2), random(rng, 1, 2), random(rng, 1, 2)];
    let weights: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build = |g: &mut Graph, v: &[Var]| {
        let segs = [Segment::new(0, 2), Segment::new(2, 4)];
        let y = g.ga_wkv(v[0], v[1], v[2], v[3], &segs)?;
        // The fault enters the forward value without being taped.
        let bump = fault * g.value(v[0]).data().iter().sum::<f64>();
        let y = g.affine(y, 1.0, bump);
        g.dot(y, &weights)
    };
    let cfg = GradCheck::f64_default();
    let r = check_gradient(&inputs, &build, cfg)?;
    Ok(SuiteReport {
        name: "gradients".into(),
        passed: r.passed(),
        max_error: r.max_rel_error,
        tolerance: cfg.rtol,
    })
}

/// Runs every suite. `inject_fault` names a suite whose fast path gets
/// perturbed, to check that failures are reported.
pub fn run_self_test(inject_fault: Option<&str>) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let fault = |name: &str| if inject_fault == Some(name) { 1e-3 } else { 0.0 };
    Ok(vec![
        dft_suite(&mut rng, fault("dft"))?,
        wkv_suite(&mut rng, fault("wkv"))?,
        attention_suite(&mut rng, fault("attention"))?,
        gradient_suite(&mut rng, fault("gradients"))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        for r in run_self_test(None).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn injected_fault_names_suite() {
        for name in SUITES {
            let reports = run_self_test(Some(name)).unwrap();
            for r in reports {
                assert_eq!(r.passed, r.name != name, "{r:?}");
            }
        }
    }
}
