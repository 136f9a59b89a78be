//! Granularity-aware RWKV block: spatial mix over window-ordered tokens
//! followed by channel mix.
//!
//! Features are `[h * w, c]` matrices in row-major spatial order.

use rand::Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{uniform_init, Ctx, ParamStore};
use crate::partition::Routing;
use crate::tensor::Tensor;
use crate::wkv::{whole_sequence, Segment};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

fn ln_params(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.scale"), Tensor::full(&[1, c], 1.0));
    store.insert(format!("{prefix}.offset"), Tensor::zeros(&[1, c]));
}

fn shift_params<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &BlockDims, rng: &mut R) {
    let c = dims.channels;
    ln_params(store, &format!("{prefix}.ln"), c);
    store.insert(format!("{prefix}.alpha"), Tensor::zeros(&[1, c]));
    store.insert(format!("{prefix}.beta"), Tensor::full(&[1, c], 1.0));
    let taps = dims.kernel * dims.kernel;
    store.insert(format!("{prefix}.dconv"), uniform_init(rng, c, taps, taps));
}

/// Decay spread linearly over `[0, 4]` across channels, bonus 0.5.
pub fn default_decay(c: usize) -> (Tensor, Tensor) {
    let w = (0..c)
        .map(|i| if c == 1 { 0.0 } else { 4.0 * i as f64 / (c - 1) as f64 })
        .collect();
    (Tensor::matrix(1, c, w).expect("shape"), Tensor::full(&[1, c], 0.5))
}

pub fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &BlockDims, rng: &mut R) {
    let (c, h) = (dims.channels, dims.hidden);
    let sp = format!("{prefix}.spatial");
    shift_params(store, &format!("{sp}.shift"), dims, rng);
    for name in ["w_r", "w_k", "w_v"] {
        store.insert(format!("{sp}.{name}"), uniform_init(rng, c, c, c));
    }
    // Output projections start at zero so each block begins as the identity;
    // otherwise the squared ReLU compounds through the residual stream.
    store.insert(format!("{sp}.w_o"), Tensor::zeros(&[c, c]));
    let (w, u) = default_decay(c);
    store.insert(format!("{sp}.decay"), w);
    store.insert(format!("{sp}.bonus"), u);

    let cm = format!("{prefix}.channel");
    shift_params(store, &format!("{cm}.shift"), dims, rng);
    store.insert(format!("{cm}.w_r"), uniform_init(rng, c, c, c));
    store.insert(format!("{cm}.w_k"), uniform_init(rng, c, h, c));
    store.insert(format!("{cm}.w_v"), uniform_init(rng, h, c, h));
    store.insert(format!("{cm}.w_o"), Tensor::zeros(&[c, c]));
}

pub fn layer_norm(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let scale = ctx.param(&format!("{prefix}.scale"))?;
    let offset = ctx.param(&format!("{prefix}.offset"))?;
    ctx.g.layer_norm(x, scale, offset)
}

/// `alpha * DConv(LN(x)) + beta * LN(x)`.
pub fn token_shift(ctx: &mut Ctx, prefix: &str, x: Var, height: usize, width: usize) -> Result<Var> {
    let xn = layer_norm(ctx, &format!("{prefix}.ln"), x)?;
    let kernel = ctx.param(&format!("{prefix}.dconv"))?;
    let alpha = ctx.param(&format!("{prefix}.alpha"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    let conv = ctx.g.depthwise_conv(xn, kernel, height, width)?;
    let a = ctx.g.scale_cols(conv, alpha)?;
    let b = ctx.g.scale_cols(xn, beta)?;
    ctx.g.add(a, b)
}

/// `(1 - m) * a + m * b` row-wise for an `[n, 1]` mask `m`.
fn blend_rows(ctx: &mut Ctx, a: Var, b: Var, m: Var) -> Result<Var> {
    let keep = ctx.g.affine(m, -1.0, 1.0);
    let a = ctx.g.scale_rows(a, keep)?;
    let b = ctx.g.scale_rows(b, m)?;
    ctx.g.add(a, b)
}

/// Spatial mix. The result is in row-major spatial order.
pub fn spatial_mix(ctx: &mut Ctx, prefix: &str, x: Var, dims: &BlockDims, routing: &Routing) -> Result<Var> {
    let xs = token_shift(ctx, &format!("{prefix}.shift"), x, dims.height, dims.width)?;
    let (seq, segments): (Var, Vec<Segment>) = match routing {
        Routing::Sequential => (xs, whole_sequence(dims.height * dims.width)),
        Routing::Windowed {
            plan,
            token_mask,
            segments,
        } => {
            let coarse = ctx.g.gather_rows(xs, &plan.coarse)?;
            let fine = ctx.g.gather_rows(xs, &plan.fine)?;
            (blend_rows(ctx, coarse, fine, *token_mask)?, segments.clone())
        }
    };
    let w_r = ctx.param(&format!("{prefix}.w_r"))?;
    let w_k = ctx.param(&format!("{prefix}.w_k"))?;
    let w_v = ctx.param(&format!("{prefix}.w_v"))?;
    let w_o = ctx.param(&format!("{prefix}.w_o"))?;
    let decay = ctx.param(&format!("{prefix}.decay"))?;
    let bonus = ctx.param(&format!("{prefix}.bonus"))?;
    let r = ctx.g.matmul(seq, w_r)?;
    let k = ctx.g.matmul(seq, w_k)?;
    let v = ctx.g.matmul(seq, w_v)?;
    let wkv = ctx.g.ga_wkv(k, v, decay, bonus, &segments)?;
    let gate = ctx.g.sigmoid(r);
    let gated = ctx.g.mul(gate, wkv)?;
    let out = ctx.g.matmul(gated, w_o)?;
    match routing {
        Routing::Sequential => Ok(out),
        Routing::Windowed { plan, token_mask, .. } => {
            // Each spatial id sits in the same window under both orders, so
            // the slot mask seen through either inverse is the same.
            let from_coarse = ctx.g.gather_rows(out, &plan.inv_coarse)?;
            let from_fine = ctx.g.gather_rows(out, &plan.inv_fine)?;
            let m = ctx.g.gather_rows(*token_mask, &plan.inv_coarse)?;
            blend_rows(ctx, from_coarse, from_fine, m)
        }
    }
}

/// Channel mix of `os` with the block input `x` added after the shift.
pub fn channel_mix(ctx: &mut Ctx, prefix: &str, os: Var, x: Var, dims: &BlockDims) -> Result<Var> {
    let shifted = token_shift(ctx, &format!("{prefix}.shift"), os, dims.height, dims.width)?;
    let xc = ctx.g.add(shifted, x)?;
    let w_r = ctx.param(&format!("{prefix}.w_r"))?;
    let w_k = ctx.param(&format!("{prefix}.w_k"))?;
    let w_v = ctx.param(&format!("{prefix}.w_v"))?;
    let w_o = ctx.param(&format!("{prefix}.w_o"))?;
    let r = ctx.g.matmul(xc, w_r)?;
    let k = ctx.g.matmul(xc, w_k)?;
    let k = ctx.g.sq_relu(k);
    let v = ctx.g.matmul(k, w_v)?;
    let gate = ctx.g.sigmoid(r);
    let gated = ctx.g.mul(gate, v)?;
    ctx.g.matmul(gated, w_o)
}

/// One block: `os = x + SpatialMix(x)`, `out = ChannelMix(os, x) + os`.
pub fn gav_block(ctx: &mut Ctx, prefix: &str, x: Var, dims: &BlockDims, routing: &Routing) -> Result<Var> {
    let os = spatial_mix(ctx, &format!("{prefix}.spatial"), x, dims, routing)?;
    let os = ctx.g.add(x, os)?;
    let oc = channel_mix(ctx, &format!("{prefix}.channel"), os, x, dims)?;
    ctx.g.add(oc, os)
}

/// Convolutional stand-in for [`gav_block`]: `x + GELU(DConv(LN(x)) W)`.
pub fn init_conv_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &BlockDims, rng: &mut R) {
    let c = dims.channels;
    ln_params(store, &format!("{prefix}.ln"), c);
    let taps = dims.kernel * dims.kernel;
    store.insert(format!("{prefix}.dconv"), uniform_init(rng, c, taps, taps));
    store.insert(format!("{prefix}.proj"), uniform_init(rng, c, c, c));
}

pub fn conv_block(ctx: &mut Ctx, prefix: &str, x: Var, dims: &BlockDims) -> Result<Var> {
    let xn = layer_norm(ctx, &format!("{prefix}.ln"), x)?;
    let kernel = ctx.param(&format!("{prefix}.dconv"))?;
    let proj = ctx.param(&format!("{prefix}.proj"))?;
    let y = ctx.g.depthwise_conv(xn, kernel, dims.height, dims.width)?;
    let y = ctx.g.matmul(y, proj)?;
    let y = ctx.g.gelu(y);
    ctx.g.add(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::partition::{compose_sequence, flatten_windows, inverse_window_transform, upsample_mask};
    use crate::partition::{PartitionState, TokenSequence, WindowLayout, WindowPlan};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(c: usize, side: usize) -> BlockDims {
        BlockDims {
            channels: c,
            hidden: c,
            kernel: 3,
            height: side,
            width: side,
        }
    }

    fn block_store(d: &BlockDims, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_block(&mut store, "b", d, &mut rng);
        store
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = ParamStore::new();
        ln_params(&mut store, "ln", 2);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store);
        let x = ctx.g.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, 5.0]).unwrap());
        let y = layer_norm(&mut ctx, "ln", x).unwrap();
        let y = ctx.g.value(y);
        let s = 2.0 / (1.0f64 + crate::autograd::LN_EPS).sqrt();
        assert!((y.at(0, 0) + s / 2.0).abs() < 1e-15 && (y.at(0, 1) - s / 2.0).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn identity_shift_paths() {
        let d = dims(3, 4);
        let mut store = block_store(&d, 1);
        let x = Tensor::from_fn(16, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, store);
            let xv = ctx.g.constant(x.clone());
            let s = token_shift(&mut ctx, "b.spatial.shift", xv, 4, 4).unwrap();
            let n = layer_norm(&mut ctx, "b.spatial.shift.ln", xv).unwrap();
            (ctx.g.value(s).clone(), ctx.g.value(n).clone())
        };
        let (s, n) = run(&store);
        assert_eq!(s, n);
        let mut id = Tensor::zeros(&[3, 9]);
        for ch in 0..3 {
            id.set(ch, 4, 1.0);
        }
        store.insert("b.spatial.shift.dconv", id);
        store.insert("b.spatial.shift.alpha", Tensor::full(&[1, 3], 1.0));
        store.insert("b.spatial.shift.beta", Tensor::zeros(&[1, 3]));
        let (s, n) = run(&store);
        assert_eq!(s, n);
    }

    #[test]
    fn zero_parameters_give_identity_block() {
        let d = dims(2, 2);
        let mut store = block_store(&d, 2);
        for (_, t) in store.iter_mut() {
            t.fill(0.0);
        }
        let x = Tensor::matrix(4, 2, vec![0.5, -1.0, 2.0, 0.25, -3.0, 1.5, 0.0, 4.0]).unwrap();
        for routing_windowed in [false, true] {
            let plan = WindowPlan::new(2, 2).unwrap();
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store);
            let routing = if routing_windowed {
                let st = PartitionState::from_energies(&[1.0, 0.0, 0.0, 0.0], 4, 1.0, true).unwrap();
                Routing::from_state(ctx.g, &plan, &st).unwrap()
            } else {
                Routing::Sequential
            };
            let xv = ctx.g.constant(x.clone());
            let y = gav_block(&mut ctx, "b", xv, &d, &routing).unwrap();
            assert_eq!(ctx.g.value(y), &x);
        }
    }

    #[test]
    fn zero_output_projections() {
        let d = dims(4, 4);
        let mut store = block_store(&d, 3);
        store.insert("b.spatial.w_o", Tensor::zeros(&[4, 4]));
        store.insert("b.channel.w_k", Tensor::zeros(&[4, 4]));
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store);
        let xv = ctx.g.constant(Tensor::from_fn(16, 4, |i, j| (i as f64 - j as f64) * 0.1));
        let os = spatial_mix(&mut ctx, "b.spatial", xv, &d, &Routing::Sequential).unwrap();
        assert!(ctx.g.value(os).data().iter().all(|&v| v == 0.0));
        let oc = channel_mix(&mut ctx, "b.channel", xv, xv, &d).unwrap();
        assert!(ctx.g.value(oc).data().iter().all(|&v| v == 0.0));
    }

    /// Spatial mix rebuilt from the standalone partition functions.
    #[test]
    fn windowed_spatial_mix_matches_composition() {
        let d = dims(3, 8);
        let store = block_store(&d, 4);
        let x = Tensor::from_fn(64, 3, |i, j| ((i * 5 + j * 11) as f64 * 0.37).cos());
        let plan = WindowPlan::new(8, 8).unwrap();
        let energies = [0.3, 2.0, 0.1, 0.7];
        let state = PartitionState::from_energies(&energies, 64, 1.0, true).unwrap();

        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store);
        let routing = Routing::from_state(ctx.g, &plan, &state).unwrap();
        let xv = ctx.g.constant(x.clone());
        let os = spatial_mix(&mut ctx, "b.spatial", xv, &d, &routing).unwrap();
        let xs = token_shift(&mut ctx, "b.spatial.shift", xv, 8, 8).unwrap();
        let xs = ctx.g.value(xs).clone();
        let got = ctx.g.value(os).clone();

        let coarse = flatten_windows(&xs, &WindowLayout::coarse(8, 8).unwrap()).unwrap();
        let fine = flatten_windows(&xs, &WindowLayout::fine(8, 8).unwrap()).unwrap();
        let ml = upsample_mask(&state.window_mask, 64).unwrap();
        let seq = compose_sequence(&coarse, &fine, &ml).unwrap();
        let p = |n: &str| store.get(&format!("b.spatial.{n}")).unwrap().clone();
        let r = seq.tokens.matmul(&p("w_r")).unwrap();
        let k = seq.tokens.matmul(&p("w_k")).unwrap();
        let v = seq.tokens.matmul(&p("w_v")).unwrap();
        let segs = crate::partition::scan_segments(8, 8, &[1]).unwrap();
        let wkv = crate::oracle::naive_wkv(&k, &v, p("decay").data(), p("bonus").data(), &segs);
        let gated = Tensor::from_fn(64, 3, |i, j| wkv.at(i, j) / (1.0 + (-r.at(i, j)).exp()));
        let y = gated.matmul(&p("w_o")).unwrap();
        let back = inverse_window_transform(&TokenSequence {
            tokens: y,
            provenance: seq.provenance,
        })
        .unwrap();
        assert!(got.max_abs_diff(&back) < 1e-10, "{}", got.max_abs_diff(&back));
    }

    #[test]
    fn shape_contract() {
        let d = dims(16, 8);
        let store = block_store(&d, 5);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store);
        let xv = ctx.g.constant(Tensor::full(&[64, 16], 0.3));
        let y = gav_block(&mut ctx, "b", xv, &d, &Routing::Sequential).unwrap();
        assert_eq!(ctx.g.value(y).shape(), &[64, 16]);
    }
}
