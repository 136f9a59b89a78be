//! Vision-language fusion: refined visual tokens attend to the caption
//! embedding plus learnable prompt tokens.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{CoreError, Result};
use crate::params::{uniform_init, Ctx, ParamStore};
use crate::rwkv::layer_norm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionDims {
    /// Visual width `C`.
    pub visual: usize,
    /// Text width `D`.
    pub text: usize,
    /// Query/key width.
    pub attention: usize,
    pub prompt_tokens: usize,
    pub ffn_hidden: usize,
}

pub fn init_fusion<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &FusionDims, rng: &mut R) {
    let (c, d, a) = (dims.visual, dims.text, dims.attention);
    let ln = |store: &mut ParamStore, name: &str, n: usize| {
        store.insert(format!("{prefix}.{name}.scale"), Tensor::full(&[1, n], 1.0));
        store.insert(format!("{prefix}.{name}.offset"), Tensor::zeros(&[1, n]));
    };
    ln(store, "visual_ln", c);
    store.insert(format!("{prefix}.visual_proj"), uniform_init(rng, c, c, c));
    ln(store, "text_ln", d);
    store.insert(format!("{prefix}.text_proj"), uniform_init(rng, d, d, d));
    if dims.prompt_tokens > 0 {
        store.insert(format!("{prefix}.prompt"), uniform_init(rng, dims.prompt_tokens, d, d));
    }
    store.insert(format!("{prefix}.w_q"), uniform_init(rng, c, a, c));
    store.insert(format!("{prefix}.w_k"), uniform_init(rng, d, a, d));
    store.insert(format!("{prefix}.w_v"), uniform_init(rng, d, c, d));
    ln(store, "ffn_ln", c);
    store.insert(format!("{prefix}.ffn_w1"), uniform_init(rng, c, dims.ffn_hidden, c));
    store.insert(format!("{prefix}.ffn_w2"), uniform_init(rng, dims.ffn_hidden, c, dims.ffn_hidden));
}

/// `x + LN(x) W`.
pub fn refine(ctx: &mut Ctx, ln_prefix: &str, proj: &str, x: Var) -> Result<Var> {
    let xn = layer_norm(ctx, ln_prefix, x)?;
    let w = ctx.param(proj)?;
    let y = ctx.g.matmul(xn, w)?;
    ctx.g.add(x, y)
}

/// Caption tokens followed by the prompt tokens.
pub fn concat_prompt(ctx: &mut Ctx, text: Var, prompt: Option<Var>) -> Result<Var> {
    match prompt {
        None => Ok(text),
        Some(p) => {
            let (a, b) = (ctx.g.value(text).cols(), ctx.g.value(p).cols());
            if a != b {
                return Err(CoreError::shape(format!("text width {a} vs prompt width {b}")));
            }
            ctx.g.concat_rows(text, p)
        }
    }
}

/// `softmax(Q Kᵀ / √d) V` with `Q = v W_q`, `K = t W_k`, `V = t W_v`.
pub fn cross_attention(ctx: &mut Ctx, prefix: &str, visual: Var, text: Var) -> Result<Var> {
    let w_q = ctx.param(&format!("{prefix}.w_q"))?;
    let w_k = ctx.param(&format!("{prefix}.w_k"))?;
    let w_v = ctx.param(&format!("{prefix}.w_v"))?;
    let q = ctx.g.matmul(visual, w_q)?;
    let k = ctx.g.matmul(text, w_k)?;
    let v = ctx.g.matmul(text, w_v)?;
    let d = ctx.g.value(q).cols() as f64;
    let logits = ctx.g.matmul_nt(q, k)?;
    let logits = ctx.g.affine(logits, 1.0 / d.sqrt(), 0.0);
    let att = ctx.g.softmax_rows(logits);
    ctx.g.matmul(att, v)
}

/// `x + W2 GELU(W1 LN(x))`.
pub fn feed_forward(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let xn = layer_norm(ctx, &format!("{prefix}.ffn_ln"), x)?;
    let w1 = ctx.param(&format!("{prefix}.ffn_w1"))?;
    let w2 = ctx.param(&format!("{prefix}.ffn_w2"))?;
    let h = ctx.g.matmul(xn, w1)?;
    let h = ctx.g.gelu(h);
    let y = ctx.g.matmul(h, w2)?;
    ctx.g.add(x, y)
}

/// One fusion block over `[T, C]` visual tokens and a `[1, D]` caption embedding.
pub fn vlf_block(ctx: &mut Ctx, prefix: &str, visual: Var, caption: Var, use_prompt: bool) -> Result<Var> {
    let fv = refine(ctx, &format!("{prefix}.visual_ln"), &format!("{prefix}.visual_proj"), visual)?;
    let prompt_name = format!("{prefix}.prompt");
    let prompt = if use_prompt && ctx.store().contains(&prompt_name) {
        Some(ctx.param(&prompt_name)?)
    } else {
        None
    };
    let text = concat_prompt(ctx, caption, prompt)?;
    let ft = refine(ctx, &format!("{prefix}.text_ln"), &format!("{prefix}.text_proj"), text)?;
    let fused = cross_attention(ctx, prefix, fv, ft)?;
    feed_forward(ctx, prefix, fused)
}
