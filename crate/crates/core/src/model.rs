//! Full network: conv stem, RWKV stages, fusion blocks, pooled linear head.

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::config::Config;
use crate::error::{CoreError, Result};
use crate::fusion::{init_fusion, vlf_block, FusionDims};
use crate::params::{uniform_init, Ctx, ParamStore};
use crate::partition::{energy_map, pool_to, PartitionState, Routing, WindowLayout, WindowPlan};
use crate::rwkv::{conv_block, gav_block, init_block, init_conv_block, layer_norm, BlockDims};
use crate::spectral::{rgb_to_gray, saliency_map, SaliencyParams};
use crate::tensor::Tensor;

/// One preprocessed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[side * side, 3]` RGB in `[0, 1]`.
    pub image: Tensor,
    /// Saliency energy of the four coarse windows at feature resolution.
    pub energies: Vec<f64>,
    /// `[1, D]` caption embedding.
    pub caption: Tensor,
    pub label: usize,
}

/// Coarse-window saliency energies of an RGB image (`[side * side, 3]`)
/// pooled to a `feature_side` grid.
pub fn saliency_energies(image: &Tensor, side: usize, feature_side: usize, params: &SaliencyParams) -> Result<Vec<f64>> {
    let gray = rgb_to_gray(side, side, image.data())?;
    let sal = saliency_map(&gray, params)?;
    let pooled = pool_to(&sal.map, feature_side, feature_side)?;
    energy_map(&pooled, &WindowLayout::coarse(feature_side, feature_side)?)
}

/// Per-stage Gumbel noise, or none for deterministic evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Noise<'a> {
    Zero,
    Sampled(&'a [Vec<f64>]),
}

/// Intermediate values recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub stem: Option<Var>,
    pub stages: Vec<Var>,
    pub fused: Vec<Var>,
    /// Coarse windows refined at each stage (empty without partitioning).
    pub selected: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    plan: WindowPlan,
    block: BlockDims,
    fusion: FusionDims,
}

fn ln_init(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.scale"), Tensor::full(&[1, c], 1.0));
    store.insert(format!("{prefix}.offset"), Tensor::zeros(&[1, c]));
}

impl Model {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let side = m.feature_side();
        let c = m.stem_channels;
        Ok(Self {
            cfg: cfg.clone(),
            plan: WindowPlan::new(side, side)?,
            block: BlockDims {
                channels: c,
                hidden: c * m.channel_hidden_ratio,
                kernel: m.shift_kernel,
                height: side,
                width: side,
            },
            fusion: FusionDims {
                visual: c,
                text: m.embedding_dim,
                attention: m.attention_width(),
                prompt_tokens: if cfg.ablation.disable_prompt { 0 } else { m.prompt_tokens },
                ffn_hidden: c * m.ffn_ratio,
            },
        })
    }

    pub fn feature_side(&self) -> usize {
        self.block.height
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let m = &self.cfg.model;
        let c = m.stem_channels;
        let half = c / 2;
        let mut store = ParamStore::new();
        store.insert("stem.conv1", uniform_init(rng, half, 3 * 9, 3 * 9));
        ln_init(&mut store, "stem.ln1", half);
        store.insert("stem.conv2", uniform_init(rng, c, half * 9, half * 9));
        ln_init(&mut store, "stem.ln2", c);
        for i in 0..m.stages {
            let prefix = format!("blocks.{i}");
            if self.cfg.ablation.conv_only_backbone {
                init_conv_block(&mut store, &prefix, &self.block, rng);
            } else {
                init_block(&mut store, &prefix, &self.block, rng);
            }
        }
        if !self.cfg.ablation.disable_fusion {
            for j in 0..m.fusion_blocks {
                init_fusion(&mut store, &format!("fusion.{j}"), &self.fusion, rng);
            }
        }
        ln_init(&mut store, "head.ln", c);
        store.insert("head.weight", uniform_init(rng, c, m.classes, c));
        store.insert("head.bias", Tensor::zeros(&[1, m.classes]));
        store.round_to_f32();
        store
    }

    /// Parameters that stay fixed during training.
    pub fn frozen_names(&self, store: &ParamStore) -> Vec<String> {
        if self.cfg.model.learnable_decay {
            return Vec::new();
        }
        store
            .names()
            .into_iter()
            .filter(|n| n.ends_with(".spatial.decay") || n.ends_with(".spatial.bonus"))
            .collect()
    }

    pub fn bind_frozen(&self, ctx: &mut Ctx) {
        for n in self.frozen_names(ctx.store()) {
            ctx.freeze(n);
        }
    }

    fn stem(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let side = self.cfg.model.image_size;
        let g1 = ConvGeom {
            height: side,
            width: side,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let w1 = ctx.param("stem.conv1")?;
        let x = ctx.g.conv2d(image, w1, g1)?;
        let x = layer_norm(ctx, "stem.ln1", x)?;
        let x = ctx.g.gelu(x);
        let g2 = ConvGeom {
            height: g1.out_height(),
            width: g1.out_width(),
            ..g1
        };
        let w2 = ctx.param("stem.conv2")?;
        let x = ctx.g.conv2d(x, w2, g2)?;
        let x = layer_norm(ctx, "stem.ln2", x)?;
        Ok(ctx.g.gelu(x))
    }

    /// Class logits `[1, classes]` for one sample.
    pub fn forward(&self, ctx: &mut Ctx, sample: &Sample, noise: Noise, trace: &mut Trace) -> Result<Var> {
        let m = &self.cfg.model;
        let side = m.image_size;
        if sample.image.shape() != [side * side, 3] {
            return Err(CoreError::shape(format!(
                "image tensor {:?}, expected [{}, 3]",
                sample.image.shape(),
                side * side
            )));
        }
        let image = ctx.g.constant(sample.image.clone());
        let mut x = self.stem(ctx, image)?;
        trace.stem = Some(x);
        let tokens = self.plan.tokens();
        for i in 0..m.stages {
            let prefix = format!("blocks.{i}");
            if self.cfg.ablation.conv_only_backbone {
                x = conv_block(ctx, &prefix, x, &self.block)?;
                trace.selected.push(Vec::new());
            } else {
                let routing = if self.cfg.ablation.disable_partition {
                    Routing::Sequential
                } else {
                    let p = &self.cfg.partition;
                    let zero = vec![0.0; sample.energies.len()];
                    let n = match noise {
                        Noise::Zero => &zero,
                        Noise::Sampled(all) => all
                            .get(i)
                            .ok_or_else(|| CoreError::shape(format!("no gumbel noise for stage {i}")))?,
                    };
                    Routing::select(ctx.g, &self.plan, &sample.energies, n, p.tau, p.hard, p.top_k)?
                };
                if let Routing::Windowed { token_mask, .. } = &routing {
                    let per = tokens / 4;
                    let mask = ctx.g.value(*token_mask).data();
                    trace
                        .selected
                        .push((0..4).filter(|&w| mask[w * per] == 1.0).collect());
                } else {
                    trace.selected.push(Vec::new());
                }
                x = gav_block(ctx, &prefix, x, &self.block, &routing)?;
            }
            trace.stages.push(x);
        }
        if !self.cfg.ablation.disable_fusion && m.fusion_blocks > 0 {
            if sample.caption.shape() != [1, m.embedding_dim] {
                return Err(CoreError::shape(format!(
                    "caption embedding {:?}, expected [1, {}]",
                    sample.caption.shape(),
                    m.embedding_dim
                )));
            }
            let caption = ctx.g.constant(sample.caption.clone());
            let use_prompt = self.fusion.prompt_tokens > 0;
            for j in 0..m.fusion_blocks {
                x = vlf_block(ctx, &format!("fusion.{j}"), x, caption, use_prompt)?;
                trace.fused.push(x);
            }
        }
        let x = layer_norm(ctx, "head.ln", x)?;
        let pooled = ctx.g.mean_rows(x);
        let w = ctx.param("head.weight")?;
        let b = ctx.param("head.bias")?;
        let logits = ctx.g.matmul(pooled, w)?;
        ctx.g.add_row(logits, b)
    }

    /// Noise-free logits as plain numbers.
    pub fn predict(&self, store: &ParamStore, sample: &Sample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store);
        let logits = self.forward(&mut ctx, sample, Noise::Zero, &mut Trace::default())?;
        Ok(ctx.g.value(logits).data().to_vec())
    }

    /// Deterministic window selection for a sample.
    pub fn partition_state(&self, sample: &Sample) -> Result<PartitionState> {
        PartitionState::from_energies(
            &sample.energies,
            self.plan.tokens(),
            self.cfg.partition.tau,
            self.cfg.partition.hard,
        )
    }
}
