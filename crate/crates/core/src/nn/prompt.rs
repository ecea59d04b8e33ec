use super::{Builder, Conv, Ctx, Init, TransformerBlock};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape};

/// Per-modality feature encoder: a 3x3 embedding, a stack of transformer
/// blocks and a 1x1 output projection.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_channels: usize,
    pub channels: usize,
    embed: Conv,
    blocks: Vec<TransformerBlock>,
    output: Conv,
}

impl Encoder {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        channels: usize,
        depth: usize,
        heads: usize,
        expansion: f64,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let embed = Conv::new(b, "embed", in_channels, channels, 3, 1, true)?;
            let blocks = (0..depth)
                .map(|i| TransformerBlock::new(b, &format!("block{i}"), channels, heads, expansion))
                .collect::<Result<_>>()?;
            let output = Conv::new(b, "output", channels, channels, 1, 1, true)?;
            Ok(Encoder {
                in_channels,
                channels,
                embed,
                blocks,
                output,
            })
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, image: &Var<T>) -> Result<Var<T>> {
        let mut x = self.embed.forward(ctx, image)?;
        for blk in &self.blocks {
            x = blk.forward(ctx, &x)?;
        }
        self.output.forward(ctx, &x)
    }

    pub fn output_layer(&self) -> &Conv {
        &self.output
    }
}

/// `F_vi - F_ir`: removes what the two modalities share.
pub fn difference_features<T: Real>(tape: &Tape<T>, f_vi: &Var<T>, f_ir: &Var<T>) -> Result<Var<T>> {
    f_vi.shape().expect_eq(&f_ir.shape())?;
    tape.sub(f_vi, f_ir)
}

/// Prompt generation: a weight-prediction network selects channels of a
/// learnable prompt pool, which is then mixed by a 1x1 and a 3x3 conv.
#[derive(Clone, Debug)]
pub struct PromptGen {
    pub channels: usize,
    pub pool_size: usize,
    weight_conv: Conv,
    linear: Conv,
    pool: String,
    mix: Conv,
    refine: Conv,
}

/// Half-width of the uniform prompt-pool initialisation.
pub const POOL_INIT: f64 = 0.02;

impl PromptGen {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, pool_size: usize) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::Config("prompt pool size must be positive".into()));
        }
        let c = channels;
        b.scope(name, |b| {
            Ok(PromptGen {
                channels,
                pool_size,
                weight_conv: Conv::new(b, "weight_conv", c, c, 3, 1, true)?,
                linear: Conv::new(b, "linear", c, c, 1, 1, true)?,
                pool: b.param("pool", Shape::new(c, pool_size, pool_size), Init::Uniform(POOL_INIT))?,
                mix: Conv::new(b, "mix", c, c, 1, 1, true)?,
                refine: Conv::new(b, "refine", c, c, 3, 1, true)?,
            })
        })
    }

    pub fn pool_name(&self) -> &str {
        &self.pool
    }

    pub fn layers(&self) -> [&Conv; 4] {
        [&self.weight_conv, &self.linear, &self.mix, &self.refine]
    }

    /// Softmax channel weights `(C,1,1)`; broadcasting them spatially gives
    /// the `C x H x W` weight field.
    pub fn weights<T: Real>(&self, ctx: &Ctx<'_, T>, diff: &Var<T>) -> Result<Var<T>> {
        let t = ctx.tape;
        let g = t.global_average_pool(&self.weight_conv.forward(ctx, diff)?)?;
        Ok(t.softmax_channels(&self.linear.forward(ctx, &g)?))
    }

    /// `W_p ⊙ resize(P)` before the mixing convolutions.
    pub fn weighted_pool<T: Real>(&self, ctx: &Ctx<'_, T>, weights: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        if weights.shape() != Shape::new(self.channels, 1, 1) {
            return Err(Error::dim("prompt weights", self.channels, weights.shape().c));
        }
        let t = ctx.tape;
        let pool = t.bilinear_resize(ctx.param(&self.pool), h, w)?;
        t.mul(&pool, weights)
    }

    pub fn generate<T: Real>(&self, ctx: &Ctx<'_, T>, weights: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let p = self.weighted_pool(ctx, weights, h, w)?;
        self.refine.forward(ctx, &self.mix.forward(ctx, &p)?)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, diff: &Var<T>) -> Result<Var<T>> {
        let s = diff.shape();
        let w = self.weights(ctx, diff)?;
        self.generate(ctx, &w, s.h, s.w)
    }
}

/// Prompt embedding: concatenate feature and prompt, run a transformer block
/// at double width and project back. Without the block it degenerates to
/// concatenation plus a 1x1 conv.
#[derive(Clone, Debug)]
pub struct PromptEmbed {
    pub channels: usize,
    block: Option<TransformerBlock>,
    project: Conv,
}

impl PromptEmbed {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        heads: usize,
        expansion: f64,
        with_block: bool,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let block = if with_block {
                Some(TransformerBlock::new(b, "block", 2 * channels, heads, expansion)?)
            } else {
                None
            };
            Ok(PromptEmbed {
                channels,
                block,
                project: Conv::new(b, "project", 2 * channels, channels, 1, 1, true)?,
            })
        })
    }

    pub fn has_block(&self) -> bool {
        self.block.is_some()
    }

    pub fn output_layer(&self) -> &Conv {
        &self.project
    }

    pub fn block(&self) -> Option<&TransformerBlock> {
        self.block.as_ref()
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, feature: &Var<T>, prompt: &Var<T>) -> Result<Var<T>> {
        feature.shape().expect_eq(&prompt.shape())?;
        if feature.shape().c != self.channels {
            return Err(Error::dim("channels", self.channels, feature.shape().c));
        }
        let mut x = ctx.tape.concat_channels(&[feature, prompt])?;
        if let Some(blk) = &self.block {
            x = blk.forward(ctx, &x)?;
        }
        self.project.forward(ctx, &x)
    }
}
