use super::{difference_features, Ablation, Builder, Conv, Ctx, PromptEmbed, PromptGen, TransformerBlock};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::haze::{haze_density, HazeConfig};
use crate::tensor::{Real, Tensor};

/// `F̂_ir ⊙ H + F_vi ⊙ (1 - H) + F_vi`, with `H` broadcast over channels.
///
/// Density values outside `[0, 1]` are clamped (with a warning).
pub fn haze_guided_blend<T: Real>(
    tape: &Tape<T>,
    f_hat_ir: &Var<T>,
    f_vi: &Var<T>,
    density: &Tensor<T>,
) -> Result<Var<T>> {
    f_hat_ir.shape().expect_eq(&f_vi.shape())?;
    f_vi.shape().expect_spatial(&density.shape())?;
    if density.shape().c != 1 {
        return Err(crate::error::Error::dim("density channels", 1, density.shape().c));
    }
    let h = if density.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        log::warn!("haze density outside [0, 1]; clamping");
        density.clamp(T::zero(), T::one())
    } else {
        density.clone()
    };
    let clear = h.map(|v| T::one() - v);
    let hazy_part = tape.mul(f_hat_ir, &tape.constant(h))?;
    let clear_part = tape.mul(f_vi, &tape.constant(clear))?;
    // Grouped so the clean-region coefficient is rounded once.
    let clear_part = tape.add(&clear_part, f_vi)?;
    tape.add(&hazy_part, &clear_part)
}

/// Infrared-assisted feature restoration and the dehazing head.
#[derive(Clone, Debug)]
pub struct Restoration {
    pgm: Option<PromptGen>,
    peb: Option<PromptEmbed>,
    block: TransformerBlock,
    head: Conv,
    ablation: Ablation,
    haze: HazeConfig,
}

/// Intermediate values of one restoration pass.
#[derive(Clone, Debug)]
pub struct RestorationOut<T: Real> {
    pub prompt_ir: Option<Var<T>>,
    pub f_hat_ir: Option<Var<T>>,
    /// Haze density at feature resolution, `(1,H,W)`.
    pub density: Tensor<T>,
    pub blend: Var<T>,
    pub f_hat_vi: Var<T>,
    /// Dehazed image before clamping.
    pub dehazed: Var<T>,
}

impl Restoration {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        channels: usize,
        heads: usize,
        expansion: f64,
        pool_size: usize,
        ablation: Ablation,
        haze: HazeConfig,
    ) -> Result<Self> {
        let c = channels;
        b.scope(name, |b| {
            let uses_ir = !ablation.no_f_ir;
            let pgm = if uses_ir && !ablation.no_p_ir {
                Some(PromptGen::new(b, "pgm", c, pool_size)?)
            } else {
                None
            };
            let peb = if pgm.is_some() && !ablation.no_fr_peb {
                Some(PromptEmbed::new(b, "peb", c, heads, expansion, true)?)
            } else {
                None
            };
            Ok(Restoration {
                pgm,
                peb,
                block: TransformerBlock::new(b, "block", c, heads, expansion)?,
                head: Conv::new(b, "head", c, 3, 3, 1, true)?,
                ablation,
                haze,
            })
        })
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    pub fn has_prompt(&self) -> bool {
        self.pgm.is_some()
    }

    pub fn has_peb(&self) -> bool {
        self.peb.is_some()
    }

    /// Haze density of the (detached) visible features.
    pub fn density<T: Real>(&self, f_vi: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(haze_density(&f_vi.cast::<f64>(), &self.haze)?.density.cast())
    }

    /// Compensated infrared features `F̂_ir`, if the infrared path is enabled.
    fn compensate<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        f_vi: &Var<T>,
        f_ir: &Var<T>,
    ) -> Result<(Option<Var<T>>, Option<Var<T>>)> {
        if self.ablation.no_f_ir {
            return Ok((None, None));
        }
        let Some(pgm) = &self.pgm else {
            return Ok((None, Some(f_ir.clone())));
        };
        let prompt = pgm.forward(ctx, &difference_features(ctx.tape, f_vi, f_ir)?)?;
        let f_hat = match &self.peb {
            Some(peb) => peb.forward(ctx, f_ir, &prompt)?,
            None => ctx.tape.add(f_ir, &prompt)?,
        };
        Ok((Some(prompt), Some(f_hat)))
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, f_vi: &Var<T>, f_ir: &Var<T>) -> Result<RestorationOut<T>> {
        f_vi.shape().expect_eq(&f_ir.shape())?;
        let t = ctx.tape;
        let (prompt_ir, f_hat_ir) = self.compensate(ctx, f_vi, f_ir)?;
        let density = self.density(f_vi.value())?;
        let blend = match &f_hat_ir {
            None => f_vi.clone(),
            Some(f) if self.ablation.no_hde => t.add(f, f_vi)?,
            Some(f) => haze_guided_blend(t, f, f_vi, &density)?,
        };
        let f_hat_vi = self.block.forward(ctx, &blend)?;
        let dehazed = self.head.forward(ctx, &f_hat_vi)?;
        Ok(RestorationOut {
            prompt_ir,
            f_hat_ir,
            density,
            blend,
            f_hat_vi,
            dehazed,
        })
    }
}
