use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion::{FusionOptions, FusionOut};
use super::restoration::RestorationOut;
use super::{Builder, Ctx, Encoder, Fusion, ParamStore, Restoration};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::haze::HazeConfig;
use crate::tensor::{replicate_channels, Real, Tensor};

/// Switches that disable one module each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Feed `F_vi` straight into the restoration block.
    pub no_f_ir: bool,
    /// Replace the density-weighted blend by `F̂_ir + F_vi`.
    pub no_hde: bool,
    /// Skip the restoration prompt: `F̂_ir = F_ir`.
    pub no_p_ir: bool,
    /// Add the restoration prompt instead of embedding it: `F̂_ir = F_ir + P̂_ir`.
    pub no_fr_peb: bool,
    /// Feed zero prompts to the fusion stages.
    pub no_p_vi: bool,
    /// Fusion prompt embedding by concatenation and a 1x1 conv only.
    pub no_fb_peb: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = ["no_f_ir", "no_hde", "no_p_ir", "no_fr_peb", "no_p_vi", "no_fb_peb"];

    /// The six single-switch configurations, in the order of `NAMES`.
    pub fn variants() -> [Ablation; 6] {
        let d = Ablation::default();
        [
            Ablation { no_f_ir: true, ..d },
            Ablation { no_hde: true, ..d },
            Ablation { no_p_ir: true, ..d },
            Ablation { no_fr_peb: true, ..d },
            Ablation { no_p_vi: true, ..d },
            Ablation { no_fb_peb: true, ..d },
        ]
    }

    pub fn flags(&self) -> [bool; 6] {
        [self.no_f_ir, self.no_hde, self.no_p_ir, self.no_fr_peb, self.no_p_vi, self.no_fb_peb]
    }

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        let slot = match name {
            "no_f_ir" => &mut self.no_f_ir,
            "no_hde" => &mut self.no_hde,
            "no_p_ir" => &mut self.no_p_ir,
            "no_fr_peb" => &mut self.no_fr_peb,
            "no_p_vi" => &mut self.no_p_vi,
            "no_fb_peb" => &mut self.no_fb_peb,
            _ => return Err(Error::Config(format!("unknown ablation switch {name}"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub expansion: f64,
    pub pool_size: usize,
    pub fusion_stages: usize,
    pub shared_encoder: bool,
    pub regenerate_prompts: bool,
    pub ablation: Ablation,
    pub haze: HazeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            encoder_depth: 2,
            heads: 1,
            expansion: 2.66,
            pool_size: 32,
            fusion_stages: 5,
            shared_encoder: false,
            regenerate_prompts: false,
            ablation: Ablation::default(),
            haze: HazeConfig::features(),
        }
    }
}

/// Network topology; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    encoder_ir: Option<Encoder>,
    encoder_vi: Encoder,
    restoration: Restoration,
    fusion: Fusion,
}

#[derive(Clone, Debug)]
pub struct Forward<T: Real> {
    pub f_ir: Var<T>,
    pub f_vi: Var<T>,
    pub restoration: RestorationOut<T>,
    pub fusion: FusionOut<T>,
}

impl<T: Real> Forward<T> {
    /// Fused image before clamping.
    pub fn fused(&self) -> &Var<T> {
        &self.fusion.fused
    }

    /// Dehazed visible image before clamping.
    pub fn dehazed(&self) -> &Var<T> {
        &self.restoration.dehazed
    }
}

/// Clamped outputs of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T: Real> {
    pub fused: Tensor<T>,
    pub dehazed: Tensor<T>,
    pub density: Tensor<T>,
}

impl Network {
    /// Builds the topology, drawing initial parameters from `rng`.
    pub fn build(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Network, ParamStore<f64>)> {
        let c = config.channels;
        if c == 0 || config.pool_size == 0 || config.fusion_stages == 0 {
            return Err(Error::Config("channels, pool size and stage count must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, rng);
        let (ed, h, e) = (config.encoder_depth, config.heads, config.expansion);
        let (encoder_ir, encoder_vi) = if config.shared_encoder {
            (None, Encoder::new(&mut b, "encoder", 3, c, ed, h, e)?)
        } else {
            (
                Some(Encoder::new(&mut b, "encoder_ir", 1, c, ed, h, e)?),
                Encoder::new(&mut b, "encoder_vi", 3, c, ed, h, e)?,
            )
        };
        let restoration = Restoration::new(&mut b, "restoration", c, h, e, config.pool_size, config.ablation, config.haze)?;
        let fusion = Fusion::new(
            &mut b,
            "fusion",
            c,
            FusionOptions {
                stages: config.fusion_stages,
                heads: h,
                expansion: e,
                pool_size: config.pool_size,
                regenerate_prompts: config.regenerate_prompts,
                prompts: !config.ablation.no_p_vi,
                peb_blocks: !config.ablation.no_fb_peb,
            },
        )?;
        let net = Network {
            config,
            encoder_ir,
            encoder_vi,
            restoration,
            fusion,
        };
        Ok((net, store))
    }

    pub fn restoration(&self) -> &Restoration {
        &self.restoration
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn encoders(&self) -> (Option<&Encoder>, &Encoder) {
        (self.encoder_ir.as_ref(), &self.encoder_vi)
    }

    pub fn encode<T: Real>(&self, ctx: &Ctx<'_, T>, ir: &Tensor<T>, vi: &Tensor<T>) -> Result<(Var<T>, Var<T>)> {
        check_pair(ir, vi)?;
        let t = ctx.tape;
        let vi = t.constant(vi.clone());
        let f_vi = self.encoder_vi.forward(ctx, &vi)?;
        let f_ir = match &self.encoder_ir {
            Some(enc) => enc.forward(ctx, &t.constant(ir.clone()))?,
            None => self.encoder_vi.forward(ctx, &t.constant(replicate_channels(ir, 3)?))?,
        };
        Ok((f_ir, f_vi))
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, ir: &Tensor<T>, vi: &Tensor<T>) -> Result<Forward<T>> {
        let (f_ir, f_vi) = self.encode(ctx, ir, vi)?;
        let restoration = self.restoration.forward(ctx, &f_vi, &f_ir)?;
        let fusion = self.fusion.forward(ctx, &restoration.f_hat_vi, &f_ir)?;
        Ok(Forward {
            f_ir,
            f_vi,
            restoration,
            fusion,
        })
    }
}

fn check_pair<T: Real>(ir: &Tensor<T>, vi: &Tensor<T>) -> Result<()> {
    let (si, sv) = (ir.shape(), vi.shape());
    if si.c != 1 {
        return Err(Error::dim("infrared channels", 1, si.c));
    }
    if sv.c != 3 {
        return Err(Error::dim("visible channels", 3, sv.c));
    }
    if si.h != sv.h || si.w != sv.w {
        return Err(Error::Registration {
            ir_h: si.h,
            ir_w: si.w,
            vi_h: sv.h,
            vi_w: sv.w,
        });
    }
    Ok(())
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (net, store) = Network::build(config, rng)?;
        Ok(Model {
            net,
            params: store.cast(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Gradient-free forward pass with outputs clamped to `[0, 1]`.
    pub fn infer(&self, ir: &Tensor<T>, vi: &Tensor<T>) -> Result<Inference<T>> {
        let tape = Tape::inference();
        let ctx = self.params.bind(&tape, false);
        let out = self.net.forward(&ctx, ir, vi)?;
        let (s, v) = (out.restoration.density.shape(), vi.shape());
        let density = if (s.h, s.w) == (v.h, v.w) {
            out.restoration.density.clone()
        } else {
            crate::tensor::bilinear_resize(&out.restoration.density, v.h, v.w)?
        };
        Ok(Inference {
            fused: out.fused().value().clamp(T::zero(), T::one()),
            dehazed: out.dehazed().value().clamp(T::zero(), T::one()),
            density,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::Rng;

    fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(c, h, w), |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 4,
            encoder_depth: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_topology() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.net.fusion().stages().len(), 5);
        assert!(m.net.encoders().0.is_some());
        assert!(m.params.names().iter().any(|n| n == "restoration.pgm.pool"));
        assert_eq!(m.params.get("restoration.pgm.pool").unwrap().shape(), Shape::new(16, 32, 32));
    }

    #[test]
    fn inference_shapes_and_clamping() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        let out = m.infer(&image(1, 20, 28, 2), &image(3, 20, 28, 3)).unwrap();
        assert_eq!(out.fused.shape(), Shape::new(3, 20, 28));
        assert_eq!(out.dehazed.shape(), Shape::new(3, 20, 28));
        assert_eq!(out.density.shape(), Shape::new(1, 20, 28));
        for t in [&out.fused, &out.dehazed, &out.density] {
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn registration_and_channel_errors() {
        let m = Model::<f32>::new(small(), 1).unwrap();
        assert!(matches!(
            m.infer(&image(1, 20, 28, 2), &image(3, 20, 30, 3)),
            Err(Error::Registration { ir_w: 28, vi_w: 30, .. })
        ));
        assert!(matches!(m.infer(&image(3, 8, 8, 2), &image(3, 8, 8, 3)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn seeds_control_initialisation() {
        let a = Model::<f32>::new(small(), 5).unwrap();
        let b = Model::<f32>::new(small(), 5).unwrap();
        let c = Model::<f32>::new(small(), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn shared_encoder_and_regeneration_build() {
        for cfg in [
            ModelConfig { shared_encoder: true, ..small() },
            ModelConfig { regenerate_prompts: true, ..small() },
        ] {
            let m = Model::<f32>::new(cfg, 7).unwrap();
            let out = m.infer(&image(1, 16, 16, 8), &image(3, 16, 16, 9)).unwrap();
            assert_eq!(out.fused.shape(), Shape::new(3, 16, 16));
        }
        let m = Model::<f32>::new(ModelConfig { shared_encoder: true, ..small() }, 7).unwrap();
        assert!(m.net.encoders().0.is_none());
    }

    #[test]
    fn every_ablation_builds_and_runs() {
        for (name, ab) in Ablation::NAMES.iter().zip(Ablation::variants()) {
            let mut check = Ablation::default();
            check.set(name, true).unwrap();
            assert_eq!(check, ab);
            let m = Model::<f32>::new(ModelConfig { ablation: ab, ..small() }, 10).unwrap();
            let out = m.infer(&image(1, 16, 16, 11), &image(3, 16, 16, 12)).unwrap();
            assert_eq!(out.fused.shape(), Shape::new(3, 16, 16));
            assert!(out.fused.is_finite());
        }
        assert!(Ablation::default().set("no_xyz", true).is_err());
    }
}
