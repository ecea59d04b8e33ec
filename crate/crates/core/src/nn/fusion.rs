use super::{difference_features, Builder, Conv, Ctx, PromptEmbed, PromptGen, TransformerBlock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One fusion block: prompt adjustment, transformer block, prompt embedding.
#[derive(Clone, Debug)]
pub struct FusionStage {
    /// 1x1 channel adjustment applied to the previous stage's prompt.
    pub adjust: Option<Conv>,
    /// Per-stage prompt generator, present only when prompts are regenerated.
    pub pgm: Option<PromptGen>,
    pub block: TransformerBlock,
    pub peb: PromptEmbed,
}

/// Multi-stage prompt-embedding fusion and the reconstruction head.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub channels: usize,
    pgm: Option<PromptGen>,
    input: Conv,
    stages: Vec<FusionStage>,
    output: Conv,
}

#[derive(Clone, Debug)]
pub struct FusionOut<T: Real> {
    /// Prompt fed to each stage (zero when prompts are disabled).
    pub prompts: Vec<Var<T>>,
    /// Projected concatenation entering the first stage.
    pub input: Var<T>,
    /// Stage outputs after residual additions.
    pub stages: Vec<Var<T>>,
    /// Fused image before clamping.
    pub fused: Var<T>,
}

/// Stages after which a residual is added: from the fusion input to stage
/// three, and from stage three to stage five.
const RESIDUALS: [(usize, Option<usize>); 2] = [(2, None), (4, Some(2))];

/// Options shared by every fusion stage.
#[derive(Clone, Copy, Debug)]
pub struct FusionOptions {
    pub stages: usize,
    pub heads: usize,
    pub expansion: f64,
    pub pool_size: usize,
    pub regenerate_prompts: bool,
    pub prompts: bool,
    pub peb_blocks: bool,
}

impl Fusion {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize, opt: FusionOptions) -> Result<Self> {
        if opt.stages == 0 {
            return Err(Error::Config("fusion needs at least one stage".into()));
        }
        let c = channels;
        b.scope(name, |b| {
            let pgm = if opt.prompts {
                Some(PromptGen::new(b, "pgm", c, opt.pool_size)?)
            } else {
                None
            };
            let input = Conv::new(b, "input", 2 * c, c, 1, 1, true)?;
            let stages = (0..opt.stages)
                .map(|s| {
                    b.scope(&format!("stage{}", s + 1), |b| {
                        let adjust = if opt.prompts && s > 0 {
                            Some(Conv::new(b, "adjust", c, c, 1, 1, true)?)
                        } else {
                            None
                        };
                        let pgm = if opt.prompts && opt.regenerate_prompts && s > 0 {
                            Some(PromptGen::new(b, "pgm", c, opt.pool_size)?)
                        } else {
                            None
                        };
                        Ok(FusionStage {
                            adjust,
                            pgm,
                            block: TransformerBlock::new(b, "block", c, opt.heads, opt.expansion)?,
                            peb: PromptEmbed::new(b, "peb", c, opt.heads, opt.expansion, opt.peb_blocks)?,
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Fusion {
                channels,
                pgm,
                input,
                stages,
                output: Conv::new(b, "output", c, 3, 1, 1, true)?,
            })
        })
    }

    pub fn stages(&self) -> &[FusionStage] {
        &self.stages
    }

    pub fn output_layer(&self) -> &Conv {
        &self.output
    }

    /// First-stage prompt from the restored visible / infrared pair.
    pub fn initial_prompt<T: Real>(&self, ctx: &Ctx<'_, T>, f_hat_vi: &Var<T>, f_ir: &Var<T>) -> Result<Option<Var<T>>> {
        let diff = difference_features(ctx.tape, f_hat_vi, f_ir)?;
        self.pgm.as_ref().map(|p| p.forward(ctx, &diff)).transpose()
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, f_hat_vi: &Var<T>, f_ir: &Var<T>) -> Result<FusionOut<T>> {
        f_hat_vi.shape().expect_eq(&f_ir.shape())?;
        let t = ctx.tape;
        let mut prompt = self.initial_prompt(ctx, f_hat_vi, f_ir)?;
        let input = self.input.forward(ctx, &t.concat_channels(&[f_hat_vi, f_ir])?)?;
        let zero = t.constant(Tensor::zeros(input.shape()));

        let mut x = input.clone();
        let mut stages: Vec<Var<T>> = Vec::with_capacity(self.stages.len());
        let mut prompts = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(adjust) = &stage.adjust {
                let source = match &stage.pgm {
                    Some(pgm) => pgm.forward(ctx, &difference_features(t, f_hat_vi, f_ir)?)?,
                    None => prompt.clone().expect("prompt present when adjustment is"),
                };
                prompt = Some(adjust.forward(ctx, &source)?);
            }
            let p = prompt.clone().unwrap_or_else(|| zero.clone());
            let y = stage.block.forward(ctx, &x)?;
            x = stage.peb.forward(ctx, &y, &p)?;
            for &(at, from) in &RESIDUALS {
                if s == at {
                    let skip = from.map_or(&input, |i| &stages[i]);
                    x = t.add(&x, skip)?;
                }
            }
            prompts.push(p);
            stages.push(x.clone());
        }
        let fused = self.output.forward(ctx, &x)?;
        Ok(FusionOut {
            prompts,
            input,
            stages,
            fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::ParamStore;
    use crate::tensor::{ConvParams, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn opts() -> FusionOptions {
        FusionOptions {
            stages: 5,
            heads: 1,
            expansion: 2.66,
            pool_size: 32,
            regenerate_prompts: false,
            prompts: true,
            peb_blocks: true,
        }
    }

    fn build(o: FusionOptions, seed: u64) -> (Fusion, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Fusion::new(&mut Builder::new(&mut store, &mut rng), "fusion", 4, o).unwrap();
        (f, store)
    }

    fn zero(store: &mut ParamStore<f64>, name: &str) {
        let p = store.get_mut(name).unwrap();
        *p = Tensor::zeros(p.shape());
    }

    #[test]
    fn five_stages_shape_and_resolution() {
        let (f, store) = build(opts(), 1);
        assert_eq!(f.stages().len(), 5);
        assert!(f.stages()[0].adjust.is_none());
        assert!(f.stages()[1..].iter().all(|s| s.adjust.is_some() && s.pgm.is_none()));
        let s = Shape::new(4, 12, 20);
        let tape = Tape::inference();
        let ctx = store.bind(&tape, false);
        let out = f.forward(&ctx, &tape.constant(random(s, 2)), &tape.constant(random(s, 3))).unwrap();
        assert_eq!(out.fused.shape(), Shape::new(3, 12, 20));
        assert!(out.stages.iter().all(|v| v.shape() == s));
        assert!(out.prompts.iter().all(|v| v.shape() == s));
    }

    #[test]
    fn zeroed_stage_outputs_reduce_to_input_projection() {
        let (f, mut store) = build(opts(), 4);
        for st in f.stages() {
            for n in st.peb.output_layer().param_names() {
                zero(&mut store, n);
            }
        }
        let s = Shape::new(4, 8, 8);
        let tape = Tape::inference();
        let ctx = store.bind(&tape, false);
        let out = f.forward(&ctx, &tape.constant(random(s, 5)), &tape.constant(random(s, 6))).unwrap();
        let direct = f.output_layer().forward(&ctx, &out.input).unwrap();
        assert_eq!(out.fused.value(), direct.value());
    }

    #[test]
    fn adjust_prompt_identity_and_oracle() {
        let (f, mut store) = build(opts(), 7);
        let adjust = f.stages()[1].adjust.clone().unwrap();
        let tape = Tape::inference();
        let p = random(Shape::new(4, 6, 6), 8);
        let ctx = store.bind(&tape, false);
        let got = adjust.forward(&ctx, &tape.constant(p.clone())).unwrap();
        let params = ConvParams::new(
            4,
            4,
            1,
            store.get(&adjust.weight).unwrap().data().to_vec(),
            store.get(adjust.bias.as_ref().unwrap()).unwrap().data().to_vec(),
        )
        .unwrap();
        assert!(got.value().max_abs_diff(&crate::oracle::conv2d(&p, &params)) < 1e-12);

        *store.get_mut(&adjust.weight).unwrap() = ConvParams::<f64>::identity_1x1(4).kernel;
        zero(&mut store, adjust.bias.as_ref().unwrap());
        let ctx = store.bind(&tape, false);
        assert_eq!(adjust.forward(&ctx, &tape.constant(p.clone())).unwrap().value(), &p);
    }

    #[test]
    fn equal_features_give_uniform_prompt_weights() {
        let (f, store) = build(opts(), 9);
        let s = Shape::new(4, 8, 8);
        let feat = random(s, 10);
        let tape = Tape::inference();
        let ctx = store.bind(&tape, false);
        let pgm = f.pgm.as_ref().unwrap();
        let fv = tape.constant(feat.clone());
        let diff = difference_features(&tape, &fv, &fv).unwrap();
        assert!(diff.value().data().iter().all(|&v| v == 0.0));
        // With zero input the weight network sees only its biases.
        let w = pgm.weights(&ctx, &diff).unwrap();
        let a = f.initial_prompt(&ctx, &fv, &fv).unwrap().unwrap();
        let b = pgm.generate(&ctx, &w, 8, 8).unwrap();
        assert_eq!(a.value(), b.value());
        let other = tape.constant(random(s, 11));
        let c = f.initial_prompt(&ctx, &other, &other).unwrap().unwrap();
        assert_eq!(a.value(), c.value());
    }

    #[test]
    fn variants_build_and_run() {
        let s = Shape::new(4, 8, 8);
        for o in [
            FusionOptions { regenerate_prompts: true, ..opts() },
            FusionOptions { prompts: false, ..opts() },
            FusionOptions { peb_blocks: false, ..opts() },
        ] {
            let (f, store) = build(o, 12);
            let tape = Tape::inference();
            let ctx = store.bind(&tape, false);
            let out = f.forward(&ctx, &tape.constant(random(s, 13)), &tape.constant(random(s, 14))).unwrap();
            assert_eq!(out.fused.shape(), Shape::new(3, 8, 8));
            assert!(out.fused.value().is_finite());
            if !o.prompts {
                assert!(out.prompts.iter().all(|p| p.value().data().iter().all(|&v| v == 0.0)));
            }
        }
    }

    #[test]
    fn gradient_reaches_both_inputs() {
        let (f, store) = build(opts(), 15);
        let s = Shape::new(4, 6, 6);
        let tape = Tape::new();
        let ctx = store.bind(&tape, false);
        let (a, b) = (tape.leaf(random(s, 16)), tape.leaf(random(s, 17)));
        let out = f.forward(&ctx, &a, &b).unwrap();
        let g = tape.backward(&tape.sum(&out.fused));
        assert!(g.get_or_zeros(&a).data().iter().any(|v| v.abs() > 1e-8));
        assert!(g.get_or_zeros(&b).data().iter().any(|v| v.abs() > 1e-8));
    }
}
