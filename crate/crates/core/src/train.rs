//! Training harness: dataset loading, augmentation, AdamW with a cosine
//! learning-rate schedule, and the per-step loss log.
//!
//! One ChaCha8 generator seeded from the config drives a run. It first
//! initialises the model, then for each sample of each step draws, in order,
//! the sample index, the crop row, the crop column and (when augmenting) the
//! horizontal and vertical flip coins. Batches are drawn with replacement.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::format::{Checkpoint, Moments};
use crate::imageio::{read_gray, read_rgb};
use crate::loss::{total_loss, LossConfig};
use crate::nn::Model;
use crate::synth::Scene;
use crate::tensor::{Real, Shape, Tensor};

/// One registered training triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `(1, H, W)`.
    pub ir: Tensor<f32>,
    /// `(3, H, W)` hazy visible image.
    pub hazy: Tensor<f32>,
    /// `(3, H, W)` clear visible image.
    pub gt: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

impl Dataset {
    /// Loads `ir/`, `vi/` and `gt/` PNGs matched by file name.
    pub fn load(dir: &Path) -> Result<Self> {
        let sub = |s: &str| -> PathBuf { dir.join(s) };
        let names = png_names(&sub("ir"))?;
        if names.is_empty() {
            return Err(Error::Dataset(format!("no PNG files in {}", sub("ir").display())));
        }
        let mut samples = Vec::with_capacity(names.len());
        for name in names {
            let (vi, gt) = (sub("vi").join(&name), sub("gt").join(&name));
            if !vi.is_file() {
                return Err(Error::Dataset(format!("{name}: no visible image {}", vi.display())));
            }
            if !gt.is_file() {
                return Err(Error::Dataset(format!("{name}: no ground truth {}", gt.display())));
            }
            let sample = Sample {
                ir: read_gray(&sub("ir").join(&name))?,
                hazy: read_rgb(&vi)?,
                gt: read_rgb(&gt)?,
                name,
            };
            sample.check()?;
            samples.push(sample);
        }
        Ok(Dataset { samples })
    }

    pub fn from_scenes(scenes: &[Scene]) -> Self {
        Dataset {
            samples: scenes
                .iter()
                .enumerate()
                .map(|(i, s)| Sample {
                    name: format!("{i:04}"),
                    ir: s.ir.cast(),
                    hazy: s.hazy.cast(),
                    gt: s.clear.cast(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Smallest height and width over all samples.
    pub fn min_extent(&self) -> (usize, usize) {
        self.samples.iter().fold((usize::MAX, usize::MAX), |(h, w), s| {
            let sh = s.ir.shape();
            (h.min(sh.h), w.min(sh.w))
        })
    }
}

impl Sample {
    fn check(&self) -> Result<()> {
        let (i, v, g) = (self.ir.shape(), self.hazy.shape(), self.gt.shape());
        if (i.h, i.w) != (v.h, v.w) {
            return Err(Error::Registration {
                ir_h: i.h,
                ir_w: i.w,
                vi_h: v.h,
                vi_w: v.w,
            });
        }
        if g != v {
            return Err(Error::Dataset(format!("{}: ground truth is {g}, visible is {v}", self.name)));
        }
        Ok(())
    }
}

/// Square crop at `(y0, x0)` followed by optional flips.
pub fn crop_flip<T: Real>(t: &Tensor<T>, y0: usize, x0: usize, size: usize, hflip: bool, vflip: bool) -> Result<Tensor<T>> {
    let s = t.shape();
    if y0 + size > s.h || x0 + size > s.w {
        return Err(Error::dim("crop extent", s.h.min(s.w), size + y0.max(x0)));
    }
    Ok(Tensor::from_fn(Shape::new(s.c, size, size), |c, y, x| {
        let sy = if vflip { size - 1 - y } else { y };
        let sx = if hflip { size - 1 - x } else { x };
        t.at(c, y0 + sy, x0 + sx)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer moments and the number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update, applied in place.
pub fn adamw_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64, hp: &AdamW) -> Result<()> {
    let n = params.len();
    for (what, len) in [("gradients", grads.len()), ("first moments", state.m.len()), ("second moments", state.v.len())] {
        if len != n {
            return Err(Error::dim(what, n, len));
        }
    }
    for i in 0..n {
        let s = params[i].shape();
        grads[i].shape().expect_eq(&s)?;
        state.m[i].shape().expect_eq(&s)?;
        state.v[i].shape().expect_eq(&s)?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (hp.beta1, hp.beta2);
    let decay = 1.0 - lr * hp.weight_decay;
    for i in 0..n {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, p) in params[i].data_mut().iter_mut().enumerate() {
            let gj = g[j].to_f64_lossy();
            let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let update = (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
            *p = T::lit(p.to_f64_lossy() * decay - lr * update);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr_init: f64, lr_final: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Parameter(format!("step {step} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr_init);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + phase.cos()))
}

/// Batch-mean loss terms logged for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub l_int: f64,
    pub l_grad: f64,
    pub l_1: f64,
    pub l_total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,lr,l_int,l_grad,l_1,l_total";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.lr, r.l_int, r.l_grad, r.l_1, r.l_total);
    }
    s
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub state: AdamState<f32>,
    rng: ChaCha8Rng,
    step: u64,
    total: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let (h, w) = data.min_extent();
        if cfg.crop_size > h.min(w) {
            return Err(Error::Config(format!(
                "crop_size {} exceeds the smallest image ({h}x{w})",
                cfg.crop_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::with_rng(cfg.model, &mut rng)?;
        let state = AdamState::zeros_like(model.params.values());
        let total = (cfg.epochs * data.len().div_ceil(cfg.batch_size)) as u64;
        Ok(Trainer {
            cfg,
            model,
            state,
            rng,
            step: 0,
            total,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn draw(&mut self, data: &Dataset) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let sample = &data.samples[self.rng.gen_range(0..data.len())];
        let s = sample.ir.shape();
        let size = self.cfg.crop_size;
        let y0 = self.rng.gen_range(0..=s.h - size);
        let x0 = self.rng.gen_range(0..=s.w - size);
        let (hf, vf) = if self.cfg.augment {
            (self.rng.gen_bool(0.5), self.rng.gen_bool(0.5))
        } else {
            (false, false)
        };
        Ok((
            crop_flip(&sample.ir, y0, x0, size, hf, vf)?,
            crop_flip(&sample.hazy, y0, x0, size, hf, vf)?,
            crop_flip(&sample.gt, y0, x0, size, hf, vf)?,
        ))
    }

    /// Runs one optimisation step and returns its log row.
    pub fn step(&mut self, data: &Dataset) -> Result<LossRow> {
        let lr = cosine_lr(self.step, self.total, self.cfg.lr_init, self.cfg.lr_final)?;
        let loss_cfg = LossConfig::new(self.cfg.alpha)?;
        let batch = self.cfg.batch_size;
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let mut terms = [0.0f64; 4];
        for _ in 0..batch {
            let (ir, hazy, gt) = self.draw(data)?;
            let tape = Tape::new();
            let ctx = self.model.params.bind(&tape, true);
            let out = self.model.net.forward(&ctx, &ir, &hazy)?;
            let loss = total_loss(&tape, out.fused(), out.dehazed(), &ir, &gt, &loss_cfg)?;
            for (acc, v) in terms.iter_mut().zip(loss.values()) {
                *acc += v;
            }
            let grads = ctx.gradients(&tape.backward(&loss.total));
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch as f32;
        let mut grads = sum.expect("batch is non-empty");
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        for v in &grads {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at step {}", self.step)));
            }
        }
        let hp = AdamW {
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
        };
        adamw_step(self.model.params.values_mut(), &grads, &mut self.state, lr, &hp)?;
        let b = batch as f64;
        let row = LossRow {
            step: self.step,
            lr,
            l_int: terms[0] / b,
            l_grad: terms[1] / b,
            l_1: terms[2] / b,
            l_total: terms[3] / b,
        };
        self.step += 1;
        Ok(row)
    }

    /// Runs the remaining steps of the schedule.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&LossRow)) -> Result<Vec<LossRow>> {
        let mut rows = Vec::with_capacity((self.total - self.step) as usize);
        while self.step < self.total {
            let row = self.step(data)?;
            on_step(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.cfg.to_text(),
            params: self.model.params.clone(),
            moments: Some(Moments {
                m: self.state.m.clone(),
                v: self.state.v.clone(),
            }),
        }
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
}

pub fn train(data: &Dataset, cfg: TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, data)?;
    let total = trainer.total_steps();
    let losses = trainer.run(data, |r| {
        if r.step % 50 == 0 || r.step + 1 == total {
            log::info!("step {}/{} lr {:.3e} loss {:.5}", r.step + 1, total, r.lr, r.l_total);
        }
    })?;
    Ok(TrainOutput {
        checkpoint: trainer.checkpoint(),
        losses,
    })
}

/// Mean loss terms `[l_int, l_grad, l_1, l_total]` over whole images.
pub fn evaluate_loss(model: &Model<f32>, data: &Dataset, alpha: f64) -> Result<[f64; 4]> {
    let cfg = LossConfig::new(alpha)?;
    let mut acc = [0.0; 4];
    for s in &data.samples {
        let tape = Tape::inference();
        let ctx = model.params.bind(&tape, false);
        let out = model.net.forward(&ctx, &s.ir, &s.hazy)?;
        let terms = total_loss(&tape, out.fused(), out.dehazed(), &s.ir, &s.gt, &cfg)?;
        for (a, v) in acc.iter_mut().zip(terms.values()) {
            *a += v;
        }
    }
    Ok(acc.map(|v| v / data.len().max(1) as f64))
}
