//! Built-in verification suite: gradient checks for every differentiable
//! operation, comparisons against the naive-loop oracles, haze and blend
//! identities, haze-estimation fidelity on synthetic scenes, and metric
//! sanity checks. Used by the `selftest` and `gradcheck` commands and by the
//! acceptance tests.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{check_graph, check_graph_at, GradCheckReport};
use crate::haze::{self, HazeConfig, HazeParams};
use crate::loss::{self, LossConfig};
use crate::metrics;
use crate::nn::{
    haze_guided_blend, Ablation, Builder, Encoder, Fusion, FusionOptions, ParamStore, PromptEmbed, PromptGen,
    Restoration, TransformerBlock,
};
use crate::oracle;
use crate::synth;
use crate::tensor::{self as ops, ConvParams, Shape, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;
pub const GRAD_BUDGET: Duration = Duration::from_secs(60);
/// Central-difference step near the cube root of f64 machine epsilon, which
/// balances truncation against cancellation in `f(x+e) - f(x-e)`.
pub const GRAD_EPS: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-9;
pub const ORACLE_INSTANCES: u64 = 50;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const HDE_SCENES: usize = 20;
pub const HDE_SIZE: usize = 128;
pub const HDE_MIN_PEARSON: f64 = 0.8;
pub const HDE_BUDGET: Duration = Duration::from_secs(1);

/// Coordinates sampled per seed for layers with many parameters.
const SAMPLED_COORDS: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(id: u8, name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult { id, name, passed, detail }
    }

    fn failed(id: u8, name: &'static str, err: crate::Error) -> Self {
        CheckResult::new(id, name, false, format!("error: {err}"))
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks.
fn signed_away(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)`: a scalar objective with non-uniform output weights.
fn project(t: &Tape<f64>, y: &Var<f64>, r: &Tensor<f64>) -> Result<Var<f64>> {
    Ok(t.sum(&t.mul(y, &t.constant(r.clone()))?))
}

fn coords(rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>]) -> Vec<usize> {
    let n: usize = inputs.iter().map(|t| t.len()).sum();
    let mut idx = sample(rng, n, SAMPLED_COORDS.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Parameters of a freshly built layer, perturbed away from zero so that
/// zero-initialised biases also carry signal.
fn layer_store(seed: u64, build: impl FnOnce(&mut Builder<'_>) -> Result<()>) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(&mut Builder::new(&mut store, &mut rng))?;
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in store.values_mut() {
        for x in v.data_mut() {
            *x += jitter.gen_range(-0.2..0.2);
        }
    }
    Ok(store)
}

type Case = fn(u64) -> Result<GradCheckReport>;

fn conv_case(seed: u64, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, bias: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, Shape::new(cin, 7, 6), -1.0, 1.0);
    let w = uniform(&mut rng, Shape::new(cout, cin / groups, k * k), -1.0, 1.0);
    let b = uniform(&mut rng, Shape::new(cout, 1, 1), -1.0, 1.0);
    let pad = k / 2;
    let geometry = ConvParams { stride, padding: pad, groups, in_channels: cin, ..ConvParams::new(cout, cin / groups, k, w.data().to_vec(), vec![0.0; cout])? };
    let probe = ops::conv2d(&x, &geometry)?;
    let r = uniform(&mut rng, probe.shape(), -1.0, 1.0);
    let mut inputs = vec![x, w];
    if bias {
        inputs.push(b);
    }
    check_graph(&inputs, GRAD_EPS, |t, v| {
        let y = t.conv2d(&v[0], &v[1], v.get(2), k, stride, pad, groups)?;
        project(t, &y, &r)
    })
}

fn unary_case(seed: u64, shape: Shape, away: bool, f: fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = if away { signed_away(&mut rng, shape) } else { uniform(&mut rng, shape, -2.0, 2.0) };
    let probe = f(&Tape::inference(), &Tape::<f64>::inference().constant(x.clone()))?;
    let r = uniform(&mut rng, probe.shape(), -1.0, 1.0);
    check_graph(&[x], GRAD_EPS, |t, v| project(t, &f(t, &v[0])?, &r))
}

fn elementwise_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(3, 4, 5);
    let a = uniform(&mut rng, s, -1.0, 1.0);
    let b = uniform(&mut rng, s, -1.0, 1.0);
    let g = uniform(&mut rng, Shape::new(3, 1, 1), -1.0, 1.0);
    let m = uniform(&mut rng, Shape::new(1, 4, 5), -1.0, 1.0);
    let r = uniform(&mut rng, s, -1.0, 1.0);
    check_graph(&[a, b, g, m], GRAD_EPS, |t, v| {
        let x = t.sub(&t.add(&v[0], &v[1])?, &t.mul(&v[0], &v[1])?)?;
        let x = t.mul(&t.mul(&x, &v[2])?, &v[3])?;
        let x = t.scale(&x, 1.7);
        Ok(t.add(&project(t, &x, &r)?, &t.mean(&v[1]))?)
    })
}

fn channel_ops_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, Shape::new(2, 4, 4), -1.0, 1.0);
    let b = uniform(&mut rng, Shape::new(3, 4, 4), -1.0, 1.0);
    let r = uniform(&mut rng, Shape::new(3, 4, 4), -1.0, 1.0);
    check_graph(&[a, b], GRAD_EPS, |t, v| {
        let cat = t.concat_channels(&[&v[0], &v[1]])?;
        let mid = t.slice_channels(&cat, 1, 4)?;
        project(t, &mid, &r)
    })
}

fn layer_norm_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, Shape::new(4, 5, 5), -1.0, 1.0);
    let g = uniform(&mut rng, Shape::new(4, 1, 1), 0.5, 1.5);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    check_graph(&[x, g], GRAD_EPS, |t, v| project(t, &t.layer_norm(&v[0], &v[1])?, &r))
}

fn attention_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(4, 4, 4);
    let q = uniform(&mut rng, s, -1.0, 1.0);
    let k = uniform(&mut rng, s, -1.0, 1.0);
    let v = uniform(&mut rng, s, -1.0, 1.0);
    let temp = uniform(&mut rng, Shape::new(2, 1, 1), 0.5, 2.0);
    let r = uniform(&mut rng, s, -1.0, 1.0);
    check_graph(&[q, k, v, temp], GRAD_EPS, |t, x| {
        project(t, &t.channel_attention(&x[0], &x[1], &x[2], &x[3], 2)?, &r)
    })
}

fn resize_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, Shape::new(2, 5, 4), -1.0, 1.0);
    let (up, down) = (uniform(&mut rng, Shape::new(2, 9, 7), -1.0, 1.0), uniform(&mut rng, Shape::new(2, 3, 2), -1.0, 1.0));
    check_graph(&[x], GRAD_EPS, |t, v| {
        let a = project(t, &t.bilinear_resize(&v[0], 9, 7)?, &up)?;
        let b = project(t, &t.bilinear_resize(&v[0], 3, 2)?, &down)?;
        t.add(&a, &b)
    })
}

/// Layer cases: layer inputs first, then every parameter, checking a random
/// subset of coordinates.
fn layer_case(
    seed: u64,
    store: ParamStore<f64>,
    features: Vec<Tensor<f64>>,
    out_shape: Shape,
    fwd: impl Fn(&crate::nn::Ctx<'_, f64>, &[Var<f64>]) -> Result<Var<f64>>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let r = uniform(&mut rng, out_shape, -1.0, 1.0);
    let nf = features.len();
    let mut inputs = features;
    inputs.extend(store.values().iter().cloned());
    let idx = coords(&mut rng, &inputs);
    check_graph_at(&inputs, GRAD_EPS, Some(&idx), |t, v| {
        let ctx = store.bind_vars(t, v[nf..].to_vec())?;
        project(t, &fwd(&ctx, &v[..nf])?, &r)
    })
}

const C: usize = 4;

fn feat(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), Shape::new(c, h, w), -1.0, 1.0)
}

fn block_case(seed: u64) -> Result<GradCheckReport> {
    let mut layer = None;
    let store = layer_store(seed, |b| {
        layer = Some(TransformerBlock::new(b, "block", C, 2, 2.66)?);
        Ok(())
    })?;
    let layer = layer.expect("built");
    let s = Shape::new(C, 5, 6);
    layer_case(seed, store, vec![feat(seed, C, 5, 6)], s, |ctx, v| layer.forward(ctx, &v[0]))
}

fn encoder_case(seed: u64) -> Result<GradCheckReport> {
    let mut layer = None;
    let store = layer_store(seed, |b| {
        layer = Some(Encoder::new(b, "enc", 3, C, 1, 1, 2.66)?);
        Ok(())
    })?;
    let layer = layer.expect("built");
    layer_case(seed, store, vec![feat(seed, 3, 5, 5)], Shape::new(C, 5, 5), |ctx, v| layer.forward(ctx, &v[0]))
}

fn prompt_gen_case(seed: u64) -> Result<GradCheckReport> {
    let mut layer = None;
    let store = layer_store(seed, |b| {
        layer = Some(PromptGen::new(b, "pgm", C, 4)?);
        Ok(())
    })?;
    let layer = layer.expect("built");
    layer_case(seed, store, vec![feat(seed, C, 6, 5)], Shape::new(C, 6, 5), |ctx, v| layer.forward(ctx, &v[0]))
}

fn prompt_embed_case(seed: u64, with_block: bool) -> Result<GradCheckReport> {
    let mut layer = None;
    let store = layer_store(seed, |b| {
        layer = Some(PromptEmbed::new(b, "peb", C, 1, 2.66, with_block)?);
        Ok(())
    })?;
    let layer = layer.expect("built");
    let inputs = vec![feat(seed, C, 5, 5), feat(seed + 1000, C, 5, 5)];
    layer_case(seed, store, inputs, Shape::new(C, 5, 5), |ctx, v| layer.forward(ctx, &v[0], &v[1]))
}

fn blend_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(3, 4, 5);
    let (a, b) = (uniform(&mut rng, s, -1.0, 1.0), uniform(&mut rng, s, -1.0, 1.0));
    let h = uniform(&mut rng, Shape::new(1, 4, 5), 0.0, 1.0);
    let r = uniform(&mut rng, s, -1.0, 1.0);
    check_graph(&[a, b], GRAD_EPS, |t, v| project(t, &haze_guided_blend(t, &v[0], &v[1], &h)?, &r))
}

/// Restoration with `F_vi` held constant: the density depends only on `F_vi`
/// and enters the graph detached, so it must not move during differencing.
fn restoration_case(seed: u64) -> Result<GradCheckReport> {
    let mut layer = None;
    let store = layer_store(seed, |b| {
        layer = Some(Restoration::new(b, "res", C, 1, 2.66, 4, Ablation::default(), HazeConfig::features())?);
        Ok(())
    })?;
    let layer = layer.expect("built");
    let f_vi = feat(seed + 2000, C, 6, 6);
    layer_case(seed, store, vec![feat(seed, C, 6, 6)], Shape::new(3, 6, 6), |ctx, v| {
        let fv = ctx.tape.constant(f_vi.clone());
        Ok(layer.forward(ctx, &fv, &v[0])?.dehazed)
    })
}

fn fusion_case(seed: u64) -> Result<GradCheckReport> {
    let opt = FusionOptions {
        stages: 5,
        heads: 1,
        expansion: 2.66,
        pool_size: 4,
        regenerate_prompts: false,
        prompts: true,
        peb_blocks: true,
    };
    let mut layer = None;
    let store = layer_store(seed, |b| {
        layer = Some(Fusion::new(b, "fusion", C, opt)?);
        Ok(())
    })?;
    let layer = layer.expect("built");
    let inputs = vec![feat(seed, C, 5, 5), feat(seed + 3000, C, 5, 5)];
    layer_case(seed, store, inputs, Shape::new(3, 5, 5), |ctx, v| Ok(layer.forward(ctx, &v[0], &v[1])?.fused))
}

/// Image triples for the loss checks, with predictions kept away from the
/// absolute-value kinks of the intensity and restoration terms.
fn loss_inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(3, 6, 6);
    let ir = uniform(&mut rng, Shape::new(1, 6, 6), 0.0, 1.0);
    let gt = uniform(&mut rng, s, 0.0, 1.0);
    let off = signed_away(&mut rng, s);
    let fused = Tensor::from_fn(s, |c, y, x| gt.at(c, y, x).max(ir.at(0, y, x)) + 0.3 * off.at(c, y, x));
    let off = signed_away(&mut rng, s);
    let dehazed = Tensor::from_fn(s, |c, y, x| gt.at(c, y, x) + 0.3 * off.at(c, y, x));
    (fused, dehazed, ir, gt)
}

/// Loss objective plus a small linear tilt `sum(c * x)`. Sobel weights are
/// small integers, so signed contributions to a pixel's gradient can cancel
/// exactly; the tilt keeps every coordinate's gradient away from zero, where
/// finite-difference roundoff would dominate the relative error. Central
/// differences are exact for the linear term.
fn tilted_loss_check(seed: u64, inputs: &[Tensor<f64>], loss: impl Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x711);
    let tilts: Vec<Tensor<f64>> = inputs.iter().map(|x| signed_away(&mut rng, x.shape()).map(|v| v * 2e-3)).collect();
    check_graph(inputs, GRAD_EPS, |t, v| {
        let mut f = loss(t, v)?;
        for (x, c) in v.iter().zip(&tilts) {
            f = t.add(&f, &project(t, x, c)?)?;
        }
        Ok(f)
    })
}

fn l1_case(seed: u64) -> Result<GradCheckReport> {
    let (_, dehazed, _, gt) = loss_inputs(seed);
    tilted_loss_check(seed, &[dehazed], |t, v| loss::l1_restoration(t, &v[0], &gt))
}

fn gradient_loss_case(seed: u64) -> Result<GradCheckReport> {
    let (fused, _, ir, gt) = loss_inputs(seed);
    tilted_loss_check(seed, &[fused], |t, v| loss::gradient_loss(t, &v[0], &ir, &gt))
}

fn intensity_case(seed: u64) -> Result<GradCheckReport> {
    let (fused, _, ir, gt) = loss_inputs(seed);
    tilted_loss_check(seed, &[fused], |t, v| loss::intensity_loss(t, &v[0], &ir, &gt))
}

fn total_case(seed: u64) -> Result<GradCheckReport> {
    let (fused, dehazed, ir, gt) = loss_inputs(seed);
    let alpha = ChaCha8Rng::seed_from_u64(seed).gen_range(0.5..2.0);
    let cfg = LossConfig::new(alpha)?;
    tilted_loss_check(seed, &[fused, dehazed], |t, v| Ok(loss::total_loss(t, &v[0], &v[1], &ir, &gt, &cfg)?.total))
}

/// Every differentiable building block, by name.
pub fn gradient_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d 3x3", |s| conv_case(s, 3, 4, 3, 1, 1, true)),
        ("conv2d strided grouped", |s| conv_case(s, 4, 6, 3, 2, 2, true)),
        ("conv2d depthwise", |s| conv_case(s, 3, 3, 3, 1, 3, false)),
        ("conv2d 1x1", |s| conv_case(s, 3, 5, 1, 1, 1, true)),
        ("gelu", |s| unary_case(s, Shape::new(2, 4, 5), false, |t, x| Ok(t.gelu(x)))),
        ("abs", |s| unary_case(s, Shape::new(2, 4, 5), true, |t, x| Ok(t.abs(x)))),
        ("add/sub/mul/scale/mean", elementwise_case),
        ("concat/slice", channel_ops_case),
        ("softmax", |s| unary_case(s, Shape::new(5, 3, 4), false, |t, x| Ok(t.softmax_channels(x)))),
        ("global average pool", |s| unary_case(s, Shape::new(3, 4, 5), false, |t, x| t.global_average_pool(x))),
        ("bilinear resize", resize_case),
        ("norm", layer_norm_case),
        ("channel attention", attention_case),
        ("sobel magnitude", |s| unary_case(s, Shape::new(2, 6, 6), false, |t, x| Ok(t.sobel_magnitude(x)))),
        ("transformer block", block_case),
        ("encoder", encoder_case),
        ("prompt generator", prompt_gen_case),
        ("prompt embedding", |s| prompt_embed_case(s, true)),
        ("prompt embedding without block", |s| prompt_embed_case(s, false)),
        ("haze-guided blend", blend_case),
        ("restoration", restoration_case),
        ("fusion", fusion_case),
        ("restoration loss", l1_case),
        ("gradient loss", gradient_loss_case),
        ("intensity loss", intensity_case),
        ("total loss", total_case),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseSummary {
    pub name: &'static str,
    /// Largest relative error over all seeds.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Runs every gradient case on seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CaseSummary>> {
    gradient_cases()
        .into_iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            let mut checked = 0;
            for seed in 0..seeds {
                let r = case(seed)?;
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
            }
            Ok(CaseSummary {
                name,
                max_rel_error: worst,
                checked,
            })
        })
        .collect()
}

pub fn gradient_correctness() -> CheckResult {
    const NAME: &str = "gradient correctness";
    let t0 = Instant::now();
    let suite = match gradient_suite(GRAD_SEEDS) {
        Ok(s) => s,
        Err(e) => return CheckResult::failed(1, NAME, e),
    };
    let elapsed = t0.elapsed();
    let worst = suite.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("cases exist");
    let passed = worst.max_rel_error < GRAD_TOL && elapsed < GRAD_BUDGET;
    CheckResult::new(
        1,
        NAME,
        passed,
        format!(
            "{} cases x {GRAD_SEEDS} seeds, worst {:.2e} ({}), {:.1}s",
            suite.len(),
            worst.max_rel_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

fn random_conv(rng: &mut ChaCha8Rng, x_shape: Shape) -> Result<ConvParams<f64>> {
    let cin = x_shape.c;
    let groups = *[1, cin].iter().chain((2..cin).filter(|g| cin % g == 0).collect::<Vec<_>>().iter()).nth(rng.gen_range(0..2)).unwrap_or(&1);
    let per_group_out = rng.gen_range(1..=3);
    let cout = groups * per_group_out;
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let w: Vec<f64> = (0..cout * (cin / groups) * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut p = ConvParams::new(cout, cin / groups, k, w, b)?;
    p.groups = groups;
    p.in_channels = cin;
    p.padding = rng.gen_range(0..=k / 2 + 1);
    p.stride = rng.gen_range(1..=2);
    Ok(p)
}

/// Maximum discrepancy between each fast operation and its loop oracle over
/// `instances` random inputs up to `8 x 32 x 32`.
pub fn oracle_discrepancies(instances: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut worst: Vec<(&'static str, f64)> = ["conv2d", "softmax", "global average pool", "channel average pool", "bilinear resize", "dark channel", "guided filter"]
        .iter()
        .map(|&n| (n, 0.0))
        .collect();
    let mut bump = |i: usize, d: f64| worst[i].1 = worst[i].1.max(if d.is_nan() { f64::INFINITY } else { d });
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(rng.gen_range(1..=8), rng.gen_range(5..=32), rng.gen_range(5..=32));
        let x = uniform(&mut rng, s, -1.0, 1.0);
        let p = random_conv(&mut rng, s)?;
        bump(0, ops::conv2d(&x, &p)?.max_abs_diff(&oracle::conv2d(&x, &p)));
        let logits = uniform(&mut rng, s, -8.0, 8.0);
        bump(1, ops::softmax_channels(&logits).max_abs_diff(&oracle::softmax_channels(&logits)));
        bump(2, ops::global_average_pool(&x)?.max_abs_diff(&oracle::global_average_pool(&x)));
        bump(3, ops::channel_average_pool(&x).max_abs_diff(&oracle::channel_average_pool(&x)));
        let (nh, nw) = (rng.gen_range(1..=40), rng.gen_range(1..=40));
        bump(4, ops::bilinear_resize(&x, nh, nw)?.max_abs_diff(&oracle::bilinear_resize(&x, nh, nw)));
        let img = uniform(&mut rng, s, 0.0, 1.0);
        let window = 2 * rng.gen_range(0..=7) + 1;
        bump(5, haze::dark_channel(&img, window)?.max_abs_diff(&oracle::dark_channel(&img, window)));
        let guide = uniform(&mut rng, Shape::new(1, s.h, s.w), 0.0, 1.0);
        let input = uniform(&mut rng, Shape::new(1, s.h, s.w), 0.0, 1.0);
        let (radius, eps) = (rng.gen_range(1..=8), [0.0, 1e-4, 1e-2][rng.gen_range(0..3)]);
        let fast = haze::guided_filter(&guide, &input, radius, eps)?;
        bump(6, fast.max_abs_diff(&oracle::guided_filter(&guide, &input, radius, eps.max(1e-4))).min(
            if eps == 0.0 { fast.max_abs_diff(&oracle::guided_filter(&guide, &input, radius, 0.0)) } else { f64::INFINITY },
        ));
    }
    Ok(worst)
}

pub fn oracle_equivalence() -> CheckResult {
    const NAME: &str = "tensor-op oracle equivalence";
    match oracle_discrepancies(ORACLE_INSTANCES) {
        Ok(w) => {
            let passed = w.iter().all(|(_, d)| *d <= ORACLE_TOL);
            let detail = w.iter().map(|(n, d)| format!("{n} {d:.1e}")).collect::<Vec<_>>().join(", ");
            CheckResult::new(2, NAME, passed, format!("{ORACLE_INSTANCES} instances: {detail}"))
        }
        Err(e) => CheckResult::failed(2, NAME, e),
    }
}

fn haze_identity_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clear = uniform(&mut rng, Shape::new(3, 24, 20), 0.0, 1.0);
    let depth = uniform(&mut rng, Shape::new(1, 24, 20), 0.0, 3.0);
    let airlight = [0.8, 0.9, 0.75];

    let zero_beta = haze::synthesize_haze(&clear, &HazeParams { airlight, beta: 0.0, depth: depth.clone() })?;
    let bit_equal = zero_beta.data().iter().zip(clear.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let far = Tensor::full(depth.shape(), f64::INFINITY);
    let opaque = haze::synthesize_haze(&clear, &HazeParams { airlight, beta: 1.0, depth: far })?;
    let opaque_err = Tensor::from_fn(opaque.shape(), |c, y, x| opaque.at(c, y, x) - airlight[c]).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let zeros = Tensor::<f64>::zeros(Shape::new(4, 16, 16));
    let t_zero = haze::transmission_map(&zeros, &[0.7; 4], haze::OMEGA, 7)?;
    let zero_err = t_zero.data().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));

    let a = [0.6, 0.8, 0.9, 0.7];
    let equal = Tensor::from_fn(Shape::new(4, 16, 16), |c, _, _| a[c]);
    let t_equal = haze::transmission_map(&equal, &a, haze::OMEGA, 7)?;
    let equal_err = t_equal.data().iter().fold(0.0f64, |m, v| m.max((v - 0.05).abs()));

    let mut complement: f64 = 0.0;
    for seed in 0..10 {
        let f = uniform(&mut ChaCha8Rng::seed_from_u64(seed), Shape::new(4, 12, 12), -1.0, 2.0);
        let est = haze::haze_density(&f, &HazeConfig::features())?;
        for (h, t) in est.density.data().iter().zip(est.refined.data()) {
            complement = complement.max((h + t - 1.0).abs());
            if !(0.0..=1.0).contains(h) || !(0.0..=1.0).contains(t) {
                complement = f64::INFINITY;
            }
        }
        if est.transmission.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
            complement = f64::INFINITY;
        }
    }
    Ok(vec![
        ("beta=0 bit-identical", if bit_equal { 0.0 } else { f64::INFINITY }),
        ("t=0 gives airlight", opaque_err),
        ("T for zero features", zero_err),
        ("T for airlight-equal features", equal_err),
        ("H + T' = 1", complement),
    ])
}

pub fn haze_identities() -> CheckResult {
    const NAME: &str = "haze physics identities";
    match haze_identity_errors() {
        Ok(errs) => {
            let passed = errs.iter().all(|(_, e)| *e <= IDENTITY_TOL);
            let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
            CheckResult::new(3, NAME, passed, detail)
        }
        Err(e) => CheckResult::failed(3, NAME, e),
    }
}

#[derive(Clone, Debug)]
pub struct HdeScore {
    pub family: synth::DepthFamily,
    pub beta: f64,
    pub pearson: f64,
    pub elapsed: Duration,
}

/// Haze density estimated from each hazy image of a seeded scene suite,
/// correlated with the true `1 - exp(-beta d)`.
pub fn hde_scores(seed: u64, scenes: usize, size: usize) -> Result<Vec<HdeScore>> {
    let suite = synth::suite(scenes, size, size, &mut ChaCha8Rng::seed_from_u64(seed))?;
    suite
        .iter()
        .map(|s| {
            let t0 = Instant::now();
            let est = haze::haze_density(&s.hazy, &HazeConfig::image())?;
            let d = &est.density;
            let d = if (d.shape().h, d.shape().w) == (size, size) { d.clone() } else { ops::bilinear_resize(d, size, size)? };
            let elapsed = t0.elapsed();
            Ok(HdeScore {
                family: s.family,
                beta: s.haze.beta,
                pearson: haze::pearson(d.data(), s.haze_density().data()),
                elapsed,
            })
        })
        .collect()
}

pub fn hde_fidelity() -> CheckResult {
    const NAME: &str = "haze density fidelity";
    match hde_scores(2024, HDE_SCENES, HDE_SIZE) {
        Ok(scores) => {
            let min = scores.iter().map(|s| s.pearson).fold(f64::INFINITY, f64::min);
            let slowest = scores.iter().map(|s| s.elapsed).max().unwrap_or_default();
            let passed = min >= HDE_MIN_PEARSON && slowest < HDE_BUDGET;
            CheckResult::new(
                4,
                NAME,
                passed,
                format!("{} scenes at 3x{HDE_SIZE}x{HDE_SIZE}: min Pearson {min:.3}, slowest {:.1} ms", scores.len(), slowest.as_secs_f64() * 1e3),
            )
        }
        Err(e) => CheckResult::failed(4, NAME, e),
    }
}

fn blend_identity_errors() -> Result<[f64; 3]> {
    let mut out = [0.0f64; 3];
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(4, 9, 7);
        let fir = uniform(&mut rng, s, -3.0, 3.0);
        let fvi = uniform(&mut rng, s, -3.0, 3.0);
        let tape = Tape::inference();
        let (a, b) = (tape.constant(fir.clone()), tape.constant(fvi.clone()));
        for (slot, (h, expect)) in [
            (0.0, fvi.map(|v| 2.0 * v)),
            (1.0, fir.zip_map(&fvi, |a, b| a + b)?),
            (0.5, fir.zip_map(&fvi, |a, b| 0.5 * a + 1.5 * b)?),
        ]
        .into_iter()
        .enumerate()
        {
            let got = haze_guided_blend(&tape, &a, &b, &Tensor::full(Shape::new(1, 9, 7), h))?;
            out[slot] = out[slot].max(got.value().max_abs_diff(&expect));
        }
    }
    Ok(out)
}

pub fn blend_identities() -> CheckResult {
    const NAME: &str = "haze-guided blend identities";
    match blend_identity_errors() {
        Ok(e) => CheckResult::new(
            5,
            NAME,
            e.iter().all(|&v| v == 0.0),
            format!("H=0 {:.1e}, H=1 {:.1e}, H=0.5 {:.1e}", e[0], e[1], e[2]),
        ),
        Err(e) => CheckResult::failed(5, NAME, e),
    }
}

/// Entropy-based MI computed from explicit level-pair counts.
fn oracle_mi(x: &[u8], y: &[u8]) -> f64 {
    let n = x.len() as f64;
    let mut joint: HashMap<(u8, u8), f64> = HashMap::new();
    let mut px: HashMap<u8, f64> = HashMap::new();
    let mut py: HashMap<u8, f64> = HashMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_default() += 1.0;
        *px.entry(a).or_default() += 1.0;
        *py.entry(b).or_default() += 1.0;
    }
    let h = |m: &mut dyn Iterator<Item = f64>| -> f64 { m.map(|c| -(c / n) * (c / n).ln()).sum() };
    h(&mut px.values().copied()) + h(&mut py.values().copied()) - h(&mut joint.values().copied())
}

fn metric_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut worst = vec![("q_abf(F,F,F) - 1", 0.0f64), ("q_sf(constant)", 0.0), ("q_scd(A+B,A,B) - 2", 0.0), ("q_mi vs oracle", 0.0)];
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = synth::clear_scene(32, 32, &mut rng).0;
        worst[0].1 = worst[0].1.max((metrics::q_abf(&f, &f, &f)? - 1.0).abs());
        let c = Tensor::full(Shape::new(3, 16, 16), rng.gen_range(0.0..1.0));
        worst[1].1 = worst[1].1.max(metrics::q_sf(&c)?.abs());
        let a = uniform(&mut rng, Shape::new(1, 24, 24), 0.0, 0.5);
        let b = uniform(&mut rng, Shape::new(1, 24, 24), 0.0, 0.5);
        let sum = a.zip_map(&b, |x, y| x + y)?;
        worst[2].1 = worst[2].1.max((metrics::q_scd(&sum, &a, &b)? - 2.0).abs());
        let (fa, fb) = (uniform(&mut rng, Shape::new(3, 20, 20), 0.0, 1.0), uniform(&mut rng, Shape::new(1, 20, 20), 0.0, 1.0));
        let fused = fa.map(|v| v * 0.5 + 0.25);
        let q = |t: &Tensor<f64>| -> Result<Vec<u8>> { Ok(metrics::quantize8(&metrics::to_gray(t)?)) };
        let expect = oracle_mi(&q(&fused)?, &q(&fb)?) + oracle_mi(&q(&fused)?, &q(&fa)?);
        worst[3].1 = worst[3].1.max((metrics::q_mi(&fused, &fb, &fa, 256)? - expect).abs());
    }
    Ok(worst)
}

pub fn metric_sanity() -> CheckResult {
    const NAME: &str = "metric sanity";
    match metric_errors() {
        Ok(w) => {
            let tol = [1e-6, 0.0, 1e-9, 1e-9];
            let passed = w.iter().zip(tol).all(|((_, e), t)| *e <= t);
            let detail = w.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
            CheckResult::new(7, NAME, passed, detail)
        }
        Err(e) => CheckResult::failed(7, NAME, e),
    }
}

/// All built-in checks, in criterion order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        gradient_correctness(),
        oracle_equivalence(),
        haze_identities(),
        hde_fidelity(),
        blend_identities(),
        metric_sanity(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_gradient_case_passes_on_one_seed() {
        for (name, case) in gradient_cases() {
            let r = case(0).unwrap();
            assert!(r.max_rel_error < GRAD_TOL, "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn a_broken_gradient_is_caught() {
        // Objective x^3 with a tape gradient of 3x^2 is fine; scaling the
        // recorded value but not the gradient must be flagged.
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
        let ok = check_graph(&[x.clone()], GRAD_EPS, |t, v| Ok(t.sum(&t.mul(&t.mul(&v[0], &v[0])?, &v[0])?))).unwrap();
        assert!(ok.max_rel_error < 1e-7);
        let detached = check_graph(&[x], GRAD_EPS, |t, v| {
            let d = t.detach(&v[0]);
            Ok(t.sum(&t.mul(&t.mul(&v[0], &d)?, &d)?))
        })
        .unwrap();
        assert!(detached.max_rel_error > 0.1);
    }

    #[test]
    fn cheap_checks_pass() {
        for r in [haze_identities(), blend_identities(), metric_sanity()] {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn oracle_check_on_a_few_instances() {
        let w = oracle_discrepancies(5).unwrap();
        assert!(w.iter().all(|(_, d)| *d <= ORACLE_TOL), "{w:?}");
    }
}
