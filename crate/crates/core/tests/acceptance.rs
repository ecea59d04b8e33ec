//! End-to-end acceptance run. Prints one line per criterion and exits non-zero
//! if any of them fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hazefuse::config::TrainConfig;
use hazefuse::format::{read_tensor, write_tensor, Checkpoint};
use hazefuse::nn::{Ablation, ModelConfig};
use hazefuse::selftest::{self, CheckResult};
use hazefuse::train::{evaluate_loss, Dataset, Trainer};
use hazefuse::{synth, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OVERFIT_SCENES: usize = 4;
const OVERFIT_SIZE: usize = 64;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_RATIO: f64 = 0.3;
const OVERFIT_PSNR_GAIN: f64 = 2.0;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

fn outcome(id: u8, name: &'static str, check: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult { id, name, passed, detail }
}

fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(&x, &y)| f64::from(x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

fn toy_overfit() -> Result<(bool, String)> {
    let t0 = Instant::now();
    let scenes = synth::suite(OVERFIT_SCENES, OVERFIT_SIZE, OVERFIT_SIZE, &mut ChaCha8Rng::seed_from_u64(7))?;
    let data = Dataset::from_scenes(&scenes);
    // 4 triples and a batch of 6: one step per epoch
    let cfg = TrainConfig { epochs: OVERFIT_STEPS, ..TrainConfig::default() };
    let alpha = cfg.alpha;
    let mut trainer = Trainer::new(cfg, &data)?;
    assert_eq!(trainer.total_steps(), OVERFIT_STEPS as u64);
    let before = evaluate_loss(&trainer.model, &data, alpha)?[3];
    trainer.run(&data, |_| {})?;
    let after = evaluate_loss(&trainer.model, &data, alpha)?[3];

    let (mut hazy, mut dehazed) = (0.0, 0.0);
    for s in &data.samples {
        let out = trainer.model.infer(&s.ir, &s.hazy)?;
        hazy += psnr(s.hazy.data(), s.gt.data());
        dehazed += psnr(out.dehazed.data(), s.gt.data());
    }
    let n = data.len() as f64;
    let (hazy, dehazed) = (hazy / n, dehazed / n);
    let elapsed = t0.elapsed();
    let ratio = after / before;
    let passed = ratio < OVERFIT_RATIO && dehazed - hazy >= OVERFIT_PSNR_GAIN && elapsed < OVERFIT_BUDGET;
    Ok((
        passed,
        format!(
            "loss {before:.4} -> {after:.4} (ratio {ratio:.3}, need < {OVERFIT_RATIO}); PSNR {hazy:.2} -> {dehazed:.2} dB (gain {:.2}, need >= {OVERFIT_PSNR_GAIN}); {:.0} s",
            dehazed - hazy,
            elapsed.as_secs_f64()
        ),
    ))
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 2,
        crop_size: 16,
        seed,
        model: ModelConfig { channels: 8, pool_size: 8, ..ModelConfig::default() },
        ..TrainConfig::default()
    }
}

fn ablations() -> Result<(bool, String)> {
    let scenes = synth::suite(2, 24, 20, &mut ChaCha8Rng::seed_from_u64(3))?;
    let data = Dataset::from_scenes(&scenes);
    let mut bad = Vec::new();
    for (name, ablation) in Ablation::NAMES.iter().zip(Ablation::variants()) {
        let mut cfg = small_config(1);
        cfg.model.ablation = ablation;
        let mut trainer = Trainer::new(cfg, &data)?;
        let row = trainer.step(&data)?;
        let s = &data.samples[0];
        let out = trainer.model.infer(&s.ir, &s.hazy)?;
        let shape = s.hazy.shape();
        let ok = row.l_total.is_finite()
            && out.fused.shape() == shape
            && out.dehazed.shape() == shape
            && out.density.shape() == Shape::new(1, shape.h, shape.w)
            && out.fused.is_finite()
            && out.dehazed.is_finite();
        if !ok {
            bad.push(*name);
        }
    }
    Ok((bad.is_empty(), if bad.is_empty() { "all 6 variants build, step and infer".into() } else { format!("broken: {}", bad.join(", ")) }))
}

fn trained_checkpoint(data: &Dataset, seed: u64) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut trainer = Trainer::new(TrainConfig { epochs: 2, ..small_config(seed) }, data)?;
    let rows = trainer.run(data, |_| {})?;
    let losses: Vec<u8> = rows.iter().flat_map(|r| r.l_total.to_le_bytes()).collect();
    Ok((trainer.checkpoint().to_bytes()?, losses))
}

fn reproducibility(selftest: &[CheckResult]) -> Result<(bool, String)> {
    let scenes = synth::suite(3, 24, 20, &mut ChaCha8Rng::seed_from_u64(5))?;
    let again = synth::suite(3, 24, 20, &mut ChaCha8Rng::seed_from_u64(5))?;
    let data = Dataset::from_scenes(&scenes);
    let same_data = scenes.iter().zip(&again).all(|(a, b)| a.hazy == b.hazy && a.haze.depth == b.haze.depth);
    let same_run = trained_checkpoint(&data, 11)? == trained_checkpoint(&data, 11)?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = Tensor::<f32>::from_fn(Shape::new(3, 7, 5), |_, _, _| rng.gen_range(-2.0..2.0));
    let mut bytes = Vec::new();
    write_tensor(&mut bytes, &t)?;
    let back: Tensor<f32> = read_tensor(&mut bytes.as_slice())?;
    let mut rewritten = Vec::new();
    write_tensor(&mut rewritten, &back)?;
    let tensor_ok = back == t && rewritten == bytes;

    let (ck, _) = trained_checkpoint(&data, 2)?;
    let ck_ok = Checkpoint::read(&mut ck.as_slice())?.to_bytes()? == ck;

    let st_ok = selftest.len() == 6 && selftest.iter().all(|r| r.passed);
    let parts = [("synthesis", same_data), ("training", same_run), ("tensor file", tensor_ok), ("checkpoint", ck_ok), ("selftest", st_ok)];
    let failed: Vec<&str> = parts.iter().filter(|p| !p.1).map(|p| p.0).collect();
    Ok((
        failed.is_empty(),
        if failed.is_empty() {
            "seeded runs identical, round-trips byte-exact, selftest passes".into()
        } else {
            format!("failed: {}", failed.join(", "))
        },
    ))
}

fn main() -> ExitCode {
    let selftest = selftest::run_all();
    let mut results: Vec<CheckResult> = selftest.clone();
    results.push(outcome(6, "toy overfit", toy_overfit));
    results.push(outcome(8, "ablation constructibility", ablations));
    results.push(outcome(9, "reproducibility and formats", || reproducibility(&selftest)));
    results.sort_by_key(|r| r.id);

    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
