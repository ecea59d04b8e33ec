//! File-level entry points: haze synthesis, inference and evaluation over
//! PNG and tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::format::{load_tensor, save_tensor, Checkpoint};
use crate::haze::{synthesize_haze, HazeParams};
use crate::imageio::{read_gray, read_rgb, write_png};
use crate::metrics::{score, MetricReport};
use crate::nn::{Inference, Model};
use crate::tensor::Tensor;

/// Rebuilds the network described by a checkpoint's config and loads its
/// parameters.
pub fn load_model(ck: &Checkpoint) -> Result<Model<f32>> {
    let cfg = TrainConfig::parse(&ck.config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = Model::<f32>::new(cfg.model, cfg.seed)?;
    model.params.load_from(&ck.params)?;
    Ok(model)
}

pub fn load_model_file(path: &Path) -> Result<Model<f32>> {
    load_model(&Checkpoint::load(path)?)
}

/// Applies the scattering model to a clear PNG with a depth tensor file and
/// writes `hazy.png` and `transmission.irvf` into `out`.
pub fn synthesize_files(clear: &Path, depth: &Path, beta: f64, airlight: [f64; 3], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let clear: Tensor<f64> = read_rgb(clear)?;
    let depth: Tensor<f64> = load_tensor(depth)?;
    depth.shape().expect_spatial(&clear.shape())?;
    let params = HazeParams { airlight, beta, depth };
    let hazy = synthesize_haze(&clear, &params)?;
    fs::create_dir_all(out)?;
    let (hp, tp) = (out.join("hazy.png"), out.join("transmission.irvf"));
    write_png(&hp, &hazy)?;
    save_tensor(&tp, &params.transmission())?;
    Ok((hp, tp))
}

pub fn infer_files(model: &Model<f32>, ir: &Path, vis: &Path) -> Result<Inference<f32>> {
    let ir: Tensor<f32> = read_gray(ir)?;
    let vi: Tensor<f32> = read_rgb(vis)?;
    model.infer(&ir, &vi)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineOutputs {
    pub fused: PathBuf,
    pub dehazed: PathBuf,
    pub density: PathBuf,
    /// Haze density as a tensor file.
    pub density_tensor: PathBuf,
}

/// Full inference from files: writes `fused.png`, `dehazed.png`,
/// `density.png` (`round(255 H)`) and `density.irvf` into `out`.
pub fn run_pipeline(ir: &Path, vis: &Path, checkpoint: &Path, out: &Path) -> Result<PipelineOutputs> {
    let model = load_model_file(checkpoint)?;
    let res = infer_files(&model, ir, vis)?;
    fs::create_dir_all(out)?;
    let paths = PipelineOutputs {
        fused: out.join("fused.png"),
        dehazed: out.join("dehazed.png"),
        density: out.join("density.png"),
        density_tensor: out.join("density.irvf"),
    };
    write_png(&paths.fused, &res.fused)?;
    write_png(&paths.dehazed, &res.dehazed)?;
    write_png(&paths.density, &res.density)?;
    save_tensor(&paths.density_tensor, &res.density)?;
    Ok(paths)
}

/// Scores every `fused/` image against `ir/` and `gt/` images of the same
/// name.
pub fn evaluate_dir(dir: &Path) -> Result<MetricReport> {
    let fused_dir = dir.join("fused");
    let mut names: Vec<String> = fs::read_dir(&fused_dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", fused_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", fused_dir.display())));
    }
    let mut rows = Vec::with_capacity(names.len());
    for name in &names {
        let (ir, gt) = (dir.join("ir").join(name), dir.join("gt").join(name));
        for p in [&ir, &gt] {
            if !p.is_file() {
                return Err(Error::Dataset(format!("{name}: missing {}", p.display())));
            }
        }
        let fused: Tensor<f64> = read_rgb(&fused_dir.join(name))?;
        let ir: Tensor<f64> = read_gray(&ir)?;
        let gt: Tensor<f64> = read_rgb(&gt)?;
        let stem = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
        rows.push(score(stem, &fused, &ir, &gt)?);
    }
    Ok(MetricReport::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::synth;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_checkpoint(dir: &Path) -> PathBuf {
        let cfg = TrainConfig {
            model: ModelConfig {
                channels: 4,
                encoder_depth: 1,
                fusion_stages: 2,
                pool_size: 4,
                ..ModelConfig::default()
            },
            seed: 3,
            ..TrainConfig::default()
        };
        let model = Model::<f32>::new(cfg.model, cfg.seed).unwrap();
        let ck = Checkpoint {
            step: 0,
            config: cfg.to_text(),
            params: model.params,
            moments: None,
        };
        let p = dir.join("model.irvc");
        ck.save(&p).unwrap();
        p
    }

    #[test]
    fn pipeline_outputs_match_inputs_and_repeat_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = synth::suite(1, 10, 14, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        synth::save_dataset(&dir.path().join("data"), &scenes).unwrap();
        let ck = small_checkpoint(dir.path());
        let (ir, vi) = (dir.path().join("data/ir/0000.png"), dir.path().join("data/vi/0000.png"));
        let a = run_pipeline(&ir, &vi, &ck, &dir.path().join("a")).unwrap();
        let b = run_pipeline(&ir, &vi, &ck, &dir.path().join("b")).unwrap();
        for (x, y) in [(&a.fused, &b.fused), (&a.dehazed, &b.dehazed), (&a.density, &b.density)] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
            let img = image::open(x).unwrap();
            assert_eq!((img.width(), img.height()), (14, 10));
        }
        let h: Tensor<f32> = load_tensor(&a.density_tensor).unwrap();
        let png = image::open(&a.density).unwrap();
        assert_eq!(png.color(), image::ColorType::L8);
        let bytes = png.to_luma8().into_raw();
        for (v, b) in h.data().iter().zip(bytes) {
            assert_eq!((255.0 * v).round() as u8, b);
        }
    }

    #[test]
    fn size_mismatch_and_bad_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ck = small_checkpoint(dir.path());
        let ir = dir.path().join("ir.png");
        let vi = dir.path().join("vi.png");
        write_png(&ir, &Tensor::<f32>::zeros(Shape::new(1, 8, 8))).unwrap();
        write_png(&vi, &Tensor::<f32>::zeros(Shape::new(3, 8, 9))).unwrap();
        let err = run_pipeline(&ir, &vi, &ck, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Registration { .. }));
        let junk = dir.path().join("junk.irvc");
        fs::write(&junk, b"IRVC\x01").unwrap();
        assert!(run_pipeline(&ir, &vi, &junk, dir.path()).unwrap_err().is_io());
    }

    #[test]
    fn synthesize_with_zero_beta_reproduces_clear_png() {
        let dir = tempfile::tempdir().unwrap();
        let clear = dir.path().join("clear.png");
        let t = Tensor::from_fn(Shape::new(3, 6, 5), |c, y, x| ((c + 2 * y + 3 * x) * 9) as f64 / 255.0);
        write_png(&clear, &t).unwrap();
        let depth = dir.path().join("depth.irvf");
        save_tensor(&depth, &Tensor::<f64>::full(Shape::new(1, 6, 5), 1.0)).unwrap();
        let (hazy, trans) = synthesize_files(&clear, &depth, 0.0, [0.9; 3], &dir.path().join("out")).unwrap();
        assert_eq!(read_rgb::<f64>(&hazy).unwrap(), t);
        assert!(load_tensor::<f32>(&trans).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn evaluate_reports_every_image() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = synth::suite(3, 16, 16, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (sub, pick) in [("ir", 0), ("gt", 1), ("fused", 2)] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
            for (i, s) in scenes.iter().enumerate() {
                let p = dir.path().join(sub).join(format!("{i}.png"));
                match pick {
                    0 => write_png(&p, &s.ir).unwrap(),
                    1 => write_png(&p, &s.clear).unwrap(),
                    _ => write_png(&p, &s.hazy).unwrap(),
                }
            }
        }
        let report = evaluate_dir(dir.path()).unwrap();
        assert_eq!(report.to_csv().lines().filter(|l| l.starts_with(char::is_numeric)).count(), 3);
        fs::remove_file(dir.path().join("gt/1.png")).unwrap();
        assert!(matches!(evaluate_dir(dir.path()), Err(Error::Dataset(_))));
    }
}
