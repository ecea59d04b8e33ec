//! Procedural infrared/visible scenes with known depth and haze.
//!
//! A clear scene is a smooth background with scattered coloured objects
//! with dark outlines, so that every neighbourhood has a dark pixel as the
//! dark-channel prior expects. The infrared view assigns each object its own
//! temperature and is unaffected by haze.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::format::save_tensor;
use crate::haze::{synthesize_haze, HazeParams};
use crate::imageio::write_png;
use crate::tensor::{Shape, Tensor};

pub const BETA_RANGE: (f64, f64) = (0.6, 1.8);
pub const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);
pub const DEPTH_RANGE: (f64, f64) = (0.1, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthFamily {
    /// Linear ramp along a random axis and direction.
    Ramp,
    /// Distance from a random centre.
    Radial,
    /// Two constant planes split along a random line.
    TwoPlane,
}

impl DepthFamily {
    pub const ALL: [DepthFamily; 3] = [DepthFamily::Ramp, DepthFamily::Radial, DepthFamily::TwoPlane];
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub family: DepthFamily,
    /// `(3, H, W)` haze-free visible image.
    pub clear: Tensor<f64>,
    /// `(1, H, W)` infrared image.
    pub ir: Tensor<f64>,
    pub haze: HazeParams,
    /// `(3, H, W)` hazy visible image.
    pub hazy: Tensor<f64>,
}

impl Scene {
    /// Ground-truth haze `1 - exp(-beta d)`.
    pub fn haze_density(&self) -> Tensor<f64> {
        self.haze.transmission().map(|t| 1.0 - t)
    }
}

pub fn depth_map(family: DepthFamily, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (lo, hi) = DEPTH_RANGE;
    let near = rng.gen_range(lo..lo + 0.3 * (hi - lo));
    let far = rng.gen_range(lo + 0.6 * (hi - lo)..=hi);
    let norm = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
    match family {
        DepthFamily::Ramp => {
            let vertical = rng.gen_bool(0.5);
            let flip = rng.gen_bool(0.5);
            Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
                let mut u = if vertical { norm(y, h) } else { norm(x, w) };
                if flip {
                    u = 1.0 - u;
                }
                near + (far - near) * u
            })
        }
        DepthFamily::Radial => {
            let cy = rng.gen_range(0.2..0.8);
            let cx = rng.gen_range(0.2..0.8);
            let reach = rng.gen_range(0.6..1.0);
            Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
                let r = ((norm(y, h) - cy).powi(2) + (norm(x, w) - cx).powi(2)).sqrt() / reach;
                near + (far - near) * r.min(1.0)
            })
        }
        DepthFamily::TwoPlane => {
            let vertical = rng.gen_bool(0.5);
            let split = rng.gen_range(0.3..0.7);
            let near_first = rng.gen_bool(0.5);
            Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
                let u = if vertical { norm(y, h) } else { norm(x, w) };
                if (u < split) == near_first {
                    near
                } else {
                    far
                }
            })
        }
    }
}

/// Clear visible image and matching infrared image.
pub fn clear_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let mut base = [[0.0; 3]; 2];
    for corner in &mut base {
        for v in corner.iter_mut() {
            *v = rng.gen_range(0.3..0.8);
        }
    }
    let (ir0, ir1) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4));
    let diag = |y: usize, x: usize| (y + x) as f64 / (h + w).max(2) as f64;
    let mut rgb = Tensor::from_fn(Shape::new(3, h, w), |c, y, x| {
        let u = diag(y, x);
        base[0][c] * (1.0 - u) + base[1][c] * u
    });
    let mut ir = Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
        let u = diag(y, x);
        ir0 * (1.0 - u) + ir1 * u
    });

    let count = (h * w / 96).max(1);
    for _ in 0..count {
        let r = rng.gen_range(2.5f64..7.0);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let round = rng.gen_bool(0.5);
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..1.0));
        let temp = rng.gen_range(0.2..1.0);
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 1.0).ceil() as usize).min(h);
        let x1 = ((cx + r + 1.0).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let d = if round { (dy * dy + dx * dx).sqrt() } else { dy.abs().max(dx.abs()) };
                if d > r {
                    continue;
                }
                let outline = d > r - 1.0;
                for (c, &v) in colour.iter().enumerate() {
                    rgb.set(c, y, x, if outline { 0.1 * v } else { v });
                }
                ir.set(0, y, x, temp);
            }
        }
    }
    for v in rgb.data_mut().iter_mut().chain(ir.data_mut()) {
        *v = (*v + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0);
    }
    (rgb, ir)
}

/// One scene with haze drawn from the standard ranges.
pub fn scene(family: DepthFamily, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let (clear, ir) = clear_scene(h, w, rng);
    let depth = depth_map(family, h, w, rng);
    let beta = rng.gen_range(BETA_RANGE.0..=BETA_RANGE.1);
    let a = rng.gen_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1);
    let haze = HazeParams {
        airlight: [a; 3],
        beta,
        depth,
    };
    let hazy = synthesize_haze(&clear, &haze)?;
    Ok(Scene {
        family,
        clear,
        ir,
        haze,
        hazy,
    })
}

/// `n` scenes cycling through the depth families.
pub fn suite(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Scene>> {
    (0..n).map(|i| scene(DepthFamily::ALL[i % 3], h, w, rng)).collect()
}

/// Writes scenes in the dataset layout `ir/`, `vi/` (hazy), `gt/` (clear)
/// and `depth/` (tensor files), named `0000.png`, `0001.png`, ...
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    for sub in ["ir", "vi", "gt", "depth"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("{i:04}");
        write_png(&dir.join("ir").join(format!("{name}.png")), &s.ir)?;
        write_png(&dir.join("vi").join(format!("{name}.png")), &s.hazy)?;
        write_png(&dir.join("gt").join(format!("{name}.png")), &s.clear)?;
        save_tensor(&dir.join("depth").join(format!("{name}.irvf")), &s.haze.depth)?;
    }
    Ok(())
}
