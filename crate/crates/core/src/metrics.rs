//! Fusion-quality metrics, computed against clear (haze-free) sources.
//!
//! Inputs are `(1,H,W)` or `(3,H,W)` tensors in `[0, 1]`; colour images are
//! reduced to BT.601 luma first.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::haze::pearson;
use crate::kernels;
use crate::tensor::{Shape, Tensor};

/// Edge-strength sigmoid of the gradient-preservation score.
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
/// Orientation sigmoid of the gradient-preservation score.
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_gray(image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = image.shape();
    match s.c {
        1 => Ok(image.clone()),
        3 => Ok(Tensor::from_fn(Shape::new(1, s.h, s.w), |_, y, x| {
            LUMA[0] * image.at(0, y, x) + LUMA[1] * image.at(1, y, x) + LUMA[2] * image.at(2, y, x)
        })),
        c => Err(Error::dim("image channels", 3, c)),
    }
}

/// 8-bit levels `round(255 * clamp(v))`.
pub fn quantize8(gray: &Tensor<f64>) -> Vec<u8> {
    gray.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn same_size(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    a.shape().expect_spatial(&b.shape())
}

fn entropy_terms(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information (nats) of two equally long level sequences binned into
/// `bins` classes.
pub fn mutual_information(x: &[u8], y: &[u8], bins: usize) -> f64 {
    let bin = |v: u8| v as usize * bins / 256;
    let mut joint = vec![0u64; bins * bins];
    let mut px = vec![0u64; bins];
    let mut py = vec![0u64; bins];
    for (&a, &b) in x.iter().zip(y) {
        let (i, j) = (bin(a), bin(b));
        joint[i * bins + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let n = x.len() as f64;
    // I(X;Y) = H(X) + H(Y) - H(X,Y); zero for a constant sequence.
    let mi = entropy_terms(&px, n) + entropy_terms(&py, n) - entropy_terms(&joint, n);
    mi.max(0.0)
}

/// `MI(F, A) + MI(F, B)` on 8-bit grayscale with `bins` histogram levels.
pub fn q_mi(fused: &Tensor<f64>, src_a: &Tensor<f64>, src_b: &Tensor<f64>, bins: usize) -> Result<f64> {
    if bins == 0 || bins > 256 {
        return Err(Error::Parameter(format!("bins must be in 1..=256, got {bins}")));
    }
    same_size(fused, src_a)?;
    same_size(fused, src_b)?;
    let f = quantize8(&to_gray(fused)?);
    let a = quantize8(&to_gray(src_a)?);
    let b = quantize8(&to_gray(src_b)?);
    Ok(mutual_information(&f, &a, bins) + mutual_information(&f, &b, bins))
}

/// Sigmoid rescaled so that 0 maps to 0 and 1 maps to 1.
fn preservation(x: f64, kappa: f64, sigma: f64) -> f64 {
    let s = |v: f64| 1.0 / (1.0 + (kappa * (v - sigma)).exp());
    (s(x) - s(0.0)) / (s(1.0) - s(0.0))
}

struct EdgeMap {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edges(gray: &Tensor<f64>) -> EdgeMap {
    let (gx, gy) = kernels::sobel(gray.shape(), gray.data());
    let strength = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let angle = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| if x == 0.0 { std::f64::consts::FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    EdgeMap { strength, angle }
}

/// Per-pixel preservation of source edges in the fused image.
fn edge_preservation(src: &EdgeMap, fused: &EdgeMap) -> Vec<f64> {
    use std::f64::consts::FRAC_PI_2;
    src.strength
        .iter()
        .zip(&fused.strength)
        .zip(src.angle.iter().zip(&fused.angle))
        .map(|((&ga, &gf), (&aa, &af))| {
            let g = if ga == 0.0 || gf == 0.0 {
                0.0
            } else if ga > gf {
                gf / ga
            } else {
                ga / gf
            };
            let a = ((aa - af).abs() - FRAC_PI_2).abs() / FRAC_PI_2;
            preservation(g, QABF_KAPPA_G, QABF_SIGMA_G) * preservation(a, QABF_KAPPA_A, QABF_SIGMA_A)
        })
        .collect()
}

/// Gradient-based fusion performance `Q_AB/F` in `[0, 1]`, weighted by the
/// source edge strengths. Zero when neither source has any edges.
pub fn q_abf(fused: &Tensor<f64>, src_a: &Tensor<f64>, src_b: &Tensor<f64>) -> Result<f64> {
    same_size(fused, src_a)?;
    same_size(fused, src_b)?;
    let f = edges(&to_gray(fused)?);
    let a = edges(&to_gray(src_a)?);
    let b = edges(&to_gray(src_b)?);
    let qa = edge_preservation(&a, &f);
    let qb = edge_preservation(&b, &f);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        num += qa[i] * a.strength[i] + qb[i] * b.strength[i];
        den += a.strength[i] + b.strength[i];
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Sum of correlations of differences `r(F - B, A) + r(F - A, B)`.
pub fn q_scd(fused: &Tensor<f64>, src_a: &Tensor<f64>, src_b: &Tensor<f64>) -> Result<f64> {
    same_size(fused, src_a)?;
    same_size(fused, src_b)?;
    let (f, a, b) = (to_gray(fused)?, to_gray(src_a)?, to_gray(src_b)?);
    let diff = |x: &Tensor<f64>, y: &Tensor<f64>| -> Vec<f64> {
        x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect()
    };
    Ok(pearson(&diff(&f, &b), a.data()) + pearson(&diff(&f, &a), b.data()))
}

/// Spatial frequency `sqrt(RF^2 + CF^2)` with mean-square first differences
/// along rows (RF) and columns (CF).
pub fn q_sf(image: &Tensor<f64>) -> Result<f64> {
    let g = to_gray(image)?;
    let s = g.shape();
    let mean_sq = |pairs: &mut dyn Iterator<Item = f64>| {
        let (mut acc, mut n) = (0.0, 0usize);
        for d in pairs {
            acc += d * d;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    };
    let rf2 = mean_sq(&mut (0..s.h).flat_map(|y| (1..s.w).map(move |x| (y, x))).map(|(y, x)| g.at(0, y, x) - g.at(0, y, x - 1)));
    let cf2 = mean_sq(&mut (1..s.h).flat_map(|y| (0..s.w).map(move |x| (y, x))).map(|(y, x)| g.at(0, y, x) - g.at(0, y - 1, x)));
    Ok((rf2 + cf2).sqrt())
}

/// Scores of one fused image against its infrared and clear visible sources.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub q_mi: f64,
    pub q_abf: f64,
    pub q_scd: f64,
    pub q_sf: f64,
}

pub fn score(name: &str, fused: &Tensor<f64>, ir: &Tensor<f64>, vis_gt: &Tensor<f64>) -> Result<MetricRow> {
    Ok(MetricRow {
        name: name.to_string(),
        q_mi: q_mi(fused, ir, vis_gt, 256)?,
        q_abf: q_abf(fused, ir, vis_gt)?,
        q_scd: q_scd(fused, ir, vis_gt)?,
        q_sf: q_sf(fused)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

/// Metrics without an implementation; reported as `n/a`.
pub const UNAVAILABLE: [&str; 4] = ["q_vif", "q_cv", "q_pi", "q_niqe"];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub q_mi: Summary,
    pub q_abf: Summary,
    pub q_scd: Summary,
    pub q_sf: Summary,
    /// Labelled so readers know which MI variant was used.
    pub q_mi_variant: &'static str,
    pub unavailable: [&'static str; 4],
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        let col = |f: fn(&MetricRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
        MetricReport {
            q_mi: col(|r| r.q_mi),
            q_abf: col(|r| r.q_abf),
            q_scd: col(|r| r.q_scd),
            q_sf: col(|r| r.q_sf),
            rows,
            q_mi_variant: "unnormalized MI sum, natural log, 256 bins",
            unavailable: UNAVAILABLE,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,q_mi,q_abf,q_scd,q_sf");
        for u in UNAVAILABLE {
            out.push(',');
            out.push_str(u);
        }
        out.push('\n');
        let na = ",n/a".repeat(UNAVAILABLE.len());
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}{na}\n", r.name, r.q_mi, r.q_abf, r.q_scd, r.q_sf));
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let v = |s: &Summary| if pick == 0 { s.mean } else { s.std };
            out.push_str(&format!(
                "{label},{},{},{},{}{na}\n",
                v(&self.q_mi),
                v(&self.q_abf),
                v(&self.q_scd),
                v(&self.q_sf)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn histogram_entropy(levels: &[u8]) -> f64 {
        let mut counts = [0usize; 256];
        for &l in levels {
            counts[l as usize] += 1;
        }
        let n = levels.len() as f64;
        counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
    }

    #[test]
    fn mi_examples() {
        let a = random(Shape::new(1, 32, 32), 1);
        let h = histogram_entropy(&quantize8(&a));
        assert!((q_mi(&a, &a, &a, 256).unwrap() - 2.0 * h).abs() < 1e-9);

        let k = Tensor::full(Shape::new(1, 32, 32), 0.4);
        assert_eq!(q_mi(&k, &a, &a, 256).unwrap(), 0.0);

        // Checkerboard against independent noise on a large image.
        let big = Shape::new(1, 256, 256);
        let checker = Tensor::from_fn(big, |_, y, x| ((x + y) % 2) as f64);
        let noise = random(big, 2);
        let f = quantize8(&checker);
        assert!(mutual_information(&f, &quantize8(&noise), 256) < 0.05);
        assert!(q_mi(&a, &a, &a, 0).is_err());
        assert!(q_mi(&a, &random(Shape::new(1, 31, 32), 3), &a, 256).is_err());
    }

    /// Direct transcription of the published score, used as an oracle: Sobel
    /// by explicit 3x3 loops, orientation from `atan2` folded modulo pi.
    fn reference_qabf(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        use std::f64::consts::PI;
        let s = f.shape();
        let px = |t: &Tensor<f64>, y: isize, x: isize| {
            t.at(0, y.clamp(0, s.h as isize - 1) as usize, x.clamp(0, s.w as isize - 1) as usize)
        };
        let grad = |t: &Tensor<f64>, y: usize, x: usize| {
            let (y, x) = (y as isize, x as isize);
            let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = px(t, y + dy as isize - 1, x + dx as isize - 1);
                    gx += kx[dy][dx] * v;
                    gy += kx[dx][dy] * v;
                }
            }
            (gx.hypot(gy), gy.atan2(gx).rem_euclid(PI))
        };
        let sig = |v: f64, k: f64, m: f64| 1.0 / (1.0 + (k * (v - m)).exp());
        let q = |v: f64, k: f64, m: f64| (sig(v, k, m) - sig(0.0, k, m)) / (sig(1.0, k, m) - sig(0.0, k, m));
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..s.h {
            for x in 0..s.w {
                let (gf, tf) = grad(f, y, x);
                for src in [a, b] {
                    let (gs, ts) = grad(src, y, x);
                    let g = if gs > 0.0 && gf > 0.0 { gs.min(gf) / gs.max(gf) } else { 0.0 };
                    let d = (ts - tf).abs();
                    let orient = 1.0 - d.min(PI - d) / (PI / 2.0);
                    num += q(g, -15.0, 0.5) * q(orient, -22.0, 0.8) * gs;
                    den += gs;
                }
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn qabf_examples() {
        let f = random(Shape::new(3, 24, 24), 4);
        assert!((q_abf(&f, &f, &f).unwrap() - 1.0).abs() < 1e-6);
        let k = Tensor::full(Shape::new(1, 24, 24), 0.5);
        assert!(q_abf(&k, &f, &f).unwrap().abs() < 1e-6);
        assert_eq!(q_abf(&f, &k, &k).unwrap(), 0.0);
        for seed in 0..10 {
            let (f, a, b) = (
                random(Shape::new(1, 20, 17), 10 + seed),
                random(Shape::new(1, 20, 17), 30 + seed),
                random(Shape::new(1, 20, 17), 50 + seed),
            );
            let got = q_abf(&f, &a, &b).unwrap();
            assert!((got - reference_qabf(&f, &a, &b)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn scd_examples() {
        let a = random(Shape::new(1, 32, 32), 5);
        let b = random(Shape::new(1, 32, 32), 6);
        let f = a.zip_map(&b, |x, y| x + y).unwrap();
        assert!((q_scd(&f, &a, &b).unwrap() - 2.0).abs() < 1e-9);
        // F = A: F - A is constant, so that term is 0 and only r(A - B, A) remains.
        let expect = pearson(&a.zip_map(&b, |x, y| x - y).unwrap().into_data(), a.data());
        assert!((q_scd(&a, &a, &b).unwrap() - expect).abs() < 1e-12);
        let r = random(Shape::new(1, 32, 32), 7);
        assert!((q_scd(&r, &a, &b).unwrap() - q_scd(&r, &b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sf_examples() {
        assert_eq!(q_sf(&Tensor::full(Shape::new(1, 9, 9), 0.3)).unwrap(), 0.0);
        let stripes = Tensor::from_fn(Shape::new(1, 8, 10), |_, _, x| (x % 2) as f64);
        assert!((q_sf(&stripes).unwrap() - 1.0).abs() < 1e-15);
        let r = random(Shape::new(1, 6, 7), 8);
        let (mut rf, mut cf) = (0.0, 0.0);
        for y in 0..6 {
            for x in 0..7 {
                if x > 0 {
                    rf += (r.at(0, y, x) - r.at(0, y, x - 1)).powi(2);
                }
                if y > 0 {
                    cf += (r.at(0, y, x) - r.at(0, y - 1, x)).powi(2);
                }
            }
        }
        let expect = (rf / 36.0 + cf / 35.0).sqrt();
        assert!((q_sf(&r).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let a = random(Shape::new(3, 16, 16), 9);
        let ir = random(Shape::new(1, 16, 16), 10);
        let rows = vec![score("x", &a, &ir, &a).unwrap(), score("y", &ir, &ir, &a).unwrap()];
        let rep = MetricReport::new(rows);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].ends_with("q_vif,q_cv,q_pi,q_niqe"));
        assert!(lines[1].starts_with("x,") && lines[1].ends_with("n/a,n/a,n/a,n/a"));
        assert!(lines[3].starts_with("mean,"));
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 2);
        assert!((json["q_sf"]["mean"].as_f64().unwrap() - rep.q_sf.mean).abs() < 1e-15);
    }

    /// Places `content` inside a constant canvas at an offset.
    fn embed(content: &Tensor<f64>, h: usize, w: usize, dy: usize, dx: usize) -> Tensor<f64> {
        let s = content.shape();
        Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
            if y >= dy && y < dy + s.h && x >= dx && x < dx + s.w {
                content.at(0, y - dy, x - dx)
            } else {
                0.5
            }
        })
    }

    proptest! {
        #[test]
        fn ranges_and_symmetry(seed in 0u64..300) {
            let s = Shape::new(1, 12, 12);
            let (f, a, b) = (random(s, seed), random(s, seed + 1000), random(s, seed + 2000));
            let qa = q_abf(&f, &a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&qa));
            prop_assert!((q_mi(&f, &a, &b, 256).unwrap() - q_mi(&f, &b, &a, 256).unwrap()).abs() < 1e-12);
            let scd = q_scd(&f, &a, &b).unwrap();
            prop_assert!((-2.0..=2.0).contains(&scd));
            prop_assert!((scd - q_scd(&f, &b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(q_sf(&f).unwrap() >= 0.0);
        }

        #[test]
        fn translation_invariance(seed in 0u64..100, dy in 0usize..4, dx in 0usize..4) {
            let s = Shape::new(1, 10, 10);
            let (f, a, b) = (random(s, seed), random(s, seed + 1), random(s, seed + 2));
            let at = |t: &Tensor<f64>, oy, ox| embed(t, 18, 18, 2 + oy, 2 + ox);
            let (f0, a0, b0) = (at(&f, 0, 0), at(&a, 0, 0), at(&b, 0, 0));
            let (f1, a1, b1) = (at(&f, dy, dx), at(&a, dy, dx), at(&b, dy, dx));
            prop_assert!((q_abf(&f0, &a0, &b0).unwrap() - q_abf(&f1, &a1, &b1).unwrap()).abs() < 1e-12);
            prop_assert!((q_sf(&f0).unwrap() - q_sf(&f1).unwrap()).abs() < 1e-12);
            prop_assert!((q_mi(&f0, &a0, &b0, 256).unwrap() - q_mi(&f1, &a1, &b1, 256).unwrap()).abs() < 1e-12);
            prop_assert!((q_scd(&f0, &a0, &b0).unwrap() - q_scd(&f1, &a1, &b1).unwrap()).abs() < 1e-12);
        }
    }
}
