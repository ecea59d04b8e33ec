//! Deliberately naive reference implementations.
//!
//! Each function here is written from the defining formula with plain nested
//! loops and shares no code with the optimised kernels, so agreement between
//! the two is meaningful evidence. They are slow; use them only for checking.

use crate::tensor::{ConvParams, Shape, Tensor};

pub fn conv2d(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
    let s = x.shape();
    let k = p.k as isize;
    let ho = (s.h + 2 * p.padding - p.k) / p.stride + 1;
    let wo = (s.w + 2 * p.padding - p.k) / p.stride + 1;
    let cin_g = p.in_channels / p.groups;
    let cout_g = p.out_channels / p.groups;
    let mut out = Tensor::zeros(Shape::new(p.out_channels, ho, wo));
    for o in 0..p.out_channels {
        let grp = o / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = p.bias[o];
                for cl in 0..cin_g {
                    let ci = grp * cin_g + cl;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * p.stride) as isize + ky - p.padding as isize;
                            let ix = (ox * p.stride) as isize + kx - p.padding as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            let widx = ((o * cin_g + cl) * p.k + ky as usize) * p.k + kx as usize;
                            acc += p.kernel.data()[widx] * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

pub fn softmax_channels(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for y in 0..s.h {
        for xx in 0..s.w {
            let m = (0..s.c).map(|c| x.at(c, y, xx)).fold(f64::MIN, f64::max);
            let z: f64 = (0..s.c).map(|c| (x.at(c, y, xx) - m).exp()).sum();
            for c in 0..s.c {
                out.set(c, y, xx, (x.at(c, y, xx) - m).exp() / z);
            }
        }
    }
    out
}

pub fn global_average_pool(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let mut means = Vec::new();
    for c in 0..s.c {
        let mut acc = 0.0;
        for y in 0..s.h {
            for xx in 0..s.w {
                acc += x.at(c, y, xx);
            }
        }
        means.push(acc / (s.h * s.w) as f64);
    }
    Tensor::from_vec(means)
}

pub fn channel_average_pool(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(1, s.h, s.w), |_, y, xx| {
        (0..s.c).map(|c| x.at(c, y, xx)).sum::<f64>() / s.c as f64
    })
}

/// Bilinear sample with half-pixel centres, evaluated pixel by pixel.
pub fn bilinear_resize(x: &Tensor<f64>, new_h: usize, new_w: usize) -> Tensor<f64> {
    let s = x.shape();
    let coord = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let mut src = (d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        if src < 0.0 {
            src = 0.0;
        }
        let lo = src.floor() as usize;
        if lo + 1 >= n_in {
            (n_in - 1, n_in - 1, 0.0)
        } else {
            (lo, lo + 1, src - lo as f64)
        }
    };
    Tensor::from_fn(Shape::new(s.c, new_h, new_w), |c, y, xx| {
        let (y0, y1, fy) = coord(y, s.h, new_h);
        let (x0, x1, fx) = coord(xx, s.w, new_w);
        (1.0 - fy) * (1.0 - fx) * x.at(c, y0, x0)
            + (1.0 - fy) * fx * x.at(c, y0, x1)
            + fy * (1.0 - fx) * x.at(c, y1, x0)
            + fy * fx * x.at(c, y1, x1)
    })
}

/// Minimum over all channels and the clipped `window x window` neighbourhood.
pub fn dark_channel(x: &Tensor<f64>, window: usize) -> Tensor<f64> {
    let s = x.shape();
    let r = (window / 2) as isize;
    Tensor::from_fn(Shape::new(1, s.h, s.w), |_, y, xx| {
        let mut m = f64::INFINITY;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, s.h as isize - 1) as usize;
                let xw = (xx as isize + dx).clamp(0, s.w as isize - 1) as usize;
                for c in 0..s.c {
                    m = m.min(x.at(c, yy, xw));
                }
            }
        }
        m
    })
}

/// Sort-based atmospheric light: mean feature vector over the brightest
/// 0.1% (at least one) dark-channel pixels, ties broken by raster order.
pub fn atmospheric_light(features: &Tensor<f64>, dark: &Tensor<f64>) -> Vec<f64> {
    let s = features.shape();
    let n = s.h * s.w;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        dark.data()[b]
            .partial_cmp(&dark.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let take = ((n as f64 * 0.001).floor() as usize).max(1);
    (0..s.c)
        .map(|c| {
            idx[..take]
                .iter()
                .map(|&i| features.data()[c * n + i])
                .sum::<f64>()
                / take as f64
        })
        .collect()
}

/// Guided filter computed by solving each window's regularised least-squares
/// fit directly, then averaging the per-window predictions at every pixel.
pub fn guided_filter(guide: &Tensor<f64>, input: &Tensor<f64>, radius: usize, eps: f64) -> Tensor<f64> {
    let s = guide.shape();
    let r = radius as isize;
    let window = |y: usize, x: usize| {
        let mut pts = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy >= 0 && xx >= 0 && yy < s.h as isize && xx < s.w as isize {
                    pts.push((yy as usize, xx as usize));
                }
            }
        }
        pts
    };
    // Minimise sum (a g + b - p)^2 + eps a^2 * n over the window.
    let mut coef = vec![(0.0, 0.0); s.h * s.w];
    for y in 0..s.h {
        for x in 0..s.w {
            let pts = window(y, x);
            let n = pts.len() as f64;
            let (mut sg, mut sp, mut sgg, mut sgp) = (0.0, 0.0, 0.0, 0.0);
            for &(yy, xx) in &pts {
                let g = guide.at(0, yy, xx);
                let p = input.at(0, yy, xx);
                sg += g;
                sp += p;
                sgg += g * g;
                sgp += g * p;
            }
            // normal equations: [sgg + n eps, sg; sg, n] [a; b] = [sgp; sp]
            let a11 = sgg + n * eps;
            let det = a11 * n - sg * sg;
            let a = (sgp * n - sg * sp) / det;
            let b = (a11 * sp - sg * sgp) / det;
            coef[y * s.w + x] = (a, b);
        }
    }
    Tensor::from_fn(s, |_, y, x| {
        let pts = window(y, x);
        let g = guide.at(0, y, x);
        pts.iter()
            .map(|&(yy, xx)| {
                let (a, b) = coef[yy * s.w + xx];
                a * g + b
            })
            .sum::<f64>()
            / pts.len() as f64
    })
}

/// Replicate-padded Sobel magnitude `|Gx| + |Gy|` via explicit 3x3 kernels.
pub fn sobel_magnitude(x: &Tensor<f64>) -> Tensor<f64> {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let s = x.shape();
    Tensor::from_fn(s, |c, y, xx| {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let yy = (y as isize + i as isize - 1).clamp(0, s.h as isize - 1) as usize;
                let xw = (xx as isize + j as isize - 1).clamp(0, s.w as isize - 1) as usize;
                gx += KX[i][j] * x.at(c, yy, xw);
                gy += KY[i][j] * x.at(c, yy, xw);
            }
        }
        gx.abs() + gy.abs()
    })
}
