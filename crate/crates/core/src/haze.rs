//! Haze physics: the atmospheric scattering model used to synthesise hazy
//! training images, and the dark-channel haze-density estimator applied to
//! visible features inside the restoration network.
//!
//! Everything here works on `f64` tensors. The estimator contains min filters
//! and a guided filter whose variance terms cancel badly in single precision.

use crate::error::{Error, Result};
use crate::tensor::{channel_average_pool, replicate_channels, Shape, Tensor};

/// Smallest atmospheric-light component allowed before inversion.
pub const AIRLIGHT_FLOOR: f64 = 0.05;

/// Default weight of the dark-channel term in the transmission estimate.
pub const OMEGA: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    /// Atmospheric light per RGB channel, each in `(0, 1]`.
    pub airlight: [f64; 3],
    /// Scattering coefficient per unit depth.
    pub beta: f64,
    /// `(1, H, W)` non-negative depth map. `+inf` is allowed (pure airlight).
    pub depth: Tensor<f64>,
}

impl HazeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!(
                "scattering coefficient must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if let Some(a) = self.airlight.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Parameter(format!("atmospheric light {a} outside (0, 1]")));
        }
        if self.depth.shape().c != 1 {
            return Err(Error::dim("depth channels", 1, self.depth.shape().c));
        }
        if self.depth.data().iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Parameter("depth map contains negative or NaN values".into()));
        }
        Ok(())
    }

    /// `t = exp(-beta * d)`, with `t = 1` everywhere when `beta = 0`.
    pub fn transmission(&self) -> Tensor<f64> {
        if self.beta == 0.0 {
            return Tensor::full(self.depth.shape(), 1.0);
        }
        self.depth.map(|d| (-self.beta * d).exp())
    }
}

/// `I = J t + A (1 - t)` per channel.
pub fn synthesize_haze(clear: &Tensor<f64>, params: &HazeParams) -> Result<Tensor<f64>> {
    params.validate()?;
    let s = clear.shape();
    if s.c != 3 {
        return Err(Error::dim("channels", 3, s.c));
    }
    s.expect_spatial(&params.depth.shape())?;
    if params.beta == 0.0 {
        return Ok(clear.clone());
    }
    let t = params.transmission();
    Ok(Tensor::from_fn(s, |c, y, x| {
        let tv = t.at(0, y, x);
        let a = params.airlight[c];
        (clear.at(c, y, x) * tv + a * (1.0 - tv)).clamp(0.0, 1.0)
    }))
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Parameter(format!(
            "dark-channel window must be odd and positive, got {window}"
        )));
    }
    Ok(())
}

/// 1-D running min over a clipped window of `radius` on either side.
fn min_filter_axis(src: &[f64], dst: &mut [f64], len: usize, stride: usize, count: usize, lane: usize, radius: usize) {
    for l in 0..count {
        let base = l * lane;
        for i in 0..len {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(len - 1);
            let mut m = f64::INFINITY;
            for j in lo..=hi {
                m = m.min(src[base + j * stride]);
            }
            dst[base + i * stride] = m;
        }
    }
}

/// Minimum over channels, then over a `window x window` neighbourhood with
/// edge replication.
pub fn dark_channel(input: &Tensor<f64>, window: usize) -> Result<Tensor<f64>> {
    check_window(window)?;
    let s = input.shape();
    let p = s.plane();
    let mut cmin = vec![f64::INFINITY; p];
    for c in 0..s.c {
        for (m, &v) in cmin.iter_mut().zip(input.channel(c)) {
            *m = m.min(v);
        }
    }
    let r = window / 2;
    let mut rows = vec![0.0; p];
    // along x: each row is a lane of stride 1
    min_filter_axis(&cmin, &mut rows, s.w, 1, s.h, s.w, r);
    let mut out = vec![0.0; p];
    // along y: each column is a lane of stride w
    min_filter_axis(&rows, &mut out, s.h, s.w, s.w, 1, r);
    Ok(Tensor::from_parts(Shape::new(1, s.h, s.w), out))
}

/// Mean feature vector over the brightest 0.1% (at least one) pixels of the
/// dark channel. Ties are broken by raster order.
pub fn estimate_atmospheric_light(features: &Tensor<f64>, dark: &Tensor<f64>) -> Result<Vec<f64>> {
    let s = features.shape();
    s.expect_spatial(&dark.shape())?;
    let n = s.plane();
    if n == 0 {
        return Err(Error::dim("spatial extent", 1, 0));
    }
    let take = ((n as f64 * 0.001).floor() as usize).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    let d = dark.data();
    let key = |&i: &usize| (std::cmp::Reverse(OrdF64(d[i])), i);
    if take < n {
        idx.select_nth_unstable_by_key(take - 1, key);
        idx.truncate(take);
    }
    idx.sort_unstable_by_key(key);
    Ok((0..s.c)
        .map(|c| {
            let ch = features.channel(c);
            idx.iter().map(|&i| ch[i]).sum::<f64>() / take as f64
        })
        .collect())
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// `T = 1 - omega * dark_channel(F / A)`, clamped to `[0, 1]`. Components of
/// `airlight` below [`AIRLIGHT_FLOOR`] are raised to it before inversion.
pub fn transmission_map(
    features: &Tensor<f64>,
    airlight: &[f64],
    omega: f64,
    window: usize,
) -> Result<Tensor<f64>> {
    let s = features.shape();
    if airlight.len() != s.c {
        return Err(Error::dim("airlight", s.c, airlight.len()));
    }
    let inv: Vec<f64> = airlight.iter().map(|&a| 1.0 / a.max(AIRLIGHT_FLOOR)).collect();
    let scaled = Tensor::from_fn(s, |c, y, x| features.at(c, y, x) * inv[c]);
    let dc = dark_channel(&scaled, window)?;
    Ok(dc.map(|v| (1.0 - omega * v).clamp(0.0, 1.0)))
}

/// Mean over the `(2r+1)^2` window clipped to the image, per pixel.
pub fn box_mean(input: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    // Separable clipped-window sums via prefix sums along each axis.
    let mut rows = vec![0.0; h * w];
    let mut prefix = vec![0.0; w.max(h) + 1];
    for y in 0..h {
        for x in 0..w {
            prefix[x + 1] = prefix[x] + input[y * w + x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + rows[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            out[y * w + x] = (prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64;
        }
    }
    out
}

/// Edge-preserving guided filter with a local linear model
/// `q = mean(a) * guide + mean(b)`.
pub fn guided_filter(
    guide: &Tensor<f64>,
    input: &Tensor<f64>,
    radius: usize,
    epsilon: f64,
) -> Result<Tensor<f64>> {
    let s = guide.shape();
    if s.c != 1 || input.shape().c != 1 {
        return Err(Error::dim("channels", 1, s.c.max(input.shape().c)));
    }
    s.expect_spatial(&input.shape())?;
    if radius == 0 || !(epsilon >= 0.0) {
        return Err(Error::Parameter(format!(
            "guided filter needs radius >= 1 and epsilon >= 0 (got {radius}, {epsilon})"
        )));
    }
    let (h, w) = (s.h, s.w);
    let g = guide.data();
    let p = input.data();
    let gp: Vec<f64> = g.iter().zip(p).map(|(a, b)| a * b).collect();
    let gg: Vec<f64> = g.iter().map(|a| a * a).collect();
    let mg = box_mean(g, h, w, radius);
    let mp = box_mean(p, h, w, radius);
    let mgp = box_mean(&gp, h, w, radius);
    let mgg = box_mean(&gg, h, w, radius);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for i in 0..h * w {
        let var = mgg[i] - mg[i] * mg[i];
        let cov = mgp[i] - mg[i] * mp[i];
        let denom = var + epsilon;
        a[i] = if denom > 0.0 { cov / denom } else { 0.0 };
        b[i] = mp[i] - a[i] * mg[i];
    }
    let ma = box_mean(&a, h, w, radius);
    let mb = box_mean(&b, h, w, radius);
    let out = (0..h * w).map(|i| ma[i] * g[i] + mb[i]).collect();
    Ok(Tensor::from_parts(s, out))
}

/// Parameters of the haze-density estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeConfig {
    pub window: usize,
    pub omega: f64,
    pub radius: usize,
    pub epsilon: f64,
}

impl HazeConfig {
    /// Settings for full-resolution images.
    pub fn image() -> Self {
        HazeConfig {
            window: 15,
            omega: OMEGA,
            radius: 8,
            epsilon: 1e-4,
        }
    }

    /// Settings for encoder feature maps, which are spatially coarser.
    pub fn features() -> Self {
        HazeConfig {
            window: 7,
            ..Self::image()
        }
    }
}

impl Default for HazeConfig {
    fn default() -> Self {
        Self::features()
    }
}

#[derive(Clone, Debug)]
pub struct HazeEstimate {
    /// Initial transmission `T`.
    pub transmission: Tensor<f64>,
    /// Guided-filter refinement `T'`.
    pub refined: Tensor<f64>,
    /// Haze density `H = 1 - T'`.
    pub density: Tensor<f64>,
    pub airlight: Vec<f64>,
    pub omega: f64,
}

/// Full estimator: channel-average the features and replicate the mean map,
/// take the dark channel of the raw features to locate the atmospheric light,
/// form the transmission from the averaged features, refine it with the
/// averaged map as guide, and return `H = 1 - T'`.
pub fn haze_density(features: &Tensor<f64>, cfg: &HazeConfig) -> Result<HazeEstimate> {
    if !features.is_finite() {
        return Err(Error::Numeric("non-finite visible features".into()));
    }
    let s = features.shape();
    let mean_map = channel_average_pool(features);
    let replicated = replicate_channels(&mean_map, s.c)?;
    let dark = dark_channel(features, cfg.window)?;
    let airlight = estimate_atmospheric_light(&replicated, &dark)?;
    let transmission = transmission_map(&replicated, &airlight, cfg.omega, cfg.window)?;
    let refined = guided_filter(&mean_map, &transmission, cfg.radius, cfg.epsilon)?.clamp(0.0, 1.0);
    let density = refined.map(|t| 1.0 - t);
    Ok(HazeEstimate {
        transmission,
        refined,
        density,
        airlight,
        omega: cfg.omega,
    })
}

/// Pearson correlation of two equally sized slices; zero when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
