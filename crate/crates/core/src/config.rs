//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and text after `#` are ignored. Every key is optional and
//! falls back to its default; unknown keys and repeated keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Ablation, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub crop_size: usize,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    pub alpha: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 6,
            lr_init: 2e-4,
            lr_final: 2e-6,
            crop_size: 64,
            augment: true,
            alpha: 1.0,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            model: ModelConfig::default(),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {raw:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} given twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr_init" => self.lr_init = parse_value(key, v)?,
            "lr_final" => self.lr_final = parse_value(key, v)?,
            "crop_size" => self.crop_size = parse_value(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam_eps = parse_value(key, v)?,
            "channels" => m.channels = parse_value(key, v)?,
            "encoder_depth" => m.encoder_depth = parse_value(key, v)?,
            "heads" => m.heads = parse_value(key, v)?,
            "expansion" => m.expansion = parse_value(key, v)?,
            "pool_size" => m.pool_size = parse_value(key, v)?,
            "fusion_stages" => m.fusion_stages = parse_value(key, v)?,
            "shared_encoder" => m.shared_encoder = parse_bool(key, v)?,
            "regenerate_prompts" => m.regenerate_prompts = parse_bool(key, v)?,
            "haze_window" => m.haze.window = parse_value(key, v)?,
            "haze_omega" => m.haze.omega = parse_value(key, v)?,
            "haze_radius" => m.haze.radius = parse_value(key, v)?,
            "haze_epsilon" => m.haze.epsilon = parse_value(key, v)?,
            k if Ablation::NAMES.contains(&k) => {
                let b = parse_bool(key, v)?;
                m.ablation.set(k, b)?;
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return bad("epochs, batch_size and crop_size must be positive".into());
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init && self.lr_init.is_finite()) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_final <= lr_init (got {} and {})",
                self.lr_final, self.lr_init
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        let m = &self.model;
        if m.channels == 0 || m.heads == 0 || m.channels % m.heads != 0 {
            return bad(format!("{} channels are not divisible into {} heads", m.channels, m.heads));
        }
        if m.pool_size == 0 || m.fusion_stages == 0 {
            return bad("pool_size and fusion_stages must be positive".into());
        }
        if !(m.expansion > 0.0 && (m.expansion * m.channels as f64).floor() >= 1.0) {
            return bad(format!("expansion {} leaves no feed-forward units", m.expansion));
        }
        let h = &m.haze;
        if h.window % 2 == 0 || h.radius == 0 {
            return bad(format!("haze_window must be odd and haze_radius positive (got {}, {})", h.window, h.radius));
        }
        if !(h.omega > 0.0 && h.omega <= 1.0) || !(h.epsilon >= 0.0) {
            return bad(format!("haze_omega must lie in (0, 1] and haze_epsilon be >= 0 (got {}, {})", h.omega, h.epsilon));
        }
        Ok(())
    }

    /// Canonical text form listing every key; `parse(to_text())` restores
    /// the same configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_init", self.lr_init.to_string());
        kv("lr_final", self.lr_final.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("augment", self.augment.to_string());
        kv("alpha", self.alpha.to_string());
        kv("seed", self.seed.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("channels", m.channels.to_string());
        kv("encoder_depth", m.encoder_depth.to_string());
        kv("heads", m.heads.to_string());
        kv("expansion", m.expansion.to_string());
        kv("pool_size", m.pool_size.to_string());
        kv("fusion_stages", m.fusion_stages.to_string());
        kv("shared_encoder", m.shared_encoder.to_string());
        kv("regenerate_prompts", m.regenerate_prompts.to_string());
        kv("haze_window", m.haze.window.to_string());
        kv("haze_omega", m.haze.omega.to_string());
        kv("haze_radius", m.haze.radius.to_string());
        kv("haze_epsilon", m.haze.epsilon.to_string());
        for (name, on) in Ablation::NAMES.iter().zip(m.ablation.flags()) {
            kv(name, on.to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
        assert_eq!(TrainConfig::parse("# nothing\n\n   \n").unwrap(), TrainConfig::default());
    }

    #[test]
    fn keys_comments_and_ablations() {
        let cfg = TrainConfig::parse("epochs = 5 # short run\ncrop_size=32\nno_hde = true\naugment = off\nlr_init = 1e-3").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.crop_size, 32);
        assert!(cfg.model.ablation.no_hde);
        assert!(!cfg.augment);
        assert_eq!(cfg.lr_init, 1e-3);
    }

    #[test]
    fn typos_and_bad_values_are_config_errors() {
        for text in [
            "no_hdee = true",
            "epochs = many",
            "epochs = 3\nepochs = 4",
            "just a line",
            "no_p_ir = maybe",
            "lr_final = 1e-3",
            "channels = 16\nheads = 3",
            "haze_window = 8",
            "batch_size = 0",
        ] {
            let err = TrainConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err:?}");
        }
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.lr_init = 3.3e-4;
        cfg.model.expansion = 2.66;
        cfg.model.ablation.no_fb_peb = true;
        cfg.model.regenerate_prompts = true;
        let text = cfg.to_text();
        assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::parse(&text).unwrap().to_text(), text);
    }

    proptest! {
        #[test]
        fn float_values_survive_text(lr in 1e-7f64..1.0, frac in 0.0f64..=1.0, alpha in 0.0f64..10.0) {
            let cfg = TrainConfig { lr_init: lr, lr_final: (lr * frac).max(f64::MIN_POSITIVE), alpha, ..TrainConfig::default() };
            prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
