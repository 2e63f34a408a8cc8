//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tinydrive_core::buffer::{BufferConfig, ImportanceN, PriorityWeights};
use tinydrive_core::router::RouterConfig;
use tinydrive_core::seq_model::ModelConfig;
use tinydrive_core::vision::EncoderConfig;

use crate::error::{PipelineError, Result};

/// Which sampler drives the language phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    Prioritized,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub image_resolution: usize,
    pub n_views: usize,
    pub c_s: usize,
    pub c_h: usize,
    pub c_m: usize,
    pub c_l: usize,
    pub c_p: usize,
    pub num_classes: usize,
    pub fc_units: usize,
    pub fc_dropout: f64,
    pub local_var_window: usize,

    pub question_max_len: usize,
    pub answer_max_len: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,

    pub lang_epochs: usize,
    pub lang_batch_size: usize,
    pub lang_lr: f64,
    pub vision_lr: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,

    pub vision_epochs: usize,
    pub vision_batch_size: usize,
    pub head_lr: f64,
    /// Largest random translation of the fused map during head training,
    /// as a fraction of its side.
    pub head_shift: f64,

    pub k: usize,
    pub lambda_m: f64,
    pub lambda_p: f64,

    pub alpha: f64,
    pub beta: f64,
    pub beta_rate: f64,
    pub capacity: usize,
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub lambda_d: f64,
    pub refresh_every: u64,
    pub importance_n: ImportanceN,
    pub sampler: Sampler,

    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
    /// Validation frames written as attention-map images after training.
    pub attention_exports: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_resolution: 224,
            n_views: 1,
            c_s: 8,
            c_h: 16,
            c_m: 32,
            c_l: 64,
            c_p: 8,
            num_classes: 11,
            fc_units: 64,
            fc_dropout: 0.2,
            local_var_window: 3,
            question_max_len: 75,
            answer_max_len: 128,
            d_model: 256,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_dim: 1024,
            dropout: 0.2,
            lang_epochs: 15,
            lang_batch_size: 4,
            lang_lr: 1e-3,
            vision_lr: 1e-4,
            weight_decay: 1e-2,
            lr_gamma: 0.9,
            vision_epochs: 100,
            vision_batch_size: 16,
            head_lr: 1e-3,
            head_shift: 0.1,
            k: 64,
            lambda_m: 1.0,
            lambda_p: 1.0,
            alpha: 0.6,
            beta: 0.4,
            beta_rate: 0.001,
            capacity: 5_000,
            lambda_l: 0.5,
            lambda_u: 0.3,
            lambda_d: 0.2,
            refresh_every: 5,
            importance_n: ImportanceN::Count,
            sampler: Sampler::Prioritized,
            train_ratio: 0.7,
            val_ratio: 0.2,
            test_ratio: 0.1,
            seed: 0,
            attention_exports: 4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Six-view layout with the larger buffer and no classification head.
    pub fn multi_view() -> Self {
        Self {
            n_views: 6,
            num_classes: 0,
            capacity: 50_000,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::parse(&text)
    }

    /// Starts from the defaults and applies every `key = value` line.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(PipelineError::Config(format!("line {}: expected key = value", i + 1)));
            };
            cfg.set(k.trim(), v.trim())
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        macro_rules! num {
            ($($name:ident),*) => {
                match key {
                    $(stringify!($name) => { self.$name = parse_num(key, v)?; return Ok(()); })*
                    _ => {}
                }
            };
        }
        num!(
            image_resolution, n_views, c_s, c_h, c_m, c_l, c_p, num_classes, fc_units, fc_dropout,
            local_var_window, question_max_len, answer_max_len, d_model, enc_layers, dec_layers, heads,
            ff_dim, dropout, lang_epochs, lang_batch_size, lang_lr, vision_lr, weight_decay, lr_gamma,
            vision_epochs, vision_batch_size, head_lr, head_shift, k, lambda_m, lambda_p, alpha, beta, beta_rate,
            capacity, lambda_l, lambda_u, lambda_d, refresh_every, train_ratio, val_ratio, test_ratio,
            seed, attention_exports
        );
        match key {
            "importance_n" => {
                self.importance_n = match v {
                    "count" => ImportanceN::Count,
                    "capacity" => ImportanceN::Capacity,
                    _ => return Err(PipelineError::Config(format!("importance_n: expected count or capacity, got {v:?}"))),
                }
            }
            "sampler" => {
                self.sampler = match v {
                    "prioritized" => Sampler::Prioritized,
                    "uniform" => Sampler::Uniform,
                    _ => return Err(PipelineError::Config(format!("sampler: expected prioritized or uniform, got {v:?}"))),
                }
            }
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        let positive_ints = [
            ("image_resolution", self.image_resolution),
            ("n_views", self.n_views),
            ("c_s", self.c_s),
            ("c_h", self.c_h),
            ("c_m", self.c_m),
            ("c_l", self.c_l),
            ("c_p", self.c_p),
            ("fc_units", self.fc_units),
            ("local_var_window", self.local_var_window),
            ("question_max_len", self.question_max_len),
            ("answer_max_len", self.answer_max_len),
            ("d_model", self.d_model),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("lang_batch_size", self.lang_batch_size),
            ("vision_batch_size", self.vision_batch_size),
            ("k", self.k),
            ("capacity", self.capacity),
            ("refresh_every", self.refresh_every as usize),
        ];
        for (name, v) in positive_ints {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        let positive_reals = [
            ("lang_lr", self.lang_lr),
            ("vision_lr", self.vision_lr),
            ("head_lr", self.head_lr),
            ("weight_decay", self.weight_decay),
            ("lr_gamma", self.lr_gamma),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("beta_rate", self.beta_rate),
            ("lambda_m", self.lambda_m),
            ("lambda_p", self.lambda_p),
            ("lambda_l", self.lambda_l),
            ("lambda_u", self.lambda_u),
            ("lambda_d", self.lambda_d),
            ("train_ratio", self.train_ratio),
            ("val_ratio", self.val_ratio),
            ("test_ratio", self.test_ratio),
        ];
        for (name, v) in positive_reals {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be a positive number"));
            }
        }
        if !(0.0..0.5).contains(&self.head_shift) {
            return bad("head_shift must lie in [0, 0.5)");
        }
        if self.beta > 1.0 {
            return bad("beta must not exceed 1");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.fc_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if (self.train_ratio + self.val_ratio + self.test_ratio - 1.0).abs() > 1e-9 {
            return bad("split ratios must sum to 1");
        }
        if self.n_views != 1 && self.n_views != 6 {
            return bad("n_views must be 1 or 6");
        }
        self.encoder_config().validate()?;
        self.model_config(8).validate()?;
        Ok(())
    }

    /// Renders every key, so that `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let json = serde_json::to_value(self).expect("config serializes");
        for (k, v) in json.as_object().expect("struct") {
            let v = match v {
                serde_json::Value::String(s) => s.to_lowercase(),
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            n_views: self.n_views,
            stem_channels: self.c_s,
            high_channels: self.c_h,
            mid_channels: self.c_m,
            low_channels: self.c_l,
            proj_channels: self.c_p,
            resolution: self.image_resolution,
            num_classes: (self.num_classes > 0).then_some(self.num_classes),
            fc_units: self.fc_units,
            fc_dropout: self.fc_dropout,
            local_var_window: self.local_var_window,
        }
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            d_model: self.d_model,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            vision_dim: self.encoder_config().embed_dim(),
            max_src_len: self.question_max_len + 1,
            max_tgt_len: self.answer_max_len,
        }
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            k: self.k,
            lambda_m: self.lambda_m,
            lambda_p: self.lambda_p,
        }
    }

    pub fn buffer_config(&self) -> BufferConfig {
        BufferConfig {
            capacity: self.capacity,
            alpha: self.alpha,
            beta0: self.beta,
            beta_rate: self.beta_rate,
            refresh_every: self.refresh_every,
            importance_n: self.importance_n,
            weights: PriorityWeights {
                loss: self.lambda_l,
                uncertainty: self.lambda_u,
                diversity: self.lambda_d,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_hyperparameter_table() {
        let c = TrainConfig::default();
        assert_eq!((c.image_resolution, c.question_max_len, c.answer_max_len), (224, 75, 128));
        assert_eq!((c.lang_epochs, c.vision_epochs, c.lang_batch_size, c.vision_batch_size), (15, 100, 4, 16));
        assert_eq!((c.lang_lr, c.vision_lr, c.weight_decay, c.lr_gamma), (1e-3, 1e-4, 1e-2, 0.9));
        assert_eq!((c.k, c.alpha, c.beta, c.beta_rate), (64, 0.6, 0.4, 0.001));
        assert_eq!((c.lambda_l, c.lambda_u, c.lambda_d, c.lambda_m, c.lambda_p), (0.5, 0.3, 0.2, 1.0, 1.0));
        assert_eq!(c.capacity, 5_000);
        assert_eq!(TrainConfig::multi_view().capacity, 50_000);
        c.validate().unwrap();
        TrainConfig::multi_view().validate().unwrap();
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = TrainConfig::parse("# desk run\nimage_resolution = 64\nsampler=uniform\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(c.image_resolution, 64);
        assert_eq!(c.sampler, Sampler::Uniform);
        assert_eq!(c.seed, 9);
        assert_eq!(c.k, 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(TrainConfig::parse("learning_rate = 1").is_err());
        assert!(TrainConfig::parse("k = -3").is_err());
        assert!(TrainConfig::parse("k = 0").is_err());
        assert!(TrainConfig::parse("no equals sign").is_err());
        assert!(TrainConfig::parse("train_ratio = 0.8").is_err());
        assert!(TrainConfig::parse("image_resolution = 30").is_err());
        assert!(TrainConfig::parse("importance_n = all").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = TrainConfig::default();
        c.sampler = Sampler::Uniform;
        c.importance_n = ImportanceN::Capacity;
        c.image_resolution = 96;
        assert_eq!(TrainConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn derived_shapes() {
        assert_eq!(TrainConfig::default().encoder_config().embed_dim(), 24);
        assert_eq!(TrainConfig::multi_view().encoder_config().embed_dim(), 144);
        assert_eq!(TrainConfig::default().model_config(10).max_src_len, 76);
    }
}
