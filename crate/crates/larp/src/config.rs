//! Run configuration: a flat key=value record covering every tunable.
//!
//! One macro invocation defines the field list, defaults, docs, parsing,
//! and the canonical text serialization; the CLI derives its flags from the
//! same table, so every key mirrors a flag. The canonical text is echoed at
//! startup and stored in checkpoints as provenance.

use crate::error::{Error, Result};
use crate::prior::{PriorConfig, SampleSchedule};
use crate::quant::QuantizerConfig;
use crate::tokenizer::TokenizerConfig;
use crate::video::PatchLayout;

/// Generator training layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMode {
    /// `[cls] x1 .. x(n-1)` predicting `x1 .. xn`.
    Class,
    /// `[cond tokens] [sep] x1 .. x(n-1)`, loss on the target half only.
    Frames,
}

impl std::str::FromStr for GenMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "class" => Ok(GenMode::Class),
            "frames" => Ok(GenMode::Frames),
            other => Err(format!("expected class|frames, got {other:?}")),
        }
    }
}

impl std::fmt::Display for GenMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GenMode::Class => "class",
            GenMode::Frames => "frames",
        })
    }
}

macro_rules! run_config {
    ($(($key:literal, $field:ident, $ty:ty, $default:expr, $doc:literal)),* $(,)?) => {
        /// Every tunable, one flat record.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default,)* }
            }
        }

        impl RunConfig {
            /// `(key, doc)` rows in canonical order; the CLI builds one flag
            /// per row.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $(($key, $doc),)*
            ];

            /// Set one field from its text form. Unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = value.parse::<$ty>().map_err(|_| {
                            Error::Config(format!("bad value {value:?} for key {key}"))
                        })?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown key {key}"))),
                }
            }

            /// Canonical key=value serialization (the provenance echo).
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{}={}\n", $key, self.$field));)*
                out
            }
        }
    };
}

run_config![
    // data
    ("seed", seed, u64, 7, "master seed for all randomness"),
    ("classes", classes, usize, 4, "synthetic dataset class count"),
    ("clips", clips, usize, 64, "synthetic dataset clip count"),
    ("frames", frames, usize, 8, "video frames T"),
    ("height", height, usize, 32, "video height H"),
    ("width", width, usize, 32, "video width W"),
    ("f_t", f_t, usize, 2, "temporal patch factor"),
    ("f_h", f_h, usize, 4, "vertical patch factor"),
    ("f_w", f_w, usize, 4, "horizontal patch factor"),
    ("flip_prob", flip_prob, f64, 0.5, "horizontal flip probability during training"),
    // tokenizer
    ("embed_dim", embed_dim, usize, 128, "tokenizer width d"),
    ("heads", heads, usize, 4, "tokenizer attention heads"),
    ("enc_depth", enc_depth, usize, 4, "encoder blocks"),
    ("dec_depth", dec_depth, usize, 4, "decoder blocks"),
    ("tokens", tokens, usize, 64, "holistic token count n"),
    // quantizer
    ("codebook_size", codebook_size, usize, 512, "codebook entries c"),
    ("code_dim", code_dim, usize, 8, "code dimension d'"),
    ("temperature", temperature, f64, 0.03, "quantizer softmax temperature"),
    ("commitment_weight", commitment_weight, f64, 0.25, "commitment loss weight"),
    ("codebook_weight", codebook_weight, f64, 1.0, "codebook loss weight"),
    ("quant_weight", quant_weight, f64, 0.1, "total quantization loss weight"),
    ("deterministic", deterministic, bool, false, "argmax quantization instead of sampling"),
    ("dead_code_reseed", dead_code_reseed, bool, true, "re-seed codes unused for a full epoch"),
    // prior
    ("prior_dim", prior_dim, usize, 128, "prior trunk width"),
    ("prior_depth", prior_depth, usize, 2, "prior trunk blocks"),
    ("prior_heads", prior_heads, usize, 4, "prior attention heads"),
    ("prior_temperature", prior_temperature, f64, 0.03, "prior output softmax temperature"),
    ("peak_rate", peak_rate, f64, 0.5, "scheduled-sampling peak mixing rate"),
    ("warm_frac", warm_frac, f64, 0.3, "fraction of steps to reach the peak rate"),
    // trainer
    ("alpha", alpha, f64, 0.06, "prior loss weight"),
    ("prior_lr_mult", prior_lr_mult, f64, 50.0, "prior learning-rate multiplier"),
    ("base_lr", base_lr, f64, 0.0001, "base learning rate"),
    ("beta1", beta1, f64, 0.9, "Adam beta1"),
    ("beta2", beta2, f64, 0.95, "Adam beta2"),
    ("total_steps", total_steps, usize, 2000, "tokenizer training steps"),
    ("warmup_steps", warmup_steps, usize, 100, "linear learning-rate warm-up steps"),
    ("batch_size", batch_size, usize, 8, "training batch size"),
    // generator
    ("gen_dim", gen_dim, usize, 192, "generator width"),
    ("gen_depth", gen_depth, usize, 4, "generator blocks"),
    ("gen_heads", gen_heads, usize, 4, "generator attention heads"),
    ("gen_mode", gen_mode, GenMode, GenMode::Class, "generator task: class|frames"),
    ("class_drop_prob", class_drop_prob, f64, 0.1, "class-token dropout for the CFG branch"),
    ("cfg_scale", cfg_scale, f64, 1.25, "classifier-free guidance scale"),
    ("token_dropout", token_dropout, f64, 0.1, "generator token dropout"),
    ("resid_dropout", resid_dropout, f64, 0.1, "generator residual dropout"),
    ("ff_dropout", ff_dropout, f64, 0.1, "generator feed-forward dropout"),
    ("gen_total_steps", gen_total_steps, usize, 1000, "generator training steps"),
    ("gen_warmup_steps", gen_warmup_steps, usize, 50, "generator warm-up steps"),
    ("gen_base_lr", gen_base_lr, f64, 0.0006, "generator base learning rate"),
    ("gen_batch_size", gen_batch_size, usize, 8, "generator batch size"),
    // generation / prediction
    ("num_samples", num_samples, usize, 4, "samples to generate"),
    ("class_id", class_id, usize, 0, "class for conditional generation"),
    ("cond_frames", cond_frames, usize, 5, "conditioning frames for prediction"),
    // analysis
    ("ngram_order", ngram_order, usize, 2, "n-gram order (2 or 3)"),
];

impl RunConfig {
    /// Parse key=value lines ('#' comments and blanks allowed) on top of
    /// defaults.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: missing '=' in {line:?}", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        for (what, dim, heads) in [
            ("embed_dim", self.embed_dim, self.heads),
            ("prior_dim", self.prior_dim, self.prior_heads),
            ("gen_dim", self.gen_dim, self.gen_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!("{what} {dim} not divisible by its head count {heads}")));
            }
        }
        if self.tokens == 0 {
            return Err(Error::Config("tokens must be >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be >= 2".into()));
        }
        if self.temperature <= 0.0 || self.prior_temperature <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.peak_rate) {
            return Err(Error::Config(format!("peak_rate must be in [0, 1], got {}", self.peak_rate)));
        }
        if !(0.0 < self.warm_frac && self.warm_frac <= 1.0) {
            return Err(Error::Config(format!("warm_frac must be in (0, 1], got {}", self.warm_frac)));
        }
        if self.alpha < 0.0 || self.prior_lr_mult <= 0.0 {
            return Err(Error::Config("alpha must be >= 0 and prior_lr_mult > 0".into()));
        }
        for (what, v) in [
            ("flip_prob", self.flip_prob),
            ("class_drop_prob", self.class_drop_prob),
            ("token_dropout", self.token_dropout),
            ("resid_dropout", self.resid_dropout),
            ("ff_dropout", self.ff_dropout),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{what} must be in [0, 1], got {v}")));
            }
        }
        if self.batch_size == 0 || self.gen_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.ngram_order != 2 && self.ngram_order != 3 {
            return Err(Error::Config(format!("ngram_order must be 2 or 3, got {}", self.ngram_order)));
        }
        if self.class_id >= self.classes {
            return Err(Error::Config(format!(
                "class_id {} out of range for {} classes",
                self.class_id, self.classes
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<PatchLayout> {
        PatchLayout::new(self.frames, self.height, self.width, self.f_t, self.f_h, self.f_w)
    }

    pub fn tokenizer_config(&self) -> Result<TokenizerConfig> {
        Ok(TokenizerConfig {
            layout: self.layout()?,
            embed_dim: self.embed_dim,
            heads: self.heads,
            enc_depth: self.enc_depth,
            dec_depth: self.dec_depth,
            tokens: self.tokens,
            code_dim: self.code_dim,
            codebook_size: self.codebook_size,
            quant: self.quantizer_config(),
        })
    }

    pub fn quantizer_config(&self) -> QuantizerConfig {
        QuantizerConfig {
            temperature: self.temperature,
            commitment_weight: self.commitment_weight,
            codebook_weight: self.codebook_weight,
            total_weight: self.quant_weight,
            deterministic: self.deterministic,
        }
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            input_dim: self.embed_dim,
            dim: self.prior_dim,
            depth: self.prior_depth,
            heads: self.prior_heads,
            code_dim: self.code_dim,
            output_temperature: self.prior_temperature,
        }
    }

    pub fn sample_schedule(&self) -> SampleSchedule {
        SampleSchedule {
            peak_rate: self.peak_rate,
            warm_frac: self.warm_frac,
            total_steps: self.total_steps,
        }
    }
}
