use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};

/// What the calibration scores multiply before being added back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcmVariant {
    /// `f_c = f_e + α ⊙ f_e`
    ScaleInput,
    /// `f_c = f_e + α ⊙ SA(·)[:, :C]`
    ScaleAttended,
}

impl EcmVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ScaleInput => "scale_input",
            Self::ScaleAttended => "scale_attended",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scale_input" => Ok(Self::ScaleInput),
            "scale_attended" => Ok(Self::ScaleAttended),
            other => Err(Error::InvalidConfig(format!(
                "ecm_variant must be scale_input or scale_attended, got {other:?}"
            ))),
        }
    }
}

/// Architecture, data and optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Feature width C shared by the neck, fusion and decoder.
    pub c: usize,
    /// Number of key vision features / emphasis rows.
    pub n_k: usize,
    /// Decoder attention heads.
    pub heads: usize,
    pub n_dec_layers: usize,
    /// Decoder feed-forward width.
    pub dff: usize,
    pub height: usize,
    pub width: usize,
    pub c2: usize,
    pub c3: usize,
    pub c4: usize,
    pub max_sentence_length: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Channels of the full-resolution pixel embedding read by the mask head.
    pub pixel_channels: usize,
    /// Add fixed 2D sine encodings to the decoder's pixel tokens.
    pub pixel_pos_encoding: bool,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Zero-based epoch from which the decayed rate applies.
    pub lr_decay_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Model initialisation and shuffling seed.
    pub seed: u64,
    /// Seed of the generated train/val splits.
    pub data_seed: u64,
    pub ecm_variant: EcmVariant,
    pub use_egm: bool,
    pub use_ecm: bool,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// Minutes-scale CPU profile.
    pub fn desk() -> Self {
        Self {
            c: 64,
            n_k: 16,
            heads: 4,
            n_dec_layers: 2,
            dff: 256,
            height: 64,
            width: 64,
            c2: 32,
            c3: 48,
            c4: 64,
            max_sentence_length: 8,
            text_layers: 2,
            text_heads: 4,
            pixel_channels: 8,
            pixel_pos_encoding: true,
            lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 20,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            data_seed: 1,
            ecm_variant: EcmVariant::ScaleInput,
            use_egm: true,
            use_ecm: true,
            train_size: 4000,
            val_size: 500,
        }
    }

    /// Full-size settings (480x480 input, 50 epochs); impractical on CPU.
    pub fn full_scale() -> Self {
        Self {
            c: 512,
            heads: 8,
            dff: 2048,
            height: 480,
            width: 480,
            c2: 512,
            c3: 1024,
            c4: 2048,
            max_sentence_length: 17,
            text_heads: 8,
            lr: 1e-4,
            lr_decay_epoch: 35,
            epochs: 50,
            batch_size: 64,
            ..Self::desk()
        }
    }

    /// Small sizes used by gradient checks.
    pub fn toy() -> Self {
        Self {
            c: 16,
            n_k: 4,
            heads: 2,
            n_dec_layers: 1,
            dff: 32,
            height: 32,
            width: 32,
            c2: 8,
            c3: 8,
            c4: 16,
            text_layers: 1,
            text_heads: 2,
            pixel_channels: 4,
            ..Self::desk()
        }
    }

    /// Spatial size of the fused vision map (stride 16).
    pub fn vision_grid(&self) -> (usize, usize) {
        (self.height / 16, self.width / 16)
    }

    /// Learning rate for a zero-based epoch under the step-decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_k == 0 || self.n_k >= self.c {
            return bad(format!(
                "N_k must satisfy 1 <= N_k < C, got N_k={} with C={}",
                self.n_k, self.c
            ));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return bad(format!(
                "H and W must be positive multiples of 32, got {}x{}",
                self.height, self.width
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(format!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            ));
        }
        if !self.c.is_multiple_of(4) {
            return bad(format!("C must be a multiple of 4, got {}", self.c));
        }
        if self.heads == 0 || !self.c.is_multiple_of(self.heads) {
            return bad(format!("decoder heads ({}) must divide C ({})", self.heads, self.c));
        }
        if self.text_heads == 0 || !self.c.is_multiple_of(self.text_heads) {
            return bad(format!("text heads ({}) must divide C ({})", self.text_heads, self.c));
        }
        if self.n_dec_layers == 0 || self.text_layers == 0 {
            return bad(format!(
                "need at least one decoder and one text layer, got {} and {}",
                self.n_dec_layers, self.text_layers
            ));
        }
        if self.max_sentence_length < 2 {
            return bad(format!(
                "max_sentence_length must be >= 2, got {}",
                self.max_sentence_length
            ));
        }
        for (name, v) in [
            ("dff", self.dff),
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
            ("pixel_channels", self.pixel_channels),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Set one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got {v:?}"))),
            }
        }
        match key {
            "C" | "c" => self.c = num(key, value)?,
            "N_k" | "n_k" => self.n_k = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "n_dec_layers" => self.n_dec_layers = num(key, value)?,
            "dff" => self.dff = num(key, value)?,
            "H" | "height" => self.height = num(key, value)?,
            "W" | "width" => self.width = num(key, value)?,
            "C2" | "c2" => self.c2 = num(key, value)?,
            "C3" | "c3" => self.c3 = num(key, value)?,
            "C4" | "c4" => self.c4 = num(key, value)?,
            "max_sentence_length" => self.max_sentence_length = num(key, value)?,
            "text_layers" => self.text_layers = num(key, value)?,
            "text_heads" => self.text_heads = num(key, value)?,
            "pixel_channels" => self.pixel_channels = num(key, value)?,
            "pixel_pos_encoding" => self.pixel_pos_encoding = flag(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "lr_decay_epoch" => self.lr_decay_epoch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "ecm_variant" => self.ecm_variant = EcmVariant::parse(value)?,
            "use_egm" => self.use_egm = flag(key, value)?,
            "use_ecm" => self.use_ecm = flag(key, value)?,
            "train_size" => self.train_size = num(key, value)?,
            "val_size" => self.val_size = num(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in a stable order; `set` accepts every pair.
    pub fn entries(&self) -> alloc::vec::Vec<(&'static str, String)> {
        alloc::vec![
            ("C", format!("{}", self.c)),
            ("N_k", format!("{}", self.n_k)),
            ("heads", format!("{}", self.heads)),
            ("n_dec_layers", format!("{}", self.n_dec_layers)),
            ("dff", format!("{}", self.dff)),
            ("H", format!("{}", self.height)),
            ("W", format!("{}", self.width)),
            ("C2", format!("{}", self.c2)),
            ("C3", format!("{}", self.c3)),
            ("C4", format!("{}", self.c4)),
            ("max_sentence_length", format!("{}", self.max_sentence_length)),
            ("text_layers", format!("{}", self.text_layers)),
            ("text_heads", format!("{}", self.text_heads)),
            ("pixel_channels", format!("{}", self.pixel_channels)),
            ("pixel_pos_encoding", format!("{}", self.pixel_pos_encoding)),
            ("lr", format!("{:?}", self.lr)),
            ("lr_decay_factor", format!("{:?}", self.lr_decay_factor)),
            ("lr_decay_epoch", format!("{}", self.lr_decay_epoch)),
            ("epochs", format!("{}", self.epochs)),
            ("batch_size", format!("{}", self.batch_size)),
            ("seed", format!("{}", self.seed)),
            ("data_seed", format!("{}", self.data_seed)),
            ("ecm_variant", String::from(self.ecm_variant.as_str())),
            ("use_egm", format!("{}", self.use_egm)),
            ("use_ecm", format!("{}", self.use_ecm)),
            ("train_size", format!("{}", self.train_size)),
            ("val_size", format!("{}", self.val_size)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::desk().validate().unwrap();
        Config::full_scale().validate().unwrap();
        Config::toy().validate().unwrap();
    }

    #[test]
    fn full_scale_settings() {
        let p = Config::full_scale();
        assert_eq!(p.lr, 1e-4);
        assert_eq!(p.lr_decay_factor, 0.1);
        assert_eq!(p.lr_decay_epoch, 35);
        assert_eq!(p.epochs, 50);
        assert_eq!(p.n_k, 16);
        assert_eq!(p.max_sentence_length, 17);
        assert_eq!(p.dff, 2048);
        assert_eq!(p.heads, 8);
    }

    #[test]
    fn rejects_nk_not_below_c() {
        let mut c = Config::desk();
        c.n_k = c.c;
        let msg = format!("{}", c.validate().unwrap_err());
        assert!(msg.contains("N_k < C"), "{msg}");
    }

    #[test]
    fn rejects_bad_sizes_and_rate() {
        let mut c = Config::desk();
        c.height = 48;
        assert!(c.validate().is_err());
        let mut c = Config::desk();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = Config::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_decay() {
        let c = Config::full_scale();
        assert_eq!(c.lr_at_epoch(34), 1e-4);
        assert_eq!(c.lr_at_epoch(35), 1e-4 * 0.1);
        assert_eq!(c.lr_at_epoch(49), 1e-4 * 0.1);
    }

    #[test]
    fn entries_round_trip_through_set() {
        let mut src = Config::full_scale();
        src.ecm_variant = EcmVariant::ScaleAttended;
        src.use_ecm = false;
        src.seed = 99;
        let mut dst = Config::toy();
        for (k, v) in src.entries() {
            dst.set(k, &v).unwrap();
        }
        assert_eq!(dst, src);
    }
}
