//! Run configuration: a flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! dataset = synthetic
//! layers = 4
//! eval_ks = 5,10,20
//! ```
//!
//! Every key belongs to one pipeline [`Stage`]. A stage's fingerprint hashes
//! the keys of that stage and all earlier ones, so changing a train-only key
//! leaves the prepare/pretrain/quantize/index artifacts reusable.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::recommender::Augmentation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Prepare,
    Pretrain,
    Quantize,
    Index,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Prepare,
        Stage::Pretrain,
        Stage::Quantize,
        Stage::Index,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Pretrain => "pretrain",
            Stage::Quantize => "quantize",
            Stage::Index => "index",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, String);

impl Value for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(format!("`{other}` is not a boolean")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Option<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| s.to_string()))
    }
    fn render(&self) -> String {
        self.clone().unwrap_or_default()
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Value for (usize, usize, usize) {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let parts = s
            .split(':')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        match parts.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            _ => Err("expected train:valid:test".into()),
        }
    }
    fn render(&self) -> String {
        format!("{}:{}:{}", self.0, self.1, self.2)
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, $stage:ident;)*) => {
        /// Every hyperparameter of a run. See the module docs for the file
        /// format; keys are the field names.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [(&'static str, Stage)] = &[$((stringify!($field), Stage::$stage),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as Value>::parse_value(value)
                            .map_err(|m| Error::Invalid(format!("config key `{key}`: {m}")))?;
                    })*
                    _ => return Err(Error::Invalid(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, rendered value, stage)` in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String, Stage)> {
                vec![$((stringify!($field), self.$field.render(), Stage::$stage),)*]
            }
        }
    };
}

run_config! {
    /// `synthetic`, or a path to a `user,item,rating,timestamp` file.
    dataset: String = "synthetic".into(), Prepare;
    user_attributes: Option<String> = None, Prepare;
    item_attributes: Option<String> = None, Prepare;
    /// Field delimiter of input files; `tab` and `::` are accepted.
    delimiter: String = ",".into(), Prepare;
    header: bool = false, Prepare;
    threshold: usize = 3, Prepare;
    max_seq_len: usize = 50, Prepare;
    split: (usize, usize, usize) = (8, 1, 1), Prepare;
    synth_groups: usize = 4, Prepare;
    synth_users: usize = 200, Prepare;
    synth_items: usize = 100, Prepare;
    synth_p_in: f64 = 0.08, Prepare;
    synth_p_out: f64 = 0.002, Prepare;
    /// Low ratings added per user; removed by binarization.
    synth_noise: usize = 3, Prepare;
    synth_genre_accuracy: f64 = 1.0, Prepare;
    synth_seed: u64 = 7, Prepare;

    seed: u64 = 0, Pretrain;
    attr_dim: usize = 16, Pretrain;
    pretrain_hidden: usize = 128, Pretrain;
    /// Representation dimension `d`.
    dim: usize = 64, Pretrain;
    pretrain_epochs: usize = 10, Pretrain;
    pretrain_batch: usize = 1024, Pretrain;
    pretrain_lr: f64 = 1e-3, Pretrain;
    pretrain_patience: usize = 2, Pretrain;

    /// Codebook layers `L`.
    layers: usize = 4, Quantize;
    /// Codewords per layer `J`.
    codebook_size: usize = 128, Quantize;
    beta: f64 = 0.25, Quantize;
    vq_epochs: usize = 50, Quantize;
    vq_batch: usize = 1024, Quantize;
    vq_lr: f64 = 1e-3, Quantize;

    /// Explicit neighbors `K`.
    k: usize = 30, Index;
    /// Latent neighbors per layer `K'`.
    k_prime: usize = 2, Index;

    embed_dim: usize = 64, Train;
    rec_hidden: usize = 128, Train;
    rec_output: usize = 64, Train;
    rec_init_std: f64 = 0.1, Train;
    epochs: usize = 50, Train;
    batch: usize = 1024, Train;
    lr: f64 = 1e-3, Train;
    patience: usize = 3, Train;
    valid_k: usize = 10, Train;
    /// In-batch negative pool for validation; 0 means `batch`.
    valid_batch: usize = 0, Train;
    user_semantic: bool = true, Train;
    item_semantic: bool = true, Train;
    user_linkage: bool = true, Train;
    item_linkage: bool = true, Train;

    eval_ks: Vec<usize> = vec![5, 10, 20], Eval;
    /// In-batch negative pool size; 0 means `batch`.
    eval_batch: usize = 0, Eval;
}

impl RunConfig {
    /// Settings sized for the bundled planted-cluster dataset.
    pub fn synthetic() -> Self {
        Self {
            codebook_size: 16,
            pretrain_epochs: 100,
            pretrain_batch: 64,
            pretrain_lr: 3e-3,
            pretrain_patience: 20,
            vq_epochs: 200,
            vq_batch: 256,
            vq_lr: 1e-2,
            k: 20,
            rec_init_std: 0.3,
            epochs: 100,
            batch: 128,
            patience: 10,
            eval_batch: 1024,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(Self::default(), text)
    }

    /// Applies the assignments in `text` on top of `base`.
    pub fn parse_onto(mut base: Self, text: &str) -> Result<Self> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            base.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, value, _) in self.entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_seq_len", self.max_seq_len),
            ("synth_groups", self.synth_groups),
            ("synth_users", self.synth_users),
            ("synth_items", self.synth_items),
            ("attr_dim", self.attr_dim),
            ("pretrain_hidden", self.pretrain_hidden),
            ("dim", self.dim),
            ("pretrain_batch", self.pretrain_batch),
            ("layers", self.layers),
            ("vq_batch", self.vq_batch),
            ("embed_dim", self.embed_dim),
            ("rec_hidden", self.rec_hidden),
            ("rec_output", self.rec_output),
            ("batch", self.batch),
            ("valid_k", self.valid_k),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("`{key}` must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.layers) {
            return Err(Error::Invalid(format!("dim {} is not divisible by layers {}", self.dim, self.layers)));
        }
        if !self.embed_dim.is_multiple_of(self.layers) {
            return Err(Error::Invalid(format!(
                "embed_dim {} is not divisible by layers {}",
                self.embed_dim, self.layers
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Invalid("codebook_size must be at least 2".into()));
        }
        if self.threshold > 5 {
            return Err(Error::Invalid("threshold must be at most 5".into()));
        }
        if self.split.0 == 0 || self.split.1 == 0 || self.split.2 == 0 {
            return Err(Error::Invalid("every split part must be positive".into()));
        }
        for (key, lr) in [("pretrain_lr", self.pretrain_lr), ("vq_lr", self.vq_lr), ("lr", self.lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Invalid(format!("`{key}` must be a positive number")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Invalid("`beta` must be non-negative".into()));
        }
        if !(self.rec_init_std.is_finite() && self.rec_init_std > 0.0) {
            return Err(Error::Invalid("`rec_init_std` must be positive".into()));
        }
        for (key, p) in [
            ("synth_p_in", self.synth_p_in),
            ("synth_p_out", self.synth_p_out),
            ("synth_genre_accuracy", self.synth_genre_accuracy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("`{key}` must lie in [0, 1]")));
            }
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Invalid("`eval_ks` must list positive cutoffs".into()));
        }
        if self.delimiter.is_empty() {
            return Err(Error::Invalid("`delimiter` must not be empty".into()));
        }
        Ok(())
    }

    pub fn delimiter(&self) -> String {
        match self.delimiter.as_str() {
            "tab" | "\\t" => "\t".into(),
            d => d.into(),
        }
    }

    pub fn augmentation(&self) -> Augmentation {
        Augmentation {
            user_semantic: self.user_semantic,
            item_semantic: self.item_semantic,
            user_linkage: self.user_linkage,
            item_linkage: self.item_linkage,
        }
    }

    pub fn set_augmentation(&mut self, aug: Augmentation) {
        self.user_semantic = aug.user_semantic;
        self.item_semantic = aug.item_semantic;
        self.user_linkage = aug.user_linkage;
        self.item_linkage = aug.item_linkage;
    }

    pub fn eval_batch(&self) -> usize {
        if self.eval_batch == 0 { self.batch } else { self.eval_batch }
    }

    pub fn valid_batch(&self) -> usize {
        if self.valid_batch == 0 { self.batch } else { self.valid_batch }
    }

    /// Hex SHA-256 over the keys of `stage` and every earlier stage.
    pub fn fingerprint(&self, stage: Stage) -> String {
        let mut hasher = Sha256::new();
        for (key, value, s) in self.entries() {
            if s <= stage {
                hasher.update(format!("{key}={value}\n").as_bytes());
            }
        }
        hasher.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# demo\ndataset = data/ratings.dat\ndelimiter = ::\nlayers = 2 # two layers\neval_ks = 1, 5\nsplit = 7:2:1\nuser_linkage = off\n";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.dataset, "data/ratings.dat");
        assert_eq!(config.layers, 2);
        assert_eq!(config.eval_ks, vec![1, 5]);
        assert_eq!(config.split, (7, 2, 1));
        assert!(!config.user_linkage);
        assert_eq!(RunConfig::parse(&config.render()).unwrap(), config);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("layers = 5").is_err());
        assert!(RunConfig::parse("layers = 3").is_err());
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("layers").is_err());
        assert!(RunConfig::parse("lr = -1").is_err());
        assert!(RunConfig::parse("codebook_size = 1").is_err());
        for l in [1, 2, 4, 8, 16, 32, 64] {
            assert!(RunConfig::parse(&format!("layers = {l}")).is_ok());
        }
    }

    #[test]
    fn fingerprints_follow_stages() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.lr = 0.5;
        for stage in [Stage::Prepare, Stage::Pretrain, Stage::Quantize, Stage::Index] {
            assert_eq!(a.fingerprint(stage), b.fingerprint(stage));
        }
        assert_ne!(a.fingerprint(Stage::Train), b.fingerprint(Stage::Train));
        b.codebook_size = 64;
        assert_eq!(a.fingerprint(Stage::Pretrain), b.fingerprint(Stage::Pretrain));
        assert_ne!(a.fingerprint(Stage::Quantize), b.fingerprint(Stage::Quantize));
        assert_eq!(a.fingerprint(Stage::Eval).len(), 64);
    }
}
