//! Flat `key = value` run configuration.
//!
//! Every key has a documented default (see [`KEYS`]); files only need the
//! keys they change. Unknown keys and unparsable values are rejected.
//! Environment variables named `SEGLAB_<SECTION>_<NAME>` (for example
//! `SEGLAB_TRAIN_LEARNING_RATE`) override file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{HistoryUnit, SegmentGrid};
use crate::io::SyntheticConfig;
use crate::model::encoder::EncoderConfig;
use crate::model::ModelConfig;
use crate::segrec::{AggregationMode, SegRecConfig};
use crate::training::{LossConfig, Objective, PairMode, TrainConfig};
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "SEGLAB_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Real,
    Bool,
    Choice(&'static [&'static str]),
}

/// `(key, kind, default, description)` for every accepted key.
const KEYS: &[(&str, Kind, &str, &str)] = &[
    ("seed", Kind::Int, "7", "seed for initialisation, shuffling and the random baseline"),
    ("grid.segment_length_s", Kind::Real, "5", "segment length in seconds"),
    ("grid.max_segments", Kind::Int, "40", "segments per video at most"),
    ("grid.completion_eps_s", Kind::Real, "0.25", "slack when deciding a view completed"),
    ("history.max_len", Kind::Int, "120", "history length"),
    ("history.unit", Kind::Choice(&["segments", "videos"]), "segments", "what history.max_len counts"),
    ("split.seed", Kind::Int, "7", "user split seed when the data has no split file"),
    ("synth.n_users", Kind::Int, "1000", "synthetic users"),
    ("synth.n_videos", Kind::Int, "2000", "synthetic videos"),
    ("synth.latent_dim", Kind::Int, "2", "taste and content dimension"),
    ("synth.content_smoothness", Kind::Real, "0.8", "AR(1) coefficient of contents along a video"),
    ("synth.position_drift", Kind::Real, "0.05", "interest lost per segment index"),
    ("synth.hazard_base", Kind::Real, "-5.5", "exit hazard offset"),
    ("synth.interest_gain", Kind::Real, "2", "exit hazard slope in interest"),
    ("synth.noise_sd", Kind::Real, "0.3", "interest noise"),
    ("synth.choice_sharpness", Kind::Real, "1", "how strongly taste steers video choice"),
    ("synth.interactions_per_user", Kind::Int, "100", "views per user"),
    ("synth.visual_dim", Kind::Int, "32", "visual feature width"),
    ("synth.visual_noise_sd", Kind::Real, "0.5", "visual feature noise"),
    ("synth.cold_video_rate", Kind::Real, "0.3333333333333333", "share of videos held out of training"),
    ("synth.duration_min_s", Kind::Int, "10", "shortest video"),
    ("synth.duration_max_s", Kind::Int, "200", "longest video"),
    ("synth.seed", Kind::Int, "7", "generator seed"),
    ("model.embed_dim", Kind::Int, "16", "model width d"),
    ("model.fusion_heads", Kind::Int, "4", "heads of the pairwise fusion product"),
    ("model.use_id", Kind::Bool, "true", "ID modality"),
    ("model.use_visual", Kind::Bool, "true", "visual modality"),
    ("model.attention", Kind::Bool, "true", "cross-attention (off: mean pooling)"),
    ("model.positions", Kind::Bool, "true", "segment order embeddings and position bias"),
    ("encoder.layers", Kind::Int, "1", "cross-attention layers"),
    ("encoder.score_dim", Kind::Int, "8", "score features per modality"),
    ("encoder.ffn_hidden", Kind::Int, "0", "feed-forward hidden width, 0 for 2d"),
    ("encoder.dropout", Kind::Real, "0", "dropout rate during training"),
    ("loss.pair_mode", Kind::Choice(&["all-except-y", "watched-only"]), "all-except-y", "segments compared with the skipped one"),
    ("loss.objective", Kind::Choice(&["intra-video", "bce"]), "intra-video", "training objective"),
    ("train.learning_rate", Kind::Real, "0.001", "Adam step size"),
    ("train.batch_size", Kind::Int, "256", "samples per step"),
    ("train.max_epochs", Kind::Int, "12", "epoch limit"),
    ("train.patience", Kind::Int, "3", "epochs without validation gain before stopping"),
    ("train.chunk_size", Kind::Int, "64", "samples per gradient work unit"),
    ("train.oov_rate", Kind::Real, "0.2", "chance of training a sample on the unknown user or video row"),
    ("rec.mode", Kind::Choice(&["segrec", "video", "segsum", "segadjust"]), "segrec", "aggregation of segment scores"),
    ("rec.interest", Kind::Choice(&["checkpoint", "oracle"]), "checkpoint", "source of frozen interest scores"),
    ("rec.embed_dim", Kind::Int, "16", "backbone embedding width"),
    ("rec.hidden1", Kind::Int, "64", "backbone first hidden layer"),
    ("rec.hidden2", Kind::Int, "32", "backbone second hidden layer"),
    ("rec.use_visual", Kind::Bool, "true", "backbone sees projected visual features"),
    ("rec.n_buckets", Kind::Int, "10", "duration buckets for effective-view labels"),
    ("rec.learning_rate", Kind::Real, "0.003", "backbone Adam step size"),
    ("rec.batch_size", Kind::Int, "256", "backbone samples per step"),
    ("rec.max_epochs", Kind::Int, "10", "backbone epoch limit"),
    ("rec.patience", Kind::Int, "2", "backbone early-stopping patience"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, _, d, _)| (k, d.to_string())).collect(),
        }
    }
}

fn check(kind: Kind, key: &str, value: &str) -> Result<()> {
    let bad = |msg: String| Err(Error::Config {
        key: key.to_string(),
        msg,
    });
    match kind {
        Kind::Int => value
            .parse::<u64>()
            .map(|_| ())
            .or_else(|_| bad(format!("`{value}` is not a non-negative integer"))),
        Kind::Real => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => bad(format!("`{value}` is not a finite number")),
        },
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => bad(format!("`{value}` is not true or false")),
        },
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                bad(format!("`{value}` is not one of {}", options.join(", ")))
            }
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, kind, _, _)) = KEYS.iter().find(|e| e.0 == key) else {
            return Err(Error::Config {
                key: key.to_string(),
                msg: "unknown key".into(),
            });
        };
        let value = value.trim();
        check(kind, key, value)?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: format!("line {}", i + 1),
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `SEGLAB_*` variables from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut pending: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let name = k.as_ref().strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                let key = match name.split_once('_') {
                    Some((section, rest)) if section != "seed" => format!("{section}.{rest}"),
                    _ => name,
                };
                Some((key, v.as_ref().to_string()))
            })
            .collect();
        pending.sort();
        for (k, v) in pending {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    /// Loads `path` (or the defaults) and applies the process environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.raw(key).parse().expect("validated integer")
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated integer")
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated number")
    }

    pub fn get_bool(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn get_str(&self, key: &str) -> &str {
        self.raw(key)
    }

    /// Resolved `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reference page of every key with its default.
    pub fn reference() -> String {
        KEYS.iter()
            .map(|(k, _, d, doc)| format!("{k} = {d}    # {doc}\n"))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.get_u64("seed")
    }

    pub fn grid(&self) -> SegmentGrid {
        SegmentGrid {
            segment_length_s: self.get_f64("grid.segment_length_s"),
            max_segments: self.get_usize("grid.max_segments"),
            completion_eps_s: self.get_f64("grid.completion_eps_s"),
        }
    }

    pub fn history_unit(&self) -> HistoryUnit {
        match self.get_str("history.unit") {
            "videos" => HistoryUnit::Videos,
            _ => HistoryUnit::Segments,
        }
    }

    pub fn synth(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_users: self.get_usize("synth.n_users"),
            n_videos: self.get_usize("synth.n_videos"),
            latent_dim: self.get_usize("synth.latent_dim"),
            content_smoothness: self.get_f64("synth.content_smoothness"),
            position_drift: self.get_f64("synth.position_drift"),
            hazard_base: self.get_f64("synth.hazard_base"),
            interest_gain: self.get_f64("synth.interest_gain"),
            noise_sd: self.get_f64("synth.noise_sd"),
            choice_sharpness: self.get_f64("synth.choice_sharpness"),
            interactions_per_user: self.get_usize("synth.interactions_per_user"),
            visual_dim: self.get_usize("synth.visual_dim"),
            visual_noise_sd: self.get_f64("synth.visual_noise_sd"),
            cold_video_rate: self.get_f64("synth.cold_video_rate"),
            duration_min_s: self.get_u64("synth.duration_min_s") as u32,
            duration_max_s: self.get_u64("synth.duration_max_s") as u32,
            seed: self.get_u64("synth.seed"),
        }
    }

    /// Model settings; the visual width comes from the data.
    pub fn model(&self, visual_dim: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.get_usize("model.embed_dim"),
            encoder: EncoderConfig {
                layers: self.get_usize("encoder.layers"),
                score_dim: self.get_usize("encoder.score_dim"),
                ffn_hidden: self.get_usize("encoder.ffn_hidden"),
                dropout: self.get_f64("encoder.dropout"),
            },
            fusion_heads: self.get_usize("model.fusion_heads"),
            use_id: self.get_bool("model.use_id"),
            use_visual: self.get_bool("model.use_visual"),
            attention: self.get_bool("model.attention"),
            positions: self.get_bool("model.positions"),
            max_segments: self.get_usize("grid.max_segments"),
            history_len: self.get_usize("history.max_len"),
            visual_dim,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            pair_mode: match self.get_str("loss.pair_mode") {
                "watched-only" => PairMode::WatchedOnly,
                _ => PairMode::AllExceptY,
            },
            objective: match self.get_str("loss.objective") {
                "bce" => Objective::Bce,
                _ => Objective::IntraVideo,
            },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.get_f64("train.learning_rate"),
            batch_size: self.get_usize("train.batch_size"),
            max_epochs: self.get_usize("train.max_epochs"),
            patience: self.get_usize("train.patience"),
            seed: self.seed(),
            chunk_size: self.get_usize("train.chunk_size"),
            oov_rate: self.get_f64("train.oov_rate"),
        }
    }

    pub fn rec_mode(&self) -> AggregationMode {
        AggregationMode::parse(self.get_str("rec.mode")).expect("validated choice")
    }

    pub fn rec(&self, visual_dim: usize) -> SegRecConfig {
        SegRecConfig {
            mode: self.rec_mode(),
            embed_dim: self.get_usize("rec.embed_dim"),
            hidden: (self.get_usize("rec.hidden1"), self.get_usize("rec.hidden2")),
            use_visual: self.get_bool("rec.use_visual"),
            visual_dim,
            max_segments: self.get_usize("grid.max_segments"),
        }
    }

    pub fn rec_train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.get_f64("rec.learning_rate"),
            batch_size: self.get_usize("rec.batch_size"),
            max_epochs: self.get_usize("rec.max_epochs"),
            patience: self.get_usize("rec.patience"),
            seed: self.seed(),
            chunk_size: self.get_usize("train.chunk_size"),
            oov_rate: 0.0,
        }
    }

    /// Cross-key checks beyond per-value parsing.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, e: Error| Error::Config {
            key: key.to_string(),
            msg: e.to_string(),
        };
        self.grid().validate().map_err(|e| wrap("grid", e))?;
        self.synth().validate().map_err(|e| wrap("synth", e))?;
        self.model(1).validate().map_err(|e| wrap("model", e))?;
        self.train().validate().map_err(|e| wrap("train", e))?;
        self.rec_train().validate().map_err(|e| wrap("rec", e))?;
        if self.get_usize("rec.n_buckets") == 0 {
            return Err(Error::Config {
                key: "rec.n_buckets".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.synth(), SyntheticConfig::default());
        assert_eq!(cfg.grid(), SegmentGrid::default());
        for (k, kind, d, _) in KEYS {
            check(*kind, k, d).unwrap();
        }
    }

    #[test]
    fn parses_and_rejects() {
        let cfg = RunConfig::parse("# comment\ntrain.learning_rate = 0.01\nmodel.use_id=false # trailing\n").unwrap();
        assert_eq!(cfg.get_f64("train.learning_rate"), 0.01);
        assert!(!cfg.model(8).use_id);
        let err = RunConfig::parse("train.nope = 1").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.nope"));
        assert!(RunConfig::parse("train.batch_size = -3").is_err());
        assert!(RunConfig::parse("loss.pair_mode = sometimes").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("model.use_id = false\nmodel.use_visual = false").is_err());
    }

    #[test]
    fn environment_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_env([
            ("SEGLAB_TRAIN_LEARNING_RATE", "0.02"),
            ("SEGLAB_SEED", "11"),
            ("SEGLAB_SYNTH_N_USERS", "50"),
            ("OTHER", "x"),
        ])
        .unwrap();
        assert_eq!(cfg.get_f64("train.learning_rate"), 0.02);
        assert_eq!(cfg.seed(), 11);
        assert_eq!(cfg.synth().n_users, 50);
        assert!(cfg.apply_env([("SEGLAB_TRAIN_BOGUS", "1")]).is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "8").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_eq!(RunConfig::parse(&a.to_text()).unwrap(), a);
    }
}
