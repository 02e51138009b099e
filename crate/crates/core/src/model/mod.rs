//! The segment interest model: per-modality representations, cross-attention
//! encoders, fusion and position bias.

pub mod decoder;
pub mod encoder;
pub mod query;
pub mod representation;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::io::VisualFeatureStore;
use crate::nn::{ParamStore, Tape, Var};
use crate::{Error, Result};
use decoder::{FusionParams, PositionBiasParams};
use encoder::{Dropout, EncoderConfig, EncoderSwitches, ModalEncoder};
pub use query::{build_samples, Sample, SegmentQuery};
use representation::{IdEmbeddings, VisualInput, VisualProjector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Id,
    Visual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder: EncoderConfig,
    pub fusion_heads: usize,
    pub use_id: bool,
    pub use_visual: bool,
    pub attention: bool,
    /// Segment-order information: the ID position half, the video-side order
    /// embeddings and the position bias.
    pub positions: bool,
    pub max_segments: usize,
    pub history_len: usize,
    pub visual_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            encoder: EncoderConfig::default(),
            fusion_heads: 4,
            use_id: true,
            use_visual: true,
            attention: true,
            positions: true,
            max_segments: 40,
            history_len: 20,
            visual_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if !self.use_id && !self.use_visual {
            return bad("at least one modality must be enabled");
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad("embed_dim must be even and at least 2");
        }
        if self.encoder.score_dim == 0 {
            return bad("score_dim must be positive");
        }
        if self.fusion_heads == 0 || self.encoder.score_dim % self.fusion_heads != 0 {
            return bad("fusion_heads must divide score_dim");
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.max_segments == 0 || self.history_len == 0 {
            return bad("max_segments and history_len must be positive");
        }
        if self.use_visual && self.visual_dim == 0 {
            return bad("visual_dim must be positive when the visual modality is on");
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut m = Vec::new();
        if self.use_id {
            m.push(Modality::Id);
        }
        if self.use_visual {
            m.push(Modality::Visual);
        }
        m
    }

    fn switches(&self) -> EncoderSwitches {
        EncoderSwitches {
            attention: self.attention,
            segment_positions: self.positions,
        }
    }
}

/// User and video ids seen in training. Index 0 is the shared
/// out-of-vocabulary row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    users: BTreeMap<String, usize>,
    videos: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new<'a>(
        users: impl IntoIterator<Item = &'a str>,
        videos: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        fn index<'a>(ids: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
            let mut sorted: Vec<&str> = ids.into_iter().collect();
            sorted.sort_unstable();
            sorted.dedup();
            sorted
                .into_iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), i + 1))
                .collect()
        }
        Self {
            users: index(users),
            videos: index(videos),
        }
    }

    pub fn user(&self, id: &str) -> usize {
        self.users.get(id).copied().unwrap_or(0)
    }

    pub fn video(&self, id: &str) -> usize {
        self.videos.get(id).copied().unwrap_or(0)
    }

    pub fn has_video(&self, id: &str) -> bool {
        self.videos.contains_key(id)
    }

    /// Table sizes including the out-of-vocabulary row.
    pub fn n_users(&self) -> usize {
        self.users.len() + 1
    }

    pub fn n_videos(&self) -> usize {
        self.videos.len() + 1
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
    vocab: Vocab,
}

const CHECKPOINT_KIND: &str = "interest";

/// Fused output `o` and final scores `p`, both `N × 1`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub o: Var,
    pub p: Var,
}

#[derive(Debug, Clone)]
pub struct InterestModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    id: Option<(IdEmbeddings, ModalEncoder)>,
    visual: Option<(VisualProjector, ModalEncoder)>,
    fusion: FusionParams,
    position_bias: PositionBiasParams,
}

impl InterestModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let id = config.use_id.then(|| {
            let emb = IdEmbeddings::init(
                &mut store,
                &mut rng,
                vocab.n_users(),
                vocab.n_videos(),
                config.max_segments,
                d,
            );
            let enc =
                ModalEncoder::init(&mut store, &mut rng, "enc.id", &config.encoder, d, 1, config.max_segments);
            (emb, enc)
        });
        let visual = config.use_visual.then(|| {
            let proj = VisualProjector::init(&mut store, &mut rng, config.visual_dim, d);
            let enc = ModalEncoder::init(
                &mut store,
                &mut rng,
                "enc.visual",
                &config.encoder,
                d,
                config.history_len,
                config.max_segments,
            );
            (proj, enc)
        });
        let fusion = FusionParams::init(
            &mut store,
            &mut rng,
            config.modalities().len(),
            config.encoder.score_dim,
            config.fusion_heads,
        )?;
        let position_bias = PositionBiasParams::init(&mut store);
        Ok(Self {
            config,
            vocab,
            params: store,
            id,
            visual,
            fusion,
            position_bias,
        })
    }

    pub fn fusion(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn position_bias(&self) -> &PositionBiasParams {
        &self.position_bias
    }

    /// Looks up the visual rows of a query; missing rows become zeros.
    pub fn visual_input(&self, query: &SegmentQuery, features: &VisualFeatureStore) -> Result<VisualInput> {
        if features.dim() != self.config.visual_dim {
            return Err(Error::invalid(format!(
                "feature store has dim {}, model expects {}",
                features.dim(),
                self.config.visual_dim
            )));
        }
        let gather = |rows: &[Option<usize>]| {
            let mut m = Array2::zeros((rows.len(), features.dim()));
            for (i, r) in rows.iter().enumerate() {
                if let Some(r) = *r {
                    for (dst, &src) in m.row_mut(i).iter_mut().zip(features.row(r)) {
                        *dst = src as f64;
                    }
                }
            }
            (m, rows.iter().map(Option::is_none).collect::<Vec<_>>())
        };
        let (history, history_missing) = gather(&query.history_rows);
        let (target, target_missing) = gather(&query.target_rows);
        Ok(VisualInput {
            history,
            history_missing,
            target,
            target_missing,
        })
    }

    /// Builds the graph for one query on `tape` (which must be bound to
    /// `self.params`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        query: &SegmentQuery,
        features: Option<&VisualFeatureStore>,
        dropout: &mut Dropout,
    ) -> Result<ForwardOutput> {
        if query.n == 0 || query.n > self.config.max_segments {
            return Err(Error::invalid(format!(
                "query has {} segments, model supports 1..={}",
                query.n, self.config.max_segments
            )));
        }
        let switches = self.config.switches();
        let mut xs = Vec::with_capacity(2);
        if let Some((emb, enc)) = &self.id {
            let bundle = emb.represent(tape, query.user, query.video, query.n, self.config.positions);
            xs.push(enc.score(tape, &bundle, switches, dropout));
        }
        if let Some((proj, enc)) = &self.visual {
            let features = features
                .ok_or_else(|| Error::invalid("visual modality needs a feature store"))?;
            let input = self.visual_input(query, features)?;
            let bundle = proj.represent(tape, &input);
            let x = enc.score(tape, &bundle, switches, dropout);
            // segments without features contribute nothing from this modality
            let x = if bundle.missing_targets.is_empty() {
                x
            } else {
                let mut mask = Array2::ones(tape.value(x).raw_dim());
                for &i in &bundle.missing_targets {
                    mask.row_mut(i).fill(0.0);
                }
                tape.mul_const(x, mask)
            };
            xs.push(x);
        }
        let o = self.fusion.fuse(tape, &xs)?;
        let p = if self.config.positions {
            self.position_bias.apply(tape, o)
        } else {
            o
        };
        Ok(ForwardOutput { o, p })
    }

    /// Interest scores `p` for one query, dropout off.
    pub fn predict(&self, query: &SegmentQuery, features: Option<&VisualFeatureStore>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, query, features, &mut Dropout::disabled())?;
        Ok(tape.value(out.p).iter().copied().collect())
    }

    pub fn checkpoint_meta(&self) -> String {
        serde_json::to_string(&CheckpointMeta {
            kind: CHECKPOINT_KIND.to_string(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        })
        .expect("model metadata serializes")
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected an interest model checkpoint, found `{}`",
                meta.kind
            )));
        }
        let mut model = Self::new(meta.config, meta.vocab, 0)?;
        let missing = model.params.load_from(&ckpt.params);
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint lacks tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_meta(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Grads;
    use rand::Rng;

    fn micro() -> (InterestModel, VisualFeatureStore, SegmentQuery) {
        let config = ModelConfig {
            embed_dim: 8,
            encoder: EncoderConfig {
                layers: 1,
                score_dim: 4,
                ffn_hidden: 0,
                dropout: 0.0,
            },
            fusion_heads: 2,
            max_segments: 4,
            history_len: 6,
            visual_dim: 5,
            ..ModelConfig::default()
        };
        let vocab = Vocab::new(["a", "b"], ["x", "y"]);
        let mut model = InterestModel::new(config, vocab, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in model.params.ids().collect::<Vec<_>>() {
            // move off the zero initialisations so every path carries gradient
            model.params.get_mut(id).mapv_inplace(|v| v + 0.3 * (rng.random::<f64>() - 0.5));
        }
        let mut features = VisualFeatureStore::new(5);
        for s in 1..=10 {
            let row: Vec<f32> = (0..5).map(|_| rng.random::<f32>() - 0.5).collect();
            features.push("h", s, &row).unwrap();
        }
        let query = SegmentQuery {
            user: 1,
            video: 2,
            n: 4,
            history_rows: (0..6).map(Some).collect(),
            target_rows: (6..10).map(Some).collect(),
        };
        (model, features, query)
    }

    #[test]
    fn predicts_one_score_per_segment() {
        let (model, features, query) = micro();
        let p = model.predict(&query, Some(&features)).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(model.predict(&query, None).is_err());
    }

    #[test]
    fn p_minus_o_is_position_bias() {
        let (model, features, query) = micro();
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &query, Some(&features), &mut Dropout::disabled()).unwrap();
        let pb = model.position_bias().values(&model.params);
        let bias = decoder::position_bias_vector(4, pb);
        for (i, b) in bias.iter().enumerate() {
            let diff = tape.value(out.p)[[i, 0]] - tape.value(out.o)[[i, 0]];
            assert!((diff - b).abs() < 1e-12);
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let (model, features, query) = micro();
        let y = 3;
        let loss = |params: &ParamStore| -> f64 {
            let m = InterestModel { params: params.clone(), ..model.clone() };
            let p = m.predict(&query, Some(&features)).unwrap();
            crate::training::intra_video_loss(&p, y, crate::training::PairMode::WatchedOnly).unwrap()
        };
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &query, Some(&features), &mut Dropout::disabled()).unwrap();
        let p: Vec<f64> = tape.value(out.p).iter().copied().collect();
        let g = crate::training::intra_video_loss_grad(&p, y, crate::training::PairMode::WatchedOnly).unwrap();
        let seed = Array2::from_shape_vec((4, 1), g).unwrap();
        let mut grads: Grads = model.params.zeros_like();
        tape.backward(out.p, seed, &mut grads);

        let h = 1e-5;
        for id in model.params.ids().collect::<Vec<_>>() {
            let (rows, cols) = model.params.get(id).dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = model.params.clone();
                    plus.get_mut(id)[[r, c]] += h;
                    let mut minus = model.params.clone();
                    minus.get_mut(id)[[r, c]] -= h;
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let analytic = grads.get(id)[[r, c]];
                    let scale = numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(
                        (numeric - analytic).abs() / scale < 1e-4,
                        "{}[{r},{c}]: numeric {numeric} analytic {analytic}",
                        model.params.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, features, query) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = InterestModel::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.vocab, model.vocab);
        let a = model.predict(&query, Some(&features)).unwrap();
        let b = back.predict(&query, Some(&features)).unwrap();
        // parameters pass through f32 on disk
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn missing_target_rows_are_flagged() {
        let (model, features, mut query) = micro();
        query.target_rows[1] = None;
        let input = model.visual_input(&query, &features).unwrap();
        assert_eq!(input.target_missing, vec![false, true, false, false]);
        assert!(input.target.row(1).iter().all(|&v| v == 0.0));
        assert!(model.predict(&query, Some(&features)).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn vocab_reserves_zero() {
        let v = Vocab::new(["b", "a", "a"], ["x"]);
        assert_eq!(v.user("a"), 1);
        assert_eq!(v.user("b"), 2);
        assert_eq!(v.user("zzz"), 0);
        assert_eq!(v.n_users(), 3);
        assert_eq!(v.n_videos(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let off = ModelConfig { use_id: false, use_visual: false, ..ModelConfig::default() };
        assert!(off.validate().is_err());
        let odd = ModelConfig { embed_dim: 7, ..ModelConfig::default() };
        assert!(odd.validate().is_err());
        let mut heads = ModelConfig::default();
        heads.fusion_heads = 3;
        assert!(heads.validate().is_err());
    }
}
