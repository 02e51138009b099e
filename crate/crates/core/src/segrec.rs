//! Video-level click-through prediction from segment-level scores.
//!
//! A wide & deep backbone scores every segment of a candidate video; frozen
//! interest scores decide how those per-segment probabilities are averaged
//! into one prediction.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{derive_effective_view_label, num_segments, DurationBuckets, InteractionRecord, SegmentGrid};
use crate::io::VisualFeatureStore;
use crate::model::Vocab;
use crate::nn::{init_normal, init_uniform_fan_in, logistic, Adam, AdamConfig, ParamId, ParamStore, Tape, Var};
use crate::training::{accumulate, EpochRecord, TrainConfig, TrainHistory};
use crate::{Error, Result};

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AggregationMode {
    /// Weights `softmax(p)` from the frozen interest scores.
    #[default]
    SegRec,
    /// One pooled pseudo-segment for the whole video.
    Video,
    /// Uniform weights.
    SegSum,
    /// Softmax of learned per-position logits.
    SegAdjust,
}

impl AggregationMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "segrec" => Some(Self::SegRec),
            "video" => Some(Self::Video),
            "segsum" => Some(Self::SegSum),
            "segadjust" => Some(Self::SegAdjust),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SegRec => "segrec",
            Self::Video => "video",
            Self::SegSum => "segsum",
            Self::SegAdjust => "segadjust",
        }
    }
}

pub fn softmax(p: &[f64]) -> Vec<f64> {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = p.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `Σ softmax(p)_i · σ(y_i)`.
pub fn aggregate_segrec(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::invalid(format!(
            "interest has {} segments, backbone scores have {}",
            p.len(),
            y.len()
        )));
    }
    Ok(softmax(p).iter().zip(y).map(|(w, &v)| w * logistic(v)).sum())
}

/// Reference aggregation of the self-information baselines. `y` holds a
/// single pooled score in `Video` mode.
pub fn aggregate_baseline(mode: AggregationMode, y: &[f64], learned: Option<&[f64]>) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("no backbone scores"));
    }
    match mode {
        AggregationMode::Video => Ok(logistic(y[0])),
        AggregationMode::SegSum => Ok(y.iter().map(|&v| logistic(v)).sum::<f64>() / y.len() as f64),
        AggregationMode::SegAdjust => {
            let w = learned.ok_or_else(|| Error::invalid("segadjust needs learned position weights"))?;
            if w.len() < y.len() {
                return Err(Error::invalid("fewer learned weights than segments"));
            }
            aggregate_segrec(&w[..y.len()], y)
        }
        AggregationMode::SegRec => Err(Error::invalid("segrec aggregation needs interest scores")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtrReport {
    pub auc: f64,
    pub f1: f64,
    pub logloss: f64,
    pub sample_count: usize,
}

impl CtrReport {
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("sample_count", self.sample_count.to_string()),
            ("auc", format!("{:.6}", self.auc)),
            ("f1", format!("{:.6}", self.f1)),
            ("logloss", format!("{:.6}", self.logloss)),
        ]
    }
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both positive and negative labels"));
    }
    let ranks = crate::skip_eval::average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn ctr_metrics(scores: &[f64], labels: &[u8]) -> Result<CtrReport> {
    let auc = auc(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    let mut logloss = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= 0.5;
        match (predicted, l == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => {}
        }
        let c = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        logloss -= if l == 1 { c.ln() } else { (1.0 - c).ln() };
    }
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    Ok(CtrReport {
        auc,
        f1,
        logloss: logloss / scores.len() as f64,
        sample_count: scores.len(),
    })
}

/// One candidate video with its frozen interest scores and label.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrExample {
    pub user: usize,
    pub video: usize,
    pub n: usize,
    pub bucket: usize,
    pub target_rows: Vec<Option<usize>>,
    pub interest: Vec<f64>,
    pub label: u8,
}

/// Builds examples; `interest[i]` must hold one score per segment of
/// `records[i]`.
pub fn build_ctr_examples(
    records: &[InteractionRecord],
    interest: &[Vec<f64>],
    grid: &SegmentGrid,
    buckets: &DurationBuckets,
    vocab: &Vocab,
    features: Option<&VisualFeatureStore>,
) -> Result<Vec<CtrExample>> {
    if records.len() != interest.len() {
        return Err(Error::invalid("one interest vector per record is required"));
    }
    records
        .iter()
        .zip(interest)
        .map(|(r, p)| {
            let n = num_segments(r.duration_s, grid)?;
            if p.len() != n {
                return Err(Error::invalid(format!(
                    "interest for {}/{} has {} scores, video has {n} segments",
                    r.user_id,
                    r.video_id,
                    p.len()
                )));
            }
            Ok(CtrExample {
                user: vocab.user(&r.user_id),
                video: vocab.video(&r.video_id),
                n,
                bucket: buckets.bucket_of(r.duration_s),
                target_rows: (1..=n)
                    .map(|i| features.and_then(|f| f.row_of(&r.video_id, i)))
                    .collect(),
                interest: p.clone(),
                label: derive_effective_view_label(r, buckets),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRecConfig {
    pub mode: AggregationMode,
    pub embed_dim: usize,
    pub hidden: (usize, usize),
    pub use_visual: bool,
    pub visual_dim: usize,
    pub max_segments: usize,
}

impl Default for SegRecConfig {
    fn default() -> Self {
        Self {
            mode: AggregationMode::SegRec,
            embed_dim: 16,
            hidden: (64, 32),
            use_visual: true,
            visual_dim: 32,
            max_segments: 40,
        }
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    user: ParamId,
    video: ParamId,
    /// Row `max_segments` is the whole-video token.
    position: ParamId,
    visual: Option<(ParamId, ParamId)>,
    wide: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    bias: ParamId,
    position_logits: ParamId,
}

#[derive(Serialize, Deserialize)]
struct SegRecMeta {
    kind: String,
    config: SegRecConfig,
    vocab: Vocab,
    buckets: DurationBuckets,
}

const CHECKPOINT_KIND: &str = "segrec";

/// Prediction plus the aggregation weights actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrPrediction {
    pub y_hat: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SegRecModel {
    pub config: SegRecConfig,
    pub vocab: Vocab,
    pub buckets: DurationBuckets,
    pub params: ParamStore,
    net: Backbone,
}

impl SegRecModel {
    pub fn new(config: SegRecConfig, vocab: Vocab, buckets: DurationBuckets, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden.0 == 0 || config.hidden.1 == 0 {
            return Err(Error::invalid("segrec widths must be positive"));
        }
        if buckets.is_empty() {
            return Err(Error::invalid("segrec needs at least one duration bucket"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let e = config.embed_dim;
        let std = 0.1;
        let user = s.add("rec.user", init_normal(&mut rng, vocab.n_users(), e, std));
        let video = s.add("rec.video", init_normal(&mut rng, vocab.n_videos(), e, std));
        let position = s.add("rec.position", init_normal(&mut rng, config.max_segments + 1, e, std));
        let visual = config.use_visual.then(|| {
            (
                s.add("rec.visual.weight", init_uniform_fan_in(&mut rng, config.visual_dim, e)),
                s.add("rec.visual.bias", Array2::zeros((1, e))),
            )
        });
        let width = Self::input_width(&config, buckets.len());
        let (h1, h2) = config.hidden;
        let net = Backbone {
            user,
            video,
            position,
            visual,
            wide: s.add("rec.wide", init_uniform_fan_in(&mut rng, width, 1)),
            w1: s.add("rec.deep.w1", init_uniform_fan_in(&mut rng, width, h1)),
            b1: s.add("rec.deep.b1", Array2::zeros((1, h1))),
            w2: s.add("rec.deep.w2", init_uniform_fan_in(&mut rng, h1, h2)),
            b2: s.add("rec.deep.b2", Array2::zeros((1, h2))),
            w3: s.add("rec.deep.w3", init_uniform_fan_in(&mut rng, h2, 1)),
            bias: s.add("rec.bias", Array2::zeros((1, 1))),
            position_logits: s.add("rec.position_logits", Array2::zeros((config.max_segments, 1))),
        };
        Ok(Self {
            config,
            vocab,
            buckets,
            params: s,
            net,
        })
    }

    fn input_width(config: &SegRecConfig, n_buckets: usize) -> usize {
        let e = config.embed_dim;
        3 * e + n_buckets + if config.use_visual { e } else { 0 }
    }

    /// Learned per-position weights over `1..=n` (`SegAdjust`).
    pub fn position_weights(&self, n: usize) -> Vec<f64> {
        let logits = self.params.get(self.net.position_logits);
        softmax(&logits.column(0).iter().take(n).copied().collect::<Vec<_>>())
    }

    /// Per-row backbone scores (`rows × 1`).
    fn backbone(
        &self,
        tape: &mut Tape,
        ex: &CtrExample,
        features: Option<&VisualFeatureStore>,
    ) -> Result<Var> {
        let pooled = self.config.mode == AggregationMode::Video;
        let rows = if pooled { 1 } else { ex.n };
        let net = &self.net;
        let u = tape.gather(net.user, &vec![ex.user; rows]);
        let v = tape.gather(net.video, &vec![ex.video; rows]);
        let pos_rows: Vec<usize> = if pooled {
            vec![self.config.max_segments]
        } else {
            (0..ex.n).collect()
        };
        let pos = tape.gather(net.position, &pos_rows);
        let mut onehot = Array2::zeros((rows, self.buckets.len()));
        onehot.column_mut(ex.bucket).fill(1.0);
        let onehot = tape.input(onehot);
        let mut x = tape.concat_cols(u, v);
        x = tape.concat_cols(x, pos);
        x = tape.concat_cols(x, onehot);
        if let Some((w, b)) = net.visual {
            let store = features.ok_or_else(|| Error::invalid("visual backbone needs a feature store"))?;
            if store.dim() != self.config.visual_dim {
                return Err(Error::invalid("feature store dim does not match the backbone"));
            }
            let mut feats = Array2::zeros((ex.n, store.dim()));
            for (i, r) in ex.target_rows.iter().enumerate() {
                if let Some(r) = *r {
                    for (dst, &src) in feats.row_mut(i).iter_mut().zip(store.row(r)) {
                        *dst = src as f64;
                    }
                }
            }
            let feats = if pooled {
                feats.mean_axis(ndarray::Axis(0)).expect("n >= 1").insert_axis(ndarray::Axis(0))
            } else {
                feats
            };
            let f = tape.input(feats);
            let w = tape.param(w);
            let b = tape.param(b);
            let proj = tape.matmul(f, w);
            let proj = tape.add_row(proj, b);
            x = tape.concat_cols(x, proj);
        }
        let wide = tape.param(net.wide);
        let wide = tape.matmul(x, wide);
        let (w1, b1, w2, b2, w3) = (
            tape.param(net.w1),
            tape.param(net.b1),
            tape.param(net.w2),
            tape.param(net.b2),
            tape.param(net.w3),
        );
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = tape.matmul(h, w2);
        let h = tape.add_row(h, b2);
        let h = tape.relu(h);
        let deep = tape.matmul(h, w3);
        let y = tape.add(wide, deep);
        let bias = tape.param(net.bias);
        Ok(tape.add_row(y, bias))
    }

    /// `ŷ` as a `1 × 1` node plus the aggregation weights.
    fn forward(
        &self,
        tape: &mut Tape,
        ex: &CtrExample,
        features: Option<&VisualFeatureStore>,
    ) -> Result<(Var, Vec<f64>)> {
        if ex.n == 0 || ex.n > self.config.max_segments {
            return Err(Error::invalid(format!("video has {} segments", ex.n)));
        }
        let y = self.backbone(tape, ex, features)?;
        let probs = tape.sigmoid(y);
        let weights_row = |tape: &mut Tape, w: &[f64]| {
            tape.input(Array2::from_shape_vec((1, w.len()), w.to_vec()).expect("row"))
        };
        Ok(match self.config.mode {
            AggregationMode::Video => (probs, vec![1.0]),
            AggregationMode::SegRec => {
                let w = softmax(&ex.interest);
                let wr = weights_row(tape, &w);
                (tape.matmul(wr, probs), w)
            }
            AggregationMode::SegSum => {
                let w = vec![1.0 / ex.n as f64; ex.n];
                let wr = weights_row(tape, &w);
                (tape.matmul(wr, probs), w)
            }
            AggregationMode::SegAdjust => {
                let rows: Vec<usize> = (0..ex.n).collect();
                let logits = tape.gather(self.net.position_logits, &rows);
                let logits = tape.transpose(logits);
                let wr = tape.softmax_rows(logits);
                let w = tape.value(wr).iter().copied().collect();
                (tape.matmul(wr, probs), w)
            }
        })
    }

    pub fn predict(&self, ex: &CtrExample, features: Option<&VisualFeatureStore>) -> Result<CtrPrediction> {
        let mut tape = Tape::new(&self.params);
        let (y_hat, weights) = self.forward(&mut tape, ex, features)?;
        Ok(CtrPrediction {
            y_hat: tape.value(y_hat)[[0, 0]],
            weights,
        })
    }

    pub fn predict_all(&self, examples: &[&CtrExample], features: Option<&VisualFeatureStore>) -> Result<Vec<CtrPrediction>> {
        examples.par_iter().map(|ex| self.predict(ex, features)).collect()
    }

    pub fn evaluate(&self, examples: &[&CtrExample], features: Option<&VisualFeatureStore>) -> Result<CtrReport> {
        let preds = self.predict_all(examples, features)?;
        let scores: Vec<f64> = preds.iter().map(|p| p.y_hat).collect();
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        ctr_metrics(&scores, &labels)
    }

    /// Clamped binary cross-entropy of one example and its gradient in `ŷ`.
    pub fn bce(y_hat: f64, label: u8) -> (f64, f64) {
        let c = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let clamped = c != y_hat;
        if label == 1 {
            (-c.ln(), if clamped { 0.0 } else { -1.0 / c })
        } else {
            (-(1.0 - c).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - c) })
        }
    }

    pub fn checkpoint_meta(&self) -> String {
        serde_json::to_string(&SegRecMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            buckets: self.buckets.clone(),
        })
        .expect("segrec metadata serializes")
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: SegRecMeta = serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a segrec checkpoint, found `{}`",
                meta.kind
            )));
        }
        let mut model = Self::new(meta.config, meta.vocab, meta.buckets, 0)?;
        let missing = model.params.load_from(&ckpt.params);
        if !missing.is_empty() {
            return Err(Error::Format(format!("checkpoint lacks tensors: {}", missing.join(", "))));
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

/// Minimises mean clamped BCE; early stopping on validation AUC. The best
/// parameters are left in `model`.
pub fn train_segrec(
    model: &mut SegRecModel,
    train: &[&CtrExample],
    valid: &[&CtrExample],
    features: Option<&VisualFeatureStore>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
    };
    let mut best = model.params.clone();
    let mut stale = 0;
    let start = Instant::now();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&CtrExample> = batch.iter().map(|&i| train[i]).collect();
            let m: &SegRecModel = model;
            let (mut grads, loss, c) = accumulate(&m.params, &items, cfg.chunk_size, |ex, g| {
                let mut tape = Tape::new(&m.params);
                let (y_hat, _) = m.forward(&mut tape, ex, features)?;
                let (l, dl) = SegRecModel::bce(tape.value(y_hat)[[0, 0]], ex.label);
                tape.backward(y_hat, Array2::from_elem((1, 1), dl), g);
                Ok(Some(l))
            })?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: "non-finite backbone loss or gradient".into(),
                });
            }
            grads.scale(1.0 / c as f64);
            adam.update(&mut model.params, &grads);
            sum += loss;
            count += c;
        }
        let metric = model.evaluate(valid, features)?.auc;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            valid_metric: metric,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if metric > history.best_metric {
            history.best_metric = metric;
            history.best_epoch = epoch;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    model.params = best;
    Ok(history)
}

/// Videos that appear in `records`.
pub fn video_set(records: &[InteractionRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.video_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Grads;
    use proptest::prelude::*;

    #[test]
    fn segrec_examples() {
        assert_eq!(aggregate_segrec(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        let v = aggregate_segrec(&[3f64.ln(), 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - (0.75 * logistic(1.0) + 0.125)).abs() < 1e-12);
        assert!((v - 0.673_293_9).abs() < 1e-6);
        assert!(aggregate_segrec(&[0.0], &[0.0, 1.0]).is_err());
        let peaked = aggregate_segrec(&[0.0, 50.0, 0.0], &[1.0, -2.0, 3.0]).unwrap();
        assert!((peaked - logistic(-2.0)).abs() < 1e-12);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(aggregate_baseline(AggregationMode::SegSum, &[0.0; 3], None).unwrap(), 0.5);
        let s = aggregate_baseline(AggregationMode::SegSum, &[2.0, -2.0], None).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        let adj = aggregate_baseline(AggregationMode::SegAdjust, &[0.3, -1.0, 2.0], Some(&[0.7; 5])).unwrap();
        let sum = aggregate_baseline(AggregationMode::SegSum, &[0.3, -1.0, 2.0], None).unwrap();
        assert!((adj - sum).abs() < 1e-15);
        assert!(aggregate_baseline(AggregationMode::SegAdjust, &[0.0], None).is_err());
        assert_eq!(aggregate_baseline(AggregationMode::Video, &[0.0], None).unwrap(), 0.5);
    }

    #[test]
    fn ctr_metric_examples() {
        let r = ctr_metrics(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!((r.auc, r.f1), (1.0, 1.0));
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        let r = ctr_metrics(&[0.8, 0.4, 0.6], &[1, 0, 1]).unwrap();
        assert_eq!(r.auc, 1.0);
        let expected = -(0.8f64.ln() + 0.6f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((r.logloss - expected).abs() < 1e-12);
        assert!((r.logloss - 0.4149).abs() < 1e-4);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    fn tiny_model(mode: AggregationMode) -> (SegRecModel, VisualFeatureStore, CtrExample) {
        let buckets = DurationBuckets {
            boundaries: vec![30.0],
            thresholds: vec![0.5, 0.5],
        };
        let cfg = SegRecConfig {
            mode,
            embed_dim: 3,
            hidden: (4, 3),
            use_visual: true,
            visual_dim: 2,
            max_segments: 5,
        };
        let mut model = SegRecModel::new(cfg, Vocab::new(["u"], ["v"]), buckets, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in model.params.ids().collect::<Vec<_>>() {
            let noise = init_normal(&mut rng, model.params.get(id).nrows(), model.params.get(id).ncols(), 0.2);
            *model.params.get_mut(id) += &noise;
        }
        let mut f = VisualFeatureStore::new(2);
        for s in 1..=3 {
            f.push("v", s, &[s as f32 * 0.3, -0.2]).unwrap();
        }
        let ex = CtrExample {
            user: 1,
            video: 1,
            n: 3,
            bucket: 1,
            target_rows: vec![Some(0), Some(1), Some(2)],
            interest: vec![0.2, -0.5, 1.0],
            label: 1,
        };
        (model, f, ex)
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        for mode in [AggregationMode::SegRec, AggregationMode::Video, AggregationMode::SegSum, AggregationMode::SegAdjust] {
            let (model, f, ex) = tiny_model(mode);
            let loss = |params: &ParamStore| {
                let m = SegRecModel { params: params.clone(), ..model.clone() };
                SegRecModel::bce(m.predict(&ex, Some(&f)).unwrap().y_hat, ex.label).0
            };
            let mut tape = Tape::new(&model.params);
            let (y_hat, _) = model.forward(&mut tape, &ex, Some(&f)).unwrap();
            let (_, dl) = SegRecModel::bce(tape.value(y_hat)[[0, 0]], ex.label);
            let mut grads: Grads = model.params.zeros_like();
            tape.backward(y_hat, Array2::from_elem((1, 1), dl), &mut grads);
            let h = 1e-6;
            for id in model.params.ids().collect::<Vec<_>>() {
                let (rows, cols) = model.params.get(id).dim();
                for r in 0..rows {
                    for c in 0..cols {
                        let mut a = model.params.clone();
                        a.get_mut(id)[[r, c]] += h;
                        let mut b = model.params.clone();
                        b.get_mut(id)[[r, c]] -= h;
                        let numeric = (loss(&a) - loss(&b)) / (2.0 * h);
                        let analytic = grads.get(id)[[r, c]];
                        let scale = numeric.abs().max(analytic.abs()).max(1e-3);
                        assert!(
                            (numeric - analytic).abs() / scale < 1e-6,
                            "{mode:?} {}[{r},{c}]: {numeric} vs {analytic}",
                            model.params.name(id)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn predictions_are_probabilities_and_weights_sum_to_one() {
        for mode in [AggregationMode::SegRec, AggregationMode::SegSum, AggregationMode::SegAdjust] {
            let (model, f, ex) = tiny_model(mode);
            let pred = model.predict(&ex, Some(&f)).unwrap();
            assert!((pred.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&pred.y_hat));
        }
    }

    #[test]
    fn segadjust_with_equal_logits_equals_segsum() {
        let (adj, f, ex) = tiny_model(AggregationMode::SegAdjust);
        let mut adj = adj;
        adj.params.get_mut(adj.net.position_logits).fill(0.4);
        let mut sum = adj.clone();
        sum.config.mode = AggregationMode::SegSum;
        let a = adj.predict(&ex, Some(&f)).unwrap().y_hat;
        let b = sum.predict(&ex, Some(&f)).unwrap().y_hat;
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, f, ex) = tiny_model(AggregationMode::SegRec);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.ckpt");
        model.save(&path).unwrap();
        let back = SegRecModel::load(&path).unwrap();
        let a = model.predict(&ex, Some(&f)).unwrap().y_hat;
        let b = back.predict(&ex, Some(&f)).unwrap().y_hat;
        assert!((a - b).abs() < 1e-5);
        assert_eq!(back.buckets, model.buckets);
    }

    proptest! {
        #[test]
        fn segrec_is_a_convex_combination(
            p in prop::collection::vec(-20.0f64..20.0, 1..40),
            c in -100.0f64..100.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = init_normal(&mut rng, p.len(), 1, 3.0).iter().copied().collect();
            let v = aggregate_segrec(&p, &y).unwrap();
            let probs: Vec<f64> = y.iter().map(|&v| logistic(v)).collect();
            let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            prop_assert!((softmax(&p).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = p.iter().map(|x| x + c).collect();
            prop_assert!((aggregate_segrec(&shifted, &y).unwrap() - v).abs() < 1e-12);
        }
    }
}
