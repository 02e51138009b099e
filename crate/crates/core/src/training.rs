//! Intra-video pairwise loss and the optimisation loop.

use std::borrow::Cow;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::VisualFeatureStore;
use crate::model::encoder::Dropout;
use crate::model::{InterestModel, Sample};
use crate::nn::{logistic, Adam, AdamConfig, Grads, ParamStore, Tape};
use crate::skip_eval::{model_ranks, RankingReport, Slice};
use crate::{Error, Result};

/// Which segments the skipped one is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairMode {
    /// Segments watched before the skip, `j < y`.
    WatchedOnly,
    /// Every other segment, `j != y`.
    #[default]
    AllExceptY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Objective {
    #[default]
    IntraVideo,
    /// Watched segments as positives, the skipped one as negative.
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub pair_mode: PairMode,
    pub objective: Objective,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_skip(p: &[f64], y: usize) -> Result<()> {
    if y == 0 || y > p.len() {
        return Err(Error::invalid(format!(
            "skip segment {y} outside 1..={}",
            p.len()
        )));
    }
    Ok(())
}

fn partners(n: usize, y: usize, mode: PairMode) -> impl Iterator<Item = usize> {
    let end = match mode {
        PairMode::WatchedOnly => y - 1,
        PairMode::AllExceptY => n,
    };
    (0..end).filter(move |&j| j != y - 1)
}

/// `Σ_j softplus(p_y - p_j)`, i.e. `-Σ_j ln σ(p_j - p_y)` over the pair set.
pub fn intra_video_loss(p: &[f64], y: usize, mode: PairMode) -> Result<f64> {
    check_skip(p, y)?;
    let py = p[y - 1];
    Ok(partners(p.len(), y, mode).map(|j| softplus(py - p[j])).sum())
}

pub fn intra_video_loss_grad(p: &[f64], y: usize, mode: PairMode) -> Result<Vec<f64>> {
    check_skip(p, y)?;
    let py = p[y - 1];
    let mut g = vec![0.0; p.len()];
    for j in partners(p.len(), y, mode) {
        let s = logistic(py - p[j]);
        g[y - 1] += s;
        g[j] -= s;
    }
    Ok(g)
}

/// Number of loss terms a sample contributes; 0 means it is dropped.
pub fn pair_count(n: usize, y: usize, cfg: &LossConfig) -> usize {
    match cfg.objective {
        Objective::IntraVideo => match cfg.pair_mode {
            PairMode::WatchedOnly => y - 1,
            PairMode::AllExceptY => n - 1,
        },
        Objective::Bce => y,
    }
}

/// Mean binary cross-entropy of `σ(p)` with labels 1 for `j < y`, 0 at `y`.
pub fn bce_ablation_loss(p: &[f64], y: usize) -> Result<f64> {
    check_skip(p, y)?;
    let watched: f64 = p[..y - 1].iter().map(|&v| softplus(-v)).sum();
    Ok((watched + softplus(p[y - 1])) / y as f64)
}

pub fn bce_ablation_loss_grad(p: &[f64], y: usize) -> Result<Vec<f64>> {
    check_skip(p, y)?;
    let mut g = vec![0.0; p.len()];
    for j in 0..y - 1 {
        g[j] = (logistic(p[j]) - 1.0) / y as f64;
    }
    g[y - 1] = logistic(p[y - 1]) / y as f64;
    Ok(g)
}

/// Loss and gradient of one sample, or `None` when it has no terms.
pub fn sample_loss(p: &[f64], y: usize, cfg: &LossConfig) -> Result<Option<(f64, Vec<f64>)>> {
    check_skip(p, y)?;
    if pair_count(p.len(), y, cfg) == 0 {
        return Ok(None);
    }
    Ok(Some(match cfg.objective {
        Objective::IntraVideo => (
            intra_video_loss(p, y, cfg.pair_mode)?,
            intra_video_loss_grad(p, y, cfg.pair_mode)?,
        ),
        Objective::Bce => (bce_ablation_loss(p, y)?, bce_ablation_loss_grad(p, y)?),
    }))
}

/// Mean over samples that have at least one term; `None` signals that the
/// batch should be skipped.
pub fn batch_loss(batch: &[(Vec<f64>, usize)], cfg: &LossConfig) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, y) in batch {
        if let Some((l, _)) = sample_loss(p, *y, cfg)? {
            sum += l;
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Samples per gradient work unit. Fixed so that results do not depend
    /// on how many threads run the units.
    pub chunk_size: usize,
    /// Probability of replacing a sample's user id, and independently its
    /// video id, with the out-of-vocabulary row, so that row is trained for
    /// unseen users and videos.
    pub oov_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1024,
            max_epochs: 50,
            patience: 10,
            seed: 7,
            chunk_size: 64,
            oov_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.chunk_size == 0 {
            return Err(Error::invalid("batch_size, max_epochs and chunk_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.oov_rate) {
            return Err(Error::invalid("oov_rate must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl TrainHistory {
    /// One `epoch train_loss valid_metric wall_time_s` line per epoch.
    pub fn log_lines(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "epoch={} train_loss={:.6} valid_metric={:.6} wall_time_s={:.2}",
                    e.epoch, e.train_loss, e.valid_metric, e.wall_time_s
                )
            })
            .collect()
    }

    /// Metric sequence without timings, for reproducibility checks.
    pub fn metrics(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|e| (e.train_loss, e.valid_metric)).collect()
    }
}

/// Seed of the dropout stream for one sample in one epoch.
pub(crate) fn sample_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    // splitmix64 finaliser over the packed triple
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((sample as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sums per-item gradients over `items`, chunk by chunk in parallel, then
/// reduces the chunks in order. `f` returns the item's loss, or `None` if
/// it contributed nothing.
pub(crate) fn accumulate<T, F>(params: &ParamStore, items: &[T], chunk: usize, f: F) -> Result<(Grads, f64, usize)>
where
    T: Sync,
    F: Fn(&T, &mut Grads) -> Result<Option<f64>> + Sync,
{
    let parts: Vec<Result<(Grads, f64, usize)>> = items
        .par_chunks(chunk)
        .map(|c| {
            let mut g = params.zeros_like();
            let mut loss = 0.0;
            let mut count = 0;
            for item in c {
                if let Some(l) = f(item, &mut g)? {
                    loss += l;
                    count += 1;
                }
            }
            Ok((g, loss, count))
        })
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let mut count = 0;
    for part in parts {
        let (g, l, c) = part?;
        total.add_assign(&g);
        loss += l;
        count += c;
    }
    Ok((total, loss, count))
}

/// Validation NDCG@5 of `model`.
pub fn validation_ndcg5(
    model: &InterestModel,
    valid: &[&Sample],
    features: Option<&VisualFeatureStore>,
) -> Result<f64> {
    let ranks = model_ranks(model, valid, features)?;
    Ok(RankingReport::from_ranks(&ranks, Slice::All)?.ndcg5)
}

/// Trains in place and leaves the best-validation parameters in `model`.
pub fn train(
    model: &mut InterestModel,
    train_samples: &[&Sample],
    valid_samples: &[&Sample],
    features: Option<&VisualFeatureStore>,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let usable: Vec<(usize, &Sample)> = train_samples
        .iter()
        .copied()
        .filter(|s| s.skip().is_some_and(|y| pair_count(s.query.n, y, loss_cfg) > 0))
        .enumerate()
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no training samples with a usable skip label"));
    }
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let dropout_rate = model.config.encoder.dropout;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
    };
    let mut best = model.params.clone();
    let mut stale = 0usize;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &Sample)> = batch_idx.iter().map(|&i| usable[i]).collect();
            let m: &InterestModel = model;
            let (mut grads, loss, count) =
                accumulate(&m.params, &batch, cfg.chunk_size, |&(id, s), g| {
                    let mut drng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, id));
                    let mut query = Cow::Borrowed(&s.query);
                    if cfg.oov_rate > 0.0 {
                        if drng.random::<f64>() < cfg.oov_rate {
                            query.to_mut().user = 0;
                        }
                        if drng.random::<f64>() < cfg.oov_rate {
                            query.to_mut().video = 0;
                        }
                    }
                    let mut dropout = Dropout::new(dropout_rate, Some(&mut drng));
                    let mut tape = Tape::new(&m.params);
                    let out = m.forward(&mut tape, &query, features, &mut dropout)?;
                    let p: Vec<f64> = tape.value(out.p).iter().copied().collect();
                    let y = s.skip().expect("usable samples are skipped");
                    let Some((l, dp)) = sample_loss(&p, y, loss_cfg)? else {
                        return Ok(None);
                    };
                    let seed = Array2::from_shape_vec((p.len(), 1), dp).expect("column seed");
                    tape.backward(out.p, seed, g);
                    Ok(Some(l))
                })?;
            if count == 0 {
                continue;
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("non-finite loss or gradient (batch loss sum {loss})"),
                });
            }
            grads.scale(1.0 / count as f64);
            adam.update(&mut model.params, &grads);
            epoch_loss += loss;
            epoch_count += count;
        }
        if !model.params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: "parameters became non-finite".into(),
            });
        }
        let train_loss = epoch_loss / epoch_count.max(1) as f64;
        let metric = validation_ndcg5(model, valid_samples, features)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn intra_video_hand_values() {
        let w = PairMode::WatchedOnly;
        let a = PairMode::AllExceptY;
        assert!((intra_video_loss(&[0.0, 0.0, 0.0], 2, w).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-9);
        assert!((intra_video_loss(&[5.0, -5.0, 0.0], 2, w).unwrap() - 4.539_889_921_686_464e-5).abs() < 1e-9);
        assert!((intra_video_loss(&[0.0; 4], 2, a).unwrap() - 2.079_441_541_679_835_8).abs() < 1e-9);
        assert_eq!(intra_video_loss(&[1.0, 2.0], 1, w).unwrap(), 0.0);
        assert!((intra_video_loss(&[1.0, 1.0], 1, a).unwrap() - LN2).abs() < 1e-12);
        assert!(intra_video_loss(&[0.0], 2, w).is_err());
        assert!(intra_video_loss(&[0.0], 0, w).is_err());
    }

    #[test]
    fn bce_hand_values() {
        assert!((bce_ablation_loss(&[0.0, 0.0], 2).unwrap() - LN2).abs() < 1e-12);
        assert!((bce_ablation_loss(&[10.0, -10.0], 2).unwrap() - 4.539_889_921_686_464e-5).abs() < 1e-12);
        let single = bce_ablation_loss(&[0.7, 3.0], 1).unwrap();
        assert!((single + (1.0 - logistic(0.7)).ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_mean_and_skip() {
        let cfg = LossConfig {
            pair_mode: PairMode::WatchedOnly,
            ..LossConfig::default()
        };
        // ln(1 + e^x) = 1 and 3 for these hand-picked differences
        let x1 = (1f64.exp() - 1.0).ln();
        let x3 = (3f64.exp() - 1.0).ln();
        let batch = vec![(vec![0.0, x1], 2), (vec![0.0, x3], 2)];
        assert!((batch_loss(&batch, &cfg).unwrap().unwrap() - 2.0).abs() < 1e-12);
        let reversed: Vec<_> = batch.iter().rev().cloned().collect();
        assert_eq!(batch_loss(&reversed, &cfg).unwrap(), batch_loss(&batch, &cfg).unwrap());
        let only_first = vec![(vec![0.0, 1.0], 1), (vec![2.0], 1)];
        assert_eq!(batch_loss(&only_first, &cfg).unwrap(), None);
    }

    fn finite_diff(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..p.len())
            .map(|i| {
                let mut a = p.to_vec();
                let mut b = p.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn translation_invariant(p in prop::collection::vec(-4.0f64..4.0, 2..20), c in -10.0f64..10.0, yf in 0.0f64..1.0) {
            let y = 1 + ((p.len() as f64 * yf) as usize).min(p.len() - 1);
            for mode in [PairMode::WatchedOnly, PairMode::AllExceptY] {
                let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
                let a = intra_video_loss(&p, y, mode).unwrap();
                let b = intra_video_loss(&shifted, y, mode).unwrap();
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn lowering_the_skip_score_lowers_the_loss(p in prop::collection::vec(-4.0f64..4.0, 2..20), yf in 0.0f64..1.0) {
            let y = 2 + ((p.len() as f64 * yf) as usize).min(p.len() - 2);
            let mut lower = p.clone();
            lower[y - 1] -= 0.5;
            prop_assert!(intra_video_loss(&lower, y, PairMode::WatchedOnly).unwrap()
                < intra_video_loss(&p, y, PairMode::WatchedOnly).unwrap());
        }

        #[test]
        fn analytic_gradients_match(p in prop::collection::vec(-3.0f64..3.0, 1..12), yf in 0.0f64..1.0) {
            let y = 1 + ((p.len() as f64 * yf) as usize).min(p.len() - 1);
            for mode in [PairMode::WatchedOnly, PairMode::AllExceptY] {
                let g = intra_video_loss_grad(&p, y, mode).unwrap();
                let n = finite_diff(|q| intra_video_loss(q, y, mode).unwrap(), &p);
                for (a, b) in g.iter().zip(&n) {
                    prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3));
                }
            }
            let g = bce_ablation_loss_grad(&p, y).unwrap();
            let n = finite_diff(|q| bce_ablation_loss(q, y).unwrap(), &p);
            for (a, b) in g.iter().zip(&n) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3));
            }
        }
    }
}
