//! Skip-position ranking evaluation: HR@K and NDCG@K of the true skip
//! segment, the position-frequency baselines and the cold-video slice.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionRecord;
use crate::io::VisualFeatureStore;
use crate::model::{InterestModel, Sample};
use crate::{Error, Result};

/// Segments ordered from most to least likely skip (ascending interest),
/// as 1-based indices; ties keep the lower index first.
pub fn rank_segments(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=p.len()).collect();
    order.sort_by(|&a, &b| p[a - 1].total_cmp(&p[b - 1]).then(a.cmp(&b)));
    order
}

/// 1-based rank of segment `y` under [`rank_segments`], without sorting.
pub fn rank_of(p: &[f64], y: usize) -> usize {
    let py = p[y - 1];
    1 + p
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v < py || (v == py && i + 1 < y))
        .count()
}

/// Hit and NDCG at cutoff `k` for a single relevant item at `rank`.
pub fn ranking_metrics(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Slice {
    #[default]
    All,
    Cold,
    NonCold,
}

impl Slice {
    pub fn as_str(self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::Cold => "cold",
            Slice::NonCold => "noncold",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(Slice::All),
            "cold" => Some(Slice::Cold),
            "noncold" => Some(Slice::NonCold),
            _ => None,
        }
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub hr1: f64,
    pub hr5: f64,
    pub ndcg5: f64,
    pub hr10: f64,
    pub ndcg10: f64,
    pub sample_count: usize,
    pub slice: Slice,
}

impl RankingReport {
    /// Averages per-interaction metrics over the given ranks, summing in
    /// input order.
    pub fn from_ranks(ranks: &[usize], slice: Slice) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::invalid("no skipped interactions to evaluate"));
        }
        let mut sums = [0.0f64; 5];
        for &r in ranks {
            let (h1, _) = ranking_metrics(r, 1);
            let (h5, n5) = ranking_metrics(r, 5);
            let (h10, n10) = ranking_metrics(r, 10);
            for (s, v) in sums.iter_mut().zip([h1, h5, n5, h10, n10]) {
                *s += v;
            }
        }
        let c = ranks.len() as f64;
        Ok(Self {
            hr1: sums[0] / c,
            hr5: sums[1] / c,
            ndcg5: sums[2] / c,
            hr10: sums[3] / c,
            ndcg10: sums[4] / c,
            sample_count: ranks.len(),
            slice,
        })
    }

    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("slice", self.slice.to_string()),
            ("sample_count", self.sample_count.to_string()),
            ("hr@1", format!("{:.6}", self.hr1)),
            ("hr@5", format!("{:.6}", self.hr5)),
            ("ndcg@5", format!("{:.6}", self.ndcg5)),
            ("hr@10", format!("{:.6}", self.hr10)),
            ("ndcg@10", format!("{:.6}", self.ndcg10)),
        ]
    }
}

/// Interest scores for every sample, in order.
pub fn predict_all(
    model: &InterestModel,
    samples: &[&Sample],
    features: Option<&VisualFeatureStore>,
) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.query, features))
        .collect()
}

/// Ranks of the true skip segment under the model, skipped samples only.
pub fn model_ranks(
    model: &InterestModel,
    samples: &[&Sample],
    features: Option<&VisualFeatureStore>,
) -> Result<Vec<usize>> {
    let skipped: Vec<&Sample> = samples.iter().copied().filter(|s| s.skip().is_some()).collect();
    let scores = predict_all(model, &skipped, features)?;
    Ok(skipped
        .iter()
        .zip(&scores)
        .map(|(s, p)| rank_of(p, s.skip().expect("filtered")))
        .collect())
}

pub fn evaluate_model(
    model: &InterestModel,
    samples: &[&Sample],
    features: Option<&VisualFeatureStore>,
    slice: Slice,
) -> Result<RankingReport> {
    RankingReport::from_ranks(&model_ranks(model, samples, features)?, slice)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Random,
    AllPosition,
    UserPosition,
    ItemPosition,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Self::Random),
            "all-position" | "allposition" => Some(Self::AllPosition),
            "user-position" | "userposition" => Some(Self::UserPosition),
            "item-position" | "itemposition" => Some(Self::ItemPosition),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::AllPosition => "all-position",
            Self::UserPosition => "user-position",
            Self::ItemPosition => "item-position",
        }
    }
}

/// Ranks of the skip segment under a random permutation per interaction.
pub fn random_ranks(segment_counts_and_skips: &[(usize, usize)], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    segment_counts_and_skips
        .iter()
        .map(|&(n, y)| {
            let mut order: Vec<usize> = (1..=n).collect();
            order.shuffle(&mut rng);
            1 + order.iter().position(|&s| s == y).expect("y within 1..=n")
        })
        .collect()
}

/// Skip counts per segment count `N`, as `counts[y - 1]`.
type CountTable<K> = HashMap<(K, usize), Vec<f64>>;

/// Empirical skip-position frequencies keyed globally, per user or per
/// video, always conditioned on the segment count.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionModel {
    pub kind: BaselineKind,
    global: HashMap<usize, Vec<f64>>,
    keyed: CountTable<String>,
}

impl PositionModel {
    /// Fits on `(record, n, y)` triples of skipped interactions.
    pub fn fit<'a>(
        kind: BaselineKind,
        skipped: impl IntoIterator<Item = (&'a InteractionRecord, usize, usize)>,
    ) -> Result<Self> {
        if kind == BaselineKind::Random {
            return Err(Error::invalid("the random baseline has no position table"));
        }
        let mut global: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut keyed: CountTable<String> = HashMap::new();
        for (rec, n, y) in skipped {
            if y == 0 || y > n {
                return Err(Error::invalid(format!("skip segment {y} outside 1..={n}")));
            }
            global.entry(n).or_insert_with(|| vec![0.0; n])[y - 1] += 1.0;
            let key = match kind {
                BaselineKind::UserPosition => Some(&rec.user_id),
                BaselineKind::ItemPosition => Some(&rec.video_id),
                _ => None,
            };
            if let Some(key) = key {
                keyed.entry((key.clone(), n)).or_insert_with(|| vec![0.0; n])[y - 1] += 1.0;
            }
        }
        Ok(Self { kind, global, keyed })
    }

    fn smoothed(counts: &[f64]) -> Vec<f64> {
        let total: f64 = counts.iter().sum::<f64>() + counts.len() as f64;
        counts.iter().map(|c| (c + 1.0) / total).collect()
    }

    /// Skip probabilities over `1..=n`: the keyed table, else the global
    /// table for `n`, else uniform.
    pub fn probabilities(&self, user_id: &str, video_id: &str, n: usize) -> Vec<f64> {
        let key = match self.kind {
            BaselineKind::UserPosition => Some(user_id),
            BaselineKind::ItemPosition => Some(video_id),
            _ => None,
        };
        if let Some(counts) = key.and_then(|k| self.keyed.get(&(k.to_string(), n))) {
            return Self::smoothed(counts);
        }
        match self.global.get(&n) {
            Some(counts) => Self::smoothed(counts),
            None => vec![1.0 / n as f64; n],
        }
    }

    /// Interest-style scores: higher skip probability means lower score.
    pub fn scores(&self, user_id: &str, video_id: &str, n: usize) -> Vec<f64> {
        self.probabilities(user_id, video_id, n).iter().map(|p| -p).collect()
    }
}

/// Indices of records whose video never appears in `train_videos`.
pub fn cold_item_slice(records: &[InteractionRecord], train_videos: &BTreeSet<String>) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| !train_videos.contains(&r.video_id))
        .map(|(i, _)| i)
        .collect()
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_segments(&[0.9, 0.1, 0.5]), vec![2, 3, 1]);
        assert_eq!(rank_segments(&[0.3; 4]), vec![1, 2, 3, 4]);
        assert_eq!(ranking_metrics(1, 5), (1.0, 1.0));
        assert_eq!(ranking_metrics(3, 5), (1.0, 0.5));
        assert_eq!(ranking_metrics(6, 5), (0.0, 0.0));
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(RankingReport::from_ranks(&[], Slice::All).is_err());
    }

    #[test]
    fn position_model_hand_counts() {
        let r = InteractionRecord::new("u", "v", 0, 10.0, 1.0).unwrap();
        let obs = vec![(&r, 2, 1), (&r, 2, 1), (&r, 2, 1), (&r, 2, 2)];
        let m = PositionModel::fit(BaselineKind::ItemPosition, obs).unwrap();
        let p = m.probabilities("u", "v", 2);
        assert!((p[0] - 4.0 / 6.0).abs() < 1e-15 && (p[1] - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(rank_segments(&m.scores("u", "v", 2)), vec![1, 2]);
        // unseen item falls back to the global table, unseen n to uniform
        assert_eq!(m.probabilities("u", "other", 2), p);
        assert_eq!(m.probabilities("u", "v", 4), vec![0.25; 4]);
    }

    #[test]
    fn cold_slice_edges() {
        let recs = vec![
            InteractionRecord::new("u", "a", 0, 10.0, 1.0).unwrap(),
            InteractionRecord::new("u", "b", 1, 10.0, 1.0).unwrap(),
        ];
        let none: BTreeSet<String> = BTreeSet::new();
        assert_eq!(cold_item_slice(&recs, &none), vec![0, 1]);
        let all: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(cold_item_slice(&recs, &all).is_empty());
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn random_ranks_are_reproducible() {
        let cases: Vec<(usize, usize)> = (0..100).map(|i| (40, i % 40 + 1)).collect();
        assert_eq!(random_ranks(&cases, 1), random_ranks(&cases, 1));
        assert!(random_ranks(&cases, 1).iter().all(|&r| (1..=40).contains(&r)));
    }

    proptest! {
        #[test]
        fn rank_of_matches_sorted_order(p in prop::collection::vec(-3i32..3, 1..30), y_frac in 0.0f64..1.0) {
            let p: Vec<f64> = p.into_iter().map(f64::from).collect();
            let y = 1 + ((p.len() as f64 * y_frac) as usize).min(p.len() - 1);
            let order = rank_segments(&p);
            prop_assert_eq!(rank_of(&p, y), 1 + order.iter().position(|&s| s == y).unwrap());
        }

        #[test]
        fn hr_monotone_and_ndcg_bounded(ranks in prop::collection::vec(1usize..40, 1..50)) {
            let r = RankingReport::from_ranks(&ranks, Slice::All).unwrap();
            prop_assert!(r.hr1 <= r.hr5 && r.hr5 <= r.hr10);
            prop_assert!(r.ndcg5 <= r.hr5 && r.ndcg10 <= r.hr10);
        }
    }
}
