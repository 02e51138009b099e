//! Synthetic interaction logs with a planted per-segment interest signal.
//!
//! Each user has a latent taste `z_u` and each video a chain of segment
//! contents `c_{v,i}` (AR(1) along the timeline). The planted interest is
//! `g = z_u · c_{v,i} - drift · i + noise`, and a viewer leaves at segment
//! `i` with hazard `logistic(alpha - gain · g)`. Users pick unseen videos
//! with weight `exp(sharpness · z_u · mean_i c_{v,i})`, so a viewing history
//! says something about taste. Visual features are a noisy random linear
//! embedding of the contents.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::VisualFeatureStore;
use super::ground_truth::PlantedGroundTruth;
use crate::data::{num_segments, split_users, DatasetSplit, InteractionRecord, SegmentGrid};
use crate::error::{Error, Result};
use crate::nn::logistic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub latent_dim: usize,
    /// AR(1) coefficient between consecutive segment contents, in [0, 1).
    pub content_smoothness: f64,
    /// Interest lost per segment index.
    pub position_drift: f64,
    pub hazard_base: f64,
    pub interest_gain: f64,
    pub noise_sd: f64,
    /// How strongly taste steers video choice; 0 picks uniformly.
    pub choice_sharpness: f64,
    pub interactions_per_user: usize,
    pub visual_dim: usize,
    pub visual_noise_sd: f64,
    /// Share of videos reserved for valid/test users, and the probability a
    /// valid/test view draws from that reserve.
    pub cold_video_rate: f64,
    pub duration_min_s: u32,
    pub duration_max_s: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_videos: 2000,
            latent_dim: 2,
            content_smoothness: 0.8,
            position_drift: 0.05,
            hazard_base: -5.5,
            interest_gain: 2.0,
            noise_sd: 0.3,
            choice_sharpness: 1.0,
            interactions_per_user: 100,
            visual_dim: 32,
            visual_noise_sd: 0.5,
            cold_video_rate: 1.0 / 3.0,
            duration_min_s: 10,
            duration_max_s: 200,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic config: {m}")));
        if self.n_users < 10 {
            return bad("n_users must be at least 10");
        }
        if self.n_videos == 0 || self.latent_dim == 0 || self.visual_dim == 0 {
            return bad("n_videos, latent_dim and visual_dim must be positive");
        }
        if self.interactions_per_user == 0 {
            return bad("interactions_per_user must be positive");
        }
        if !(0.0..1.0).contains(&self.content_smoothness) {
            return bad("content_smoothness must be in [0, 1)");
        }
        if !(self.interest_gain >= 0.0) {
            return bad("interest_gain must be non-negative");
        }
        if !(self.noise_sd >= 0.0) || !(self.visual_noise_sd >= 0.0) {
            return bad("noise standard deviations must be non-negative");
        }
        if !(0.0..1.0).contains(&self.cold_video_rate) {
            return bad("cold_video_rate must be in [0, 1)");
        }
        if self.duration_min_s == 0 || self.duration_min_s > self.duration_max_s {
            return bad("need 0 < duration_min_s <= duration_max_s");
        }
        if !(self.position_drift.is_finite() && self.hazard_base.is_finite()) {
            return bad("position_drift and hazard_base must be finite");
        }
        if !(self.choice_sharpness >= 0.0 && self.choice_sharpness.is_finite()) {
            return bad("choice_sharpness must be finite and non-negative");
        }
        let warm = self.n_videos - self.cold_pool_size();
        if self.interactions_per_user > warm {
            return bad("interactions_per_user exceeds the number of warm videos");
        }
        Ok(())
    }

    fn cold_pool_size(&self) -> usize {
        (self.cold_video_rate * self.n_videos as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// Sorted by user, then timestamp.
    pub records: Vec<InteractionRecord>,
    pub features: VisualFeatureStore,
    pub ground_truth: PlantedGroundTruth,
    pub split: DatasetSplit,
    /// Videos only ever shown to valid/test users.
    pub cold_videos: BTreeSet<String>,
}

/// Exit hazard at a segment with planted interest `g`.
pub fn hazard(g: f64, hazard_base: f64, interest_gain: f64) -> f64 {
    logistic(hazard_base - interest_gain * g)
}

/// Walks the segments in order and returns the 1-based segment at which
/// the first exit fires, or `None` for a completed view.
pub fn simulate_exit<R: Rng + ?Sized>(
    g: &[f64],
    hazard_base: f64,
    interest_gain: f64,
    rng: &mut R,
) -> Option<usize> {
    for (i, &gi) in g.iter().enumerate() {
        let u: f64 = rng.random();
        if u < hazard(gi, hazard_base, interest_gain) {
            return Some(i + 1);
        }
    }
    None
}

/// Watch time for an exit during `segment`: half-way through that segment.
pub fn exit_watch_time(segment: usize, duration_s: f64, grid: &SegmentGrid) -> f64 {
    let start = (segment - 1) as f64 * grid.segment_length_s;
    let len = grid.segment_length_s.min(duration_s - start);
    start + 0.5 * len
}

pub fn generate_synthetic(cfg: &SyntheticConfig, grid: &SegmentGrid) -> Result<SyntheticDataset> {
    cfg.validate()?;
    grid.validate()?;
    if (cfg.duration_max_s as f64) > grid.max_duration_s() {
        return Err(Error::invalid("duration_max_s exceeds the segment grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let user_ids: Vec<String> = (0..cfg.n_users).map(|u| format!("u{u:05}")).collect();
    let tastes: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|_| (0..k).map(|_| normal(&mut rng)).collect())
        .collect();

    let video_ids: Vec<String> = (0..cfg.n_videos).map(|v| format!("v{v:05}")).collect();
    let innovation = (1.0 - cfg.content_smoothness * cfg.content_smoothness).sqrt();
    let mut durations = Vec::with_capacity(cfg.n_videos);
    let mut contents: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.n_videos);
    for _ in 0..cfg.n_videos {
        let d = rng.random_range(cfg.duration_min_s..=cfg.duration_max_s) as f64;
        let n = num_segments(d, grid)?;
        let mut chain: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut prev: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        chain.push(prev.clone());
        for _ in 1..n {
            prev = prev
                .iter()
                .map(|&p| cfg.content_smoothness * p + innovation * normal(&mut rng))
                .collect();
            chain.push(prev.clone());
        }
        durations.push(d);
        contents.push(chain);
    }

    // content -> visual embedding, rows scaled so each output has unit variance
    let scale = 1.0 / (k as f64).sqrt();
    let embed: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..cfg.visual_dim).map(|_| scale * normal(&mut rng)).collect())
        .collect();
    let mut features = VisualFeatureStore::new(cfg.visual_dim);
    for (vid, chain) in video_ids.iter().zip(&contents) {
        for (i, c) in chain.iter().enumerate() {
            let row: Vec<f32> = (0..cfg.visual_dim)
                .map(|j| {
                    let clean: f64 = (0..k).map(|a| c[a] * embed[a][j]).sum();
                    (clean + cfg.visual_noise_sd * normal(&mut rng)) as f32
                })
                .collect();
            features.push(vid, i + 1, &row)?;
        }
    }

    let split = split_users(user_ids.iter().map(String::as_str), (8, 1, 1), cfg.seed)?;

    let mut order: Vec<usize> = (0..cfg.n_videos).collect();
    order.shuffle(&mut rng);
    let n_cold = cfg.cold_pool_size();
    let mut cold_pool = order[..n_cold].to_vec();
    cold_pool.sort_unstable();
    let mut warm_pool = order[n_cold..].to_vec();
    warm_pool.sort_unstable();
    let cold_videos: BTreeSet<String> = cold_pool.iter().map(|&v| video_ids[v].clone()).collect();

    let mean_content: Vec<Vec<f64>> = contents
        .iter()
        .map(|chain| {
            (0..k)
                .map(|a| chain.iter().map(|c| c[a]).sum::<f64>() / chain.len() as f64)
                .collect()
        })
        .collect();
    let appeal: Vec<Vec<f64>> = tastes
        .iter()
        .map(|z| {
            mean_content
                .iter()
                .map(|m| (cfg.choice_sharpness * m.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).exp())
                .collect()
        })
        .collect();

    let base_time: i64 = 1_717_200_000;
    let mut records = Vec::with_capacity(cfg.n_users * cfg.interactions_per_user);
    let mut ground_truth = PlantedGroundTruth::default();
    for (u, uid) in user_ids.iter().enumerate() {
        let held_out = !split.train.contains(uid);
        let mut seen = vec![false; cfg.n_videos];
        let mut cold_left = if held_out { cold_pool.len() } else { 0 };
        for step in 0..cfg.interactions_per_user {
            let use_cold = cold_left > 0 && rng.random::<f64>() < cfg.cold_video_rate;
            let pool = if use_cold { &cold_pool } else { &warm_pool };
            let v = if cfg.choice_sharpness > 0.0 {
                let weights: Vec<f64> = pool
                    .iter()
                    .map(|&cand| if seen[cand] { 0.0 } else { appeal[u][cand] })
                    .collect();
                let mut target = rng.random::<f64>() * weights.iter().sum::<f64>();
                let mut pick = pool.len() - 1;
                for (j, w) in weights.iter().enumerate() {
                    if target < *w {
                        pick = j;
                        break;
                    }
                    target -= w;
                }
                while seen[pool[pick]] {
                    pick -= 1;
                }
                pool[pick]
            } else {
                loop {
                    let cand = pool[rng.random_range(0..pool.len())];
                    if !seen[cand] {
                        break cand;
                    }
                }
            };
            seen[v] = true;
            if use_cold {
                cold_left -= 1;
            }

            let g: Vec<f64> = contents[v]
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let affinity: f64 = c.iter().zip(&tastes[u]).map(|(a, b)| a * b).sum();
                    affinity - cfg.position_drift * (i + 1) as f64 + cfg.noise_sd * normal(&mut rng)
                })
                .collect();
            let duration = durations[v];
            let watch = match simulate_exit(&g, cfg.hazard_base, cfg.interest_gain, &mut rng) {
                Some(seg) => exit_watch_time(seg, duration, grid),
                None => duration,
            };
            let ts = base_time + 60 * step as i64 + rng.random_range(0..30);
            records.push(InteractionRecord::new(uid, &video_ids[v], ts, duration, watch)?);
            ground_truth.insert(uid, &video_ids[v], g);
        }
    }

    Ok(SyntheticDataset {
        records,
        features,
        ground_truth,
        split,
        cold_videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{derive_skip_label, SkipLabel};

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_users: 40,
            n_videos: 120,
            interactions_per_user: 20,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_output() {
        let grid = SegmentGrid::default();
        let a = generate_synthetic(&small_cfg(), &grid).unwrap();
        let b = generate_synthetic(&small_cfg(), &grid).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.features, b.features);
        assert_eq!(a.ground_truth, b.ground_truth);
        let c = generate_synthetic(&SyntheticConfig { seed: 8, ..small_cfg() }, &grid).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn skip_labels_roundtrip() {
        let grid = SegmentGrid::default();
        let cfg = small_cfg();
        let ds = generate_synthetic(&cfg, &grid).unwrap();
        // replay the exit draws with the same stream is not possible here, so
        // check the structural round trip instead: every exit sits half-way
        // through its segment and the label recovers that segment
        for r in &ds.records {
            assert!(r.watch_time_s <= r.duration_s);
            match derive_skip_label(r, &grid).unwrap() {
                SkipLabel::Skipped(y) => {
                    assert_eq!(exit_watch_time(y, r.duration_s, &grid), r.watch_time_s);
                }
                SkipLabel::Completed => assert_eq!(r.watch_time_s, r.duration_s),
            }
            let g = ds.ground_truth.get(&r.user_id, &r.video_id).unwrap();
            assert_eq!(g.len(), num_segments(r.duration_s, &grid).unwrap());
        }
    }

    #[test]
    fn exit_watch_time_recovers_segment() {
        let grid = SegmentGrid::default();
        for duration in [10.0, 17.0, 21.0, 200.0] {
            let n = num_segments(duration, &grid).unwrap();
            for y in 1..=n {
                let watch = exit_watch_time(y, duration, &grid);
                let rec = InteractionRecord::new("u", "v", 0, duration, watch).unwrap();
                assert_eq!(derive_skip_label(&rec, &grid).unwrap(), SkipLabel::Skipped(y));
            }
        }
    }

    #[test]
    fn cold_videos_only_reach_held_out_users() {
        let grid = SegmentGrid::default();
        let ds = generate_synthetic(&small_cfg(), &grid).unwrap();
        for r in &ds.records {
            if ds.split.train.contains(&r.user_id) {
                assert!(!ds.cold_videos.contains(&r.video_id));
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let grid = SegmentGrid::default();
        let bad = SyntheticConfig {
            content_smoothness: 1.0,
            ..small_cfg()
        };
        assert!(generate_synthetic(&bad, &grid).is_err());
        let bad = SyntheticConfig {
            duration_max_s: 500,
            ..small_cfg()
        };
        assert!(generate_synthetic(&bad, &grid).is_err());
    }
}
