use serde::{Deserialize, Serialize};

use super::record::InteractionRecord;
use crate::error::{Error, Result};

/// Duration quantile buckets with a per-bucket view-ratio threshold.
///
/// `boundaries[j]` is the lower edge of bucket `j + 1`; a duration belongs
/// to the bucket counted by how many boundaries are `<=` it. Durations below
/// the first or above the last edge fall into the edge buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationBuckets {
    pub boundaries: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl DurationBuckets {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn bucket_of(&self, duration_s: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= duration_s)
    }

    /// `(lower, upper)` duration range of a bucket; open ends are infinite.
    pub fn range(&self, bucket: usize) -> (f64, f64) {
        let lo = if bucket == 0 {
            f64::NEG_INFINITY
        } else {
            self.boundaries[bucket - 1]
        };
        let hi = self.boundaries.get(bucket).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }
}

/// Splits training durations at their quantiles and takes the median view
/// ratio inside each bucket. Coinciding quantile edges are merged, so heavily
/// tied durations can yield fewer than `n_buckets` buckets.
pub fn compute_duration_buckets(
    train_records: &[InteractionRecord],
    n_buckets: usize,
) -> Result<DurationBuckets> {
    if n_buckets == 0 {
        return Err(Error::invalid("n_buckets must be positive"));
    }
    let mut durations: Vec<f64> = train_records.iter().map(|r| r.duration_s).collect();
    durations.sort_by(f64::total_cmp);
    let mut distinct = durations.clone();
    distinct.dedup();
    if distinct.len() < n_buckets {
        return Err(Error::invalid(format!(
            "need at least {n_buckets} distinct durations, got {}",
            distinct.len()
        )));
    }

    let n = durations.len();
    let mut boundaries: Vec<f64> = (1..n_buckets)
        .map(|j| durations[j * n / n_buckets])
        .collect();
    boundaries.dedup();
    // the lowest duration can never start a bucket above bucket 0
    boundaries.retain(|&b| b > durations[0]);

    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); boundaries.len() + 1];
    let mut buckets = DurationBuckets {
        boundaries,
        thresholds: Vec::new(),
    };
    for rec in train_records {
        ratios[buckets.bucket_of(rec.duration_s)].push(rec.view_ratio());
    }
    buckets.thresholds = ratios
        .into_iter()
        .map(|mut r| median(&mut r))
        .collect();
    Ok(buckets)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// 1 iff the view ratio reaches its bucket threshold (inclusive).
pub fn derive_effective_view_label(rec: &InteractionRecord, buckets: &DurationBuckets) -> u8 {
    let threshold = buckets.thresholds[buckets.bucket_of(rec.duration_s)];
    u8::from(rec.view_ratio() >= threshold)
}
