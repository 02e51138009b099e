//! Turns interaction records into model queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::data::{build_history, derive_skip_label, num_segments, HistoryUnit, InteractionRecord, SegmentGrid, SkipLabel};
use crate::io::VisualFeatureStore;
use crate::Result;

/// Everything the model needs about one interaction, as indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentQuery {
    pub user: usize,
    pub video: usize,
    pub n: usize,
    /// Feature rows of the history segments, oldest first.
    pub history_rows: Vec<Option<usize>>,
    /// Feature rows of the target's segments `1..=n`.
    pub target_rows: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub query: SegmentQuery,
    pub label: SkipLabel,
}

impl Sample {
    pub fn skip(&self) -> Option<usize> {
        self.label.skip_segment()
    }
}

/// Settings shared by every query built for one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuerySettings<'a> {
    pub grid: &'a SegmentGrid,
    pub history_len: usize,
    pub history_unit: HistoryUnit,
    pub vocab: &'a Vocab,
    pub features: Option<&'a VisualFeatureStore>,
}

/// Query for `record`, with history taken from `user_log` (that user's
/// records sorted by timestamp).
pub fn build_query(record: &InteractionRecord, user_log: &[InteractionRecord], s: &QuerySettings) -> Result<SegmentQuery> {
    let n = num_segments(record.duration_s, s.grid)?;
    let row = |video: &str, segment: usize| s.features.and_then(|f| f.row_of(video, segment));
    let history = build_history(user_log, record.timestamp, s.grid, s.history_len, s.history_unit)?;
    Ok(SegmentQuery {
        user: s.vocab.user(&record.user_id),
        video: s.vocab.video(&record.video_id),
        n,
        history_rows: history.entries.iter().map(|e| row(&e.video_id, e.segment)).collect(),
        target_rows: (1..=n).map(|i| row(&record.video_id, i)).collect(),
    })
}

/// Groups records per user, sorted by timestamp (stable for ties).
pub fn user_logs(records: &[InteractionRecord]) -> BTreeMap<&str, Vec<InteractionRecord>> {
    let mut logs: BTreeMap<&str, Vec<InteractionRecord>> = BTreeMap::new();
    for r in records {
        logs.entry(r.user_id.as_str()).or_default().push(r.clone());
    }
    for log in logs.values_mut() {
        log.sort_by_key(|r| r.timestamp);
    }
    logs
}

/// One sample per record, in input order.
///
/// Histories come from `history_source`, which normally holds every record
/// of the same users (a user's history spans all of their earlier views).
pub fn build_samples(
    records: &[InteractionRecord],
    history_source: &[InteractionRecord],
    s: &QuerySettings,
) -> Result<Vec<Sample>> {
    let logs = user_logs(history_source);
    let empty = Vec::new();
    records
        .iter()
        .map(|r| {
            let log = logs.get(r.user_id.as_str()).unwrap_or(&empty);
            Ok(Sample {
                query: build_query(r, log, s)?,
                label: derive_skip_label(r, s.grid)?,
            })
        })
        .collect()
}
