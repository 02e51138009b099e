use serde::{Deserialize, Serialize};

use super::record::{derive_skip_label, num_segments, InteractionRecord, SegmentGrid};
use crate::error::Result;

/// What `max_len` counts when truncating a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HistoryUnit {
    #[default]
    Segments,
    Videos,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub video_id: String,
    /// 1-based segment index within the video.
    pub segment: usize,
}

/// Chronological list of segments a user watched before a query time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewHistory {
    pub entries: Vec<HistoryEntry>,
    pub max_len: usize,
    pub unit: HistoryUnit,
}

impl ViewHistory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Expands the interactions strictly before `query_time` into watched
/// segments and keeps the most recent ones.
///
/// `user_interactions` must be sorted by timestamp.
pub fn build_history(
    user_interactions: &[InteractionRecord],
    query_time: i64,
    grid: &SegmentGrid,
    max_len: usize,
    unit: HistoryUnit,
) -> Result<ViewHistory> {
    let cut = user_interactions.partition_point(|r| r.timestamp < query_time);
    // Walk backwards and stop once enough has been collected.
    let mut blocks: Vec<(&str, usize)> = Vec::new();
    let mut collected = 0usize;
    for rec in user_interactions[..cut].iter().rev() {
        if collected >= max_len {
            break;
        }
        let n = num_segments(rec.duration_s, grid)?;
        let watched = derive_skip_label(rec, grid)?.watched_segments(n);
        blocks.push((rec.video_id.as_str(), watched));
        collected += match unit {
            HistoryUnit::Segments => watched,
            HistoryUnit::Videos => 1,
        };
    }

    let mut entries: Vec<HistoryEntry> = blocks
        .iter()
        .rev()
        .flat_map(|&(vid, watched)| {
            (1..=watched).map(move |segment| HistoryEntry {
                video_id: vid.to_string(),
                segment,
            })
        })
        .collect();
    if unit == HistoryUnit::Segments && entries.len() > max_len {
        entries.drain(..entries.len() - max_len);
    }
    Ok(ViewHistory {
        entries,
        max_len,
        unit,
    })
}
