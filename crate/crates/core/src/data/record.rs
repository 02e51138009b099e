use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user-video view event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub video_id: String,
    pub timestamp: i64,
    pub duration_s: f64,
    pub watch_time_s: f64,
}

impl InteractionRecord {
    /// Validates the ingest invariants and clamps `watch_time_s` to the
    /// video duration.
    pub fn new(
        user_id: impl Into<String>,
        video_id: impl Into<String>,
        timestamp: i64,
        duration_s: f64,
        watch_time_s: f64,
    ) -> Result<Self> {
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(Error::invalid(format!(
                "duration_s must be positive, got {duration_s}"
            )));
        }
        if !(watch_time_s.is_finite() && watch_time_s >= 0.0) {
            return Err(Error::invalid(format!(
                "watch_time_s must be non-negative, got {watch_time_s}"
            )));
        }
        Ok(Self {
            user_id: user_id.into(),
            video_id: video_id.into(),
            timestamp,
            duration_s,
            watch_time_s: watch_time_s.min(duration_s),
        })
    }

    pub fn view_ratio(&self) -> f64 {
        self.watch_time_s / self.duration_s
    }
}

/// Fixed-length partition of a video's timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentGrid {
    pub segment_length_s: f64,
    pub max_segments: usize,
    /// Tolerance below the full duration that still counts as a completed view.
    pub completion_eps_s: f64,
}

impl Default for SegmentGrid {
    fn default() -> Self {
        Self {
            segment_length_s: 5.0,
            max_segments: 40,
            completion_eps_s: 0.25,
        }
    }
}

impl SegmentGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.segment_length_s.is_finite() && self.segment_length_s > 0.0) {
            return Err(Error::invalid("segment_length_s must be positive"));
        }
        if self.max_segments == 0 {
            return Err(Error::invalid("max_segments must be positive"));
        }
        if !(self.completion_eps_s >= 0.0) {
            return Err(Error::invalid("completion_eps_s must be non-negative"));
        }
        Ok(())
    }

    /// Longest duration that fits the grid without truncation.
    pub fn max_duration_s(&self) -> f64 {
        self.segment_length_s * self.max_segments as f64
    }
}

/// Number of segments covering `duration_s`, capped at `grid.max_segments`.
pub fn num_segments(duration_s: f64, grid: &SegmentGrid) -> Result<usize> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::invalid(format!(
            "duration_s must be positive, got {duration_s}"
        )));
    }
    let n = (duration_s / grid.segment_length_s).ceil() as usize;
    Ok(n.clamp(1, grid.max_segments))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkipLabel {
    /// 1-based index of the segment during which the user left.
    Skipped(usize),
    Completed,
}

impl SkipLabel {
    pub fn skip_segment(&self) -> Option<usize> {
        match self {
            SkipLabel::Skipped(y) => Some(*y),
            SkipLabel::Completed => None,
        }
    }

    /// Number of segments the user saw, given the video's segment count.
    pub fn watched_segments(&self, n: usize) -> usize {
        match self {
            SkipLabel::Skipped(y) => *y,
            SkipLabel::Completed => n,
        }
    }
}

/// The skip segment is the one containing the exit instant.
pub fn derive_skip_label(rec: &InteractionRecord, grid: &SegmentGrid) -> Result<SkipLabel> {
    let n = num_segments(rec.duration_s, grid)?;
    if rec.watch_time_s >= rec.duration_s - grid.completion_eps_s {
        return Ok(SkipLabel::Completed);
    }
    let y = (rec.watch_time_s / grid.segment_length_s).floor() as usize + 1;
    Ok(SkipLabel::Skipped(y.min(n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(duration: f64, watch: f64) -> InteractionRecord {
        InteractionRecord::new("u", "v", 0, duration, watch).unwrap()
    }

    #[test]
    fn segment_counts() {
        let grid = SegmentGrid::default();
        assert_eq!(num_segments(200.0, &grid).unwrap(), 40);
        assert_eq!(num_segments(3.0, &grid).unwrap(), 1);
        assert_eq!(num_segments(17.0, &grid).unwrap(), 4);
        assert_eq!(num_segments(500.0, &grid).unwrap(), 40);
        assert!(num_segments(0.0, &grid).is_err());
        assert!(num_segments(-1.0, &grid).is_err());
    }

    #[test]
    fn skip_labels() {
        let grid = SegmentGrid::default();
        assert_eq!(derive_skip_label(&rec(17.0, 12.3), &grid).unwrap(), SkipLabel::Skipped(3));
        assert_eq!(derive_skip_label(&rec(17.0, 17.0), &grid).unwrap(), SkipLabel::Completed);
        assert_eq!(derive_skip_label(&rec(17.0, 0.0), &grid).unwrap(), SkipLabel::Skipped(1));
        // within the jitter tolerance
        assert_eq!(derive_skip_label(&rec(17.0, 16.8), &grid).unwrap(), SkipLabel::Completed);
        // exit during the partial last segment
        assert_eq!(derive_skip_label(&rec(17.0, 16.5), &grid).unwrap(), SkipLabel::Skipped(4));
    }

    #[test]
    fn ingest_clamps_and_rejects() {
        assert_eq!(rec(20.0, 25.0).watch_time_s, 20.0);
        assert!(InteractionRecord::new("u", "v", 0, 0.0, 0.0).is_err());
        assert!(InteractionRecord::new("u", "v", 0, 10.0, -1.0).is_err());
        assert!(InteractionRecord::new("u", "v", 0, f64::NAN, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn skip_segment_within_grid(duration in 0.1f64..400.0, frac in 0.0f64..1.5) {
            let grid = SegmentGrid::default();
            let r = rec(duration, duration * frac);
            let n = num_segments(duration, &grid).unwrap();
            prop_assert!((1..=grid.max_segments).contains(&n));
            if let SkipLabel::Skipped(y) = derive_skip_label(&r, &grid).unwrap() {
                prop_assert!(y >= 1 && y <= n);
            }
        }
    }
}
