//! Domain types shared by every other module: interaction records, the
//! segment grid, skip labels, view histories, user splits and the duration
//! buckets used for effective-view labels.

mod buckets;
mod history;
mod record;
mod split;

pub use buckets::{compute_duration_buckets, derive_effective_view_label, DurationBuckets};
pub use history::{build_history, HistoryEntry, HistoryUnit, ViewHistory};
pub use record::{derive_skip_label, num_segments, InteractionRecord, SegmentGrid, SkipLabel};
pub use split::{split_users, DatasetSplit, SplitPart};
