//! Position baselines for video-skip prediction on synthetic data.
//!
//! `cargo run --release --example skip_baselines`

use seglab::data::{derive_skip_label, num_segments, SegmentGrid};
use seglab::io::{generate_synthetic, SyntheticConfig};
use seglab::skip_eval::{random_ranks, rank_of, BaselineKind, PositionModel, RankingReport, Slice};

fn main() -> seglab::Result<()> {
    let grid = SegmentGrid::default();
    let cfg = SyntheticConfig {
        n_users: 300,
        n_videos: 800,
        interactions_per_user: 50,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg, &grid)?;

    let (mut fit, mut test) = (Vec::new(), Vec::new());
    for r in &ds.records {
        let n = num_segments(r.duration_s, &grid)?;
        if let Some(y) = derive_skip_label(r, &grid)?.skip_segment() {
            if ds.split.test.contains(&r.user_id) {
                test.push((r, n, y));
            } else {
                fit.push((r, n, y));
            }
        }
    }

    let cases: Vec<(usize, usize)> = test.iter().map(|&(_, n, y)| (n, y)).collect();
    let random = RankingReport::from_ranks(&random_ranks(&cases, 7), Slice::All)?;
    println!("{:<14} HR@5 {:.4}  NDCG@5 {:.4}", "random", random.hr5, random.ndcg5);
    for kind in [BaselineKind::AllPosition, BaselineKind::UserPosition, BaselineKind::ItemPosition] {
        let model = PositionModel::fit(kind, fit.iter().copied())?;
        let ranks: Vec<usize> = test
            .iter()
            .map(|&(r, n, y)| rank_of(&model.scores(&r.user_id, &r.video_id, n), y))
            .collect();
        let report = RankingReport::from_ranks(&ranks, Slice::All)?;
        println!("{:<14} HR@5 {:.4}  NDCG@5 {:.4}", kind.as_str(), report.hr5, report.ndcg5);
    }
    Ok(())
}
