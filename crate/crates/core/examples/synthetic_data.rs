//! Generate a small synthetic dataset and look at what the simulator plants.
//!
//! `cargo run --release --example synthetic_data`

use seglab::data::{derive_skip_label, num_segments, SegmentGrid};
use seglab::io::{generate_synthetic, SyntheticConfig};

fn main() -> seglab::Result<()> {
    let grid = SegmentGrid::default();
    let cfg = SyntheticConfig {
        n_users: 200,
        n_videos: 600,
        interactions_per_user: 40,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg, &grid)?;

    let mut skips_at = vec![0usize; grid.max_segments];
    let mut completed = 0;
    for r in &ds.records {
        match derive_skip_label(r, &grid)?.skip_segment() {
            Some(y) => skips_at[y - 1] += 1,
            None => completed += 1,
        }
    }
    let (tr, va, te) = ds.split.sizes();
    println!("{} interactions, users {tr}/{va}/{te}, {} cold videos", ds.records.len(), ds.cold_videos.len());
    println!("completed views: {completed}");
    println!("skips by segment (first 10): {:?}", &skips_at[..10]);

    // the planted interest of one view, next to where the viewer left
    let r = &ds.records[0];
    let g = ds.ground_truth.get(&r.user_id, &r.video_id).expect("planted");
    let n = num_segments(r.duration_s, &grid)?;
    println!("{} on {} ({n} segments), label {:?}", r.user_id, r.video_id, derive_skip_label(r, &grid)?);
    let shown: Vec<String> = g.iter().map(|v| format!("{v:.2}")).collect();
    println!("planted interest: {}", shown.join(" "));
    Ok(())
}
