//! The intra-video loss and the ranking metrics on hand-sized inputs.
//!
//! `cargo run --example loss_and_metrics`

use seglab::skip_eval::{rank_of, rank_segments, ranking_metrics};
use seglab::training::{bce_ablation_loss, intra_video_loss, PairMode};

fn main() -> seglab::Result<()> {
    // interest scores of a four-segment video; the viewer left at segment 3
    let p = [0.9, 0.4, -0.2, 0.1];
    let y = 3;
    for mode in [PairMode::WatchedOnly, PairMode::AllExceptY] {
        println!("{mode:?}: loss {:.6}", intra_video_loss(&p, y, mode)?);
    }
    println!("BCE ablation: loss {:.6}", bce_ablation_loss(&p, y)?);

    // lowest interest first
    println!("ranking: {:?}", rank_segments(&p));
    let rank = rank_of(&p, y);
    for k in [1, 5] {
        let (hr, ndcg) = ranking_metrics(rank, k);
        println!("rank {rank}: HR@{k} {hr}, NDCG@{k} {ndcg:.4}");
    }
    Ok(())
}
