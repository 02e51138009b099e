//! Train the segment interest model on a small synthetic set and print
//! its skip-prediction report and one heatmap.
//!
//! `cargo run --release --example train_interest`

use seglab::commands::{
    cmd_predict_heatmap, cmd_synth, evaluate_interest, interest_recovery, train_interest_model, Dataset,
};
use seglab::config::RunConfig;
use seglab::data::SplitPart;
use seglab::skip_eval::Slice;

fn main() -> seglab::Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synth.n_users", "300"),
        ("synth.n_videos", "800"),
        ("synth.interactions_per_user", "50"),
        ("train.max_epochs", "4"),
    ] {
        cfg.set(k, v)?;
    }
    let dir = std::env::temp_dir().join("seglab_train_interest");
    cmd_synth(&cfg, &dir)?;
    let ds = Dataset::load(&dir, &cfg)?;

    let (model, samples, history) = train_interest_model(&cfg, &ds)?;
    for line in history.log_lines() {
        println!("{line}");
    }
    for slice in [Slice::All, Slice::Cold] {
        let r = evaluate_interest(&model, &ds, &samples, slice)?;
        println!("test {:<8} HR@5 {:.4}  NDCG@5 {:.4}  ({} views)", slice.as_str(), r.hr5, r.ndcg5, r.sample_count);
    }
    if let Some(rec) = interest_recovery(&model, &ds, &samples)? {
        println!("spearman with planted interest: p {:.3}, o {:.3}", rec.spearman_p, rec.spearman_o);
    }

    let checkpoint = dir.join("interest.ckpt");
    model.save(&checkpoint)?;
    let r = &ds.records[ds.in_part(SplitPart::Test)[0]];
    let heat = cmd_predict_heatmap(&cfg, &checkpoint, &r.user_id, &r.video_id, &dir)?;
    let bars: String = heat
        .p_normalized
        .iter()
        .map(|&v| [' ', '.', ':', '-', '=', '+', '*', '#'][((v * heat.n as f64 * 3.5) as usize).min(7)])
        .collect();
    println!("{} on {}: [{bars}] label {:?}", heat.user_id, heat.video_id, heat.skip_label);
    Ok(())
}
