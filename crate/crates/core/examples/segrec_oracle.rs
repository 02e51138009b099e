//! Video-level click prediction with planted segment interest: SegRec
//! aggregation against the whole-video baseline.
//!
//! `cargo run --release --example segrec_oracle`

use seglab::commands::{cmd_synth, evaluate_rec, train_rec_model, Dataset, InterestSource};
use seglab::config::RunConfig;
use seglab::data::SplitPart;

fn main() -> seglab::Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synth.n_users", "300"),
        ("synth.n_videos", "800"),
        ("synth.interactions_per_user", "50"),
        ("rec.max_epochs", "4"),
    ] {
        cfg.set(k, v)?;
    }
    let dir = std::env::temp_dir().join("seglab_segrec_oracle");
    cmd_synth(&cfg, &dir)?;
    let ds = Dataset::load(&dir, &cfg)?;

    for mode in ["video", "segsum", "segadjust", "segrec"] {
        cfg.set("rec.mode", mode)?;
        let (model, examples, _) = train_rec_model(&cfg, &ds, &InterestSource::Oracle)?;
        let (valid, werr, _) = evaluate_rec(&model, &ds, &examples, SplitPart::Valid)?;
        println!(
            "{mode:<10} valid AUC {:.4}  logloss {:.4}  max |sum w - 1| {werr:.1e}",
            valid.auc, valid.logloss
        );
    }
    Ok(())
}
