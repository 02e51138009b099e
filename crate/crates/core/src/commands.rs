//! The command surface: each function loads its inputs, does one job and
//! returns a [`Report`]. The `seglab` binary is a thin wrapper over these.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{compute_duration_buckets, derive_skip_label, split_users, DatasetSplit, InteractionRecord, SplitPart};
use crate::io::{
    generate_synthetic, load_interactions, load_visual_features, read_ground_truth, read_split, write_ground_truth,
    write_interactions, write_split, write_visual_features, PlantedGroundTruth, VisualFeatureStore,
};
use crate::model::decoder::HeatmapRecord;
use crate::model::query::{build_query, user_logs, QuerySettings};
use crate::model::{build_samples, InterestModel, Sample, Vocab};
use crate::report::Report;
use crate::segrec::{build_ctr_examples, train_segrec, AggregationMode, CtrExample, CtrReport, SegRecModel};
use crate::skip_eval::{
    evaluate_model, random_ranks, rank_of, BaselineKind, PositionModel, RankingReport, Slice,
};
use crate::training::{train, TrainHistory};
use crate::{Error, Result};

pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const FEATURES_FILE: &str = "features.bin";
pub const FEATURE_INDEX_FILE: &str = "features.idx";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tsv";
pub const SPLIT_FILE: &str = "split.tsv";

/// Interaction log plus everything that travels with it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<InteractionRecord>,
    pub features: Option<VisualFeatureStore>,
    pub split: DatasetSplit,
    pub ground_truth: Option<PlantedGroundTruth>,
}

impl Dataset {
    /// Reads a data directory. Features, ground truth and the split file are
    /// optional; without a split file users are split 8:1:1 with
    /// `split.seed`.
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let records = load_interactions(&dir.join(INTERACTIONS_FILE))?;
        let grid = cfg.grid();
        for r in &records {
            if r.duration_s > grid.max_duration_s() {
                return Err(Error::Data(format!(
                    "{}/{}: duration {} s exceeds the segment grid",
                    r.user_id, r.video_id, r.duration_s
                )));
            }
        }
        let feat = dir.join(FEATURES_FILE);
        let features = if feat.exists() {
            Some(load_visual_features(&feat, &dir.join(FEATURE_INDEX_FILE))?)
        } else {
            None
        };
        let split_path = dir.join(SPLIT_FILE);
        let split = if split_path.exists() {
            read_split(&split_path)?
        } else {
            split_users(records.iter().map(|r| r.user_id.as_str()), (8, 1, 1), cfg.get_u64("split.seed"))?
        };
        if let Some(r) = records.iter().find(|r| split.part_of(&r.user_id).is_none()) {
            return Err(Error::Data(format!("user {} is missing from the split", r.user_id)));
        }
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        let ground_truth = if gt_path.exists() {
            Some(read_ground_truth(&gt_path)?)
        } else {
            None
        };
        Ok(Self {
            records,
            features,
            split,
            ground_truth,
        })
    }

    pub fn in_part(&self, part: SplitPart) -> Vec<usize> {
        let users = self.split.users(part);
        (0..self.records.len())
            .filter(|&i| users.contains(&self.records[i].user_id))
            .collect()
    }

    pub fn train_vocab(&self) -> Vocab {
        let idx = self.in_part(SplitPart::Train);
        Vocab::new(
            idx.iter().map(|&i| self.records[i].user_id.as_str()),
            idx.iter().map(|&i| self.records[i].video_id.as_str()),
        )
    }

    pub fn train_videos(&self) -> BTreeSet<String> {
        self.in_part(SplitPart::Train)
            .into_iter()
            .map(|i| self.records[i].video_id.clone())
            .collect()
    }

    /// Records of `part` restricted to a cold/non-cold slice.
    pub fn slice(&self, part: SplitPart, slice: Slice) -> Vec<usize> {
        let train_videos = self.train_videos();
        self.in_part(part)
            .into_iter()
            .filter(|&i| {
                let cold = !train_videos.contains(&self.records[i].video_id);
                match slice {
                    Slice::All => true,
                    Slice::Cold => cold,
                    Slice::NonCold => !cold,
                }
            })
            .collect()
    }

    pub fn visual_dim(&self) -> usize {
        self.features.as_ref().map_or(0, VisualFeatureStore::dim)
    }
}

/// Samples for every record, built with the model's vocabulary.
pub fn prepare_samples(ds: &Dataset, cfg: &RunConfig, vocab: &Vocab, history_len: usize) -> Result<Vec<Sample>> {
    let grid = cfg.grid();
    let settings = QuerySettings {
        grid: &grid,
        history_len,
        history_unit: cfg.history_unit(),
        vocab,
        features: ds.features.as_ref(),
    };
    build_samples(&ds.records, &ds.records, &settings)
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

/// Builds and trains an interest model from the config.
pub fn train_interest_model(cfg: &RunConfig, ds: &Dataset) -> Result<(InterestModel, Vec<Sample>, TrainHistory)> {
    let model_cfg = cfg.model(ds.visual_dim());
    if model_cfg.use_visual && ds.features.is_none() {
        return Err(Error::invalid("the visual modality is on but the data has no feature store"));
    }
    let mut model = InterestModel::new(model_cfg, ds.train_vocab(), cfg.seed())?;
    let samples = prepare_samples(ds, cfg, &model.vocab, model.config.history_len)?;
    let tr = pick(&samples, &ds.in_part(SplitPart::Train));
    let va = pick(&samples, &ds.in_part(SplitPart::Valid));
    let history = train(&mut model, &tr, &va, ds.features.as_ref(), &cfg.train(), &cfg.loss())?;
    Ok((model, samples, history))
}

/// Test-split ranking report of a trained model.
pub fn evaluate_interest(model: &InterestModel, ds: &Dataset, samples: &[Sample], slice: Slice) -> Result<RankingReport> {
    let idx = ds.slice(SplitPart::Test, slice);
    evaluate_model(model, &pick(samples, &idx), ds.features.as_ref(), slice)
}

/// Agreement between predicted and planted interest on the test users.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterestRecovery {
    /// Spearman correlation of `p` with the planted interest.
    pub spearman_p: f64,
    /// The same for the fusion output, i.e. `p` without the position bias.
    pub spearman_o: f64,
    /// Segments compared.
    pub segments: usize,
}

impl InterestRecovery {
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("spearman_p", format!("{:.6}", self.spearman_p)),
            ("spearman_o", format!("{:.6}", self.spearman_o)),
            ("spearman_segments", self.segments.to_string()),
        ]
    }
}

/// Pools every segment of every test interaction; `None` without a
/// ground-truth file.
pub fn interest_recovery(model: &InterestModel, ds: &Dataset, samples: &[Sample]) -> Result<Option<InterestRecovery>> {
    let Some(gt) = ds.ground_truth.as_ref() else {
        return Ok(None);
    };
    let idx = ds.in_part(SplitPart::Test);
    let preds = crate::skip_eval::predict_all(model, &pick(samples, &idx), ds.features.as_ref())?;
    let pb = model.position_bias().values(&model.params);
    let (mut p_all, mut o_all, mut g_all) = (Vec::new(), Vec::new(), Vec::new());
    for (&i, p) in idx.iter().zip(&preds) {
        let r = &ds.records[i];
        let g = gt
            .get(&r.user_id, &r.video_id)
            .ok_or_else(|| Error::Data(format!("no planted interest for {}/{}", r.user_id, r.video_id)))?;
        if g.len() != p.len() {
            return Err(Error::Data(format!("planted interest of {}/{} has the wrong length", r.user_id, r.video_id)));
        }
        let bias = if model.config.positions {
            crate::model::decoder::position_bias_vector(p.len(), pb)
        } else {
            vec![0.0; p.len()]
        };
        p_all.extend_from_slice(p);
        o_all.extend(p.iter().zip(&bias).map(|(a, b)| a - b));
        g_all.extend_from_slice(g);
    }
    let corr = |x: &[f64]| crate::skip_eval::spearman(x, &g_all).unwrap_or(0.0);
    Ok(Some(InterestRecovery {
        spearman_p: corr(&p_all),
        spearman_o: corr(&o_all),
        segments: g_all.len(),
    }))
}

pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Report> {
    let ds = generate_synthetic(&cfg.synth(), &cfg.grid())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_interactions(&out_dir.join(INTERACTIONS_FILE), &ds.records)?;
    write_visual_features(&ds.features, &out_dir.join(FEATURES_FILE), &out_dir.join(FEATURE_INDEX_FILE))?;
    write_ground_truth(&out_dir.join(GROUND_TRUTH_FILE), &ds.ground_truth)?;
    write_split(&out_dir.join(SPLIT_FILE), &ds.split)?;
    let mut report = Report::new("synth", &cfg.hash());
    let (tr, va, te) = ds.split.sizes();
    report.push("interactions", ds.records.len());
    report.push("users.train", tr);
    report.push("users.valid", va);
    report.push("users.test", te);
    report.push("feature_rows", ds.features.rows());
    report.push("cold_videos", ds.cold_videos.len());
    report.write(&out_dir.join("synth_report"))?;
    Ok(report)
}

pub fn cmd_train_interest(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Report> {
    let ds = Dataset::load(data_dir, cfg)?;
    let (model, samples, history) = train_interest_model(cfg, &ds)?;
    model.save(out)?;
    let log = with_suffix(out, ".history.log");
    let mut text = history.log_lines().join("\n");
    text.push('\n');
    fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
    let mut report = Report::new("train-interest", &cfg.hash());
    report.push("epochs", history.epochs.len());
    report.push("best_epoch", history.best_epoch);
    report.push("best_valid_ndcg@5", format!("{:.6}", history.best_metric));
    for e in &history.epochs {
        report.push(format!("epoch{}.train_loss", e.epoch), format!("{:.6}", e.train_loss));
        report.push(format!("epoch{}.valid_ndcg@5", e.epoch), format!("{:.6}", e.valid_metric));
    }
    report.extend_prefixed("test", evaluate_interest(&model, &ds, &samples, Slice::All)?.fields());
    if let Some(rec) = interest_recovery(&model, &ds, &samples)? {
        report.extend_prefixed("test", rec.fields());
    }
    report.write(&with_suffix(out, ".report"))?;
    Ok(report)
}

/// What `eval-skip` scores.
#[derive(Debug, Clone, PartialEq)]
pub enum SkipTarget {
    Checkpoint(PathBuf),
    Baseline(BaselineKind),
}

impl SkipTarget {
    /// A baseline name, otherwise a checkpoint path.
    pub fn parse(s: &str) -> Self {
        BaselineKind::parse(s).map_or_else(|| SkipTarget::Checkpoint(PathBuf::from(s)), SkipTarget::Baseline)
    }
}

/// Ranks of the skip segment under a baseline on the given records.
pub fn baseline_ranks(kind: BaselineKind, ds: &Dataset, cfg: &RunConfig, eval_idx: &[usize]) -> Result<Vec<usize>> {
    let grid = cfg.grid();
    let labelled = |i: usize| -> Result<Option<(usize, usize)>> {
        let r = &ds.records[i];
        let n = crate::data::num_segments(r.duration_s, &grid)?;
        Ok(derive_skip_label(r, &grid)?.skip_segment().map(|y| (n, y)))
    };
    let mut eval: Vec<(usize, usize, usize)> = Vec::new();
    for &i in eval_idx {
        if let Some((n, y)) = labelled(i)? {
            eval.push((i, n, y));
        }
    }
    if kind == BaselineKind::Random {
        let cases: Vec<(usize, usize)> = eval.iter().map(|&(_, n, y)| (n, y)).collect();
        return Ok(random_ranks(&cases, cfg.seed()));
    }
    let mut fit = Vec::new();
    for part in [SplitPart::Train, SplitPart::Valid] {
        for i in ds.in_part(part) {
            if let Some((n, y)) = labelled(i)? {
                fit.push((&ds.records[i], n, y));
            }
        }
    }
    let model = PositionModel::fit(kind, fit)?;
    Ok(eval
        .iter()
        .map(|&(i, n, y)| {
            let r = &ds.records[i];
            rank_of(&model.scores(&r.user_id, &r.video_id, n), y)
        })
        .collect())
}

pub fn cmd_eval_skip(cfg: &RunConfig, target: &SkipTarget, data_dir: &Path, slice: Slice) -> Result<Report> {
    let ds = Dataset::load(data_dir, cfg)?;
    let mut report = Report::new("eval-skip", &cfg.hash());
    let ranking = match target {
        SkipTarget::Baseline(kind) => {
            report.push("target", kind.as_str());
            let idx = ds.slice(SplitPart::Test, slice);
            RankingReport::from_ranks(&baseline_ranks(*kind, &ds, cfg, &idx)?, slice)?
        }
        SkipTarget::Checkpoint(path) => {
            report.push("target", path.display());
            let model = InterestModel::load(path)?;
            let samples = prepare_samples(&ds, cfg, &model.vocab, model.config.history_len)?;
            evaluate_interest(&model, &ds, &samples, slice)?
        }
    };
    for (k, v) in ranking.fields() {
        report.push(k, v);
    }
    Ok(report)
}

/// Where frozen interest scores come from in the recommendation task.
#[derive(Debug, Clone, PartialEq)]
pub enum InterestSource {
    /// The planted interest of a synthetic dataset.
    Oracle,
    Checkpoint(PathBuf),
}

impl InterestSource {
    pub fn parse(s: &str) -> Self {
        if s == "oracle" {
            InterestSource::Oracle
        } else {
            InterestSource::Checkpoint(PathBuf::from(s))
        }
    }

    fn describe(&self) -> String {
        match self {
            InterestSource::Oracle => "oracle".into(),
            InterestSource::Checkpoint(p) => p.display().to_string(),
        }
    }
}

/// Interest scores for every record, in record order.
pub fn interest_scores(source: &InterestSource, ds: &Dataset, cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    match source {
        InterestSource::Oracle => {
            let gt = ds
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::invalid("oracle interest needs a ground-truth file"))?;
            ds.records
                .iter()
                .map(|r| {
                    gt.get(&r.user_id, &r.video_id).map(<[f64]>::to_vec).ok_or_else(|| {
                        Error::Data(format!("no planted interest for {}/{}", r.user_id, r.video_id))
                    })
                })
                .collect()
        }
        InterestSource::Checkpoint(path) => {
            let model = InterestModel::load(path)?;
            let samples = prepare_samples(ds, cfg, &model.vocab, model.config.history_len)?;
            let all: Vec<&Sample> = samples.iter().collect();
            crate::skip_eval::predict_all(&model, &all, ds.features.as_ref())
        }
    }
}

/// Effective-view examples for every record; buckets are fitted on the
/// training split.
pub fn prepare_ctr(
    cfg: &RunConfig,
    ds: &Dataset,
    source: &InterestSource,
    vocab: &Vocab,
    buckets: &crate::data::DurationBuckets,
) -> Result<Vec<CtrExample>> {
    let interest = interest_scores(source, ds, cfg)?;
    build_ctr_examples(&ds.records, &interest, &cfg.grid(), buckets, vocab, ds.features.as_ref())
}

fn fit_buckets(cfg: &RunConfig, ds: &Dataset) -> Result<crate::data::DurationBuckets> {
    let train: Vec<InteractionRecord> = ds
        .in_part(SplitPart::Train)
        .into_iter()
        .map(|i| ds.records[i].clone())
        .collect();
    compute_duration_buckets(&train, cfg.get_usize("rec.n_buckets"))
}

/// Trains a recommendation backbone with the configured aggregation mode.
pub fn train_rec_model(
    cfg: &RunConfig,
    ds: &Dataset,
    source: &InterestSource,
) -> Result<(SegRecModel, Vec<CtrExample>, TrainHistory)> {
    let rec_cfg = cfg.rec(ds.visual_dim());
    if rec_cfg.use_visual && ds.features.is_none() {
        return Err(Error::invalid("rec.use_visual is on but the data has no feature store"));
    }
    let buckets = fit_buckets(cfg, ds)?;
    let vocab = ds.train_vocab();
    let examples = prepare_ctr(cfg, ds, source, &vocab, &buckets)?;
    let mut model = SegRecModel::new(rec_cfg, vocab, buckets, cfg.seed())?;
    let tr: Vec<&CtrExample> = ds.in_part(SplitPart::Train).iter().map(|&i| &examples[i]).collect();
    let va: Vec<&CtrExample> = ds.in_part(SplitPart::Valid).iter().map(|&i| &examples[i]).collect();
    let history = train_segrec(&mut model, &tr, &va, ds.features.as_ref(), &cfg.rec_train())?;
    Ok((model, examples, history))
}

/// CTR report of `part` plus the largest deviation of the aggregation
/// weights from summing to one and the range of predictions.
pub fn evaluate_rec(
    model: &SegRecModel,
    ds: &Dataset,
    examples: &[CtrExample],
    part: SplitPart,
) -> Result<(CtrReport, f64, (f64, f64))> {
    let items: Vec<&CtrExample> = ds.in_part(part).iter().map(|&i| &examples[i]).collect();
    let preds = model.predict_all(&items, ds.features.as_ref())?;
    let scores: Vec<f64> = preds.iter().map(|p| p.y_hat).collect();
    let labels: Vec<u8> = items.iter().map(|e| e.label).collect();
    let weight_err = preds
        .iter()
        .map(|p| (p.weights.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((crate::segrec::ctr_metrics(&scores, &labels)?, weight_err, (lo, hi)))
}

fn push_rec_eval(report: &mut Report, model: &SegRecModel, ds: &Dataset, examples: &[CtrExample]) -> Result<()> {
    for part in [SplitPart::Valid, SplitPart::Test] {
        let (m, werr, (lo, hi)) = evaluate_rec(model, ds, examples, part)?;
        let p = part.as_str();
        report.extend_prefixed(p, m.fields());
        report.push(format!("{p}.max_weight_sum_error"), format!("{werr:.3e}"));
        report.push(format!("{p}.min_prediction"), format!("{lo:.6}"));
        report.push(format!("{p}.max_prediction"), format!("{hi:.6}"));
    }
    Ok(())
}

pub fn cmd_train_rec(cfg: &RunConfig, source: &InterestSource, data_dir: &Path, out: &Path) -> Result<Report> {
    let ds = Dataset::load(data_dir, cfg)?;
    let (model, examples, history) = train_rec_model(cfg, &ds, source)?;
    model.save(out)?;
    let log = with_suffix(out, ".history.log");
    let mut text = history.log_lines().join("\n");
    text.push('\n');
    fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
    let mut report = Report::new("train-rec", &cfg.hash());
    report.push("mode", model.config.mode.as_str());
    report.push("interest", source.describe());
    report.push("epochs", history.epochs.len());
    report.push("best_epoch", history.best_epoch);
    report.push("best_valid_auc", format!("{:.6}", history.best_metric));
    push_rec_eval(&mut report, &model, &ds, &examples)?;
    report.write(&with_suffix(out, ".report"))?;
    Ok(report)
}

pub fn cmd_eval_rec(
    cfg: &RunConfig,
    source: &InterestSource,
    rec_checkpoint: &Path,
    data_dir: &Path,
    mode: Option<AggregationMode>,
) -> Result<Report> {
    let ds = Dataset::load(data_dir, cfg)?;
    let model = SegRecModel::load(rec_checkpoint)?;
    if let Some(m) = mode {
        if m != model.config.mode {
            return Err(Error::invalid(format!(
                "checkpoint was trained with mode {}, not {}",
                model.config.mode.as_str(),
                m.as_str()
            )));
        }
    }
    let examples = prepare_ctr(cfg, &ds, source, &model.vocab, &model.buckets)?;
    let mut report = Report::new("eval-rec", &cfg.hash());
    report.push("mode", model.config.mode.as_str());
    report.push("interest", source.describe());
    push_rec_eval(&mut report, &model, &ds, &examples)?;
    Ok(report)
}

pub fn cmd_predict_heatmap(
    cfg: &RunConfig,
    checkpoint: &Path,
    user_id: &str,
    video_id: &str,
    data_dir: &Path,
) -> Result<HeatmapRecord> {
    let ds = Dataset::load(data_dir, cfg)?;
    let model = InterestModel::load(checkpoint)?;
    let record = ds
        .records
        .iter()
        .find(|r| r.user_id == user_id && r.video_id == video_id)
        .ok_or_else(|| Error::invalid(format!("no interaction of user {user_id} with video {video_id}")))?;
    let grid = cfg.grid();
    let logs = user_logs(&ds.records);
    let settings = QuerySettings {
        grid: &grid,
        history_len: model.config.history_len,
        history_unit: cfg.history_unit(),
        vocab: &model.vocab,
        features: ds.features.as_ref(),
    };
    let query = build_query(record, &logs[user_id], &settings)?;
    let p = model.predict(&query, ds.features.as_ref())?;
    Ok(HeatmapRecord::new(user_id, video_id, p, Some(derive_skip_label(record, &grid)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Attention,
    Position,
    LossBce,
    ModalityId,
    ModalityVisual,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(Self::Attention),
            "position" => Some(Self::Position),
            "loss-bce" => Some(Self::LossBce),
            "modality-id" => Some(Self::ModalityId),
            "modality-visual" => Some(Self::ModalityVisual),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Position => "position",
            Self::LossBce => "loss-bce",
            Self::ModalityId => "modality-id",
            Self::ModalityVisual => "modality-visual",
        }
    }

    /// The config with this component removed.
    pub fn apply(self, cfg: &RunConfig) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            Self::Attention => c.set("model.attention", "false")?,
            Self::Position => c.set("model.positions", "false")?,
            Self::LossBce => c.set("loss.objective", "bce")?,
            Self::ModalityId => c.set("model.use_id", "false")?,
            Self::ModalityVisual => c.set("model.use_visual", "false")?,
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, drop: Ablation) -> Result<Report> {
    let ds = Dataset::load(data_dir, cfg)?;
    let variant_cfg = drop.apply(cfg)?;
    let mut report = Report::new("ablate", &cfg.hash());
    report.push("drop", drop.as_str());
    report.push("variant_config_hash", variant_cfg.hash());
    let mut ndcg = Vec::new();
    for (name, c) in [("full", cfg), ("variant", &variant_cfg)] {
        let (model, samples, _) = train_interest_model(c, &ds)?;
        for slice in [Slice::All, Slice::Cold] {
            let r = evaluate_interest(&model, &ds, &samples, slice)?;
            if slice == Slice::All {
                ndcg.push(r.ndcg5);
            }
            report.extend_prefixed(&format!("{name}.{}", slice.as_str()), r.fields());
        }
    }
    report.push("delta.ndcg@5", format!("{:.6}", ndcg[1] - ndcg[0]));
    Ok(report)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
