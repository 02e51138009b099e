use ndarray::Array2;
use rand::Rng;

use super::Modality;
use crate::nn::{init_normal, init_uniform_fan_in, Mat, ParamId, ParamStore, Tape, Var};

pub const EMBED_INIT_STD: f64 = 0.1;

/// User-side and target-video-side matrices of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalBundle {
    pub modality: Modality,
    /// `M × d`
    pub u: Mat,
    /// `N × d`
    pub v: Mat,
    /// 0-based target segments whose features were missing.
    pub missing_targets: Vec<usize>,
}

/// A bundle recorded on a tape.
#[derive(Debug, Clone)]
pub struct BundleVars {
    pub modality: Modality,
    pub u: Var,
    pub v: Var,
    pub missing_targets: Vec<usize>,
}

impl BundleVars {
    pub fn to_values(&self, tape: &Tape) -> ModalBundle {
        ModalBundle {
            modality: self.modality,
            u: tape.value(self.u).clone(),
            v: tape.value(self.v).clone(),
            missing_targets: self.missing_targets.clone(),
        }
    }
}

/// Embedding tables of the ID modality. Row 0 of the user and video tables
/// is the out-of-vocabulary bucket.
#[derive(Debug, Clone)]
pub struct IdEmbeddings {
    pub user_table: ParamId,
    pub video_table: ParamId,
    pub segment_position_table: ParamId,
    half: usize,
}

impl IdEmbeddings {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        n_users: usize,
        n_videos: usize,
        max_segments: usize,
        d: usize,
    ) -> Self {
        assert!(d % 2 == 0, "embedding width must be even");
        let half = d / 2;
        Self {
            user_table: store.add("id.user_table", init_normal(rng, n_users, d, EMBED_INIT_STD)),
            video_table: store.add(
                "id.video_table",
                init_normal(rng, n_videos, half, EMBED_INIT_STD),
            ),
            segment_position_table: store.add(
                "id.segment_position_table",
                init_normal(rng, max_segments, half, EMBED_INIT_STD),
            ),
            half,
        }
    }

    /// `U` is the user row; row `i` of `V` is the video embedding next to
    /// the embedding of position `i`. Without positions that half is zero.
    pub fn represent(
        &self,
        tape: &mut Tape,
        user: usize,
        video: usize,
        n: usize,
        with_positions: bool,
    ) -> BundleVars {
        let u = tape.gather(self.user_table, &[user]);
        let vid = tape.gather(self.video_table, &vec![video; n]);
        let pos = if with_positions {
            let rows: Vec<usize> = (0..n).collect();
            tape.gather(self.segment_position_table, &rows)
        } else {
            tape.input(Array2::zeros((n, self.half)))
        };
        let v = tape.concat_cols(vid, pos);
        BundleVars {
            modality: Modality::Id,
            u,
            v,
            missing_targets: Vec::new(),
        }
    }
}

/// Per-segment visual features of a query, already looked up.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    /// `M × D_vis`, zero rows where missing; may have no rows.
    pub history: Mat,
    pub history_missing: Vec<bool>,
    /// `N × D_vis`
    pub target: Mat,
    pub target_missing: Vec<bool>,
}

/// Linear map from feature space to the model width, shared by the user and
/// video sides, plus the learned row used when a user has no history.
#[derive(Debug, Clone)]
pub struct VisualProjector {
    pub weight: ParamId,
    pub bias: ParamId,
    pub no_history: ParamId,
}

impl VisualProjector {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, feature_dim: usize, d: usize) -> Self {
        Self {
            weight: store.add("visual.proj.weight", init_uniform_fan_in(rng, feature_dim, d)),
            bias: store.add("visual.proj.bias", Array2::zeros((1, d))),
            no_history: store.add("visual.no_history", init_normal(rng, 1, d, EMBED_INIT_STD)),
        }
    }

    fn project(&self, tape: &mut Tape, x: &Mat, missing: &[bool]) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xin = tape.input(x.clone());
        let h = tape.matmul(xin, w);
        let h = tape.add_row(h, b);
        if missing.iter().any(|&m| m) {
            let mut mask = Array2::ones((x.nrows(), 1));
            for (i, &m) in missing.iter().enumerate() {
                if m {
                    mask[[i, 0]] = 0.0;
                }
            }
            let d = tape.value(h).ncols();
            let mask = mask
                .broadcast((x.nrows(), d))
                .expect("mask broadcast")
                .to_owned();
            tape.mul_const(h, mask)
        } else {
            h
        }
    }

    pub fn represent(&self, tape: &mut Tape, input: &VisualInput) -> BundleVars {
        let u = if input.history.nrows() == 0 {
            tape.param(self.no_history)
        } else {
            self.project(tape, &input.history, &input.history_missing)
        };
        let v = self.project(tape, &input.target, &input.target_missing);
        BundleVars {
            modality: Modality::Visual,
            u,
            v,
            missing_targets: input
                .target_missing
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn id_setup(d: usize) -> (ParamStore, IdEmbeddings) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = IdEmbeddings::init(&mut store, &mut rng, 5, 7, 40, d);
        (store, emb)
    }

    #[test]
    fn id_shapes_and_halves() {
        let (store, emb) = id_setup(32);
        let mut tape = Tape::new(&store);
        let b = emb.represent(&mut tape, 2, 3, 4, true).to_values(&tape);
        assert_eq!(b.u.dim(), (1, 32));
        assert_eq!(b.v.dim(), (4, 32));
        // same video half on every row, different position halves
        for i in 1..4 {
            assert_eq!(b.v.slice(s![i, ..16]), b.v.slice(s![0, ..16]));
            assert_ne!(b.v.slice(s![i, 16..]), b.v.slice(s![0, 16..]));
        }
    }

    #[test]
    fn oov_video_shares_bucket_row() {
        let (store, emb) = id_setup(8);
        let mut tape = Tape::new(&store);
        let b = emb.represent(&mut tape, 0, 0, 3, true).to_values(&tape);
        let oov = store.get(emb.video_table).row(0).to_owned();
        for i in 0..3 {
            assert_eq!(b.v.slice(s![i, ..4]), oov);
        }
    }

    #[test]
    fn user_change_moves_only_u() {
        let (store, emb) = id_setup(8);
        let mut tape = Tape::new(&store);
        let a = emb.represent(&mut tape, 1, 3, 4, true).to_values(&tape);
        let b = emb.represent(&mut tape, 2, 3, 4, true).to_values(&tape);
        assert_ne!(a.u, b.u);
        assert_eq!(a.v, b.v);
    }

    fn visual_setup(feature_dim: usize, d: usize) -> (ParamStore, VisualProjector) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = VisualProjector::init(&mut store, &mut rng, feature_dim, d);
        (store, proj)
    }

    fn input(m: usize, n: usize, dim: usize) -> VisualInput {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        VisualInput {
            history: init_normal(&mut rng, m, dim, 1.0),
            history_missing: vec![false; m],
            target: init_normal(&mut rng, n, dim, 1.0),
            target_missing: vec![false; n],
        }
    }

    #[test]
    fn visual_shapes() {
        let (store, proj) = visual_setup(12, 64);
        let mut tape = Tape::new(&store);
        let b = proj.represent(&mut tape, &input(20, 8, 12)).to_values(&tape);
        assert_eq!(b.u.dim(), (20, 64));
        assert_eq!(b.v.dim(), (8, 64));
    }

    #[test]
    fn zero_projector_gives_zero_bundle() {
        let (mut store, proj) = visual_setup(12, 16);
        store.get_mut(proj.weight).fill(0.0);
        let mut tape = Tape::new(&store);
        let b = proj.represent(&mut tape, &input(5, 3, 12)).to_values(&tape);
        assert!(b.u.iter().chain(b.v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn missing_target_is_zero_and_flagged() {
        let (mut store, proj) = visual_setup(6, 8);
        store.get_mut(proj.bias).fill(0.5);
        let mut inp = input(4, 3, 6);
        inp.target_missing[1] = true;
        inp.target.row_mut(1).fill(0.0);
        let mut tape = Tape::new(&store);
        let b = proj.represent(&mut tape, &inp).to_values(&tape);
        assert!(b.v.row(1).iter().all(|&x| x == 0.0));
        assert!(b.v.row(0).iter().any(|&x| x != 0.0));
        assert_eq!(b.missing_targets, vec![1]);
    }

    #[test]
    fn empty_history_uses_learned_row() {
        let (store, proj) = visual_setup(6, 8);
        let mut inp = input(0, 3, 6);
        inp.history = Array2::zeros((0, 6));
        let mut tape = Tape::new(&store);
        let b = proj.represent(&mut tape, &inp).to_values(&tape);
        assert_eq!(&b.u, store.get(proj.no_history));
    }

    #[test]
    fn projection_is_homogeneous_without_bias() {
        let (store, proj) = visual_setup(6, 8);
        let inp = input(4, 3, 6);
        let mut scaled = inp.clone();
        scaled.history *= 2.5;
        scaled.target *= 2.5;
        let mut tape = Tape::new(&store);
        let a = proj.represent(&mut tape, &inp).to_values(&tape);
        let b = proj.represent(&mut tape, &scaled).to_values(&tape);
        let diff = (&b.v - &(&a.v * 2.5)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}
