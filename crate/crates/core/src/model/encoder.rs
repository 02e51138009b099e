//! Per-modality user-video cross-attention stack.
//!
//! Each layer scores every target segment against both the user rows and
//! the other target segments, mixes the transformed rows with those
//! weights, and finishes with an output feed-forward map, a residual
//! connection and layer normalization. The user path is updated the same
//! way with the roles swapped.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::representation::{BundleVars, EMBED_INIT_STD};
use crate::nn::{init_normal, init_uniform_fan_in, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub score_dim: usize,
    /// Hidden width of every feed-forward map; 0 means twice the model width.
    pub ffn_hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            score_dim: 8,
            ffn_hidden: 0,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn hidden(&self, d: usize) -> usize {
        if self.ffn_hidden == 0 {
            2 * d
        } else {
            self.ffn_hidden
        }
    }
}

/// Inverted dropout driven by an optional generator; without one (or at
/// rate 0) it is the identity.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn new(rate: f64, rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Self { rate, rng }
    }

    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let dim = tape.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(dim, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

/// `relu(x·W1 + b1)·W2 + b2`
#[derive(Debug, Clone)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), init_uniform_fan_in(rng, d_in, hidden)),
            b1: store.add(format!("{prefix}.b1"), Array2::zeros((1, hidden))),
            w2: store.add(format!("{prefix}.w2"), init_uniform_fan_in(rng, hidden, d_out)),
            b2: store.add(format!("{prefix}.b2"), Array2::zeros((1, d_out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: &mut Dropout) -> Var {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = dropout.apply(tape, h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttnLayer {
    pub ffn_v: Ffn,
    pub ffn_u: Ffn,
    pub ffn_out: Ffn,
    pub ln_v_gain: ParamId,
    pub ln_v_bias: ParamId,
    pub ln_u_gain: ParamId,
    pub ln_u_bias: ParamId,
}

/// Intermediate values of one attention block, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    /// `N × (M + N)`, user columns first. `None` when attention is disabled.
    pub v_weights: Option<Var>,
    /// `M × (N + M)`, video columns first.
    pub u_weights: Option<Var>,
    pub v_mixed: Var,
    pub u_mixed: Var,
}

impl CrossAttnLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        let ffn_v = Ffn::init(store, rng, &format!("{prefix}.ffn_v"), d, hidden, d);
        let ffn_u = Ffn::init(store, rng, &format!("{prefix}.ffn_u"), d, hidden, d);
        let ffn_out = Ffn::init(store, rng, &format!("{prefix}.ffn_out"), d, hidden, d);
        Self {
            ffn_v,
            ffn_u,
            ffn_out,
            ln_v_gain: store.add(format!("{prefix}.ln_v.gain"), Array2::ones((1, d))),
            ln_v_bias: store.add(format!("{prefix}.ln_v.bias"), Array2::zeros((1, d))),
            ln_u_gain: store.add(format!("{prefix}.ln_u.gain"), Array2::ones((1, d))),
            ln_u_bias: store.add(format!("{prefix}.ln_u.bias"), Array2::zeros((1, d))),
        }
    }

    /// One block: `(U, V) -> (U_next, V_next)`.
    ///
    /// With `attention` off the mixing step is replaced by adding the mean of
    /// the other side's transformed rows, which keeps user information
    /// flowing without learned weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        u: Var,
        v: Var,
        attention: bool,
        dropout: &mut Dropout,
    ) -> (Var, Var, AttentionTrace) {
        let d = tape.value(v).ncols();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let fv = self.ffn_v.forward(tape, v, dropout);
        let fu = self.ffn_u.forward(tape, u, dropout);

        let (v_mixed, u_mixed, v_weights, u_weights) = if attention {
            let a_vu = tape.matmul_nt(fv, fu);
            let a_vu = tape.scale(a_vu, inv_sqrt_d);
            let a_vv = tape.matmul_nt(fv, fv);
            let a_vv = tape.scale(a_vv, inv_sqrt_d);
            let a_uv = tape.transpose(a_vu);
            let a_uu = tape.matmul_nt(fu, fu);
            let a_uu = tape.scale(a_uu, inv_sqrt_d);

            let scores_v = tape.concat_cols(a_vu, a_vv);
            let w_v = tape.softmax_rows(scores_v);
            let values_v = tape.concat_rows(fu, fv);
            let v_mixed = tape.matmul(w_v, values_v);

            let scores_u = tape.concat_cols(a_uv, a_uu);
            let w_u = tape.softmax_rows(scores_u);
            let values_u = tape.concat_rows(fv, fu);
            let u_mixed = tape.matmul(w_u, values_u);
            (v_mixed, u_mixed, Some(w_v), Some(w_u))
        } else {
            let mean_u = tape.mean_rows(fu);
            let mean_v = tape.mean_rows(fv);
            let v_mixed = tape.add_row(fv, mean_u);
            let u_mixed = tape.add_row(fu, mean_v);
            (v_mixed, u_mixed, None, None)
        };
        let v_mixed = dropout.apply(tape, v_mixed);
        let u_mixed = dropout.apply(tape, u_mixed);

        let v_out = self.ffn_out.forward(tape, v_mixed, dropout);
        let v_res = tape.add(v, v_out);
        let g = tape.param(self.ln_v_gain);
        let b = tape.param(self.ln_v_bias);
        let v_next = tape.layer_norm(v_res, g, b);

        let u_out = self.ffn_out.forward(tape, u_mixed, dropout);
        let u_res = tape.add(u, u_out);
        let g = tape.param(self.ln_u_gain);
        let b = tape.param(self.ln_u_bias);
        let u_next = tape.layer_norm(u_res, g, b);

        (
            u_next,
            v_next,
            AttentionTrace {
                v_weights,
                u_weights,
                v_mixed,
                u_mixed,
            },
        )
    }
}

/// Row-wise `d -> d/2 -> k` MLP.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ScoreHead {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, k: usize) -> Self {
        let mid = (d / 2).max(1);
        Self {
            w1: store.add(format!("{prefix}.w1"), init_uniform_fan_in(rng, d, mid)),
            b1: store.add(format!("{prefix}.b1"), Array2::zeros((1, mid))),
            w2: store.add(format!("{prefix}.w2"), init_uniform_fan_in(rng, mid, k)),
            b2: store.add(format!("{prefix}.b2"), Array2::zeros((1, k))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, v: Var) -> Var {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let h = tape.matmul(v, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let x = tape.matmul(h, w2);
        tape.add_row(x, b2)
    }
}

/// Switches that remove parts of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSwitches {
    pub attention: bool,
    /// Segment-order embeddings on the video side.
    pub segment_positions: bool,
}

impl Default for EncoderSwitches {
    fn default() -> Self {
        Self {
            attention: true,
            segment_positions: true,
        }
    }
}

/// Encoder of one modality: sequence positions, `L` blocks, score head.
#[derive(Debug, Clone)]
pub struct ModalEncoder {
    /// Row `r` is added to the `r`-th most recent user row.
    pub user_positions: ParamId,
    pub segment_positions: ParamId,
    pub layers: Vec<CrossAttnLayer>,
    pub head: ScoreHead,
}

impl ModalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &EncoderConfig,
        d: usize,
        max_user_rows: usize,
        max_segments: usize,
    ) -> Self {
        let user_positions = store.add(
            format!("{prefix}.user_positions"),
            init_normal(rng, max_user_rows.max(1), d, EMBED_INIT_STD),
        );
        let segment_positions = store.add(
            format!("{prefix}.segment_positions"),
            init_normal(rng, max_segments, d, EMBED_INIT_STD),
        );
        let hidden = cfg.hidden(d);
        let layers = (0..cfg.layers)
            .map(|l| CrossAttnLayer::init(store, rng, &format!("{prefix}.layer{l}"), d, hidden))
            .collect();
        let head = ScoreHead::init(store, rng, &format!("{prefix}.head"), d, cfg.score_dim);
        Self {
            user_positions,
            segment_positions,
            layers,
            head,
        }
    }

    /// Adds learned order embeddings to both sides; shapes are unchanged.
    pub fn encode_sequence_positions(
        &self,
        tape: &mut Tape,
        bundle: &BundleVars,
        segment_positions: bool,
    ) -> (Var, Var) {
        let m = tape.value(bundle.u).nrows();
        let cap = tape.params().get(self.user_positions).nrows();
        // most recent row gets position 0; rows beyond the table share the last slot
        let rows: Vec<usize> = (0..m).map(|r| (m - 1 - r).min(cap - 1)).collect();
        let up = tape.gather(self.user_positions, &rows);
        let u = tape.add(bundle.u, up);
        let v = if segment_positions {
            let n = tape.value(bundle.v).nrows();
            let rows: Vec<usize> = (0..n).collect();
            let vp = tape.gather(self.segment_positions, &rows);
            tape.add(bundle.v, vp)
        } else {
            bundle.v
        };
        (u, v)
    }

    /// Final video-path representation `V_L` (`N × d`).
    pub fn encode(
        &self,
        tape: &mut Tape,
        bundle: &BundleVars,
        switches: EncoderSwitches,
        dropout: &mut Dropout,
    ) -> Var {
        let (mut u, mut v) = self.encode_sequence_positions(tape, bundle, switches.segment_positions);
        for layer in &self.layers {
            let (un, vn, _) = layer.forward(tape, u, v, switches.attention, dropout);
            u = un;
            v = vn;
        }
        v
    }

    /// Per-segment score features `x` (`N × k`).
    pub fn score(
        &self,
        tape: &mut Tape,
        bundle: &BundleVars,
        switches: EncoderSwitches,
        dropout: &mut Dropout,
    ) -> Var {
        let v = self.encode(tape, bundle, switches, dropout);
        self.head.forward(tape, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modality;
    use crate::nn::Mat;
    use ndarray::{array, Axis};
    use rand::SeedableRng;

    fn random_bundle(tape: &mut Tape, m: usize, n: usize, d: usize, seed: u64) -> BundleVars {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = tape.input(init_normal(&mut rng, m, d, 1.0));
        let v = tape.input(init_normal(&mut rng, n, d, 1.0));
        BundleVars {
            modality: Modality::Visual,
            u,
            v,
            missing_targets: vec![],
        }
    }

    fn encoder(d: usize, layers: usize, k: usize) -> (ParamStore, ModalEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig {
            layers,
            score_dim: k,
            ffn_hidden: 0,
            dropout: 0.0,
        };
        let enc = ModalEncoder::init(&mut store, &mut rng, "enc", &cfg, d, 20, 40);
        (store, enc)
    }

    #[test]
    fn attention_shapes_and_rows() {
        let (store, enc) = encoder(16, 1, 8);
        let mut tape = Tape::new(&store);
        let b = random_bundle(&mut tape, 20, 8, 16, 1);
        let (u, v, trace) =
            enc.layers[0].forward(&mut tape, b.u, b.v, true, &mut Dropout::disabled());
        let wv = tape.value(trace.v_weights.unwrap());
        let wu = tape.value(trace.u_weights.unwrap());
        assert_eq!(wv.dim(), (8, 28));
        assert_eq!(wu.dim(), (20, 28));
        assert_eq!(tape.value(trace.v_mixed).dim(), (8, 16));
        assert_eq!(tape.value(v).dim(), (8, 16));
        assert_eq!(tape.value(u).dim(), (20, 16));
        for row in wv.rows().into_iter().chain(wu.rows()) {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    /// Identity score maps (ReLU is the identity on one-hot rows) and a zero
    /// output map make the weights checkable by hand.
    #[test]
    fn hand_computed_weights_on_one_hot_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = CrossAttnLayer::init(&mut store, &mut rng, "l", 2, 2);
        let eye: Mat = array![[1.0, 0.0], [0.0, 1.0]];
        for ffn in [&layer.ffn_v, &layer.ffn_u] {
            store.get_mut(ffn.w1).assign(&eye);
            store.get_mut(ffn.w2).assign(&eye);
        }
        store.get_mut(layer.ffn_out.w2).fill(0.0);

        let mut tape = Tape::new(&store);
        let u = tape.input(eye.clone());
        let v = tape.input(eye.clone());
        let (_, v_next, trace) = layer.forward(&mut tape, u, v, true, &mut Dropout::disabled());

        // scores of row 0: [1/sqrt2, 0, 1/sqrt2, 0] -> weights [a, b, a, b]
        // with a = e^{1/sqrt2} / (2 e^{1/sqrt2} + 2), b = 1 / (2 e^{1/sqrt2} + 2)
        let a = 0.334_880_774_663_328_4;
        let b = 0.165_119_225_336_671_6;
        let wv = tape.value(trace.v_weights.unwrap());
        let expected_w = array![[a, b, a, b], [b, a, b, a]];
        assert!((wv - &expected_w).mapv(f64::abs).sum() < 1e-6 * 8.0);
        let vm = tape.value(trace.v_mixed);
        let expected_v = array![[2.0 * a, 2.0 * b], [2.0 * b, 2.0 * a]];
        assert!((vm - &expected_v).mapv(f64::abs).sum() < 1e-6 * 4.0);
        // zero output map: the block reduces to layer norm of the input
        let ln = 1.0 / (0.25f64 + 1e-5).sqrt() * 0.5;
        let expected_next = array![[ln, -ln], [-ln, ln]];
        assert!((tape.value(v_next) - &expected_next).mapv(f64::abs).sum() < 1e-9);
    }

    #[test]
    fn zero_position_tables_are_identity() {
        let (mut store, enc) = encoder(8, 1, 4);
        store.get_mut(enc.user_positions).fill(0.0);
        store.get_mut(enc.segment_positions).fill(0.0);
        let mut tape = Tape::new(&store);
        let b = random_bundle(&mut tape, 5, 3, 8, 2);
        let (u, v) = enc.encode_sequence_positions(&mut tape, &b, true);
        assert_eq!(tape.value(u), tape.value(b.u));
        assert_eq!(tape.value(v), tape.value(b.v));
    }

    #[test]
    fn sequence_positions_are_order_sensitive() {
        let (store, enc) = encoder(8, 1, 4);
        let mut tape = Tape::new(&store);
        let b = random_bundle(&mut tape, 5, 3, 8, 3);
        let (u, _) = enc.encode_sequence_positions(&mut tape, &b, true);
        let encoded_then_permuted = tape.value(u).select(Axis(0), &[1, 0, 2, 3, 4]);
        let permuted = tape.value(b.u).select(Axis(0), &[1, 0, 2, 3, 4]);
        let pu = tape.input(permuted);
        let pb = BundleVars { u: pu, ..b.clone() };
        let (u2, _) = enc.encode_sequence_positions(&mut tape, &pb, true);
        assert_ne!(tape.value(u2), &encoded_then_permuted);
    }

    #[test]
    fn zero_layers_return_position_encoded_v() {
        let (store, enc) = encoder(8, 0, 4);
        let mut tape = Tape::new(&store);
        let b = random_bundle(&mut tape, 4, 3, 8, 4);
        let (_, v_enc) = enc.encode_sequence_positions(&mut tape, &b, true);
        let expected = tape.value(v_enc).clone();
        let v = enc.encode(&mut tape, &b, EncoderSwitches::default(), &mut Dropout::disabled());
        assert_eq!(tape.value(v), &expected);
    }

    #[test]
    fn large_inputs_stay_finite() {
        let (store, enc) = encoder(16, 2, 8);
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = tape.input(init_normal(&mut rng, 20, 16, 100.0));
        let v = tape.input(init_normal(&mut rng, 10, 16, 100.0));
        let b = BundleVars {
            modality: Modality::Visual,
            u,
            v,
            missing_targets: vec![],
        };
        let x = enc.score(&mut tape, &b, EncoderSwitches::default(), &mut Dropout::disabled());
        assert!(tape.value(x).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn deterministic_without_dropout() {
        let (store, enc) = encoder(8, 2, 4);
        let mut tape = Tape::new(&store);
        let b = random_bundle(&mut tape, 6, 4, 8, 5);
        let x1 = enc.score(&mut tape, &b, EncoderSwitches::default(), &mut Dropout::disabled());
        let x2 = enc.score(&mut tape, &b, EncoderSwitches::default(), &mut Dropout::disabled());
        assert_eq!(tape.value(x1), tape.value(x2));
    }

    #[test]
    fn segment_permutation_equivariance() {
        let (store, enc) = encoder(8, 2, 4);
        let mut tape = Tape::new(&store);
        let b = random_bundle(&mut tape, 6, 5, 8, 6);
        let switches = EncoderSwitches {
            attention: true,
            segment_positions: false,
        };
        let perm = [3, 0, 4, 1, 2];
        let x = enc.score(&mut tape, &b, switches, &mut Dropout::disabled());
        let expected = tape.value(x).select(Axis(0), &perm);
        let pv = tape.value(b.v).select(Axis(0), &perm);
        let pv = tape.input(pv);
        let pb = BundleVars { v: pv, ..b.clone() };
        let px = enc.score(&mut tape, &pb, switches, &mut Dropout::disabled());
        assert!((tape.value(px) - &expected).mapv(f64::abs).sum() < 1e-10);
    }

    #[test]
    fn score_head_properties() {
        let (mut store, enc) = encoder(64, 1, 8);
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = tape.input(init_normal(&mut rng, 8, 64, 1.0));
        let x = enc.head.forward(&mut tape, v);
        assert_eq!(tape.value(x).dim(), (8, 8));
        let perm = [7, 6, 5, 4, 3, 2, 1, 0];
        let expected = tape.value(x).select(Axis(0), &perm);
        let pv = tape.value(v).select(Axis(0), &perm);
        let pv = tape.input(pv);
        let px = enc.head.forward(&mut tape, pv);
        assert_eq!(tape.value(px), &expected);
        drop(tape);

        for id in [enc.head.w1, enc.head.b1, enc.head.w2, enc.head.b2] {
            store.get_mut(id).fill(0.0);
        }
        let mut tape = Tape::new(&store);
        let v = tape.input(init_normal(&mut rng, 8, 64, 1.0));
        let x = enc.head.forward(&mut tape, v);
        assert!(tape.value(x).iter().all(|&x| x == 0.0));
    }
}
