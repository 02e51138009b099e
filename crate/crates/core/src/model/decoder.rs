//! Multi-modal bilinear fusion and the inner-video position bias.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SkipLabel;
use crate::nn::{init_uniform_fan_in, Mat, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// `k × h` matrix summing each contiguous block of `k / h` columns; used to
/// turn an elementwise product into per-head dot products.
pub fn head_sum_matrix(k: usize, heads: usize) -> Result<Mat> {
    if heads == 0 || k % heads != 0 {
        return Err(Error::invalid(format!(
            "head count {heads} must divide score width {k}"
        )));
    }
    let width = k / heads;
    Ok(Array2::from_shape_fn((k, heads), |(r, c)| {
        if r / width == c {
            1.0
        } else {
            0.0
        }
    }))
}

/// Projectors of the fusion step. `pair[i * m + j]` serves the ordered pair
/// `(i, j)`; diagonal slots are `None`.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub modalities: usize,
    pub score_dim: usize,
    pub heads: usize,
    pub proj: Vec<ParamId>,
    pub pair: Vec<Option<ParamId>>,
    pub bias: ParamId,
    head_sum: Mat,
}

impl FusionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        modalities: usize,
        score_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::invalid("fusion needs at least one modality"));
        }
        let head_sum = head_sum_matrix(score_dim, heads)?;
        let proj = (0..modalities)
            .map(|i| store.add(format!("fusion.proj{i}"), init_uniform_fan_in(rng, score_dim, 1)))
            .collect();
        let mut pair = Vec::with_capacity(modalities * modalities);
        for i in 0..modalities {
            for j in 0..modalities {
                pair.push((i != j).then(|| {
                    store.add(format!("fusion.pair{i}{j}"), init_uniform_fan_in(rng, heads, 1))
                }));
            }
        }
        let bias = store.add("fusion.bias", Array2::zeros((1, 1)));
        Ok(Self {
            modalities,
            score_dim,
            heads,
            proj,
            pair,
            bias,
            head_sum,
        })
    }

    /// `o = logistic(b_f + Σ_i x_i·P_i + Σ_{i≠j} heads(x_i, x_j)·P_ij)`, one
    /// value per segment row (`N × 1`).
    pub fn fuse(&self, tape: &mut Tape, xs: &[Var]) -> Result<Var> {
        if xs.len() != self.modalities {
            return Err(Error::invalid(format!(
                "fusion expects {} modalities, got {}",
                self.modalities,
                xs.len()
            )));
        }
        let n = tape.value(xs[0]).nrows();
        for &x in xs {
            let dim = tape.value(x).dim();
            if dim != (n, self.score_dim) {
                return Err(Error::invalid(format!(
                    "score features have shape {dim:?}, expected ({n}, {})",
                    self.score_dim
                )));
            }
        }
        let b = tape.param(self.bias);
        let zeros = tape.input(Array2::zeros((n, 1)));
        let mut acc = tape.add_row(zeros, b);
        for (i, &x) in xs.iter().enumerate() {
            let p = tape.param(self.proj[i]);
            let t = tape.matmul(x, p);
            acc = tape.add(acc, t);
        }
        let hs = tape.input(self.head_sum.clone());
        for i in 0..self.modalities {
            for j in 0..self.modalities {
                let Some(pid) = self.pair[i * self.modalities + j] else {
                    continue;
                };
                let prod = tape.mul(xs[i], xs[j]);
                let per_head = tape.matmul(prod, hs);
                let p = tape.param(pid);
                let t = tape.matmul(per_head, p);
                acc = tape.add(acc, t);
            }
        }
        Ok(tape.sigmoid(acc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionBias {
    pub w: f64,
    pub b: f64,
}

/// `w·i + b` for `i = 1..=n`.
pub fn position_bias_vector(n: usize, pb: PositionBias) -> Vec<f64> {
    (1..=n).map(|i| pb.w * i as f64 + pb.b).collect()
}

/// Learned position bias stored as two `1 × 1` parameters.
#[derive(Debug, Clone, Copy)]
pub struct PositionBiasParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl PositionBiasParams {
    pub fn init(store: &mut ParamStore) -> Self {
        Self {
            w: store.add("position_bias.w", Array2::zeros((1, 1))),
            b: store.add("position_bias.b", Array2::zeros((1, 1))),
        }
    }

    pub fn values(&self, store: &ParamStore) -> PositionBias {
        PositionBias {
            w: store.get(self.w)[[0, 0]],
            b: store.get(self.b)[[0, 0]],
        }
    }

    /// Adds the bias column to `o` (`N × 1`).
    pub fn apply(&self, tape: &mut Tape, o: Var) -> Var {
        let n = tape.value(o).nrows();
        let idx = tape.input(Array2::from_shape_fn((n, 1), |(i, _)| (i + 1) as f64));
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        // (N × 1)·(1 × 1) keeps the weight differentiable
        let scaled = tape.matmul(idx, w);
        let biased = tape.add_row(scaled, b);
        tape.add(o, biased)
    }
}

/// Exported interest map of one interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub user_id: String,
    pub video_id: String,
    pub n: usize,
    pub p: Vec<f64>,
    pub p_normalized: Vec<f64>,
    pub skip_label: Option<SkipLabel>,
}

/// Shift so the minimum is 0 and divide by the sum; a flat vector maps to
/// the uniform distribution.
pub fn normalize_scores(p: &[f64]) -> Vec<f64> {
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = p.iter().map(|x| x - min).collect();
    let total: f64 = shifted.iter().sum();
    if total > 0.0 {
        shifted.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / p.len() as f64; p.len()]
    }
}

impl HeatmapRecord {
    pub fn new(
        user_id: impl Into<String>,
        video_id: impl Into<String>,
        p: Vec<f64>,
        skip_label: Option<SkipLabel>,
    ) -> Self {
        let p_normalized = normalize_scores(&p);
        Self {
            user_id: user_id.into(),
            video_id: video_id.into(),
            n: p.len(),
            p,
            p_normalized,
            skip_label,
        }
    }
}
