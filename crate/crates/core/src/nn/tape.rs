use ndarray::{concatenate, s, Array2, Axis};

use super::params::{Grads, ParamId, ParamStore};
use super::Mat;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    Transpose(Var),
    SumAll(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so its gradient can be replayed backwards.
///
/// Parameters are read from a borrowed [`ParamStore`]; gradients are
/// accumulated into a matching [`Grads`] buffer by [`Tape::backward`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced on tape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id), true)
    }

    /// Selects rows of a parameter table (rows may repeat).
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.params.get(id);
        let value = table.select(Axis(0), rows);
        self.push(value, Op::Gather(id, rows.to_vec()), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let value = self.value(a) * &c;
        let ng = self.ng(a);
        self.push(value, Op::MulConst(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(logistic);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column counts differ");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatRows(a, b), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with `1 × n` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Propagates `seed` (shaped like `root`) back to every parameter and
    /// accumulates into `grads`.
    pub fn backward(&self, root: Var, seed: Mat, grads: &mut Grads) {
        assert_eq!(seed.dim(), self.value(root).dim(), "seed shape mismatch");
        let mut adj: Vec<Option<Mat>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => *grads.get_mut(*id) += &g,
                Op::Gather(id, rows) => {
                    let table = grads.get_mut(*id);
                    for (r, &row) in rows.iter().enumerate() {
                        let mut dst = table.row_mut(row);
                        dst += &g.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = g.dot(&self.value(*b).t());
                        acc(&mut adj, *a, da);
                    }
                    if self.ng(*b) {
                        let db = self.value(*a).t().dot(&g);
                        acc(&mut adj, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        let da = g.dot(self.value(*b));
                        acc(&mut adj, *a, da);
                    }
                    if self.ng(*b) {
                        let db = g.t().dot(self.value(*a));
                        acc(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut adj, *b, g.clone());
                    }
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut adj, *b, db);
                    }
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut adj, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut adj, *b, &g * self.value(*a));
                    }
                }
                Op::MulConst(a, c) => acc(&mut adj, *a, g * c),
                Op::Scale(a, s) => acc(&mut adj, *a, g * *s),
                Op::Relu(a) => {
                    let mut da = g;
                    da.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut adj, *a, da);
                }
                Op::Sigmoid(a) => {
                    let mut da = g;
                    da.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    acc(&mut adj, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    if self.ng(*b) {
                        acc(&mut adj, *b, g.slice(s![.., ca..]).to_owned());
                    }
                    acc(&mut adj, *a, g.slice(s![.., ..ca]).to_owned());
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).nrows();
                    if self.ng(*b) {
                        acc(&mut adj, *b, g.slice(s![ra.., ..]).to_owned());
                    }
                    acc(&mut adj, *a, g.slice(s![..ra, ..]).to_owned());
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for (mut drow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                        drow.zip_mut_with(&yrow, |d, &y| *d = y * (*d - dot));
                    }
                    acc(&mut adj, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*bias) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut adj, *bias, db);
                    }
                    if self.ng(*gain) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut adj, *gain, dg);
                    }
                    if self.ng(*x) {
                        let mut dxhat = &g * self.value(*gain);
                        let n = dxhat.ncols() as f64;
                        for ((mut drow, xrow), &is) in dxhat
                            .rows_mut()
                            .into_iter()
                            .zip(xhat.rows())
                            .zip(inv_std.iter())
                        {
                            let mean_d = drow.sum() / n;
                            let mean_dx: f64 =
                                drow.iter().zip(xrow.iter()).map(|(d, x)| d * x).sum::<f64>() / n;
                            drow.zip_mut_with(&xrow, |d, &xh| {
                                *d = is * (*d - mean_d - xh * mean_dx)
                            });
                        }
                        acc(&mut adj, *x, dxhat);
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let row = g.row(0).mapv(|v| v / rows as f64);
                    let da = row
                        .broadcast((rows, row.len()))
                        .expect("broadcast")
                        .to_owned();
                    acc(&mut adj, *a, da);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.t().to_owned()),
                Op::SumAll(a) => {
                    let dim = self.value(*a).raw_dim();
                    acc(&mut adj, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` w.r.t. every entry of every parameter.
    fn numeric_grads(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64) -> Vec<Mat> {
        let h = 1e-6;
        let mut work = store.clone();
        store
            .ids()
            .map(|id| {
                let shape = store.get(id).raw_dim();
                let mut out = Array2::zeros(shape);
                for (idx, slot) in out.indexed_iter_mut() {
                    let orig = work.get(id)[idx];
                    work.get_mut(id)[idx] = orig + h;
                    let up = f(&work);
                    work.get_mut(id)[idx] = orig - h;
                    let down = f(&work);
                    work.get_mut(id)[idx] = orig;
                    *slot = (up - down) / (2.0 * h);
                }
                out
            })
            .collect()
    }

    fn check(store: &ParamStore, build: &dyn Fn(&mut Tape) -> Var) {
        let forward = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let out = build(&mut t);
            // weighted sum so every output entry matters differently
            t.value(out)
                .iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + 0.1 * i as f64))
                .sum::<f64>()
        };
        let mut tape = Tape::new(store);
        let out = build(&mut tape);
        let dim = tape.value(out).raw_dim();
        let mut seed = Array2::zeros(dim);
        for (i, s) in seed.iter_mut().enumerate() {
            *s = 1.0 + 0.1 * i as f64;
        }
        let mut grads = store.zeros_like();
        tape.backward(out, seed, &mut grads);
        let numeric = numeric_grads(store, &forward);
        for id in store.ids() {
            let a = grads.get(id);
            let n = &numeric[id.index()];
            let diff = (a - n).mapv(|x| x * x).sum().sqrt();
            let scale = a.mapv(|x| x * x).sum().sqrt().max(n.mapv(|x| x * x).sum().sqrt());
            assert!(
                diff <= 1e-6 * scale.max(1e-8),
                "{}: analytic {a:?} numeric {n:?}",
                store.name(id)
            );
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        for &(name, r, c) in shapes {
            store.add(name, init_normal(&mut rng, r, c, 1.0));
        }
        store
    }

    #[test]
    fn matmul_family() {
        let store = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 5, 4)]);
        check(&store, &|t| {
            let a = t.param(ParamId(0));
            let b = t.param(ParamId(1));
            let c = t.param(ParamId(2));
            let ab = t.matmul(a, b);
            let ac = t.matmul_nt(a, c);
            let x = t.concat_cols(ab, ac);
            t.scale(x, 0.7)
        });
    }

    #[test]
    fn softmax_and_layer_norm() {
        let store = store_with(&[("x", 3, 5), ("g", 1, 5), ("b", 1, 5), ("y", 2, 5)]);
        check(&store, &|t| {
            let x = t.param(ParamId(0));
            let g = t.param(ParamId(1));
            let b = t.param(ParamId(2));
            let y = t.param(ParamId(3));
            let stacked = t.concat_rows(x, y);
            let sm = t.softmax_rows(stacked);
            let ln = t.layer_norm(sm, g, b);
            let m = t.mean_rows(ln);
            t.add_row(ln, m)
        });
    }

    #[test]
    fn pointwise_and_gather() {
        let store = store_with(&[("table", 6, 3), ("w", 3, 3), ("bias", 1, 3)]);
        check(&store, &|t| {
            let rows = t.gather(ParamId(0), &[2, 0, 2, 5]);
            let w = t.param(ParamId(1));
            let bias = t.param(ParamId(2));
            let h = t.matmul(rows, w);
            let h = t.add_row(h, bias);
            let r = t.relu(h);
            let s = t.sigmoid(h);
            let prod = t.mul(r, s);
            let tr = t.transpose(prod);
            let masked = t.mul_const(tr, Array2::from_elem((3, 4), 0.5));
            let total = t.sum_all(masked);
            let sum2 = t.add(total, total);
            t.concat_rows(sum2, total)
        });
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0);
        assert!((logistic(800.0) - 1.0).abs() < 1e-15);
        assert!((logistic(2.0) + logistic(-2.0) - 1.0).abs() < 1e-15);
    }
}
