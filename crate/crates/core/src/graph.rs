//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a 2-D array; scalars are `1 x 1`. Nodes are appended in
//! evaluation order, so a single reverse sweep is a valid topological order
//! for backpropagation.

use ndarray::{s, Array2, Axis};

use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    /// Row-wise standardization; caches `1/std` per row.
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    /// Caches row norms.
    L2NormRows(Var, Vec<f64>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    PickSum(Var, Vec<(usize, usize)>, f64),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, index: usize) -> Var {
        self.push(params.get(index).clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) * self.value(row);
        self.push(v, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    /// Multiplies `x` by the `1 x 1` value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let v = self.value(x) * self.scalar(s);
        self.push(v, Op::ScaleBy(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(x))
    }

    /// Row-wise zero-mean unit-variance normalization without affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let n = input.ncols() as f64;
        let mut out = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(x, inv_std))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked when
    /// `j > i + offset` where `offset = ncols - nrows`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let input = self.value(x);
        let offset = input.ncols() as isize - input.nrows() as isize;
        let mut out = input.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let visible = if causal {
                ((i as isize + offset + 1).max(0) as usize).min(row.len())
            } else {
                row.len()
            };
            let max = row
                .iter()
                .take(visible)
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < visible {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
        self.push(out, Op::L2NormRows(x, norms))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Selects rows `ids` of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), ids);
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    /// `coef * sum(x[r, c] for (r, c) in picks)` as a `1 x 1` value.
    pub fn pick_sum(&mut self, x: Var, picks: &[(usize, usize)], coef: f64) -> Var {
        let input = self.value(x);
        let total: f64 = picks.iter().map(|&(r, c)| input[[r, c]]).sum();
        self.push(
            Array2::from_elem((1, 1), coef * total),
            Op::PickSum(x, picks.to_vec(), coef),
        )
    }

    /// Backpropagates from the scalar `loss` and returns gradients for every
    /// tensor of `params` (zeros for tensors not reached).
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Vec<Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.raw_dim()));
        let mut out: Vec<Array2<f64>> = params
            .iter()
            .map(|t| Array2::zeros(t.value.raw_dim()))
            .collect();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out[*p] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::MulRow(x, row) => {
                    let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gx = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, gx);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g * *c),
                Op::ScaleBy(x, sc) => {
                    let gs = (&g * self.value(*x)).sum();
                    let gx = g * self.scalar(*sc);
                    acc(&mut grads, *sc, Array2::from_elem((1, 1), gs));
                    acc(&mut grads, *x, gx);
                }
                Op::Exp(x) => acc(&mut grads, *x, g * &node.value),
                Op::Gelu(x) => {
                    let d = self.value(*x).mapv(|x| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                    });
                    acc(&mut grads, *x, g * d);
                }
                Op::LayerNorm(x, inv_std) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut gx = g;
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let mean_g = row.sum() / n;
                        let mean_gy = row.dot(&yr) / n;
                        let inv = inv_std[i];
                        for (v, yv) in row.iter_mut().zip(yr.iter()) {
                            *v = inv * (*v - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let dot = row.dot(&yr);
                        for (v, yv) in row.iter_mut().zip(yr.iter()) {
                            *v = yv * (*v - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let total = row.sum();
                        for (v, yv) in row.iter_mut().zip(y.row(i).iter()) {
                            *v -= yv.exp() * total;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2NormRows(x, norms) => {
                    let y = &node.value;
                    let mut gx = g;
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let dot = row.dot(&yr);
                        for (v, yv) in row.iter_mut().zip(yr.iter()) {
                            *v = (*v - yv * dot) / norms[i];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![row..row + n, ..]).to_owned());
                        row += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., col..col + n]).to_owned());
                        col += n;
                    }
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.t().to_owned()),
                Op::PickSum(x, picks, coef) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    let upstream = g[[0, 0]];
                    for &(r, c) in picks {
                        gx[[r, c]] += coef * upstream;
                    }
                    acc(&mut grads, *x, gx);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of `d/dx sum(W * f(x))` with a fixed `W`,
    /// computed as `trace(f(x) W^T)`.
    fn check_unary(x0: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut params = ParamSet::default();
        let xi = params.add("x", x0.clone(), false);
        let eval = |p: &ParamSet| {
            let mut g = Graph::new();
            let x = g.param(p, xi);
            let y = build(&mut g, x);
            let (r, c) = g.value(y).dim();
            let w = g.input(Array2::from_shape_fn((r, c), |(i, j)| {
                0.5 + 0.07 * i as f64 - 0.13 * j as f64
            }));
            let m = g.matmul_bt(y, w);
            let diag: Vec<(usize, usize)> = (0..r).map(|i| (i, i)).collect();
            let loss = g.pick_sum(m, &diag, 1.0);
            (g.scalar(loss), g.backward(loss, p))
        };
        let (_, grads) = eval(&params);
        let eps = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut plus = params.clone();
                plus.get_mut(xi)[[i, j]] += eps;
                let mut minus = params.clone();
                minus.get_mut(xi)[[i, j]] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let an = grads[xi][[i, j]];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                    "({i},{j}) fd {fd} an {an}"
                );
            }
        }
    }

    fn sample() -> Array2<f64> {
        array![
            [0.3, -1.2, 0.8, 0.1],
            [1.5, 0.2, -0.4, -0.9],
            [-0.6, 0.7, 0.05, 1.1]
        ]
    }

    #[test]
    fn ops_match_finite_differences() {
        check_unary(sample(), |g, x| g.gelu(x));
        check_unary(sample(), |g, x| g.layer_norm(x));
        check_unary(sample(), |g, x| g.softmax(x, false));
        check_unary(sample(), |g, x| g.log_softmax(x));
        check_unary(sample(), |g, x| g.l2_normalize_rows(x));
        check_unary(sample(), |g, x| g.exp(x));
        check_unary(sample(), |g, x| g.transpose(x));
        check_unary(sample(), |g, x| g.slice_cols(x, 1, 2));
        check_unary(sample(), |g, x| g.slice_rows(x, 1, 2));
        check_unary(sample(), |g, x| g.gather(x, &[2, 0, 2]));
        check_unary(sample(), |g, x| g.matmul_bt(x, x));
        check_unary(sample(), |g, x| {
            let a = g.slice_rows(x, 0, 2);
            let b = g.transpose(x);
            g.matmul(a, b)
        });
        check_unary(sample(), |g, x| {
            let sq = g.slice_cols(x, 0, 3);
            g.softmax(sq, true)
        });
        check_unary(sample(), |g, x| {
            let a = g.slice_cols(x, 0, 2);
            let b = g.slice_cols(x, 2, 2);
            let r = g.concat_cols(&[b, a]);
            g.concat_rows(&[r, x])
        });
        check_unary(sample(), |g, x| {
            let row = g.slice_rows(x, 0, 1);
            let y = g.mul_row(x, row);
            g.add_row(y, row)
        });
        check_unary(sample(), |g, x| {
            let s = g.slice_cols(x, 0, 1);
            let s = g.slice_rows(s, 0, 1);
            let y = g.scale_by(x, s);
            let y = g.scale(y, -0.7);
            g.add(y, x)
        });
        check_unary(sample(), |g, x| {
            let p = g.log_softmax(x);
            g.pick_sum(p, &[(0, 1), (2, 3), (0, 1)], -0.5)
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.input(Array2::zeros((3, 3)));
        let y = g.softmax(x, true);
        let third = 1.0 / 3.0;
        assert_eq!(
            g.value(y),
            &array![[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [third, third, third]]
        );
    }
}
