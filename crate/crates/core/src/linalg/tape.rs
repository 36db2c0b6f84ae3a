//! Reverse-mode gradient tape over dense matrices.
//!
//! Only the primitives the forecasting graph needs are supported. Nodes are
//! appended in evaluation order, so walking the node list backwards visits
//! them in reverse topological order; each node is visited once.

use std::borrow::Cow;

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `a + 1·row`
    AddRow(Var, Var),
    /// `a ⊙ (1·row)`
    MulRow(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    RepeatRow(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    /// Row standardization; stores `1/σ` per row.
    Standardize(Var, Vec<f64>),
    Gelu(Var),
    Relu(Var),
    /// Rotation of column pairs `(2m, 2m+1)`; cos/sin stored per `(row, pair)`.
    Rotate {
        input: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Mse(Var, Matrix),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. Single-threaded; build one per sample or step.
/// Leaves may borrow their matrices for the lifetime `'a`.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, needs_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, m: &'a Matrix) -> Var {
        self.push_cow(Cow::Borrowed(m), Op::Leaf, true)
    }

    /// Constant leaf borrowing its value.
    pub fn constant_ref(&mut self, m: &'a Matrix) -> Var {
        self.push_cow(Cow::Borrowed(m), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::dim(format!(
                "matmul_t {:?} by {:?}ᵀ",
                va.shape(),
                vb.shape()
            )));
        }
        let value = va.matmul_t(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    fn check_row(&self, a: Var, row: Var) -> Result<()> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || cr != ca {
            return Err(Error::dim(format!(
                "row broadcast of {rr}x{cr} onto {ra}x{ca}"
            )));
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Scales row `i` by `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.shape(a).0 {
            return Err(Error::dim("row_scale weight count differs from row count"));
        }
        let mut value = self.value(a).clone();
        for (i, w) in weights.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::RowScale(a, weights), ng))
    }

    /// Stacks `k` copies of the `1×C` row `a`.
    pub fn repeat_row(&mut self, a: Var, k: usize) -> Result<Var> {
        let src = self.value(a);
        if src.rows() != 1 {
            return Err(Error::dim("repeat_row expects a single row"));
        }
        let value = Matrix::from_vec_unchecked(k, src.cols(), src.as_slice().repeat(k));
        let ng = self.needs(a);
        Ok(self.push(value, Op::RepeatRow(a), ng))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.rows() as f64;
        let value = Matrix::row_vector(&src.column_sums().iter().map(|s| s / n).collect::<Vec<_>>());
        let ng = self.needs(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if start > end || end > src.rows() {
            return Err(Error::dim(format!(
                "row slice {start}..{end} of {} rows",
                src.rows()
            )));
        }
        let c = src.cols();
        let value =
            Matrix::from_vec_unchecked(end - start, c, src.as_slice()[start * c..end * c].to_vec());
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if start > end || end > src.cols() {
            return Err(Error::dim(format!(
                "column slice {start}..{end} of {} columns",
                src.cols()
            )));
        }
        let mut data = Vec::with_capacity(src.rows() * (end - start));
        for i in 0..src.rows() {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let value = Matrix::from_vec_unchecked(src.rows(), end - start, data);
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows with differing column counts"));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let value = Matrix::from_vec_unchecked(rows, cols, data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::dim("concat_cols with differing row counts"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let value = Matrix::from_vec_unchecked(rows, cols, data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if rows * cols != src.len() {
            return Err(Error::dim(format!(
                "reshape {:?} to {rows}x{cols}",
                src.shape()
            )));
        }
        let value = Matrix::from_vec_unchecked(rows, cols, src.as_slice().to_vec());
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` gets zero
    /// probability.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut value = Matrix::zeros(r, c);
        for i in 0..r {
            let limit = if causal { (i + 1).min(c) } else { c };
            let row = &src.row(i)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = value.row_mut(i);
            let mut total = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            out[..limit].iter_mut().for_each(|o| *o /= total);
        }
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Standardizes each row to zero mean and unit population variance.
    pub fn standardize_rows(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut value = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in value.row_mut(i).iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.needs(a);
        self.push(value, Op::Standardize(a, inv_std), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Rotates column pairs `(2m, 2m+1)` of every row by the given angles,
    /// laid out as `angles[row * (cols/2) + m]`.
    pub fn rotate_pairs(&mut self, a: Var, angles: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c % 2 != 0 || angles.len() != r * c / 2 {
            return Err(Error::dim(format!(
                "pair rotation of {r}x{c} with {} angles",
                angles.len()
            )));
        }
        let cos: Vec<f64> = angles.iter().map(|t| t.cos()).collect();
        let sin: Vec<f64> = angles.iter().map(|t| t.sin()).collect();
        let src = self.value(a);
        let mut value = Matrix::zeros(r, c);
        let half = c / 2;
        for i in 0..r {
            let x = src.row(i);
            let out = value.row_mut(i);
            for m in 0..half {
                let (co, si) = (cos[i * half + m], sin[i * half + m]);
                let (x0, x1) = (x[2 * m], x[2 * m + 1]);
                out[2 * m] = x0 * co - x1 * si;
                out[2 * m + 1] = x0 * si + x1 * co;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::Rotate { input: a, cos, sin }, ng))
    }

    /// Mean squared error against a constant target; produces a `1×1` node.
    pub fn mse(&mut self, a: Var, target: &Matrix) -> Result<Var> {
        let pred = self.value(a);
        if pred.shape() != target.shape() {
            return Err(Error::dim(format!(
                "mse of {:?} against {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let n = pred.len().max(1) as f64;
        let loss = pred
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let ng = self.needs(a);
        Ok(self.push(Matrix::filled(1, 1, loss), Op::Mse(a, target.clone()), ng))
    }

    /// Back-propagates from `output`, seeding its adjoint with ones.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let (r, c) = self.shape(output);
        grads[output.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_unchecked(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, Matrix::row_vector(&g.column_sums()));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).as_slice();
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        ga.row_mut(i).iter_mut().zip(rv).for_each(|(x, b)| *x *= b);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *row, Matrix::row_vector(&prod.column_sums()));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::RowScale(a, w) => {
                let mut ga = g.clone();
                for (i, wi) in w.iter().enumerate() {
                    ga.row_mut(i).iter_mut().for_each(|x| *x *= wi);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RepeatRow(a) => {
                self.accumulate(grads, *a, Matrix::row_vector(&g.column_sums()));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let scaled: Vec<f64> = g.as_slice().iter().map(|x| x / r as f64).collect();
                let ga = Matrix::from_vec_unchecked(r, c, scaled.repeat(r));
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.needs(p) {
                        let data = g.as_slice()[offset * c..(offset + rows) * c].to_vec();
                        self.accumulate(grads, p, Matrix::from_vec_unchecked(rows, c, data));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.needs(p) {
                        let mut gp = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::from_vec_unchecked(r, c, g.as_slice().to_vec()));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for ((o, p), d) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = p * (d - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Standardize(a, inv_std) => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((o, yv), gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g
                    .zip_map(self.value(*a), |d, x| d * gelu_grad(x))
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Rotate { input, cos, sin } => {
                let (r, c) = g.shape();
                let half = c / 2;
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let d = g.row(i);
                    let out = ga.row_mut(i);
                    for m in 0..half {
                        let (co, si) = (cos[i * half + m], sin[i * half + m]);
                        let (d0, d1) = (d[2 * m], d[2 * m + 1]);
                        out[2 * m] = d0 * co + d1 * si;
                        out[2 * m + 1] = -d0 * si + d1 * co;
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Mse(a, target) => {
                let upstream = g.as_slice()[0];
                let pred = self.value(*a);
                let scale = 2.0 * upstream / pred.len().max(1) as f64;
                let ga = pred.zip_map(target, |p, t| scale * (p - t)).expect("shape");
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences with step `eps`.
///
/// Returns `max |analytic − fd| / max(1e-3, |analytic|, |fd|)` over every
/// entry of every parameter.
const GRAD_CHECK_FLOOR: f64 = 1e-3;

pub fn grad_check<F>(loss_fn: F, params: &[Matrix], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidValue(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = loss_fn(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss_fn(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out);

    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p.shape());
        for k in 0..p.len() {
            let orig = p.as_slice()[k];
            work[pi].as_mut_slice()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].as_mut_slice()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].as_mut_slice()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic.as_slice()[k];
            let rel = (an - fd).abs() / GRAD_CHECK_FLOOR.max(an.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let m = tape.value(v);
    if m.shape() != (1, 1) {
        return Err(Error::dim(format!("loss must be 1x1, got {:?}", m.shape())));
    }
    let x = m.as_slice()[0];
    if !x.is_finite() {
        return Err(Error::InvalidValue(format!("non-finite loss {x}")));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Reduces an arbitrary node to a scalar with a fixed random projection
    /// so every output entry contributes a distinct weight.
    fn project(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
        let (r, c) = tape.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(&mut rng, r, c));
        let prod = tape.mul(v, w)?;
        let flat = tape.reshape(prod, 1, r * c)?;
        let ones = tape.constant(Matrix::filled(r * c, 1, 1.0));
        tape.matmul(flat, ones)
    }

    fn check(params: Vec<Matrix>, f: impl for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>) {
        let err = grad_check(
            |t, v| {
                let out = f(t, v)?;
                project(t, out, 99)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn square_function() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(1, 1, 3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().as_slice(), &[6.0]);

        let err = grad_check(|t, v| t.mul(v[0], v[0]), &[Matrix::filled(1, 1, 3.0)], 1e-4).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn zero_function_has_zero_error() {
        let err = grad_check(
            |t, v| {
                let z = t.scale(v[0], 0.0);
                t.reshape(z, 1, 1)
            },
            &[Matrix::filled(1, 1, 2.0)],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        let p = [Matrix::filled(1, 1, 1.0)];
        assert!(grad_check(|t, v| Ok(t.scale(v[0], 1.0)), &p, 0.1).is_err());
        let err = grad_check(|t, v| Ok(t.scale(v[0], f64::INFINITY)), &p, 1e-3);
        assert!(matches!(err, Err(Error::InvalidValue(_))));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 5);
        let c = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        let bt = random(&mut rng, 6, 4);

        check(vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
        check(vec![a.clone(), bt.clone()], |t, v| t.matmul_t(v[0], v[1]));
        check(vec![a.clone(), c.clone()], |t, v| t.add(v[0], v[1]));
        check(vec![a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]));
        check(vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
        check(vec![a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]));
        check(vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
        check(vec![a.clone()], |t, v| t.row_scale(v[0], vec![0.5, -2.0, 3.0]));
        check(vec![row.clone()], |t, v| t.repeat_row(v[0], 3));
        check(vec![a.clone()], |t, v| Ok(t.mean_rows(v[0])));
        check(vec![a.clone()], |t, v| t.slice_rows(v[0], 1, 3));
        check(vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 3));
        check(vec![a.clone(), c.clone()], |t, v| t.concat_rows(&[v[0], v[1]]));
        check(vec![a.clone(), c.clone()], |t, v| t.concat_cols(&[v[0], v[1]]));
        check(vec![a.clone()], |t, v| t.reshape(v[0], 2, 6));
        check(vec![a.clone()], |t, v| Ok(t.softmax(v[0], false)));
        check(vec![random(&mut rng, 4, 4)], |t, v| Ok(t.softmax(v[0], true)));
        check(vec![a.clone()], |t, v| Ok(t.standardize_rows(v[0], 1e-5)));
        check(vec![a.clone()], |t, v| Ok(t.gelu(v[0])));
        // Keep ReLU inputs away from the kink.
        let away = a.map(|x| if x.abs() < 0.05 { 0.3 } else { x });
        check(vec![away], |t, v| Ok(t.relu(v[0])));
        let angles: Vec<f64> = (0..6).map(|i| 0.37 * i as f64).collect();
        check(vec![a.clone()], move |t, v| t.rotate_pairs(v[0], &angles));
        let target = random(&mut rng, 3, 4);
        check(vec![a.clone()], move |t, v| t.mse(v[0], &target));
    }

    #[test]
    fn mse_gradient_is_two_residual_over_n() {
        let mut tape = Tape::new();
        let pred = tape.param(Matrix::row_vector(&[1.0, 2.0]));
        let target = Matrix::row_vector(&[1.0, 3.0]);
        let loss = tape.mse(pred, &target).unwrap();
        assert_eq!(tape.value(loss).as_slice(), &[0.5]);
        let g = tape.backward(loss);
        assert_eq!(g.get(pred).unwrap().as_slice(), &[0.0, -1.0]);
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        // y = x·x + x  → dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(1, 1, 2.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().as_slice(), &[5.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::filled(2, 2, 1.0));
        let b = tape.param(Matrix::filled(2, 2, 3.0));
        let c = tape.matmul(a, b).unwrap();
        let g = tape.backward(c);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::filled(3, 3, 0.0));
        let s = tape.softmax(a, true);
        let v = tape.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
        for i in 0..3 {
            assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
