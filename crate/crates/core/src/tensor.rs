//! Dense row-major matrices, the Adam update and a central-difference
//! gradient checker.
//!
//! Only the handful of products needed by the GRU and its heads are
//! provided: `a·b`, `aᵀ·b` (accumulating, for weight gradients) and `a·bᵀ`
//! (for gradients flowing back into inputs).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Adds `bias` (a 1×cols row) to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Sums every row into `out` (a 1×cols row).
    pub fn sum_rows_into(&self, out: &mut Matrix) {
        debug_assert_eq!(out.shape(), (1, self.cols));
        for row in self.data.chunks_exact(self.cols) {
            for (o, x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
    }

    /// Copies the listed rows into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out_row.iter_mut().zip(b.row(p)) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `out += aᵀ · b`, used for weight gradients.
pub fn matmul_tn_acc(out: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || out.shape() != (a.cols, b.cols) {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    for p in 0..a.rows {
        let b_row = b.row(p);
        for (i, &api) in a.row(p).iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
    Ok(())
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place softmax of a single row, with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    if out.cols > 0 {
        for row in out.data.chunks_exact_mut(out.cols) {
            softmax_in_place(row);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A trainable tensor together with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn reset_optimizer_state(&mut self) {
        self.adam_m.fill(0.0);
        self.adam_v.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before updating the parameters.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }
}

/// One bias-corrected Adam update of `p` at step `cfg.step_count`.
/// The gradient is left untouched.
pub fn adam_step(p: &mut Parameter, cfg: &AdamConfig) -> Result<()> {
    if p.grad.data.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient of {}", p.name)));
    }
    debug_assert!(cfg.step_count >= 1, "begin_step must run before adam_step");
    let t = cfg.step_count as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let it = p
        .value
        .data
        .iter_mut()
        .zip(&p.grad.data)
        .zip(p.adam_m.data.iter_mut().zip(p.adam_v.data.iter_mut()));
    for ((value, &g), (m, v)) in it {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *value -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Finite-difference formula used by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    #[default]
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, error `O(h⁴)`.
    /// Tolerates a larger step, so roundoff matters less on coordinates
    /// whose gradient is tiny.
    FivePoint,
}

/// Compares the analytic gradients stored in `params[..].grad` against
/// central differences of `loss_fn`, over every coordinate.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(loss_fn: F, params: &mut [Parameter], eps: f64) -> f64
where
    F: FnMut(&[Parameter]) -> f64,
{
    finite_difference_check_with(loss_fn, params, eps, usize::MAX, Stencil::Central)
}

/// As [`finite_difference_check`], visiting at most `max_coords` evenly
/// strided coordinates per parameter.
pub fn finite_difference_check_sampled<F>(loss_fn: F, params: &mut [Parameter], eps: f64, max_coords: usize) -> f64
where
    F: FnMut(&[Parameter]) -> f64,
{
    finite_difference_check_with(loss_fn, params, eps, max_coords, Stencil::Central)
}

pub fn finite_difference_check_with<F>(
    mut loss_fn: F,
    params: &mut [Parameter],
    eps: f64,
    max_coords: usize,
    stencil: Stencil,
) -> f64
where
    F: FnMut(&[Parameter]) -> f64,
{
    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        let n = params[pi].value.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let original = params[pi].value.data[idx];
            let mut at = |params: &mut [Parameter], offset: f64| {
                params[pi].value.data[idx] = original + offset;
                let v = loss_fn(params);
                params[pi].value.data[idx] = original;
                v
            };
            let numeric = match stencil {
                Stencil::Central => (at(params, eps) - at(params, -eps)) / (2.0 * eps),
                Stencil::FivePoint => {
                    let near = at(params, eps) - at(params, -eps);
                    let far = at(params, 2.0 * eps) - at(params, -2.0 * eps);
                    (8.0 * near - far) / (12.0 * eps)
                }
            };
            let analytic = params[pi].grad.data[idx];
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}
