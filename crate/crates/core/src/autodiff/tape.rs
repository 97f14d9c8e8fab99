use std::cell::RefCell;

use super::{AutodiffError, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5; // ln(2π)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Value copied from `src`; no gradient flows back through it.
    Detached(#[allow(dead_code)] usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Neg(usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
    },
    AddRow(usize, usize),
    AddCol(usize, usize),
    LogSoftmax(usize),
    LogSumExpRows(usize),
    GatherClass(usize, Vec<usize>),
    GaussianLogPdf {
        u: usize,
        mean: usize,
        log_var: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run operation record. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Ops with no differentiable input collapse to leaves.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn with_values2<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    fn check_same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn check_matrix(&self, op: &'static str, a: usize) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape_of(a);
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn zip(
        &self,
        op: &'static str,
        a: usize,
        b: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        self.check_same_shape(op, a, b)?;
        Ok(self.with_values2(a, b, |x, y| {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
        }))
    }

    fn unary(&self, a: usize, f: impl Fn(f64) -> f64) -> Tensor {
        self.with_value(a, |x| x.map(f))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a shape-`[1]` result.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, Tensor::item)
    }

    fn rg(&self, others: &[Var<'t>]) -> bool {
        self.requires_grad() || others.iter().any(Var::requires_grad)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&other);
        let v = self.tape.zip("add", self.id, other.id, |a, b| a + b)?;
        Ok(self
            .tape
            .push(v, Op::Add(self.id, other.id), self.rg(&[other])))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&other);
        let v = self.tape.zip("sub", self.id, other.id, |a, b| a - b)?;
        Ok(self
            .tape
            .push(v, Op::Sub(self.id, other.id), self.rg(&[other])))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&other);
        let v = self.tape.zip("mul", self.id, other.id, |a, b| a * b)?;
        Ok(self
            .tape
            .push(v, Op::Mul(self.id, other.id), self.rg(&[other])))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&other);
        let (m, k) = self.tape.check_matrix("matmul", self.id)?;
        let (k2, n) = self.tape.check_matrix("matmul", other.id)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let v = self.tape.with_values2(self.id, other.id, |a, b| {
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out);
            Tensor::matrix(m, n, out).expect("matmul shape")
        });
        Ok(self
            .tape
            .push(v, Op::MatMul(self.id, other.id), self.rg(&[other])))
    }

    pub fn exp(self) -> Result<Var<'t>, AutodiffError> {
        let v = self.tape.unary(self.id, f64::exp);
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite { op: "exp" });
        }
        Ok(self.tape.push(v, Op::Exp(self.id), self.rg(&[])))
    }

    pub fn log(self) -> Result<Var<'t>, AutodiffError> {
        if let Some(bad) = self
            .tape
            .with_value(self.id, |x| x.data().iter().copied().find(|&v| !(v > 0.0)))
        {
            return Err(AutodiffError::NonPositiveLog(bad));
        }
        let v = self.tape.unary(self.id, f64::ln);
        Ok(self.tape.push(v, Op::Log(self.id), self.rg(&[])))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.tape.unary(self.id, f64::tanh);
        self.tape.push(v, Op::Tanh(self.id), self.rg(&[]))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.tape.unary(self.id, |x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id), self.rg(&[]))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.tape.unary(self.id, |x| -x);
        self.tape.push(v, Op::Neg(self.id), self.rg(&[]))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.tape.unary(self.id, |x| c * x);
        self.tape.push(v, Op::Scale(self.id, c), self.rg(&[]))
    }

    /// Multiplies every entry by a shape-`[1]` variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&s);
        let ss = s.shape();
        if ss != [1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_scalar",
                left: self.shape(),
                right: ss,
            });
        }
        let c = s.item();
        let v = self.tape.unary(self.id, |x| c * x);
        Ok(self
            .tape
            .push(v, Op::MulScalar(self.id, s.id), self.rg(&[s])))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.id, |x| Tensor::scalar(x.data().iter().sum()));
        self.tape.push(v, Op::Sum(self.id), self.rg(&[]))
    }

    /// Mean of all entries, shape `[1]`. An empty input yields 0.
    pub fn mean(self) -> Var<'t> {
        let v = self.tape.with_value(self.id, |x| {
            let n = x.len().max(1) as f64;
            Tensor::scalar(x.data().iter().sum::<f64>() / n)
        });
        self.tape.push(v, Op::Mean(self.id), self.rg(&[]))
    }

    /// `[rows, cols] -> [rows]`.
    pub fn sum_rows(self) -> Result<Var<'t>, AutodiffError> {
        let (r, _) = self.tape.check_matrix("sum_rows", self.id)?;
        let v = self.tape.with_value(self.id, |x| {
            Tensor::vector((0..r).map(|i| x.row(i).iter().sum()).collect())
        });
        Ok(self.tape.push(v, Op::SumRows(self.id), self.rg(&[])))
    }

    /// Joins matrices along the last axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat_cols",
                msg: "no inputs".into(),
            })?;
        let tape = first.tape;
        let (rows, _) = tape.check_matrix("concat_cols", first.id)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p);
            let (r, c) = tape.check_matrix("concat_cols", p.id)?;
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        {
            let nodes = tape.nodes.borrow();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for i in 0..rows {
                    out[i * total + offset..i * total + offset + w]
                        .copy_from_slice(&src[i * w..(i + 1) * w]);
                }
                offset += w;
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        let v = Tensor::matrix(rows, total, out)?;
        Ok(tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, AutodiffError> {
        let (rows, cols) = self.tape.check_matrix("slice_cols", self.id)?;
        if start > end || end > cols {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let w = end - start;
        let v = self.tape.with_value(self.id, |x| {
            let mut out = Vec::with_capacity(rows * w);
            for i in 0..rows {
                out.extend_from_slice(&x.row(i)[start..end]);
            }
            Tensor::matrix(rows, w, out).expect("slice shape")
        });
        Ok(self.tape.push(
            v,
            Op::SliceCols {
                src: self.id,
                start,
            },
            self.rg(&[]),
        ))
    }

    /// Splits the last axis at `at`.
    pub fn split_cols(self, at: usize) -> Result<(Var<'t>, Var<'t>), AutodiffError> {
        let (_, cols) = self.tape.check_matrix("split_cols", self.id)?;
        Ok((self.slice_cols(0, at)?, self.slice_cols(at, cols)?))
    }

    /// Stacks tensors along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat_rows",
                msg: "no inputs".into(),
            })?;
        let tape = first.tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Tensor::concat_rows(&refs)?
        };
        let rg = parts.iter().any(Var::requires_grad);
        Ok(tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>, AutodiffError> {
        let rows = self.shape()[0];
        if start > end || end > rows {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside {rows} rows"),
            });
        }
        let v = self.tape.with_value(self.id, |x| x.slice_rows(start, end));
        Ok(self.tape.push(
            v,
            Op::SliceRows {
                src: self.id,
                start,
            },
            self.rg(&[]),
        ))
    }

    /// `x[rows, n] + r[n]`, broadcasting the row vector across rows.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&row);
        let (rows, cols) = self.tape.check_matrix("add_row", self.id)?;
        if row.shape() != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let v = self.tape.with_values2(self.id, row.id, |x, r| {
            let mut out = x.data().to_vec();
            for i in 0..rows {
                for (o, b) in out[i * cols..(i + 1) * cols].iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            Tensor::matrix(rows, cols, out).expect("add_row shape")
        });
        Ok(self
            .tape
            .push(v, Op::AddRow(self.id, row.id), self.rg(&[row])))
    }

    /// `x[rows, n] + c[rows]`, adding `c[i]` to every entry of row `i`.
    pub fn add_col(self, col: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&col);
        let (rows, cols) = self.tape.check_matrix("add_col", self.id)?;
        if col.shape() != [rows] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_col",
                left: self.shape(),
                right: col.shape(),
            });
        }
        let v = self.tape.with_values2(self.id, col.id, |x, c| {
            let mut out = x.data().to_vec();
            for i in 0..rows {
                let ci = c.data()[i];
                out[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .for_each(|o| *o += ci);
            }
            Tensor::matrix(rows, cols, out).expect("add_col shape")
        });
        Ok(self
            .tape
            .push(v, Op::AddCol(self.id, col.id), self.rg(&[col])))
    }

    /// Row-wise log-softmax, computed stably.
    pub fn log_softmax(self) -> Result<Var<'t>, AutodiffError> {
        let (rows, cols) = self.tape.check_matrix("log_softmax", self.id)?;
        let v = self.tape.with_value(self.id, |x| {
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                let row = x.row(i);
                let lse = logsumexp(row);
                out.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::matrix(rows, cols, out).expect("log_softmax shape")
        });
        Ok(self.tape.push(v, Op::LogSoftmax(self.id), self.rg(&[])))
    }

    /// Row-wise log-sum-exp: `[rows, cols] -> [rows]`.
    pub fn logsumexp_rows(self) -> Result<Var<'t>, AutodiffError> {
        let (rows, _) = self.tape.check_matrix("logsumexp_rows", self.id)?;
        let v = self.tape.with_value(self.id, |x| {
            Tensor::vector((0..rows).map(|i| logsumexp(x.row(i))).collect())
        });
        Ok(self.tape.push(v, Op::LogSumExpRows(self.id), self.rg(&[])))
    }

    /// Picks `x[i, classes[i]]` for each row: `[rows, C] -> [rows]`.
    pub fn gather_class(self, classes: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let (rows, cols) = self.tape.check_matrix("gather_class", self.id)?;
        if classes.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_class",
                left: vec![rows, cols],
                right: vec![classes.len()],
            });
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= cols) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_class",
                msg: format!("class {bad} outside [0, {cols})"),
            });
        }
        let v = self.tape.with_value(self.id, |x| {
            Tensor::vector(
                classes
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| x.at(i, c))
                    .collect(),
            )
        });
        Ok(self
            .tape
            .push(v, Op::GatherClass(self.id, classes.to_vec()), self.rg(&[])))
    }

    /// Diagonal-Gaussian log density of every row of `self` under every
    /// component: `u[B, d]`, `mean[C, d]`, `log_var[C, d]` -> `[B, C]`.
    pub fn gaussian_logpdf(
        self,
        mean: Var<'t>,
        log_var: Var<'t>,
    ) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(&mean);
        self.same_tape(&log_var);
        let (b, d) = self.tape.check_matrix("gaussian_logpdf", self.id)?;
        let (c, d2) = self.tape.check_matrix("gaussian_logpdf", mean.id)?;
        if d != d2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gaussian_logpdf",
                left: self.shape(),
                right: mean.shape(),
            });
        }
        if log_var.shape() != [c, d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "gaussian_logpdf",
                left: mean.shape(),
                right: log_var.shape(),
            });
        }
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (u, m, lv) = (
                &nodes[self.id].value,
                &nodes[mean.id].value,
                &nodes[log_var.id].value,
            );
            let mut out = vec![0.0; b * c];
            for k in 0..c {
                let (mk, lvk) = (m.row(k), lv.row(k));
                let norm: f64 = lvk.iter().sum::<f64>() + d as f64 * LN_2PI;
                let prec: Vec<f64> = lvk.iter().map(|&l| (-l).exp()).collect();
                for i in 0..b {
                    let ui = u.row(i);
                    let mut q = 0.0;
                    for j in 0..d {
                        let diff = ui[j] - mk[j];
                        q += diff * diff * prec[j];
                    }
                    out[i * c + k] = -0.5 * (q + norm);
                }
            }
            Tensor::matrix(b, c, out)?
        };
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "gaussian_logpdf",
            });
        }
        let rg = self.rg(&[mean, log_var]);
        Ok(self.tape.push(
            v,
            Op::GaussianLogPdf {
                u: self.id,
                mean: mean.id,
                log_var: log_var.id,
            },
            rg,
        ))
    }

    /// Same values, but no gradient reaches anything upstream.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        let mut nodes = self.tape.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: v,
            op: Op::Detached(self.id),
            requires_grad: false,
        });
        Var {
            tape: self.tape,
            id,
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(self) -> Result<Gradients, AutodiffError> {
        let shape = self.shape();
        if shape != [1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        Ok(backward_from(self.tape, self.id))
    }
}

/// Gradients of a scalar with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reachable(&self, v: Var<'_>) -> bool {
        self.grads[v.id].is_some()
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// `c += a · b` with explicit (row, col) strides for `a` `[m,k]` and `b` `[k,n]`;
/// `c` is dense row-major `[m,n]`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: strides and dimensions describe in-bounds views of the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backward_from(tape: &Tape, root: usize) -> Gradients {
    let nodes = tape.nodes.borrow();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
    if nodes[root].requires_grad {
        grads[root] = Some(vec![1.0]);
    }

    fn acc<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        id: usize,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[id].requires_grad {
            return None;
        }
        Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
    }

    for id in (0..=root).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        let val = |i: usize| nodes[i].value.data();
        match &node.op {
            Op::Leaf | Op::Detached(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc(&mut grads, &nodes, *b) {
                    gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc(&mut grads, &nodes, *b) {
                    gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut()
                        .zip(&g)
                        .zip(val(*b))
                        .for_each(|((x, y), w)| *x += y * w);
                }
                if let Some(gb) = acc(&mut grads, &nodes, *b) {
                    gb.iter_mut()
                        .zip(&g)
                        .zip(val(*a))
                        .for_each(|((x, y), w)| *x += y * w);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    // dA = G · Bᵀ
                    gemm(m, n, k, &g, (n, 1), val(*b), (1, n), ga);
                }
                if let Some(gb) = acc(&mut grads, &nodes, *b) {
                    // dB = Aᵀ · G
                    gemm(k, m, n, val(*a), (1, k), &g, (n, 1), gb);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut()
                        .zip(&g)
                        .zip(node.value.data())
                        .for_each(|((x, y), e)| *x += y * e);
                }
            }
            Op::Log(a) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut()
                        .zip(&g)
                        .zip(val(*a))
                        .for_each(|((x, y), v)| *x += y / v);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut()
                        .zip(&g)
                        .zip(node.value.data())
                        .for_each(|((x, y), t)| *x += y * (1.0 - t * t));
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().zip(&g).zip(val(*a)).for_each(|((x, y), v)| {
                        if *v > 0.0 {
                            *x += y
                        }
                    });
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += sv * y);
                }
                if let Some(gs) = acc(&mut grads, &nodes, *s) {
                    gs[0] += g.iter().zip(val(*a)).map(|(y, v)| y * v).sum::<f64>();
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len().max(1) as f64;
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::SumRows(a) => {
                let cols = nodes[*a].value.cols();
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .for_each(|x| *x += gi);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if let Some(gp) = acc(&mut grads, &nodes, p) {
                        for i in 0..rows {
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + offset..i * total + offset + w])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let (rows, w) = (node.value.rows(), node.value.cols());
                let cols = nodes[*src].value.cols();
                if let Some(gs) = acc(&mut grads, &nodes, *src) {
                    for i in 0..rows {
                        gs[i * cols + start..i * cols + start + w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(gp) = acc(&mut grads, &nodes, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { src, start } => {
                let cols = node.value.cols();
                if let Some(gs) = acc(&mut grads, &nodes, *src) {
                    gs[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::AddRow(x, r) => {
                let cols = node.value.cols();
                if let Some(gx) = acc(&mut grads, &nodes, *x) {
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                if let Some(gr) = acc(&mut grads, &nodes, *r) {
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::AddCol(x, c) => {
                let cols = node.value.cols();
                if let Some(gx) = acc(&mut grads, &nodes, *x) {
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                if let Some(gc) = acc(&mut grads, &nodes, *c) {
                    for (gi, chunk) in gc.iter_mut().zip(g.chunks(cols)) {
                        *gi += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    for (i, (gi, yi)) in g
                        .chunks(cols)
                        .zip(node.value.data().chunks(cols))
                        .enumerate()
                    {
                        let total: f64 = gi.iter().sum();
                        for j in 0..cols {
                            ga[i * cols + j] += gi[j] - yi[j].exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let cols = nodes[*a].value.cols();
                let lse = node.value.data();
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    let xs = nodes[*a].value.data();
                    for i in 0..g.len() {
                        for j in 0..cols {
                            ga[i * cols + j] += g[i] * (xs[i * cols + j] - lse[i]).exp();
                        }
                    }
                }
            }
            Op::GatherClass(a, classes) => {
                let cols = nodes[*a].value.cols();
                if let Some(ga) = acc(&mut grads, &nodes, *a) {
                    for (i, &c) in classes.iter().enumerate() {
                        ga[i * cols + c] += g[i];
                    }
                }
            }
            Op::GaussianLogPdf { u, mean, log_var } => {
                let (b, d) = (nodes[*u].value.rows(), nodes[*u].value.cols());
                let c = nodes[*mean].value.rows();
                let (uv, mv, lvv) = (val(*u), val(*mean), val(*log_var));
                let prec: Vec<f64> = lvv.iter().map(|&l| (-l).exp()).collect();
                let mut du = vec![0.0; b * d];
                let mut dm = vec![0.0; c * d];
                let mut dlv = vec![0.0; c * d];
                for i in 0..b {
                    for k in 0..c {
                        let gik = g[i * c + k];
                        if gik == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let diff = uv[i * d + j] - mv[k * d + j];
                            let r = diff * prec[k * d + j];
                            du[i * d + j] -= gik * r;
                            dm[k * d + j] += gik * r;
                            dlv[k * d + j] -= 0.5 * gik * (1.0 - diff * r);
                        }
                    }
                }
                for (id, delta) in [(*u, du), (*mean, dm), (*log_var, dlv)] {
                    if let Some(gx) = acc(&mut grads, &nodes, id) {
                        gx.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        grads[id] = Some(g);
    }
    Gradients { grads, shapes }
}
