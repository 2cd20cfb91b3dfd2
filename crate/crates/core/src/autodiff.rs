//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation eagerly: each call computes its value
//! immediately and appends a node. [`Tape::backward`] then walks the nodes in
//! reverse and accumulates adjoints. Nodes built only from constants are
//! marked as not requiring gradients and are skipped during the sweep.

use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    SumCols(Var),
    MeanRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds the `1×m` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let av = self.value(a);
        assert_eq!(av.cols(), r.cols(), "add_row width mismatch");
        let value = Matrix::from_fn(av.rows(), av.cols(), |i, j| av.get(i, j) + r.get(0, j));
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scaled(c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::ln);
        let ng = self.ng(a);
        self.push(value, Op::Ln(a), ng)
    }

    /// Elementwise square root; the adjoint at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::sqrt);
        let ng = self.ng(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..av.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..av.rows() {
            let row = value.row_mut(i);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Scales every row to unit Euclidean norm. Callers guarantee nonzero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..av.rows() {
            let n = dot(av.row(i), av.row(i)).sqrt();
            for x in value.row_mut(i) {
                *x /= n;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    /// `n×m → n×1` row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_fn(av.rows(), 1, |i, _| av.row(i).iter().copied().sum());
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// `n×m → 1×m` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let inv = T::one() / T::of(av.rows() as f64);
        let value = Matrix::from_fn(1, av.cols(), |_, j| (0..av.rows()).map(|i| av.get(i, j)).sum::<T>() * inv);
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Stacks along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.as_slice());
            rows += v.rows();
        }
        let value = Matrix::from_vec(rows, cols, data).expect("consistent concat");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Joins along the column (feature) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(av.rows(), width, |i, j| av.get(i, start + j));
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Row lookup `table[ids[r]]` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let value = Matrix::from_vec(ids.len(), t.cols(), data).expect("consistent gather");
        let ng = self.ng(table);
        self.push(value, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// Reverse sweep from the `1×1` node `out`.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward expects a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; n];
        grads[out.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let d = g.matmul_nt(self.value(*b));
                        accumulate(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = self.value(*a).matmul_tn(&g);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        let d = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = g.matmul_tn(self.value(*a));
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let d = Matrix::from_fn(1, g.cols(), |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum());
                        accumulate(&mut grads, *row, d);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    }
                    if self.ng(*b) {
                        let q = g.zip_map(&node.value, |x, c| x * c);
                        accumulate(&mut grads, *b, q.zip_map(bv, |x, y| -x / y));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (T::one() - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Ln(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| x / y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    let two = T::of(2.0);
                    let d = g.zip_map(&node.value, |x, y| if y > T::zero() { x / (two * y) } else { T::zero() });
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for i in 0..y.rows() {
                        let gy = dot(g.row(i), y.row(i));
                        for (dj, (&gj, &yj)) in d.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i))) {
                            *dj = yj * (gj - gy);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for i in 0..y.rows() {
                        let gs: T = g.row(i).iter().copied().sum();
                        for (dj, &yj) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                            *dj -= yj.exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = g.clone();
                    for i in 0..y.rows() {
                        let norm = dot(x.row(i), x.row(i)).sqrt();
                        let gy = dot(g.row(i), y.row(i));
                        for (dj, (&gj, &yj)) in d.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i))) {
                            *dj = (gj - yj * gy) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).shape();
                    let d = Matrix::from_fn(r, c, |i, _| g.get(i, 0));
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let inv = T::one() / T::of(r as f64);
                    let d = Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv);
                    accumulate(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.ng(p) {
                            let slice = g.as_slice()[off * cols..(off + rows) * cols].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(rows, cols, slice).expect("slice shape"));
                        }
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        if self.ng(p) {
                            let d = Matrix::from_fn(rows, cols, |i, j| g.get(i, off + j));
                            accumulate(&mut grads, p, d);
                        }
                        off += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(table, ids) => {
                    let (r, c) = self.value(*table).shape();
                    let mut d = Matrix::zeros(r, c);
                    for (k, &id) in ids.iter().enumerate() {
                        for (dst, &src) in d.row_mut(id).iter_mut().zip(g.row(k)) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
            }
            // Leaves keep their adjoint; interior nodes are consumed.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, d: Matrix<T>) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` around every entry of `x`.
    fn numeric_grad(x: &Matrix<f64>, f: &dyn Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            out.as_mut_slice()[k] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        let diff = a.zip_map(b, |x, y| x - y).frobenius_sq().sqrt();
        let scale = a.frobenius_sq().sqrt().max(b.frobenius_sq().sqrt()).max(1e-12);
        diff / scale
    }

    /// Builds a composite scalar exercising every op from one input matrix.
    fn composite(tape: &mut Tape<f64>, x: Var, w: &Matrix<f64>) -> Var {
        let wv = tape.constant(w.clone());
        let h = tape.matmul(x, wv);
        let t = tape.tanh(h);
        let s = tape.softmax_rows(t);
        let n = tape.normalize_rows(h);
        let c = tape.concat_cols(&[s, n]);
        let sl = tape.slice_cols(c, 1, 3);
        let gm = tape.matmul_nt(sl, sl);
        let e = tape.exp(gm);
        let rs = tape.sum_cols(e);
        let l = tape.ln(rs);
        let ls = tape.log_softmax_rows(t);
        let stacked = tape.concat_rows(&[ls, t]);
        let mr = tape.mean_rows(stacked);
        let row = tape.slice_cols(mr, 0, 2);
        let g = tape.gather_rows(x, &[1, 0, 1]);
        let g2 = tape.slice_cols(g, 0, 2);
        let ar = tape.add_row(g2, row);
        let sq = tape.mul(ar, ar);
        let sq = tape.sqrt(sq);
        let twos = tape_const_twos(tape, 3, 2);
        let d = tape.div(sq, twos);
        let a = tape.sum_all(d);
        let b = tape.sum_all(l);
        let ab = tape.add(a, b);
        let sc = tape.scale(ab, 0.7);
        let ones = tape.constant(Matrix::scalar(1.0));
        tape.sub(sc, ones)
    }

    fn tape_const_twos(tape: &mut Tape<f64>, r: usize, c: usize) -> Var {
        tape.constant(Matrix::filled(r, c, 2.0))
    }

    #[test]
    fn composite_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_matrix(&mut rng, 3, 4);
        let w = rand_matrix(&mut rng, 4, 5);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let out = composite(&mut tape, x, &w);
        let analytic = tape.backward(out).wrt(x);
        let numeric = numeric_grad(&x0, &|xv| {
            let mut t = Tape::new();
            let x = t.param(xv.clone());
            let o = composite(&mut t, x, &w);
            t.value(o).get(0, 0)
        });
        assert!(rel_err(&analytic, &numeric) < 1e-7, "rel err {}", rel_err(&analytic, &numeric));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Matrix::filled(2, 2, 1.0));
        let p = tape.param(Matrix::filled(2, 2, 3.0));
        let m = tape.mul(c, p);
        let d = tape.detach(m);
        let s = tape.add(m, d);
        let out = tape.sum_all(s);
        let g = tape.backward(out);
        assert_eq!(g.wrt(c), Matrix::zeros(2, 2));
        assert_eq!(g.wrt(p), Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_matrix(&mut rng, 4, 6).scaled(30.0));
        let s = tape.softmax_rows(x);
        for i in 0..4 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
