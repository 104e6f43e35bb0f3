//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates adjoints. Nodes are only ever
//! appended, so a node's inputs always precede it and a single reverse sweep
//! visits each node after all of its consumers.
//!
//! The op set is the minimum the model needs: dense products, broadcasts,
//! row-wise reductions and normalizations, gathers/scatters over edge lists,
//! and constant sparse products for graph propagation.

use std::rc::Rc;

use super::{spmm_transposed, spmm_weighted, Csr, Matrix};

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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `a + bias` with a 1×c bias broadcast over rows.
    AddRow(Var, Var),
    /// Row r of `a` scaled by `col[r]` (col is n×1).
    MulCol(Var, Var),
    /// Row r of `a` divided by `col[r]`; rows with a zero divisor become zero.
    DivCol(Var, Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
    SpMM(Rc<Csr>, Var),
    RowSum(Var),
    /// Row divided by max(‖row‖, eps); `norms` holds the clamped divisors.
    RowNormalize(Var, Vec<f64>, f64),
    RowSoftmax(Var),
    RowMax(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zero when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

fn add_into(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.as_slice()[0]
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let data = src.as_slice().iter().map(|&x| f(x)).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data).expect("shape preserved");
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise op on mismatched shapes");
        let data = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data).expect("shape preserved");
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Sum of several same-shaped variables, left to right.
    pub fn sum_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.rows(), 1);
        assert_eq!(x.cols(), b.cols());
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, &bb) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bb;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (x.rows(), 1));
        let mut value = x.clone();
        for r in 0..value.rows() {
            let s = c.as_slice()[r];
            value.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(value, Op::MulCol(a, col))
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (x.rows(), 1));
        let mut value = x.clone();
        for r in 0..value.rows() {
            let s = c.as_slice()[r];
            if s == 0.0 {
                value.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            } else {
                value.row_mut(r).iter_mut().for_each(|v| *v /= s);
            }
        }
        self.push(value, Op::DivCol(a, col))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |x| super::leaky_relu(x, slope), Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, super::softplus, Op::Softplus(a))
    }

    /// Output row r is input row `index[r]`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(src.row(i));
        }
        let value = Matrix::from_vec(index.len(), cols, data).expect("gather shape");
        self.push(value, Op::Gather(a, index))
    }

    /// Output has `n_out` rows; input row r is added into output row `index[r]`.
    pub fn scatter_add(&mut self, a: Var, index: Rc<[usize]>, n_out: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), index.len());
        let mut value = Matrix::zeros(n_out, src.cols());
        for (r, &dst) in index.iter().enumerate() {
            for (o, &v) in value.row_mut(dst).iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        self.push(value, Op::ScatterAdd(a, index))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        assert!(start + width <= src.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(src.rows() * width);
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row(r)[start..start + width]);
        }
        let value = Matrix::from_vec(src.rows(), width, data).expect("slice shape");
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat on mismatched row counts");
                data.extend_from_slice(m.row(r));
            }
        }
        let value = Matrix::from_vec(rows, width, data).expect("concat shape");
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        if self.shape(a) == (rows, cols) {
            return a;
        }
        let value = self
            .value(a)
            .clone()
            .reshaped(rows, cols)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(value, Op::Reshape(a))
    }

    /// `adjacency · a` with the adjacency treated as a constant.
    pub fn spmm(&mut self, adjacency: Rc<Csr>, a: Var) -> Var {
        assert_eq!(adjacency.n_cols(), self.value(a).rows());
        let value = spmm_weighted(&adjacency, self.value(a));
        self.push(value, Op::SpMM(adjacency, a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(src.rows(), 1, data).expect("row sum");
        self.push(value, Op::RowSum(a))
    }

    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let n = src.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            value.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(value, Op::RowNormalize(a, norms, eps))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            super::softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::RowSoftmax(a))
    }

    /// Row-wise maximum; the gradient flows to the lowest maximizing column.
    pub fn row_max(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut arg = Vec::with_capacity(src.rows());
        let mut data = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let j = super::argmax(src.row(r));
            arg.push(j);
            data.push(src.row(r)[j]);
        }
        let value = Matrix::from_vec(src.rows(), 1, data).expect("row max");
        self.push(value, Op::RowMax(a, arg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius_sq();
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(a))
    }

    /// Reverse sweep from a 1×1 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.matmul(&bv.transpose()).expect("matmul grad");
                let gb = av.transpose().matmul(g).expect("matmul grad");
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[b.0], gb);
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], g.transpose()),
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                add_into(&mut grads[a.0], hadamard(g, bv));
                add_into(&mut grads[b.0], hadamard(g, av));
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], scaled(g, *c)),
            Op::AddScalar(a) => add_into(&mut grads[a.0], g.clone()),
            Op::AddRow(a, bias) => {
                add_into(&mut grads[a.0], g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                add_into(&mut grads[bias.0], gb);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let mut ga = g.clone();
                let mut gc = Matrix::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv.as_slice()[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    gc.as_mut_slice()[r] = dot(g.row(r), av.row(r));
                }
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[col.0], gc);
            }
            Op::DivCol(a, col) => {
                let cv = self.value(*col);
                let mut ga = g.clone();
                let mut gc = Matrix::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv.as_slice()[r];
                    if s == 0.0 {
                        ga.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    } else {
                        ga.row_mut(r).iter_mut().for_each(|v| *v /= s);
                        // d(x/s)/ds = -(x/s)/s
                        gc.as_mut_slice()[r] = -dot(g.row(r), out.row(r)) / s;
                    }
                }
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[col.0], gc);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = map2(g, x, |gv, xv| if xv >= 0.0 { gv } else { slope * gv });
                add_into(&mut grads[a.0], d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = map2(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                add_into(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let d = map2(g, out, |gv, y| gv * (1.0 - y * y));
                add_into(&mut grads[a.0], d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = map2(g, x, |gv, xv| gv * super::sigmoid(xv));
                add_into(&mut grads[a.0], d);
            }
            Op::Gather(a, index) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in index.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::ScatterAdd(a, index) => {
                let cols = g.cols();
                let mut data = Vec::with_capacity(index.len() * cols);
                for &dst in index.iter() {
                    data.extend_from_slice(g.row(dst));
                }
                let ga = Matrix::from_vec(index.len(), cols, data).expect("scatter grad");
                add_into(&mut grads[a.0], ga);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                let w = g.cols();
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, w) = self.shape(*p);
                    let mut gp = Matrix::zeros(rows, w);
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    add_into(&mut grads[p.0], gp);
                }
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                let ga = g.clone().reshaped(rows, cols).expect("reshape grad");
                add_into(&mut grads[a.0], ga);
            }
            Op::SpMM(adj, a) => add_into(&mut grads[a.0], spmm_transposed(adj, g)),
            Op::RowSum(a) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let s = g.as_slice()[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v = s);
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::RowNormalize(a, norms, eps) => {
                let x = self.value(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = norms[r];
                    let gr = g.row(r);
                    let dst = ga.row_mut(r);
                    let raw = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw > *eps {
                        // y = x/‖x‖ : dx = (g − y (y·g)) / ‖x‖
                        let yr = out.row(r);
                        let yg = dot(yr, gr);
                        for j in 0..dst.len() {
                            dst[j] = (gr[j] - yr[j] * yg) / n;
                        }
                    } else {
                        for j in 0..dst.len() {
                            dst[j] = gr[j] / n;
                        }
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::RowSoftmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (p, gr) = (out.row(r), g.row(r));
                    let pg = dot(p, gr);
                    for (j, dst) in ga.row_mut(r).iter_mut().enumerate() {
                        *dst = p[j] * (gr[j] - pg);
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::RowMax(a, arg) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    ga[(r, arg[r])] = g.as_slice()[r];
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                add_into(&mut grads[a.0], Matrix::filled(rows, cols, g.as_slice()[0]));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.as_slice()[0];
                add_into(&mut grads[a.0], scaled(self.value(*a), s));
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scaled(m: &Matrix, c: f64) -> Matrix {
    let data = m.as_slice().iter().map(|v| v * c).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).expect("shape preserved")
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    map2(a, b, |x, y| x * y)
}

fn map2(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Checks every op's backward rule against central differences by
    /// building a scalar loss from each op on random inputs.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: Vec<Matrix>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k], input.shape());
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].as_mut_slice()[j] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().map(|m| t.leaf(m.clone())).collect();
                    let r = build(&mut t, &vs);
                    t.scalar(r)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_slice()[j];
                assert!(
                    (a - numeric).abs() < 1e-6 * (1.0 + a.abs()),
                    "input {k} entry {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Weighted sum so every output entry gets a distinct adjoint.
    fn probe(t: &mut Tape, v: Var) -> Var {
        let (r, c) = t.shape(v);
        let w: Vec<f64> = (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect();
        let wv = t.leaf(Matrix::from_vec(r, c, w).unwrap());
        let m = t.mul(v, wv);
        t.sum(m)
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        check(|t, v| { let x = t.mul(v[0], v[1]); probe(t, x) }, vec![a.clone(), b.clone()]);
        check(|t, v| { let x = t.sub(v[0], v[1]); probe(t, x) }, vec![a.clone(), b.clone()]);
        check(|t, v| { let x = t.tanh(v[0]); probe(t, x) }, vec![a.clone()]);
        check(|t, v| { let x = t.softplus(v[0]); probe(t, x) }, vec![a.clone()]);
        check(|t, v| { let x = t.leaky_relu(v[0], 0.2); probe(t, x) }, vec![a.clone()]);
        check(|t, v| { let x = t.sum_squares(v[0]); t.scale(x, 0.7) }, vec![a]);
    }

    #[test]
    fn matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2));
        check(|t, v| { let x = t.matmul(v[0], v[1]); probe(t, x) }, vec![a.clone(), b]);
        check(|t, v| { let x = t.transpose(v[0]); probe(t, x) }, vec![a.clone()]);
        let bias = random(&mut rng, 1, 4);
        check(|t, v| { let x = t.add_row(v[0], v[1]); probe(t, x) }, vec![a.clone(), bias]);
        let col = random(&mut rng, 3, 1);
        check(|t, v| { let x = t.mul_col(v[0], v[1]); probe(t, x) }, vec![a.clone(), col.clone()]);
        let mut pos = col.clone();
        pos.as_mut_slice().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        check(|t, v| { let x = t.div_col(v[0], v[1]); probe(t, x) }, vec![a.clone(), pos]);
        check(|t, v| { let x = t.row_sum(v[0]); probe(t, x) }, vec![a.clone()]);
        check(|t, v| { let x = t.row_normalize(v[0], 1e-12); probe(t, x) }, vec![a.clone()]);
        check(|t, v| { let x = t.row_softmax(v[0]); probe(t, x) }, vec![a.clone()]);
        check(|t, v| { let x = t.row_max(v[0]); probe(t, x) }, vec![a.clone()]);
        check(
            |t, v| {
                let x = t.reshape(v[0], 6, 2);
                let y = t.slice_cols(x, 1, 1);
                let z = t.concat_cols(&[x, y, x]);
                probe(t, z)
            },
            vec![a],
        );
    }

    #[test]
    fn index_and_sparse_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 3);
        let idx: Rc<[usize]> = vec![2, 0, 2, 3, 1].into();
        let i2 = idx.clone();
        check(move |t, v| { let x = t.gather(v[0], i2.clone()); probe(t, x) }, vec![a.clone()]);
        let e = random(&mut rng, 5, 3);
        check(move |t, v| { let x = t.scatter_add(v[0], idx.clone(), 4); probe(t, x) }, vec![e]);
        let adj = Csr::from_pairs(4, 4, &[(0, 1), (1, 0), (1, 2), (2, 1), (3, 3)])
            .unwrap()
            .with_weights(vec![0.5, 0.5, 2.0, 2.0, 1.5])
            .unwrap();
        let adj = Rc::new(adj);
        check(move |t, v| { let x = t.spmm(adj.clone(), v[0]); probe(t, x) }, vec![a]);
    }

    #[test]
    fn div_col_zero_divisor_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(2, 2, 3.0));
        let c = t.leaf(Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap());
        let d = t.div_col(a, c);
        assert_eq!(t.value(d).as_slice(), &[0.0, 0.0, 1.5, 1.5]);
        let s = t.sum(d);
        let g = t.backward(s);
        assert_eq!(g.get(a, (2, 2)).as_slice(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(1, 1, 2.0));
        let b = t.leaf(Matrix::filled(1, 1, 5.0));
        let s = t.sum_squares(a);
        let g = t.backward(s);
        assert_eq!(g.get(b, (1, 1)).as_slice(), &[0.0]);
        assert_eq!(g.get(a, (1, 1)).as_slice(), &[4.0]);
    }
}
