//! Dense row-major matrices and a reverse-mode tape over them.
//!
//! Each forward op appends a node holding its value; `backward` walks the
//! nodes in reverse and accumulates adjoints. Parameters enter through
//! [`Tape::param`], which reuses one node per parameter index so that shared
//! weights collect the sum of their per-path gradients.

use std::collections::HashMap;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &v| a + v * v)
    }
}

/// `a (m×k) · b (k×n)`.
fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` with `b (n×k)`.
fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out.data[i * b.rows + j] = s;
        }
    }
    out
}

/// `aᵀ · b` with `a (k×m)`, `b (k×n)`.
fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Raw values above this saturate the positive transform.
const MAX_LOG_SCALE: f64 = 10.0;

/// `exp(x)`, capped at `exp(MAX_LOG_SCALE)`. The log-scale parameterization
/// keeps the NLL gradient with respect to `x` of order one at any scale.
#[inline]
fn positive<T: Scalar>(x: T) -> T {
    // comparison instead of `min` so NaN propagates
    let cap = T::lit(MAX_LOG_SCALE);
    if x > cap { cap.exp() } else { x.exp() }
}

#[inline]
fn positive_grad<T: Scalar>(x: T) -> T {
    if x > T::lit(MAX_LOG_SCALE) {
        T::zero()
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-column output transform used by the prediction heads:
/// `Affine` columns map `r -> r * scale + offset`, `Positive` columns map
/// `r -> exp(r) + floor`.
#[derive(Debug, Clone)]
pub struct ColumnMap<T> {
    pub positive: Vec<bool>,
    pub scale: Vec<T>,
    pub offset: Matrix<T>,
    pub floor: T,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sigmoid(Var),
    /// Softmax along rows; `false` entries get zero weight.
    SoftmaxRows(Var),
    /// Row-wise standardization; keeps `1/std` per row.
    Standardize(Var, Vec<T>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Column-wise max over rows; keeps the argmax row per column.
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    /// Multiplies row `i` by the scalar in row `i` of a column vector.
    ScaleRowsBy(Var, Var),
    /// Sums consecutive blocks of `len` rows.
    SegmentSum(Var, usize),
    MulConst(Var, Matrix<T>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    ColumnMap(Var, Box<ColumnMap<T>>),
}

struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(Op::Input, m)
    }

    /// Leaf for parameter `index`; the same node is returned on reuse.
    pub fn param(&mut self, index: usize, value: &Matrix<T>) -> Var {
        if let Some(&v) = self.params.get(&index) {
            return v;
        }
        let v = self.push(Op::Input, value.clone());
        self.params.insert(index, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shape mismatch");
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    /// Adds a `1×c` row to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((1, self.value(a).cols), r.shape(), "add_row shape mismatch");
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    /// Multiplies every row elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((1, self.value(a).cols), r.shape(), "mul_row shape mismatch");
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, &g) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x *= g;
            }
        }
        self.push(Op::MulRow(a, row), v)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = *x * sigmoid(*x));
        self.push(Op::Silu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = sigmoid(*x));
        self.push(Op::Sigmoid(a), v)
    }

    /// Row softmax. With a mask, masked entries get weight zero; a fully
    /// masked row yields zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), x.data.len(), "softmax mask shape mismatch");
        }
        let mut v = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * x.cols + j]);
            let mut mx = T::neg_infinity();
            for j in 0..x.cols {
                if keep(j) {
                    mx = mx.max(x.get(i, j));
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..x.cols {
                if keep(j) {
                    let e = (x.get(i, j) - mx).exp();
                    v.set(i, j, e);
                    sum += e;
                }
            }
            v.row_mut(i).iter_mut().for_each(|e| *e /= sum);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.cols).unwrap();
        let mut v = x.clone();
        let mut inv = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = v.row_mut(i);
            let mean = row.iter().fold(T::zero(), |s, &y| s + y) / n;
            let var = row.iter().fold(T::zero(), |s, &y| s + (y - mean) * (y - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|y| *y = (*y - mean) * is);
            inv.push(is);
        }
        self.push(Op::Standardize(a, inv), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut v = Matrix::zeros(x.rows, len);
        for i in 0..x.rows {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + x.cols].copy_from_slice(x.row(i));
            }
            off += x.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Matrix::from_vec(rows, cols, data))
    }

    /// Column-wise max over rows → `1×c`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows > 0, "max over zero rows");
        let mut arg = vec![0usize; x.cols];
        let mut v = Matrix::from_vec(1, x.cols, x.row(0).to_vec());
        for i in 1..x.rows {
            for (j, &y) in x.row(i).iter().enumerate() {
                if y > v.data[j] {
                    v.data[j] = y;
                    arg[j] = i;
                }
            }
        }
        self.push(Op::MaxRows(a, arg), v)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.rows).unwrap();
        let mut v = Matrix::zeros(1, x.cols);
        for i in 0..x.rows {
            for (o, &y) in v.data.iter_mut().zip(x.row(i)) {
                *o += y;
            }
        }
        v.data.iter_mut().for_each(|o| *o /= n);
        self.push(Op::MeanRows(a), v)
    }

    pub fn scale_rows_by(&mut self, a: Var, s: Var) -> Var {
        let x = self.value(a);
        let sv = self.value(s);
        assert_eq!((x.rows, 1), sv.shape(), "scale_rows_by shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows {
            let k = sv.data[i];
            v.row_mut(i).iter_mut().for_each(|y| *y *= k);
        }
        self.push(Op::ScaleRowsBy(a, s), v)
    }

    pub fn segment_sum(&mut self, a: Var, len: usize) -> Var {
        let x = self.value(a);
        assert!(len > 0 && x.rows % len == 0, "segment_sum length mismatch");
        let mut v = Matrix::zeros(x.rows / len, x.cols);
        for i in 0..x.rows {
            let o = i / len;
            for (d, &y) in v.row_mut(o).iter_mut().zip(x.row(i)) {
                *d += y;
            }
        }
        self.push(Op::SegmentSum(a, len), v)
    }

    /// Elementwise product with a constant.
    pub fn mul_const(&mut self, a: Var, c: Matrix<T>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), c.shape(), "mul_const shape mismatch");
        for (x, &k) in v.data.iter_mut().zip(&c.data) {
            *x *= k;
        }
        self.push(Op::MulConst(a, c), v)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(idx.len(), x.cols);
        for (o, &i) in idx.iter().enumerate() {
            v.row_mut(o).copy_from_slice(x.row(i));
        }
        self.push(Op::GatherRows(a, idx.to_vec()), v)
    }

    /// Places the rows of each part at the given destination rows of an
    /// `rows×c` result. Unfilled rows are zero.
    pub fn scatter_rows(&mut self, rows: usize, parts: Vec<(Var, Vec<usize>)>) -> Var {
        let cols = self.value(parts[0].0).cols;
        let mut v = Matrix::zeros(rows, cols);
        for (p, idx) in &parts {
            let x = self.value(*p);
            assert_eq!(x.rows, idx.len(), "scatter_rows index mismatch");
            for (src, &dst) in idx.iter().enumerate() {
                v.row_mut(dst).copy_from_slice(x.row(src));
            }
        }
        self.push(Op::ScatterRows(parts), v)
    }

    pub fn column_map(&mut self, a: Var, map: ColumnMap<T>) -> Var {
        let x = self.value(a);
        assert_eq!(map.positive.len(), x.cols);
        assert_eq!(map.offset.shape(), x.shape());
        let mut v = x.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                let r = v.get(i, j);
                let y = if map.positive[j] {
                    positive(r) + map.floor
                } else {
                    r * map.scale[j] + map.offset.get(i, j)
                };
                v.set(i, j, y);
            }
        }
        self.push(Op::ColumnMap(a, Box::new(map)), v)
    }

    /// Reverse sweep seeded with the given output adjoints. Returns one
    /// adjoint slot per node.
    pub fn backward(&self, seeds: &[(Var, Matrix<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, matmul_nt(g, val(*b)));
                accumulate(grads, *b, matmul_tn(val(*a), g));
            }
            Op::MatMulNT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                accumulate(grads, *a, matmul(g, val(*b)));
                accumulate(grads, *b, matmul_tn(g, val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, col_sums(g));
            }
            Op::MulRow(a, r) => {
                let rv = val(*r);
                let av = val(*a);
                let mut ga = g.clone();
                let mut gr = Matrix::zeros(1, g.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        let gij = g.get(i, j);
                        ga.set(i, j, gij * rv.data[j]);
                        gr.data[j] += gij * av.get(i, j);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *r, gr);
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.data.iter_mut().for_each(|x| *x *= *s);
                accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let x = val(*a);
                let mut ga = g.clone();
                for (o, &xi) in ga.data.iter_mut().zip(&x.data) {
                    let s = sigmoid(xi);
                    *o *= s * (T::one() + xi * (T::one() - s));
                }
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.data.iter_mut().zip(&node.value.data) {
                    *o *= y * (T::one() - y);
                }
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let dot = y
                        .row(i)
                        .iter()
                        .zip(g.row(i))
                        .fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for j in 0..y.cols {
                        let p = y.get(i, j);
                        ga.set(i, j, p * (g.get(i, j) - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Standardize(a, inv) => {
                let y = &node.value;
                let n = T::from_usize(y.cols).unwrap();
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let mg = gr.iter().fold(T::zero(), |s, &v| s + v) / n;
                    let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&p, &q)| s + p * q) / n;
                    for j in 0..y.cols {
                        ga.set(i, j, inv[i] * (gr[j] - mg - yr[j] * mgy));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows, x.cols);
                for i in 0..g.rows {
                    ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols;
                    let mut gp = Matrix::zeros(g.rows, c);
                    for i in 0..g.rows {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    accumulate(grads, p, gp);
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = val(p).rows;
                    let gp = Matrix::from_vec(
                        r,
                        g.cols,
                        g.data[off * g.cols..(off + r) * g.cols].to_vec(),
                    );
                    accumulate(grads, p, gp);
                    off += r;
                }
            }
            Op::MaxRows(a, arg) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows, x.cols);
                for (j, &i) in arg.iter().enumerate() {
                    ga.set(i, j, g.data[j]);
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = T::from_usize(x.rows).unwrap();
                let mut ga = Matrix::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    for (o, &q) in ga.row_mut(i).iter_mut().zip(&g.data) {
                        *o = q / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScaleRowsBy(a, s) => {
                let x = val(*a);
                let sv = val(*s);
                let mut ga = g.clone();
                let mut gs = Matrix::zeros(sv.rows, 1);
                for i in 0..x.rows {
                    let k = sv.data[i];
                    let mut acc = T::zero();
                    for (o, &xi) in ga.row_mut(i).iter_mut().zip(x.row(i)) {
                        acc += *o * xi;
                        *o *= k;
                    }
                    gs.data[i] = acc;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *s, gs);
            }
            Op::SegmentSum(a, len) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    ga.row_mut(i).copy_from_slice(g.row(i / len));
                }
                accumulate(grads, *a, ga);
            }
            Op::MulConst(a, c) => {
                let mut ga = g.clone();
                for (o, &k) in ga.data.iter_mut().zip(&c.data) {
                    *o *= k;
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows, x.cols);
                for (o, &i) in idx.iter().enumerate() {
                    for (d, &q) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += q;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterRows(parts) => {
                for (p, idx) in parts {
                    let mut gp = Matrix::zeros(idx.len(), g.cols);
                    for (src, &dst) in idx.iter().enumerate() {
                        gp.row_mut(src).copy_from_slice(g.row(dst));
                    }
                    accumulate(grads, *p, gp);
                }
            }
            Op::ColumnMap(a, map) => {
                let x = val(*a);
                let mut ga = g.clone();
                for i in 0..x.rows {
                    for j in 0..x.cols {
                        let d = if map.positive[j] {
                            positive_grad(x.get(i, j))
                        } else {
                            map.scale[j]
                        };
                        ga.set(i, j, g.get(i, j) * d);
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn col_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols);
    for i in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of parameter `index`, if it took part in the forward pass.
    pub fn param(&self, index: usize) -> Option<&Matrix<T>> {
        self.params.get(&index).and_then(|v| self.of(*v))
    }
}
