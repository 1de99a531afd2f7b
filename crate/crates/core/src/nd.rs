//! Dense row-major matrices and a define-by-run tape for reverse-mode
//! gradients.
//!
//! A [`Tape`] is built fresh for every forward pass. Values enter it either
//! as trainable leaves ([`Tape::leaf`]) or as constants ([`Tape::constant`]);
//! every op appends one node whose parents are already on the tape, so the
//! node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use mvhash::nd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
//! let loss = tape.sum(w);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[1.0; 4]);
//! ```

use crate::error::{Error, Result};

/// Row norms below this are treated as degenerate by [`Tape::rowwise_cosine`].
pub const COSINE_EPS: f64 = 1e-12;

/// Dense 2-D matrix of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "expected a 1x1 scalar, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    /// Gathers the given rows into a new matrix, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Plain matrix product without recording.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(shape_pair("matmul", self, other));
        }
        Ok(matmul_nn(self, other))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn shape_pair(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

/// a · b
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, inner, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..inner {
            let av = a.data[i * inner + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

/// a · bᵀ
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows, b.rows, |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()
    })
}

/// aᵀ · b
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for r in 0..a.rows {
        let b_row = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            // subgradient at 0 is taken as 0
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Unary(Var, Activation),
    ScalarScale(Var, Var),
    ScaleConst(Var, f64),
    RowwiseCosine { input: Var, norms: Vec<f64> },
    ConcatCols(Vec<Var>),
    Sum(Var),
    WeightedSqErr { input: Var, target: Tensor, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input; [`Tape::backward`] reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a 1×d bias to every row of an r×d matrix.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(shape_pair("add_row_broadcast", av, bv));
        }
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let ng = self.needs(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_pair("add", av, bv));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_pair("mul", av, bv));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.rows, av.cols, data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn unary(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|x| kind.apply(x));
        let ng = self.needs(&[a]);
        self.push(out, Op::Unary(a, kind), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Activation::Relu)
    }

    /// Multiplies every element of `a` by the 1×1 value `s`.
    pub fn scalar_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "scalar_scale: scale must be 1x1, got {}x{}",
                sv.rows, sv.cols
            )));
        }
        let k = sv.data[0];
        let out = self.value(a).map(|x| x * k);
        let ng = self.needs(&[a, s]);
        Ok(self.push(out, Op::ScalarScale(a, s), ng))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(&[a]);
        self.push(out, Op::ScaleConst(a, c), ng)
    }

    /// S×S matrix of cosine similarities between the rows of `h`.
    pub fn rowwise_cosine(&mut self, h: Var) -> Result<Var> {
        let hv = self.value(h);
        let mut norms = Vec::with_capacity(hv.rows);
        for r in 0..hv.rows {
            let n = hv.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n >= COSINE_EPS) {
                return Err(Error::DegenerateRow { row: r, norm: n });
            }
            norms.push(n);
        }
        let unit = unit_rows(hv, &norms);
        let out = matmul_nt(&unit, &unit);
        let ng = self.needs(&[h]);
        Ok(self.push(out, Op::RowwiseCosine { input: h, norms }, ng))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let rows = self.value(*first).rows;
        for p in parts {
            if self.value(*p).rows != rows {
                return Err(shape_pair("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Sum of all elements as a 1×1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `Σ weights ⊙ (a − target)²` as a 1×1 value. `target` and `weights`
    /// are constants.
    pub fn weighted_sq_err(&mut self, a: Var, target: Tensor, weights: Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != target.shape() {
            return Err(shape_pair("weighted_sq_err", av, &target));
        }
        if av.shape() != weights.shape() {
            return Err(shape_pair("weighted_sq_err", av, &weights));
        }
        let s = av
            .data
            .iter()
            .zip(&target.data)
            .zip(&weights.data)
            .map(|((x, t), w)| w * (x - t) * (x - t))
            .sum();
        let ng = self.needs(&[a]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSqErr {
                input: a,
                target,
                weights,
            },
            ng,
        ))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a 1x1 loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        let leaves = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            leaves,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, matmul_nt(g, self.value(*b)));
                }
                if wants(*b) {
                    send(*b, matmul_tn(self.value(*a), g));
                }
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                if wants(*bias) {
                    let mut col_sum = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in col_sum.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    send(*bias, col_sum);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, hadamard(g, bv));
                }
                if wants(*b) {
                    send(*b, hadamard(g, av));
                }
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = g
                    .data
                    .iter()
                    .zip(x.data.iter().zip(&y.data))
                    .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                send(*a, Tensor { data, ..g.clone_shape() });
            }
            Op::ScalarScale(a, s) => {
                let k = self.value(*s).data[0];
                if wants(*a) {
                    send(*a, g.map(|v| v * k));
                }
                if wants(*s) {
                    let ds = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(x, y)| x * y)
                        .sum();
                    send(*s, Tensor::scalar(ds));
                }
            }
            Op::ScaleConst(a, c) => send(*a, g.map(|v| v * c)),
            Op::RowwiseCosine { input, norms } => {
                send(*input, cosine_backward(self.value(*input), norms, &node.value, g));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if wants(*p) {
                        let part = Tensor::from_fn(g.rows, cols, |r, c| g.get(r, offset + c));
                        send(*p, part);
                    }
                    offset += cols;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Tensor::filled(r, c, g.data[0]));
            }
            Op::WeightedSqErr {
                input,
                target,
                weights,
            } => {
                let scale = 2.0 * g.data[0];
                let x = self.value(*input);
                let data = x
                    .data
                    .iter()
                    .zip(&target.data)
                    .zip(&weights.data)
                    .map(|((xv, t), w)| scale * w * (xv - t))
                    .collect();
                send(*input, Tensor { data, ..x.clone_shape() });
            }
        }
    }
}

impl Tensor {
    // Empty-buffer shell carrying only the shape, for struct-update syntax.
    fn clone_shape(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: Vec::new(),
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

fn unit_rows(h: &Tensor, norms: &[f64]) -> Tensor {
    Tensor::from_fn(h.rows, h.cols, |r, c| h.get(r, c) / norms[r])
}

// With n_i = h_i/|h_i| and C = N Nᵀ:
//   dL/dn_i = Σ_j (G_ij + G_ji) n_j
//   dL/dh_i = (dn_i − (dn_i · n_i) n_i) / |h_i|
fn cosine_backward(h: &Tensor, norms: &[f64], _cos: &Tensor, g: &Tensor) -> Tensor {
    let unit = unit_rows(h, norms);
    let sym = Tensor::from_fn(g.rows, g.cols, |i, j| g.get(i, j) + g.get(j, i));
    let dn = matmul_nn(&sym, &unit);
    let mut out = Tensor::zeros(h.rows, h.cols);
    for i in 0..h.rows {
        let proj: f64 = dn.row(i).iter().zip(unit.row(i)).map(|(a, b)| a * b).sum();
        for c in 0..h.cols {
            out.set(i, c, (dn.get(i, c) - proj * unit.get(i, c)) / norms[i]);
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
    leaves: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `v`; zeros if the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) if self.leaves[v.0] => g.clone(),
            _ => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) if self.leaves[v.0] => g,
            _ => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}
