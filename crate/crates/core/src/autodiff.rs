//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Inputs always precede outputs on the tape, so [`Tape::backward`] can walk
//! the nodes once in reverse order. Tensors are at most two-dimensional; a
//! one-dimensional tensor of length `n` behaves as a single `1 x n` row in the
//! row-wise operations.

use crate::error::{Error, Result};

/// Below this L2 norm a vector is rejected by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, values)
    }

    /// Marks the tensor as a gradient target.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// `(rows, cols)` view; a vector is one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.values[r * cols..(r + 1) * cols]
    }

    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar, got {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
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

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, f64),
    Relu(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    SoftmaxT(Var, f64),
    LogSoftmaxT(Var, f64),
    L2Normalize(Var),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations. Single owner; not shared across threads
/// while recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] writes a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.requiring_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.values
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    /// Smallest `|x|` over all inputs fed to `relu`, i.e. distance to the nearest kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].tensor.values.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    fn record(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        let tensor = Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        };
        self.push(tensor, op, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        Ok(self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        let n = match (sa.as_slice(), sb.as_slice()) {
            ([_, n], [n2]) if n == n2 => *n,
            _ => {
                return Err(Error::Dimension {
                    op: "add_row",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let bv = self.values(bias);
        let out = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        Ok(self.record(sa, out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.values(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, Op::MulScalar(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, out, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.values(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.values(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::Log(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values(a).iter().sum();
        self.record(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.values(a);
        let s = vals.iter().sum::<f64>() / vals.len() as f64;
        self.record(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Row sums: `m x n -> m` (a vector reduces to length 1).
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let vals = self.values(a);
        let out = (0..m)
            .map(|i| vals[i * n..(i + 1) * n].iter().sum())
            .collect();
        Ok(self.record(vec![m], out, Op::SumRows(a), &[a]))
    }

    /// Selects rows (elements, for a vector) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::Parameter(
                "gather_rows needs at least one index".into(),
            ));
        }
        let shape = self.shape(a).to_vec();
        let (rows, width, out_shape) = match shape.as_slice() {
            [n] => (*n, 1, vec![indices.len()]),
            [m, n] => (*m, *n, vec![indices.len(), *n]),
            s => return Err(Error::Shape(format!("gather_rows on rank {}", s.len()))),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Parameter(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let vals = self.values(a);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&vals[i * width..(i + 1) * width]);
        }
        Ok(self.record(out_shape, out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Row-wise softmax of `z / t`, max-shifted.
    pub fn softmax_t(&mut self, a: Var, t: f64) -> Result<Var> {
        check_temperature(t)?;
        let (m, n) = self.value(a).dims2()?;
        let mut out = self.values(a).to_vec();
        for row in out.chunks_mut(n).take(m) {
            softmax_in_place(row, t);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::SoftmaxT(a, t), &[a]))
    }

    /// Row-wise `log softmax(z / t)`.
    pub fn log_softmax_t(&mut self, a: Var, t: f64) -> Result<Var> {
        check_temperature(t)?;
        let (m, n) = self.value(a).dims2()?;
        let mut out = self.values(a).to_vec();
        for row in out.chunks_mut(n).take(m) {
            log_softmax_in_place(row, t);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::LogSoftmaxT(a, t), &[a]))
    }

    /// Scales every row to unit L2 norm. Rows with norm `<= NORM_EPS` are an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let mut out = self.values(a).to_vec();
        for (row, chunk) in out.chunks_mut(n).take(m).enumerate() {
            let norm = l2_norm(chunk);
            if norm <= NORM_EPS {
                return Err(Error::DegenerateVector { row, norm });
            }
            chunk.iter_mut().for_each(|x| *x /= norm);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::L2Normalize(a), &[a]))
    }

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad` leaf.
    ///
    /// Gradients add onto whatever a previous call left behind; call
    /// [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Shape("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        for (i, g) in adj.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let t = &mut self.nodes[i].tensor;
            if !t.requires_grad {
                continue;
            }
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.tensor.values;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = G * B^T
                    let bv = self.values(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                da[r * k + j] += gv * bv[j * n + c];
                            }
                        }
                    }
                    accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let av = self.values(*a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for j in 0..k {
                            let x = av[r * k + j];
                            if x == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                db[j * n + c] += x * g[r * n + c];
                            }
                        }
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.send(adj, *a, || g.to_vec());
                self.send(adj, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(adj, *a, || g.to_vec());
                self.send(adj, *b, || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.values(*a), self.values(*b));
                self.send(adj, *a, || g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.send(adj, *b, || g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, bias) => {
                self.send(adj, *a, || g.to_vec());
                let n = self.shape(*bias)[0];
                self.send(adj, *bias, || {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    db
                });
            }
            Op::MulScalar(a, c) => {
                self.send(adj, *a, || g.iter().map(|x| x * c).collect());
            }
            Op::Relu(a) => {
                let av = self.values(*a);
                self.send(adj, *a, || {
                    g.iter()
                        .zip(av)
                        .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                        .collect()
                });
            }
            Op::Log(a) => {
                let av = self.values(*a);
                self.send(adj, *a, || g.iter().zip(av).map(|(d, x)| d / x).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send(adj, *a, || vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send(adj, *a, || vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let n = *self.shape(*a).last().unwrap();
                self.send(adj, *a, || {
                    g.iter().flat_map(|&d| std::iter::repeat_n(d, n)).collect()
                });
            }
            Op::GatherRows(a, idx) => {
                let numel = self.value(*a).numel();
                let width = if self.shape(*a).len() == 1 {
                    1
                } else {
                    self.shape(*a)[1]
                };
                self.send(adj, *a, || {
                    let mut da = vec![0.0; numel];
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..width {
                            da[src * width + c] += g[r * width + c];
                        }
                    }
                    da
                });
            }
            Op::SoftmaxT(a, t) => {
                let n = *self.shape(*a).last().unwrap();
                self.send(adj, *a, || {
                    let mut da = vec![0.0; out.len()];
                    for ((p, gr), d) in out.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                        let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            d[j] = p[j] * (gr[j] - dot) / t;
                        }
                    }
                    da
                });
            }
            Op::LogSoftmaxT(a, t) => {
                let n = *self.shape(*a).last().unwrap();
                self.send(adj, *a, || {
                    let mut da = vec![0.0; out.len()];
                    for ((ls, gr), d) in out.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            d[j] = (gr[j] - ls[j].exp() * gsum) / t;
                        }
                    }
                    da
                });
            }
            Op::L2Normalize(a) => {
                let n = *self.shape(*a).last().unwrap();
                let av = self.values(*a);
                self.send(adj, *a, || {
                    let mut da = vec![0.0; out.len()];
                    for (((u, gr), d), v) in out
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(da.chunks_mut(n))
                        .zip(av.chunks(n))
                    {
                        let norm = l2_norm(v);
                        let dot: f64 = u.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            d[j] = (gr[j] - u[j] * dot) / norm;
                        }
                    }
                    da
                });
            }
        }
    }

    fn send(&self, adj: &mut [Option<Vec<f64>>], v: Var, grad: impl FnOnce() -> Vec<f64>) {
        if self.needs(v) {
            accumulate(adj, v, grad());
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(g),
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {t}"
        )));
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..k {
            let x = a[r * k + j];
            if x == 0.0 {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
        }
    }
    out
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64], t: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / t).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64], t: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = row.iter().map(|&x| ((x - max) / t).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|x| *x = (*x - max) / t - lse);
}

/// Tempered softmax of a plain slice, without recording anything.
pub fn softmax_t(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, t);
    Ok(out)
}

/// Unit-norm copy of `v`; fails on vectors with norm `<= NORM_EPS`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm <= NORM_EPS {
        return Err(Error::DegenerateVector { row: 0, norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Compares analytic gradients of a scalar function against central differences.
///
/// Returns the max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
/// Failures inside `f` are reported as an infinite error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`finite_diff_check`]; every input is differentiated.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let analytic = (|| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec)
            })
            .collect())
    })();
    let Ok(analytic) = analytic else {
        return f64::INFINITY;
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[ti].values[j];
            work[ti].values[j] = orig + eps;
            let plus = eval(&work);
            work[ti].values[j] = orig - eps;
            let minus = eval(&work);
            work[ti].values[j] = orig;
            let (Ok(plus), Ok(minus)) = (plus, minus) else {
                return f64::INFINITY;
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}
