//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! information to run its backward rule. `Tape::gradients` replays the rules
//! in reverse recording order; `Tape::backward` additionally folds the leaf
//! gradients into the owning `ParamStore`.

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{KsttError, Result};

/// Handle to a node on a `Tape`. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Recip(Var),
    LnFloor(Var, f64),
    NegLogSigmoid(Var),
    SoftmaxRows(Var),
    RowL2Normalize(Var, f64),
    LayerNormRows(Var, f64),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SumSquares(Var),
    RowSums(Var),
    MeanRows(Var),
    Pick(Var, usize),
    AddN(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every node that needs them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(
            Tensor::new(t.shape().to_vec(), t.into_data()).unwrap(),
            Op::Constant,
            false,
        )
    }

    /// A free variable that is differentiated but not owned by a `ParamStore`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(
            Tensor::new(t.shape().to_vec(), t.into_data()).unwrap(),
            Op::Input,
            true,
        )
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let value = Tensor::new(src.shape().to_vec(), src.data().to_vec()).unwrap();
        self.push(value, Op::Param(id), true)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(KsttError::dim(
                "matmul",
                format!("cannot multiply {} by {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let out = transpose_raw(t.data(), m, n);
        let ng = self.needs(a);
        self.push(Tensor::matrix(n, m, out).unwrap(), Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(KsttError::dim(
                op,
                format!("shapes {} and {} differ", shape_str(ta), shape_str(tb)),
            ));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        a: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (m, n) = ta.dims2();
        if tr.len() != n {
            return Err(KsttError::dim(
                op_name,
                format!(
                    "row of shape {} does not broadcast over {}",
                    shape_str(tr),
                    shape_str(ta)
                ),
            ));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(ta.row(i).iter().zip(tr.data()).map(|(&x, &y)| f(x, y)));
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, op, ng))
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a ⊙ row` with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    // ---- elementwise nonlinearities ----

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::LnFloor(a, floor), |x| x.max(floor).ln())
    }

    /// `-ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn neg_log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::NegLogSigmoid(a), neg_log_sigmoid)
    }

    // ---- row-wise reductions / normalizations ----

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(KsttError::Contract("softmax input must be finite".into()));
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|&x| (x - mx).exp()));
            let z: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|x| *x /= z);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, _) = t.dims2();
        let mut data = Vec::with_capacity(t.len());
        for i in 0..m {
            let row = t.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            data.extend(row.iter().map(|x| x / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(value, Op::RowL2Normalize(a, eps), ng)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut data = Vec::with_capacity(t.len());
        for i in 0..m {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(value, Op::LayerNormRows(a, eps), ng)
    }

    // ---- indexing / layout ----

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if indices.is_empty() {
            return Err(KsttError::dim("gather_rows", "no rows requested"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(KsttError::dim(
                "gather_rows",
                format!("row {bad} out of range for {}", shape_str(t)),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(indices.len(), n, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if len == 0 || start + len > m {
            return Err(KsttError::dim(
                "slice_rows",
                format!(
                    "rows {start}..{} out of range for {}",
                    start + len,
                    shape_str(t)
                ),
            ));
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::matrix(len, n, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if len == 0 || start + len > n {
            return Err(KsttError::dim(
                "slice_cols",
                format!(
                    "cols {start}..{} out of range for {}",
                    start + len,
                    shape_str(t)
                ),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(KsttError::dim("concat_cols", "nothing to concatenate"));
        };
        let (m, _) = self.nodes[first.0].value.dims2();
        let mut total = 0;
        for p in parts {
            let (pm, pn) = self.nodes[p.0].value.dims2();
            if pm != m {
                return Err(KsttError::dim(
                    "concat_cols",
                    format!("row counts {m} and {pm} differ"),
                ));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(shape.to_vec(), t.data().to_vec()).map_err(|_| {
            KsttError::dim(
                "reshape",
                format!("cannot view {} as {shape:?}", shape_str(t)),
            )
        })?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum_squares();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    /// Sum of each row, as a rank-1 tensor of length `rows`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, _) = t.dims2();
        let data = (0..m).map(|i| t.row(i).iter().sum()).collect();
        let ng = self.needs(a);
        self.push(Tensor::vector(data), Op::RowSums(a), ng)
    }

    /// Column means, as a `1 × cols` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut data = vec![0.0; n];
        for i in 0..m {
            data.iter_mut()
                .zip(t.row(i))
                .for_each(|(d, x)| *d += x / m as f64);
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(1, n, data).unwrap(), Op::MeanRows(a), ng)
    }

    /// Selects one element (flat row-major index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if index >= t.len() {
            return Err(KsttError::dim(
                "pick",
                format!("index {index} out of range for {}", shape_str(t)),
            ));
        }
        let v = t.data()[index];
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index), ng))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(KsttError::dim("add_n", "nothing to add"));
        };
        let mut acc = self.nodes[first.0].value.clone();
        for p in &parts[1..] {
            let t = &self.nodes[p.0].value;
            if t.shape() != acc.shape() {
                return Err(KsttError::dim(
                    "add_n",
                    format!("shapes {} and {} differ", shape_str(&acc), shape_str(t)),
                ));
            }
            acc.data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(a, b)| *a += b);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(acc, Op::AddN(parts.to_vec()), ng))
    }

    /// Inverted dropout: zeroes entries with probability `ratio` and rescales
    /// survivors by `1 / (1 - ratio)`. The mask is recorded as a constant.
    pub fn dropout(&mut self, a: Var, ratio: f64, rng: &mut impl Rng) -> Result<Var> {
        if ratio <= 0.0 {
            return Ok(a);
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let keep = 1.0 / (1.0 - ratio);
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < ratio { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    // ---- reverse pass ----

    /// Gradients of the scalar `loss` with respect to every differentiable node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(KsttError::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(lv)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse pass and accumulates leaf gradients into `store`.
    /// Calling it twice without clearing the store's gradients accumulates.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                if self.needs(*a) {
                    // g · bᵀ
                    let ga = self.grad_slot(*a, grads);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[r * k + p] += dot(grow, brow);
                        }
                    }
                }
                if self.needs(*b) {
                    // aᵀ · g
                    let gb = self.grad_slot(*b, grads);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av != 0.0 {
                                axpy(av, grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                let gt = transpose_raw(g, n, m);
                add_into(self.grad_slot(*a, grads), &gt);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(self.grad_slot(*a, grads), g);
                }
                if self.needs(*b) {
                    add_into(self.grad_slot(*b, grads), g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(self.grad_slot(*a, grads), g);
                }
                if self.needs(*b) {
                    self.grad_slot(*b, grads)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = self.grad_slot(*a, grads);
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if self.needs(*b) {
                    let gb = self.grad_slot(*b, grads);
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.value(*a).dims2();
                if self.needs(*a) {
                    add_into(self.grad_slot(*a, grads), g);
                }
                if self.needs(*row) {
                    let gr = self.grad_slot(*row, grads);
                    for r in 0..m {
                        add_into(gr, &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let (m, n) = ta.dims2();
                if self.needs(*a) {
                    let ga = self.grad_slot(*a, grads);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[r * n + c] * tr.data()[c];
                        }
                    }
                }
                if self.needs(*row) {
                    let gr = self.grad_slot(*row, grads);
                    for r in 0..m {
                        for c in 0..n {
                            gr[c] += g[r * n + c] * ta.data()[r * n + c];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                axpy(*c, g, self.grad_slot(*a, grads));
            }
            Op::AddScalar(a) => add_into(self.grad_slot(*a, grads), g),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let ga = self.grad_slot(*a, grads);
                for j in 0..g.len() {
                    ga[j] += if x[j] >= 0.0 { g[j] } else { slope * g[j] };
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = self.grad_slot(*a, grads);
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Sin(a) => {
                let x = self.value(*a).data();
                let ga = self.grad_slot(*a, grads);
                for j in 0..g.len() {
                    ga[j] += g[j] * x[j].cos();
                }
            }
            Op::Cos(a) => {
                let x = self.value(*a).data();
                let ga = self.grad_slot(*a, grads);
                for j in 0..g.len() {
                    ga[j] -= g[j] * x[j].sin();
                }
            }
            Op::Recip(a) => {
                let y = out.data();
                let ga = self.grad_slot(*a, grads);
                for j in 0..g.len() {
                    ga[j] -= g[j] * y[j] * y[j];
                }
            }
            Op::LnFloor(a, floor) => {
                let x = self.value(*a).data();
                let ga = self.grad_slot(*a, grads);
                for j in 0..g.len() {
                    if x[j] >= *floor {
                        ga[j] += g[j] / x[j];
                    }
                }
            }
            Op::NegLogSigmoid(a) => {
                let x = self.value(*a).data();
                let ga = self.grad_slot(*a, grads);
                for j in 0..g.len() {
                    // d/dx −ln σ(x) = σ(x) − 1 = −σ(−x)
                    ga[j] -= g[j] * sigmoid(-x[j]);
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2();
                let y = out.data();
                let ga = self.grad_slot(*a, grads);
                for r in 0..m {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let s = dot(yr, gr);
                    for c in 0..n {
                        ga[r * n + c] += yr[c] * (gr[c] - s);
                    }
                }
            }
            Op::RowL2Normalize(a, eps) => {
                let x = self.value(*a);
                let (m, n) = x.dims2();
                let y = out.data();
                let ga = self.grad_slot(*a, grads);
                for r in 0..m {
                    let xr = x.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    if norm > *eps {
                        let s = dot(yr, gr);
                        for c in 0..n {
                            ga[r * n + c] += (gr[c] - yr[c] * s) / norm;
                        }
                    } else {
                        for c in 0..n {
                            ga[r * n + c] += gr[c] / eps;
                        }
                    }
                }
            }
            Op::LayerNormRows(a, eps) => {
                let x = self.value(*a);
                let (m, n) = x.dims2();
                let y = out.data();
                let ga = self.grad_slot(*a, grads);
                let nf = n as f64;
                for r in 0..m {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let gmean = gr.iter().sum::<f64>() / nf;
                    let gy = dot(gr, yr) / nf;
                    for c in 0..n {
                        ga[r * n + c] += inv * (gr[c] - gmean - yr[c] * gy);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let (_, n) = self.value(*a).dims2();
                let ga = self.grad_slot(*a, grads);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut ga[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::SliceRows(a, start) => {
                let (_, n) = self.value(*a).dims2();
                let ga = self.grad_slot(*a, grads);
                add_into(&mut ga[start * n..start * n + g.len()], g);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2();
                let len = g.len() / m;
                let ga = self.grad_slot(*a, grads);
                for r in 0..m {
                    add_into(
                        &mut ga[r * n + start..r * n + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                for p in parts {
                    let (_, pn) = self.value(*p).dims2();
                    if self.needs(*p) {
                        let gp = self.grad_slot(*p, grads);
                        for r in 0..m {
                            add_into(
                                &mut gp[r * pn..(r + 1) * pn],
                                &g[r * total + offset..r * total + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::Reshape(a) => add_into(self.grad_slot(*a, grads), g),
            Op::Sum(a) => {
                let g0 = g[0];
                self.grad_slot(*a, grads).iter_mut().for_each(|d| *d += g0);
            }
            Op::SumSquares(a) => {
                let x = self.value(*a).data();
                axpy(2.0 * g[0], x, self.grad_slot(*a, grads));
            }
            Op::RowSums(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = self.grad_slot(*a, grads);
                for r in 0..m {
                    ga[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += g[r]);
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = self.grad_slot(*a, grads);
                for r in 0..m {
                    axpy(1.0 / m as f64, g, &mut ga[r * n..(r + 1) * n]);
                }
            }
            Op::Pick(a, index) => {
                self.grad_slot(*a, grads)[*index] += g[0];
            }
            Op::AddN(parts) => {
                for p in parts {
                    if self.needs(*p) {
                        add_into(self.grad_slot(*p, grads), g);
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}
