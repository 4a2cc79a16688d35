use super::kernels::{self, LAYER_NORM_EPS};
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols { input: Var, start: usize },
    Gather { input: Var, indices: Vec<usize> },
    GatherRows { table: Var, rows: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CausalAttention { q: Var, k: Var, v: Var, scale: f64, weights: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Softplus(..) => "softplus",
            Op::Maximum(..) => "maximum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Append-only tape of operations. Inputs always precede their consumers.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            label: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf that receives a gradient when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Adds a named trainable leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true);
        self.nodes[v.0].label = Some(name.to_string());
        v
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape, t.values, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).unwrap()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// First node holding a non-finite value, as `(index, op name, label)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str, Option<&str>)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value
                .iter()
                .any(|v| !v.is_finite())
                .then(|| (i, n.op.name(), n.label.as_deref()))
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, mk(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = kernels::matmul(self.value(a), self.value(b), sa[0], sa[1], sb[1]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![sa[0], sb[1]], value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(index) = self.value(b).iter().position(|&y| y == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.len() != 1 || sr[0] != *sa.last().unwrap() {
            return Err(TensorError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        Ok(())
    }

    /// Adds a length-`n` vector to every row of an `m×n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast_check("add_row", a, row)?;
        let n = self.node(row).value.len();
        let r = &self.node(row).value;
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(shape, value, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of an `m×n` tensor element-wise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast_check("mul_row", a, row)?;
        let n = self.node(row).value.len();
        let r = &self.node(row).value;
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(shape, value, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.value(a).iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(TensorError::Domain { op: "log", index, value });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![m], Op::Mean(a), rg)
    }

    /// Concatenates along the last axis. All inputs must share their row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows = self.node(first).rows();
        let total: usize = parts.iter().map(|&p| self.node(p).cols()).sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let n = self.node(p);
                let c = n.cols();
                value.extend_from_slice(&n.value[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows, len], value, Op::SliceCols { input: a, start }, rg))
    }

    /// Picks entries by flat row-major index into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Contract(format!(
                "gather: index {bad} out of range for {n} entries"
            )));
        }
        if shape.iter().product::<usize>() != indices.len() || indices.is_empty() {
            return Err(TensorError::Dimension {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let src = self.value(a);
        let value = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of a 2-d table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.is_empty() {
            return Err(TensorError::Dimension {
                op: "gather_rows",
                lhs: s,
                rhs: vec![rows.len()],
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(TensorError::Contract(format!(
                "gather_rows: row {bad} out of range for table with {} rows",
                s[0]
            )));
        }
        let cols = s[1];
        let src = self.value(table);
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            value.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![rows.len(), cols],
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    fn row_wise(&mut self, a: Var, f: fn(&[f64]) -> Result<Vec<f64>>, op: Op) -> Result<Var> {
        let n = self.node(a);
        let (rows, cols) = (n.rows(), n.cols());
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            value.extend(f(&n.value[r * cols..(r + 1) * cols])?);
        }
        let shape = n.shape.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, op, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise(a, kernels::softmax, Op::Softmax(a))
    }

    /// Log-softmax over the last axis, computed with log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise(a, kernels::log_softmax, Op::LogSoftmax(a))
    }

    /// Layer normalization of every row, with `eps = 1e-5` under the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.node(x).cols();
        if cols < 2 {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![2],
            });
        }
        self.row_broadcast_check("layer_norm", x, gain)?;
        self.row_broadcast_check("layer_norm", x, bias)?;
        let rows = self.node(x).rows();
        let mut value = Vec::with_capacity(rows * cols);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let (y, h, s) = kernels::layer_norm(
                &self.value(x)[r * cols..(r + 1) * cols],
                self.value(gain),
                self.value(bias),
                LAYER_NORM_EPS,
            );
            value.extend(y);
            xhat.extend(h);
            inv_std.push(s);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Single-head masked attention: row `i` of the output is
    /// `Σ_{j≤i} softmax_j(scale · q_i·k_j) v_j`. Masked pairs are never visited.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        let (sq, sv) = (self.shape(q).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sv.len() != 2 || sv[0] != sq[0] {
            return Err(TensorError::Dimension {
                op: "causal_attention",
                lhs: sq,
                rhs: sv,
            });
        }
        let (len, dk, dv) = (sq[0], sq[1], sv[1]);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut weights = vec![0.0; len * len];
        let mut value = vec![0.0; len * dv];
        for i in 0..len {
            let qi = &qv[i * dk..(i + 1) * dk];
            let scores: Vec<f64> = (0..=i)
                .map(|j| scale * kernels::dot(qi, &kv[j * dk..(j + 1) * dk]))
                .collect();
            let w = kernels::softmax(&scores)?;
            let out = &mut value[i * dv..(i + 1) * dv];
            for (j, &wj) in w.iter().enumerate() {
                weights[i * len + j] = wj;
                for (o, &x) in out.iter_mut().zip(&vv[j * dv..(j + 1) * dv]) {
                    *o += wj * x;
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![len, dv],
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                scale,
                weights,
            },
            rg,
        ))
    }

    /// Attention weights recorded by a [`Graph::causal_attention`] node, `len×len`
    /// row-major with zeros above the diagonal.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.node(v).op {
            Op::CausalAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Reverse pass from a scalar. Gradients of trainable leaves accumulate
    /// across calls; intermediate gradients are local to each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for r in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += g[r * n + c] * bv[p * n + c];
                            gb[p * n + c] += av[r * k + p] * g[r * n + c];
                        }
                        ga[r * k + p] = s;
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(g, y)| g / y).collect());
                send(
                    *b,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::AddRow(a, row) => {
                let n = val(*row).len();
                let mut gr = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi;
                }
                send(*a, g.to_vec());
                send(*row, gr);
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let n = rv.len();
                let mut gr = vec![0.0; n];
                let mut ga = vec![0.0; g.len()];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi * av[i];
                    ga[i] = gi * rv[i % n];
                }
                send(*a, ga);
                send(*row, gr);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Exp(a) => send(*a, g.iter().zip(&node.value).map(|(g, y)| g * y).collect()),
            Op::Log(a) => send(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Square(a) => send(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect()),
            Op::Softplus(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| g * kernels::sigmoid(x))
                    .collect(),
            ),
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if av[i] >= bv[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::Concat(parts) => {
                let rows = node.rows();
                let total = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    send(p, gp);
                }
            }
            Op::SliceCols { input, start } => {
                let src = &self.nodes[input.0];
                let (rows, cols) = (src.rows(), src.cols());
                let len = node.cols();
                let mut gi = vec![0.0; rows * cols];
                for r in 0..rows {
                    gi[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(*input, gi);
            }
            Op::Gather { input, indices } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (gv, &idx) in g.iter().zip(indices) {
                    gi[idx] += gv;
                }
                send(*input, gi);
            }
            Op::GatherRows { table, rows } => {
                let cols = node.cols();
                let mut gt = vec![0.0; val(*table).len()];
                for (out_r, &r) in rows.iter().enumerate() {
                    add_into(&mut gt[r * cols..(r + 1) * cols], &g[out_r * cols..(out_r + 1) * cols]);
                }
                send(*table, gt);
            }
            Op::Softmax(a) => {
                let cols = node.cols();
                let y = &node.value;
                let mut ga = vec![0.0; y.len()];
                for r in 0..node.rows() {
                    let s = r * cols..(r + 1) * cols;
                    let dot = kernels::dot(&g[s.clone()], &y[s.clone()]);
                    for i in s {
                        ga[i] = y[i] * (g[i] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let cols = node.cols();
                let y = &node.value;
                let mut ga = vec![0.0; y.len()];
                for r in 0..node.rows() {
                    let s = r * cols..(r + 1) * cols;
                    let total: f64 = g[s.clone()].iter().sum();
                    for i in s {
                        ga[i] = g[i] - y[i].exp() * total;
                    }
                }
                send(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.cols();
                let n = cols as f64;
                let gv = val(*gain);
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; cols];
                let mut gb = vec![0.0; cols];
                for r in 0..node.rows() {
                    let s = r * cols;
                    let dxhat: Vec<f64> = (0..cols).map(|c| g[s + c] * gv[c]).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = (0..cols).map(|c| dxhat[c] * xhat[s + c]).sum();
                    for c in 0..cols {
                        gg[c] += g[s + c] * xhat[s + c];
                        gb[c] += g[s + c];
                        gx[s + c] = inv_std[r] / n * (n * dxhat[c] - sum_d - xhat[s + c] * sum_dx);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gb);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                scale,
                weights,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let len = node.rows();
                let dk = self.nodes[q.0].cols();
                let dv = node.cols();
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gvv = vec![0.0; vv.len()];
                for i in 0..len {
                    let gout = &g[i * dv..(i + 1) * dv];
                    let w = &weights[i * len..i * len + i + 1];
                    let dw: Vec<f64> = (0..=i)
                        .map(|j| kernels::dot(gout, &vv[j * dv..(j + 1) * dv]))
                        .collect();
                    let wdw = kernels::dot(w, &dw);
                    for j in 0..=i {
                        for c in 0..dv {
                            gvv[j * dv + c] += w[j] * gout[c];
                        }
                        let ds = w[j] * (dw[j] - wdw) * scale;
                        for c in 0..dk {
                            gq[i * dk + c] += ds * kv[j * dk + c];
                            gk[j * dk + c] += ds * qv[i * dk + c];
                        }
                    }
                }
                send(*q, gq);
                send(*k, gk);
                send(*v, gvv);
            }
        }
    }
}
