use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    AvgPoolRows(Var),
    Sum(Var),
    Reshape(Var),
    CrossEntropySum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Norm2(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// The tape: an append-only list of nodes in topological order.
///
/// Leaves created with [`Graph::param`] collect gradients; every other node's
/// gradient is transient and only exists during [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [m, n] => (*m, *n),
        [n] => (1, *n),
        _ => (1, 1),
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        #[cfg(debug_assertions)]
        {
            let inputs_finite = self.inputs(&op).iter().all(|v| {
                self.nodes[v.0].value.iter().all(|x| x.is_finite())
            });
            if inputs_finite && !matches!(op, Op::Leaf) {
                debug_assert!(
                    value.iter().all(|x| x.is_finite()),
                    "non-finite output from {op:?}"
                );
            }
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    #[cfg(debug_assertions)]
    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::SliceCols { x, .. }
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::AvgPoolRows(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Norm2(x) => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropySum { logits, .. } => vec![*logits],
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf that collects gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// A gradient-free copy of `x`: later uses see the same values but no
    /// gradient flows back through them.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Accumulated gradient of a leaf as a tensor; zeros if none was recorded.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].shape.clone();
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape is consistent"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, op, rg)
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

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sx[1];
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale(x, c), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || width == 0 || start + width > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s.to_vec(),
                rhs: vec![start, width],
            });
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, width], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let m = self.shape(first)[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(xs.to_vec()), rg))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (m, n) = dims2(&s);
        if causal && m != n {
            return Err(Error::Contract(format!(
                "causal softmax needs a square score matrix, got {s:?}"
            )));
        }
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { i + 1 } else { n };
            let row = &v[i * n..i * n + width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..i * n + width];
            let mut total = 0.0;
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - max).exp();
                total += *oj;
            }
            o.iter_mut().for_each(|oj| *oj /= total);
        }
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::Softmax(x), rg))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn softmax_rows_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    /// Per-row layer normalization with biased variance and `eps` inside the
    /// square root, followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (m, d) = dims2(&s);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (v, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &v[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Gelu(x), rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise mean of an m×d matrix, as a length-d vector.
    pub fn avg_pool_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "avg_pool_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (m, d) = (s[0], s[1]);
        if m == 0 {
            return Err(Error::EmptySequence("avg_pool_rows"));
        }
        let v = self.value(x);
        let mut out = vec![0.0; d];
        for i in 0..m {
            for (o, &r) in out.iter_mut().zip(&v[i * d..(i + 1) * d]) {
                *o += r;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![d], out, Op::AvgPoolRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![total], Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (m, n) = dims2(&s);
        if s.len() != 2 || targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy_sum",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(Error::Contract(format!(
                "target {bad} out of range for {n} classes"
            )));
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
            if let Some(t) = targets[i] {
                loss += lse - row[t];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Euclidean norm of all entries. The gradient at the origin is taken as 0.
    pub fn norm2(&mut self, x: Var) -> Var {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(x);
        self.push(vec![], vec![n], Op::Norm2(x), rg)
    }

    /// Reverse pass from a one-element `loss`. Leaf gradients accumulate into
    /// whatever earlier passes left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {
                    let acc = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; gout.len()]);
                    acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g);
                }
                Op::MatMul(a, b) => {
                    let (m, n) = dims2(&node.shape);
                    let k = nodes[a.0].shape[1];
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let bv = &nodes[b.0].value;
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gout[r * n + j] * bv[p * n + j];
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let av = &nodes[a.0].value;
                        for r in 0..m {
                            for p in 0..k {
                                let arp = av[r * k + p];
                                let grow = &gout[r * n..(r + 1) * n];
                                for (gbj, &gj) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *gbj += arp * gj;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&gout).for_each(|(x, g)| *x += g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&gout).for_each(|(x, g)| *x += g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&gout).for_each(|(x, g)| *x += g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&gout).for_each(|(x, g)| *x -= g);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let bv = &nodes[b.0].value;
                        for (j, x) in ga.iter_mut().enumerate() {
                            *x += gout[j] * bv[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let av = &nodes[a.0].value;
                        for (j, x) in gb.iter_mut().enumerate() {
                            *x += gout[j] * av[j];
                        }
                    }
                }
                Op::AddRow(x, bias) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gout).for_each(|(a, g)| *a += g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        let n = gb.len();
                        for (j, g) in gout.iter().enumerate() {
                            gb[j % n] += g;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gout).for_each(|(a, g)| *a += c * g);
                    }
                }
                Op::Transpose(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        // node is n×m, x is m×n
                        let (n, m) = dims2(&node.shape);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] += gout[c * m + r];
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, w) = dims2(&node.shape);
                    let n = nodes[x.0].shape[1];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for r in 0..m {
                            for c in 0..w {
                                gx[r * n + start + c] += gout[r * w + c];
                            }
                        }
                    }
                }
                Op::ConcatCols(xs) => {
                    let (m, n) = dims2(&node.shape);
                    let mut offset = 0;
                    for x in xs {
                        let w = nodes[x.0].shape[1];
                        if let Some(gx) = slot(&mut grads, nodes, *x) {
                            for r in 0..m {
                                for c in 0..w {
                                    gx[r * w + c] += gout[r * n + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Softmax(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let (m, n) = dims2(&node.shape);
                        let y = &node.value;
                        for r in 0..m {
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &gout[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                gx[r * n + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (m, d) = dims2(&node.shape);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let gv = &nodes[gamma.0].value;
                        for r in 0..m {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for c in 0..d {
                                let dh = gout[r * d + c] * gv[c];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[r * d + c];
                            }
                            let k = inv_std[r] / d as f64;
                            for c in 0..d {
                                let dh = gout[r * d + c] * gv[c];
                                gx[r * d + c] += k
                                    * (d as f64 * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                            }
                        }
                    }
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for r in 0..m {
                            for c in 0..d {
                                gg[c] += gout[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for r in 0..m {
                            for c in 0..d {
                                gb[c] += gout[r * d + c];
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let xv = &nodes[x.0].value;
                        for (j, a) in gx.iter_mut().enumerate() {
                            let v = xv[j];
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            *a += gout[j] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    if let Some(gt) = slot(&mut grads, nodes, *table) {
                        let d = node.shape[1];
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                gt[id * d + c] += gout[r * d + c];
                            }
                        }
                    }
                }
                Op::AvgPoolRows(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let d = gout.len();
                        let m = gx.len() / d;
                        for r in 0..m {
                            for c in 0..d {
                                gx[r * d + c] += gout[c] / m as f64;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|a| *a += gout[0]);
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gout).for_each(|(a, g)| *a += g);
                    }
                }
                Op::CrossEntropySum {
                    logits,
                    targets,
                    probs,
                } => {
                    if let Some(gl) = slot(&mut grads, nodes, *logits) {
                        let n = probs.len() / targets.len();
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..n {
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                gl[r * n + c] += gout[0] * (probs[r * n + c] - onehot);
                            }
                        }
                    }
                }
                Op::Norm2(x) => {
                    let norm = node.value[0];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        if norm > 0.0 {
                            let xv = &nodes[x.0].value;
                            for (a, &v) in gx.iter_mut().zip(xv) {
                                *a += gout[0] * v / norm;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut g = Graph::new();
        let i2 = g.constant(&Tensor::identity(2));
        let b = g.constant(&m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let sel = g.constant(&m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = g.constant(&m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let out = g.matmul(sel, b).unwrap();
        assert_eq!(g.value(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(&a), g.constant(&b));
        let out = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert_abs_diff_eq!(g.value(out)[i * 2 + j], s, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(&m(&[&[0.0, 0.0], &[2f64.ln(), 0.0], &[1000.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert_abs_diff_eq!(v[2], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[3], 1.0 / 3.0, epsilon = 1e-15);
        assert!((v[4] + v[5] - 1.0).abs() < 1e-12);
        assert!(v[4] > 1.0 - 1e-12 && v[5] < 1e-12);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(vec![3, 3]));
        let y = g.softmax_rows_causal(x).unwrap();
        let v = g.value(y);
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert_abs_diff_eq!(v[6], 1.0 / 3.0, epsilon = 1e-15);
        let rect = g.constant(&Tensor::zeros(vec![2, 3]));
        assert!(g.softmax_rows_causal(rect).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(&Tensor::full(vec![3], 1.0));
        let zeros = g.constant(&Tensor::zeros(vec![3]));
        let x = g.constant(&m(&[&[5.0, 5.0, 5.0], &[2.0, 4.0, 6.0]]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        let v = g.value(y).to_vec();
        assert_eq!(&v[0..3], &[0.0, 0.0, 0.0]);
        let sd = (8.0f64 / 3.0 + 1e-5).sqrt();
        for (j, x) in [2.0, 4.0, 6.0].iter().enumerate() {
            assert_abs_diff_eq!(v[3 + j], (x - 4.0) / sd, epsilon = 1e-10);
        }

        let ones = g.constant(&Tensor::full(vec![2], 1.0));
        let zeros = g.constant(&Tensor::zeros(vec![2]));
        let x = g.constant(&m(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, ones, zeros, 1e-300).unwrap();
        assert_abs_diff_eq!(g.value(y)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y)[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(&m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.avg_pool_rows(x).unwrap();
        assert_eq!(g.value(y), &[2.0, 3.0]);
        let x = g.constant(&m(&[&[7.0, -1.0, 0.5]]));
        let y = g.avg_pool_rows(x).unwrap();
        assert_eq!(g.value(y), &[7.0, -1.0, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&mut rng, 5, 3);
        let x = g.constant(&t);
        let y = g.avg_pool_rows(x).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..5 {
                s += t.at(r, c);
            }
            assert_eq!(g.value(y)[c], s / 5.0);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let t = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let mut g = Graph::new();
        let x = g.param(&t);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(&t);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), t.data());
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // d(x * stopgrad(x))/dx = x
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(vec![1, 8]));
        let l = g.cross_entropy_sum(z, &[Some(3)]).unwrap();
        assert_abs_diff_eq!(g.item(l), 8f64.ln(), epsilon = 1e-12);
        let z = g.constant(&Tensor::zeros(vec![2, 8]));
        let l = g.cross_entropy_sum(z, &[Some(3), None]).unwrap();
        assert_abs_diff_eq!(g.item(l), 8f64.ln(), epsilon = 1e-12);
    }
}
