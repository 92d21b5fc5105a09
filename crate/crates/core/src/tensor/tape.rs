use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Target value that marks a row as inactive in [`Tape::cross_entropy_masked`].
pub const IGNORE_LABEL: i64 = -100;

const RMS_EPS: f64 = 1e-6;
const MASK_FILL: f64 = -1e30;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    CausalMask(Var),
    SliceCols { x: Var, start: usize },
    SelectRow { x: Var, row: usize },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<i64>, probs: Vec<F>, count: usize },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Embedding { .. } => "embedding",
            Op::Silu(_) => "silu",
            Op::Softmax(_) => "softmax_lastdim",
            Op::RmsNorm { .. } => "rms_norm",
            Op::CausalMask(_) => "causal_mask",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRow { .. } => "select_row",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy_masked",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is single-threaded and is normally rebuilt for every training step.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn softmax_row<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Binds a stored parameter as a leaf. Gradients reach the store only if
    /// the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        let node = Node {
            op: Op::Leaf(Some(id)),
            value: p.value().clone(),
            requires_grad: p.trainable(),
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(None),
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), rg)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_bt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMulBt(a, b), Tensor::from_parts(vec![m, n], out), rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), Tensor::from_parts(shape, out), rg)
    }

    /// Adds a vector of length `last_dim` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        self.push(Op::AddBias(x, bias), Tensor::from_parts(shape, out), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), Tensor::from_parts(shape, out), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), Tensor::from_parts(shape, out), rg)
    }

    /// Concatenates matrices with equal row counts along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_parts(vec![rows, total], out),
            rg,
        )
    }

    /// Stacks matrices with equal column counts along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_parts(vec![rows, cols], out),
            rg,
        )
    }

    /// Gathers rows of `table` (`V×d`) into an `n×d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary of size {v}"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), d], out),
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Silu(x), Tensor::from_parts(shape, out), rg)
    }

    /// Softmax over the last dimension with max-subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if c == 0 {
            return Err(Error::Contract("softmax over an empty last dimension".into()));
        }
        let mut out = vec![F::zero(); xv.len()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), Tensor::from_parts(shape, out), rg)
    }

    /// `x / sqrt(mean(x²) + 1e-6) · gain`, row-wise over the last dimension.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(Error::Dimension {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = F::of(RMS_EPS);
        let dn = F::of(d as f64);
        let g = self.value(gain).data();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / d.max(1));
        for row in xv.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / dn;
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gv)| v * r * gv));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain]);
        self.push(
            Op::RmsNorm { x, gain, inv_rms },
            Tensor::from_parts(shape, out),
            rg,
        )
    }

    /// Replaces entries strictly above the diagonal of a square matrix by a
    /// large negative constant, so a following softmax gives them weight 0.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "causal_mask")?;
        if r != c {
            return Err(Error::Dimension {
                op: "causal_mask",
                lhs: vec![r, c],
                rhs: vec![c, r],
            });
        }
        let fill = F::of(MASK_FILL);
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for j in (i + 1)..c {
                out[i * c + j] = fill;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::CausalMask(x), Tensor::from_parts(vec![r, c], out), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Op::SliceCols { x, start },
            Tensor::from_parts(vec![r, len], out),
            rg,
        )
    }

    /// Selects row `row` of a matrix as a `1×c` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "select_row")?;
        if row >= r {
            return Err(Error::Dimension {
                op: "select_row",
                lhs: vec![r, c],
                rhs: vec![row],
            });
        }
        let out = self.value(x).row(row).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Op::SelectRow { x, row },
            Tensor::from_parts(vec![1, c], out),
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// skipping rows whose target is [`IGNORE_LABEL`]. Returns exactly 0 (with
    /// zero gradient) when every row is ignored.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy_masked")?;
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy_masked",
                lhs: vec![n, c],
                rhs: vec![targets.len()],
            });
        }
        for (i, &t) in targets.iter().enumerate() {
            if t != IGNORE_LABEL && (t < 0 || t as usize >= c) {
                return Err(Error::Label {
                    index: i,
                    label: t,
                    classes: c,
                });
            }
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); n * c];
        let mut total = F::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
            if t == IGNORE_LABEL {
                continue;
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            total += lse - row[t as usize];
            count += 1;
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::of(count as f64)
        };
        let rg = self.rg(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Propagates `d loss / d node` back through the tape and accumulates the
    /// result into the gradient buffers of trainable parameters in `store`.
    ///
    /// Gradients are added to whatever the buffers already hold, so calling
    /// this twice without [`ParamStore::zero_grads`] doubles them.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        adj[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(Some(id)) => store.get_mut(*id).accumulate_grad(&g),
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let n = self.value(*b).shape()[1];
                    if self.requires_grad(*a) {
                        let mut da = vec![F::zero(); m * k];
                        gemm_nt(g.data(), self.value(*b).data(), &mut da, m, n, k);
                        self.accum(&mut adj, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![F::zero(); k * n];
                        gemm_tn(self.value(*a).data(), g.data(), &mut db, k, m, n);
                        self.accum(&mut adj, *b, db);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let n = self.value(*b).shape()[0];
                    if self.requires_grad(*a) {
                        let mut da = vec![F::zero(); m * k];
                        gemm_nn(g.data(), self.value(*b).data(), &mut da, m, n, k);
                        self.accum(&mut adj, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![F::zero(); n * k];
                        gemm_tn(g.data(), self.value(*a).data(), &mut db, n, m, k);
                        self.accum(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        self.accum(&mut adj, *a, g.data().to_vec());
                    }
                    if self.requires_grad(*b) {
                        self.accum(&mut adj, *b, g.data().to_vec());
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.requires_grad(*x) {
                        self.accum(&mut adj, *x, g.data().to_vec());
                    }
                    if self.requires_grad(*bias) {
                        let c = g.last_dim();
                        let mut db = vec![F::zero(); c];
                        for row in g.data().chunks(c) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accum(&mut adj, *bias, db);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let d = g
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        self.accum(&mut adj, *a, d);
                    }
                    if self.requires_grad(*b) {
                        let d = g
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        self.accum(&mut adj, *b, d);
                    }
                }
                Op::Scale(a, c) => {
                    let d = g.data().iter().map(|&gv| gv * *c).collect();
                    self.accum(&mut adj, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let total = g.last_dim();
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        if self.requires_grad(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(
                                    &g.data()[r * total + offset..r * total + offset + w],
                                );
                            }
                            self.accum(&mut adj, p, d);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.requires_grad(p) {
                            self.accum(&mut adj, p, g.data()[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.last_dim();
                    let mut dt = vec![F::zero(); tv.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for (dst, &src) in dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                        {
                            *dst += src;
                        }
                    }
                    self.accum(&mut adj, *table, dt);
                }
                Op::Silu(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (F::one() + xv * (F::one() - s))
                        })
                        .collect();
                    self.accum(&mut adj, *x, d);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut d = vec![F::zero(); y.len()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(d.chunks_mut(c))
                    {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    self.accum(&mut adj, *x, d);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    let d = gv.len();
                    let dn = F::of(d as f64);
                    if self.requires_grad(*x) {
                        let mut dx = vec![F::zero(); xv.len()];
                        for (((xr, gr), dxr), &r) in xv
                            .chunks(d)
                            .zip(g.data().chunks(d))
                            .zip(dx.chunks_mut(d))
                            .zip(inv_rms)
                        {
                            let dot: F = xr
                                .iter()
                                .zip(gr)
                                .zip(gv)
                                .map(|((&xi, &gi), &wi)| xi * gi * wi)
                                .sum();
                            let coef = r * r * r * dot / dn;
                            for (((o, &xi), &gi), &wi) in dxr.iter_mut().zip(xr).zip(gr).zip(gv) {
                                *o = r * gi * wi - xi * coef;
                            }
                        }
                        self.accum(&mut adj, *x, dx);
                    }
                    if self.requires_grad(*gain) {
                        let mut dg = vec![F::zero(); d];
                        for ((xr, gr), &r) in xv.chunks(d).zip(g.data().chunks(d)).zip(inv_rms) {
                            for ((o, &xi), &gi) in dg.iter_mut().zip(xr).zip(gr) {
                                *o += gi * xi * r;
                            }
                        }
                        self.accum(&mut adj, *gain, dg);
                    }
                }
                Op::CausalMask(x) => {
                    let c = g.last_dim();
                    let mut d = g.data().to_vec();
                    for i in 0..c {
                        for j in (i + 1)..c {
                            d[i * c + j] = F::zero();
                        }
                    }
                    self.accum(&mut adj, *x, d);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let w = g.last_dim();
                    let mut d = vec![F::zero(); r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    self.accum(&mut adj, *x, d);
                }
                Op::SelectRow { x, row } => {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let mut d = vec![F::zero(); xv.len()];
                    d[row * c..(row + 1) * c].copy_from_slice(g.data());
                    self.accum(&mut adj, *x, d);
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    let d = vec![gv; self.value(*x).len()];
                    self.accum(&mut adj, *x, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let c = self.value(*logits).last_dim();
                    let mut d = vec![F::zero(); probs.len()];
                    if *count > 0 {
                        let s = g.item() / F::of(*count as f64);
                        for (i, &t) in targets.iter().enumerate() {
                            if t == IGNORE_LABEL {
                                continue;
                            }
                            for j in 0..c {
                                d[i * c + j] = probs[i * c + j] * s;
                            }
                            d[i * c + t as usize] -= s;
                        }
                    }
                    self.accum(&mut adj, *logits, d);
                }
            }
        }
        Ok(())
    }

    fn accum(&self, adj: &mut [Option<Tensor<F>>], v: Var, d: Vec<F>) {
        match &mut adj[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` with respect to every trainable
    /// parameter, compared against the tape's analytic gradient.
    fn check_grads(
        store: &mut ParamStore<f64>,
        f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
        tol: f64,
    ) {
        const H: f64 = 1e-5;
        store.zero_grads();
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        tape.backward(loss, store).unwrap();
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable()).map(|(i, _)| i).collect();
        for id in ids {
            let analytic = store.get(id).grad().expect("grad").clone();
            for k in 0..analytic.len() {
                let orig = store.get(id).value().data()[k];
                store.get_mut(id).value_mut().data_mut()[k] = orig + H;
                let mut t = Tape::new();
                let v = f(&mut t, store);
                let up = t.value(v).item();
                store.get_mut(id).value_mut().data_mut()[k] = orig - H;
                let mut t = Tape::new();
                let v = f(&mut t, store);
                let down = t.value(v).item();
                store.get_mut(id).value_mut().data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < tol, "{}[{k}]: analytic {a} numeric {numeric}", store.get(id).name());
            }
        }
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let b = t.constant(Tensor::from_rows(&[&[0.0], &[5.0]]));
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        match err {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[3, 4]), true).unwrap();
        let b = store.add("b", random(&mut rng, &[4, 2]), true).unwrap();
        let w = random(&mut rng, &[3, 2]);
        check_grads(
            &mut store,
            &|t, s| {
                let av = t.param(s, a);
                let bv = t.param(s, b);
                let wv = t.constant(w.clone());
                let p = t.matmul(av, bv).unwrap();
                let q = t.mul(p, wv).unwrap();
                t.sum(q).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax_lastdim(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = t.softmax_lastdim(x).unwrap();
        assert!((t.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(t.value(y).data()[1].abs() < 1e-12);

        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.softmax_lastdim(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((t.value(y).data()[k] - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_full_mask() {
        let mut store = ParamStore::<f64>::new();
        let l = store.add("l", Tensor::from_rows(&[&[0.0, 0.0]]), true).unwrap();
        let mut t = Tape::new();
        let lv = t.param(&store, l);
        let loss = t.cross_entropy_masked(lv, &[0]).unwrap();
        assert!((t.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = store.add("m", random(&mut rng, &[3, 4]), true).unwrap();
        let mut t = Tape::new();
        let mv = t.param(&store, m);
        let loss = t.cross_entropy_masked(mv, &[IGNORE_LABEL; 3]).unwrap();
        assert_eq!(t.value(loss).item(), 0.0);
        t.backward(loss, &mut store).unwrap();
        assert!(store.get(m).grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_label_error_carries_index() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        match t.cross_entropy_masked(x, &[0, 3]).unwrap_err() {
            Error::Label { index, label, classes } => {
                assert_eq!((index, label, classes), (1, 3, 3));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cross_entropy_matches_per_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&mut rng, &[5, 3]);
        let targets = [2i64, 0, IGNORE_LABEL, 1, 1];
        let mut store = ParamStore::new();
        let id = store.add("logits", logits.clone(), true).unwrap();
        let mut t = Tape::new();
        let v = t.param(&store, id);
        let loss = t.cross_entropy_masked(v, &targets).unwrap();
        t.backward(loss, &mut store).unwrap();

        let mut want = 0.0;
        let mut want_grad = vec![0.0; 15];
        for (i, &tg) in targets.iter().enumerate() {
            if tg < 0 {
                continue;
            }
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[tg as usize].exp() / z).ln();
            for j in 0..3 {
                let p = row[j].exp() / z;
                want_grad[i * 3 + j] = (p - if j as i64 == tg { 1.0 } else { 0.0 }) / 4.0;
            }
        }
        want /= 4.0;
        assert!((t.value(loss).item() - want).abs() < 1e-12);
        for (g, w) in store.get(id).grad().unwrap().data().iter().zip(&want_grad) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_cases() {
        let mut t = Tape::<f64>::new();
        let g = t.constant(Tensor::vector(vec![1.0; 4]));
        let x = t.constant(Tensor::vector(vec![1.0; 4]));
        let y = t.rms_norm(x, g).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let x = t.constant(Tensor::vector(vec![0.0; 4]));
        let y = t.rms_norm(x, g).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, &[2, 5]), true).unwrap();
        let g = store.add("g", random(&mut rng, &[5]), true).unwrap();
        let w = random(&mut rng, &[2, 5]);
        check_grads(
            &mut store,
            &|t, s| {
                let xv = t.param(s, x);
                let gv = t.param(s, g);
                let y = t.rms_norm(xv, gv).unwrap();
                let wv = t.constant(w.clone());
                let z = t.mul(y, wv).unwrap();
                t.sum(z).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::vector(vec![3.0, -1.0, 2.0]), true).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let s = t.sum(xv).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(x).grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        assert!(matches!(t.backward(xv, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_only_graph_allocates_no_grads() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0]), false).unwrap();
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let s = t.sum(xv).unwrap();
        t.backward(s, &mut store).unwrap();
        assert!(store.get(x).grad().is_none());
    }

    #[test]
    fn non_finite_forward_is_reported_with_op_name() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::vector(vec![f64::MAX, 1.0]));
        match t.scale(a, 10.0).unwrap_err() {
            Error::NonFinite { op } => assert_eq!(op, "scale"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut t = Tape::<f64>::new();
        let table = t.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(t.embedding(table, &[1, 4]), Err(Error::Input(_))));
    }
}
