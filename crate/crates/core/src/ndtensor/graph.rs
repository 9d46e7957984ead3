//! Eager tape for reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends one node. Node indices are a
//! topological order by construction, so backward is a single reverse sweep.

use super::kernels;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Probability floor applied inside `ln` for cross-entropy and KL.
pub const PROB_FLOOR: f64 = 1e-9;

const LN_EPS: f64 = 1e-5;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Hadamard(Var, Var),
    Scale(Var, E),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<E>,
        count: usize,
    },
    Kl {
        p: Var,
        q: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Mse {
        a: Var,
        b: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    requires_grad: bool,
    op: Op<E>,
}

#[derive(Default)]
pub struct Graph<E: Float = f32> {
    nodes: Vec<Node<E>>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Float> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t`.
    pub fn absorb_into(&self, v: Var, t: &mut Tensor<E>) -> Result<()> {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

fn mask_count(mask: &[bool], n: usize, op: &'static str) -> Result<usize> {
    if mask.len() != n {
        return Err(Error::Dimension {
            op,
            lhs: vec![n],
            rhs: vec![mask.len()],
        });
    }
    let c = mask.iter().filter(|&&m| m).count();
    if c == 0 {
        return Err(Error::contract(format!(
            "{op}: mask selects no supervised positions"
        )));
    }
    Ok(c)
}

impl<E: Float> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Tensors bound earlier are unaffected.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Drops nodes recorded after `len`; vars at or beyond it become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, requires_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf; it carries gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(shape.to_vec(), t.into_data(), false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar(&self, v: Var) -> E {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape invariant")
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
        ))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul_nt")?;
        let (n, k2) = dims2(self.shape(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_nt(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "transpose")?;
        let src = self.value(x);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// Adds a `[1×c]` (or `[c]`) row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "add_row")?;
        if self.value(row).len() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vec![r, c],
                rhs: self.shape(row).to_vec(),
            });
        }
        let b = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(vec![r, c], out, rg, Op::AddRow { x, row }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: E) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale(x, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "layer_norm")?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = E::from_f64(LN_EPS);
        let inv_c = E::one() / E::from_f64(c as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![E::zero(); r * c];
        let mut rstd = vec![E::zero(); r];
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().fold(E::zero(), |a, &v| a + v) * inv_c;
            let var = row
                .iter()
                .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_c;
            let rs = E::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            vec![r, c],
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "softmax_rows")?;
        let xs = self.value(x);
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            kernels::softmax_row(&xs[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, rg, Op::Softmax(x)))
    }

    /// Row lookup into `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = dims2(self.shape(table), "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "gather_rows: id {bad} out of range for {v} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        let (_, c) = dims2(self.shape(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, pc) = dims2(self.shape(p), "concat_rows")?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            rg |= self.rg(p);
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let (r, _) = dims2(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p), "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
            rg |= self.rg(p);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, rg, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(x)))
    }

    /// Mean negative log-likelihood over the rows selected by `mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let count = mask_count(mask, n, "cross_entropy")?;
        let xs = self.value(logits);
        if xs.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("cross_entropy: NaN logits".into()));
        }
        let floor = E::from_f64(PROB_FLOOR);
        let mut probs = vec![E::zero(); n * v];
        let mut total = E::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::contract(format!(
                    "cross_entropy: target {t} outside vocabulary {v}"
                )));
            }
            let p = &mut probs[i * v..(i + 1) * v];
            kernels::softmax_row(&xs[i * v..(i + 1) * v], p);
            total = total - p[t].max(floor).ln();
        }
        let value = total / E::from_f64(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![value],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean over masked rows of `KL(p ‖ q)`. `p` is treated as detached.
    pub fn kl_divergence_rows(&mut self, p: Var, q: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape(p, q, "kl_divergence_rows")?;
        let (n, v) = dims2(self.shape(p), "kl_divergence_rows")?;
        let count = mask_count(mask, n, "kl_divergence_rows")?;
        let floor = E::from_f64(PROB_FLOOR);
        let (ps, qs) = (self.value(p), self.value(q));
        let mut total = E::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            for j in i * v..(i + 1) * v {
                let pi = ps[j];
                if pi > E::zero() {
                    total = total + pi * (pi.max(floor).ln() - qs[j].max(floor).ln());
                }
            }
        }
        let value = total / E::from_f64(count as f64);
        let rg = self.rg(q);
        Ok(self.push(
            vec![1],
            vec![value],
            rg,
            Op::Kl {
                p,
                q,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Mean squared difference over the leading-axis rows selected by `mask`.
    /// Gradient flows into `b` only.
    pub fn mse(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.shape(a)[0];
        let c = self.value(a).len() / n;
        let count = mask_count(mask, n, "mse")?;
        let (xa, xb) = (self.value(a), self.value(b));
        let mut total = E::zero();
        for i in 0..n {
            if mask[i] {
                for j in i * c..(i + 1) * c {
                    let d = xa[j] - xb[j];
                    total = total + d * d;
                }
            }
        }
        let value = total / E::from_f64((count * c) as f64);
        let rg = self.rg(b);
        Ok(self.push(
            vec![1],
            vec![value],
            rg,
            Op::Mse {
                a,
                b,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(E::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = E::from_f64(self.value(x).len() as f64);
        let s = self.value(x).iter().fold(E::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(vec![1], vec![s / n], rg, Op::Mean(x))
    }

    /// Sums scalars left to right, in the order given.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::contract("add_all: no terms"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<E>>], v: Var) -> Option<&'a mut Vec<E>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); n]))
    }

    fn propagate(&self, node: &Node<E>, g: &[E], grads: &mut [Option<Vec<E>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    if *trans_b {
                        kernels::matmul_nn(g, self.value(*b), m, n, k, ga);
                    } else {
                        kernels::matmul_nt(g, self.value(*b), m, n, k, ga);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        kernels::matmul_tn(g, self.value(*a), m, n, k, gb);
                    } else {
                        kernels::matmul_tn(self.value(*a), g, m, k, n, gb);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        kernels::add_into(gv, g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::add_into(gx, g);
                }
                let c = node.shape[1];
                if let Some(gr) = self.slot(grads, *row) {
                    for chunk in g.chunks(c) {
                        kernels::add_into(gr, chunk);
                    }
                }
            }
            Op::Hadamard(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * *s;
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let xs = self.value(*x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * kernels::gelu_grad(xs[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let gv = self.value(*gain).to_vec();
                if let Some(gg) = self.slot(grads, *gain) {
                    for i in 0..r * c {
                        gg[i % c] = gg[i % c] + g[i] * xhat[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for i in 0..r * c {
                        gb[i % c] = gb[i % c] + g[i];
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_c = E::one() / E::from_f64(c as f64);
                    for i in 0..r {
                        let mut mean_d = E::zero();
                        let mut mean_dx = E::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[i * c + j];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dx = mean_dx * inv_c;
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            let k = i * c + j;
                            gx[k] = gx[k] + rstd[i] * (d - mean_d - xhat[k] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.shape[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, (gr, yr)) in g.chunks(c).zip(node.value.chunks(c)).enumerate() {
                        let dot = gr.iter().zip(yr).fold(E::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = node.shape[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        kernels::add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..r {
                            kernels::add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + col..i * total + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = self.shape(*x)[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        kernels::add_into(
                            &mut gx[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::add_into(gx, g);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let floor = E::from_f64(PROB_FLOOR);
                let scale = g[0] / E::from_f64(*count as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        let p = &probs[i * v..(i + 1) * v];
                        if p[t] <= floor {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { E::one() } else { E::zero() };
                            gl[i * v + j] = gl[i * v + j] + scale * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::Kl { p, q, mask, count } => {
                let v = self.shape(*q)[1];
                let floor = E::from_f64(PROB_FLOOR);
                let scale = g[0] / E::from_f64(*count as f64);
                let (ps, qs) = (self.value(*p), self.value(*q));
                if let Some(gq) = self.slot(grads, *q) {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in i * v..(i + 1) * v {
                            if ps[j] > E::zero() && qs[j] > floor {
                                gq[j] = gq[j] - scale * ps[j] / qs[j];
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b, mask, count } => {
                let n = node_rows(self.shape(*a));
                let c = self.value(*a).len() / n;
                let scale = g[0] * E::from_f64(2.0) / E::from_f64((count * c) as f64);
                let (xa, xb) = (self.value(*a), self.value(*b));
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for j in i * c..(i + 1) * c {
                                gb[j] = gb[j] + scale * (xb[j] - xa[j]);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v = *v + g[0]);
                }
            }
            Op::Mean(x) => {
                let n = E::from_f64(self.value(*x).len() as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    let share = g[0] / n;
                    gx.iter_mut().for_each(|v| *v = *v + share);
                }
            }
        }
    }
}

fn node_rows(shape: &[usize]) -> usize {
    shape[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_column() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let col = g.leaf(&t(&[2, 1], &[5.0, 7.0]));
        let d = g.matmul(i, col).unwrap();
        assert_eq!(g.value(d), &[5.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = g.leaf(&t(&[2, 3], &[0.0; 6]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_wrt_a() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[1, 2], &[1.0, 2.0]).with_requires_grad(true));
        let b = g.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        // frozen by central finite differences, step 1e-5
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn hadamard_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.leaf(&t(&[2, 2], &[1.0; 4]));
        let zeros = g.leaf(&t(&[2, 2], &[0.0; 4]));
        let x = g.hadamard(a, ones).unwrap();
        assert_eq!(g.value(x), &[1.0, 2.0, 3.0, 4.0]);
        let z = g.hadamard(a, zeros).unwrap();
        assert_eq!(g.value(z), &[0.0; 4]);
        let p = g.leaf(&t(&[1, 2], &[2.0, 3.0]));
        let q = g.leaf(&t(&[1, 2], &[4.0, 5.0]));
        let r = g.hadamard(p, q).unwrap();
        assert_eq!(g.value(r), &[8.0, 15.0]);
        assert!(g.hadamard(a, p).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[3, 2], &[0.0, 0.0, 1000.0, 0.0, 1f64.ln(), 3f64.ln()]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && v[3] < 1e-300);
        assert!((v[4] - 0.25).abs() < 1e-12 && (v[5] - 0.75).abs() < 1e-12);
        let bad = g.leaf(&t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::new();
        let uniform = g.leaf(&t(&[1, 4], &[0.0; 4]));
        let l = g.cross_entropy(uniform, &[2], &[true]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let sharp = g.leaf(&t(&[1, 3], &[60.0, 0.0, 0.0]));
        let l = g.cross_entropy(sharp, &[0], &[true]).unwrap();
        assert!(g.scalar(l) < 1e-20);

        let a = g.leaf(&t(&[2, 3], &[0.1, 0.2, 0.3, 5.0, -1.0, 2.0]));
        let b = g.leaf(&t(&[2, 3], &[0.1, 0.2, 0.3, -9.0, 4.0, 0.0]));
        let la = g.cross_entropy(a, &[1, 0], &[true, false]).unwrap();
        let lb = g.cross_entropy(b, &[1, 0], &[true, false]).unwrap();
        assert_eq!(g.scalar(la), g.scalar(lb));

        assert!(matches!(
            g.cross_entropy(a, &[1, 0], &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kl_cases() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(&t(&[1, 2], &[1.0, 0.0]));
        let q = g.leaf(&t(&[1, 2], &[0.5, 0.5]));
        let k = g.kl_divergence_rows(p, q, &[true]).unwrap();
        assert!((g.scalar(k) - 2f64.ln()).abs() < 1e-12);
        let same = g.kl_divergence_rows(q, q, &[true]).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let r = g.leaf(&t(&[3, 2], &[0.25, 0.75, 0.25, 0.75, 0.25, 0.75]));
        let k3 = g.kl_divergence_rows(r, r, &[true; 3]).unwrap();
        assert_eq!(g.scalar(k3), 0.0);
    }

    #[test]
    fn mse_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[1], &[2.0]));
        let b = g.leaf(&t(&[1], &[0.0]));
        let m = g.mse(a, b, &[true]).unwrap();
        assert_eq!(g.scalar(m), 4.0);
        let x = g.leaf(&t(&[2, 2], &[1.0, 1.0, 5.0, 5.0]));
        let y = g.leaf(&t(&[2, 2], &[1.0, 1.0, 0.0, 0.0]));
        let masked = g.mse(x, y, &[true, false]).unwrap();
        assert_eq!(g.scalar(masked), 0.0);
        let z = g.leaf(&t(&[3], &[0.0; 3]));
        assert!(g.mse(a, z, &[true]).is_err());
    }

    #[test]
    fn teacher_side_never_gets_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(&t(&[1, 2], &[0.3, 0.7]).with_requires_grad(true));
        let logits = g.leaf(&t(&[1, 2], &[0.1, 0.2]).with_requires_grad(true));
        let q = g.softmax_rows(logits).unwrap();
        let k = g.kl_divergence_rows(p, q, &[true]).unwrap();
        let grads = g.backward(k).unwrap();
        assert!(grads.get(p).is_none());
        assert!(grads.get(logits).is_some());
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::<f64>::new();
        let mut w = t(&[2], &[1.0, -2.0]).with_requires_grad(true);
        let x = g.leaf(&w);
        let h = g.hadamard(x, x).unwrap();
        let s = g.sum(h);
        let grads = g.backward(s).unwrap();
        grads.absorb_into(x, &mut w).unwrap();
        let grads = g.backward(s).unwrap();
        grads.absorb_into(x, &mut w).unwrap();
        assert_eq!(w.grad().unwrap(), &[4.0, -8.0]);
    }

    #[test]
    fn reset_clears_nodes() {
        let mut g = Graph::<f32>::new();
        let w = Tensor::<f32>::ones(&[2, 2]).unwrap();
        g.leaf(&w);
        assert_eq!(g.len(), 1);
        g.reset();
        assert!(g.is_empty());
        assert_eq!(w.data(), &[1.0; 4]);
    }
}
