//! Eager reverse-mode differentiation over a fixed primitive set.
//!
//! Each operation evaluates when it is recorded; `backward` replays the
//! tape in reverse. Values and gradients accumulate in sequential index
//! order, so identical inputs produce bit-identical outputs on one
//! platform.

use super::kernels::{col_sum, matmul_nn, matmul_nt, matmul_tn};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Primitive kinds accepted by [`Graph::eval`].
///
/// Attribute-free inputs (tensors) arrive through the `inputs` slice of
/// `eval`; structural attributes live on the variant.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// inputs: x (r,k) or (k), w (k,n), b (n)
    Affine,
    /// inputs: x, and optionally gamma (c), beta (c)
    LayerNorm { eps: f64 },
    /// inputs: x; softmax over the last dimension, per row
    Softmax,
    /// inputs: q (l,d), k (l,d), v (l,d), mask (l,l); additive mask of {0, -inf}
    Attention { heads: usize },
    /// inputs: x
    Gelu,
    /// inputs: table (vocab, d); gathers `ids` rows
    Embed { ids: Vec<usize> },
    /// inputs: 1+ tensors; rank-1 inputs append into one vector, otherwise
    /// rows stack (rank-1 counts as a single row)
    Concat,
    /// inputs: x -> scalar
    SumAll,
    /// inputs: x -> scalar
    MeanAll,
    /// inputs: x (r,c) -> (1,c)
    MeanRows,
    /// inputs: x (r,c) -> (len,c)
    SliceRows { start: usize, len: usize },
    /// no tensor inputs; constant (len(ids), depth) indicator matrix
    OneHot { ids: Vec<usize>, depth: usize },
    /// inputs: a, b (same shape)
    Add,
    /// inputs: a, b (same shape)
    Sub,
    /// inputs: a, b (same shape), elementwise product
    Mul,
    /// inputs: x; multiply by a constant
    Scale { c: f64 },
    /// inputs: x
    Abs,
    /// inputs: x (strictly positive)
    Log,
    /// inputs: x
    Sigmoid,
    /// inputs: x
    Clamp { lo: f64, hi: f64 },
    /// inputs: x; same element count
    Reshape { shape: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Affine => "affine",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Softmax => "softmax",
            Primitive::Attention { .. } => "attention",
            Primitive::Gelu => "gelu",
            Primitive::Embed { .. } => "embed",
            Primitive::Concat => "concat",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
            Primitive::MeanRows => "mean_rows",
            Primitive::SliceRows { .. } => "slice_rows",
            Primitive::OneHot { .. } => "one_hot",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale { .. } => "scale",
            Primitive::Abs => "abs",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Reshape { .. } => "reshape",
        }
    }
}

enum Op<S: Scalar> {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        eps: S,
    },
    Softmax {
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        /// saved softmax probabilities, heads * l * l
        probs: Vec<S>,
    },
    Gelu {
        x: NodeId,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    SumAll {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    MeanRows {
        x: NodeId,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    OneHot,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: S,
    },
    Abs {
        x: NodeId,
    },
    Log {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: S,
        hi: S,
    },
    Reshape {
        x: NodeId,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<S: Scalar> {
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a node, if any was produced.
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.by_node[id.0].as_deref()
    }
}

/// Eager evaluation tape.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf whose gradient will be tracked.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a constant leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_finite(&self, op: &str, id: NodeId) -> Result<()> {
        if self.nodes[id.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    fn t(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    // ── primitive dispatch ──────────────────────────────────────────

    /// Evaluate one primitive over already-inserted nodes.
    pub fn eval(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |want: usize| -> Result<()> {
            if inputs.len() == want {
                Ok(())
            } else {
                Err(Error::shape(
                    prim.name(),
                    format!("expected {want} inputs, got {}", inputs.len()),
                ))
            }
        };
        match &prim {
            Primitive::Affine => {
                arity(3)?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            Primitive::LayerNorm { eps } => {
                let eps = S::from_f(*eps);
                match inputs.len() {
                    1 => self.layer_norm(inputs[0], None, None, eps),
                    3 => self.layer_norm(inputs[0], Some(inputs[1]), Some(inputs[2]), eps),
                    n => Err(Error::shape(
                        "layer_norm",
                        format!("expected 1 or 3 inputs, got {n}"),
                    )),
                }
            }
            Primitive::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            Primitive::Attention { heads } => {
                arity(4)?;
                self.attention(inputs[0], inputs[1], inputs[2], inputs[3], *heads)
            }
            Primitive::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            Primitive::Embed { ids } => {
                arity(1)?;
                self.embed(inputs[0], ids.clone())
            }
            Primitive::Concat => self.concat(inputs),
            Primitive::SumAll => {
                arity(1)?;
                self.sum_all(inputs[0])
            }
            Primitive::MeanAll => {
                arity(1)?;
                self.mean_all(inputs[0])
            }
            Primitive::MeanRows => {
                arity(1)?;
                self.mean_rows(inputs[0])
            }
            Primitive::SliceRows { start, len } => {
                arity(1)?;
                self.slice_rows(inputs[0], *start, *len)
            }
            Primitive::OneHot { ids, depth } => {
                arity(0)?;
                self.one_hot(ids, *depth)
            }
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Scale { c } => {
                arity(1)?;
                self.scale(inputs[0], S::from_f(*c))
            }
            Primitive::Abs => {
                arity(1)?;
                self.abs(inputs[0])
            }
            Primitive::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            Primitive::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            Primitive::Clamp { lo, hi } => {
                arity(1)?;
                self.clamp(inputs[0], S::from_f(*lo), S::from_f(*hi))
            }
            Primitive::Reshape { shape } => {
                arity(1)?;
                self.reshape(inputs[0], shape.clone())
            }
        }
    }

    // ── individual primitives ───────────────────────────────────────

    /// x·W + b. Rank-1 x stays rank-1.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_finite("affine", x)?;
        self.check_finite("affine", w)?;
        self.check_finite("affine", b)?;
        let (r, k) = self.t(x).dims2()?;
        let (wr, wc) = self.t(w).dims2()?;
        if self.t(w).shape().len() != 2 || wr != k {
            return Err(Error::shape(
                "affine",
                format!(
                    "x {:?} is incompatible with w {:?}",
                    self.t(x).shape(),
                    self.t(w).shape()
                ),
            ));
        }
        if self.t(b).numel() != wc {
            return Err(Error::shape(
                "affine",
                format!("bias {:?} does not match w {:?}", self.t(b).shape(), self.t(w).shape()),
            ));
        }
        let mut out = vec![S::zero(); r * wc];
        for i in 0..r {
            out[i * wc..(i + 1) * wc].copy_from_slice(self.t(b).data());
        }
        matmul_nn(self.t(x).data(), self.t(w).data(), &mut out, r, k, wc);
        let shape = if self.t(x).shape().len() == 1 {
            vec![wc]
        } else {
            vec![r, wc]
        };
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Affine { x, w, b }, rg))
    }

    /// Per-row layer normalization over the last dimension.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        eps: S,
    ) -> Result<NodeId> {
        self.check_finite("layer_norm", x)?;
        let (r, c) = self.t(x).dims2()?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if let Some(id) = id {
                self.check_finite("layer_norm", id)?;
                if self.t(id).numel() != c {
                    return Err(Error::shape(
                        "layer_norm",
                        format!("{name} {:?} does not match row width {c}", self.t(id).shape()),
                    ));
                }
            }
        }
        let xv = self.t(x).data();
        let mut out = vec![S::zero(); r * c];
        let cn = S::from_f(c as f64);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / cn;
            let var = row
                .iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                / cn;
            let inv = (var + eps).sqrt().recip();
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = (row[j] - mean) * inv;
            }
        }
        if let Some(g) = gamma {
            let gv = self.t(g).data();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = out[i * c + j] * gv[j];
                }
            }
        }
        if let Some(b) = beta {
            let bv = self.t(b).data();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = out[i * c + j] + bv[j];
                }
            }
        }
        let mut ids = vec![x];
        ids.extend(gamma);
        ids.extend(beta);
        let rg = self.needs_grad(&ids);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::LayerNorm { x, gamma, beta, eps },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction. -inf entries map to exactly 0.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        // -inf is allowed here (masked logits); NaN and +inf are not.
        if self
            .t(x)
            .data()
            .iter()
            .any(|v| v.is_nan() || *v == S::infinity())
        {
            return Err(Error::NonFinite {
                op: "softmax".to_string(),
            });
        }
        let (r, c) = self.t(x).dims2()?;
        let xv = self.t(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c])?;
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::Softmax { x },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with an additive mask.
    ///
    /// q, k, v are (l, d) with d divisible by `heads`; mask is (l, l) with
    /// entries in {0, -inf}. Scale is 1/sqrt(d/heads).
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        self.check_finite("attention", q)?;
        self.check_finite("attention", k)?;
        self.check_finite("attention", v)?;
        if !self.t(mask).is_valid_mask() {
            return Err(Error::InvalidMask {
                op: "attention".to_string(),
            });
        }
        let (l, d) = self.t(q).dims2()?;
        for (name, id) in [("k", k), ("v", v)] {
            let (rl, rd) = self.t(id).dims2()?;
            if (rl, rd) != (l, d) {
                return Err(Error::shape(
                    "attention",
                    format!("{name} {:?} does not match q {:?}", self.t(id).shape(), self.t(q).shape()),
                ));
            }
        }
        let (ml, mc) = self.t(mask).dims2()?;
        if (ml, mc) != (l, l) {
            return Err(Error::shape(
                "attention",
                format!("mask {:?} must be ({l},{l})", self.t(mask).shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = S::from_f(1.0 / (dh as f64).sqrt());

        let qv = self.t(q).data();
        let kv = self.t(k).data();
        let vv = self.t(v).data();
        let maskv = self.t(mask).data().to_vec();

        let mut out = vec![S::zero(); l * d];
        let mut probs = vec![S::zero(); heads * l * l];
        let mut qh = vec![S::zero(); l * dh];
        let mut kh = vec![S::zero(); l * dh];
        let mut vh = vec![S::zero(); l * dh];
        let mut scores = vec![S::zero(); l * l];
        let mut oh = vec![S::zero(); l * dh];
        for h in 0..heads {
            gather_head(qv, &mut qh, l, d, h, dh);
            gather_head(kv, &mut kh, l, d, h, dh);
            gather_head(vv, &mut vh, l, d, h, dh);
            scores.iter_mut().for_each(|s| *s = S::zero());
            matmul_nt(&qh, &kh, &mut scores, l, dh, l);
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            for i in 0..l {
                let srow = &mut scores[i * l..(i + 1) * l];
                for j in 0..l {
                    srow[j] = srow[j] * scale + maskv[i * l + j];
                }
                softmax_row(srow, &mut p[i * l..(i + 1) * l])?;
            }
            oh.iter_mut().for_each(|s| *s = S::zero());
            matmul_nn(p, &vh, &mut oh, l, l, dh);
            scatter_head(&oh, &mut out, l, d, h, dh);
        }
        let rg = self.needs_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::from_vec(vec![l, d], out)?,
            Op::Attention { q, k, v, heads, probs },
            rg,
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("gelu", x)?;
        let out: Vec<S> = self.t(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::Gelu { x },
            rg,
        ))
    }

    /// Gather rows of an embedding table.
    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.check_finite("embed", table)?;
        let (vocab, d) = self.t(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::shape("embed", "empty id list".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embed",
                format!("id {bad} out of range for vocab {vocab}"),
            ));
        }
        let tv = self.t(table).data();
        let mut out = vec![S::zero(); ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            Tensor::from_vec(vec![ids.len(), d], out)?,
            Op::Embed { table, ids },
            rg,
        ))
    }

    /// Concatenate tensors. All rank-1 inputs append into one vector;
    /// otherwise inputs stack as rows (rank-1 counts as a single row).
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        for &p in parts {
            self.check_finite("concat", p)?;
        }
        let all_rank1 = parts.iter().all(|&p| self.t(p).shape().len() == 1);
        if all_rank1 {
            // vector append
            let total: usize = parts.iter().map(|&p| self.t(p).numel()).sum();
            let mut out = Vec::with_capacity(total);
            for &p in parts {
                out.extend_from_slice(self.t(p).data());
            }
            let rg = self.needs_grad(parts);
            return Ok(self.push(
                Tensor::from_vec(vec![total], out)?,
                Op::Concat { parts: parts.to_vec() },
                rg,
            ));
        }
        let (_, c0) = self.t(parts[0]).dims2()?;
        let mut rows = 0usize;
        for &p in parts {
            let (r, c) = self.t(p).dims2()?;
            if c != c0 {
                return Err(Error::shape(
                    "concat",
                    format!("row width {c} != {c0} in {:?}", self.t(p).shape()),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c0);
        for &p in parts {
            out.extend_from_slice(self.t(p).data());
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Tensor::from_vec(vec![rows, c0], out)?,
            Op::Concat { parts: parts.to_vec() },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("sum_all", x)?;
        let s = self.t(x).data().iter().fold(S::zero(), |a, &v| a + v);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, rg))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("mean_all", x)?;
        let n = S::from_f(self.t(x).numel() as f64);
        let s = self.t(x).data().iter().fold(S::zero(), |a, &v| a + v) / n;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { x }, rg))
    }

    /// Column-wise mean: (r,c) -> (1,c).
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("mean_rows", x)?;
        let (r, c) = self.t(x).dims2()?;
        let mut out = vec![S::zero(); c];
        col_sum(self.t(x).data(), &mut out, r, c);
        let rn = S::from_f(r as f64);
        out.iter_mut().for_each(|v| *v = *v / rn);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_vec(vec![1, c], out)?, Op::MeanRows { x }, rg))
    }

    /// Contiguous row slice: (r,c) -> (len,c).
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_finite("slice_rows", x)?;
        let (r, c) = self.t(x).dims2()?;
        if start + len > r || len == 0 {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for {r}", start + len),
            ));
        }
        let out = self.t(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(vec![len, c], out)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Constant indicator matrix (len(ids), depth). Carries no gradient.
    pub fn one_hot(&mut self, ids: &[usize], depth: usize) -> Result<NodeId> {
        if depth == 0 || ids.is_empty() {
            return Err(Error::shape("one_hot", "empty ids or zero depth".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= depth) {
            return Err(Error::shape(
                "one_hot",
                format!("id {bad} out of range for depth {depth}"),
            ));
        }
        let mut out = vec![S::zero(); ids.len() * depth];
        for (row, &id) in ids.iter().enumerate() {
            out[row * depth + id] = S::one();
        }
        Ok(self.push(
            Tensor::from_vec(vec![ids.len(), depth], out)?,
            Op::OneHot,
            false,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: impl Fn(NodeId, NodeId) -> Op<S>,
    ) -> Result<NodeId> {
        self.check_finite(name, a)?;
        self.check_finite(name, b)?;
        if self.t(a).shape() != self.t(b).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.t(a).shape(), self.t(b).shape()),
            ));
        }
        let out: Vec<S> = self
            .t(a)
            .data()
            .iter()
            .zip(self.t(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(self.t(a).shape().to_vec(), out)?,
            op(a, b),
            rg,
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        self.check_finite("scale", x)?;
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale".to_string() });
        }
        let out: Vec<S> = self.t(x).data().iter().map(|&v| v * c).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::Scale { x, c },
            rg,
        ))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("abs", x)?;
        let out: Vec<S> = self.t(x).data().iter().map(|&v| v.abs()).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::Abs { x },
            rg,
        ))
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("log", x)?;
        if self.t(x).data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::NonFinite { op: "log".to_string() });
        }
        let out: Vec<S> = self.t(x).data().iter().map(|&v| v.ln()).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::Log { x },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("sigmoid", x)?;
        let out: Vec<S> = self
            .t(x)
            .data()
            .iter()
            .map(|&v| S::one() / (S::one() + (-v).exp()))
            .collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::Sigmoid { x },
            rg,
        ))
    }

    pub fn clamp(&mut self, x: NodeId, lo: S, hi: S) -> Result<NodeId> {
        self.check_finite("clamp", x)?;
        if lo > hi {
            return Err(Error::shape("clamp", format!("lo {lo} > hi {hi}")));
        }
        let out: Vec<S> = self
            .t(x)
            .data()
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(self.t(x).shape().to_vec(), out)?,
            Op::Clamp { x, lo, hi },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check_finite("reshape", x)?;
        let numel: usize = shape.iter().product();
        if numel != self.t(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.t(x).shape(), shape),
            ));
        }
        let out = self.t(x).data().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Reshape { x }, rg))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Gradients start from zero on
    /// every call; nodes with `requires_grad == false` receive none.
    pub fn backward(&self, out: NodeId) -> Result<Gradients<S>> {
        let out_t = self.value(out);
        if !out_t.is_scalar() {
            return Err(Error::NonScalarBackprop {
                shape: out_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![S::one()]);
        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads)?;
            // keep the gradient available for inspection
            grads[idx] = Some(dy);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], id: NodeId, contrib: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib.iter()) {
                    *gi = *gi + ci;
                }
            }
            None => {
                *slot = Some(contrib.to_vec());
            }
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        dy: &[S],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf | Op::OneHot => {}
            Op::Affine { x, w, b } => {
                let (r, k) = self.t(*x).dims2()?;
                let (_, n) = self.t(*w).dims2()?;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![S::zero(); r * k];
                    matmul_nt(dy, self.t(*w).data(), &mut dx, r, n, k);
                    self.accum(grads, *x, &dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![S::zero(); k * n];
                    matmul_tn(self.t(*x).data(), dy, &mut dw, k, r, n);
                    self.accum(grads, *w, &dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![S::zero(); n];
                    col_sum(dy, &mut db, r, n);
                    self.accum(grads, *b, &db);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = self.t(*x).dims2()?;
                let xv = self.t(*x).data();
                let cn = S::from_f(c as f64);
                let gv = gamma.map(|g| self.t(g).data());
                let mut dx = vec![S::zero(); r * c];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let mean = row.iter().fold(S::zero(), |a, &v| a + v) / cn;
                    let var = row
                        .iter()
                        .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                        / cn;
                    let inv = (var + *eps).sqrt().recip();
                    // dh = dy * gamma (upstream into the normalized value)
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    let mut xhat = vec![S::zero(); c];
                    let mut dh = vec![S::zero(); c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv;
                        dh[j] = match gv {
                            Some(g) => dyr[j] * g[j],
                            None => dyr[j],
                        };
                        m1 = m1 + dh[j];
                        m2 = m2 + dh[j] * xhat[j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    for j in 0..c {
                        dx[i * c + j] = inv * (dh[j] - m1 - xhat[j] * m2);
                        dgamma[j] = dgamma[j] + dyr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + dyr[j];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    self.accum(grads, *x, &dx);
                }
                if let Some(g) = gamma {
                    self.accum(grads, *g, &dgamma);
                }
                if let Some(b) = beta {
                    self.accum(grads, *b, &dbeta);
                }
            }
            Op::Softmax { x } => {
                let (r, c) = self.t(*x).dims2()?;
                let y = self.nodes[idx].value.data();
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let dot = yr
                        .iter()
                        .zip(dyr.iter())
                        .fold(S::zero(), |a, (&p, &d)| a + p * d);
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (dyr[j] - dot);
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (l, d) = self.t(*q).dims2()?;
                let dh = d / heads;
                let scale = S::from_f(1.0 / (dh as f64).sqrt());
                let qv = self.t(*q).data();
                let kv = self.t(*k).data();
                let vv = self.t(*v).data();
                let mut dq = vec![S::zero(); l * d];
                let mut dk = vec![S::zero(); l * d];
                let mut dv = vec![S::zero(); l * d];
                let mut qh = vec![S::zero(); l * dh];
                let mut kh = vec![S::zero(); l * dh];
                let mut vh = vec![S::zero(); l * dh];
                let mut doh = vec![S::zero(); l * dh];
                let mut dp = vec![S::zero(); l * l];
                let mut ds = vec![S::zero(); l * l];
                let mut dqh = vec![S::zero(); l * dh];
                let mut dkh = vec![S::zero(); l * dh];
                let mut dvh = vec![S::zero(); l * dh];
                for h in 0..*heads {
                    let p = &probs[h * l * l..(h + 1) * l * l];
                    gather_head(qv, &mut qh, l, d, h, dh);
                    gather_head(kv, &mut kh, l, d, h, dh);
                    gather_head(vv, &mut vh, l, d, h, dh);
                    gather_head(dy, &mut doh, l, d, h, dh);
                    // dV = Pᵀ dO
                    dvh.iter_mut().for_each(|s| *s = S::zero());
                    matmul_tn(p, &doh, &mut dvh, l, l, dh);
                    // dP = dO Vᵀ
                    dp.iter_mut().for_each(|s| *s = S::zero());
                    matmul_nt(&doh, &vh, &mut dp, l, dh, l);
                    // dS = P ∘ (dP − rowsum(dP∘P))
                    for i in 0..l {
                        let pr = &p[i * l..(i + 1) * l];
                        let dpr = &dp[i * l..(i + 1) * l];
                        let dot = pr
                            .iter()
                            .zip(dpr.iter())
                            .fold(S::zero(), |a, (&pp, &dd)| a + pp * dd);
                        for j in 0..l {
                            ds[i * l + j] = pr[j] * (dpr[j] - dot);
                        }
                    }
                    // dQ = scale · dS · K ; dK = scale · dSᵀ · Q
                    dqh.iter_mut().for_each(|s| *s = S::zero());
                    matmul_nn(&ds, &kh, &mut dqh, l, l, dh);
                    dkh.iter_mut().for_each(|s| *s = S::zero());
                    matmul_tn(&ds, &qh, &mut dkh, l, l, dh);
                    for val in dqh.iter_mut() {
                        *val = *val * scale;
                    }
                    for val in dkh.iter_mut() {
                        *val = *val * scale;
                    }
                    scatter_head(&dqh, &mut dq, l, d, h, dh);
                    scatter_head(&dkh, &mut dk, l, d, h, dh);
                    scatter_head(&dvh, &mut dv, l, d, h, dh);
                }
                self.accum(grads, *q, &dq);
                self.accum(grads, *k, &dk);
                self.accum(grads, *v, &dv);
            }
            Op::Gelu { x } => {
                let dx: Vec<S> = self
                    .t(*x)
                    .data()
                    .iter()
                    .zip(dy.iter())
                    .map(|(&v, &d)| d * gelu_bwd(v))
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Embed { table, ids } => {
                let (vocab, d) = self.t(*table).dims2()?;
                let mut dt = vec![S::zero(); vocab * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + dy[row * d + j];
                    }
                }
                self.accum(grads, *table, &dt);
            }
            Op::Concat { parts } => {
                let mut offset = 0usize;
                for &p in parts {
                    let n = self.t(p).numel();
                    self.accum(grads, p, &dy[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SumAll { x } => {
                let g = dy[0];
                let dx = vec![g; self.t(*x).numel()];
                self.accum(grads, *x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.t(*x).numel();
                let g = dy[0] / S::from_f(n as f64);
                let dx = vec![g; n];
                self.accum(grads, *x, &dx);
            }
            Op::MeanRows { x } => {
                let (r, c) = self.t(*x).dims2()?;
                let rn = S::from_f(r as f64);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j] / rn;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::SliceRows { x, start } => {
                let (_, c) = self.t(*x).dims2()?;
                let mut dx = vec![S::zero(); self.t(*x).numel()];
                dx[start * c..start * c + dy.len()].copy_from_slice(dy);
                self.accum(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, dy);
                self.accum(grads, *b, dy);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, dy);
                let neg: Vec<S> = dy.iter().map(|&d| -d).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<S> = dy
                        .iter()
                        .zip(self.t(*b).data().iter())
                        .map(|(&d, &bv)| d * bv)
                        .collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<S> = dy
                        .iter()
                        .zip(self.t(*a).data().iter())
                        .map(|(&d, &av)| d * av)
                        .collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<S> = dy.iter().map(|&d| d * *c).collect();
                self.accum(grads, *x, &dx);
            }
            Op::Abs { x } => {
                let dx: Vec<S> = self
                    .t(*x)
                    .data()
                    .iter()
                    .zip(dy.iter())
                    .map(|(&v, &d)| {
                        if v > S::zero() {
                            d
                        } else if v < S::zero() {
                            -d
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<S> = self
                    .t(*x)
                    .data()
                    .iter()
                    .zip(dy.iter())
                    .map(|(&v, &d)| d / v)
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<S> = y
                    .iter()
                    .zip(dy.iter())
                    .map(|(&yv, &d)| d * yv * (S::one() - yv))
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<S> = self
                    .t(*x)
                    .data()
                    .iter()
                    .zip(dy.iter())
                    .map(|(&v, &d)| if v > *lo && v < *hi { d } else { S::zero() })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, dy);
            }
        }
        Ok(())
    }
}

fn gather_head<S: Scalar>(src: &[S], dst: &mut [S], l: usize, d: usize, h: usize, dh: usize) {
    for i in 0..l {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

fn scatter_head<S: Scalar>(src: &[S], dst: &mut [S], l: usize, d: usize, h: usize, dh: usize) {
    for i in 0..l {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn softmax_row<S: Scalar>(logits: &[S], out: &mut [S]) -> Result<()> {
    let mut max = S::neg_infinity();
    for &v in logits.iter() {
        if v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() {
        return Err(Error::shape(
            "softmax",
            "row is fully masked (-inf everywhere)".to_string(),
        ));
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(logits.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Ok(())
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f(0.044715);
    let half = S::from_f(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f(0.797_884_560_802_865_4);
    let a = S::from_f(0.044715);
    let half = S::from_f(0.5);
    let three = S::from_f(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph32() -> Graph<f32> {
        Graph::new()
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut g = graph32();
        let x = g.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.constant(
            Tensor::from_vec(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(g.value(y).shape(), &[3]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = graph32();
        let x = g.constant(Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap());
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_zero_on_constant_row() {
        let mut g = graph32();
        let x = g.constant(Tensor::from_vec(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
        let y = g.layer_norm(x, None, None, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backprop_of_sum_is_ones() {
        let mut g = graph32();
        let x = g.param(Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = graph32();
        let x = g.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let frozen = g.constant(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let p = g.mul(x, frozen).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = graph32();
        let x = g.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarBackprop { .. })
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = graph32();
        let x = g.constant(Tensor::from_vec(vec![2], vec![f32::NAN, 1.0]).unwrap());
        assert!(matches!(g.gelu(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn attention_rejects_bad_mask() {
        let mut g = graph32();
        let q = g.constant(Tensor::zeros(vec![2, 4]));
        let k = g.constant(Tensor::zeros(vec![2, 4]));
        let v = g.constant(Tensor::zeros(vec![2, 4]));
        let m = g.constant(Tensor::from_vec(vec![2, 2], vec![0.0, -1.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            g.attention(q, k, v, m, 2),
            Err(Error::InvalidMask { .. })
        ));
    }

    #[test]
    fn concat_vector_append_and_row_stack() {
        let mut g = graph32();
        let a = g.constant(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![3], vec![3.0, 4.0, 5.0]).unwrap());
        let v = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(v).shape(), &[5]);

        let m1 = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0; 4]).unwrap());
        let m2 = g.constant(Tensor::from_vec(vec![1, 2], vec![2.0; 2]).unwrap());
        let m = g.concat(&[m1, m2]).unwrap();
        assert_eq!(g.value(m).shape(), &[3, 2]);
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        // concat([x, x, x]) then sum: dx should be 3 per element
        let mut g = graph32();
        let x = g.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let c = g.concat(&[x, x, x]).unwrap();
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn masked_attention_blocks_future() {
        // 2 tokens, token 0 must not see token 1
        let mut g = graph32();
        let q = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let k = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v1 = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v2 = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, -9.0, 100.0]).unwrap();
        let ninf = f32::NEG_INFINITY;
        let m = g.constant(Tensor::from_vec(vec![2, 2], vec![0.0, ninf, 0.0, 0.0]).unwrap());
        let va = g.constant(v1);
        let out1 = g.attention(q, k, va, m, 1).unwrap();
        let row0_a = g.value(out1).data()[0..2].to_vec();

        let vb = g.constant(v2);
        let out2 = g.attention(q, k, vb, m, 1).unwrap();
        let row0_b = g.value(out2).data()[0..2].to_vec();
        assert_eq!(row0_a, row0_b);
    }
}
