//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! The tape is an eager arena: every primitive application appends a node
//! holding the output values plus whatever the backward pass needs. Nodes are
//! pushed in topological order, so replaying them in reverse visits each node
//! after all of its consumers. A tape and its tensors belong to one logical
//! worker at a time.

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::StreamRng;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatKind {
    /// C[m,n] = A[m,k] B[k,n]
    NN,
    /// C[m,n] = A[m,k] B[n,k]^T
    NT,
    /// C[k,n] = A[m,k]^T B[m,n]
    TN,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
        kind: MatKind,
        // (m, k, n) in the NN sense of the product actually computed.
        dims: (usize, usize, usize),
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulGate {
        a: NodeId,
        gate: NodeId,
    },
    ScaleConst {
        a: NodeId,
        c: f32,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    Softmax {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Per row: (mean, 1/sqrt(var + eps)).
        stats: Vec<(f32, f32)>,
    },
    Relu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    Dropout {
        a: NodeId,
        /// 0.0 for dropped entries, 1/(1-p) for kept ones.
        mask: Vec<f32>,
    },
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<u32>,
        probs: Vec<f32>,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Gradients keyed by node id, populated by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericInstability {
            op: op.to_string(),
            detail: "non-finite output values".to_string(),
        })
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[f32] {
        &self.nodes[id].values
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f32>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    /// Register an input tensor. A non-differentiable leaf is treated as a
    /// constant: it never receives a gradient buffer.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f32>, differentiable: bool) -> NodeId {
        assert_eq!(
            numel(shape),
            values.len(),
            "leaf values do not match shape"
        );
        self.push(shape.to_vec(), values, differentiable, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f32>) -> NodeId {
        self.leaf(shape, values, false)
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m},{ka}] x [{kb},{n}]"),
            });
        }
        let out = ops::matmul(&self.nodes[a].values, &self.nodes[b].values, m, ka, n);
        check_finite("matmul", &out)?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::Matmul {
                a,
                b,
                kind: MatKind::NN,
                dims: (m, ka, n),
            },
        ))
    }

    /// A [m,k] times B[n,k] transposed: out [m,n].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("[{m},{ka}] x [{n},{kb}]^T"),
            });
        }
        let out = ops::matmul_nt(&self.nodes[a].values, &self.nodes[b].values, m, ka, n);
        check_finite("matmul_nt", &out)?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::Matmul {
                a,
                b,
                kind: MatKind::NT,
                dims: (m, ka, n),
            },
        ))
    }

    /// A[m,k] transposed times B[m,n]: out [k,n].
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, k) = self.dims2("matmul_tn", a)?;
        let (mb, n) = self.dims2("matmul_tn", b)?;
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                detail: format!("[{ma},{k}]^T x [{mb},{n}]"),
            });
        }
        let out = ops::matmul_tn(&self.nodes[a].values, &self.nodes[b].values, ma, k, n);
        check_finite("matmul_tn", &out)?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(
            vec![k, n],
            out,
            rg,
            Op::Matmul {
                a,
                b,
                kind: MatKind::TN,
                dims: (ma, k, n),
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        let out: Vec<f32> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    /// Row-broadcast add: a is [m,n], bias is [n].
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("add_bias", a)?;
        if self.nodes[bias].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("[{m},{n}] + {:?}", self.nodes[bias].shape),
            });
        }
        let bv = &self.nodes[bias].values;
        let mut out = self.nodes[a].values.clone();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        check_finite("add_bias", &out)?;
        let rg = self.nodes[a].requires_grad || self.nodes[bias].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        let out: Vec<f32> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::Mul { a, b }))
    }

    /// Multiply every element of `a` by a single learnable scalar (shape [1]).
    pub fn mul_gate(&mut self, a: NodeId, gate: NodeId) -> Result<NodeId> {
        if numel(&self.nodes[gate].shape) != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_gate",
                detail: format!("gate must be scalar, got {:?}", self.nodes[gate].shape),
            });
        }
        let s = self.nodes[gate].values[0];
        let out: Vec<f32> = self.nodes[a].values.iter().map(|x| x * s).collect();
        check_finite("mul_gate", &out)?;
        let rg = self.nodes[a].requires_grad || self.nodes[gate].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::MulGate { a, gate }))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let out: Vec<f32> = self.nodes[a].values.iter().map(|x| x * c).collect();
        check_finite("scale", &out)?;
        let rg = self.nodes[a].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::ScaleConst { a, c }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let (_, n) = self.dims2("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, np) = self.dims2("concat_rows", p)?;
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {n} vs {np}"),
                });
            }
            rows += m;
            out.extend_from_slice(&self.nodes[p].values);
        }
        let rg = parts.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(
            vec![rows, n],
            out,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let (m, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.dims2("concat_cols", p)?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {m} vs {mp}"),
                });
            }
            widths.push(np);
            total += np;
        }
        let mut out = vec![0f32; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p].values;
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(
            vec![m, total],
            out,
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start + len > m {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} of [{m},{n}]", start + len),
            });
        }
        let out = self.nodes[a].values[start * n..(start + len) * n].to_vec();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(vec![len, n], out, rg, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{} of [{m},{n}]", start + len),
            });
        }
        let av = &self.nodes[a].values;
        let mut out = vec![0f32; m * len];
        for r in 0..m {
            out[r * len..(r + 1) * len].copy_from_slice(&av[r * n + start..r * n + start + len]);
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(vec![m, len], out, rg, Op::SliceCols { a, start }))
    }

    /// Softmax over the last axis, with max subtraction. With `causal` set the
    /// input must be square and position (i, j > i) gets probability zero.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> Result<NodeId> {
        let (m, n) = self.dims2("softmax", a)?;
        if causal && m != n {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("causal softmax needs a square matrix, got [{m},{n}]"),
            });
        }
        let mut out = self.nodes[a].values.clone();
        ops::softmax_rows(&mut out, m, n, causal);
        check_finite("softmax", &out)?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Softmax { a }))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (m, n) = self.dims2("layer_norm", a)?;
        if self.nodes[gain].shape != [n] || self.nodes[bias].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} against [{m},{n}]",
                    self.nodes[gain].shape, self.nodes[bias].shape
                ),
            });
        }
        let av = &self.nodes[a].values;
        let gv = &self.nodes[gain].values;
        let bv = &self.nodes[bias].values;
        let mut out = vec![0f32; m * n];
        let mut stats = Vec::with_capacity(m);
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv));
            let orow = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                orow[j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.nodes[a].requires_grad
            || self.nodes[gain].requires_grad
            || self.nodes[bias].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::LayerNorm { a, gain, bias, stats }))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f32> = self.nodes[a].values.iter().map(|&x| x.max(0.0)).collect();
        check_finite("relu", &out)?;
        let rg = self.nodes[a].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::Relu { a }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f32> = self.nodes[a]
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        check_finite("sigmoid", &out)?;
        let rg = self.nodes[a].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::Sigmoid { a }))
    }

    pub fn tanh_op(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f32> = self.nodes[a].values.iter().map(|&x| x.tanh()).collect();
        check_finite("tanh", &out)?;
        let rg = self.nodes[a].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::Tanh { a }))
    }

    /// Row lookup: out[r, :] = table[ids[r], :].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, w) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::InvalidArgument(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let tv = &self.nodes[table].values;
        let mut out = vec![0f32; ids.len() * w];
        for (r, &id) in ids.iter().enumerate() {
            out[r * w..(r + 1) * w].copy_from_slice(&tv[id as usize * w..(id as usize + 1) * w]);
        }
        let rg = self.nodes[table].requires_grad;
        Ok(self.push(
            vec![ids.len(), w],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p) so eval needs no
    /// rescaling. The Bernoulli mask comes from the caller's rng stream.
    pub fn dropout(&mut self, a: NodeId, p: f32, rng: &mut StreamRng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            // Still a distinct node so the caller's graph shape is stable.
            let mask = vec![1.0f32; self.nodes[a].values.len()];
            let out = self.nodes[a].values.clone();
            let rg = self.nodes[a].requires_grad;
            let shape = self.nodes[a].shape.clone();
            return Ok(self.push(shape, out, rg, Op::Dropout { a, mask }));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.nodes[a].values.len())
            .map(|_| if rng.next_f32() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> = self.nodes[a]
            .values
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        check_finite("dropout", &out)?;
        let rg = self.nodes[a].requires_grad;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, rg, Op::Dropout { a, mask }))
    }

    /// Fused softmax + negative log likelihood, averaged over rows. Returns a
    /// scalar in nats.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let (m, n) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{m} logit rows vs {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= n) {
            return Err(Error::InvalidArgument(format!(
                "target {bad} out of range for {n} classes"
            )));
        }
        let mut probs = self.nodes[logits].values.clone();
        ops::softmax_rows(&mut probs, m, n, false);
        let mut total = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            let p = probs[r * n + t as usize];
            total -= f64::from(p.max(f32::MIN_POSITIVE)).ln();
        }
        let loss = (total / m as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::NumericInstability {
                op: "cross_entropy".to_string(),
                detail: "non-finite loss".to_string(),
            });
        }
        let rg = self.nodes[logits].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f32 = self.nodes[a].values.iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let len = self.nodes[a].values.len();
        let s: f32 = self.nodes[a].values.iter().sum::<f32>() / len as f32;
        check_finite("mean", &[s])?;
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::Mean { a }))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call is
    /// an explicit error. Gradients are populated for every differentiable
    /// leaf reachable from the loss; detached tensors act as constants.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if numel(&self.nodes[loss].shape) != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("grad present");
            self.propagate(id, &g, &mut grads);
        }
        // The gradient of the loss with respect to itself is 1.
        grads[loss] = Some(vec![1.0]);
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f32>>],
        id: NodeId,
        update: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(vec![0f32; self.nodes[id].values.len()]);
        }
        update(slot.as_mut().expect("just filled"));
    }

    fn propagate(&self, id: NodeId, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, kind, dims } => {
                let (m, k, n) = *dims;
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                match kind {
                    MatKind::NN => {
                        // dA = dC B^T ; dB = A^T dC
                        self.accumulate(grads, *a, |ga| {
                            let da = ops::matmul_nt(g, bv, m, n, k);
                            for (x, y) in ga.iter_mut().zip(&da) {
                                *x += y;
                            }
                        });
                        self.accumulate(grads, *b, |gb| {
                            let db = ops::matmul_tn(av, g, m, k, n);
                            for (x, y) in gb.iter_mut().zip(&db) {
                                *x += y;
                            }
                        });
                    }
                    MatKind::NT => {
                        // C = A B^T: dA = dC B ; dB = dC^T A
                        self.accumulate(grads, *a, |ga| {
                            let da = ops::matmul(g, bv, m, n, k);
                            for (x, y) in ga.iter_mut().zip(&da) {
                                *x += y;
                            }
                        });
                        self.accumulate(grads, *b, |gb| {
                            let db = ops::matmul_tn(g, av, m, n, k);
                            for (x, y) in gb.iter_mut().zip(&db) {
                                *x += y;
                            }
                        });
                    }
                    MatKind::TN => {
                        // C = A^T B: dA = B dC^T ; dB = A dC
                        self.accumulate(grads, *a, |ga| {
                            let da = ops::matmul_nt(bv, g, m, n, k);
                            for (x, y) in ga.iter_mut().zip(&da) {
                                *x += y;
                            }
                        });
                        self.accumulate(grads, *b, |gb| {
                            let db = ops::matmul(av, g, m, k, n);
                            for (x, y) in gb.iter_mut().zip(&db) {
                                *x += y;
                            }
                        });
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::AddBias { a, bias } => {
                let n = self.nodes[*bias].values.len();
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulGate { a, gate } => {
                let s = self.nodes[*gate].values[0];
                let av = &self.nodes[*a].values;
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y * s;
                    }
                });
                self.accumulate(grads, *gate, |gg| {
                    let mut acc = 0f32;
                    for (x, y) in g.iter().zip(av) {
                        acc += x * y;
                    }
                    gg[0] += acc;
                });
            }
            Op::ScaleConst { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y * c;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].values.len();
                    let gp = &g[off..off + len];
                    self.accumulate(grads, p, |gpart| {
                        for (x, y) in gpart.iter_mut().zip(gp) {
                            *x += y;
                        }
                    });
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = self.nodes[id].shape[1];
                let m = self.nodes[id].shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    self.accumulate(grads, p, |gpart| {
                        for r in 0..m {
                            let src = &g[r * total + off..r * total + off + w];
                            for (x, y) in gpart[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { a, start } => {
                let n = self.nodes[*a].shape[1];
                let start = *start;
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let n = self.nodes[*a].shape[1];
                let w = self.nodes[id].shape[1];
                let m = self.nodes[id].shape[0];
                let start = *start;
                self.accumulate(grads, *a, |ga| {
                    for r in 0..m {
                        let src = &g[r * w..(r + 1) * w];
                        for (x, y) in ga[r * n + start..r * n + start + w].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = &self.nodes[id].values;
                let (m, n) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let gar = &mut ga[r * n..(r + 1) * n];
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias, stats } => {
                let (m, n) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let av = &self.nodes[*a].values;
                let gv = &self.nodes[*gain].values;
                self.accumulate(grads, *a, |ga| {
                    for r in 0..m {
                        let (mean, inv) = stats[r];
                        let xr = &av[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut sum_dxhat = 0f32;
                        let mut sum_dxhat_xhat = 0f32;
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * inv;
                            let dxhat = gr[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let gar = &mut ga[r * n..(r + 1) * n];
                        let nf = n as f32;
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * inv;
                            let dxhat = gr[j] * gv[j];
                            gar[j] += inv / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..m {
                        let (mean, inv) = stats[r];
                        let xr = &av[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        for j in 0..n {
                            gg[j] += gr[j] * (xr[j] - mean) * inv;
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[id].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = &self.nodes[id].values;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let w = self.nodes[id].shape[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &tid) in ids.iter().enumerate() {
                        let src = &g[r * w..(r + 1) * w];
                        let dst = &mut gt[tid as usize * w..(tid as usize + 1) * w];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::CrossEntropyMean { logits, targets, probs } => {
                let n = self.nodes[*logits].shape[1];
                let m = targets.len();
                let gs = g[0] / m as f32;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pr = &probs[r * n..(r + 1) * n];
                        let glr = &mut gl[r * n..(r + 1) * n];
                        for j in 0..n {
                            glr[j] += gs * (pr[j] - if j == t as usize { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let gs = g[0];
                self.accumulate(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Mean { a } => {
                let gs = g[0] / self.nodes[*a].values.len() as f32;
                self.accumulate(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gs;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 2], vec![0.0, 0.0]);
        let y = t.softmax(x, false).unwrap();
        assert_eq!(t.values(y), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 4], vec![3.5; 4]);
        let g = t.constant(&[4], vec![1.0; 4]);
        let b = t.constant(&[4], vec![0.0; 4]);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.values(y), &[0.0; 4]);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut t = Tape::new();
        let mut eye = vec![0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let a_vals: Vec<f32> = (0..9).map(|i| i as f32 * 0.25 - 1.0).collect();
        let i3 = t.constant(&[3, 3], eye);
        let a = t.constant(&[3, 3], a_vals.clone());
        let y = t.matmul(i3, a).unwrap();
        assert_eq!(t.values(y), a_vals.as_slice());
    }

    #[test]
    fn grad_of_sum_is_all_ones() {
        let mut t = Tape::new();
        let x = t.leaf(&[2, 3], vec![0.3, -0.5, 1.0, 2.0, -1.5, 0.0], true);
        let loss = t.sum(x).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
        assert_eq!(grads.get(loss).unwrap(), &[1.0]);
    }

    #[test]
    fn grad_of_half_squared_norm_is_x() {
        let mut t = Tape::new();
        let vals = vec![0.25, -0.75, 1.5, 0.5];
        let x = t.leaf(&[1, 4], vals.clone(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let loss = t.scale(s, 0.5).unwrap();
        let grads = t.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for (g, v) in gx.iter().zip(&vals) {
            assert!((g - v).abs() < 1e-6, "{g} vs {v}");
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 2], vec![1.0, 2.0], true);
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(
            t.backward(loss),
            Err(crate::error::Error::TapeConsumed)
        ));
    }

    #[test]
    fn detached_tensor_is_treated_as_constant() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 3], vec![1.0, 2.0, 3.0], true);
        let frozen = t.leaf(&[1, 3], vec![2.0, 2.0, 2.0], false);
        let prod = t.mul(x, frozen).unwrap();
        let loss = t.sum(prod).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_reports_offending_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]);
        let b = t.constant(&[2, 3], vec![0.0; 6]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn non_finite_output_is_flagged() {
        let mut t = Tape::new();
        let a = t.constant(&[1, 2], vec![f32::MAX, f32::MAX]);
        let err = t.add(a, a).unwrap_err();
        assert!(matches!(err, crate::error::Error::NumericInstability { .. }));
    }

    #[test]
    fn replay_with_same_seed_is_bit_identical() {
        let run = || {
            let mut rng = StreamRng::new(77).stream("replay");
            let mut t = Tape::new();
            let xv: Vec<f32> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let wv: Vec<f32> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let x = t.leaf(&[3, 4], xv, true);
            let w = t.leaf(&[3, 4], wv, true);
            let h = t.mul(x, w).unwrap();
            let d = t.dropout(h, 0.25, &mut rng).unwrap();
            let s = t.sigmoid(d).unwrap();
            let loss = t.mean(s).unwrap();
            let grads = t.backward(loss).unwrap();
            (
                grads.get(x).unwrap().to_vec(),
                grads.get(w).unwrap().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_upper() {
        let mut rng = StreamRng::new(5).stream("causal");
        let mut t = Tape::new();
        let vals: Vec<f32> = (0..16).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = t.constant(&[4, 4], vals);
        let y = t.softmax(x, true).unwrap();
        let yv = t.values(y);
        for r in 0..4 {
            let sum: f32 = yv[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for c in r + 1..4 {
                assert_eq!(yv[r * 4 + c], 0.0);
            }
            assert!(yv[r * 4..(r + 1) * 4].iter().all(|&p| p >= 0.0));
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            vals in proptest::collection::vec(-30f32..30.0, 1..64),
            cols in 1usize..16,
        ) {
            let rows = vals.len() / cols;
            proptest::prop_assume!(rows >= 1);
            let vals = &vals[..rows * cols];
            let mut t = Tape::new();
            let x = t.constant(&[rows, cols], vals.to_vec());
            let y = t.softmax(x, false).unwrap();
            for row in t.values(y).chunks(cols) {
                let sum: f32 = row.iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-6);
                proptest::prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn concat_cols_inverts_slice_cols(
            vals in proptest::collection::vec(-10f32..10.0, 4..64),
            split in 1usize..4,
        ) {
            let cols = 4usize;
            let rows = vals.len() / cols;
            proptest::prop_assume!(rows >= 1);
            let vals = &vals[..rows * cols];
            let mut t = Tape::new();
            let x = t.constant(&[rows, cols], vals.to_vec());
            let left = t.slice_cols(x, 0, split).unwrap();
            let right = t.slice_cols(x, split, cols - split).unwrap();
            let back = t.concat_cols(&[left, right]).unwrap();
            proptest::prop_assert_eq!(t.values(back), vals);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_vocab() {
        let mut t = Tape::new();
        let logits = t.constant(&[2, 256], vec![0.0; 512]);
        let loss = t.cross_entropy_mean(logits, &[7, 200]).unwrap();
        let nats = t.values(loss)[0];
        assert!((nats - 256f32.ln()).abs() < 1e-5);
    }
}
