//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Graph` is a tape of nodes appended during the forward pass; creation
//! order is a topological order, so `backward` is a single reverse sweep.
//! The graph is rebuilt per forward pass, which keeps the extra probe
//! backward pass (on a fresh batch) trivially correct: build, differentiate,
//! drop. Repeated `backward_seeded` calls on one graph are allowed and reset
//! gradients each time; this is what the exact per-output oracle uses.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Additive mask value for causally-forbidden attention logits.
const NEG_MASK: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MulBias(usize, usize),
    Relu(usize),
    Reduce {
        input: usize,
        kind: ReduceKind,
        axes: Vec<usize>,
    },
    LayerNorm {
        input: usize,
        eps: f64,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape(usize),
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    CausalMask(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros if it never received one.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match self.nodes[id.0].grad.as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf (inputs, probe weights, constants).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a.0, b.0), v, ng))
    }

    /// Batched matrix product of two rank-3 tensors, [b,m,k] x [b,k,n].
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[bs, m, n]);
        for i in 0..bs {
            matmul_acc(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::BatchMatMul(a.0, b.0), out, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a.0, b.0), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a.0, b.0), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a.0, b.0), v, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(c);
        let ng = self.needs(a);
        self.push(Op::Scale(a.0, c), v, ng)
    }

    /// `x + b` with `b` broadcast over the trailing dimension of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let d = *vx.shape().last().ok_or_else(|| Error::ShapeMismatch {
            op: "add_bias",
            lhs: vx.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        if vb.rank() != 1 || vb.shape()[0] != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % d];
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias(x.0, b.0), out, ng))
    }

    /// `x * g` with `g` broadcast over the trailing dimension of `x`.
    pub fn mul_bias(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[g.0].value);
        let d = *vx.shape().last().unwrap_or(&0);
        if vg.rank() != 1 || vg.shape()[0] != d {
            return Err(Error::ShapeMismatch {
                op: "mul_bias",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut out = vx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vg.data()[i % d];
        }
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(Op::MulBias(x.0, g.0), out, ng))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.push(Op::Relu(a.0), v, ng)
    }

    /// Reduce over the given axes; empty `axes` means all axes (scalar output).
    pub fn reduce(&mut self, kind: ReduceKind, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let vin = &self.nodes[a.0].value;
        let rank = vin.rank();
        let axes: Vec<usize> = if axes.is_empty() {
            (0..rank).collect()
        } else {
            let mut ax = axes.to_vec();
            ax.sort_unstable();
            ax.dedup();
            for &x in &ax {
                if x >= rank {
                    return Err(Error::InvalidAxis { axis: x, rank });
                }
            }
            ax
        };
        let out_shape: Vec<usize> = (0..rank)
            .filter(|d| !axes.contains(d))
            .map(|d| vin.shape()[d])
            .collect();
        let mut out = Tensor::zeros(&out_shape);
        let reduced: usize = axes.iter().map(|&d| vin.shape()[d]).product::<usize>().max(1);
        let in_strides = vin.strides();
        let out_dims: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
        let out_strides = out.strides();
        for (flat, &v) in vin.data().iter().enumerate() {
            let mut off = 0;
            for (oi, &d) in out_dims.iter().enumerate() {
                let idx = (flat / in_strides[d]) % vin.shape()[d];
                off += idx * out_strides[oi];
            }
            out.data_mut()[off] += v;
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / reduced as f64;
            for v in out.data_mut() {
                *v *= inv;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Reduce { input: a.0, kind, axes }, out, ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.reduce(ReduceKind::Sum, a, &[]).expect("sum over all axes")
    }

    /// Last-axis layernorm without affine parameters.
    pub fn layernorm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let vin = &self.nodes[a.0].value;
        let d = *vin.shape().last().ok_or(Error::InvalidShape {
            shape: vec![],
            reason: "layernorm needs rank >= 1".into(),
        })?;
        if d < 2 {
            return Err(Error::InvalidShape {
                shape: vin.shape().to_vec(),
                reason: "layernorm needs trailing dim >= 2".into(),
            });
        }
        let mut out = vin.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::LayerNorm { input: a.0, eps }, out, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let vin = &self.nodes[a.0].value;
        let d = *vin.shape().last().ok_or(Error::InvalidShape {
            shape: vec![],
            reason: "softmax needs rank >= 1".into(),
        })?;
        let mut out = vin.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            let inv = 1.0 / z;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax(a.0), out, ng))
    }

    /// Mean cross-entropy between logits and integer targets.
    ///
    /// Leading axes of `logits` are flattened to rows; `targets` has one
    /// class id per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[logits.0].value;
        let k = *v.shape().last().ok_or(Error::InvalidShape {
            shape: vec![],
            reason: "cross_entropy needs rank >= 1".into(),
        })?;
        let rows = v.numel() / k.max(1);
        if targets.len() != rows {
            return Err(Error::Data(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Data(format!("target {t} out of range 0..{k}")));
        }
        let mut loss = 0.0;
        for (r, row) in v.data().chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
        }
        loss /= rows as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Row lookup: out[r] = table[ids[r]], output shape `leading ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], leading: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[table.0].value;
        if v.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: v.shape().to_vec(),
                reason: "embedding table must be rank 2".into(),
            });
        }
        let (vocab, d) = (v.shape()[0], v.shape()[1]);
        if leading.iter().product::<usize>() != ids.len() {
            return Err(Error::Data("embedding: leading shape != id count".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!("token id {bad} out of range 0..{vocab}")));
        }
        let mut shape = leading.to_vec();
        shape.push(d);
        let mut out = Tensor::zeros(&shape);
        for (r, &id) in ids.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&v.data()[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            out,
            ng,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a.0].value.reshape(shape.to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a.0), v, ng))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.nodes[a.0].value.permute(perm)?;
        let ng = self.needs(a);
        Ok(self.push(
            Op::Permute {
                input: a.0,
                perm: perm.to_vec(),
            },
            v,
            ng,
        ))
    }

    /// Additive causal mask on [b, t, t] attention logits: positions with
    /// key index > query index receive a large negative constant.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let vin = &self.nodes[a.0].value;
        let s = vin.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "causal_mask expects [batch, t, t]".into(),
            });
        }
        let t = s[1];
        let mut out = vin.clone();
        for b in 0..s[0] {
            for i in 0..t {
                for j in (i + 1)..t {
                    out.data_mut()[b * t * t + i * t + j] += NEG_MASK;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::CausalMask(a.0), out, ng))
    }

    /// Reverse sweep from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot { shape });
        }
        let seed = Tensor::from_vec(shape, vec![1.0])?;
        self.backward_seeded(root, seed)
    }

    /// Reverse sweep with an arbitrary seed gradient at `root`.
    ///
    /// Clears all existing gradients first, so repeated calls on one graph
    /// (the per-output oracle) are independent.
    pub fn backward_seeded(&mut self, root: NodeId, seed: Tensor) -> Result<()> {
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward_seeded",
                lhs: seed.shape().to_vec(),
                rhs: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(seed);

        for idx in (0..=root.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = self.nodes[idx].grad.clone().expect("checked above");
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = {
                        let s = self.nodes[a].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b].value.shape()[1];
                    if self.nodes[a].needs_grad {
                        let mut da = self.take_or_zeros(a);
                        matmul_a_bt_acc(g.data(), self.nodes[b].value.data(), da.data_mut(), m, n, k);
                        self.nodes[a].grad = Some(da);
                    }
                    if self.nodes[b].needs_grad {
                        let mut db = self.take_or_zeros(b);
                        matmul_at_b_acc(self.nodes[a].value.data(), g.data(), db.data_mut(), m, k, n);
                        self.nodes[b].grad = Some(db);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (bs, m, k) = {
                        let s = self.nodes[a].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let n = self.nodes[b].value.shape()[2];
                    if self.nodes[a].needs_grad {
                        let mut da = self.take_or_zeros(a);
                        for i in 0..bs {
                            matmul_a_bt_acc(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &self.nodes[b].value.data()[i * k * n..(i + 1) * k * n],
                                &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        self.nodes[a].grad = Some(da);
                    }
                    if self.nodes[b].needs_grad {
                        let mut db = self.take_or_zeros(b);
                        for i in 0..bs {
                            matmul_at_b_acc(
                                &self.nodes[a].value.data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &mut db.data_mut()[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        self.nodes[b].grad = Some(db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_grad(a, &g, 1.0);
                    self.acc_grad(b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc_grad(a, &g, 1.0);
                    self.acc_grad(b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].needs_grad {
                        let d = g.mul(&self.nodes[b].value)?;
                        self.acc_grad(a, &d, 1.0);
                    }
                    if self.nodes[b].needs_grad {
                        let d = g.mul(&self.nodes[a].value)?;
                        self.acc_grad(b, &d, 1.0);
                    }
                }
                Op::Scale(a, c) => {
                    self.acc_grad(a, &g, c);
                }
                Op::AddBias(x, b) => {
                    self.acc_grad(x, &g, 1.0);
                    if self.nodes[b].needs_grad {
                        let d = self.nodes[b].value.shape()[0];
                        let mut db = self.take_or_zeros(b);
                        for (i, &v) in g.data().iter().enumerate() {
                            db.data_mut()[i % d] += v;
                        }
                        self.nodes[b].grad = Some(db);
                    }
                }
                Op::MulBias(x, w) => {
                    let d = self.nodes[w].value.shape()[0];
                    if self.nodes[x].needs_grad {
                        let mut dx = self.take_or_zeros(x);
                        for (i, &v) in g.data().iter().enumerate() {
                            dx.data_mut()[i] += v * self.nodes[w].value.data()[i % d];
                        }
                        self.nodes[x].grad = Some(dx);
                    }
                    if self.nodes[w].needs_grad {
                        let mut dw = self.take_or_zeros(w);
                        for (i, &v) in g.data().iter().enumerate() {
                            dw.data_mut()[i % d] += v * self.nodes[x].value.data()[i];
                        }
                        self.nodes[w].grad = Some(dw);
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[a].needs_grad {
                        let mut da = self.take_or_zeros(a);
                        for (i, &v) in g.data().iter().enumerate() {
                            if self.nodes[a].value.data()[i] > 0.0 {
                                da.data_mut()[i] += v;
                            }
                        }
                        self.nodes[a].grad = Some(da);
                    }
                }
                Op::Reduce { input, kind, axes } => {
                    if self.nodes[input].needs_grad {
                        let vin_shape = self.nodes[input].value.shape().to_vec();
                        let rank = vin_shape.len();
                        let reduced: usize =
                            axes.iter().map(|&d| vin_shape[d]).product::<usize>().max(1);
                        let w = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / reduced as f64,
                        };
                        let in_strides = {
                            let mut s = vec![1usize; rank];
                            for i in (0..rank.saturating_sub(1)).rev() {
                                s[i] = s[i + 1] * vin_shape[i + 1];
                            }
                            s
                        };
                        let out_dims: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).collect();
                        let out_strides = {
                            let shape: Vec<usize> = out_dims.iter().map(|&d| vin_shape[d]).collect();
                            let mut s = vec![1usize; shape.len()];
                            for i in (0..shape.len().saturating_sub(1)).rev() {
                                s[i] = s[i + 1] * shape[i + 1];
                            }
                            s
                        };
                        let mut da = self.take_or_zeros(input);
                        for flat in 0..da.numel() {
                            let mut off = 0;
                            for (oi, &d) in out_dims.iter().enumerate() {
                                let idx = (flat / in_strides[d]) % vin_shape[d];
                                off += idx * out_strides[oi];
                            }
                            da.data_mut()[flat] += w * g.data()[off];
                        }
                        self.nodes[input].grad = Some(da);
                    }
                }
                Op::LayerNorm { input, eps } => {
                    if self.nodes[input].needs_grad {
                        let d = *self.nodes[input].value.shape().last().unwrap();
                        let y = self.nodes[idx].value.clone();
                        let mut da = self.take_or_zeros(input);
                        let x = &self.nodes[input].value;
                        for r in 0..(x.numel() / d) {
                            let xs = &x.data()[r * d..(r + 1) * d];
                            let ys = &y.data()[r * d..(r + 1) * d];
                            let gs = &g.data()[r * d..(r + 1) * d];
                            let mean = xs.iter().sum::<f64>() / d as f64;
                            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let g_mean = gs.iter().sum::<f64>() / d as f64;
                            let gy_mean =
                                gs.iter().zip(ys.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            let out = &mut da.data_mut()[r * d..(r + 1) * d];
                            for j in 0..d {
                                out[j] += inv * (gs[j] - g_mean - ys[j] * gy_mean);
                            }
                        }
                        self.nodes[input].grad = Some(da);
                    }
                }
                Op::Softmax(a) => {
                    if self.nodes[a].needs_grad {
                        let d = *self.nodes[a].value.shape().last().unwrap();
                        let y = self.nodes[idx].value.clone();
                        let mut da = self.take_or_zeros(a);
                        for r in 0..(y.numel() / d) {
                            let ys = &y.data()[r * d..(r + 1) * d];
                            let gs = &g.data()[r * d..(r + 1) * d];
                            let s: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                            let out = &mut da.data_mut()[r * d..(r + 1) * d];
                            for j in 0..d {
                                out[j] += ys[j] * (gs[j] - s);
                            }
                        }
                        self.nodes[a].grad = Some(da);
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    if self.nodes[logits].needs_grad {
                        let k = *self.nodes[logits].value.shape().last().unwrap();
                        let rows = targets.len();
                        let gv = g.item() / rows as f64;
                        let mut da = self.take_or_zeros(logits);
                        let v = &self.nodes[logits].value;
                        for (r, row) in v.data().chunks(k).enumerate() {
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                            let out = &mut da.data_mut()[r * k..(r + 1) * k];
                            for j in 0..k {
                                let p = (row[j] - m).exp() / z;
                                let ind = if j == targets[r] { 1.0 } else { 0.0 };
                                out[j] += gv * (p - ind);
                            }
                        }
                        self.nodes[logits].grad = Some(da);
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.nodes[table].needs_grad {
                        let d = self.nodes[table].value.shape()[1];
                        let mut dt = self.take_or_zeros(table);
                        for (r, &id) in ids.iter().enumerate() {
                            let src = &g.data()[r * d..(r + 1) * d];
                            let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                            for j in 0..d {
                                dst[j] += src[j];
                            }
                        }
                        self.nodes[table].grad = Some(dt);
                    }
                }
                Op::Reshape(a) => {
                    if self.nodes[a].needs_grad {
                        let back = g.reshape(self.nodes[a].value.shape().to_vec())?;
                        self.acc_grad(a, &back, 1.0);
                    }
                }
                Op::Permute { input, perm } => {
                    if self.nodes[input].needs_grad {
                        let mut inv = vec![0usize; perm.len()];
                        for (i, &p) in perm.iter().enumerate() {
                            inv[p] = i;
                        }
                        let back = g.permute(&inv)?;
                        self.acc_grad(input, &back, 1.0);
                    }
                }
                Op::CausalMask(a) => {
                    self.acc_grad(a, &g, 1.0);
                }
            }
        }
        Ok(())
    }

    fn take_or_zeros(&mut self, id: usize) -> Tensor {
        match self.nodes[id].grad.take() {
            Some(g) => g,
            None => Tensor::zeros(self.nodes[id].value.shape()),
        }
    }

    fn acc_grad(&mut self, id: usize, delta: &Tensor, scale: f64) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let mut g = self.take_or_zeros(id);
        for (o, &d) in g.data_mut().iter_mut().zip(delta.data().iter()) {
            *o += scale * d;
        }
        self.nodes[id].grad = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sign_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_identity_and_mul_hand() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[2]));
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);
        let y = g.constant(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let m = g.mul(x, y).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = g.sum_all(x);
        assert_eq!(g.value(s).item(), 10.0);
        let c = g.constant(Tensor::from_vec(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
        let m = g.reduce(ReduceKind::Mean, c, &[]).unwrap();
        assert_eq!(g.value(m).item(), 5.0);
        let z = g.constant(Tensor::zeros(&[3, 3]));
        let zs = g.sum_all(z);
        assert_eq!(g.value(zs).item(), 0.0);
    }

    #[test]
    fn reduce_invalid_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.reduce(ReduceKind::Sum, x, &[2]).is_err());
    }

    #[test]
    fn backward_square() {
        // loss = w^2 at w = 3 -> dw = 6
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let sq = g.mul(w, w).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_linear_map() {
        // loss = sum(W x), W = I2, x = [1, 1] -> dW rows equal x
        let mut g = Graph::new();
        let w = g.param(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.constant(Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn backward_is_linear_in_seed() {
        // grad of (a*l1 + b*l2) equals a*grad1 + b*grad2
        let build = |g: &mut Graph| {
            let w = g.param(Tensor::from_vec(vec![2], vec![0.3, -1.2]).unwrap());
            let x = g.constant(Tensor::from_vec(vec![2], vec![2.0, 0.5]).unwrap());
            let m = g.mul(w, x).unwrap();
            let l1 = g.sum_all(m);
            let sq = g.mul(w, w).unwrap();
            let l2 = g.sum_all(sq);
            (w, l1, l2)
        };
        let (a, b) = (1.7, -0.4);

        let mut g1 = Graph::new();
        let (w1, l1, _) = build(&mut g1);
        g1.backward(l1).unwrap();
        let grad1 = g1.grad(w1).unwrap().clone();

        let mut g2 = Graph::new();
        let (w2, _, l2) = build(&mut g2);
        g2.backward(l2).unwrap();
        let grad2 = g2.grad(w2).unwrap().clone();

        let mut g3 = Graph::new();
        let (w3, l1c, l2c) = build(&mut g3);
        let sa = g3.scale(l1c, a);
        let sb = g3.scale(l2c, b);
        let tot = g3.add(sa, sb).unwrap();
        g3.backward(tot).unwrap();
        let grad3 = g3.grad(w3).unwrap().clone();

        for i in 0..2 {
            let want = a * grad1.data()[i] + b * grad2.data()[i];
            assert!((grad3.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 3]));
        let m = g.causal_mask(x).unwrap();
        let sm = g.softmax(m).unwrap();
        let v = g.value(sm);
        // row 0 attends only to position 0
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.data()[1], 0.0);
        assert_eq!(v.data()[2], 0.0);
        // row 2 attends uniformly to 0..=2
        for j in 0..3 {
            assert!((v.data()[6 + j] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut g = Graph::new();
        let table = g.param(Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let e = g.embedding(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(g.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(e);
        g.backward(s).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).item() - (2.0f64).ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        assert!((grad.data()[0] - (-0.5)).abs() < 1e-12);
        assert!((grad.data()[1] - 0.5).abs() < 1e-12);
    }
}
