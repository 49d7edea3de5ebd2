//! Wengert tape: every forward primitive is recorded as a node, and
//! `backward` replays the tape in reverse to accumulate vector-Jacobian
//! products. The node list is topologically ordered by construction, so the
//! reverse sweep visits each node exactly once.
//!
//! The primitive set is fixed and closed. Every op here has a matching
//! backward rule and a central-difference test in `tests/gradcheck.rs`;
//! extending the set means adding all three.

use std::collections::BTreeMap;

use crate::error::{NumericError, Result};
use crate::tensor::Tensor;

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale(f64),
    ConcatRows,
    Concat1d,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    Embedding { ids: Vec<usize> },
    Softmax,
    LogSoftmax,
    LayerNorm { eps: f64 },
    Gelu,
    Tanh,
    Exp,
    Log,
    Sum,
    MeanRows,
    LogSumExp,
    CrossEntropySum { targets: Vec<usize> },
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by parameter name, as produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_param.iter()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.by_param.insert(name, grad);
    }

    /// Accumulate `other * scale` into self, inserting missing entries.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in other.iter() {
            match self.by_param.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b * scale;
                    }
                }
                None => {
                    self.by_param.insert(name.clone(), g.map(|v| v * scale));
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(VarId, String)>,
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

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor) -> Result<VarId> {
        if !value.all_finite() {
            return Err(NumericError::NonFinite(op_name(&op)));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, inputs, value, needs_grad });
        Ok(self.nodes.len() - 1)
    }

    /// Constant leaf: participates in forward values only.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, needs_grad: false });
        self.nodes.len() - 1
    }

    /// Gradient leaf. Names must be unique per tape so each parameter has
    /// exactly one slot in the result of `backward`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<VarId> {
        if self.params.iter().any(|(_, n)| n == name) {
            return Err(NumericError::DuplicateParameter(name.to_string()));
        }
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, needs_grad: true });
        let id = self.nodes.len() - 1;
        self.params.push((id, name.to_string()));
        Ok(id)
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.leaf(Tensor::scalar(v))
    }

    // ── forward primitives ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push(Op::MatMul, vec![a, b], Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let s = va.shape();
        if s.len() != 2 {
            return Err(NumericError::shape("transpose", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        self.push(Op::Transpose, vec![a], Tensor::new(vec![n, m], out)?)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(NumericError::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Add, vec![a, b], value)
    }

    /// Broadcast a length-n vector across every row of an [m, n] matrix.
    pub fn add_row(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(NumericError::shape("add_row", format!("{:?} + {:?}", sa, sb)));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut data = va.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += vb.data()[j];
            }
        }
        self.push(Op::AddRow, vec![a, b], Tensor::new(vec![m, n], data)?)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(NumericError::shape("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let value = self.nodes[a].value.map(|v| v * c);
        self.push(Op::Scale(c), vec![a], value)
    }

    /// Stack rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(NumericError::invalid("concat_rows", "no inputs"));
        }
        let n = self.nodes[inputs[0]].value.shape().get(1).copied();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in inputs {
            let t = &self.nodes[v].value;
            if t.shape().len() != 2 || t.shape().get(1).copied() != n {
                return Err(NumericError::shape("concat_rows", format!("{:?}", t.shape())));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, n.unwrap()], data)?;
        self.push(Op::ConcatRows, inputs.to_vec(), value)
    }

    /// Concatenate scalars and vectors into one vector.
    pub fn concat_1d(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(NumericError::invalid("concat_1d", "no inputs"));
        }
        let mut data = Vec::new();
        for &v in inputs {
            let t = &self.nodes[v].value;
            if t.shape().len() > 1 {
                return Err(NumericError::shape("concat_1d", format!("{:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::vector(data);
        self.push(Op::Concat1d, inputs.to_vec(), value)
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let s = va.shape();
        if s.len() != 2 || start + len > s[0] {
            return Err(NumericError::shape(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + len, s),
            ));
        }
        let n = s[1];
        let data = va.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data)?;
        self.push(Op::SliceRows { start, len }, vec![a], value)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let s = va.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(NumericError::shape(
                "slice_cols",
                format!("cols {}..{} of {:?}", start, start + len, s),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        self.push(Op::SliceCols { start, len }, vec![a], value)
    }

    /// Row lookup: table [V, d] indexed by `ids` -> [len(ids), d].
    pub fn embedding(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let vt = &self.nodes[table].value;
        let s = vt.shape();
        if s.len() != 2 {
            return Err(NumericError::shape("embedding", format!("table {:?}", s)));
        }
        let (vsize, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vsize) {
            return Err(NumericError::invalid(
                "embedding",
                format!("id {} out of range for table with {} rows", bad, vsize),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(Op::Embedding { ids: ids.to_vec() }, vec![table], value)
    }

    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let value = rowwise(va, softmax_slice)?;
        self.push(Op::Softmax, vec![a], value)
    }

    pub fn log_softmax(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let value = rowwise(va, log_softmax_slice)?;
        self.push(Op::LogSoftmax, vec![a], value)
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (vx, vg, vb) = (&self.nodes[x].value, &self.nodes[gamma].value, &self.nodes[beta].value);
        let n = *vx.shape().last().ok_or_else(|| NumericError::shape("layer_norm", "scalar input"))?;
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(NumericError::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], value)
    }

    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let value = self.nodes[a].value.map(gelu_scalar);
        self.push(Op::Gelu, vec![a], value)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let value = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh, vec![a], value)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        let value = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp, vec![a], value)
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let value = self.nodes[a].value.map(f64::ln);
        self.push(Op::Log, vec![a], value)
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    /// Mean over rows: [m, n] -> [n].
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let s = va.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(NumericError::shape("mean_rows", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += va.data()[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        self.push(Op::MeanRows, vec![a], Tensor::vector(out))
    }

    pub fn logsumexp(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        if va.shape().len() != 1 || va.numel() == 0 {
            return Err(NumericError::shape("logsumexp", format!("{:?}", va.shape())));
        }
        self.push(Op::LogSumExp, vec![a], Tensor::scalar(logsumexp_slice(va.data())))
    }

    /// Summed token-level negative log likelihood:
    /// `-sum_i log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy_sum(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let vl = &self.nodes[logits].value;
        let s = vl.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(NumericError::shape(
                "cross_entropy_sum",
                format!("logits {:?} vs {} targets", s, targets.len()),
            ));
        }
        let vsize = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vsize) {
            return Err(NumericError::invalid(
                "cross_entropy_sum",
                format!("target {} out of vocab {}", bad, vsize),
            ));
        }
        let mut nll = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &vl.data()[i * vsize..(i + 1) * vsize];
            let lse = logsumexp_slice(row);
            nll -= row[t] - lse;
        }
        self.push(
            Op::CrossEntropySum { targets: targets.to_vec() },
            vec![logits],
            Tensor::scalar(nll),
        )
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let expected: usize = shape.iter().product();
        if expected != va.numel() {
            return Err(NumericError::shape(
                "reshape",
                format!("{:?} -> {:?}", va.shape(), shape),
            ));
        }
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        self.push(Op::Reshape, vec![a], value)
    }

    /// Inner product of two equal-length vectors, as mul + sum.
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    // ── reverse sweep ──────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` w.r.t. every parameter
    /// leaf on the tape. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar() {
            return Err(NumericError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // leaf grads are collected below
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (vid, name) in &self.params {
            let shape = self.nodes[*vid].value.shape().to_vec();
            let g = match grads[*vid].take() {
                Some(t) => Tensor::new(shape, t.data().to_vec())?,
                None => Tensor::zeros(&shape),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if self.nodes[ins[0]].needs_grad {
                    // dA = dC @ B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * b.data()[p * n + j];
                            }
                        }
                    }
                    acc(grads, ins[0], &da);
                }
                if self.nodes[ins[1]].needs_grad {
                    // dB = A^T @ dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                    acc(grads, ins[1], &db);
                }
            }
            Op::Transpose => {
                let s = self.nodes[ins[0]].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g.data()[i * m + j];
                    }
                }
                acc(grads, ins[0], &da);
            }
            Op::Add => {
                for &i in ins {
                    if self.nodes[i].needs_grad {
                        acc(grads, i, g.data());
                    }
                }
            }
            Op::AddRow => {
                if self.nodes[ins[0]].needs_grad {
                    acc(grads, ins[0], g.data());
                }
                if self.nodes[ins[1]].needs_grad {
                    let n = self.nodes[ins[1]].value.numel();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % n] += v;
                    }
                    acc(grads, ins[1], &db);
                }
            }
            Op::Mul => {
                let (a, b) = (&self.nodes[ins[0]].value, &self.nodes[ins[1]].value);
                if self.nodes[ins[0]].needs_grad {
                    let da: Vec<f64> = g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                    acc(grads, ins[0], &da);
                }
                if self.nodes[ins[1]].needs_grad {
                    let db: Vec<f64> = g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect();
                    acc(grads, ins[1], &db);
                }
            }
            Op::Scale(c) => {
                let da: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                acc(grads, ins[0], &da);
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &i in ins {
                    let len = self.nodes[i].value.numel();
                    if self.nodes[i].needs_grad {
                        acc(grads, i, &g.data()[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Concat1d => {
                let mut offset = 0;
                for &i in ins {
                    let len = self.nodes[i].value.numel();
                    if self.nodes[i].needs_grad {
                        acc(grads, i, &g.data()[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { start, len } => {
                let s = self.nodes[ins[0]].value.shape();
                let n = s[1];
                let mut da = vec![0.0; s[0] * n];
                da[start * n..(start + len) * n].copy_from_slice(g.data());
                acc(grads, ins[0], &da);
            }
            Op::SliceCols { start, len } => {
                let s = self.nodes[ins[0]].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..*len {
                        da[i * n + start + j] = g.data()[i * len + j];
                    }
                }
                acc(grads, ins[0], &da);
            }
            Op::Embedding { ids } => {
                let s = self.nodes[ins[0]].value.shape();
                let d = s[1];
                let mut dt = vec![0.0; s[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[row * d + j];
                    }
                }
                acc(grads, ins[0], &dt);
            }
            Op::Softmax => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&0);
                let mut da = vec![0.0; y.numel()];
                for (row, (ys, gs)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[row * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(grads, ins[0], &da);
            }
            Op::LogSoftmax => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&0);
                let mut da = vec![0.0; y.numel()];
                for (row, (ys, gs)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..n {
                        da[row * n + j] = gs[j] - ys[j].exp() * gsum;
                    }
                }
                acc(grads, ins[0], &da);
            }
            Op::LayerNorm { eps } => {
                let x = &self.nodes[ins[0]].value;
                let gamma = &self.nodes[ins[1]].value;
                let n = *x.shape().last().unwrap();
                let rows = x.numel() / n;
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let xr = &x.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    for j in 0..n {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let dy: Vec<f64> = (0..n).map(|j| gr[j] * gamma.data()[j]).collect();
                    let dy_mean = dy.iter().sum::<f64>() / n as f64;
                    let dyx_mean = dy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv * (dy[j] - dy_mean - xhat[j] * dyx_mean);
                    }
                }
                if self.nodes[ins[0]].needs_grad {
                    acc(grads, ins[0], &dx);
                }
                if self.nodes[ins[1]].needs_grad {
                    acc(grads, ins[1], &dgamma);
                }
                if self.nodes[ins[2]].needs_grad {
                    acc(grads, ins[2], &dbeta);
                }
            }
            Op::Gelu => {
                let x = &self.nodes[ins[0]].value;
                let da: Vec<f64> =
                    g.data().iter().zip(x.data()).map(|(gv, &xv)| gv * gelu_grad_scalar(xv)).collect();
                acc(grads, ins[0], &da);
            }
            Op::Tanh => {
                let y = &node.value;
                let da: Vec<f64> =
                    g.data().iter().zip(y.data()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                acc(grads, ins[0], &da);
            }
            Op::Exp => {
                let y = &node.value;
                let da: Vec<f64> = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect();
                acc(grads, ins[0], &da);
            }
            Op::Log => {
                let x = &self.nodes[ins[0]].value;
                let da: Vec<f64> = g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect();
                acc(grads, ins[0], &da);
            }
            Op::Sum => {
                let n = self.nodes[ins[0]].value.numel();
                let gv = g.data()[0];
                acc(grads, ins[0], &vec![gv; n]);
            }
            Op::MeanRows => {
                let s = self.nodes[ins[0]].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g.data()[j] / m as f64;
                    }
                }
                acc(grads, ins[0], &da);
            }
            Op::LogSumExp => {
                let x = &self.nodes[ins[0]].value;
                let gv = g.data()[0];
                let da: Vec<f64> = softmax_vec(x.data()).iter().map(|p| p * gv).collect();
                acc(grads, ins[0], &da);
            }
            Op::CrossEntropySum { targets } => {
                let logits = &self.nodes[ins[0]].value;
                let vsize = logits.shape()[1];
                let gv = g.data()[0];
                let mut da = vec![0.0; logits.numel()];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &logits.data()[i * vsize..(i + 1) * vsize];
                    let probs = softmax_vec(row);
                    for j in 0..vsize {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        da[i * vsize + j] = gv * (probs[j] - indicator);
                    }
                }
                acc(grads, ins[0], &da);
            }
            Op::Reshape => {
                acc(grads, ins[0], g.data());
            }
        }
    }
}

/// Add `contribution` into the gradient slot for `id`, creating it if absent.
fn acc(grads: &mut [Option<Tensor>], id: VarId, contribution: &[f64]) {
    match &mut grads[id] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => {
            // Shape is restored when the owner consumes the slot; raw data
            // carries enough structure for accumulation.
            grads[id] = Some(Tensor::vector(contribution.to_vec()));
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul => "matmul",
        Op::Transpose => "transpose",
        Op::Add => "add",
        Op::AddRow => "add_row",
        Op::Mul => "mul",
        Op::Scale(_) => "scale",
        Op::ConcatRows => "concat_rows",
        Op::Concat1d => "concat_1d",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Embedding { .. } => "embedding",
        Op::Softmax => "softmax",
        Op::LogSoftmax => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu => "gelu",
        Op::Tanh => "tanh",
        Op::Exp => "exp",
        Op::Log => "log",
        Op::Sum => "sum",
        Op::MeanRows => "mean_rows",
        Op::LogSumExp => "logsumexp",
        Op::CrossEntropySum { .. } => "cross_entropy_sum",
        Op::Reshape => "reshape",
    }
}

// ── stable softmax helpers ─────────────────────────────────────────────

pub fn logsumexp_slice(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_vec(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_slice(row: &mut [f64]) {
    let out = softmax_vec(row);
    row.copy_from_slice(&out);
}

fn log_softmax_slice(row: &mut [f64]) {
    let lse = logsumexp_slice(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn rowwise(t: &Tensor, f: impl Fn(&mut [f64])) -> Result<Tensor> {
    let n = *t
        .shape()
        .last()
        .ok_or_else(|| NumericError::shape("softmax", "scalar input"))?;
    if n == 0 {
        return Err(NumericError::shape("softmax", "empty axis"));
    }
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(n) {
        f(row);
    }
    Tensor::new(t.shape().to_vec(), data)
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
