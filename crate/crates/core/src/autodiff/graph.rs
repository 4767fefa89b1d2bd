use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::{add_assign, gemm, ConvGeom, Layout};
use super::params::{BnUpdate, ParamId, ParamStore};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    Sum(Var),
    MeanLast(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Single-use reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is one reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests in one graph share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable());
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        add_assign(out.data_mut(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s and is repeated
    /// over the leading dimensions.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add_broadcast: {sa:?} vs {sb:?}")));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(bv.len()) {
            add_assign(chunk, bv);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(format!("scale_by: factor shape {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    /// Matrix product over the last two axes. Leading (batch) axes must match,
    /// or one operand must be a plain matrix that is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs matrices: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims: {sa:?} x {sb:?}")));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (plan, lead) = if lead_b.is_empty() {
            // Fold A's batch into its rows.
            let rows = lead_a.iter().product::<usize>() * m;
            (
                MatMulPlan { batch: 1, m: rows, k, n, a_batched: false, b_batched: false },
                lead_a.to_vec(),
            )
        } else if lead_a.is_empty() {
            (
                MatMulPlan { batch: lead_b.iter().product(), m, k, n, a_batched: false, b_batched: true },
                lead_b.to_vec(),
            )
        } else if lead_a == lead_b {
            (
                MatMulPlan { batch: lead_a.iter().product(), m, k, n, a_batched: true, b_batched: true },
                lead_a.to_vec(),
            )
        } else {
            return Err(Error::shape(format!("matmul batch dims: {sa:?} x {sb:?}")));
        };
        let mut shape = lead;
        shape.extend([m, n]);
        let mut out = Tensor::zeros(&shape);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let p = plan;
            for bi in 0..p.batch {
                let ao = if p.a_batched { bi * p.m * p.k } else { 0 };
                let bo = if p.b_batched { bi * p.k * p.n } else { 0 };
                let co = bi * p.m * p.n;
                gemm(
                    p.m,
                    p.k,
                    p.n,
                    &av[ao..],
                    Layout::row_major(p.k),
                    &bv[bo..],
                    Layout::row_major(p.n),
                    &mut out.data_mut()[co..],
                    Layout::row_major(p.n),
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, plan }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("permute {axes:?} invalid for {shape:?}")));
        }
        let out = permute_tensor(self.value(x), axes);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Cross-correlation of `x: [N, Cin, T, V]` with `w: [Cout, Cin, kt, kv]`,
    /// zero padding `pad` frames on both ends of `T` and striding along `T`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!("conv2d: input {sx:?}, weight {sw:?}")));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] < sw[3] {
            return Err(Error::shape(format!("conv2d: kernel {sw:?} does not fit {sx:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            cout: sw[0],
            t: sx[2],
            v: sx[3],
            kt: sw[2],
            kv: sw[3],
            stride,
            pad,
            t_out: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            v_out: sx[3] - sw[3] + 1,
        };
        let mut out = Tensor::zeros(&[geom.n, geom.cout, geom.t_out, geom.v_out]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let in_len = geom.cin * geom.t * geom.v;
            let out_len = geom.cout * geom.col_cols();
            let ncol = geom.col_cols();
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; geom.col_rows() * ncol] };
            for ni in 0..geom.n {
                let xs = &xv[ni * in_len..(ni + 1) * in_len];
                let src: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    geom.im2col(xs, &mut cols);
                    &cols
                };
                let dst = &mut out.data_mut()[ni * out_len..(ni + 1) * out_len];
                gemm(
                    geom.cout,
                    geom.col_rows(),
                    ncol,
                    wv,
                    Layout::row_major(geom.col_rows()),
                    src,
                    Layout::row_major(ncol),
                    dst,
                    Layout::row_major(ncol),
                    false,
                );
                if let Some(b) = bias {
                    let bv = self.nodes[b.0].value.data();
                    for (co, row) in dst.chunks_mut(ncol).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[co]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, bias, geom }, rg))
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// Training mode normalizes with the batch statistics and records a
    /// running-statistics update; eval mode uses the stored running statistics.
    pub fn batch_norm(&mut self, store: &ParamStore, x: Var, bn: BnParams, training: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("batch_norm needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if store.value(bn.gamma).numel() != c || store.value(bn.running_mean).numel() != c {
            return Err(Error::shape(format!(
                "batch_norm: {c} channels but parameters hold {}",
                store.value(bn.gamma).numel()
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        if training && count < 2 {
            return Err(Error::shape("batch_norm in training mode needs more than one value per channel"));
        }
        let gamma = self.param(store, bn.gamma);
        let beta = self.param(store, bn.beta);
        let xv = self.value(x).data();
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let s = &xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                    mean[ci] += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let s = &xv[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                    var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        } else {
            (
                store.value(bn.running_mean).data().to_vec(),
                store.value(bn.running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * inner..(ni * c + ci + 1) * inner;
                for i in r {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        if training {
            let unbias = count as f64 / (count as f64 - 1.0);
            self.bn_updates.push(BnUpdate {
                running_mean: bn.running_mean,
                running_var: bn.running_var,
                batch_mean: mean,
                batch_var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        ))
    }

    /// Which ReLU inputs are positive, over every ReLU in evaluation order.
    /// Two evaluations with equal signatures lie on the same linear piece.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Inverted dropout: in training, zeroes each entry with probability `p`
    /// and scales survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// `x·wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape(format!("linear: input {sx:?}, weight {sw:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let (n, fin, fout) = (sx[0], sx[1], sw[0]);
        let mut out = Tensor::zeros(&[n, fout]);
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            Layout::row_major(fin),
            self.value(w).data(),
            Layout::row_major(fin).transposed(),
            out.data_mut(),
            Layout::row_major(fout),
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fout) {
                add_assign(row, &bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, bias }, rg))
    }

    /// Max-shifted softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let len = *out.shape().last().unwrap_or(&1);
        for row in out.data_mut().chunks_mut(len.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&len, lead)) = shape.split_last() else {
            return Err(Error::shape("mean_last on a rank-0 tensor"));
        };
        if len == 0 {
            return Err(Error::shape("mean_last over an empty axis"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(len)
            .map(|c| c.iter().sum::<f64>() / len as f64)
            .collect();
        let out_shape = if lead.is_empty() { vec![1] } else { lead.to_vec() };
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanLast(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding exact gradients into every
    /// leaf that requires them. Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_assign(acc.data_mut(), &g),
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| add_assign(d, g));
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| {
                    for chunk in g.chunks(d.len()) {
                        add_assign(d, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g * b));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(av).for_each(|((d, g), a)| *d += g * a));
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                let av = val(*a);
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
                acc(*s, &mut |d| d[0] += g.iter().zip(av).map(|(g, a)| g * a).sum::<f64>());
            }
            Op::MatMul { a, b, plan: p } => {
                let (av, bv) = (val(*a), val(*b));
                // dA = dC·Bᵀ
                acc(*a, &mut |d| {
                    for bi in 0..p.batch {
                        let ao = if p.a_batched { bi * p.m * p.k } else { 0 };
                        let bo = if p.b_batched { bi * p.k * p.n } else { 0 };
                        gemm(
                            p.m,
                            p.n,
                            p.k,
                            &g[bi * p.m * p.n..],
                            Layout::row_major(p.n),
                            &bv[bo..],
                            Layout::row_major(p.n).transposed(),
                            &mut d[ao..],
                            Layout::row_major(p.k),
                            true,
                        );
                    }
                });
                // dB = Aᵀ·dC
                acc(*b, &mut |d| {
                    for bi in 0..p.batch {
                        let ao = if p.a_batched { bi * p.m * p.k } else { 0 };
                        let bo = if p.b_batched { bi * p.k * p.n } else { 0 };
                        gemm(
                            p.k,
                            p.m,
                            p.n,
                            &av[ao..],
                            Layout::row_major(p.k).transposed(),
                            &g[bi * p.m * p.n..],
                            Layout::row_major(p.n),
                            &mut d[bo..],
                            Layout::row_major(p.n),
                            true,
                        );
                    }
                });
            }
            Op::Permute { x, axes } => {
                let out_shape = nodes[i].value.shape();
                let mut inverse = vec![0; axes.len()];
                for (pos, &a) in axes.iter().enumerate() {
                    inverse[a] = pos;
                }
                let gt = Tensor::new(out_shape, g.to_vec()).expect("permute grad shape");
                let back = permute_tensor(&gt, &inverse);
                acc(*x, &mut |d| add_assign(d, back.data()));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_assign(d, g)),
            Op::Conv2d { x, w, bias, geom } => {
                let geom = *geom;
                let (xv, wv) = (val(*x), val(*w));
                let in_len = geom.cin * geom.t * geom.v;
                let ncol = geom.col_cols();
                let out_len = geom.cout * ncol;
                let rows = geom.col_rows();
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for gn in g.chunks(out_len) {
                            for (co, row) in gn.chunks(ncol).enumerate() {
                                d[co] += row.iter().sum::<f64>();
                            }
                        }
                    });
                }
                let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncol] };
                acc(*w, &mut |d| {
                    for ni in 0..geom.n {
                        let xs = &xv[ni * in_len..(ni + 1) * in_len];
                        let src: &[f64] = if geom.is_pointwise() {
                            xs
                        } else {
                            geom.im2col(xs, &mut cols);
                            &cols
                        };
                        gemm(
                            geom.cout,
                            ncol,
                            rows,
                            &g[ni * out_len..],
                            Layout::row_major(ncol),
                            src,
                            Layout::row_major(ncol).transposed(),
                            d,
                            Layout::row_major(rows),
                            true,
                        );
                    }
                });
                if wants(*x) {
                    let mut dcols = vec![0.0; rows * ncol];
                    acc(*x, &mut |d| {
                        for ni in 0..geom.n {
                            let dx = &mut d[ni * in_len..(ni + 1) * in_len];
                            if geom.is_pointwise() {
                                gemm(
                                    rows,
                                    geom.cout,
                                    ncol,
                                    wv,
                                    Layout::row_major(rows).transposed(),
                                    &g[ni * out_len..],
                                    Layout::row_major(ncol),
                                    dx,
                                    Layout::row_major(ncol),
                                    true,
                                );
                            } else {
                                gemm(
                                    rows,
                                    geom.cout,
                                    ncol,
                                    wv,
                                    Layout::row_major(rows).transposed(),
                                    &g[ni * out_len..],
                                    Layout::row_major(ncol),
                                    &mut dcols,
                                    Layout::row_major(ncol),
                                    false,
                                );
                                geom.col2im(&dcols, dx);
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (n * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for j in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*beta, &mut |d| add_assign(d, &sum_g));
                acc(*gamma, &mut |d| add_assign(d, &sum_gx));
                let gam = val(*gamma);
                acc(*x, &mut |d| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let scale = gam[ci] * inv_std[ci];
                            for j in (ni * c + ci) * inner..(ni * c + ci + 1) * inner {
                                d[j] += if *training {
                                    scale * (g[j] - sum_g[ci] / count - xhat[j] * sum_gx[ci] / count)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(xv)
                        .for_each(|((d, g), x)| if *x > 0.0 { *d += g });
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(mask).for_each(|((d, g), m)| *d += g * m));
            }
            Op::Linear { x, w, bias } => {
                let sx = nodes[x.0].value.shape();
                let (n, fin) = (sx[0], sx[1]);
                let fout = nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    gemm(n, fout, fin, g, Layout::row_major(fout), wv, Layout::row_major(fin), d, Layout::row_major(fin), true)
                });
                acc(*w, &mut |d| {
                    gemm(
                        fout,
                        n,
                        fin,
                        g,
                        Layout::row_major(fout).transposed(),
                        xv,
                        Layout::row_major(fin),
                        d,
                        Layout::row_major(fin),
                        true,
                    )
                });
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for row in g.chunks(fout) {
                            add_assign(d, row);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let len = *nodes[i].value.shape().last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(len).zip(g.chunks(len)).zip(y.chunks(len)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanLast(x) => {
                let len = *nodes[x.0].value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for (row, gv) in d.chunks_mut(len).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv / len as f64);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = x.numel();
    let mut out = Vec::with_capacity(numel);
    let xv = x.data();
    let rank = out_shape.len();
    if rank == 0 || numel == 0 {
        return x.clone();
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    loop {
        // Innermost axis as a strided run.
        let s = src_strides[last];
        for j in 0..out_shape[last] {
            out.push(xv[off + j * s]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(&out_shape, out).expect("permute shape");
            }
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
