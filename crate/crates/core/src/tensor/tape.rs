use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{add_into, gemm, inverse_axes, permute};
use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule recorded for a node. Parent links are node ids, which are
/// always smaller than the id of the node that references them.
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `x[.., n] + b[n]`
    AddRow(usize, usize),
    Scale(usize, f64),
    /// Elementwise map; stores dy/dx per element.
    Pointwise(usize, Vec<f64>),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Sum(usize),
    Mean(usize),
    /// Softmax along the last axis; backward reads the node's own output.
    Softmax {
        x: usize,
        temperature: f64,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    /// Concatenation along the last axis.
    Concat {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    MaskedMeanPool {
        x: usize,
        mask: Vec<f64>,
        counts: Vec<f64>,
    },
    ScaleGroups {
        x: usize,
        w: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    PlogpSum(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Scale(x, _) | Pointwise(x, _) | Sum(x) | Mean(x) | Reshape(x) | PlogpSum(x) => {
                vec![*x]
            }
            Softmax { x, .. }
            | Permute { x, .. }
            | GatherRows { x, .. }
            | MaskedMeanPool { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { parts, .. } => parts.clone(),
            ScaleGroups { x, w } => vec![*x, *w],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddRow(..) => "add_row",
            Scale(..) => "scale",
            Pointwise(..) => "pointwise",
            MatMul { .. } => "matmul",
            Sum(_) => "sum",
            Mean(_) => "mean",
            Softmax { .. } => "softmax",
            LayerNorm { .. } => "layer_norm",
            Permute { .. } => "permute",
            Reshape(_) => "reshape",
            Concat { .. } => "concat",
            GatherRows { .. } => "gather_rows",
            MaskedMeanPool { .. } => "masked_mean_pool",
            ScaleGroups { .. } => "scale_groups",
            CrossEntropy { .. } => "cross_entropy",
            PlogpSum(_) => "plogp_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor that lives on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op.name())
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is retained after [`Tape::backward`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Clears gradients retained on leaf variables.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse pass from a scalar loss. Gradients are accumulated onto every
    /// variable leaf reachable from `loss`; calling again adds to them.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let count = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..count).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..count).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                match &mut nodes[id].grad {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient; `None` if no backward pass reached this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => add_into(acc, &contribution),
        slot => *slot = Some(contribution),
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if wants(nodes, *a) {
                accumulate(nodes, grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
            }
            if wants(nodes, *b) {
                accumulate(nodes, grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            if wants(nodes, *b) {
                let n = nodes[*b].value.numel();
                let mut db = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    add_into(&mut db, row);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.iter().map(|v| v * c).collect()),
        Op::Pointwise(x, deriv) => {
            accumulate(nodes, grads, *x, g.iter().zip(deriv).map(|(g, d)| g * d).collect())
        }
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
            if wants(nodes, a) {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    let bb = &vb[i * k * n..(i + 1) * k * n];
                    let dst = &mut da[i * m * k..(i + 1) * m * k];
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, gc, false, bb, !trans_b, dst, false);
                }
                accumulate(nodes, grads, a, da);
            }
            if wants(nodes, b) {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    let aa = &va[i * m * k..(i + 1) * m * k];
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // B stored n×k: dB = dCᵀ · A
                        gemm(n, m, k, gc, true, aa, false, dst, false);
                    } else {
                        gemm(k, m, n, aa, true, gc, false, dst, false);
                    }
                }
                accumulate(nodes, grads, b, db);
            }
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.numel();
            accumulate(nodes, grads, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            accumulate(nodes, grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::Softmax { x, temperature } => {
            let y = out.data();
            let cols = *out.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y
                .chunks_exact(cols)
                .zip(g.chunks_exact(cols))
                .zip(dx.chunks_exact_mut(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot) / temperature;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = nodes[*gamma].value.data();
            let d = gam.len();
            if wants(nodes, *gamma) {
                let mut dg = vec![0.0; d];
                for (xr, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * xr[j];
                    }
                }
                accumulate(nodes, grads, *gamma, dg);
            }
            if wants(nodes, *beta) {
                let mut db = vec![0.0; d];
                for gr in g.chunks_exact(d) {
                    add_into(&mut db, gr);
                }
                accumulate(nodes, grads, *beta, db);
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; g.len()];
                let df = d as f64;
                for (r, ((xr, gr), dr)) in xhat
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xr[j];
                    }
                    let s = inv_std[r] / df;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dr[j] = s * (df * dxh - sum_dxhat - xr[j] * sum_dxhat_xhat);
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::Permute { x, axes } => {
            let (_, dx) = permute(g, out.shape(), &inverse_axes(axes));
            accumulate(nodes, grads, *x, dx);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if wants(nodes, p) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, dp);
                }
                offset += w;
            }
        }
        Op::GatherRows { x, rows } => {
            if wants(nodes, *x) {
                let src = &nodes[*x].value;
                let cols = src.numel() / src.shape()[0];
                let mut dx = vec![0.0; src.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                }
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::MaskedMeanPool { x, mask, counts } => {
            let shape = nodes[*x].value.shape();
            let (n, d) = (shape[1], shape[2]);
            let mut dx = vec![0.0; nodes[*x].value.numel()];
            for (bi, &count) in counts.iter().enumerate() {
                for t in 0..n {
                    let m = mask[bi * n + t];
                    if m == 0.0 {
                        continue;
                    }
                    let dst = &mut dx[(bi * n + t) * d..(bi * n + t + 1) * d];
                    for (dv, gv) in dst.iter_mut().zip(&g[bi * d..(bi + 1) * d]) {
                        *dv = gv * m / count;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ScaleGroups { x, w } => {
            let (vx, vw) = (nodes[*x].value.data(), nodes[*w].value.data());
            let size = vx.len() / vw.len();
            if wants(nodes, *x) {
                let mut dx = vec![0.0; vx.len()];
                for (gi, wv) in vw.iter().enumerate() {
                    for j in gi * size..(gi + 1) * size {
                        dx[j] = g[j] * wv;
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            if wants(nodes, *w) {
                let dw = (0..vw.len())
                    .map(|gi| {
                        let r = gi * size..(gi + 1) * size;
                        g[r.clone()].iter().zip(&vx[r]).map(|(g, x)| g * x).sum()
                    })
                    .collect();
                accumulate(nodes, grads, *w, dw);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let batch = labels.len();
            let classes = probs.len() / batch;
            let scale = g[0] / batch as f64;
            let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                dl[i * classes + y] -= scale;
            }
            accumulate(nodes, grads, *logits, dl);
        }
        Op::PlogpSum(p) => {
            let vp = nodes[*p].value.data();
            let cols = vp.len() / g.len();
            let dp = vp
                .iter()
                .enumerate()
                .map(|(j, &pv)| {
                    if pv > 0.0 {
                        g[j / cols] * (pv.ln() + 1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *p, dp);
        }
    }
}
