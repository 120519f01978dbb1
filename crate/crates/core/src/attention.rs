//! Multi-head self-attention and its budgeted variant.
//!
//! The budgeted layer pools its input into a summary `h`, predicts a budget
//! `s = σ(f_θ(h))`, scores heads with `z = g_φ(h) + noise`, turns the scores
//! into a relevance distribution `p = softmax(z / τ)` and weights every head
//! output by `w_i = s·H·p_i`. At inference only the `k = max(1, ⌊s·H⌋)` most
//! relevant heads contribute.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::ScheduleConfig;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Inference,
}

/// Projection weights of one attention layer. Every matrix is `D×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let d = w_q.shape().first().copied().unwrap_or(0);
        check_heads(d, heads)?;
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [d, d] {
                return Err(Error::shape("attention_params", &[d, d], w.shape()));
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    /// Xavier-uniform initialization.
    pub fn init(d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(d_model, heads)?;
        let mut w = || xavier(d_model, d_model, rng);
        let (q, k, v, o) = (w(), w(), w(), w());
        Self::new(q, k, v, o, heads)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    /// Binds every matrix as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> AttentionVars<'t> {
        AttentionVars {
            w_q: tape.variable(self.w_q.clone()),
            w_k: tape.variable(self.w_k.clone()),
            w_v: tape.variable(self.w_v.clone()),
            w_o: tape.variable(self.w_o.clone()),
            heads: self.heads,
        }
    }
}

pub(crate) fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Param(format!(
            "model dimension {d_model} is not divisible into {heads} heads"
        )));
    }
    Ok(())
}

pub(crate) fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
    pub heads: usize,
}

/// Budget predictor `f_θ: D → D_hidden → 1` (ReLU between layers) and head
/// scorer `g_φ: D → H` (linear).
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetNets {
    pub f_w1: Tensor,
    pub f_b1: Tensor,
    pub f_w2: Tensor,
    pub f_b2: Tensor,
    pub g_w: Tensor,
    pub g_b: Tensor,
}

impl BudgetNets {
    pub fn init(d_model: usize, hidden: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            f_w1: xavier(d_model, hidden, rng),
            f_b1: Tensor::zeros(&[hidden]),
            f_w2: xavier(hidden, 1, rng),
            f_b2: Tensor::zeros(&[1]),
            g_w: xavier(d_model, heads, rng),
            g_b: Tensor::zeros(&[heads]),
        }
    }

    pub fn heads(&self) -> usize {
        self.g_b.numel()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BudgetNetVars<'t> {
        BudgetNetVars {
            f_w1: tape.variable(self.f_w1.clone()),
            f_b1: tape.variable(self.f_b1.clone()),
            f_w2: tape.variable(self.f_w2.clone()),
            f_b2: tape.variable(self.f_b2.clone()),
            g_w: tape.variable(self.g_w.clone()),
            g_b: tape.variable(self.g_b.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BudgetNetVars<'t> {
    pub f_w1: Var<'t>,
    pub f_b1: Var<'t>,
    pub f_w2: Var<'t>,
    pub f_b2: Var<'t>,
    pub g_w: Var<'t>,
    pub g_b: Var<'t>,
}

/// Per-example record of one budgeted layer's gating decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub s: f64,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub w: Vec<f64>,
    pub mask: Vec<bool>,
    pub k: usize,
}

impl HeadSelection {
    pub fn heads(&self) -> usize {
        self.p.len()
    }

    /// Σ p log p (0 log 0 = 0).
    pub fn plogp(&self) -> f64 {
        self.p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum()
    }

    /// Active head indices ordered by descending `p`, ties by index.
    pub fn active_by_relevance(&self) -> Vec<usize> {
        relevance_order(&self.p)
            .into_iter()
            .filter(|&i| self.mask[i])
            .collect()
    }
}

/// Where the budget `s` comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSource {
    #[default]
    Learned,
    Fixed(f64),
}

/// Where the head scores `z` come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    Learned,
    /// Fresh i.i.d. standard-normal scores per example and forward pass; the
    /// top-k of such scores is a uniformly random head subset.
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateControl {
    pub budget: BudgetSource,
    pub scores: ScoreSource,
    /// Overrides `k` at inference (e.g. `H` to reproduce full-head cost).
    pub force_k: Option<usize>,
}

/// Step, schedule and randomness seen by a gating layer in one forward pass.
pub struct GateContext<'a, R: Rng> {
    pub step: u64,
    pub schedule: &'a ScheduleConfig,
    pub mode: Mode,
    pub control: GateControl,
    pub rng: &'a mut R,
}

/// `s = σ(f_θ(h))` for a batch of summaries `h: [B, D]`; returns `[B]`.
pub fn compute_budget<'t>(h: &Var<'t>, nets: &BudgetNetVars<'t>) -> Result<Var<'t>> {
    let batch = h.shape()[0];
    h.matmul(&nets.f_w1)?
        .add_row(&nets.f_b1)?
        .relu()
        .matmul(&nets.f_w2)?
        .add_row(&nets.f_b2)?
        .reshape(&[batch])
        .map(|logit| logit.sigmoid())
}

/// `z = g_φ(h) + ε·σ(t)` with `ε ~ N(0, 1)` per head and example in train
/// mode; `z = g_φ(h)` at inference. Returns `[B, H]`.
pub fn head_scores<'t, R: Rng>(
    h: &Var<'t>,
    nets: &BudgetNetVars<'t>,
    step: u64,
    schedule: &ScheduleConfig,
    rng: &mut R,
    mode: Mode,
) -> Result<Var<'t>> {
    let logits = h.matmul(&nets.g_w)?.add_row(&nets.g_b)?;
    let sigma = schedule.noise_scale(step);
    if mode == Mode::Inference || sigma == 0.0 {
        return Ok(logits);
    }
    let noise = Tensor::randn(&logits.shape(), sigma, rng);
    logits.add(&h.tape().constant(noise))
}

/// `p = softmax(z / τ(t))` along the head axis.
pub fn head_probs<'t>(z: &Var<'t>, step: u64, schedule: &ScheduleConfig) -> Result<Var<'t>> {
    z.softmax(schedule.temperature(step))
}

/// `w_i = s·H·p_i` for `s: [B]`, `p: [B, H]`.
pub fn head_weights<'t>(s: &Var<'t>, p: &Var<'t>) -> Result<Var<'t>> {
    let heads = *p.shape().last().expect("p has a head axis");
    Ok(p.scale_groups(s)?.scale(heads as f64))
}

/// `k = max(1, ⌊s·H⌋)` (capped at `H`) and the mask of the `k` largest `p_i`.
pub fn select_top_k(p: &[f64], s: f64) -> (usize, Vec<bool>) {
    let heads = p.len();
    let k = ((s * heads as f64).floor() as usize).clamp(1, heads);
    (k, top_k_mask(p, k))
}

pub(crate) fn top_k_mask(p: &[f64], k: usize) -> Vec<bool> {
    let mut mask = vec![false; p.len()];
    for i in relevance_order(p).into_iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Head indices by descending `p`; ties keep the lower index first.
pub fn relevance_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    order
}

fn split_heads<'t>(x: &Var<'t>, heads: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    x.reshape(&[b, n, heads, d / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, n, d / heads])
}

fn merge_heads<'t>(x: &Var<'t>, batch: usize, heads: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let (n, dh) = (shape[1], shape[2]);
    x.reshape(&[batch, heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, n, heads * dh])
}

/// Output of an attention layer along with its per-head probability maps
/// (`[B·H, N, N]`, row-major by example then head).
pub struct Attended<'t> {
    pub output: Var<'t>,
    pub probs: Var<'t>,
}

fn check_input(x: &Var<'_>, vars: &AttentionVars<'_>, pad_mask: &Tensor) -> Result<(usize, usize, usize)> {
    let shape = x.shape();
    let [b, n, d] = shape[..] else {
        return Err(Error::shape("attention", &shape, &vars.w_q.shape()));
    };
    if vars.w_q.shape() != [d, d] {
        return Err(Error::shape("attention", &shape, &vars.w_q.shape()));
    }
    check_heads(d, vars.heads)?;
    if pad_mask.shape() != [b, n] {
        return Err(Error::shape("attention pad mask", &shape, pad_mask.shape()));
    }
    Ok((b, n, d))
}

/// Scaled dot-product attention over all heads, optionally scaling head
/// outputs by `head_weights: [B·H]` before concatenation.
fn attend<'t>(
    x: &Var<'t>,
    vars: &AttentionVars<'t>,
    pad_mask: &Tensor,
    head_weights: Option<&Var<'t>>,
) -> Result<Attended<'t>> {
    let (b, _, d) = check_input(x, vars, pad_mask)?;
    let heads = vars.heads;
    let dh = d / heads;
    let q = split_heads(&x.matmul(&vars.w_q)?, heads)?;
    let k = split_heads(&x.matmul(&vars.w_k)?, heads)?;
    let v = split_heads(&x.matmul(&vars.w_v)?, heads)?;
    let scores = q.bmm_nt(&k)?.scale(1.0 / (dh as f64).sqrt());
    let probs = scores.masked_softmax(pad_mask, 1.0)?;
    let mut ctx = probs.bmm(&v)?;
    if let Some(w) = head_weights {
        ctx = ctx.scale_groups(w)?;
    }
    let output = merge_heads(&ctx, b, heads)?.matmul(&vars.w_o)?;
    Ok(Attended { output, probs })
}

/// Standard multi-head attention over `x: [B, N, D]`; padded keys
/// (`pad_mask == 0`) are excluded from every softmax.
pub fn standard_mha<'t>(x: &Var<'t>, vars: &AttentionVars<'t>, pad_mask: &Tensor) -> Result<Attended<'t>> {
    attend(x, vars, pad_mask, None)
}

pub struct BudgetedOutput<'t> {
    pub attended: Attended<'t>,
    /// Budget per example, `[B]`.
    pub s: Var<'t>,
    /// Head relevance distribution, `[B, H]`.
    pub p: Var<'t>,
    pub selections: Vec<HeadSelection>,
}

/// Gating decision shared by the mask path and the skip path.
struct Gate<'t> {
    s: Var<'t>,
    p: Var<'t>,
    w: Var<'t>,
    selections: Vec<HeadSelection>,
}

fn gate<'t, R: Rng>(
    h: &Var<'t>,
    nets: &BudgetNetVars<'t>,
    heads: usize,
    ctx: &mut GateContext<'_, R>,
) -> Result<Gate<'t>> {
    let tape = h.tape();
    let batch = h.shape()[0];
    if nets.g_b.shape() != [heads] {
        return Err(Error::shape("budget nets", &[heads], &nets.g_b.shape()));
    }
    let s = match ctx.control.budget {
        BudgetSource::Learned => compute_budget(h, nets)?,
        BudgetSource::Fixed(v) => {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Param(format!("fixed budget {v} not in (0, 1]")));
            }
            tape.constant(Tensor::full(&[batch], v))
        }
    };
    let z = match ctx.control.scores {
        ScoreSource::Learned => head_scores(h, nets, ctx.step, ctx.schedule, ctx.rng, ctx.mode)?,
        ScoreSource::Random => tape.constant(Tensor::randn(&[batch, heads], 1.0, ctx.rng)),
    };
    let p = head_probs(&z, ctx.step, ctx.schedule)?;
    let w = head_weights(&s, &p)?;
    let selections = {
        let (sv, zv, pv, wv) = (s.value(), z.value(), p.value(), w.value());
        (0..batch)
            .map(|b| {
                let prow = pv.row(b);
                let (k, mask) = match ctx.control.force_k {
                    Some(k) if (1..=heads).contains(&k) => (k, top_k_mask(prow, k)),
                    Some(k) => {
                        return Err(Error::Param(format!("force_k {k} outside [1, {heads}]")))
                    }
                    None => select_top_k(prow, sv.data()[b]),
                };
                Ok(HeadSelection {
                    s: sv.data()[b],
                    z: zv.row(b).to_vec(),
                    p: prow.to_vec(),
                    w: wv.row(b).to_vec(),
                    mask,
                    k,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Gate { s, p, w, selections })
}

/// Budgeted attention over `x: [B, N, D]` with gating computed from the
/// pooled summary `h: [B, D]`.
///
/// Train mode runs every head scaled by `w_i`. Inference mode keeps only the
/// top-k heads per example (`w_i·m_i`); inactive heads contribute exact zeros.
pub fn budgeted_attention<'t, R: Rng>(
    x: &Var<'t>,
    h: &Var<'t>,
    vars: &AttentionVars<'t>,
    nets: &BudgetNetVars<'t>,
    pad_mask: &Tensor,
    ctx: &mut GateContext<'_, R>,
) -> Result<BudgetedOutput<'t>> {
    let (b, _, _) = check_input(x, vars, pad_mask)?;
    let heads = vars.heads;
    let gate = gate(h, nets, heads, ctx)?;
    let effective = match ctx.mode {
        Mode::Train => gate.w,
        Mode::Inference => {
            let mask: Vec<f64> = gate
                .selections
                .iter()
                .flat_map(|sel| sel.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
                .collect();
            let mask = x.tape().constant(Tensor::new(&[b, heads], mask)?);
            gate.w.mul(&mask)?
        }
    };
    let flat = effective.reshape(&[b * heads])?;
    let attended = attend(x, vars, pad_mask, Some(&flat))?;
    Ok(BudgetedOutput {
        attended,
        s: gate.s,
        p: gate.p,
        selections: gate.selections,
    })
}

/// Inference for a single example that never evaluates inactive heads.
///
/// `x: [1, N, D]`, `h: [1, D]`. Active heads are projected through their own
/// column blocks of `W_Q, W_K, W_V`; inactive blocks of the concatenation are
/// zeros before the output projection.
#[allow(clippy::too_many_arguments)]
pub fn budgeted_attention_skip<R: Rng>(
    x: &Tensor,
    h: &Tensor,
    params: &AttentionParams,
    nets: &BudgetNets,
    pad_mask: &Tensor,
    step: u64,
    schedule: &ScheduleConfig,
    control: GateControl,
    rng: &mut R,
) -> Result<(Tensor, HeadSelection)> {
    if x.rank() != 3 || x.shape()[0] != 1 {
        return Err(Error::Contract(format!(
            "skip path takes a single example, got shape {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[1], x.shape()[2]);
    let heads = params.heads();
    let dh = params.head_dim();
    if d != params.d_model() || pad_mask.shape() != [1, n] {
        return Err(Error::shape("budgeted_attention_skip", x.shape(), pad_mask.shape()));
    }
    let tape = Tape::new();
    let nets = BudgetNetVars {
        f_w1: tape.constant(nets.f_w1.clone()),
        f_b1: tape.constant(nets.f_b1.clone()),
        f_w2: tape.constant(nets.f_w2.clone()),
        f_b2: tape.constant(nets.f_b2.clone()),
        g_w: tape.constant(nets.g_w.clone()),
        g_b: tape.constant(nets.g_b.clone()),
    };
    let mut ctx = GateContext {
        step,
        schedule,
        mode: Mode::Inference,
        control,
        rng,
    };
    let gate = gate(&tape.constant(h.clone()), &nets, heads, &mut ctx)?;
    let selection = gate.selections.into_iter().next().expect("one example");

    let xv = tape.constant(x.reshape(&[n, d])?);
    let key_mask = pad_mask.clone();
    let mut blocks = Vec::with_capacity(heads);
    for i in 0..heads {
        let cols = (i * dh, (i + 1) * dh);
        if !selection.mask[i] {
            blocks.push(tape.constant(Tensor::zeros(&[n, dh])));
            continue;
        }
        let proj = |w: &Tensor| -> Result<Var<'_>> {
            xv.matmul(&tape.constant(w.slice_cols(cols.0, cols.1)?))
        };
        let (q, k, v) = (proj(&params.w_q)?, proj(&params.w_k)?, proj(&params.w_v)?);
        let probs = q
            .reshape(&[1, n, dh])?
            .bmm_nt(&k.reshape(&[1, n, dh])?)?
            .scale(1.0 / (dh as f64).sqrt())
            .masked_softmax(&key_mask, 1.0)?;
        let head = probs.bmm(&v.reshape(&[1, n, dh])?)?.reshape(&[n, dh])?;
        blocks.push(head.scale(selection.w[i]));
    }
    let concat = Var::concat(&blocks)?;
    let out = concat.matmul(&tape.constant(params.w_o.clone()))?;
    let out = out.value().reshape(&[1, n, d])?;
    Ok((out, selection))
}
