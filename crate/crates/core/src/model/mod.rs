//! Encoder classifier: token + positional embeddings, a stack of pre-norm
//! blocks with standard or budgeted attention, masked mean pooling and a
//! linear head.
//!
//! Parameters live in one flat list whose order is fixed by
//! [`ModelConfig::param_layout`]; checkpoints, binding and the optimizer all
//! walk that order.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    budgeted_attention, check_heads, standard_mha, AttentionParams, AttentionVars, BudgetNetVars,
    BudgetNets, GateContext, GateControl, HeadSelection, Mode,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::schedules::ScheduleConfig;
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Upper bound on parameter count accepted by validation.
const MAX_PARAMS: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Standard,
    Budgeted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    pub attention_kind: AttentionKind,
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_ffn_multiplier() -> usize {
    4
}

fn default_dropout() -> f64 {
    0.1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            max_seq_len: 32,
            d_model: 64,
            heads: 8,
            layers: 2,
            classes: 4,
            attention_kind: AttentionKind::Budgeted,
            ffn_multiplier: default_ffn_multiplier(),
            dropout: default_dropout(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_multiplier", self.ffn_multiplier),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must hold at least <pad> and <unk>"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", format!("must be >= 2, got {}", self.classes)));
        }
        check_heads(self.d_model, self.heads)
            .map_err(|e| Error::config("heads", e.to_string()))?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("must be in [0, 1), got {}", self.dropout)));
        }
        match self.checked_param_count() {
            Some(n) if n <= MAX_PARAMS => Ok(()),
            _ => Err(Error::config("d_model", "parameter count is unreasonably large")),
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, n, d, h, c) = (self.vocab_size, self.max_seq_len, self.d_model, self.heads, self.classes);
        let f = self.ffn_multiplier * d;
        let mut out = vec![
            ("embed.token".to_string(), vec![v, d]),
            ("embed.position".to_string(), vec![n, d]),
        ];
        for l in 0..self.layers {
            let mut push = |name: &str, shape: Vec<usize>| out.push((format!("blocks.{l}.{name}"), shape));
            push("ln1.gamma", vec![d]);
            push("ln1.beta", vec![d]);
            for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
                push(w, vec![d, d]);
            }
            if self.attention_kind == AttentionKind::Budgeted {
                push("budget.f_w1", vec![d, d]);
                push("budget.f_b1", vec![d]);
                push("budget.f_w2", vec![d, 1]);
                push("budget.f_b2", vec![1]);
                push("budget.g_w", vec![d, h]);
                push("budget.g_b", vec![h]);
            }
            push("ln2.gamma", vec![d]);
            push("ln2.beta", vec![d]);
            push("ffn.w1", vec![d, f]);
            push("ffn.b1", vec![f]);
            push("ffn.w2", vec![f, d]);
            push("ffn.b2", vec![d]);
        }
        out.push(("final_ln.gamma".to_string(), vec![d]));
        out.push(("final_ln.beta".to_string(), vec![d]));
        out.push(("classifier.w".to_string(), vec![d, c]));
        out.push(("classifier.b".to_string(), vec![c]));
        out
    }

    fn checked_param_count(&self) -> Option<u64> {
        self.param_layout().iter().try_fold(0u64, |acc, (_, shape)| {
            let n = shape.iter().try_fold(1u64, |a, &e| a.checked_mul(e as u64))?;
            acc.checked_add(n)
        })
    }

    pub fn param_count(&self) -> u64 {
        self.checked_param_count().expect("parameter count overflows u64")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Builds a model with weights drawn from a generator seeded by `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &[seed::STREAM_INIT]);
    let d = cfg.d_model;
    let emb_std = 1.0 / (d as f64).sqrt();
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in cfg.param_layout() {
        let t = if name.starts_with("embed.") {
            Tensor::randn(&shape, emb_std, &mut rng)
        } else if name.ends_with("gamma") {
            Tensor::ones(&shape)
        } else if shape.len() == 2 {
            crate::attention::xavier(shape[0], shape[1], &mut rng)
        } else {
            Tensor::zeros(&shape)
        };
        names.push(name);
        params.push(t);
    }
    Ok(Model { cfg: cfg.clone(), names, params })
}

/// Parameters bound to a tape, in layout order.
pub struct BoundModel<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundModel<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradient per parameter; `None` for frozen or unused parameters.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(Var::grad).collect()
    }
}

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub step: u64,
    pub schedule: &'a ScheduleConfig,
    pub control: GateControl,
    /// Keep every layer's attention probabilities `[B·H, N, N]`.
    pub capture_attention: bool,
}

pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// `[layer][example]`; empty for standard attention.
    pub selections: Vec<Vec<HeadSelection>>,
    /// Per budgeted layer, `s` as `[B]`.
    pub budgets: Vec<Var<'t>>,
    /// Per budgeted layer, `p` as `[B, H]`.
    pub relevance: Vec<Var<'t>>,
    /// Per layer when captured.
    pub attention: Vec<Var<'t>>,
    /// Examples whose input was cut to `max_seq_len`.
    pub truncated: usize,
}

/// Detached result of an inference forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Tensor,
    pub selections: Vec<Vec<HeadSelection>>,
    pub attention: Vec<Tensor>,
    pub truncated: usize,
}

struct Cursor<'a, 't> {
    vars: std::slice::Iter<'a, Var<'t>>,
}

impl<'t> Cursor<'_, 't> {
    fn next(&mut self) -> Var<'t> {
        *self.vars.next().expect("parameter layout exhausted")
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Assembles a model from tensors in layout order, checking names and
    /// shapes.
    pub fn from_params(cfg: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.param_layout();
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in layout.into_iter().zip(named) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} {:?} does not match expected {want_name:?} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { cfg, names, params })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|t| t.numel() as u64).sum()
    }

    fn layer_param(&self, layer: usize, name: &str) -> Result<Tensor> {
        self.param(&format!("blocks.{layer}.{name}"))
            .cloned()
            .ok_or_else(|| Error::Param(format!("layer {layer} has no parameter {name}")))
    }

    pub fn attention_params(&self, layer: usize) -> Result<AttentionParams> {
        AttentionParams::new(
            self.layer_param(layer, "attn.w_q")?,
            self.layer_param(layer, "attn.w_k")?,
            self.layer_param(layer, "attn.w_v")?,
            self.layer_param(layer, "attn.w_o")?,
            self.cfg.heads,
        )
    }

    /// The layer's `f_θ`/`g_φ`, or `None` for standard attention.
    pub fn budget_nets(&self, layer: usize) -> Option<BudgetNets> {
        let get = |n: &str| self.layer_param(layer, n).ok();
        Some(BudgetNets {
            f_w1: get("budget.f_w1")?,
            f_b1: get("budget.f_b1")?,
            f_w2: get("budget.f_w2")?,
            f_b2: get("budget.f_b2")?,
            g_w: get("budget.g_w")?,
            g_b: get("budget.g_b")?,
        })
    }

    /// Binds parameters to `tape`; names for which `frozen` returns true
    /// become constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape, frozen: impl Fn(&str) -> bool) -> BoundModel<'t> {
        let vars = self
            .named_params()
            .map(|(name, t)| {
                if frozen(name) {
                    tape.constant(t.clone())
                } else {
                    tape.variable(t.clone())
                }
            })
            .collect();
        BoundModel { vars }
    }

    pub fn forward<'t, R: Rng>(
        &self,
        bound: &BoundModel<'t>,
        batch: &Batch,
        opts: &ForwardOptions<'_>,
        rng: &mut R,
    ) -> Result<ForwardOutput<'t>> {
        let cfg = &self.cfg;
        let (b, n_in) = (batch.size(), batch.seq_len());
        let n = n_in.min(cfg.max_seq_len);
        let (ids, mask, truncated) = if n < n_in {
            let ids: Vec<usize> = (0..b).flat_map(|r| batch.ids[r * n_in..r * n_in + n].to_vec()).collect();
            let mask: Vec<f64> = (0..b).flat_map(|r| batch.mask.row(r)[..n].to_vec()).collect();
            let cut = batch.lengths.iter().filter(|&&len| len > n).count();
            log::debug!("truncated {cut} examples to {n} tokens");
            (ids, Tensor::new(&[b, n], mask)?, cut)
        } else {
            (batch.ids.clone(), batch.mask.clone(), 0)
        };
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} is outside the vocabulary of size {}",
                cfg.vocab_size
            )));
        }

        let mut cur = Cursor { vars: bound.vars.iter() };
        let tok = cur.next();
        let pos = cur.next();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let mut x = tok
            .gather_rows(&ids)?
            .add(&pos.gather_rows(&positions)?)?
            .reshape(&[b, n, cfg.d_model])?;

        let train = opts.mode == Mode::Train && cfg.dropout > 0.0;
        let mut out = ForwardOutput {
            logits: x,
            selections: Vec::new(),
            budgets: Vec::new(),
            relevance: Vec::new(),
            attention: Vec::new(),
            truncated,
        };
        for _ in 0..cfg.layers {
            let (g1, b1) = (cur.next(), cur.next());
            let attn = AttentionVars {
                w_q: cur.next(),
                w_k: cur.next(),
                w_v: cur.next(),
                w_o: cur.next(),
                heads: cfg.heads,
            };
            let normed = x.layer_norm(&g1, &b1, LN_EPS)?;
            let attended = match cfg.attention_kind {
                AttentionKind::Standard => standard_mha(&normed, &attn, &mask)?,
                AttentionKind::Budgeted => {
                    let nets = BudgetNetVars {
                        f_w1: cur.next(),
                        f_b1: cur.next(),
                        f_w2: cur.next(),
                        f_b2: cur.next(),
                        g_w: cur.next(),
                        g_b: cur.next(),
                    };
                    let h = x.masked_mean_pool(&mask)?;
                    let mut ctx = GateContext {
                        step: opts.step,
                        schedule: opts.schedule,
                        mode: opts.mode,
                        control: opts.control,
                        rng: &mut *rng,
                    };
                    let res = budgeted_attention(&normed, &h, &attn, &nets, &mask, &mut ctx)?;
                    out.selections.push(res.selections);
                    out.budgets.push(res.s);
                    out.relevance.push(res.p);
                    res.attended
                }
            };
            if opts.capture_attention {
                out.attention.push(attended.probs);
            }
            let mut a = attended.output;
            if train {
                a = a.dropout(cfg.dropout, rng)?;
            }
            x = x.add(&a)?;

            let (g2, b2) = (cur.next(), cur.next());
            let (w1, c1, w2, c2) = (cur.next(), cur.next(), cur.next(), cur.next());
            let mut f = x
                .layer_norm(&g2, &b2, LN_EPS)?
                .matmul(&w1)?
                .add_row(&c1)?
                .gelu()
                .matmul(&w2)?
                .add_row(&c2)?;
            if train {
                f = f.dropout(cfg.dropout, rng)?;
            }
            x = x.add(&f)?;
        }
        let (gf, bf) = (cur.next(), cur.next());
        let (wc, bc) = (cur.next(), cur.next());
        out.logits = x
            .layer_norm(&gf, &bf, LN_EPS)?
            .masked_mean_pool(&mask)?
            .matmul(&wc)?
            .add_row(&bc)?;
        debug_assert!(cur.vars.next().is_none());
        Ok(out)
    }

    /// Inference-mode forward on a private tape.
    pub fn infer<R: Rng>(
        &self,
        batch: &Batch,
        step: u64,
        schedule: &ScheduleConfig,
        control: GateControl,
        capture_attention: bool,
        rng: &mut R,
    ) -> Result<Inference> {
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| true);
        let opts = ForwardOptions {
            mode: Mode::Inference,
            step,
            schedule,
            control,
            capture_attention,
        };
        let out = self.forward(&bound, batch, &opts, rng)?;
        Ok(Inference {
            logits: out.logits.to_tensor(),
            selections: out.selections,
            attention: out.attention.iter().map(Var::to_tensor).collect(),
            truncated: out.truncated,
        })
    }
}
