//! Analytic FLOPs and activation-memory accounting.
//!
//! Convention: one multiply-add is 2 FLOPs and an `(m×n)·(n×p)` product
//! costs `2mnp`; bias adds are free. Softmax, layer-norm and activation
//! outputs are counted one FLOP per output element in a separate `other`
//! bucket. Every example is charged at its own unpadded length.

use serde::{Deserialize, Serialize};

use crate::attention::{HeadSelection, Mode};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, ModelConfig};

fn check_heads(d: usize, h: usize, k: usize) -> Result<usize> {
    if h == 0 || !d.is_multiple_of(h) {
        return Err(Error::Param(format!("d_model {d} is not divisible by {h} heads")));
    }
    if !(1..=h).contains(&k) {
        return Err(Error::Param(format!("active heads {k} outside [1, {h}]")));
    }
    Ok(d / h)
}

/// `(projection, attention)` FLOPs of one attention layer over `b` examples
/// of length `n` with `k` active heads.
pub fn attention_flops(b: usize, n: usize, d: usize, h: usize, k: usize) -> Result<(u64, u64)> {
    let dh = check_heads(d, h, k)? as u64;
    let (b, n, d, k) = (b as u64, n as u64, d as u64, k as u64);
    Ok((b * 8 * n * d * d, b * k * 4 * n * n * dh))
}

/// FLOPs of `f_θ` (D→D→1) and `g_φ` (D→H) for `b` examples.
pub fn budget_net_flops(b: usize, d: usize, h: usize) -> u64 {
    let (b, d, h) = (b as u64, d as u64, h as u64);
    b * (2 * (d * d + d) + 2 * d * h)
}

/// Mean over layers of `k / H`.
pub fn inference_ratio(k_per_layer: &[usize], h: usize) -> Result<f64> {
    if k_per_layer.is_empty() {
        return Err(Error::Param("no layers given".into()));
    }
    if let Some(&k) = k_per_layer.iter().find(|&&k| k == 0 || k > h) {
        return Err(Error::Param(format!("active heads {k} outside [1, {h}]")));
    }
    Ok(k_per_layer.iter().map(|&k| k as f64 / h as f64).sum::<f64>() / k_per_layer.len() as f64)
}

/// Scalars held by attention score/probability maps.
pub fn attention_memory(b: usize, n: usize, k: usize) -> u64 {
    (b * k) as u64 * (n * n) as u64
}

pub fn carbon_proxy(flops_total: u64, grams_per_flop: f64) -> f64 {
    flops_total as f64 * grams_per_flop
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_projection: u64,
    pub flops_attention: u64,
    pub flops_budget_nets: u64,
    pub flops_ffn: u64,
    pub flops_classifier: u64,
    pub flops_other: u64,
    pub flops_total: u64,
    /// Attention term had every head been run.
    pub flops_attention_dense: u64,
    pub memory_attention: u64,
    pub memory_attention_dense: u64,
    /// `flops_attention / flops_attention_dense`.
    pub ratio_attention: f64,
    pub ratio_memory: f64,
    pub grams_per_flop: f64,
    pub carbon_proxy: f64,
}

impl CostReport {
    fn finish(&mut self) {
        self.flops_total = self.flops_projection
            + self.flops_attention
            + self.flops_budget_nets
            + self.flops_ffn
            + self.flops_classifier
            + self.flops_other;
        self.ratio_attention = ratio(self.flops_attention, self.flops_attention_dense);
        self.ratio_memory = ratio(self.memory_attention, self.memory_attention_dense);
        self.carbon_proxy = carbon_proxy(self.flops_total, self.grams_per_flop);
    }

    /// Adds another report's counts (e.g. the next evaluation batch).
    pub fn merge(&mut self, other: &CostReport) {
        self.flops_projection += other.flops_projection;
        self.flops_attention += other.flops_attention;
        self.flops_budget_nets += other.flops_budget_nets;
        self.flops_ffn += other.flops_ffn;
        self.flops_classifier += other.flops_classifier;
        self.flops_other += other.flops_other;
        self.flops_attention_dense += other.flops_attention_dense;
        self.memory_attention += other.memory_attention;
        self.memory_attention_dense += other.memory_attention_dense;
        self.finish();
    }

    pub fn empty(grams_per_flop: f64) -> Self {
        let mut r = Self {
            grams_per_flop,
            ..Self::default()
        };
        r.finish();
        r
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Cost of one forward pass over examples of lengths `seq_lens`.
///
/// Training mode and standard attention charge all heads. Budgeted
/// inference charges each example's realized `k` per layer, taken from
/// `selections[layer][example]`.
pub fn model_cost(
    cfg: &ModelConfig,
    selections: Option<&[Vec<HeadSelection>]>,
    seq_lens: &[usize],
    mode: Mode,
    grams_per_flop: f64,
) -> Result<CostReport> {
    let (d, h, l) = (cfg.d_model, cfg.heads, cfg.layers);
    let f = (cfg.ffn_multiplier * d) as u64;
    let budgeted = cfg.attention_kind == AttentionKind::Budgeted;
    let realized = budgeted && mode == Mode::Inference;
    if realized {
        let sel = selections.ok_or_else(|| {
            Error::Contract("budgeted inference cost needs head selections".into())
        })?;
        if sel.len() != l || sel.iter().any(|layer| layer.len() != seq_lens.len()) {
            return Err(Error::Contract(format!(
                "expected head selections for {l} layers × {} examples",
                seq_lens.len()
            )));
        }
    }
    let mut r = CostReport {
        grams_per_flop,
        ..CostReport::default()
    };
    let (d64, h64) = (d as u64, h as u64);
    for (i, &n) in seq_lens.iter().enumerate() {
        let n64 = n as u64;
        for layer in 0..l {
            let k = match (realized, selections) {
                (true, Some(sel)) => sel[layer][i].k,
                _ => h,
            };
            let (proj, attn) = attention_flops(1, n, d, h, k)?;
            let (_, dense) = attention_flops(1, n, d, h, h)?;
            r.flops_projection += proj;
            r.flops_attention += attn;
            r.flops_attention_dense += dense;
            r.memory_attention += attention_memory(1, n, k);
            r.memory_attention_dense += attention_memory(1, n, h);
            r.flops_ffn += 4 * n64 * d64 * f;
            // softmax probabilities, two layer norms, GELU
            r.flops_other += k as u64 * n64 * n64 + 2 * n64 * d64 + n64 * f;
            if budgeted {
                r.flops_budget_nets += budget_net_flops(1, d, h);
                // ReLU, sigmoid, head softmax
                r.flops_other += d64 + 1 + h64;
            }
        }
        // final layer norm
        r.flops_other += n64 * d64;
        r.flops_classifier += 2 * d64 * cfg.classes as u64;
    }
    r.finish();
    Ok(r)
}
