//! Loop-level reference implementations that also count FLOPs as they go:
//! every multiply-add adds 2 to the bucket of the layer doing it, every
//! softmax / layer-norm / activation output adds 1 to `other`.

use budgetformer::model::{AttentionKind, Model};
use budgetformer::schedules::ScheduleConfig;
use budgetformer::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counter {
    pub projection: u64,
    pub attention: u64,
    pub budget: u64,
    pub ffn: u64,
    pub classifier: u64,
    pub other: u64,
}

impl Counter {
    pub fn total(&self) -> u64 {
        self.projection + self.attention + self.budget + self.ffn + self.classifier + self.other
    }
}

impl std::ops::AddAssign for Counter {
    fn add_assign(&mut self, o: Counter) {
        self.projection += o.projection;
        self.attention += o.attention;
        self.budget += o.budget;
        self.ffn += o.ffn;
        self.classifier += o.classifier;
        self.other += o.other;
    }
}

/// `a [m×k] · b [k×n]`, charging `bucket` two FLOPs per multiply-add.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, bucket: &mut u64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
                *bucket += 2;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub fn softmax(row: &[f64], temperature: f64, other: &mut u64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    *other += row.len() as u64;
    e.iter().map(|v| v / sum).collect()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], other: &mut u64) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.push((row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j]);
        }
        *other += d as u64;
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Multi-head attention for one unpadded example `x [n×d]`. Head `i`
/// runs only if `active[i]`, and its output is scaled by `weights[i]`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    x: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    (wq, wk, wv, wo): (&[f64], &[f64], &[f64], &[f64]),
    active: &[bool],
    weights: &[f64],
    c: &mut Counter,
) -> Vec<f64> {
    let dh = d / heads;
    let q = matmul(x, wq, n, d, d, &mut c.projection);
    let k = matmul(x, wk, n, d, d, &mut c.projection);
    let v = matmul(x, wv, n, d, d, &mut c.projection);
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        if !active[h] {
            continue;
        }
        for r in 0..n {
            let mut scores = vec![0.0; n];
            for (col, score) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..dh {
                    acc += q[r * d + h * dh + j] * k[col * d + h * dh + j];
                    c.attention += 2;
                }
                *score = acc / (dh as f64).sqrt();
            }
            let probs = softmax(&scores, 1.0, &mut c.other);
            for j in 0..dh {
                let mut acc = 0.0;
                for (col, p) in probs.iter().enumerate() {
                    acc += p * v[col * d + h * dh + j];
                    c.attention += 2;
                }
                concat[r * d + h * dh + j] = weights[h] * acc;
            }
        }
    }
    matmul(&concat, wo, n, d, d, &mut c.projection)
}

/// Result of the naive forward for one example.
pub struct NaiveForward {
    pub logits: Vec<f64>,
    /// Per budgeted layer: `(s, p, k)`.
    pub gates: Vec<(f64, Vec<f64>, usize)>,
    pub counter: Counter,
}

/// Inference-mode forward of one unpadded example, gating with the
/// schedule at `step`. `all_heads` runs every head, as training does.
pub fn model_forward(model: &Model, ids: &[usize], step: u64, schedule: &ScheduleConfig, all_heads: bool) -> NaiveForward {
    let cfg = model.config();
    let (d, heads, n) = (cfg.d_model, cfg.heads, ids.len());
    let f = cfg.ffn_multiplier * d;
    let p = |name: &str| -> &[f64] { model.param(name).unwrap_or_else(|| panic!("{name}")).data() };
    let mut c = Counter::default();
    let (tok, pos) = (p("embed.token"), p("embed.position"));
    let mut x: Vec<f64> = (0..n)
        .flat_map(|i| (0..d).map(move |j| tok[ids[i] * d + j] + pos[i * d + j]))
        .collect();
    let mut gates = Vec::new();
    for l in 0..cfg.layers {
        let lp = |name: &str| p(&format!("blocks.{l}.{name}"));
        let normed = layer_norm(&x, lp("ln1.gamma"), lp("ln1.beta"), &mut c.other);
        let (active, weights) = if cfg.attention_kind == AttentionKind::Budgeted {
            let h: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64).collect();
            let mut hidden = matmul(&h, lp("budget.f_w1"), 1, d, d, &mut c.budget);
            add_bias(&mut hidden, lp("budget.f_b1"));
            for v in hidden.iter_mut() {
                *v = v.max(0.0);
            }
            c.other += d as u64;
            let mut logit = matmul(&hidden, lp("budget.f_w2"), 1, d, 1, &mut c.budget);
            add_bias(&mut logit, lp("budget.f_b2"));
            let s = 1.0 / (1.0 + (-logit[0]).exp());
            c.other += 1;
            let mut z = matmul(&h, lp("budget.g_w"), 1, d, heads, &mut c.budget);
            add_bias(&mut z, lp("budget.g_b"));
            let probs = softmax(&z, schedule.temperature(step), &mut c.other);
            let k = if all_heads { heads } else { ((s * heads as f64).floor() as usize).clamp(1, heads) };
            let mut order: Vec<usize> = (0..heads).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let mut active = vec![false; heads];
            for &i in &order[..k] {
                active[i] = true;
            }
            let weights = probs.iter().map(|pi| s * heads as f64 * pi).collect();
            gates.push((s, probs, k));
            (active, weights)
        } else {
            (vec![true; heads], vec![1.0; heads])
        };
        let w = (lp("attn.w_q"), lp("attn.w_k"), lp("attn.w_v"), lp("attn.w_o"));
        let a = attention(&normed, n, d, heads, w, &active, &weights, &mut c);
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += ai;
        }
        let normed = layer_norm(&x, lp("ln2.gamma"), lp("ln2.beta"), &mut c.other);
        let mut hid = matmul(&normed, lp("ffn.w1"), n, d, f, &mut c.ffn);
        add_bias(&mut hid, lp("ffn.b1"));
        for v in hid.iter_mut() {
            *v = gelu(*v);
        }
        c.other += (n * f) as u64;
        let mut out = matmul(&hid, lp("ffn.w2"), n, f, d, &mut c.ffn);
        add_bias(&mut out, lp("ffn.b2"));
        for (xi, oi) in x.iter_mut().zip(&out) {
            *xi += oi;
        }
    }
    let normed = layer_norm(&x, p("final_ln.gamma"), p("final_ln.beta"), &mut c.other);
    let pooled: Vec<f64> = (0..d).map(|j| (0..n).map(|i| normed[i * d + j]).sum::<f64>() / n as f64).collect();
    let mut logits = matmul(&pooled, p("classifier.w"), 1, d, cfg.classes, &mut c.classifier);
    add_bias(&mut logits, p("classifier.b"));
    NaiveForward { logits, gates, counter: c }
}

pub fn rows(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}
