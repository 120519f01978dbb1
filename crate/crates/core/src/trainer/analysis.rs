use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{check_data, EvalOptions};
use crate::attention::relevance_order;
use crate::data::{Batch, Batcher, ClassifiedExample, Tier};
use crate::error::Result;
use crate::model::Model;
use crate::seed;

#[derive(Clone, Debug)]
pub struct AnalysisOptions {
    pub eval: EvalOptions,
    /// Dataset positions whose attention maps are dumped.
    pub dump_examples: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub layer: usize,
    pub class: usize,
    pub count: usize,
    pub s_mean: Option<f64>,
    pub s_std: Option<f64>,
    pub plogp_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub layer: usize,
    pub tier: Tier,
    pub count: usize,
    pub s_mean: f64,
    pub s_std: f64,
    pub s_min: f64,
    pub s_median: f64,
    pub s_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDump {
    pub head: usize,
    pub p: Option<f64>,
    pub w: Option<f64>,
    /// `N × N` probabilities over the unpadded tokens.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    pub layer: usize,
    pub s: Option<f64>,
    pub k: usize,
    /// Active heads in descending `p`, ties by index.
    pub heads: Vec<HeadDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub example_index: usize,
    pub label: usize,
    pub prediction: usize,
    pub token_ids: Vec<usize>,
    pub layers: Vec<LayerDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    /// `layers × classes` rows, layer-major.
    pub classes: Vec<ClassRow>,
    pub tiers: Vec<TierRow>,
    /// Per layer, over all examples.
    pub s_mean_per_layer: Vec<f64>,
    pub attention: Vec<AttentionDump>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-(layer, class) and per-(layer, tier) budget statistics plus optional
/// attention-map dumps, all in inference mode.
pub fn analyze(model: &Model, data: &[ClassifiedExample], opts: &AnalysisOptions) -> Result<Analysis> {
    if data.is_empty() {
        return Err(crate::Error::Contract("cannot analyze an empty dataset".into()));
    }
    check_data(model, data, "analysis")?;
    let cfg = model.config();
    let (layers, heads) = (cfg.layers, cfg.heads);
    // per example: per layer (s, plogp)
    let mut per_example: Vec<Vec<(f64, f64)>> = Vec::with_capacity(data.len());
    let batcher = Batcher::new(data, opts.eval.batch_size, 0, false);
    for (i, batch) in batcher.epoch(0).enumerate() {
        let mut rng = seed::rng(opts.eval.seed, &[seed::STREAM_EVAL, i as u64]);
        let ev = &opts.eval;
        let out = model.infer(&batch, ev.step, &ev.schedule, ev.control, false, &mut rng)?;
        for r in 0..batch.size() {
            per_example.push(out.selections.iter().map(|l| (l[r].s, l[r].plogp())).collect());
        }
    }
    let budgeted = per_example.first().is_some_and(|v| !v.is_empty());

    let mut classes = Vec::with_capacity(layers * cfg.classes);
    let mut s_mean_per_layer = Vec::new();
    let mut tiers = Vec::new();
    for layer in 0..layers {
        if budgeted {
            let all: Vec<f64> = per_example.iter().map(|v| v[layer].0).collect();
            s_mean_per_layer.push(mean_std(&all).0);
        }
        for class in 0..cfg.classes {
            let members: Vec<&Vec<(f64, f64)>> = per_example
                .iter()
                .zip(data)
                .filter(|(_, ex)| ex.label == class)
                .map(|(v, _)| v)
                .collect();
            let (s_mean, s_std, plogp_mean) = if budgeted && !members.is_empty() {
                let s: Vec<f64> = members.iter().map(|v| v[layer].0).collect();
                let h: Vec<f64> = members.iter().map(|v| v[layer].1).collect();
                let (m, sd) = mean_std(&s);
                (Some(m), Some(sd), Some(mean_std(&h).0))
            } else {
                (None, None, None)
            };
            classes.push(ClassRow {
                layer,
                class,
                count: members.len(),
                s_mean,
                s_std,
                plogp_mean,
            });
        }
        if budgeted {
            let mut by_tier: BTreeMap<Tier, Vec<f64>> = BTreeMap::new();
            for (v, ex) in per_example.iter().zip(data) {
                if let Some(t) = ex.tier {
                    by_tier.entry(t).or_default().push(v[layer].0);
                }
            }
            for (tier, mut s) in by_tier {
                s.sort_by(f64::total_cmp);
                let (mean, std) = mean_std(&s);
                let mid = s.len() / 2;
                let median = if s.len() % 2 == 1 { s[mid] } else { 0.5 * (s[mid - 1] + s[mid]) };
                tiers.push(TierRow {
                    layer,
                    tier,
                    count: s.len(),
                    s_mean: mean,
                    s_std: std,
                    s_min: s[0],
                    s_median: median,
                    s_max: s[s.len() - 1],
                });
            }
        }
    }

    let mut attention = Vec::with_capacity(opts.dump_examples.len());
    for &idx in &opts.dump_examples {
        let ex = data.get(idx).ok_or_else(|| {
            crate::Error::Param(format!("example index {idx} outside dataset of {}", data.len()))
        })?;
        let batch = Batch::collate(data, &[idx]);
        let mut rng = seed::rng(opts.eval.seed, &[seed::STREAM_EVAL, u64::MAX, idx as u64]);
        let ev = &opts.eval;
        let out = model.infer(&batch, ev.step, &ev.schedule, ev.control, true, &mut rng)?;
        let n = batch.seq_len();
        let len = ex.len().min(n);
        let mut layer_dumps = Vec::with_capacity(layers);
        for (layer, probs) in out.attention.iter().enumerate() {
            let sel = out.selections.get(layer).map(|l| &l[0]);
            let order: Vec<usize> = match sel {
                Some(sel) => relevance_order(&sel.p).into_iter().filter(|&i| sel.mask[i]).collect(),
                None => (0..heads).collect(),
            };
            let heads_out = order
                .into_iter()
                .map(|head| {
                    let block = &probs.data()[head * n * n..(head + 1) * n * n];
                    HeadDump {
                        head,
                        p: sel.map(|s| s.p[head]),
                        w: sel.map(|s| s.w[head]),
                        rows: (0..len).map(|r| block[r * n..r * n + len].to_vec()).collect(),
                    }
                })
                .collect();
            layer_dumps.push(LayerDump {
                layer,
                s: sel.map(|s| s.s),
                k: sel.map_or(heads, |s| s.k),
                heads: heads_out,
            });
        }
        attention.push(AttentionDump {
            example_index: idx,
            label: ex.label,
            prediction: super::argmax(out.logits.row(0)),
            token_ids: ex.token_ids.clone(),
            layers: layer_dumps,
        });
    }
    Ok(Analysis {
        classes,
        tiers,
        s_mean_per_layer,
        attention,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Analysis {
    pub fn class_csv(&self) -> String {
        let mut out = String::from("layer,class,count,s_mean,s_std,plogp_mean\n");
        for r in &self.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.layer,
                r.class,
                r.count,
                opt(r.s_mean),
                opt(r.s_std),
                opt(r.plogp_mean)
            );
        }
        out
    }

    pub fn tier_csv(&self) -> String {
        let mut out = String::from("layer,tier,count,s_mean,s_std,s_min,s_median,s_max\n");
        for r in &self.tiers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.layer,
                r.tier.name(),
                r.count,
                r.s_mean,
                r.s_std,
                r.s_min,
                r.s_median,
                r.s_max
            );
        }
        out
    }
}
