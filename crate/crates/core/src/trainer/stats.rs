use serde::{Deserialize, Serialize};

use crate::attention::HeadSelection;

#[derive(Clone, Debug, Default)]
struct LayerAcc {
    n: u64,
    s_sum: f64,
    s_sq: f64,
    plogp_sum: f64,
    k_sum: u64,
}

/// Running per-layer statistics of head selections.
#[derive(Clone, Debug, Default)]
pub struct SelectionStats {
    layers: Vec<LayerAcc>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub s_mean: Option<f64>,
    pub s_std: Option<f64>,
    pub mean_k: Option<f64>,
    pub s_mean_per_layer: Vec<f64>,
    pub s_std_per_layer: Vec<f64>,
    pub plogp_per_layer: Vec<f64>,
    pub mean_k_per_layer: Vec<f64>,
}

fn std_from(sum: f64, sq: f64, n: f64) -> f64 {
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0).sqrt()
}

impl SelectionStats {
    /// `selections[layer][example]`.
    pub fn add(&mut self, selections: &[Vec<HeadSelection>]) {
        if self.layers.len() < selections.len() {
            self.layers.resize(selections.len(), LayerAcc::default());
        }
        for (acc, layer) in self.layers.iter_mut().zip(selections) {
            for sel in layer {
                acc.n += 1;
                acc.s_sum += sel.s;
                acc.s_sq += sel.s * sel.s;
                acc.plogp_sum += sel.plogp();
                acc.k_sum += sel.k as u64;
            }
        }
    }

    pub fn summary(&self) -> SelectionSummary {
        let layers: Vec<&LayerAcc> = self.layers.iter().filter(|l| l.n > 0).collect();
        if layers.is_empty() {
            return SelectionSummary::default();
        }
        let n: f64 = layers.iter().map(|l| l.n as f64).sum();
        let s_sum: f64 = layers.iter().map(|l| l.s_sum).sum();
        let s_sq: f64 = layers.iter().map(|l| l.s_sq).sum();
        let k_sum: u64 = layers.iter().map(|l| l.k_sum).sum();
        SelectionSummary {
            s_mean: Some(s_sum / n),
            s_std: Some(std_from(s_sum, s_sq, n)),
            mean_k: Some(k_sum as f64 / n),
            s_mean_per_layer: layers.iter().map(|l| l.s_sum / l.n as f64).collect(),
            s_std_per_layer: layers.iter().map(|l| std_from(l.s_sum, l.s_sq, l.n as f64)).collect(),
            plogp_per_layer: layers.iter().map(|l| l.plogp_sum / l.n as f64).collect(),
            mean_k_per_layer: layers.iter().map(|l| l.k_sum as f64 / l.n as f64).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(s: f64, k: usize) -> HeadSelection {
        HeadSelection {
            s,
            z: vec![0.0, 0.0],
            p: vec![0.5, 0.5],
            w: vec![s, s],
            mask: vec![true, k == 2],
            k,
        }
    }

    #[test]
    fn summary_values() {
        let mut st = SelectionStats::default();
        st.add(&[vec![sel(0.2, 1), sel(0.4, 1)], vec![sel(0.6, 2), sel(0.8, 2)]]);
        let s = st.summary();
        assert!((s.s_mean.unwrap() - 0.5).abs() < 1e-12);
        assert!((s.s_mean_per_layer[0] - 0.3).abs() < 1e-12);
        assert!((s.s_std_per_layer[1] - 0.1).abs() < 1e-12);
        assert_eq!(s.mean_k_per_layer, [1.0, 2.0]);
        assert_eq!(s.mean_k, Some(1.5));
        assert!((s.plogp_per_layer[0] - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(SelectionStats::default().summary().s_mean, None);
    }
}
