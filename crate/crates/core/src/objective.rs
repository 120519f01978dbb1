//! Composite training loss: task cross-entropy, quadratic hinge on the
//! budget with an adaptive coefficient, and a scheduled entropy term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::ScheduleConfig;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLossConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub alpha_base: f64,
    pub alpha_max: f64,
}

impl Default for BudgetLossConfig {
    fn default() -> Self {
        Self {
            s_min: 0.1,
            s_max: 0.9,
            alpha_base: 0.001,
            alpha_max: 0.05,
        }
    }
}

impl BudgetLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.s_min && self.s_min < self.s_max && self.s_max < 1.0) {
            return Err(Error::config(
                "s_min",
                format!(
                    "need 0 < s_min < s_max < 1, got [{}, {}]",
                    self.s_min, self.s_max
                ),
            ));
        }
        if !(self.alpha_base >= 0.0 && self.alpha_max >= self.alpha_base) {
            return Err(Error::config(
                "alpha_max",
                format!(
                    "need alpha_max >= alpha_base >= 0, got {} and {}",
                    self.alpha_max, self.alpha_base
                ),
            ));
        }
        Ok(())
    }
}

/// Sign convention of the entropy term.
///
/// `AsWritten` uses `β(t)·Σ p log p` literally; minimizing it with `β < 0`
/// sharpens `p`. `ProseIntent` negates the term so that early training
/// (`β < 0`) rewards spread-out head distributions and late training
/// (`β > 0`) rewards peaked ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    AsWritten,
    #[default]
    ProseIntent,
}

impl SignMode {
    fn factor(self) -> f64 {
        match self {
            SignMode::AsWritten => 1.0,
            SignMode::ProseIntent => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub budget: f64,
    pub entropy: f64,
    pub total: f64,
}

pub fn cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels)
}

/// `v(s) = max(0, s_min − s) + max(0, s − s_max)`
pub fn budget_violation(s: f64, cfg: &BudgetLossConfig) -> f64 {
    (cfg.s_min - s).max(0.0) + (s - cfg.s_max).max(0.0)
}

/// `α(s) = min(α_max, α_base + v(s))`
pub fn budget_alpha(s: f64, cfg: &BudgetLossConfig) -> f64 {
    cfg.alpha_max.min(cfg.alpha_base + budget_violation(s, cfg))
}

/// `α(s)·v(s)²`
pub fn budget_loss(s: f64, cfg: &BudgetLossConfig) -> f64 {
    let v = budget_violation(s, cfg);
    budget_alpha(s, cfg) * v * v
}

/// Elementwise budget loss over `s: [B]`. `α` is held constant in the
/// derivative; the hinge kinks take subgradient 0.
pub fn budget_loss_var<'t>(s: &Var<'t>, cfg: &BudgetLossConfig) -> Var<'t> {
    let cfg = cfg.clone();
    s.map_with_grad(move |sv| {
        let v = budget_violation(sv, &cfg);
        let alpha = budget_alpha(sv, &cfg);
        let dv = if sv < cfg.s_min {
            -1.0
        } else if sv > cfg.s_max {
            1.0
        } else {
            0.0
        };
        (alpha * v * v, 2.0 * alpha * v * dv)
    })
}

/// `±β(t)·Σ p log p` for one distribution over heads.
pub fn entropy_loss(p: &[f64], step: u64, schedule: &ScheduleConfig, sign: SignMode) -> f64 {
    let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    sign.factor() * schedule.entropy_coefficient(step) * plogp
}

/// Entropy term per example for `p: [B, H]`; returns `[B]`.
pub fn entropy_loss_var<'t>(
    p: &Var<'t>,
    step: u64,
    schedule: &ScheduleConfig,
    sign: SignMode,
) -> Result<Var<'t>> {
    let coef = sign.factor() * schedule.entropy_coefficient(step);
    Ok(p.plogp_sum()?.scale(coef))
}

/// `L = L_task + L_budget + L_entropy`, where the regularizers are averaged
/// over layers and batch examples. Each entry of `budget`/`entropy` is one
/// layer's per-example vector.
pub fn total_loss<'t>(
    task: &Var<'t>,
    budget: &[Var<'t>],
    entropy: &[Var<'t>],
) -> Result<(Var<'t>, LossBreakdown)> {
    let layer_mean = |terms: &[Var<'t>]| -> Result<Var<'t>> {
        match terms {
            [] => Ok(task.tape().constant(crate::Tensor::scalar(0.0))),
            [first, rest @ ..] => {
                let mut acc = first.mean();
                for t in rest {
                    acc = acc.add(&t.mean())?;
                }
                Ok(acc.scale(1.0 / terms.len() as f64))
            }
        }
    };
    let budget = layer_mean(budget)?;
    let entropy = layer_mean(entropy)?;
    let task_v = task.reshape(&[])?;
    let total = task_v.add(&budget)?.add(&entropy)?;
    let breakdown = LossBreakdown {
        task: task_v.item()?,
        budget: budget.item()?,
        entropy: entropy.item()?,
        total: total.item()?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};
    use proptest::prelude::*;

    fn sched() -> ScheduleConfig {
        ScheduleConfig::default().with_total_steps(100)
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        let l = cross_entropy(&uniform, &[0, 1, 3]).unwrap().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sure = tape.constant(Tensor::new(&[1, 3], vec![30.0, 0.0, 0.0]).unwrap());
        assert!(cross_entropy(&sure, &[0]).unwrap().item().unwrap() < 1e-9);
        let two = tape.constant(Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap());
        let l = cross_entropy(&two, &[0]).unwrap().item().unwrap();
        assert!((l - 0.12693).abs() < 1e-5);
        assert!(matches!(cross_entropy(&two, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn violation_examples() {
        let c = BudgetLossConfig::default();
        assert_eq!(budget_violation(0.5, &c), 0.0);
        assert!((budget_violation(0.05, &c) - 0.05).abs() < 1e-15);
        assert!((budget_violation(0.95, &c) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn budget_loss_examples() {
        let c = BudgetLossConfig::default();
        for i in 0..=20 {
            let f = f64::from(i) / 20.0;
            assert_eq!(budget_loss(0.1 * (1.0 - f) + 0.9 * f, &c), 0.0);
        }
        assert!((budget_loss(0.0, &c) - 5.0e-4).abs() < 1e-12);
        assert!((budget_loss(0.095, &c) - 1.5e-7).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let s = sched();
        let one_hot = [0.0, 1.0, 0.0, 0.0];
        for t in [0, 30, 100] {
            assert_eq!(entropy_loss(&one_hot, t, &s, SignMode::AsWritten), 0.0);
        }
        let uniform = [0.125; 8];
        assert_eq!(entropy_loss(&uniform, 50, &s, SignMode::AsWritten), 0.0);
        let v = entropy_loss(&uniform, 0, &s, SignMode::AsWritten);
        assert!((v - 0.10397).abs() < 1e-5);
        assert_eq!(entropy_loss(&uniform, 0, &s, SignMode::ProseIntent), -v);
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let task = tape.constant(Tensor::scalar(1.0));
        let (_, b) = total_loss(&task, &[], &[]).unwrap();
        assert_eq!(b.total, 1.0);

        let s = tape.constant(Tensor::vector(&[0.3, 0.7]));
        let p = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let cfg = BudgetLossConfig::default();
        let budget = budget_loss_var(&s, &cfg);
        let ent = entropy_loss_var(&p, 0, &sched(), SignMode::AsWritten).unwrap();
        let (_, b) = total_loss(&task, &[budget], &[ent]).unwrap();
        assert_eq!(b.total, 1.0);

        let task = tape.constant(Tensor::scalar(1.0));
        let s0 = tape.constant(Tensor::vector(&[0.0]));
        let pu = tape.constant(Tensor::full(&[1, 8], 0.125));
        let budget = budget_loss_var(&s0, &cfg);
        let ent = entropy_loss_var(&pu, 0, &sched(), SignMode::AsWritten).unwrap();
        let (total, b) = total_loss(&task, &[budget], &[ent]).unwrap();
        assert!((b.total - 1.10447).abs() < 1e-5);
        assert_eq!(b.total, b.task + b.budget + b.entropy);
        assert_eq!(total.item().unwrap(), b.total);
    }

    /// Descends the entropy term on the logits of `p` for a few steps and
    /// returns Σ p log p before and after.
    fn descend(sign: SignMode, step: u64) -> (f64, f64) {
        let s = sched();
        let mut logits = Tensor::vector(&[0.4, -0.2, 0.1, 0.0]);
        let plogp = |l: &Tensor| {
            let tape = Tape::new();
            let p = tape.constant(l.reshape(&[1, 4]).unwrap()).softmax(1.0).unwrap();
            p.plogp_sum().unwrap().item().unwrap()
        };
        let before = plogp(&logits);
        for _ in 0..50 {
            let tape = Tape::new();
            let l = tape.variable(logits.reshape(&[1, 4]).unwrap());
            let p = l.softmax(1.0).unwrap();
            let loss = entropy_loss_var(&p, step, &s, sign).unwrap().sum();
            tape.backward(loss).unwrap();
            let g = l.grad().unwrap();
            for (x, gv) in logits.data_mut().iter_mut().zip(g.data()) {
                *x -= 1.0 * gv;
            }
        }
        (before, plogp(&logits))
    }

    #[test]
    fn entropy_gradient_directions() {
        // β < 0 at t = 0
        let (b, a) = descend(SignMode::AsWritten, 0);
        assert!(a > b, "as-written, β<0 should sharpen: {b} -> {a}");
        let (b, a) = descend(SignMode::ProseIntent, 0);
        assert!(a < b, "prose-intent, β<0 should flatten: {b} -> {a}");
        // β > 0 at t = T
        let (b, a) = descend(SignMode::AsWritten, 100);
        assert!(a < b, "as-written, β>0 should flatten: {b} -> {a}");
        let (b, a) = descend(SignMode::ProseIntent, 100);
        assert!(a > b, "prose-intent, β>0 should sharpen: {b} -> {a}");
    }

    proptest! {
        #[test]
        fn budget_loss_zero_iff_inside(s in -0.5f64..1.5) {
            let c = BudgetLossConfig::default();
            let inside = (c.s_min..=c.s_max).contains(&s);
            prop_assert_eq!(budget_loss(s, &c) == 0.0, inside);
        }

        #[test]
        fn budget_loss_monotone_in_violation(a in -0.5f64..1.5, b in -0.5f64..1.5) {
            let c = BudgetLossConfig::default();
            if budget_violation(a, &c) <= budget_violation(b, &c) {
                prop_assert!(budget_loss(a, &c) <= budget_loss(b, &c));
            }
        }

        #[test]
        fn entropy_bounded(raw in proptest::collection::vec(0.0f64..1.0, 1..12), t in 0u64..=100) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / total).collect();
            let s = sched();
            let bound = s.beta_max * (p.len() as f64).ln() + 1e-12;
            for sign in [SignMode::AsWritten, SignMode::ProseIntent] {
                prop_assert!(entropy_loss(&p, t, &s, sign).abs() <= bound);
            }
        }
    }
}
