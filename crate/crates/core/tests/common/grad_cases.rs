//! Finite-difference cases for every differentiable tensor operation and
//! for the full training loss of a small budgeted model.

use budgetformer::attention::GateControl;
use budgetformer::data::{Batch, ClassifiedExample};
use budgetformer::model::{build_model, AttentionKind, ForwardOptions, Model, ModelConfig};
use budgetformer::objective::{budget_loss_var, entropy_loss_var, total_loss, BudgetLossConfig, SignMode};
use budgetformer::schedules::ScheduleConfig;
use budgetformer::attention::Mode;
use budgetformer::{Tape, Tensor, Var};
use rand::Rng;

use super::{max_grad_error, rand_tensor, weighted_sum, FD_STEP};

/// `(case name, max relative error)`.
pub type Cases = Vec<(String, f64)>;

fn check<F>(out: &mut Cases, name: &str, inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> budgetformer::Result<Var<'t>>,
{
    out.push((name.to_string(), max_grad_error(inputs, f)));
}

/// Every per-operation case.
pub fn all_ops() -> Cases {
    let mut out = Vec::new();
    for group in [elementwise_binary, elementwise_unary, products, reductions_and_normalizations, shape_ops, chained_composition] {
        group(&mut out);
    }
    out
}

pub fn elementwise_binary(out: &mut Cases) {
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[3, 4], 2);
    check(out, "add", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].add(&v[1])?, 1));
    check(out, "sub", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].sub(&v[1])?, 2));
    check(out, "mul", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].mul(&v[1])?, 3));
    let bias = rand_tensor(&[4], 3);
    check(out, "add_row", &[a, bias], |_, v| weighted_sum(v[0].add_row(&v[1])?, 4));
}

pub fn elementwise_unary(out: &mut Cases) {
    let x = rand_tensor(&[2, 5], 5);
    check(out, "scale", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].scale(-1.7), 5));
    check(out, "add_scalar", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].add_scalar(0.3), 6));
    check(out, "exp", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].exp(), 7));
    check(out, "square", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].square(), 8));
    check(out, "relu", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].relu(), 9));
    check(out, "sigmoid", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].sigmoid(), 10));
    check(out, "tanh", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].tanh(), 11));
    check(out, "gelu", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].gelu(), 12));
    let positive = Tensor::new(x.shape(), x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    check(out, "ln", &[positive], |_, v| weighted_sum(v[0].ln(), 13));
}

pub fn products(out: &mut Cases) {
    let a = rand_tensor(&[3, 4], 20);
    let b = rand_tensor(&[4, 2], 21);
    check(out, "matmul", &[a, b], |_, v| weighted_sum(v[0].matmul(&v[1])?, 20));
    let a3 = rand_tensor(&[2, 3, 4], 22);
    let w = rand_tensor(&[4, 5], 23);
    check(out, "matmul_batched_lhs", &[a3.clone(), w], |_, v| {
        weighted_sum(v[0].matmul(&v[1])?, 21)
    });
    let b3 = rand_tensor(&[2, 4, 3], 24);
    check(out, "bmm", &[a3.clone(), b3], |_, v| weighted_sum(v[0].bmm(&v[1])?, 22));
    let c3 = rand_tensor(&[2, 5, 4], 25);
    check(out, "bmm_nt", &[a3, c3], |_, v| weighted_sum(v[0].bmm_nt(&v[1])?, 23));
}

pub fn reductions_and_normalizations(out: &mut Cases) {
    let x = rand_tensor(&[3, 5], 30);
    check(out, "sum", std::slice::from_ref(&x), |_, v| Ok(v[0].square().sum()));
    check(out, "mean", std::slice::from_ref(&x), |_, v| Ok(v[0].square().mean()));
    check(out, "softmax", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].softmax(1.0)?, 30));
    check(out, "softmax_tau", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].softmax(0.37)?, 31));
    let mask = Tensor::new(&[1, 5], vec![1., 0., 1., 1., 0.]).unwrap();
    check(out, "masked_softmax", std::slice::from_ref(&x), move |_, v| {
        weighted_sum(v[0].masked_softmax(&mask, 2.0)?, 32)
    });
    let gamma = rand_tensor(&[5], 31);
    let beta = rand_tensor(&[5], 32);
    check(out, "layer_norm", &[x.clone(), gamma, beta], |_, v| {
        weighted_sum(v[0].layer_norm(&v[1], &v[2], 1e-5)?, 33)
    });
    let p = Tensor::new(&[3, 5], x.data().iter().map(|v| v.abs() / 3.0 + 0.05).collect()).unwrap();
    check(out, "plogp_sum", &[p], |_, v| weighted_sum(v[0].plogp_sum()?, 34));
    let labels = [1usize, 4, 0];
    check(out, "cross_entropy", &[x], move |_, v| v[0].cross_entropy(&labels));
}

pub fn shape_ops(out: &mut Cases) {
    let x = rand_tensor(&[2, 3, 4], 40);
    check(out, "permute", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].permute(&[2, 0, 1])?, 40));
    check(out, "reshape", std::slice::from_ref(&x), |_, v| weighted_sum(v[0].reshape(&[6, 4])?, 41));
    let m = rand_tensor(&[3, 4], 41);
    check(out, "transpose", std::slice::from_ref(&m), |_, v| weighted_sum(v[0].transpose()?, 42));
    let n = rand_tensor(&[3, 2], 42);
    check(out, "concat", &[m.clone(), n], |_, v| weighted_sum(Var::concat(&[v[0], v[1]])?, 43));
    check(out, "gather_rows", &[m], |_, v| weighted_sum(v[0].gather_rows(&[2, 0, 2])?, 44));
    let mask = Tensor::new(&[2, 3], vec![1., 1., 0., 1., 0., 0.]).unwrap();
    check(out, "masked_mean_pool", std::slice::from_ref(&x), move |_, v| {
        weighted_sum(v[0].masked_mean_pool(&mask)?, 45)
    });
    let w = rand_tensor(&[6], 43);
    check(out, "scale_groups", &[x, w], |_, v| weighted_sum(v[0].scale_groups(&v[1])?, 46));
}

pub fn chained_composition(out: &mut Cases) {
    // linear -> gelu -> layer norm -> softmax -> weighted sum
    let x = rand_tensor(&[4, 3], 50);
    let w = rand_tensor(&[3, 6], 51);
    let g = rand_tensor(&[6], 52);
    let b = rand_tensor(&[6], 53);
    check(out, "composition", &[x, w, g, b], |_, v| {
        let h = v[0].matmul(&v[1])?.gelu();
        let n = h.layer_norm(&v[2], &v[3], 1e-5)?;
        weighted_sum(n.softmax(0.8)?, 50)
    });
}

/// Small budgeted model with `f_θ` pushed low in block 0 so the budget
/// penalty is active.
pub fn e2e_model() -> (Model, Batch) {
    let cfg = ModelConfig {
        vocab_size: 12,
        max_seq_len: 6,
        d_model: 32,
        heads: 4,
        layers: 2,
        classes: 3,
        attention_kind: AttentionKind::Budgeted,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 3).unwrap();
    model.param_mut("blocks.0.budget.f_b2").unwrap().data_mut()[0] = -3.0;
    let exs = vec![
        ClassifiedExample::new(vec![2, 5, 7, 3, 9], 0, None),
        ClassifiedExample::new(vec![4, 4, 11], 2, None),
        ClassifiedExample::new(vec![8, 2, 6, 10, 3, 5], 1, None),
    ];
    (model, Batch::collate(&exs, &[0, 1, 2]))
}

fn e2e_loss<'t>(model: &Model, vars: &budgetformer::model::BoundModel<'t>, batch: &Batch) -> budgetformer::Result<Var<'t>> {
    let schedule = ScheduleConfig::default().with_total_steps(50);
    let step = 20;
    let opts = ForwardOptions { mode: Mode::Train, step, schedule: &schedule, control: GateControl::default(), capture_attention: false };
    // identical noise on every evaluation
    let out = model.forward(vars, batch, &opts, &mut super::rng(9))?;
    let task = out.logits.cross_entropy(&batch.labels)?;
    let budget_cfg = BudgetLossConfig::default();
    let budget: Vec<_> = out.budgets.iter().map(|s| budget_loss_var(s, &budget_cfg)).collect();
    let entropy = out.relevance.iter().map(|p| entropy_loss_var(p, step, &schedule, SignMode::ProseIntent)).collect::<budgetformer::Result<Vec<_>>>()?;
    Ok(total_loss(&task, &budget, &entropy)?.0)
}

/// Max relative error over `samples` randomly chosen parameter elements
/// (at least one per tensor) of the end-to-end loss.
pub fn end_to_end(samples: usize) -> (f64, usize) {
    let (model, batch) = e2e_model();
    let tape = Tape::new();
    let bound = model.bind(&tape, |_| false);
    let loss = e2e_loss(&model, &bound, &batch).unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.grads();

    let eval = |m: &Model| -> f64 {
        let tape = Tape::new();
        let bound = m.bind(&tape, |_| true);
        e2e_loss(m, &bound, &batch).unwrap().item().unwrap()
    };
    let mut picks: Vec<(usize, usize)> = model.params().iter().enumerate().map(|(i, t)| (i, t.numel() / 2)).collect();
    let mut rng = super::rng(77);
    let n = model.params().len();
    while picks.len() < samples.max(n) {
        let i = rng.random_range(0..n);
        picks.push((i, rng.random_range(0..model.params()[i].numel())));
    }
    let mut work = model.clone();
    let mut worst = 0.0f64;
    for &(i, j) in &picks {
        let orig = model.params()[i].data()[j];
        work.params_mut()[i].data_mut()[j] = orig + FD_STEP;
        let plus = eval(&work);
        work.params_mut()[i].data_mut()[j] = orig - FD_STEP;
        let minus = eval(&work);
        work.params_mut()[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let analytic = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
        worst = worst.max((analytic - fd).abs() / fd.abs().max(1.0));
    }
    (worst, picks.len())
}
