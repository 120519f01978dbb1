mod common;

use budgetformer::attention::GateControl;
use budgetformer::data::{make_synthetic, TaskSpec};
use budgetformer::data::ClassifiedExample;
use budgetformer::model::{build_model, checkpoint, AttentionKind, Model, ModelConfig};
use budgetformer::schedules::ScheduleConfig;
use budgetformer::trainer::*;
use budgetformer::{Error, Tensor};

fn small_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        max_seq_len: 32,
        d_model: 16,
        heads: 4,
        layers: 2,
        classes: 4,
        attention_kind: AttentionKind::Budgeted,
        ..ModelConfig::default()
    }
}

fn task(n: usize, seed: u64) -> (usize, Vec<ClassifiedExample>) {
    let set = make_synthetic(&TaskSpec::keyword_detection(4), n, seed).unwrap();
    (set.vocab.len(), set.examples)
}

fn train_cfg(epochs: u64) -> TrainConfig {
    TrainConfig { epochs, log_interval: 3, ..TrainConfig::default() }
}

fn eval_opts() -> EvalOptions {
    EvalOptions::final_state(8, ScheduleConfig::default().with_total_steps(10), GateControl::default())
}

#[test]
fn horizon_and_step_counter() {
    let (vocab, data) = task(100, 1);
    let cfg = train_cfg(10);
    assert_eq!(cfg.total_steps(100), 70);
    let mut model = build_model(&small_cfg(vocab), 0).unwrap();
    let out = train(&mut model, &data, &data[..20], &TrainConfig { epochs: 2, ..cfg }, None).unwrap();
    assert_eq!(out.total_steps, 14);
    assert_eq!(out.schedule.total_steps, 14);
    let epochs: Vec<_> = out.records.iter().filter(|r| r.kind == RecordKind::Epoch).collect();
    assert_eq!(epochs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![7, 14]);
    let steps: Vec<u64> = out.records.iter().filter(|r| r.kind == RecordKind::Step).map(|r| r.step).collect();
    assert_eq!(steps, vec![3, 6, 9, 12]);
}

#[test]
fn fixed_budget_freezes_budget_predictor() {
    let (vocab, data) = task(48, 2);
    let mut model = build_model(&small_cfg(vocab), 1).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { ablation: Ablation::FixedBudget { s: 0.25 }, ..train_cfg(2) };
    let out = train(&mut model, &data, &data[..16], &cfg, None).unwrap();
    for rec in &out.records {
        assert!(rec.train.s_mean_per_layer.iter().all(|&s| s == 0.25));
        assert!(rec.train.s_std_per_layer.iter().all(|&s| s < 1e-12));
        if let Some(val) = &rec.val {
            assert!(val.selection.s_mean_per_layer.iter().all(|&s| s == 0.25));
            assert_eq!(val.mean_k, 1.0);
        }
    }
    for (name, t) in model.named_params() {
        let old = before.param(name).unwrap();
        if name.contains(".budget.f_") {
            assert_eq!(t, old, "{name} moved");
        } else if name.contains(".budget.g_w") || name.contains("attn.w_q") {
            assert_ne!(t, old, "{name} did not train");
        }
    }
}

#[test]
fn random_gating_freezes_head_scorer() {
    let (vocab, data) = task(48, 3);
    let mut model = build_model(&small_cfg(vocab), 2).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { ablation: Ablation::RandomGating { s: 0.5 }, ..train_cfg(1) };
    let out = train(&mut model, &data, &data[..16], &cfg, None).unwrap();
    for (name, t) in model.named_params() {
        if name.contains(".budget.") {
            assert_eq!(t, before.param(name).unwrap(), "{name} moved");
        }
    }
    let val = out.records.last().unwrap().val.as_ref().unwrap();
    assert_eq!(val.mean_k, 2.0);
}

fn constant_model(vocab: usize, favored: usize) -> Model {
    let mut model = build_model(&small_cfg(vocab), 3).unwrap();
    let w = model.param_mut("classifier.w").unwrap();
    *w = Tensor::zeros(w.shape());
    let b = model.param_mut("classifier.b").unwrap();
    b.data_mut()[favored] = 1.0;
    model
}

#[test]
fn constant_predictor_scores_class_frequency() {
    let (vocab, data) = task(90, 4);
    let model = constant_model(vocab, 2);
    let freq = data.iter().filter(|e| e.label == 2).count() as f64 / data.len() as f64;
    let ev = evaluate(&model, &data, &eval_opts()).unwrap();
    assert_eq!(ev.accuracy, freq);
    assert!(ev.predictions.iter().all(|&p| p == 2));
}

#[test]
fn accuracy_counts_correct_predictions() {
    let model = constant_model(20, 0);
    let data: Vec<_> = [0, 0, 0, 1]
        .iter()
        .map(|&y| ClassifiedExample::new(vec![5, 6, 7], y, None))
        .collect();
    let ev = evaluate(&model, &data, &eval_opts()).unwrap();
    assert_eq!((ev.correct, ev.total, ev.accuracy), (3, 4, 0.75));
}

#[test]
fn evaluation_is_repeatable() {
    let (vocab, data) = task(40, 5);
    let model = build_model(&small_cfg(vocab), 4).unwrap();
    let a = evaluate(&model, &data, &eval_opts()).unwrap();
    let b = evaluate(&model, &data, &eval_opts()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.predictions, b.predictions);
    assert!(matches!(evaluate(&model, &[], &eval_opts()), Err(Error::Contract(_))));
}

#[test]
fn analysis_partitions_and_dumps() {
    let (vocab, data) = task(60, 6);
    let model = build_model(&small_cfg(vocab), 5).unwrap();
    let opts = AnalysisOptions { eval: eval_opts(), dump_examples: vec![0, 7] };
    let an = analyze(&model, &data, &opts).unwrap();
    assert_eq!(an.classes.len(), 2 * 4);
    for layer in 0..2 {
        let rows: Vec<_> = an.classes.iter().filter(|r| r.layer == layer).collect();
        let n: usize = rows.iter().map(|r| r.count).sum();
        let weighted: f64 = rows.iter().map(|r| r.count as f64 * r.s_mean.unwrap_or(0.0)).sum::<f64>() / n as f64;
        assert_eq!(n, data.len());
        assert!((weighted - an.s_mean_per_layer[layer]).abs() < 1e-9);
    }
    assert_eq!(an.tiers.iter().map(|t| t.count).sum::<usize>(), 2 * data.len());
    assert_eq!(an.attention.len(), 2);
    for dump in &an.attention {
        let len = data[dump.example_index].len();
        for layer in &dump.layers {
            assert_eq!(layer.heads.len(), layer.k);
            let ps: Vec<f64> = layer.heads.iter().map(|h| h.p.unwrap()).collect();
            for pair in layer.heads.windows(2) {
                let (a, b) = (pair[0].p.unwrap(), pair[1].p.unwrap());
                assert!(a > b || (a == b && pair[0].head < pair[1].head));
            }
            assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
            for head in &layer.heads {
                assert_eq!(head.rows.len(), len);
                for row in &head.rows {
                    assert_eq!(row.len(), len);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
    assert!(analyze(&model, &data, &AnalysisOptions { eval: eval_opts(), dump_examples: vec![999] }).is_err());
}

#[test]
fn training_is_deterministic() {
    let (vocab, data) = task(40, 7);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model(&small_cfg(vocab), 6).unwrap();
        let out = train(&mut model, &data, &data[..12], &train_cfg(2), Some(dir.path())).unwrap();
        let metrics = std::fs::read(dir.path().join("metrics.jsonl")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let ckpt = std::fs::read(dir.path().join("checkpoints/final.bin")).unwrap();
        assert!(dir.path().join("checkpoints/best.bin").exists());
        assert!(csv.starts_with(CSV_HEADER));
        (out.records, metrics, ckpt, model)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(checkpoint::decode(&a.2).unwrap(), a.3);
}

#[test]
fn recorded_budgets_stay_in_open_interval() {
    let (vocab, data) = task(32, 8);
    let mut model = build_model(&small_cfg(vocab), 7).unwrap();
    let out = train(&mut model, &data, &data[..8], &train_cfg(2), None).unwrap();
    for rec in &out.records {
        let s = rec.train.s_mean.unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert!(rec.loss.total.is_finite());
    }
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let (vocab, data) = task(32, 9);
    let mut model = build_model(&small_cfg(vocab), 8).unwrap();
    for v in model.param_mut("classifier.w").unwrap().data_mut() {
        *v *= 1e7;
    }
    let start = model.clone();
    let dir = tempfile::tempdir().unwrap();
    let err = train(&mut model, &data, &data[..8], &train_cfg(1), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    let saved = checkpoint::load(&dir.path().join("checkpoints/last_good.bin")).unwrap();
    assert_eq!(saved, start);
}
