//! Training loop, evaluation and analysis exports.

mod analysis;
mod metrics;
mod optim;
mod stats;

pub use analysis::{analyze, Analysis, AnalysisOptions, AttentionDump, ClassRow, HeadDump, LayerDump, TierRow};
pub use metrics::{MetricsRecord, MetricsWriter, RecordKind, CSV_HEADER};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use stats::{SelectionStats, SelectionSummary};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{BudgetSource, GateControl, Mode, ScoreSource};
use crate::cost::{model_cost, CostReport};
use crate::data::{Batch, Batcher, ClassifiedExample};
use crate::error::{Error, Result};
use crate::model::{checkpoint, AttentionKind, ForwardOptions, Model};
use crate::objective::{
    budget_loss_var, entropy_loss_var, total_loss, BudgetLossConfig, LossBreakdown, SignMode,
};
use crate::schedules::ScheduleConfig;
use crate::seed;
use crate::tensor::{Tape, Tensor};

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Replace `f_θ` with a constant budget.
    FixedBudget { s: f64 },
    /// Constant budget and uniformly random head choice in place of `g_φ`.
    RandomGating { s: f64 },
}

impl Ablation {
    pub fn control(self) -> GateControl {
        match self {
            Ablation::None => GateControl::default(),
            Ablation::FixedBudget { s } => GateControl {
                budget: BudgetSource::Fixed(s),
                ..GateControl::default()
            },
            Ablation::RandomGating { s } => GateControl {
                budget: BudgetSource::Fixed(s),
                scores: ScoreSource::Random,
                force_k: None,
            },
        }
    }

    /// Parameters that must not be trained under this ablation.
    pub fn is_frozen(self, name: &str) -> bool {
        match self {
            Ablation::None => false,
            Ablation::FixedBudget { .. } => name.contains(".budget.f_"),
            Ablation::RandomGating { .. } => name.contains(".budget."),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub budget: BudgetLossConfig,
    /// `total_steps` is overwritten with `epochs × ceil(|train| / batch_size)`.
    pub schedule: ScheduleConfig,
    pub ablation: Ablation,
    pub sign_mode: SignMode,
    /// Emit a step record every this many steps; 0 disables them.
    pub log_interval: u64,
    pub grams_per_flop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            budget: BudgetLossConfig::default(),
            schedule: ScheduleConfig::default(),
            ablation: Ablation::None,
            sign_mode: SignMode::ProseIntent,
            log_interval: 0,
            grams_per_flop: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", o.learning_rate)));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        for (field, b) in [("adam_beta1", o.beta1), ("adam_beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(o.epsilon > 0.0) {
            return Err(Error::config("adam_epsilon", "must be > 0"));
        }
        if !(self.grams_per_flop >= 0.0 && self.grams_per_flop.is_finite()) {
            return Err(Error::config("grams_per_flop", "must be finite and >= 0"));
        }
        match self.ablation {
            Ablation::FixedBudget { s } | Ablation::RandomGating { s } if !(s > 0.0 && s <= 1.0) => {
                return Err(Error::config("ablation_s", format!("must be in (0, 1], got {s}")));
            }
            _ => {}
        }
        self.budget.validate()?;
        self.schedule.clone().with_total_steps(1).validate()
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        self.epochs * train_len.div_ceil(self.batch_size) as u64
    }
}

/// Options for inference-mode passes over a dataset.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Schedule position used for the temperature; the horizon (or any
    /// later step) is the end-of-training setting.
    pub step: u64,
    pub schedule: ScheduleConfig,
    pub control: GateControl,
    pub grams_per_flop: f64,
    pub seed: u64,
}

impl EvalOptions {
    /// End-of-training settings for a loaded checkpoint.
    pub fn final_state(batch_size: usize, schedule: ScheduleConfig, control: GateControl) -> Self {
        let step = schedule.total_steps;
        Self {
            batch_size,
            step,
            schedule,
            control,
            grams_per_flop: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub loss_task: f64,
    pub mean_k: f64,
    pub selection: SelectionSummary,
    pub cost: CostReport,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub(crate) fn check_data(model: &Model, data: &[ClassifiedExample], what: &str) -> Result<()> {
    let cfg = model.config();
    for (i, ex) in data.iter().enumerate() {
        ex.validate(cfg.classes, cfg.vocab_size)
            .map_err(|e| Error::Data(format!("{what} example {i}: {e}")))?;
    }
    Ok(())
}

/// Inference-mode accuracy, selection statistics and realized cost.
pub fn evaluate(model: &Model, data: &[ClassifiedExample], opts: &EvalOptions) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    check_data(model, data, "evaluation")?;
    let cfg = model.config();
    let batcher = Batcher::new(data, opts.batch_size, 0, false);
    let mut stats = SelectionStats::default();
    let mut cost = CostReport::empty(opts.grams_per_flop);
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for (i, batch) in batcher.epoch(0).enumerate() {
        let mut rng = seed::rng(opts.seed, &[seed::STREAM_EVAL, i as u64]);
        let out = model.infer(&batch, opts.step, &opts.schedule, opts.control, false, &mut rng)?;
        for (r, &label) in batch.labels.iter().enumerate() {
            let pred = argmax(out.logits.row(r));
            correct += usize::from(pred == label);
            predictions.push(pred);
        }
        let tape = Tape::new();
        loss_sum += tape.constant(out.logits).cross_entropy(&batch.labels)?.item()? * batch.size() as f64;
        stats.add(&out.selections);
        let lens: Vec<usize> = batch.lengths.iter().map(|&l| l.min(cfg.max_seq_len)).collect();
        cost.merge(&model_cost(cfg, Some(&out.selections), &lens, Mode::Inference, opts.grams_per_flop)?);
    }
    let selection = stats.summary();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        loss_task: loss_sum / data.len() as f64,
        mean_k: selection.mean_k.unwrap_or(cfg.heads as f64),
        selection,
        cost,
        predictions,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best: Model,
    pub best_epoch: u64,
    pub best_val_accuracy: f64,
    pub total_steps: u64,
    pub skipped_steps: u64,
    pub schedule: ScheduleConfig,
}

/// Training-mode totals over a window of steps.
#[derive(Default)]
struct Window {
    steps: u64,
    loss: LossBreakdown,
    correct: usize,
    seen: usize,
    stats: SelectionStats,
}

impl Window {
    fn record(&self, kind: RecordKind, step: u64, epoch: u64, heads: usize) -> MetricsRecord {
        let n = self.steps.max(1) as f64;
        let train = self.stats.summary();
        MetricsRecord {
            kind,
            step,
            epoch,
            loss: LossBreakdown {
                task: self.loss.task / n,
                budget: self.loss.budget / n,
                entropy: self.loss.entropy / n,
                total: self.loss.total / n,
            },
            acc_train: self.correct as f64 / self.seen.max(1) as f64,
            mean_k: train.mean_k.unwrap_or(heads as f64),
            train,
            acc_val: None,
            val: None,
        }
    }
}

fn write_checkpoint(dir: Option<&Path>, name: &str, model: &Model) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let path = ckpt_dir.join(name);
    checkpoint::save(model, &path)?;
    Ok(Some(path))
}

/// Trains `model` in place. With `out_dir`, writes `metrics.jsonl`,
/// `metrics.csv` and `checkpoints/{best,final}.bin` there.
pub fn train(
    model: &mut Model,
    train_data: &[ClassifiedExample],
    val_data: &[ClassifiedExample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    check_data(model, train_data, "training")?;
    check_data(model, val_data, "validation")?;
    let budgeted = model.config().attention_kind == AttentionKind::Budgeted;
    if !budgeted && cfg.ablation != Ablation::None {
        return Err(Error::config("ablation", "ablations need budgeted attention"));
    }

    let total_steps = cfg.total_steps(train_data.len());
    let schedule = cfg.schedule.clone().with_total_steps(total_steps);
    schedule.validate()?;
    let control = cfg.ablation.control();
    let heads = model.config().heads;
    let batcher = Batcher::new(train_data, cfg.batch_size, cfg.seed, true);
    let mut state = AdamWState::new(model.params());
    let mut writer = match out_dir {
        Some(dir) => Some(MetricsWriter::create(dir)?),
        None => None,
    };
    let mut records = Vec::new();
    let mut emit = |rec: MetricsRecord, writer: &mut Option<MetricsWriter>| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            w.write(&rec)?;
        }
        records.push(rec);
        Ok(())
    };

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut skipped = 0;
    let mut t: u64 = 0;
    let mut interval = Window::default();
    for epoch in 1..=cfg.epochs {
        let mut window = Window::default();
        for batch in batcher.epoch(epoch - 1) {
            let (loss, correct, selections) = match train_step(model, &batch, cfg, &schedule, control, t, &mut state) {
                Ok(v) => v,
                Err(Error::NonFiniteGradient(what)) => {
                    log::warn!("step {t}: non-finite gradient in {what}; update skipped");
                    skipped += 1;
                    t += 1;
                    continue;
                }
                Err(Error::Diverged { step, loss }) => {
                    write_checkpoint(out_dir, "last_good.bin", model)?;
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    return Err(Error::Diverged { step, loss });
                }
                Err(e) => return Err(e),
            };
            for w in [&mut window, &mut interval] {
                w.steps += 1;
                w.loss.task += loss.task;
                w.loss.budget += loss.budget;
                w.loss.entropy += loss.entropy;
                w.loss.total += loss.total;
                w.correct += correct;
                w.seen += batch.size();
                w.stats.add(&selections);
            }
            t += 1;
            if cfg.log_interval > 0 && t.is_multiple_of(cfg.log_interval) {
                emit(interval.record(RecordKind::Step, t, epoch, heads), &mut writer)?;
                interval = Window::default();
            }
        }
        let eval_opts = EvalOptions {
            batch_size: cfg.batch_size,
            step: t,
            schedule: schedule.clone(),
            control,
            grams_per_flop: cfg.grams_per_flop,
            seed: cfg.seed,
        };
        let val = evaluate(model, val_data, &eval_opts)?;
        let mut rec = window.record(RecordKind::Epoch, t, epoch, heads);
        rec.acc_val = Some(val.accuracy);
        log::info!(
            "epoch {epoch}/{}: loss {:.4} train acc {:.4} val acc {:.4} s_mean {:?} mean k {:.3}",
            cfg.epochs,
            rec.loss.total,
            rec.acc_train,
            val.accuracy,
            val.selection.s_mean,
            val.mean_k
        );
        if val.accuracy > best_acc {
            best_acc = val.accuracy;
            best_epoch = epoch;
            best = model.clone();
            write_checkpoint(out_dir, "best.bin", model)?;
        }
        rec.val = Some(val);
        emit(rec, &mut writer)?;
    }
    write_checkpoint(out_dir, "final.bin", model)?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(TrainOutcome {
        records,
        best,
        best_epoch,
        best_val_accuracy: best_acc,
        total_steps,
        skipped_steps: skipped,
        schedule,
    })
}

type StepResult = (LossBreakdown, usize, Vec<Vec<crate::attention::HeadSelection>>);

fn train_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &TrainConfig,
    schedule: &ScheduleConfig,
    control: GateControl,
    t: u64,
    state: &mut AdamWState,
) -> Result<StepResult> {
    let mut rng = seed::rng(cfg.seed, &[seed::STREAM_STEP, t]);
    let tape = Tape::new();
    let bound = model.bind(&tape, |name| cfg.ablation.is_frozen(name));
    let opts = ForwardOptions {
        mode: Mode::Train,
        step: t,
        schedule,
        control,
        capture_attention: false,
    };
    let out = model.forward(&bound, batch, &opts, &mut rng)?;
    let task = out.logits.cross_entropy(&batch.labels)?;
    let budget: Vec<_> = out.budgets.iter().map(|s| budget_loss_var(s, &cfg.budget)).collect();
    let entropy = out
        .relevance
        .iter()
        .map(|p| entropy_loss_var(p, t, schedule, cfg.sign_mode))
        .collect::<Result<Vec<_>>>()?;
    let (loss, breakdown) = total_loss(&task, &budget, &entropy)?;
    if !(breakdown.total <= DIVERGENCE_LOSS) {
        return Err(Error::Diverged {
            step: t,
            loss: breakdown.total,
        });
    }
    let logits: Tensor = out.logits.to_tensor();
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    tape.backward(loss)?;
    let grads = bound.grads();
    adamw_step(model.params_mut(), &grads, state, &cfg.optimizer)?;
    Ok((breakdown, correct, out.selections))
}
