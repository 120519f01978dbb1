//! Run configuration (one flat TOML document) and the end-to-end train,
//! eval, ablate and analyze workflows built on it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::GateControl;
use crate::data::{load_jsonl, make_synthetic, ClassifiedExample, TaskKind, TaskSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{build_model, checkpoint, AttentionKind, Model, ModelConfig};
use crate::objective::{BudgetLossConfig, SignMode};
use crate::schedules::ScheduleConfig;
use crate::seed;
use crate::trainer::{
    analyze, evaluate, train, AdamWConfig, Ablation, Analysis, AnalysisOptions, EvalOptions, Evaluation,
    TrainConfig,
};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Jsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    None,
    FixedBudget,
    RandomGating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_source: DataSource,
    pub task: TaskKind,
    pub train_size: usize,
    pub val_size: usize,
    pub fillers: usize,
    pub data_seed: u64,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub vocab_max_size: usize,

    pub max_seq_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    pub attention_kind: AttentionKind,
    pub ffn_multiplier: usize,
    pub dropout: f64,

    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub s_min: f64,
    pub s_max: f64,
    pub alpha_base: f64,
    pub alpha_max: f64,
    pub sigma_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub gamma: f64,
    pub beta_max: f64,
    pub sign_mode: SignMode,
    pub ablation: AblationMode,
    pub ablation_s: f64,
    pub ablation_reference: Option<PathBuf>,
    pub log_interval: u64,

    pub output_dir: PathBuf,
    pub grams_per_flop: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let o = &train.optimizer;
        let b = &train.budget;
        let s = &train.schedule;
        Self {
            data_source: DataSource::Synthetic,
            task: TaskKind::KeywordDetection,
            train_size: 2000,
            val_size: 500,
            fillers: 50,
            data_seed: 0,
            train_path: None,
            val_path: None,
            vocab_max_size: 10_000,
            max_seq_len: model.max_seq_len,
            d_model: model.d_model,
            heads: model.heads,
            layers: model.layers,
            classes: model.classes,
            attention_kind: model.attention_kind,
            ffn_multiplier: model.ffn_multiplier,
            dropout: model.dropout,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            adam_beta1: o.beta1,
            adam_beta2: o.beta2,
            adam_epsilon: o.epsilon,
            seed: train.seed,
            s_min: b.s_min,
            s_max: b.s_max,
            alpha_base: b.alpha_base,
            alpha_max: b.alpha_max,
            sigma_max: s.sigma_max,
            tau_min: s.tau_min,
            tau_max: s.tau_max,
            gamma: s.gamma,
            beta_max: s.beta_max,
            sign_mode: train.sign_mode,
            ablation: AblationMode::None,
            ablation_s: 0.5,
            ablation_reference: None,
            log_interval: train.log_interval,
            output_dir: PathBuf::from("runs/default"),
            grams_per_flop: 0.0,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn toml_error(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Config {
        field: origin.to_string(),
        reason: e.to_string().trim().to_string(),
    }
}

/// Loaded datasets with their shared vocabulary.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub vocab: Vocabulary,
    pub train: Vec<ClassifiedExample>,
    pub val: Vec<ClassifiedExample>,
}

impl RunConfig {
    /// Parses a TOML document; unknown keys and bad types are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| toml_error("<config>", e))?;
        Self::from_table(table, "<config>")
    }

    fn from_table(table: toml::Table, origin: &str) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| toml_error(origin, e))
    }

    /// Reads `path`, then applies `key=value` overrides in order and an
    /// optional seed override, which wins over both.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| toml_error(&origin, e))?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::config(item, "override must look like key=value"))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        if let Some(seed) = seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        Self::from_table(table, &origin)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| toml_error("<serialize>", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(self.vocab_max_size.max(2)).validate()?;
        self.train_config().validate()?;
        match self.data_source {
            DataSource::Synthetic => {
                self.task_spec().validate()?;
                if self.train_size == 0 || self.val_size == 0 {
                    return Err(Error::config("train_size", "synthetic splits must be non-empty"));
                }
            }
            DataSource::Jsonl => {
                for (field, p) in [("train_path", &self.train_path), ("val_path", &self.val_path)] {
                    match p {
                        None => return Err(Error::config(field, "required when data_source = \"jsonl\"")),
                        Some(p) if !p.is_file() => {
                            return Err(Error::config(field, format!("{} does not exist", p.display())))
                        }
                        _ => {}
                    }
                }
                if self.vocab_max_size < 3 {
                    return Err(Error::config("vocab_max_size", "must be >= 3"));
                }
            }
        }
        if self.ablation != AblationMode::None && self.attention_kind != AttentionKind::Budgeted {
            return Err(Error::config("ablation", "ablations need attention_kind = \"budgeted\""));
        }
        if let Some(p) = &self.ablation_reference {
            if !p.is_file() {
                return Err(Error::config("ablation_reference", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            classes: self.classes,
            max_len: self.max_seq_len,
            fillers: self.fillers,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_seq_len: self.max_seq_len,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            classes: self.classes,
            attention_kind: self.attention_kind,
            ffn_multiplier: self.ffn_multiplier,
            dropout: self.dropout,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            sigma_max: self.sigma_max,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            gamma: self.gamma,
            beta_max: self.beta_max,
            total_steps: 1,
        }
    }

    /// Training settings; a reference-checkpoint budget is resolved
    /// separately by [`run_train`].
    pub fn train_config(&self) -> TrainConfig {
        let ablation = match self.ablation {
            AblationMode::None => Ablation::None,
            AblationMode::FixedBudget => Ablation::FixedBudget { s: self.ablation_s },
            AblationMode::RandomGating => Ablation::RandomGating { s: self.ablation_s },
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            },
            seed: self.seed,
            budget: BudgetLossConfig {
                s_min: self.s_min,
                s_max: self.s_max,
                alpha_base: self.alpha_base,
                alpha_max: self.alpha_max,
            },
            schedule: self.schedule(),
            ablation,
            sign_mode: self.sign_mode,
            log_interval: self.log_interval,
            grams_per_flop: self.grams_per_flop,
        }
    }

    /// End-of-training evaluation settings for models produced by this run.
    pub fn eval_options(&self, train_len: usize) -> EvalOptions {
        let cfg = self.train_config();
        let schedule = self.schedule().with_total_steps(cfg.total_steps(train_len).max(1));
        let mut opts = EvalOptions::final_state(self.batch_size, schedule, cfg.ablation.control());
        opts.grams_per_flop = self.grams_per_flop;
        opts.seed = self.seed;
        opts
    }

    pub fn load_data(&self) -> Result<Datasets> {
        match self.data_source {
            DataSource::Synthetic => {
                let spec = self.task_spec();
                let train = make_synthetic(&spec, self.train_size, self.data_seed)?;
                let val = make_synthetic(&spec, self.val_size, seed::derive(self.data_seed, &[1]))?;
                Ok(Datasets {
                    vocab: train.vocab,
                    train: train.examples,
                    val: val.examples,
                })
            }
            DataSource::Jsonl => {
                let (train_path, val_path) = match (&self.train_path, &self.val_path) {
                    (Some(t), Some(v)) => (t, v),
                    _ => return Err(Error::config("train_path", "jsonl data needs train_path and val_path")),
                };
                let vocab = vocab_from_jsonl(train_path, self.vocab_max_size)?;
                let train = load_jsonl(train_path, &vocab, self.max_seq_len)?.examples;
                let val = load_jsonl(val_path, &vocab, self.max_seq_len)?.examples;
                Ok(Datasets { vocab, train, val })
            }
        }
    }
}

fn vocab_from_jsonl(path: &Path, max_size: usize) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let texts: Vec<String> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("text")?.as_str().map(str::to_string))
        .collect();
    Vocabulary::build(texts.iter().map(String::as_str), max_size)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub best_epoch: u64,
    pub evaluation: Evaluation,
    pub ablation: Ablation,
}

/// Mean inference budget of a reference checkpoint over `data`.
pub fn reference_budget(path: &Path, data: &[ClassifiedExample], opts: &EvalOptions) -> Result<f64> {
    let model = checkpoint::load(path)?;
    let opts = EvalOptions {
        control: GateControl::default(),
        ..opts.clone()
    };
    evaluate(&model, data, &opts)?
        .selection
        .s_mean
        .ok_or_else(|| Error::Param(format!("{} is not a budgeted model", path.display())))
}

/// Trains per `cfg`, writing metrics, checkpoints, `vocab.json`, the
/// resolved config and the final `cost_report.json` into `output_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(RESOLVED_CONFIG), &cfg.to_toml()?)?;
    let data = cfg.load_data()?;
    data.vocab.save(&out.join("vocab.json"))?;
    let mut model = build_model(&cfg.model_config(data.vocab.len()), cfg.seed)?;
    let mut train_cfg = cfg.train_config();
    let eval_opts = cfg.eval_options(data.train.len());
    if let (Some(reference), Ablation::RandomGating { .. }) = (&cfg.ablation_reference, train_cfg.ablation) {
        let s = reference_budget(reference, &data.train, &eval_opts)?;
        log::info!("random gating with reference budget s = {s}");
        train_cfg.ablation = Ablation::RandomGating { s };
    }
    let outcome = train(&mut model, &data.train, &data.val, &train_cfg, Some(out))?;
    let eval_opts = EvalOptions {
        control: train_cfg.ablation.control(),
        ..eval_opts
    };
    let evaluation = evaluate(&outcome.best, &data.val, &eval_opts)?;
    write(&out.join("cost_report.json"), &serde_json::to_string_pretty(&evaluation.cost)?)?;
    write(&out.join("eval.json"), &serde_json::to_string_pretty(&evaluation)?)?;
    Ok(RunSummary {
        output_dir: out.clone(),
        best_epoch: outcome.best_epoch,
        evaluation,
        ablation: train_cfg.ablation,
    })
}

/// Where evaluation and analysis data come from.
#[derive(Clone, Debug)]
pub enum DataArg {
    /// Validation split (and gating settings) of a run configuration.
    Config(Box<RunConfig>),
    Jsonl { path: PathBuf, vocab: PathBuf },
}

#[derive(Clone, Debug, Default)]
pub struct EvalFlags {
    pub force_k: Option<usize>,
    pub grams_per_flop: Option<f64>,
    pub batch_size: Option<usize>,
}

/// Loads data and the matching inference options, checking them against
/// the checkpoint's own configuration.
pub fn prepare_eval(model: &Model, data: &DataArg, flags: &EvalFlags) -> Result<(Vec<ClassifiedExample>, EvalOptions)> {
    let mcfg = model.config();
    let (examples, mut opts) = match data {
        DataArg::Config(cfg) => {
            let ds = cfg.load_data()?;
            let expected = cfg.model_config(ds.vocab.len());
            if &expected != mcfg {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config {mcfg:?} does not match run config {expected:?}"
                )));
            }
            (ds.val, cfg.eval_options(ds.train.len()))
        }
        DataArg::Jsonl { path, vocab } => {
            let vocab = Vocabulary::load(vocab)?;
            if vocab.len() != mcfg.vocab_size {
                return Err(Error::Checkpoint(format!(
                    "vocabulary has {} tokens, checkpoint expects {}",
                    vocab.len(),
                    mcfg.vocab_size
                )));
            }
            let examples = load_jsonl(path, &vocab, mcfg.max_seq_len)?.examples;
            let opts = EvalOptions::final_state(16, ScheduleConfig::default(), GateControl::default());
            (examples, opts)
        }
    };
    if let Some(k) = flags.force_k {
        if k == 0 || k > mcfg.heads {
            return Err(Error::Param(format!("--force-k {k} outside [1, {}]", mcfg.heads)));
        }
        opts.control.force_k = Some(k);
    }
    if let Some(g) = flags.grams_per_flop {
        opts.grams_per_flop = g;
    }
    if let Some(b) = flags.batch_size {
        opts.batch_size = b.max(1);
    }
    Ok((examples, opts))
}

/// Evaluates a checkpoint; writes `cost_report.json` and `eval.json` into
/// `out_dir`.
pub fn run_eval(checkpoint_path: &Path, data: &DataArg, flags: &EvalFlags, out_dir: &Path) -> Result<Evaluation> {
    let model = checkpoint::load(checkpoint_path)?;
    let (examples, opts) = prepare_eval(&model, data, flags)?;
    let evaluation = evaluate(&model, &examples, &opts)?;
    write(&out_dir.join("cost_report.json"), &serde_json::to_string_pretty(&evaluation.cost)?)?;
    write(&out_dir.join("eval.json"), &serde_json::to_string_pretty(&evaluation)?)?;
    Ok(evaluation)
}

/// Runs the analysis; writes `analysis/{classes,tiers}.csv`,
/// `analysis/summary.json` and one `attention/example_<i>.json` per dumped
/// example.
pub fn run_analyze(
    checkpoint_path: &Path,
    data: &DataArg,
    flags: &EvalFlags,
    dump_examples: &[usize],
    out_dir: &Path,
) -> Result<Analysis> {
    let model = checkpoint::load(checkpoint_path)?;
    let (examples, eval) = prepare_eval(&model, data, flags)?;
    let analysis = analyze(
        &model,
        &examples,
        &AnalysisOptions {
            eval,
            dump_examples: dump_examples.to_vec(),
        },
    )?;
    write(&out_dir.join("analysis/classes.csv"), &analysis.class_csv())?;
    write(&out_dir.join("analysis/tiers.csv"), &analysis.tier_csv())?;
    let summary = serde_json::json!({
        "s_mean_per_layer": analysis.s_mean_per_layer,
        "classes": analysis.classes,
        "tiers": analysis.tiers,
    });
    write(&out_dir.join("analysis/summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    for dump in &analysis.attention {
        write(
            &out_dir.join(format!("attention/example_{}.json", dump.example_index)),
            &serde_json::to_string(dump)?,
        )?;
    }
    Ok(analysis)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub s: Option<f64>,
    pub accuracy: f64,
    pub s_mean: Option<f64>,
    pub mean_k: f64,
    pub mean_k_per_layer: Vec<f64>,
    pub flops_inference: u64,
    pub ratio_attention: f64,
}

impl AblationRow {
    fn from_summary(label: String, s: Option<f64>, summary: &RunSummary) -> Self {
        let e = &summary.evaluation;
        Self {
            label,
            s,
            accuracy: e.accuracy,
            s_mean: e.selection.s_mean,
            mean_k: e.mean_k,
            mean_k_per_layer: e.selection.mean_k_per_layer.clone(),
            flops_inference: e.cost.flops_total,
            ratio_attention: e.cost.ratio_attention,
        }
    }
}

fn run_all(configs: Vec<RunConfig>, parallel: bool) -> Result<Vec<RunSummary>> {
    if !parallel {
        return configs.iter().map(run_train).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || run_train(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("ablation run panicked".into()))))
            .collect()
    })
}

/// Fixed-budget grid or learned-vs-random gating comparison. Each run gets
/// its own subdirectory of `cfg.output_dir`; the table goes to
/// `comparison.csv` there.
pub fn run_ablation(cfg: &RunConfig, mode: AblationMode, grid: &[f64], parallel: bool) -> Result<Vec<AblationRow>> {
    let base = &cfg.output_dir;
    let rows = match mode {
        AblationMode::None => {
            return Err(Error::Param("ablation mode must be fixed_budget or random_gating".into()))
        }
        AblationMode::FixedBudget => {
            if grid.is_empty() {
                return Err(Error::Param("fixed_budget needs a non-empty grid of s values".into()));
            }
            let configs: Vec<RunConfig> = grid
                .iter()
                .map(|&s| RunConfig {
                    ablation: AblationMode::FixedBudget,
                    ablation_s: s,
                    output_dir: base.join(format!("fixed_budget_s{s}")),
                    ..cfg.clone()
                })
                .collect();
            for c in &configs {
                c.validate()?;
            }
            let summaries = run_all(configs, parallel)?;
            grid.iter()
                .zip(&summaries)
                .map(|(&s, sum)| AblationRow::from_summary(format!("fixed_budget_s{s}"), Some(s), sum))
                .collect::<Vec<_>>()
        }
        AblationMode::RandomGating => {
            let learned = run_train(&RunConfig {
                ablation: AblationMode::None,
                output_dir: base.join("learned"),
                ..cfg.clone()
            })?;
            let s = match grid {
                [] => learned
                    .evaluation
                    .selection
                    .s_mean
                    .ok_or_else(|| Error::Param("learned run produced no budget".into()))?,
                [s] => *s,
                _ => return Err(Error::Param("random_gating takes at most one s value".into())),
            };
            let random = run_train(&RunConfig {
                ablation: AblationMode::RandomGating,
                ablation_s: s,
                ablation_reference: None,
                output_dir: base.join("random_gating"),
                ..cfg.clone()
            })?;
            vec![
                AblationRow::from_summary("learned".into(), None, &learned),
                AblationRow::from_summary("random_gating".into(), Some(s), &random),
            ]
        }
    };
    let mut csv = String::from("run,s,accuracy,s_mean,mean_k,flops_inference,ratio_attention\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.s.map(|v| v.to_string()).unwrap_or_default(),
            r.accuracy,
            r.s_mean.map(|v| v.to_string()).unwrap_or_default(),
            r.mean_k,
            r.flops_inference,
            r.ratio_attention
        ));
    }
    write(&base.join("comparison.csv"), &csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_and_mistyped_fields_are_named() {
        let err = RunConfig::from_toml_str("d_modell = 3").unwrap_err().to_string();
        assert!(err.contains("d_modell"), "{err}");
        let err = RunConfig::from_toml_str("epochs = \"ten\"").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        let bad = RunConfig { heads: 7, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "heads"));
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\nepochs = 2\ntask = \"composition\"\n").unwrap();
        let sets = ["epochs=4".to_string(), "output_dir=out/x".to_string(), "seed=5".to_string()];
        let cfg = RunConfig::load(&path, &sets, Some(7)).unwrap();
        assert_eq!((cfg.seed, cfg.epochs), (7, 4));
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.task, TaskKind::Composition);
        assert!(RunConfig::load(&dir.path().join("missing.toml"), &[], None).is_err());
        assert!(RunConfig::load(&path, &["noequals".into()], None).is_err());
    }
}
