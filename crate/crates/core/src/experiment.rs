//! End-to-end workflows shared by the CLI and the acceptance suite:
//! classic training, pre-training, zero-shot and few-shot evaluation, and
//! the single-flag ablation comparison.

use std::fmt::Write as _;

use flextsf_tensor::rng::{self, RngState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationFlags, FlexTsf, ModelConfig};
use crate::parallel::Execution;
use crate::series::{Dataset, Segment, SplitSpec};
use crate::train::{
    self, apply_features, baseline_mse, evaluate, forecast_all, prepare, BaselineKind, Corpus, Evaluation, Example,
    History, SeriesForecast, TrainRegime, Windows,
};
use crate::vtnorm::FeatureStandardizer;

/// Evaluation summary. Everything here is a function of seed, config and
/// data, so repeated runs serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub dataset: String,
    pub variant: String,
    /// classic, pretrain, zero-shot or few-shot
    pub mode: String,
    pub zero_shot: bool,
    pub seed: u64,
    /// fine-tuning samples; 0 outside few-shot runs
    pub k: usize,
    /// pooled over observed horizon points, normalized scale
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse_raw: Option<f64>,
    pub baseline_mean: f64,
    pub baseline_last_value: f64,
    pub baseline_linear_trend: f64,
    pub series: usize,
    pub points: usize,
    pub param_count: usize,
    pub config_hash: String,
    /// where the global value statistics came from
    pub stats_source: String,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.dataset, self.variant, self.seed, self.k, self.mse)
    }
}

pub const METRICS_HEADER: &str = "dataset,variant,seed,k,mse";

pub fn metrics_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// FNV-1a over the flattened model config, hex.
pub fn config_hash(config: &ModelConfig) -> String {
    let text: String = config.to_pairs().iter().map(|(k, v)| format!("{k}={v};")).collect();
    format!("{:016x}", rng::tag(&text))
}

/// Options shared by the training workflows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub split: SplitSpec,
    /// random training windows per series and epoch, on top of the fixed
    /// context/horizon rows
    pub windows_per_series: usize,
    pub raw_metrics: bool,
    pub exec: Execution,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { split: SplitSpec::default(), windows_per_series: 4, raw_metrics: false, exec: Execution::default() }
    }
}

/// Train/val/test examples of a corpus with leader features filled in.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub corpus: Corpus,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl PreparedCorpus {
    pub fn new(ds: &Dataset, flags: &AblationFlags, split: &SplitSpec) -> Result<Self> {
        let corpus = Corpus::new(ds, split)?;
        let train = prepare(&corpus.train, &corpus, flags, split)?;
        let val = prepare(&corpus.val, &corpus, flags, split)?;
        let test = prepare(&corpus.test, &corpus, flags, split)?;
        Ok(Self { corpus, train, val, test })
    }

    pub fn standardizer(&self) -> FeatureStandardizer {
        FeatureStandardizer::fit(&self.train.iter().map(Example::features).collect::<Vec<_>>())
    }

    pub fn apply(&mut self, standardizer: &FeatureStandardizer, flags: &AblationFlags) {
        for set in [&mut self.train, &mut self.val, &mut self.test] {
            apply_features(set, standardizer, flags);
        }
    }

    pub fn stats_source(&self) -> String {
        format!("train-split:{}:{}-series", self.corpus.name, self.corpus.train.len())
    }
}

/// Scores a model on a set of examples and fills a report.
pub fn report(
    model: &FlexTsf,
    prepared: &PreparedCorpus,
    examples: &[Example],
    mode: &str,
    seed: u64,
    k: usize,
    opts: &RunOptions,
) -> Result<(EvalReport, Evaluation)> {
    let eval = evaluate(model, examples, opts.exec)?;
    let mse_raw = opts.raw_metrics.then(|| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (f, e) in eval.forecasts.iter().zip(examples) {
            for i in 0..f.pred_raw.len() {
                if e.raw_horizon.observed[i] {
                    sum += (f.pred_raw[i] - e.raw_horizon.values[i]).powi(2);
                    n += 1;
                }
            }
        }
        if n == 0 { 0.0 } else { sum / n as f64 }
    });
    let rep = EvalReport {
        dataset: prepared.corpus.name.clone(),
        variant: model.config.ablation.label().to_string(),
        mode: mode.to_string(),
        zero_shot: mode == "zero-shot",
        seed,
        k,
        mse: eval.mse,
        mse_raw,
        baseline_mean: baseline_mse(BaselineKind::Mean, examples)?,
        baseline_last_value: baseline_mse(BaselineKind::LastValue, examples)?,
        baseline_linear_trend: baseline_mse(BaselineKind::LinearTrend, examples)?,
        series: examples.len(),
        points: eval.points,
        param_count: model.count_parameters(),
        config_hash: config_hash(&model.config),
        stats_source: prepared.stats_source(),
    };
    Ok((rep, eval))
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: FlexTsf,
    pub history: History,
    pub report: EvalReport,
    pub evaluation: Evaluation,
    pub prepared: PreparedCorpus,
}

/// Classic supervised training from scratch, evaluated on the test split.
pub fn run_classic(ds: &Dataset, config: ModelConfig, regime: &TrainRegime, opts: &RunOptions) -> Result<TrainedRun> {
    let flags = config.ablation;
    let mut prepared = PreparedCorpus::new(ds, &flags, &opts.split)?;
    let mut model = FlexTsf::new(config, regime.seed)?;
    model.standardizer = prepared.standardizer();
    prepared.apply(&model.standardizer, &flags);
    let windows = Windows { series: &prepared.corpus.train, corpus: &prepared.corpus, per_series: opts.windows_per_series };
    let history = train::train(&mut model, &prepared.train, Some(windows), &prepared.val, regime, opts.exec)?;
    let (report, evaluation) = report(&model, &prepared, &prepared.test, "classic", regime.seed, 0, opts)?;
    Ok(TrainedRun { model, history, report, evaluation, prepared })
}

/// Self-supervised pre-training on random windows of the training split.
pub fn run_pretrain(ds: &Dataset, config: ModelConfig, regime: &TrainRegime, opts: &RunOptions) -> Result<TrainedRun> {
    let flags = config.ablation;
    let mut prepared = PreparedCorpus::new(ds, &flags, &opts.split)?;
    let mut model = FlexTsf::new(config, regime.seed)?;
    let history = train::pretrain(&mut model, &prepared.corpus, &prepared.val, regime, opts.exec)?;
    prepared.apply(&model.standardizer, &flags);
    let (report, evaluation) = report(&model, &prepared, &prepared.test, "pretrain", regime.seed, 0, opts)?;
    Ok(TrainedRun { model, history, report, evaluation, prepared })
}

/// Evaluates a trained model on the test split of a dataset it has not seen.
/// Global statistics come from that dataset's own training split; no
/// parameter changes.
pub fn zero_shot(model: &FlexTsf, ds: &Dataset, seed: u64, opts: &RunOptions) -> Result<(EvalReport, Evaluation)> {
    evaluate_dataset(model, ds, "zero-shot", seed, opts)
}

/// Test-split evaluation of a fixed model, labelled with `mode`.
pub fn evaluate_dataset(
    model: &FlexTsf,
    ds: &Dataset,
    mode: &str,
    seed: u64,
    opts: &RunOptions,
) -> Result<(EvalReport, Evaluation)> {
    let flags = model.config.ablation;
    let mut prepared = PreparedCorpus::new(ds, &flags, &opts.split)?;
    prepared.apply(&model.standardizer, &flags);
    report(model, &prepared, &prepared.test, mode, seed, 0, opts)
}

/// Forecasts `horizon` points past the end of every series, one global time
/// unit apart, with the whole series as context. Series without an observed
/// value are skipped.
pub fn forecast_future(model: &FlexTsf, ds: &Dataset, horizon: usize, opts: &RunOptions) -> Result<Vec<SeriesForecast>> {
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be positive".into()));
    }
    let flags = model.config.ablation;
    let corpus = Corpus::new(ds, &opts.split)?;
    let mut examples = Vec::with_capacity(ds.series.len());
    for s in &ds.series {
        if s.observed_count() == 0 {
            continue;
        }
        let last = *s.times.last().expect("validated series are non-empty");
        let context = Segment { times: s.times.clone(), values: s.values.clone(), observed: s.observed.clone() };
        let future = Segment {
            times: (1..=horizon).map(|i| last + i as f64 * corpus.omega_g).collect(),
            values: vec![0.0; horizon],
            observed: vec![false; horizon],
        };
        let stats = corpus.channel_stats(&s.channel)?;
        examples.push(Example::build(&s.series_id, &s.channel, &context, &future, stats, corpus.omega_g, &flags)?);
    }
    apply_features(&mut examples, &model.standardizer, &flags);
    forecast_all(model, &examples, opts.exec)
}

/// Fine-tunes copies of `model` on `k` training samples of `ds` for each `k`
/// in the grid, updating only the io parameter group. `k = 0` is the
/// zero-shot evaluation. Requests above the available sample count are
/// clamped.
pub fn few_shot(
    model: &FlexTsf,
    ds: &Dataset,
    ks: &[usize],
    regime: &TrainRegime,
    opts: &RunOptions,
) -> Result<Vec<(EvalReport, FlexTsf)>> {
    let flags = model.config.ablation;
    let mut prepared = PreparedCorpus::new(ds, &flags, &opts.split)?;
    prepared.apply(&model.standardizer, &flags);
    let mut order: Vec<usize> = (0..prepared.train.len()).collect();
    train::shuffle(&mut order, &mut RngState::new(regime.seed).stream(&[rng::tag("few-shot")]));
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            let (rep, _) = report(model, &prepared, &prepared.test, "zero-shot", regime.seed, 0, opts)?;
            out.push((rep, model.clone()));
            continue;
        }
        let k_eff = k.min(order.len());
        let subset: Vec<Example> = order[..k_eff].iter().map(|&i| prepared.train[i].clone()).collect();
        let mut tuned = model.clone();
        let regime = TrainRegime { kind: train::RegimeKind::Finetune, ..regime.clone() };
        train::train(&mut tuned, &subset, None, &prepared.val, &regime, opts.exec)?;
        let (mut rep, _) = report(&tuned, &prepared, &prepared.test, "few-shot", regime.seed, k_eff, opts)?;
        rep.k = k_eff;
        out.push((rep, tuned));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mse: f64,
    /// percentage change against the base model
    pub mse_change_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// Plain table: variant, MSE, MSE+/-.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>12} {:>10}\n", "variant", "MSE", "MSE+/-");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:>12.6} {:>+9.2}%", r.variant, r.mse, r.mse_change_pct);
        }
        s
    }
}

pub const ABLATION_VARIANTS: [AblationFlags; 4] = [
    AblationFlags { disable_vt_norm: false, disable_ivp_patcher: false, disable_led_extras: false },
    AblationFlags { disable_vt_norm: true, disable_ivp_patcher: false, disable_led_extras: false },
    AblationFlags { disable_vt_norm: false, disable_ivp_patcher: true, disable_led_extras: false },
    AblationFlags { disable_vt_norm: false, disable_ivp_patcher: false, disable_led_extras: true },
];

/// Trains the base model and each requested single-flag variant with the
/// same budget and seed; reports MSE changes relative to the base.
pub fn ablation_suite(
    ds: &Dataset,
    config: &ModelConfig,
    variants: &[AblationFlags],
    regime: &TrainRegime,
    opts: &RunOptions,
) -> Result<(AblationReport, Vec<EvalReport>)> {
    let base_cfg = ModelConfig { ablation: AblationFlags::default(), ..config.clone() };
    let base = run_classic(ds, base_cfg, regime, opts)?;
    let mut reports = vec![base.report.clone()];
    let mut rows = vec![AblationRow { variant: "base".into(), mse: base.report.mse, mse_change_pct: 0.0 }];
    for flags in variants.iter().filter(|f| **f != AblationFlags::default()) {
        let run = run_classic(ds, ModelConfig { ablation: *flags, ..config.clone() }, regime, opts)?;
        rows.push(AblationRow {
            variant: flags.label().to_string(),
            mse: run.report.mse,
            mse_change_pct: 100.0 * (run.report.mse - base.report.mse) / base.report.mse,
        });
        reports.push(run.report);
    }
    Ok((AblationReport { dataset: base.report.dataset.clone(), seed: regime.seed, rows }, reports))
}
