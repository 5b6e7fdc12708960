//! Data preparation, the three training regimes, evaluation and baselines.

use std::collections::BTreeMap;

use flextsf_tensor::rng::{self, Rng, RngState};
use flextsf_tensor::{Adam, AdamConfig, StepOutcome};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pretrain_subsequence, AblationFlags, FlexTsf};
use crate::parallel::{batch_gradients, Execution, NoiseKey};
use crate::series::{BatchRow, ChannelStats, Dataset, IrregularSeries, Segment, Split, SplitSpec};
use crate::vtnorm::{self, renormalize, FeatureStandardizer, NormalizedInstance, StaticFeatures};

// ── Data preparation ─────────────────────────────────────────────────

/// A dataset split by series, with global statistics fitted on the
/// training split only.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub stats: BTreeMap<String, ChannelStats>,
    pub omega_g: f64,
    pub train: Vec<IrregularSeries>,
    pub val: Vec<IrregularSeries>,
    pub test: Vec<IrregularSeries>,
}

impl Corpus {
    pub fn new(ds: &Dataset, spec: &SplitSpec) -> Result<Self> {
        let splits = ds.splits(spec);
        let pick = |w: Split| -> Vec<IrregularSeries> {
            ds.series.iter().filter(|s| splits[&s.series_id] == w).cloned().collect()
        };
        let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
        let mut stats = vtnorm::fit_global(&train)?;
        // statistics supplied by the manifest take precedence
        for (ch, s) in &ds.manifest.channels {
            stats.insert(ch.clone(), ChannelStats { mean: s.mean, std: s.std.max(vtnorm::SIGMA_FLOOR) });
        }
        Ok(Self { name: ds.manifest.dataset_name.clone(), stats, omega_g: ds.time_unit(), train, val, test })
    }

    pub fn channel_stats(&self, channel: &str) -> Result<ChannelStats> {
        self.stats
            .get(channel)
            .copied()
            .ok_or_else(|| Error::Data(format!("channel {channel} has no global statistics")))
    }
}

/// One forecasting instance. `row` is what the model sees; `reference` is
/// the value/time-normalized context that defines the metric space.
#[derive(Debug, Clone)]
pub struct Example {
    pub series_id: String,
    pub channel: String,
    pub row: BatchRow,
    pub model_instance: NormalizedInstance,
    pub reference: NormalizedInstance,
    /// horizon in the metric space
    pub target: Segment,
    pub raw_horizon: Segment,
}

impl Example {
    pub fn build(
        series_id: &str,
        channel: &str,
        context: &Segment,
        horizon: &Segment,
        stats: ChannelStats,
        omega_g: f64,
        flags: &AblationFlags,
    ) -> Result<Self> {
        let reference = vtnorm::normalize_instance(context, stats, omega_g)?;
        let model_instance = if flags.disable_vt_norm {
            vtnorm::passthrough_instance(context, stats, omega_g)?
        } else {
            reference.clone()
        };
        let row = BatchRow {
            context: model_instance.segment(),
            horizon: model_instance.map_horizon(horizon),
            features: [0.0; 6],
        };
        Ok(Self {
            series_id: series_id.to_string(),
            channel: channel.to_string(),
            target: reference.map_horizon(horizon),
            row,
            model_instance,
            reference,
            raw_horizon: horizon.clone(),
        })
    }

    pub fn features(&self) -> StaticFeatures {
        self.reference.features
    }

    /// Model-space predictions to the metric space.
    pub fn to_metric(&self, pred: &[f64]) -> Vec<f64> {
        if self.model_instance.scaled {
            pred.to_vec()
        } else {
            renormalize(pred, &self.reference.features)
        }
    }
}

fn to_segment(s: &IrregularSeries) -> Segment {
    Segment { times: s.times.clone(), values: s.values.clone(), observed: s.observed.clone() }
}

/// Context/horizon examples for every usable series; series that are too
/// short or have no observed context or horizon point are skipped.
pub fn prepare(series: &[IrregularSeries], corpus: &Corpus, flags: &AblationFlags, spec: &SplitSpec) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(series.len());
    for s in series {
        if s.len() < 5 {
            continue;
        }
        let (ctx, hz) = crate::series::split_context_horizon(s, spec)?;
        if ctx.observed_count() == 0 || hz.observed_count() == 0 {
            continue;
        }
        let stats = corpus.channel_stats(&s.channel)?;
        out.push(Example::build(&s.series_id, &s.channel, &to_segment(&ctx), &to_segment(&hz), stats, corpus.omega_g, flags)?);
    }
    Ok(out)
}

/// Fills the leader-node features: standardized static features, or zeros
/// when value/time normalization is ablated.
pub fn apply_features(examples: &mut [Example], standardizer: &FeatureStandardizer, flags: &AblationFlags) {
    for e in examples {
        e.row.features = if flags.disable_vt_norm { [0.0; 6] } else { standardizer.standardize(&e.features()) };
    }
}

// ── Regimes ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    Classic,
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    /// multiply by `gamma` every `every_epochs` epochs
    Step { every_epochs: usize, gamma: f64 },
    /// linear warm-up then cosine decay to zero over the whole run
    Cosine { warmup_steps: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRegime {
    pub kind: RegimeKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decoupled_decay: bool,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// pre-training only: optimizer steps per epoch
    pub steps_per_epoch: usize,
    /// epochs without validation improvement before stopping; 0 disables
    pub patience: usize,
    /// fraction of all steps over which the KL weight ramps up from 0
    pub kl_warmup: f64,
    /// global gradient-norm bound; 0 disables clipping
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainRegime {
    pub fn classic(seed: u64) -> Self {
        Self {
            kind: RegimeKind::Classic,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            decoupled_decay: false,
            schedule: LrSchedule::Step { every_epochs: 20, gamma: 0.5 },
            batch_size: 64,
            epochs: 100,
            steps_per_epoch: 0,
            patience: 10,
            kl_warmup: 0.0,
            grad_clip: 1.0,
            seed,
        }
    }

    pub fn pretrain(seed: u64) -> Self {
        Self {
            kind: RegimeKind::Pretrain,
            lr: 1e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            decoupled_decay: true,
            schedule: LrSchedule::Cosine { warmup_steps: 1000 },
            steps_per_epoch: 100,
            ..Self::classic(seed)
        }
    }

    pub fn finetune(seed: u64) -> Self {
        Self { kind: RegimeKind::Finetune, ..Self::classic(seed) }
    }

    pub fn lr_at(&self, epoch: usize, step: u64, total_steps: u64) -> f64 {
        match self.schedule {
            LrSchedule::Step { every_epochs, gamma } => {
                self.lr * gamma.powi((epoch / every_epochs.max(1)) as i32)
            }
            LrSchedule::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    self.lr * (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
                    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                    0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_nll: f64,
    pub train_kl: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub skipped_steps: u64,
}

struct Trainer<'a> {
    regime: &'a TrainRegime,
    adam: Adam,
    io_only: Option<Vec<bool>>,
    step: u64,
    bad_steps: u32,
    exec: Execution,
}

/// Consecutive non-finite losses tolerated before a run is declared diverged.
pub const DIVERGENCE_STEPS: u32 = 3;

impl<'a> Trainer<'a> {
    fn new(model: &FlexTsf, regime: &'a TrainRegime, exec: Execution) -> Self {
        let io_only = (regime.kind == RegimeKind::Finetune).then(|| {
            let groups = model.param_groups();
            let mut mask = vec![false; model.params.len()];
            for id in groups.io {
                mask[id.0] = true;
            }
            mask
        });
        Self { regime, adam: Adam::new(regime.adam(), &model.params), io_only, step: 0, bad_steps: 0, exec }
    }

    fn kl_weight(&self, model: &FlexTsf, total_steps: u64) -> f64 {
        let ramp = self.regime.kl_warmup * total_steps as f64;
        if ramp <= 0.0 {
            model.config.kl_weight
        } else {
            model.config.kl_weight * ((self.step + 1) as f64 / ramp).min(1.0)
        }
    }

    /// One optimizer step; returns `(loss, nll, kl)`.
    fn step(&mut self, model: &mut FlexTsf, rows: &[&BatchRow], lr: f64, total_steps: u64) -> Result<(f64, f64, f64)> {
        let kl_weight = self.kl_weight(model, total_steps);
        let key = NoiseKey { seed: self.regime.seed, step: self.step };
        let g = match batch_gradients(model, rows, key, kl_weight, self.exec) {
            Err(Error::NonFinite(_)) => None,
            other => Some(other?),
        };
        self.step += 1;
        let Some(g) = g.filter(|g| g.loss.is_finite()) else {
            self.bad_steps += 1;
            if self.bad_steps >= DIVERGENCE_STEPS {
                return Err(Error::Diverged {
                    step: self.step,
                    msg: format!("{DIVERGENCE_STEPS} consecutive non-finite losses"),
                });
            }
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        };
        self.bad_steps = 0;
        let mut grads = g.grads;
        if self.regime.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.regime.grad_clip);
        }
        let outcome = match &self.io_only {
            Some(mask) => self.adam.step(&mut model.params, &grads, lr, |i| mask[i]),
            None => self.adam.step(&mut model.params, &grads, lr, |_| true),
        };
        if outcome == StepOutcome::SkippedNonFinite {
            self.bad_steps += 1;
        }
        Ok((g.loss, g.nll, g.kl))
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn snapshot(model: &FlexTsf) -> Vec<Vec<f64>> {
    model.params.iter().map(|p| p.values.clone()).collect()
}

fn restore(model: &mut FlexTsf, values: Vec<Vec<f64>>) {
    for (p, v) in model.params.as_mut_slice().iter_mut().zip(values) {
        p.values = v;
    }
}

/// Epoch bookkeeping shared by all regimes: validation, best-parameter
/// retention and early stopping. Returns true when training should stop.
fn end_epoch(
    model: &FlexTsf,
    val: &[Example],
    history: &mut History,
    best: &mut Option<Vec<Vec<f64>>>,
    record: EpochRecord,
    patience: usize,
    exec: Execution,
) -> Result<bool> {
    let val_mse = if val.is_empty() { record.train_loss } else { evaluate(model, val, exec)?.mse };
    let epoch = record.epoch;
    history.epochs.push(EpochRecord { val_mse, ..record });
    if best.is_none() || val_mse < history.best_val_mse {
        history.best_val_mse = val_mse;
        history.best_epoch = epoch;
        *best = Some(snapshot(model));
    }
    Ok(patience > 0 && epoch >= history.best_epoch + patience)
}

/// Extra random windows drawn from whole training series every epoch.
#[derive(Debug, Clone, Copy)]
pub struct Windows<'a> {
    pub series: &'a [IrregularSeries],
    pub corpus: &'a Corpus,
    pub per_series: usize,
}

/// Classic supervised training or few-shot fine-tuning on prepared rows,
/// optionally mixed with fresh random windows each epoch. The parameters
/// with the best validation MSE are kept.
pub fn train(
    model: &mut FlexTsf,
    fixed: &[Example],
    windows: Option<Windows<'_>>,
    val: &[Example],
    regime: &TrainRegime,
    exec: Execution,
) -> Result<History> {
    let extra = windows.map_or(0, |w| w.per_series * w.series.len());
    let n = fixed.len() + extra;
    if n == 0 {
        return Err(Error::Data("no training examples".into()));
    }
    let flags = model.config.ablation;
    let mut trainer = Trainer::new(model, regime, exec);
    let mut history = History { best_val_mse: f64::INFINITY, ..History::default() };
    let mut best = None;
    let bs = regime.batch_size.max(1);
    let per_epoch = n.div_ceil(bs) as u64;
    let total = per_epoch * regime.epochs as u64;
    let root = RngState::new(regime.seed);
    for epoch in 0..regime.epochs {
        let mut drawn = match windows {
            Some(w) if w.per_series > 0 => {
                let mut stream = root.stream(&[rng::tag("windows"), epoch as u64]);
                pretrain_examples(w.series, w.corpus, model, extra, &mut stream, &flags)?
            }
            _ => Vec::new(),
        };
        apply_features(&mut drawn, &model.standardizer, &flags);
        let pool: Vec<&BatchRow> = fixed.iter().chain(drawn.iter()).map(|e| &e.row).collect();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        shuffle(&mut order, &mut root.stream(&[rng::tag("shuffle"), epoch as u64]));
        let lr = regime.lr_at(epoch, trainer.step, total);
        let (mut loss, mut nll, mut kl) = (0.0, 0.0, 0.0);
        for batch in order.chunks(bs) {
            let rows: Vec<&BatchRow> = batch.iter().map(|&i| pool[i]).collect();
            let lr = match regime.schedule {
                LrSchedule::Cosine { .. } => regime.lr_at(epoch, trainer.step, total),
                LrSchedule::Step { .. } => lr,
            };
            let (l, nl, k) = trainer.step(model, &rows, lr, total)?;
            let w = rows.len() as f64 / pool.len() as f64;
            loss += l * w;
            nll += nl * w;
            kl += k * w;
        }
        let rec = EpochRecord { epoch, train_loss: loss, train_nll: nll, train_kl: kl, val_mse: 0.0, lr };
        if end_epoch(model, val, &mut history, &mut best, rec, regime.patience, exec)? {
            history.stopped_early = true;
            break;
        }
    }
    history.skipped_steps = trainer.adam.skipped();
    if let Some(b) = best {
        restore(model, b);
    }
    Ok(history)
}

/// Windows whose normalized horizon leaves `±MAX_WINDOW_TARGET` are redrawn.
pub const MAX_WINDOW_TARGET: f64 = 10.0;

/// Random-window examples for self-supervised pre-training.
pub fn pretrain_examples(
    series: &[IrregularSeries],
    corpus: &Corpus,
    model: &FlexTsf,
    count: usize,
    stream: &mut rng::StreamRng,
    flags: &AblationFlags,
) -> Result<Vec<Example>> {
    let eligible: Vec<&IrregularSeries> =
        series.iter().filter(|s| s.len() >= 2 * model.config.patch_len).collect();
    if eligible.is_empty() {
        return Err(Error::Data("no series long enough for pre-training windows".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 20 * count {
        attempts += 1;
        let s = eligible[stream.random_range(0..eligible.len())];
        let Some((start, c, t)) =
            pretrain_subsequence(s.len(), model.config.patch_len, model.config.horizon_patches, stream)
        else {
            continue;
        };
        let full = to_segment(s);
        let cut = |a: usize, b: usize| Segment {
            times: full.times[a..b].to_vec(),
            values: full.values[a..b].to_vec(),
            observed: full.observed[a..b].to_vec(),
        };
        let (ctx, hz) = (cut(start, start + c), cut(start + c, start + c + t));
        if ctx.observed_count() == 0 || hz.observed_count() == 0 {
            continue;
        }
        let stats = corpus.channel_stats(&s.channel)?;
        let e = Example::build(&s.series_id, &s.channel, &ctx, &hz, stats, corpus.omega_g, flags)?;
        // a nearly flat context blows horizon targets up through its tiny
        // instance std; such windows carry no usable signal
        if e.target.values.iter().any(|v| v.abs() > MAX_WINDOW_TARGET) {
            continue;
        }
        out.push(e);
    }
    Ok(out)
}

/// Self-supervised pre-training on random sub-sequences of the training
/// series. Fits the feature standardizer on a fixed draw of windows first.
pub fn pretrain(
    model: &mut FlexTsf,
    corpus: &Corpus,
    val: &[Example],
    regime: &TrainRegime,
    exec: Execution,
) -> Result<History> {
    let flags = model.config.ablation;
    let root = RngState::new(regime.seed);
    let fit = pretrain_examples(&corpus.train, corpus, model, corpus.train.len().max(64), &mut root.stream(&[rng::tag("standardizer")]), &flags)?;
    model.standardizer = FeatureStandardizer::fit(&fit.iter().map(Example::features).collect::<Vec<_>>());
    let mut val = val.to_vec();
    apply_features(&mut val, &model.standardizer, &flags);

    let mut trainer = Trainer::new(model, regime, exec);
    let mut history = History { best_val_mse: f64::INFINITY, ..History::default() };
    let mut best = None;
    let total = (regime.epochs * regime.steps_per_epoch) as u64;
    for epoch in 0..regime.epochs {
        let (mut loss, mut nll, mut kl) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for _ in 0..regime.steps_per_epoch {
            let mut stream = root.stream(&[rng::tag("windows"), trainer.step]);
            let mut batch = pretrain_examples(&corpus.train, corpus, model, regime.batch_size, &mut stream, &flags)?;
            apply_features(&mut batch, &model.standardizer, &flags);
            let rows: Vec<&BatchRow> = batch.iter().map(|e| &e.row).collect();
            lr = regime.lr_at(epoch, trainer.step, total);
            let (l, n, k) = trainer.step(model, &rows, lr, total)?;
            let w = 1.0 / regime.steps_per_epoch as f64;
            loss += l * w;
            nll += n * w;
            kl += k * w;
        }
        let rec = EpochRecord { epoch, train_loss: loss, train_nll: nll, train_kl: kl, val_mse: 0.0, lr };
        if end_epoch(model, &val, &mut history, &mut best, rec, regime.patience, exec)? {
            history.stopped_early = true;
            break;
        }
    }
    history.skipped_steps = trainer.adam.skipped();
    if let Some(b) = best {
        restore(model, b);
    }
    Ok(history)
}

pub fn shuffle(v: &mut [usize], r: &mut rng::StreamRng) {
    for i in (1..v.len()).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesForecast {
    pub series_id: String,
    pub channel: String,
    /// raw horizon timestamps
    pub times: Vec<f64>,
    pub pred_raw: Vec<f64>,
    pub pred_metric: Vec<f64>,
    pub target_metric: Vec<f64>,
    pub observed: Vec<bool>,
}

pub fn forecast_example(model: &FlexTsf, e: &Example) -> Result<SeriesForecast> {
    let pred = model.generate(&e.row.context, &e.row.features, &e.row.horizon.times)?;
    Ok(SeriesForecast {
        series_id: e.series_id.clone(),
        channel: e.channel.clone(),
        times: e.raw_horizon.times.clone(),
        pred_raw: e.model_instance.to_raw(&pred),
        pred_metric: e.to_metric(&pred),
        target_metric: e.target.values.clone(),
        observed: e.target.observed.clone(),
    })
}

pub fn forecast_all(model: &FlexTsf, examples: &[Example], exec: Execution) -> Result<Vec<SeriesForecast>> {
    match exec {
        Execution::Sequential => examples.iter().map(|e| forecast_example(model, e)).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            examples.par_iter().map(|e| forecast_example(model, e)).collect()
        }
    }
}

/// Squared error pooled over observed horizon points: `(mse, points)`.
pub fn pooled_mse<'a>(items: impl Iterator<Item = (&'a [f64], &'a [f64], &'a [bool])>) -> (f64, usize) {
    let (mut sum, mut n) = (0.0, 0usize);
    for (pred, target, observed) in items {
        for i in 0..pred.len() {
            if observed[i] {
                sum += (pred[i] - target[i]).powi(2);
                n += 1;
            }
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub points: usize,
    pub forecasts: Vec<SeriesForecast>,
}

pub fn evaluate(model: &FlexTsf, examples: &[Example], exec: Execution) -> Result<Evaluation> {
    let forecasts = forecast_all(model, examples, exec)?;
    let (mse, points) = pooled_mse(
        forecasts.iter().map(|f| (f.pred_metric.as_slice(), f.target_metric.as_slice(), f.observed.as_slice())),
    );
    Ok(Evaluation { mse, points, forecasts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Mean,
    LastValue,
    LinearTrend,
}

/// Naive forecasts from the observed context points.
pub fn baseline_forecast(kind: BaselineKind, context: &Segment, horizon_times: &[f64]) -> Result<Vec<f64>> {
    let pts: Vec<(f64, f64)> = (0..context.len())
        .filter(|&i| context.observed[i])
        .map(|i| (context.times[i], context.values[i]))
        .collect();
    let Some(&(_, last)) = pts.last() else {
        return Err(Error::Data("baseline needs at least one observed context point".into()));
    };
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.1).sum::<f64>() / n;
    Ok(match kind {
        BaselineKind::Mean => vec![mean_x; horizon_times.len()],
        BaselineKind::LastValue => vec![last; horizon_times.len()],
        BaselineKind::LinearTrend => {
            let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let stt: f64 = pts.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
            let stx: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_x)).sum();
            let slope = if stt > 0.0 { stx / stt } else { 0.0 };
            horizon_times.iter().map(|t| mean_x + slope * (t - mean_t)).collect()
        }
    })
}

/// Baseline MSE in the metric space.
pub fn baseline_mse(kind: BaselineKind, examples: &[Example]) -> Result<f64> {
    let preds = examples
        .iter()
        .map(|e| baseline_forecast(kind, &e.reference.segment(), &e.target.times))
        .collect::<Result<Vec<_>>>()?;
    Ok(pooled_mse(
        preds.iter().zip(examples).map(|(p, e)| (p.as_slice(), e.target.values.as_slice(), e.target.observed.as_slice())),
    )
    .0)
}
