//! Run configuration: a TOML file, then `--key value` overrides on top.

use std::path::{Path, PathBuf};

use flextsf::experiment::RunOptions;
use flextsf::parallel::Execution;
use flextsf::series::{Dataset, DatasetManifest, SynthConfig, SynthKind};
use flextsf::train::{LrSchedule, RegimeKind, TrainRegime};
use flextsf::{AblationFlags, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Everything a command needs. Every key has a default, so no file at all is
/// a valid config; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// the only source of randomness: init, synthetic data, splits, shuffling, noise
    pub seed: u64,
    /// output directory, created if missing
    pub out: PathBuf,
    /// checkpoint read by finetune, eval and forecast
    pub checkpoint: String,
    /// use the rayon pool for batch gradients and evaluation (same results either way)
    pub parallel: bool,
    /// also report MSE in raw data units
    pub raw_metrics: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub forecast: ForecastConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: String::new(),
            parallel: true,
            raw_metrics: false,
            data: DataConfig::default(),
            model: ModelConfig::classic(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            forecast: ForecastConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV with header series_id,channel,time,value; empty selects a synthetic corpus
    pub input: String,
    /// dataset manifest (TOML) for `input`; optional
    pub manifest: String,
    /// synthetic kind: sine, mixed-freq-sine, scale-shifted-sine, drop-masked-sine, sine-family
    pub synth: String,
    pub series: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// [min, max] period in time units; empty keeps the kind's default
    pub periods: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: String::new(),
            manifest: String::new(),
            synth: "drop-masked-sine".into(),
            series: 1000,
            min_len: 60,
            max_len: 120,
            periods: Vec::new(),
        }
    }
}

/// Optimizer and schedule. Unset keys take the preset of the command's
/// regime (classic for train and ablate, pretrain, finetune); the echoed
/// config has all of them filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoupled_decay: Option<bool>,
    /// "step" (decay every `step_every` epochs by `step_gamma`) or "cosine" (warm-up then cosine)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// pre-training only; other regimes run full passes
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_warmup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// fresh random windows per training series per epoch (classic regime)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub windows_per_series: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// training samples drawn from the train split; 0 evaluates without tuning
    pub k: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { k: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// points forecast past the end of each series, one global time unit apart
    pub horizon: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { horizon: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// variants trained next to the base model
    pub variants: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { variants: vec!["no-vt-norm".into(), "no-ivp-patcher".into(), "no-led-extras".into()] }
    }
}

/// Documented keys for `--help`.
pub const KEYS_HELP: &str = "\
Config keys (TOML file via --config, or --key value; dotted keys address sections):
  seed = 0                     all randomness derives from it
  out = \"out\"                  output directory
  checkpoint = \"\"              model for finetune / eval / forecast
  parallel = true              rayon batch gradients (results are identical)
  raw_metrics = false          add MSE in raw units to the report
  data.input = \"\"              CSV series_id,channel,time,value; empty = synthetic
  data.manifest = \"\"           dataset manifest TOML
  data.synth = \"drop-masked-sine\"  sine | mixed-freq-sine | scale-shifted-sine | drop-masked-sine | sine-family
  data.series = 1000  data.min_len = 60  data.max_len = 120  data.periods = []
  model.*                      classic preset: patch_len 8, latent_dim 64, heads 4, head_dim 16,
                               layers 2, ff_mult 4, solver \"resnet-flow\" | \"rk4-ode\", solver_hidden 32,
                               infer_hidden 64, steps_per_unit 16, rotary_base 1e4, tau_scale 1,
                               kl_weight 1, sampling \"mean\" | \"sample\", max_positions 256,
                               horizon_patches 4
  model.ablation.disable_vt_norm / disable_ivp_patcher / disable_led_extras = false
  train.lr, weight_decay, beta1, beta2, decoupled_decay, schedule (\"step\" | \"cosine\"),
  train.step_every, step_gamma, warmup_steps, batch_size, epochs, steps_per_epoch,
  train.patience, kl_warmup, grad_clip, windows_per_series
                               unset = the command's regime preset; echoed resolved
  finetune.k = 100             few-shot sample count
  forecast.horizon = 24        points past the end of each series
  ablate.variants = [\"no-vt-norm\", \"no-ivp-patcher\", \"no-led-extras\"]

Exit codes: 0 ok, 1 other, 2 config, 3 io, 4 data, 5 divergence.";

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Failure> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Failure::Config(format!("{}: {}", p.display(), one_line(&e))))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set(&mut table, key, parse_value(value))?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Failure::Config(one_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(Failure::from)?;
        self.synth_kind()?;
        self.ablation_variants()?;
        if self.data.min_len < 5 || self.data.min_len > self.data.max_len {
            return Err(Failure::Config(format!(
                "data.min_len must be >= 5 and <= data.max_len, got {}..{}",
                self.data.min_len, self.data.max_len
            )));
        }
        if !(self.data.periods.is_empty() || self.data.periods.len() == 2 && self.data.periods[0] > 0.0) {
            return Err(Failure::Config("data.periods must be [] or [min, max] with min > 0".into()));
        }
        if let Some(s) = &self.train.schedule {
            if s != "step" && s != "cosine" {
                return Err(Failure::Config(format!("train.schedule must be \"step\" or \"cosine\", got `{s}`")));
            }
        }
        Ok(())
    }

    pub fn synth_kind(&self) -> Result<SynthKind, Failure> {
        self.data.synth.parse().map_err(Failure::from)
    }

    pub fn ablation_variants(&self) -> Result<Vec<AblationFlags>, Failure> {
        self.ablate
            .variants
            .iter()
            .map(|v| {
                let mut f = AblationFlags::default();
                match v.as_str() {
                    "no-vt-norm" => f.disable_vt_norm = true,
                    "no-ivp-patcher" => f.disable_ivp_patcher = true,
                    "no-led-extras" => f.disable_led_extras = true,
                    other => return Err(Failure::Config(format!("unknown ablation variant `{other}`"))),
                }
                Ok(f)
            })
            .collect()
    }

    pub fn exec(&self) -> Execution {
        if self.parallel {
            Execution::default()
        } else {
            Execution::Sequential
        }
    }

    pub fn run_options(&self) -> RunOptions {
        let mut o = RunOptions { raw_metrics: self.raw_metrics, exec: self.exec(), ..RunOptions::default() };
        if let Some(w) = self.train.windows_per_series {
            o.windows_per_series = w;
        }
        o
    }

    /// The regime preset for `kind` with every set key applied.
    pub fn regime(&self, kind: RegimeKind) -> TrainRegime {
        let base = match kind {
            RegimeKind::Classic => TrainRegime::classic(self.seed),
            RegimeKind::Pretrain => TrainRegime::pretrain(self.seed),
            RegimeKind::Finetune => TrainRegime::finetune(self.seed),
        };
        let t = &self.train;
        let (every, gamma, warmup) = match base.schedule {
            LrSchedule::Step { every_epochs, gamma } => (Some(every_epochs), Some(gamma), None),
            LrSchedule::Cosine { warmup_steps } => (None, None, Some(warmup_steps)),
        };
        let cosine = t.schedule.as_deref().map_or(warmup.is_some(), |s| s == "cosine");
        let schedule = if cosine {
            LrSchedule::Cosine { warmup_steps: t.warmup_steps.or(warmup).unwrap_or(0) }
        } else {
            LrSchedule::Step {
                every_epochs: t.step_every.or(every).unwrap_or(20),
                gamma: t.step_gamma.or(gamma).unwrap_or(0.5),
            }
        };
        TrainRegime {
            lr: t.lr.unwrap_or(base.lr),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            beta1: t.beta1.unwrap_or(base.beta1),
            beta2: t.beta2.unwrap_or(base.beta2),
            decoupled_decay: t.decoupled_decay.unwrap_or(base.decoupled_decay),
            schedule,
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            epochs: t.epochs.unwrap_or(base.epochs),
            steps_per_epoch: t.steps_per_epoch.unwrap_or(base.steps_per_epoch),
            patience: t.patience.unwrap_or(base.patience),
            kl_warmup: t.kl_warmup.unwrap_or(base.kl_warmup),
            grad_clip: t.grad_clip.unwrap_or(base.grad_clip),
            ..base
        }
    }

    /// This config with every train key set to what `kind` resolves to, so
    /// the echo reproduces the run without relying on presets.
    pub fn resolved(&self, kind: Option<RegimeKind>) -> RunConfig {
        let mut out = self.clone();
        if let Some(kind) = kind {
            let r = self.regime(kind);
            let (schedule, step_every, step_gamma, warmup) = match r.schedule {
                LrSchedule::Step { every_epochs, gamma } => ("step", Some(every_epochs), Some(gamma), None),
                LrSchedule::Cosine { warmup_steps } => ("cosine", None, None, Some(warmup_steps)),
            };
            out.train = TrainConfig {
                lr: Some(r.lr),
                weight_decay: Some(r.weight_decay),
                beta1: Some(r.beta1),
                beta2: Some(r.beta2),
                decoupled_decay: Some(r.decoupled_decay),
                schedule: Some(schedule.into()),
                step_every,
                step_gamma,
                warmup_steps: warmup,
                batch_size: Some(r.batch_size),
                epochs: Some(r.epochs),
                steps_per_epoch: Some(r.steps_per_epoch),
                patience: Some(r.patience),
                kl_warmup: Some(r.kl_warmup),
                grad_clip: Some(r.grad_clip),
                windows_per_series: Some(self.run_options().windows_per_series),
            };
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The configured dataset: a CSV (with optional manifest) or a synthetic
    /// corpus seeded by `seed`.
    pub fn dataset(&self) -> Result<Dataset, Failure> {
        if self.data.input.is_empty() {
            let kind = self.synth_kind()?;
            let mut sc = SynthConfig::new(kind, self.data.series, (self.data.min_len, self.data.max_len), self.seed);
            if let [lo, hi] = self.data.periods[..] {
                sc.period_range = (lo, hi);
            }
            return Ok(sc.generate());
        }
        let manifest = if self.data.manifest.is_empty() {
            None
        } else {
            Some(DatasetManifest::read(Path::new(&self.data.manifest))?)
        };
        Ok(flextsf::series::load_csv(Path::new(&self.data.input), manifest)?)
    }
}

/// Override values are TOML literals when they parse as one, else strings.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Failure::Config(format!("empty key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Failure::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `--key value` / `--key=value` pairs; `--config` is returned apart.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>), Failure> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(Failure::Config(format!("expected --key, found `{a}`")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Failure::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key.replace('-', "_"), value));
        }
    }
    Ok((config, pairs))
}

pub fn one_line(e: &impl std::fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}
