//! One function per subcommand. Each writes its artifacts under `cfg.out`
//! and returns a one-line summary for stdout.

use std::fs;
use std::path::Path;

use flextsf::checkpoint;
use flextsf::experiment::{self, metrics_csv, EvalReport};
use flextsf::train::{History, RegimeKind, SeriesForecast};
use flextsf::FlexTsf;

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Pretrain,
    Finetune,
    Eval,
    Forecast,
    Ablate,
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<String, Failure> {
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::Io(format!("{}: {e}", cfg.out.display())))?;
    match cmd {
        Command::Synth => synth(cfg),
        Command::Train => train(cfg, RegimeKind::Classic),
        Command::Pretrain => train(cfg, RegimeKind::Pretrain),
        Command::Finetune => finetune(cfg),
        Command::Eval => eval(cfg),
        Command::Forecast => forecast(cfg),
        Command::Ablate => ablate(cfg),
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn echo(cfg: &RunConfig) -> Result<(), Failure> {
    write(&cfg.out, "config.echo", cfg.to_toml())
}

fn synth(cfg: &RunConfig) -> Result<String, Failure> {
    echo(cfg)?;
    let ds = cfg.dataset()?;
    flextsf::series::write_csv(&cfg.out.join("data.csv"), &ds.series)?;
    ds.manifest.write(&cfg.out.join("manifest.toml"))?;
    Ok(format!("wrote {} series to {}", ds.series.len(), cfg.out.join("data.csv").display()))
}

fn forecast_csv(forecasts: &[SeriesForecast]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Failure::Other(e.to_string());
    w.write_record(["series_id", "channel", "time", "value_pred"]).map_err(err)?;
    for f in forecasts {
        for (t, v) in f.times.iter().zip(&f.pred_raw) {
            w.write_record([f.series_id.as_str(), f.channel.as_str(), &t.to_string(), &v.to_string()]).map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| Failure::Other(e.to_string()))
}

fn history_csv(h: &History) -> String {
    let mut s = String::from("epoch,train_loss,train_nll,train_kl,val_mse,lr\n");
    for e in &h.epochs {
        s.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, e.train_loss, e.train_nll, e.train_kl, e.val_mse, e.lr));
    }
    s
}

fn write_eval(cfg: &RunConfig, report: &EvalReport, forecasts: &[SeriesForecast]) -> Result<(), Failure> {
    write(&cfg.out, "report.txt", report.to_toml())?;
    write(&cfg.out, "metrics.csv", metrics_csv(std::slice::from_ref(report)))?;
    write(&cfg.out, "forecast.csv", forecast_csv(forecasts)?)
}

fn summary(r: &EvalReport) -> String {
    format!(
        "{} {} on {}: test mse {:.6} (mean baseline {:.6}, last value {:.6}), {} parameters",
        r.mode, r.variant, r.dataset, r.mse, r.baseline_mean, r.baseline_last_value, r.param_count
    )
}

fn train(cfg: &RunConfig, kind: RegimeKind) -> Result<String, Failure> {
    let cfg = cfg.resolved(Some(kind));
    echo(&cfg)?;
    let ds = cfg.dataset()?;
    let regime = cfg.regime(kind);
    let opts = cfg.run_options();
    let run = match kind {
        RegimeKind::Pretrain => experiment::run_pretrain(&ds, cfg.model.clone(), &regime, &opts)?,
        _ => experiment::run_classic(&ds, cfg.model.clone(), &regime, &opts)?,
    };
    checkpoint::save(&run.model, cfg.seed, &cfg.out.join("checkpoint.bin"))?;
    write(&cfg.out, "history.csv", history_csv(&run.history))?;
    write_eval(&cfg, &run.report, &run.evaluation.forecasts)?;
    Ok(summary(&run.report))
}

fn load_model(cfg: &RunConfig) -> Result<FlexTsf, Failure> {
    if cfg.checkpoint.is_empty() {
        return Err(Failure::Config("this command needs `checkpoint`".into()));
    }
    Ok(checkpoint::load(Path::new(&cfg.checkpoint), None)?.0)
}

/// The echo carries the checkpoint's model section, which is what ran.
fn with_model(cfg: &RunConfig, model: &FlexTsf, kind: Option<RegimeKind>) -> RunConfig {
    let mut c = cfg.resolved(kind);
    c.model = model.config.clone();
    c
}

fn finetune(cfg: &RunConfig) -> Result<String, Failure> {
    let model = load_model(cfg)?;
    let cfg = with_model(cfg, &model, Some(RegimeKind::Finetune));
    echo(&cfg)?;
    let ds = cfg.dataset()?;
    let regime = cfg.regime(RegimeKind::Finetune);
    let opts = cfg.run_options();
    let (report, tuned) = experiment::few_shot(&model, &ds, &[cfg.finetune.k], &regime, &opts)?
        .pop()
        .expect("one k requested");
    checkpoint::save(&tuned, cfg.seed, &cfg.out.join("checkpoint.bin"))?;
    let (_, evaluation) = experiment::evaluate_dataset(&tuned, &ds, &report.mode, cfg.seed, &opts)?;
    write_eval(&cfg, &report, &evaluation.forecasts)?;
    Ok(summary(&report))
}

fn eval(cfg: &RunConfig) -> Result<String, Failure> {
    let model = load_model(cfg)?;
    let cfg = with_model(cfg, &model, None);
    echo(&cfg)?;
    let ds = cfg.dataset()?;
    let (report, evaluation) = experiment::evaluate_dataset(&model, &ds, "eval", cfg.seed, &cfg.run_options())?;
    write_eval(&cfg, &report, &evaluation.forecasts)?;
    Ok(summary(&report))
}

fn forecast(cfg: &RunConfig) -> Result<String, Failure> {
    let model = load_model(cfg)?;
    let cfg = with_model(cfg, &model, None);
    echo(&cfg)?;
    let ds = cfg.dataset()?;
    let forecasts = experiment::forecast_future(&model, &ds, cfg.forecast.horizon, &cfg.run_options())?;
    write(&cfg.out, "forecast.csv", forecast_csv(&forecasts)?)?;
    Ok(format!("forecast {} points for {} series", cfg.forecast.horizon, forecasts.len()))
}

fn ablate(cfg: &RunConfig) -> Result<String, Failure> {
    let cfg = cfg.resolved(Some(RegimeKind::Classic));
    echo(&cfg)?;
    let ds = cfg.dataset()?;
    let variants = cfg.ablation_variants()?;
    let regime = cfg.regime(RegimeKind::Classic);
    let (table, reports) = experiment::ablation_suite(&ds, &cfg.model, &variants, &regime, &cfg.run_options())?;
    write(&cfg.out, "report.txt", table.to_toml())?;
    write(&cfg.out, "ablation.txt", table.table())?;
    write(&cfg.out, "metrics.csv", metrics_csv(&reports))?;
    Ok(table.table().trim_end().to_string())
}
