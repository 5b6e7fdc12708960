//! Univariate series, CSV/manifest I/O, dataset splits, synthetic corpora and
//! padded batches.
//!
//! Multichannel files are decomposed into one [`IrregularSeries`] per
//! `(series_id, channel)`; the channel name is kept for reporting only.
//! Missing values keep their timestamp and are stored as `NaN` with
//! `observed = false`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use flextsf_tensor::rng::{self, Rng, RngState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One channel of one series: `(time, value)` pairs plus an observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSeries {
    pub series_id: String,
    pub channel: String,
    /// seconds, strictly increasing
    pub times: Vec<f64>,
    /// `NaN` where `observed` is false
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl IrregularSeries {
    pub fn new(
        series_id: impl Into<String>,
        channel: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let s = Self { series_id: series_id.into(), channel: channel.into(), times, values, observed };
        s.validate()?;
        Ok(s)
    }

    /// Fully observed series.
    pub fn dense(series_id: impl Into<String>, channel: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let observed = vec![true; values.len()];
        Self::new(series_id, channel, times, values, observed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() || self.times.len() != self.observed.len() {
            return Err(Error::Data(format!(
                "{}/{}: times, values and mask lengths differ ({}, {}, {})",
                self.series_id,
                self.channel,
                self.times.len(),
                self.values.len(),
                self.observed.len()
            )));
        }
        if let Some(i) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Data(format!(
                "{}/{}: timestamps not strictly increasing at index {}",
                self.series_id,
                self.channel,
                i + 1
            )));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data(format!("{}/{}: non-finite timestamp", self.series_id, self.channel)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn observed_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.observed).filter(|(_, &o)| o).map(|(&v, _)| v)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> IrregularSeries {
        IrregularSeries {
            series_id: self.series_id.clone(),
            channel: self.channel.clone(),
            times: self.times[range.clone()].to_vec(),
            values: self.values[range.clone()].to_vec(),
            observed: self.observed[range].to_vec(),
        }
    }

    pub fn key(&self) -> (String, String) {
        (self.series_id.clone(), self.channel.clone())
    }
}

/// Time/value/mask triple without identity, as consumed by the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segment {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

// ── Manifest and splits ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Dataset-level metadata: name, global time unit, optional per-channel
/// global statistics, and the seed that drives the train/val/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_name: String,
    /// global time unit ω_g in seconds; computed from the data when absent
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_unit_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub channels: BTreeMap<String, ChannelStats>,
    #[serde(default)]
    pub split_seed: u64,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>) -> Self {
        Self { dataset_name: name.into(), time_unit_seconds: None, channels: BTreeMap::new(), split_seed: 0 }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(w) = m.time_unit_seconds {
            if !(w > 0.0) {
                return Err(Error::Config(format!("time_unit_seconds must be positive, got {w}")));
            }
        }
        if let Some((name, _)) = m.channels.iter().find(|(_, s)| !(s.std >= 0.0)) {
            return Err(Error::Config(format!("channel {name}: std must be non-negative")));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Context/horizon fractions and the 8:1:1 series-level split ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub context_fraction: f64,
    pub horizon_fraction: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { context_fraction: 0.8, horizon_fraction: 0.2, train_ratio: 0.8, val_ratio: 0.1 }
    }
}

/// Assigns every distinct series id to train/val/test by ranking ids on a
/// seeded hash and cutting the ranking 8:1:1. All channels of a series share
/// its split. With at least 10 series every split is non-empty.
pub fn assign_splits(series_ids: &[String], seed: u64, spec: &SplitSpec) -> BTreeMap<String, Split> {
    let mut ids: Vec<&String> = series_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let mut ranked: Vec<(u64, &String)> =
        ids.iter().map(|id| (rng::splitmix64(seed ^ rng::tag(id)), *id)).collect();
    ranked.sort();
    let n = ranked.len();
    let mut n_train = (spec.train_ratio * n as f64).floor() as usize;
    let mut n_val = (spec.val_ratio * n as f64).floor() as usize;
    if n >= 3 {
        n_val = n_val.max(1);
        n_train = n_train.min(n - n_val - 1).max(1);
    }
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (_, id))| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.clone(), split)
        })
        .collect()
}

/// Splits a series into its first `floor(0.8·M)` points and the remainder.
pub fn split_context_horizon(series: &IrregularSeries, spec: &SplitSpec) -> Result<(IrregularSeries, IrregularSeries)> {
    let m = series.len();
    if m < 5 {
        return Err(Error::Data(format!("{}: need at least 5 points to split, got {m}", series.series_id)));
    }
    let c = (spec.context_fraction * m as f64).floor() as usize;
    if c >= m {
        return Err(Error::Data(format!("{}: empty horizon", series.series_id)));
    }
    Ok((series.slice(0..c), series.slice(c..m)))
}

// ── CSV ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: Vec<IrregularSeries>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// ω_g from the manifest, else the minimum positive gap over all series.
    pub fn time_unit(&self) -> f64 {
        self.manifest.time_unit_seconds.unwrap_or_else(|| min_positive_gap(&self.series).unwrap_or(1.0))
    }

    pub fn splits(&self, spec: &SplitSpec) -> BTreeMap<String, Split> {
        let ids: Vec<String> = self.series.iter().map(|s| s.series_id.clone()).collect();
        assign_splits(&ids, self.manifest.split_seed, spec)
    }

    pub fn split(&self, which: Split, spec: &SplitSpec) -> Vec<IrregularSeries> {
        let map = self.splits(spec);
        self.series.iter().filter(|s| map[&s.series_id] == which).cloned().collect()
    }
}

pub fn min_positive_gap(series: &[IrregularSeries]) -> Option<f64> {
    series
        .iter()
        .flat_map(|s| s.times.windows(2).map(|w| w[1] - w[0]))
        .filter(|&g| g > 0.0)
        .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.min(g))))
}

pub const CSV_HEADER: [&str; 4] = ["series_id", "channel", "time", "value"];

/// Reads the `series_id,channel,time,value` CSV contract. Row numbers in
/// errors are 1-based file lines (the header is line 1).
pub fn load_csv(path: &Path, manifest: Option<DatasetManifest>) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Csv { row: 1, msg: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Csv { row: 1, msg: format!("expected header {}", CSV_HEADER.join(",")) });
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), IrregularSeries> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Csv { row, msg: e.to_string() })?;
        if record.len() != 4 {
            return Err(Error::Csv { row, msg: format!("expected 4 fields, got {}", record.len()) });
        }
        let (id, channel) = (record[0].to_string(), record[1].to_string());
        let time: f64 = record[2].parse().map_err(|_| Error::Csv { row, msg: format!("bad time `{}`", &record[2]) })?;
        if !time.is_finite() {
            return Err(Error::Csv { row, msg: "non-finite time".into() });
        }
        let (value, observed) = if record[3].is_empty() {
            (f64::NAN, false)
        } else {
            let v: f64 = record[3].parse().map_err(|_| Error::Csv { row, msg: format!("bad value `{}`", &record[3]) })?;
            (v, true)
        };
        let key = (id.clone(), channel.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            IrregularSeries { series_id: id, channel, times: vec![], values: vec![], observed: vec![] }
        });
        if let Some(&last) = entry.times.last() {
            if !(time > last) {
                return Err(Error::Csv { row, msg: format!("time {time} does not increase (previous {last})") });
            }
        }
        entry.times.push(time);
        entry.values.push(value);
        entry.observed.push(observed);
    }
    let series: Vec<IrregularSeries> = order.into_iter().map(|k| groups.remove(&k).expect("grouped")).collect();
    let manifest = manifest.unwrap_or_else(|| {
        DatasetManifest::new(path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()))
    });
    Ok(Dataset { series, manifest })
}

pub fn write_csv(path: &Path, series: &[IrregularSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for s in series {
        for i in 0..s.len() {
            let value = if s.observed[i] { format!("{}", s.values[i]) } else { String::new() };
            w.write_record([s.series_id.as_str(), s.channel.as_str(), &format!("{}", s.times[i]), &value])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ── Synthetic corpora ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// regular grid, one sinusoid per series
    Sine,
    /// irregular grid, sum of a fast and a slow sinusoid
    MixedFreqSine,
    /// regular grid, per-series amplitude and offset spanning orders of magnitude
    ScaleShiftedSine,
    /// irregular grid with 30% of points unobserved
    DropMaskedSine,
    /// regular grid split over several channels, each in its own unit, with
    /// per-series amplitude and offset; a heterogeneous pre-training source
    SineFamily,
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "mixed-freq-sine" | "mixed-freq" => Ok(SynthKind::MixedFreqSine),
            "scale-shifted-sine" | "scale-shifted" => Ok(SynthKind::ScaleShiftedSine),
            "drop-masked-sine" | "drop-masked" => Ok(SynthKind::DropMaskedSine),
            "sine-family" => Ok(SynthKind::SineFamily),
            other => Err(Error::Config(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Sine => "sine",
            SynthKind::MixedFreqSine => "mixed-freq-sine",
            SynthKind::ScaleShiftedSine => "scale-shifted-sine",
            SynthKind::DropMaskedSine => "drop-masked-sine",
            SynthKind::SineFamily => "sine-family",
        })
    }
}

/// Generator settings. Periods are in time units (multiples of
/// `time_unit_seconds`); irregular gaps are `ceil(Exp(mean_gap))` units so
/// the dataset keeps a well-defined minimum time unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n_series: usize,
    pub length_range: (usize, usize),
    pub seed: u64,
    pub period_range: (f64, f64),
    /// slow component period range (mixed-frequency kind only)
    pub slow_period_range: (f64, f64),
    /// amplitude drawn log-uniformly from this range
    pub amplitude_range: (f64, f64),
    pub offset_range: (f64, f64),
    /// noise std relative to amplitude
    pub noise: f64,
    pub irregular: bool,
    pub mean_gap: f64,
    pub mask_fraction: f64,
    pub time_unit_seconds: f64,
    /// series `i` belongs to channel `i % channels`
    pub channels: usize,
    /// per-channel unit factor, log-uniform; multiplies amplitude and offset
    pub channel_scale_range: (f64, f64),
}

impl SynthConfig {
    pub fn new(kind: SynthKind, n_series: usize, length_range: (usize, usize), seed: u64) -> Self {
        let base = Self {
            kind,
            n_series,
            length_range,
            seed,
            period_range: (8.0, 24.0),
            slow_period_range: (30.0, 60.0),
            amplitude_range: (1.0, 1.0),
            offset_range: (0.0, 0.0),
            noise: 0.05,
            irregular: false,
            mean_gap: 1.0,
            mask_fraction: 0.0,
            time_unit_seconds: 3600.0,
            channels: 1,
            channel_scale_range: (1.0, 1.0),
        };
        match kind {
            SynthKind::Sine => base,
            SynthKind::MixedFreqSine => Self { period_range: (6.0, 14.0), irregular: true, ..base },
            SynthKind::ScaleShiftedSine => Self { amplitude_range: (0.5, 50.0), offset_range: (-100.0, 100.0), ..base },
            SynthKind::DropMaskedSine => Self { irregular: true, mask_fraction: 0.3, ..base },
            SynthKind::SineFamily => Self {
                amplitude_range: (0.5, 10.0),
                offset_range: (-10.0, 10.0),
                channels: 8,
                channel_scale_range: (0.1, 100.0),
                ..base
            },
        }
    }

    pub fn generate(&self) -> Dataset {
        let root = RngState::new(self.seed);
        let series = (0..self.n_series).map(|i| self.one(&root, i)).collect();
        let mut manifest = DatasetManifest::new(self.kind.to_string());
        manifest.time_unit_seconds = Some(self.time_unit_seconds);
        manifest.split_seed = self.seed;
        Dataset { series, manifest }
    }

    fn one(&self, root: &RngState, index: usize) -> IrregularSeries {
        let channels = self.channels.max(1);
        let ch = index % channels;
        let scale = log_uniform(&mut root.stream(&[rng::tag("channel"), ch as u64]), self.channel_scale_range);
        let mut r = root.stream(&[rng::tag("synth"), index as u64]);
        let (lo, hi) = self.length_range;
        let m = r.random_range(lo..=hi.max(lo));
        let unit = self.time_unit_seconds;
        let start_units = r.random_range(0..1000u32) as f64;
        let mut units = Vec::with_capacity(m);
        let mut t = start_units;
        for k in 0..m {
            if k > 0 {
                let gap = if self.irregular {
                    let u: f64 = r.random::<f64>();
                    (-(1.0 - u).ln() * self.mean_gap).ceil().max(1.0)
                } else {
                    1.0
                };
                t += gap;
            }
            units.push(t);
        }
        let uniform = |r: &mut rng::StreamRng, (a, b): (f64, f64)| a + (b - a) * r.random::<f64>();
        let amp = log_uniform(&mut r, self.amplitude_range);
        let offset = uniform(&mut r, self.offset_range);
        let period = uniform(&mut r, self.period_range);
        let phase = uniform(&mut r, (0.0, std::f64::consts::TAU));
        let slow = if self.kind == SynthKind::MixedFreqSine {
            Some((uniform(&mut r, self.slow_period_range), uniform(&mut r, (0.0, std::f64::consts::TAU)), uniform(&mut r, (0.5, 1.0))))
        } else {
            None
        };
        let values: Vec<f64> = units
            .iter()
            .map(|&u| {
                let mut x = (std::f64::consts::TAU * u / period + phase).sin();
                if let Some((p2, ph2, a2)) = slow {
                    x += a2 * (std::f64::consts::TAU * u / p2 + ph2).sin();
                }
                scale * (offset + amp * (x + self.noise * rng::standard_normal(&mut r)))
            })
            .collect();
        let mut observed = vec![true; m];
        let n_masked = (self.mask_fraction * m as f64).round() as usize;
        if n_masked > 0 {
            // partial Fisher-Yates picks exactly n_masked positions
            let mut idx: Vec<usize> = (0..m).collect();
            for k in 0..n_masked.min(m) {
                let j = r.random_range(k..m);
                idx.swap(k, j);
                observed[idx[k]] = false;
            }
        }
        let values = values.into_iter().zip(&observed).map(|(v, &o)| if o { v } else { f64::NAN }).collect();
        IrregularSeries {
            series_id: format!("s{index:05}"),
            channel: if channels == 1 { "value".into() } else { format!("value{ch}") },
            times: units.iter().map(|u| u * unit).collect(),
            values,
            observed,
        }
    }
}

fn log_uniform(r: &mut rng::StreamRng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        (a.ln() + (b.ln() - a.ln()) * r.random::<f64>()).exp()
    }
}

/// Seeded synthetic corpus with the kind's default settings.
pub fn make_synthetic(kind: SynthKind, n_series: usize, length_range: (usize, usize), seed: u64) -> Dataset {
    SynthConfig::new(kind, n_series, length_range, seed).generate()
}

// ── Batches ──────────────────────────────────────────────────────────

/// One normalized training row: a context followed by its horizon, plus the
/// standardized static feature vector for the leader node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub context: Segment,
    pub horizon: Segment,
    pub features: [f64; 6],
}

/// Rows right-padded to a common length. `valid` marks real entries and is
/// distinct from `observed`, which marks non-missing real entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub width: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    pub valid: Vec<bool>,
    pub context_len: Vec<usize>,
    pub features: Vec<[f64; 6]>,
}

impl Batch {
    /// Pads `rows` to the longest row. Padding holds zeros and is marked
    /// invalid and unobserved.
    pub fn new(rows: &[BatchRow]) -> Batch {
        let width = rows.iter().map(|r| r.context.len() + r.horizon.len()).max().unwrap_or(0);
        let n = rows.len();
        let mut b = Batch {
            rows: n,
            width,
            times: vec![0.0; n * width],
            values: vec![0.0; n * width],
            observed: vec![false; n * width],
            valid: vec![false; n * width],
            context_len: rows.iter().map(|r| r.context.len()).collect(),
            features: rows.iter().map(|r| r.features).collect(),
        };
        for (i, r) in rows.iter().enumerate() {
            let base = i * width;
            for (j, seg) in [&r.context, &r.horizon].into_iter().flat_map(|s| (0..s.len()).map(move |k| (s, k))).enumerate() {
                let (s, k) = seg;
                b.times[base + j] = s.times[k];
                b.values[base + j] = s.values[k];
                b.observed[base + j] = s.observed[k];
                b.valid[base + j] = true;
            }
        }
        b
    }

    /// Recovers row `i` using only valid entries.
    pub fn row(&self, i: usize) -> BatchRow {
        let base = i * self.width;
        let len = self.valid[base..base + self.width].iter().take_while(|&&v| v).count();
        let c = self.context_len[i];
        let seg = |a: usize, b: usize| Segment {
            times: self.times[base + a..base + b].to_vec(),
            values: self.values[base + a..base + b].to_vec(),
            observed: self.observed[base + a..base + b].to_vec(),
        };
        BatchRow { context: seg(0, c), horizon: seg(c, len), features: self.features[i] }
    }

    pub fn valid_count(&self, i: usize) -> usize {
        self.valid[i * self.width..(i + 1) * self.width].iter().filter(|&&v| v).count()
    }
}

/// Splits rows into consecutive padded batches of at most `max_batch` rows.
pub fn batch(rows: &[BatchRow], max_batch: usize) -> Vec<Batch> {
    rows.chunks(max_batch.max(1)).map(Batch::new).collect()
}
