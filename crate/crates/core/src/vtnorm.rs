//! Value and time normalization plus the static feature vector.
//!
//! Values go through two standardizations: first with per-channel statistics
//! of the training split, then with the instance's own statistics. Time gaps
//! are divided by the smallest gap in the instance, so the normalized grid
//! has unit minimum spacing and starts at zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{ChannelStats, IrregularSeries, Segment};

/// Floor applied to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Normalized gaps are snapped to multiples of this step, which keeps every
/// cumulative time exactly representable (for spans below 2^20 units); the
/// unit gap stays exactly 1.
pub const TIME_QUANTUM: f64 = 1.0 / 4_294_967_296.0;

pub fn population_stats(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Per-channel mean and population std over observed training values.
pub fn fit_global(train: &[IrregularSeries]) -> Result<BTreeMap<String, ChannelStats>> {
    if train.is_empty() {
        return Err(Error::Data("cannot fit global statistics on an empty split".into()));
    }
    let mut by_channel: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in train {
        by_channel.entry(s.channel.clone()).or_default().extend(s.observed_values());
    }
    by_channel
        .into_iter()
        .map(|(ch, v)| match population_stats(v.into_iter()) {
            Some((mean, std)) => Ok((ch, ChannelStats { mean, std: std.max(SIGMA_FLOOR) })),
            None => Err(Error::Data(format!("channel {ch} has no observed values in the training split"))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticFeatures {
    pub mu_g: f64,
    pub sigma_g: f64,
    pub mu_i: f64,
    pub sigma_i: f64,
    pub omega_g: f64,
    pub omega_i: f64,
}

impl StaticFeatures {
    pub fn to_array(&self) -> [f64; 6] {
        [self.mu_g, self.sigma_g, self.mu_i, self.sigma_i, self.omega_g, self.omega_i]
    }
}

/// Returns `((x − μ_g)/σ_g − μ_i)/σ_i` for observed entries (0 elsewhere)
/// together with μ_i and σ_i.
pub fn normalize_values(values: &[f64], observed: &[bool], mu_g: f64, sigma_g: f64) -> Result<(Vec<f64>, f64, f64)> {
    let sigma_g = sigma_g.max(SIGMA_FLOOR);
    let global: Vec<f64> = values.iter().map(|x| (x - mu_g) / sigma_g).collect();
    let (mu_i, sigma_i) = population_stats(global.iter().zip(observed).filter(|(_, &o)| o).map(|(&g, _)| g))
        .ok_or_else(|| Error::Data("no observed values to normalize".into()))?;
    let sigma_i = sigma_i.max(SIGMA_FLOOR);
    let out = global.iter().zip(observed).map(|(&g, &o)| if o { (g - mu_i) / sigma_i } else { 0.0 }).collect();
    Ok((out, mu_i, sigma_i))
}

pub fn denormalize(values: &[f64], f: &StaticFeatures) -> Vec<f64> {
    values.iter().map(|v| (v * f.sigma_i + f.mu_i) * f.sigma_g + f.mu_g).collect()
}

/// Inverse of [`denormalize`], applied to values that did not take part in
/// fitting the instance statistics (horizon targets, raw-space predictions).
pub fn renormalize(values: &[f64], f: &StaticFeatures) -> Vec<f64> {
    values.iter().map(|x| ((x - f.mu_g) / f.sigma_g - f.mu_i) / f.sigma_i).collect()
}

fn quantize(x: f64) -> f64 {
    (x / TIME_QUANTUM).round() * TIME_QUANTUM
}

/// Maps raw timestamps onto the normalized grid of an instance; continuing a
/// map past the context places horizon times on the same grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeMap {
    pub omega: f64,
    pub last_raw: f64,
    pub last_mapped: f64,
}

impl TimeMap {
    pub fn advance(&mut self, t: f64) -> f64 {
        self.last_mapped += quantize((t - self.last_raw) / self.omega);
        self.last_raw = t;
        self.last_mapped
    }

    pub fn map(&self, times: &[f64]) -> Vec<f64> {
        let mut m = *self;
        times.iter().map(|&t| m.advance(t)).collect()
    }
}

/// Normalized timestamps and ω_i. A single timestamp maps to `[0]` with
/// ω_i = ω_g.
pub fn normalize_times(times: &[f64], omega_g: f64) -> Result<(Vec<f64>, f64)> {
    let (out, map) = normalize_times_map(times, omega_g)?;
    Ok((out, map.omega))
}

fn normalize_times_map(times: &[f64], omega_g: f64) -> Result<(Vec<f64>, TimeMap)> {
    let first = *times.first().ok_or_else(|| Error::Data("no timestamps".into()))?;
    let omega = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if omega <= 0.0 {
        return Err(Error::Data("timestamps not strictly increasing".into()));
    }
    let omega = if omega.is_finite() { omega } else { omega_g };
    let mut map = TimeMap { omega, last_raw: first, last_mapped: 0.0 };
    let mut out = vec![0.0];
    out.extend(times[1..].iter().map(|&t| map.advance(t)));
    Ok((out, map))
}

/// A context after normalization, plus what is needed to map its horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedInstance {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    pub features: StaticFeatures,
    pub time_map: TimeMap,
    /// false when the instance was passed through the identity normalizer
    pub scaled: bool,
}

impl NormalizedInstance {
    pub fn segment(&self) -> Segment {
        Segment { times: self.times.clone(), values: self.values.clone(), observed: self.observed.clone() }
    }

    /// Horizon timestamps and values in this instance's coordinates.
    pub fn map_horizon(&self, horizon: &Segment) -> Segment {
        let times = self.time_map.map(&horizon.times);
        let values = if self.scaled {
            renormalize(&horizon.values, &self.features)
        } else {
            horizon.values.clone()
        };
        let values = values.into_iter().zip(&horizon.observed).map(|(v, &o)| if o { v } else { 0.0 }).collect();
        Segment { times, values, observed: horizon.observed.clone() }
    }

    /// Model-space predictions back to raw units.
    pub fn to_raw(&self, values: &[f64]) -> Vec<f64> {
        if self.scaled {
            denormalize(values, &self.features)
        } else {
            values.to_vec()
        }
    }
}

/// Full value/time normalization of one context.
pub fn normalize_instance(context: &Segment, global: ChannelStats, omega_g: f64) -> Result<NormalizedInstance> {
    let (values, mu_i, sigma_i) = normalize_values(&context.values, &context.observed, global.mean, global.std)?;
    let (times, time_map) = normalize_times_map(&context.times, omega_g)?;
    Ok(NormalizedInstance {
        times,
        values,
        observed: context.observed.clone(),
        features: StaticFeatures {
            mu_g: global.mean,
            sigma_g: global.std.max(SIGMA_FLOOR),
            mu_i,
            sigma_i,
            omega_g,
            omega_i: time_map.omega,
        },
        time_map,
        scaled: true,
    })
}

/// Identity normalizer used when value/time normalization is ablated: raw
/// values, times re-anchored to zero in raw seconds. Features are still
/// computed so metrics can be reported on the normalized scale.
pub fn passthrough_instance(context: &Segment, global: ChannelStats, omega_g: f64) -> Result<NormalizedInstance> {
    let mut inst = normalize_instance(context, global, omega_g)?;
    let first = context.times[0];
    inst.times = context.times.iter().map(|t| t - first).collect();
    inst.values = context.values.iter().zip(&context.observed).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
    let last = *context.times.last().expect("non-empty");
    inst.time_map = TimeMap { omega: 1.0, last_raw: last, last_mapped: last - first };
    inst.scaled = false;
    Ok(inst)
}

fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Log/symlog transform then z-scoring of the static features, fitted on the
/// training corpus. Standard deviations are floored at 1 so a feature that is
/// constant in training (typically ω_g) stays on a log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStandardizer {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl Default for FeatureStandardizer {
    fn default() -> Self {
        Self { mean: [0.0; 6], std: [1.0; 6] }
    }
}

impl FeatureStandardizer {
    pub fn transform_raw(f: &StaticFeatures) -> [f64; 6] {
        [
            symlog(f.mu_g),
            f.sigma_g.ln(),
            symlog(f.mu_i),
            f.sigma_i.ln(),
            f.omega_g.ln(),
            f.omega_i.ln(),
        ]
    }

    pub fn fit(features: &[StaticFeatures]) -> Self {
        let mut out = Self::default();
        if features.is_empty() {
            return out;
        }
        let rows: Vec<[f64; 6]> = features.iter().map(Self::transform_raw).collect();
        for k in 0..6 {
            let (m, s) = population_stats(rows.iter().map(|r| r[k])).expect("non-empty");
            out.mean[k] = m;
            out.std[k] = s.max(1.0);
        }
        out
    }

    pub fn standardize(&self, f: &StaticFeatures) -> [f64; 6] {
        let r = Self::transform_raw(f);
        std::array::from_fn(|k| (r[k] - self.mean[k]) / self.std[k])
    }

    pub fn to_array(&self) -> [f64; 12] {
        std::array::from_fn(|k| if k < 6 { self.mean[k] } else { self.std[k - 6] })
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        Self { mean: std::array::from_fn(|k| a[k]), std: std::array::from_fn(|k| a[k + 6]) }
    }
}
