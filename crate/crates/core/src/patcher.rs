//! Count-based patching, latent IVP solvers, and the patch encoder/decoder.
//!
//! Each observed point is lifted to a latent state and evolved backward to
//! its patch's first timestamp; an inference network turns every evolved
//! state into a diagonal Gaussian, and the per-patch components are merged
//! into one moment-matched Gaussian. Decoding evolves a patch latent forward
//! to each target time and maps it back to a value.

use std::str::FromStr;

use flextsf_tensor::{ParamId, ParamVars, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::series::Segment;

/// Softplus output floor for posterior standard deviations.
pub const SIGMA_MIN: f64 = 1e-6;
/// Floor on the moment-matched variance.
pub const VAR_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    pub tau: f64,
}

impl Patch {
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

/// Consecutive groups of `p` points; patches without any observed point are
/// dropped.
pub fn segment(seq: &Segment, p: usize) -> Result<Vec<Patch>> {
    if seq.is_empty() {
        return Err(Error::Data("cannot patch an empty sequence".into()));
    }
    if p == 0 {
        return Err(Error::Config("patch length must be positive".into()));
    }
    Ok((0..seq.len())
        .step_by(p)
        .map(|s| {
            let e = (s + p).min(seq.len());
            Patch {
                times: seq.times[s..e].to_vec(),
                values: seq.values[s..e].to_vec(),
                observed: seq.observed[s..e].to_vec(),
                tau: seq.times[s],
            }
        })
        .filter(|patch| patch.observed_count() > 0)
        .collect())
}

// ── Solvers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    ResnetFlow,
    Rk4Ode,
}

impl FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet-flow" => Ok(SolverKind::ResnetFlow),
            "rk4-ode" => Ok(SolverKind::Rk4Ode),
            other => Err(Error::Config(format!("unknown solver kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::ResnetFlow => "resnet-flow",
            SolverKind::Rk4Ode => "rk4-ode",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvpSolverConfig {
    pub kind: SolverKind,
    pub latent_dim: usize,
    pub hidden: usize,
    pub steps_per_unit: f64,
}

/// Learned map `(z, dt) ↦ z(t + dt)`.
///
/// The flow kind rotates every latent coordinate pair by `Ω(ρ²)·dt`, where
/// `ρ²` holds the squared pair radii. Rotations leave the radii unchanged,
/// so the angular velocity is constant along a trajectory and the map obeys
/// `F(F(z, a), b) = F(z, a + b)`; in particular `F(z, 0) = z` and `−dt`
/// inverts `dt`. The ODE kind integrates `dz/dt = tanh(zW₁ + b₁)W₂ + b₂`
/// with fixed-step RK4.
#[derive(Debug, Clone)]
pub struct IvpSolver {
    pub config: IvpSolverConfig,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    /// base angular velocity (flow) or field bias (ODE)
    b2: ParamId,
}

impl IvpSolver {
    pub fn new(init: &mut Init<'_>, name: &str, config: IvpSolverConfig) -> Result<Self> {
        let d = config.latent_dim;
        if d % 2 != 0 && config.kind == SolverKind::ResnetFlow {
            return Err(Error::Config(format!("flow solver needs an even latent dimension, got {d}")));
        }
        let h = config.hidden;
        match config.kind {
            SolverKind::ResnetFlow => {
                let pairs = d / 2;
                let w1 = init.normal(&format!("{name}.w1"), &[pairs, h], 1.0 / (pairs as f64).sqrt())?;
                let b1 = init.constant(&format!("{name}.b1"), &[h], 0.0)?;
                let w2 = init.normal(&format!("{name}.w2"), &[h, pairs], 0.1 / (h as f64).sqrt())?;
                // base frequencies spread over a few octaves of the unit grid
                let omega: Vec<f64> =
                    (0..pairs).map(|j| std::f64::consts::PI * 2f64.powf(-(j as f64) * 5.0 / pairs as f64)).collect();
                let b2 = init.values(&format!("{name}.omega"), &[pairs], omega)?;
                Ok(Self { config, w1, b1, w2, b2 })
            }
            SolverKind::Rk4Ode => {
                let w1 = init.normal(&format!("{name}.w1"), &[d, h], 1.0 / (d as f64).sqrt())?;
                let b1 = init.constant(&format!("{name}.b1"), &[h], 0.0)?;
                let w2 = init.normal(&format!("{name}.w2"), &[h, d], 0.1 / (h as f64).sqrt())?;
                let b2 = init.constant(&format!("{name}.b2"), &[d], 0.0)?;
                Ok(Self { config, w1, b1, w2, b2 })
            }
        }
    }

    /// Evolves each row of `z` (`[rows, d]`) by its own `dt`.
    pub fn solve(&self, tape: &mut Tape, p: &ParamVars, z: Var, dt: &[f64]) -> Result<Var> {
        let rows = tape.shape(z)[0];
        if dt.len() != rows {
            return Err(Error::Data(format!("{} time offsets for {rows} latent rows", dt.len())));
        }
        if tape.value(z).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent state entering the solver".into()));
        }
        match self.config.kind {
            SolverKind::ResnetFlow => {
                let sq = tape.square(z);
                let radii = tape.pair_sum(sq)?;
                let pre = tape.matmul(radii, p.get(self.w1))?;
                let pre = tape.add(pre, p.get(self.b1))?;
                let act = tape.tanh(pre);
                let omega = tape.matmul(act, p.get(self.w2))?;
                let omega = tape.add(omega, p.get(self.b2))?;
                let dt = tape.constant(dt.to_vec(), &[rows, 1])?;
                let angle = tape.mul(omega, dt)?;
                Ok(tape.rotate_pairs(z, angle)?)
            }
            SolverKind::Rk4Ode => {
                let (w1, b1, w2, b2) = (p.get(self.w1), p.get(self.b1), p.get(self.w2), p.get(self.b2));
                let field = |tape: &mut Tape, z: Var| -> Result<Var> {
                    let a = tape.matmul(z, w1)?;
                    let a = tape.add(a, b1)?;
                    let a = tape.tanh(a);
                    let f = tape.matmul(a, w2)?;
                    Ok(tape.add(f, b2)?)
                };
                rk4_integrate(tape, z, dt, self.config.steps_per_unit, &field)
            }
        }
    }
}

/// Fixed-step RK4 of `dz/dt = field(z)` with `ceil(|dt|·steps_per_unit)`
/// steps for each row. Rows needing fewer steps take zero-length steps once
/// they are done, which leaves them unchanged.
pub fn rk4_integrate(
    tape: &mut Tape,
    z: Var,
    dt: &[f64],
    steps_per_unit: f64,
    field: &dyn Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let rows = tape.shape(z)[0];
    let steps: Vec<usize> = dt.iter().map(|d| (d.abs() * steps_per_unit).ceil() as usize).collect();
    let max_steps = steps.iter().copied().max().unwrap_or(0);
    let mut z = z;
    for k in 0..max_steps {
        let h: Vec<f64> = dt.iter().zip(&steps).map(|(&d, &n)| if k < n { d / n as f64 } else { 0.0 }).collect();
        let half = tape.constant(h.iter().map(|x| x / 2.0).collect(), &[rows, 1])?;
        let full = tape.constant(h.clone(), &[rows, 1])?;
        let sixth = tape.constant(h.iter().map(|x| x / 6.0).collect(), &[rows, 1])?;
        let k1 = field(tape, z)?;
        let s = tape.mul(k1, half)?;
        let z2 = tape.add(z, s)?;
        let k2 = field(tape, z2)?;
        let s = tape.mul(k2, half)?;
        let z3 = tape.add(z, s)?;
        let k3 = field(tape, z3)?;
        let s = tape.mul(k3, full)?;
        let z4 = tape.add(z, s)?;
        let k4 = field(tape, z4)?;
        let k23 = tape.add(k2, k3)?;
        let k23 = tape.scale(k23, 2.0);
        let acc = tape.add(k1, k23)?;
        let acc = tape.add(acc, k4)?;
        let step = tape.mul(acc, sixth)?;
        z = tape.add(z, step)?;
    }
    Ok(z)
}

// ── Posteriors ───────────────────────────────────────────────────────

/// Per-point Gaussian components and their moment-matched aggregate, as
/// plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPosterior {
    pub component_means: Vec<Vec<f64>>,
    pub component_stds: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PatchPosterior {
    /// Moment-matched single Gaussian of an equally weighted mixture.
    pub fn from_components(means: Vec<Vec<f64>>, stds: Vec<Vec<f64>>) -> Self {
        let n = means.len() as f64;
        let d = means.first().map_or(0, Vec::len);
        let mean: Vec<f64> = (0..d).map(|k| means.iter().map(|m| m[k]).sum::<f64>() / n).collect();
        let var = (0..d)
            .map(|k| {
                let spread = means.iter().map(|m| (m[k] - mean[k]).powi(2)).sum::<f64>() / n;
                let within = stds.iter().map(|s| s[k] * s[k]).sum::<f64>() / n;
                (within + spread).max(VAR_MIN)
            })
            .collect();
        Self { component_means: means, component_stds: stds, mean, var }
    }

    pub fn kl_to_prior(&self) -> f64 {
        kl_to_standard_normal(&self.mean, &self.var)
    }
}

/// `KL(N(mean, diag var) ‖ N(0, I))`.
pub fn kl_to_standard_normal(mean: &[f64], var: &[f64]) -> f64 {
    mean.iter().zip(var).map(|(m, v)| 0.5 * (m * m + v - 1.0 - v.ln())).sum()
}

/// Tape form of [`kl_to_standard_normal`], one value per row: `[rows, 1]`.
pub fn kl_rows(tape: &mut Tape, mean: Var, var: Var) -> Result<Var> {
    let m2 = tape.square(mean);
    let lv = tape.log(var);
    let a = tape.add(m2, var)?;
    let a = tape.sub(a, lv)?;
    let a = tape.add_scalar(a, -1.0);
    let s = tape.sum_last(a);
    Ok(tape.scale(s, 0.5))
}

/// Aggregated posteriors of a set of patches on the tape, one row each.
#[derive(Debug, Clone, Copy)]
pub struct EncodedPatches {
    pub mean: Var,
    pub var: Var,
    /// per-patch KL to the prior, `[patches, 1]`
    pub kl: Var,
    /// representation passed on: a reparameterized sample or the mean
    pub rep: Var,
    /// per-point component means and stds, `[points, d]`
    pub component_mean: Var,
    pub component_std: Var,
}

/// Standard normal noise for reparameterized sampling, `[patches, d]`
/// row-major; `None` selects the aggregate mean.
pub type Noise<'a> = Option<&'a [f64]>;

fn aggregate(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    owner: &[usize],
    patches: usize,
    noise: Noise<'_>,
) -> Result<EncodedPatches> {
    let points = owner.len();
    let mut counts = vec![0usize; patches];
    for &o in owner {
        counts[o] += 1;
    }
    let mut avg = vec![0.0; patches * points];
    for (i, &o) in owner.iter().enumerate() {
        avg[o * points + i] = 1.0 / counts[o] as f64;
    }
    let avg = tape.constant(avg, &[patches, points])?;
    let mean = tape.matmul(avg, mu)?;
    let spread = tape.gather_rows(mean, owner)?;
    let centered = tape.sub(mu, spread)?;
    let c2 = tape.square(centered);
    let s2 = tape.square(sigma);
    let second = tape.add(s2, c2)?;
    let var = tape.matmul(avg, second)?;
    let var = tape.clamp_min(var, VAR_MIN);
    let kl = kl_rows(tape, mean, var)?;
    let rep = match noise {
        Some(eps) => {
            let d = tape.shape(mean)[1];
            if eps.len() != patches * d {
                return Err(Error::Data(format!("noise has {} entries, expected {}", eps.len(), patches * d)));
            }
            let eps = tape.constant(eps.to_vec(), &[patches, d])?;
            let sd = tape.sqrt(var);
            let scaled = tape.mul(sd, eps)?;
            tape.add(mean, scaled)?
        }
        None => mean,
    };
    Ok(EncodedPatches { mean, var, kl, rep, component_mean: mu, component_std: sigma })
}

/// Maps ends of an encoder network output `[rows, 2d]` to `(μ, σ)`.
fn split_moments(tape: &mut Tape, out: Var, d: usize) -> Result<(Var, Var)> {
    let mu = tape.slice_cols(out, 0, d)?;
    let raw = tape.slice_cols(out, d, d)?;
    let sd = tape.softplus(raw);
    Ok((mu, tape.add_scalar(sd, SIGMA_MIN)))
}

// ── IVP encoder / decoder ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub latent_dim: usize,
    input: Linear,
    solver: IvpSolver,
    infer_hidden: Linear,
    infer_out: Linear,
}

impl PatchEncoder {
    pub fn new(init: &mut Init<'_>, solver: IvpSolverConfig, infer_hidden: usize) -> Result<Self> {
        let d = solver.latent_dim;
        Ok(Self {
            latent_dim: d,
            input: init.linear("enc.in", 1, d)?,
            solver: IvpSolver::new(init, "enc.solver", solver)?,
            infer_hidden: init.linear("enc.infer.h", d, infer_hidden)?,
            infer_out: init.linear_scaled("enc.infer.out", infer_hidden, 2 * d, 0.5)?,
        })
    }

    /// Encodes every patch; unobserved points are skipped. `noise` holds one
    /// standard normal row per patch when sampling.
    pub fn encode(&self, tape: &mut Tape, p: &ParamVars, patches: &[&Patch], noise: Noise<'_>) -> Result<EncodedPatches> {
        let mut xs = Vec::new();
        let mut dts = Vec::new();
        let mut owner = Vec::new();
        for (k, patch) in patches.iter().enumerate() {
            if patch.observed_count() == 0 {
                return Err(Error::Data(format!("patch {k} has no observed points")));
            }
            for i in 0..patch.len() {
                if patch.observed[i] {
                    xs.push(patch.values[i]);
                    dts.push(patch.tau - patch.times[i]);
                    owner.push(k);
                }
            }
        }
        let n = xs.len();
        let x = tape.constant(xs, &[n, 1])?;
        let z = self.input.forward(tape, p, x)?;
        let z0 = self.solver.solve(tape, p, z, &dts)?;
        let h = self.infer_hidden.forward(tape, p, z0)?;
        let h = tape.tanh(h);
        let out = self.infer_out.forward(tape, p, h)?;
        let (mu, sigma) = split_moments(tape, out, self.latent_dim)?;
        aggregate(tape, mu, sigma, &owner, patches.len(), noise)
    }

    /// Plain-value posterior of one patch (inference mode).
    pub fn posterior(&self, p_store: &flextsf_tensor::ParamStore, patch: &Patch) -> Result<PatchPosterior> {
        let mut tape = Tape::new();
        let p = p_store.register(&mut tape, false);
        let enc = self.encode(&mut tape, &p, &[patch], None)?;
        let d = self.latent_dim;
        let rows = |v: &[f64]| v.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let mut post = PatchPosterior::from_components(
            rows(tape.value(enc.component_mean)),
            rows(tape.value(enc.component_std)),
        );
        post.mean = tape.value(enc.mean).to_vec();
        post.var = tape.value(enc.var).to_vec();
        Ok(post)
    }
}

/// A request to decode one latent row at a set of times measured from its
/// patch start.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTarget {
    /// row of the latent matrix to decode from
    pub source: usize,
    pub tau_start: f64,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PatchDecoder {
    solver: IvpSolver,
    output: Linear,
}

impl PatchDecoder {
    pub fn new(init: &mut Init<'_>, solver: IvpSolverConfig) -> Result<Self> {
        Ok(Self {
            solver: IvpSolver::new(init, "dec.solver", solver)?,
            output: init.linear("dec.out", solver.latent_dim, 1)?,
        })
    }

    /// Predictions for all targets concatenated in order, `[Σ times, 1]`.
    pub fn decode(&self, tape: &mut Tape, p: &ParamVars, latents: Var, targets: &[DecodeTarget]) -> Result<Var> {
        let mut src = Vec::new();
        let mut dts = Vec::new();
        for t in targets {
            for &time in &t.times {
                src.push(t.source);
                dts.push(time - t.tau_start);
            }
        }
        let z = tape.gather_rows(latents, &src)?;
        let z = self.solver.solve(tape, p, z, &dts)?;
        self.output.forward(tape, p, z)
    }
}

// ── Flat ablation ────────────────────────────────────────────────────

/// Replacement patcher that ignores within-patch timestamps: a zero-padded
/// length-`p` value vector goes through one linear map to `(μ, σ)`, and a
/// linear map from the latent produces `p` values read off by position.
#[derive(Debug, Clone)]
pub struct FlatPatcher {
    pub patch_len: usize,
    pub latent_dim: usize,
    encode: Linear,
    decode: Linear,
}

impl FlatPatcher {
    pub fn new(init: &mut Init<'_>, patch_len: usize, latent_dim: usize) -> Result<Self> {
        Ok(Self {
            patch_len,
            latent_dim,
            encode: init.linear("flat.enc", patch_len, 2 * latent_dim)?,
            decode: init.linear("flat.dec", latent_dim, patch_len)?,
        })
    }

    pub fn encode(&self, tape: &mut Tape, p: &ParamVars, patches: &[&Patch], noise: Noise<'_>) -> Result<EncodedPatches> {
        let k = patches.len();
        let mut v = vec![0.0; k * self.patch_len];
        for (r, patch) in patches.iter().enumerate() {
            for i in 0..patch.len().min(self.patch_len) {
                if patch.observed[i] {
                    v[r * self.patch_len + i] = patch.values[i];
                }
            }
        }
        let x = tape.constant(v, &[k, self.patch_len])?;
        let out = self.encode.forward(tape, p, x)?;
        let (mu, sigma) = split_moments(tape, out, self.latent_dim)?;
        let owner: Vec<usize> = (0..k).collect();
        aggregate(tape, mu, sigma, &owner, k, noise)
    }

    /// Targets are read by position: the j-th target time takes output j.
    pub fn decode(&self, tape: &mut Tape, p: &ParamVars, latents: Var, targets: &[DecodeTarget]) -> Result<Var> {
        let rows = tape.shape(latents)[0];
        let out = self.decode.forward(tape, p, latents)?;
        let flat = tape.reshape(out, &[rows * self.patch_len, 1])?;
        let idx: Vec<usize> = targets
            .iter()
            .flat_map(|t| (0..t.times.len()).map(move |j| t.source * self.patch_len + j.min(self.patch_len - 1)))
            .collect();
        Ok(tape.gather_rows(flat, &idx)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> Segment {
        Segment { times: (0..n).map(|i| i as f64).collect(), values: vec![0.5; n], observed: vec![true; n] }
    }

    #[test]
    fn patch_sizes() {
        let sizes: Vec<usize> = segment(&seq(10), 4).unwrap().iter().map(Patch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(segment(&seq(4), 8).unwrap().len(), 1);
        let s = seq(10);
        assert_eq!(segment(&s, 4).unwrap()[1].tau, s.times[4]);
        assert!(segment(&Segment::default(), 4).is_err());
    }

    #[test]
    fn fully_missing_patch_dropped() {
        let mut s = seq(12);
        for o in &mut s.observed[4..8] {
            *o = false;
        }
        let taus: Vec<f64> = segment(&s, 4).unwrap().iter().map(|p| p.tau).collect();
        assert_eq!(taus, vec![0.0, 8.0]);
    }

    #[test]
    fn mixture_of_one_is_the_component() {
        let post = PatchPosterior::from_components(vec![vec![0.3, -1.0]], vec![vec![0.5, 2.0]]);
        assert_eq!(post.mean, vec![0.3, -1.0]);
        assert!((post.var[0] - 0.25).abs() < 1e-15 && (post.var[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_to_standard_normal(&[0.0], &[1.0]), 0.0);
        assert!((kl_to_standard_normal(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }
}
