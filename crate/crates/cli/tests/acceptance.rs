//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=6,8` runs a subset.
//!
//! Criteria 6-9 train real models on one core; the whole suite takes about
//! half an hour.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use flextsf::attention::{rotary_modulate, AttentionConfig, AttentionSequence, AttentionStack, NodeKind, RotaryConfig};
use flextsf::experiment::{few_shot, run_classic, run_pretrain, zero_shot, EvalReport, RunOptions};
use flextsf::layers::Init;
use flextsf::model::{gaussian_nll, HALF_LN_TWO_PI};
use flextsf::patcher::{kl_rows, kl_to_standard_normal, rk4_integrate, IvpSolver, IvpSolverConfig, PatchPosterior, SolverKind};
use flextsf::series::{make_synthetic, BatchRow, IrregularSeries, Segment, SynthConfig, SynthKind};
use flextsf::train::{LrSchedule, TrainRegime};
use flextsf::vtnorm::{self, denormalize, fit_global, normalize_times};
use flextsf::{AblationFlags, FlexTsf, ModelConfig, SamplingMode};
use flextsf_tensor::rng::{self, Rng, RngState, StreamRng};
use flextsf_tensor::{ParamStore, Tape};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fmt_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ── shared fixtures ──────────────────────────────────────────────────

fn tiny_config() -> ModelConfig {
    ModelConfig { latent_dim: 8, heads: 2, head_dim: 4, solver_hidden: 8, infer_hidden: 8, ..ModelConfig::classic() }
}

fn segment(n: usize, t0: f64, seed: u64, missing: &[usize]) -> Segment {
    let mut r = RngState::new(seed).stream(&[rng::tag("segment")]);
    let mut t = t0;
    let mut times = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            t += 1.0 + (r.random_range(0..3u32) as f64) * 0.5;
        }
        times.push(t);
    }
    let observed: Vec<bool> = (0..n).map(|i| !missing.contains(&i)).collect();
    let values =
        times.iter().zip(&observed).map(|(t, &o)| if o { (0.7 * t).sin() + 0.1 * rng::standard_normal(&mut r) } else { 0.0 }).collect();
    Segment { times, values, observed }
}

fn row(context_points: usize, horizon_points: usize, seed: u64) -> BatchRow {
    let context = segment(context_points, 0.0, seed, &[3]);
    let start = context.times.last().unwrap() + 1.0;
    let horizon = segment(horizon_points, start, seed + 1, &[5]);
    BatchRow { context, horizon, features: [0.3, -0.2, 0.5, 0.1, -0.4, 0.2] }
}

/// Budget shared by the classic-regime criteria.
fn classic_regime(seed: u64) -> TrainRegime {
    TrainRegime { lr: 1e-3, batch_size: 32, epochs: 20, ..TrainRegime::classic(seed) }
}

fn classic_opts() -> RunOptions {
    RunOptions { windows_per_series: 2, ..RunOptions::default() }
}

#[derive(Default)]
struct Shared {
    /// criterion 6, seed 1: the drop-masked base model's test MSE
    drop_masked_base: Option<f64>,
    /// criterion 7: the sine-family model pre-trained with VT-Norm
    pretrained: Option<FlexTsf>,
}

// ── 1 ────────────────────────────────────────────────────────────────

fn elbo_value(model: &FlexTsf, r: &BatchRow, trainable: bool) -> (f64, Tape, flextsf_tensor::ParamVars) {
    let mut tape = Tape::new();
    let p = model.params.register(&mut tape, trainable);
    let mut noise = RngState::new(99).stream(&[rng::tag("fd")]);
    let terms = model.loss(&mut tape, &p, r, Some(&mut noise)).unwrap();
    let v = tape.item(terms.total);
    if trainable {
        tape.backward(terms.total).unwrap();
    }
    (v, tape, p)
}

fn gradient_fidelity(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let r = row(8, 8, 3);
    let mut worst_all = 0.0f64;
    let mut scalars = 0;
    for sampling in [SamplingMode::Sample, SamplingMode::Mean] {
        let mut m = FlexTsf::new(ModelConfig { sampling, ..tiny_config() }, 5).map_err(fmt_err)?;
        let (_, tape, p) = elbo_value(&m, &r, true);
        let analytic = m.params.gradients(&tape, &p);
        for a in 0..m.params.len() {
            for i in 0..analytic[a].len() {
                let orig = m.params.as_slice()[a].values[i];
                m.params.as_mut_slice()[a].values[i] = orig + H;
                let up = elbo_value(&m, &r, false).0;
                m.params.as_mut_slice()[a].values[i] = orig - H;
                let down = elbo_value(&m, &r, false).0;
                m.params.as_mut_slice()[a].values[i] = orig;
                let numeric = (up - down) / (2.0 * H);
                let g = analytic[a][i];
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(FLOOR);
                ensure(rel < 1e-4, format!("{}[{i}]: relative error {rel:e}", m.params.as_slice()[a].name))?;
                worst_all = worst_all.max(rel);
                scalars += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{scalars} scalars (sample + mean modes), worst relative error {worst_all:.2e}, {secs:.1}s"))
}

// ── 2 ────────────────────────────────────────────────────────────────

fn fuzz_series(r: &mut StreamRng) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..200usize);
    let unit = 10f64.powf(r.random_range(-2.0..4.0));
    let mut t = r.random_range(-1e3..1e3);
    let mut times = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            t += unit * r.random_range(0.05..5.0);
        }
        times.push(t);
    }
    let scale = 10f64.powf(r.random_range(-3.0..3.0));
    let offset = r.random_range(-1e3..1e3);
    let values = (0..n).map(|_| offset + scale * rng::standard_normal(r)).collect();
    let mut observed: Vec<bool> = (0..n).map(|_| r.random::<f64>() > 0.3).collect();
    observed[0] = true;
    observed[n - 1] = true;
    (times, values, observed)
}

fn vtnorm_contract(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut r = RngState::new(2024).stream(&[rng::tag("acceptance-vtnorm")]);
    let (mut max_moment, mut max_round, mut max_affine, mut max_time) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..1000 {
        let (times, values, observed) = fuzz_series(&mut r);
        let mu_g = r.random_range(-500.0..500.0);
        let sigma_g = 10f64.powf(r.random_range(-1.0..2.0));
        let (norm, mu_i, sigma_i) = vtnorm::normalize_values(&values, &observed, mu_g, sigma_g).map_err(fmt_err)?;
        let obs: Vec<f64> = norm.iter().zip(&observed).filter(|(_, &o)| o).map(|(&v, _)| v).collect();
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let std = (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        max_moment = max_moment.max(mean.abs()).max((std - 1.0).abs());

        let f = vtnorm::StaticFeatures { mu_g, sigma_g, mu_i, sigma_i, omega_g: 1.0, omega_i: 1.0 };
        let back = denormalize(&norm, &f);
        for i in (0..back.len()).filter(|&i| observed[i]) {
            max_round = max_round.max((back[i] - values[i]).abs());
        }

        let (t, _) = normalize_times(&times, 3600.0).map_err(fmt_err)?;
        let min_gap = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        ensure(min_gap == 1.0, format!("case {case}: min gap {min_gap}"))?;

        let a = 10f64.powf(r.random_range(-2.0..2.0));
        let b = r.random_range(-1e3..1e3);
        let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let series = |vals: &[f64]| {
            let v = vals.iter().zip(&observed).map(|(&v, &o)| if o { v } else { f64::NAN }).collect();
            IrregularSeries::new("x", "c", times.clone(), v, observed.clone()).unwrap()
        };
        let g0 = fit_global(&[series(&values)]).map_err(fmt_err)?["c"];
        let g1 = fit_global(&[series(&mapped)]).map_err(fmt_err)?["c"];
        let (n0, ..) = vtnorm::normalize_values(&values, &observed, g0.mean, g0.std).map_err(fmt_err)?;
        let (n1, ..) = vtnorm::normalize_values(&mapped, &observed, g1.mean, g1.std).map_err(fmt_err)?;
        for (x, y) in n0.iter().zip(&n1) {
            max_affine = max_affine.max((x - y).abs());
        }

        let c = [60.0, 3600.0, 86_400.0, 0.001][case % 4];
        let scaled: Vec<f64> = times.iter().map(|x| x * c).collect();
        let (t2, _) = normalize_times(&scaled, 3600.0 * c).map_err(fmt_err)?;
        for (x, y) in t.iter().zip(&t2) {
            max_time = max_time.max((x - y).abs() / x.max(1.0));
        }
    }
    ensure(max_moment < 1e-6, format!("instance moments off by {max_moment:e}"))?;
    ensure(max_round < 1e-9, format!("round trip off by {max_round:e}"))?;
    ensure(max_affine < 1e-6, format!("affine equivariance off by {max_affine:e}"))?;
    ensure(max_time < 1e-9, format!("time-unit equivariance off by {max_time:e} (relative)"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "1000 series: moments {max_moment:.1e}, round trip {max_round:.1e}, min gap exactly 1, affine {max_affine:.1e}, time unit {max_time:.1e} rel, {secs:.1}s"
    ))
}

// ── 3 ────────────────────────────────────────────────────────────────

fn solve(store: &ParamStore, s: &IvpSolver, z: &[f64], dt: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.register(&mut tape, false);
    let zv = tape.constant(z.to_vec(), &[dt.len(), z.len() / dt.len()]).unwrap();
    let out = s.solve(&mut tape, &p, zv, dt).unwrap();
    tape.value(out).to_vec()
}

fn gaussian_rows(n: usize, seed: u64) -> Vec<f64> {
    let mut r = RngState::new(seed).stream(&[rng::tag("rows")]);
    (0..n).map(|_| 2.0 * rng::standard_normal(&mut r)).collect()
}

/// `exp(M)` by scaling and squaring of a truncated Taylor series.
fn expm(m: &[f64], d: usize) -> Vec<f64> {
    let norm: f64 = m.iter().map(|x| x.abs()).sum();
    let squarings = norm.log2().ceil().max(0.0) as u32 + 4;
    let s = 2f64.powi(squarings as i32);
    let a: Vec<f64> = m.iter().map(|x| x / s).collect();
    let mul = |x: &[f64], y: &[f64]| {
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                for j in 0..d {
                    out[i * d + j] += x[i * d + k] * y[k * d + j];
                }
            }
        }
        out
    };
    let mut result: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let mut term = result.clone();
    for n in 1..30 {
        term = mul(&term, &a).iter().map(|x| x / n as f64).collect();
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = mul(&result, &result);
    }
    result
}

fn solver_contracts(_: &mut Shared) -> Outcome {
    for kind in [SolverKind::ResnetFlow, SolverKind::Rk4Ode] {
        let mut store = ParamStore::new();
        let s = IvpSolver::new(&mut Init::new(&mut store, 1), "s", IvpSolverConfig { kind, latent_dim: 8, hidden: 16, steps_per_unit: 16.0 })
            .map_err(fmt_err)?;
        let z = gaussian_rows(40, 2);
        ensure(solve(&store, &s, &z, &[0.0; 5]) == z, format!("{kind}: dt = 0 is not the identity"))?;
    }

    let mut store = ParamStore::new();
    let flow = IvpSolver::new(
        &mut Init::new(&mut store, 3),
        "s",
        IvpSolverConfig { kind: SolverKind::ResnetFlow, latent_dim: 16, hidden: 16, steps_per_unit: 16.0 },
    )
    .map_err(fmt_err)?;
    let mut r = RngState::new(4).stream(&[rng::tag("dt")]);
    let z = gaussian_rows(50 * 16, 5);
    let dt: Vec<f64> = (0..50).map(|_| r.random_range(-20.0..20.0)).collect();
    let neg: Vec<f64> = dt.iter().map(|d| -d).collect();
    let back = solve(&store, &flow, &solve(&store, &flow, &z, &dt), &neg);
    let inv = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(inv < 1e-6, format!("flow inversion error {inv:e}"))?;

    let d = 6;
    let mut r = RngState::new(11).stream(&[rng::tag("field")]);
    let a: Vec<f64> = (0..d * d).map(|_| rng::standard_normal(&mut r) / (d as f64).sqrt()).collect();
    let dts = [-2.0, -1.3, -0.25, 0.1, 0.5, 1.0, 1.7, 2.0];
    let z0 = gaussian_rows(dts.len() * d, 12);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone(), &[d, d]).map_err(fmt_err)?;
    let zv = tape.constant(z0.clone(), &[dts.len(), d]).map_err(fmt_err)?;
    let field = |tape: &mut Tape, z| Ok(tape.matmul(z, av)?);
    let out = rk4_integrate(&mut tape, zv, &dts, 16.0, &field).map_err(fmt_err)?;
    let got = tape.value(out).to_vec();
    let mut worst = 0.0f64;
    for (row, &dt) in dts.iter().enumerate() {
        let e = expm(&a.iter().map(|x| x * dt).collect::<Vec<_>>(), d);
        let want: Vec<f64> = (0..d).map(|j| (0..d).map(|k| z0[row * d + k] * e[k * d + j]).sum()).collect();
        let num: f64 = (0..d).map(|j| (got[row * d + j] - want[j]).powi(2)).sum::<f64>().sqrt();
        let den: f64 = want.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    ensure(worst < 1e-6, format!("rk4 vs matrix exponential: relative error {worst:e}"))?;
    Ok(format!("identity exact for both solvers, inversion {inv:.1e}, rk4 vs expm {worst:.1e} for |dt| <= 2"))
}

// ── 4 ────────────────────────────────────────────────────────────────

const D: usize = 16;

fn attention_forward(
    store: &ParamStore,
    s: &AttentionStack,
    x: &[f64],
    tau: &[f64],
    kinds: &[NodeKind],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let p = store.register(&mut tape, false);
    let n = tau.len();
    let seq = AttentionSequence { nodes: tape.constant(x.to_vec(), &[n, D]).unwrap(), tau: tau.to_vec(), kinds: kinds.to_vec() };
    let mut logits = Vec::new();
    let out = s.forward(&mut tape, &p, &seq, Some(&mut logits)).unwrap();
    (tape.value(out).to_vec(), logits.iter().map(|&l| tape.value(l).to_vec()).collect())
}

fn attention_contracts(_: &mut Shared) -> Outcome {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig { heads: 2, head_dim: 8, layers: 2, ff_mult: 4, rotary: Some(RotaryConfig::default()) };
    let stack = AttentionStack::new(&mut Init::new(&mut store, 1), cfg).map_err(fmt_err)?;
    let n = 7;
    let mut kinds = vec![NodeKind::Patch; n];
    kinds[0] = NodeKind::Leader;
    kinds[n - 1] = NodeKind::Dummy;
    let tau = [0.0, 0.0, 3.0, 5.5, 8.0, 9.0, 12.0];
    let x = gaussian_rows(n * D, 2);
    let (base, _) = attention_forward(&store, &stack, &x, &tau, &kinds);
    for cut in 1..n {
        let mut y = x.clone();
        let mut r = RngState::new(cut as u64).stream(&[rng::tag("perturb")]);
        for v in &mut y[cut * D..] {
            *v += 10.0 * rng::standard_normal(&mut r);
        }
        let (out, _) = attention_forward(&store, &stack, &y, &tau, &kinds);
        ensure((0..cut * D).all(|i| (out[i] - base[i]).abs() <= 1e-12), format!("perturbing node {cut} leaked backwards"))?;
    }

    let mut r = RngState::new(6).stream(&[rng::tag("tau")]);
    let mut shift_err = 0.0f64;
    for trial in 0..20 {
        let mut t = vec![0.0];
        for _ in 1..n {
            let next = t.last().unwrap() + r.random_range(0.0..10.0);
            t.push(next);
        }
        let shift = r.random_range(-1e3..1e3);
        let shifted: Vec<f64> = t.iter().map(|v| v + shift).collect();
        let x = gaussian_rows(n * D, 100 + trial);
        let (_, a) = attention_forward(&store, &stack, &x, &t, &kinds);
        let (_, b) = attention_forward(&store, &stack, &x, &shifted, &kinds);
        for (la, lb) in a.iter().zip(&b) {
            for (u, v) in la.iter().zip(lb) {
                shift_err = shift_err.max((u - v).abs());
            }
        }
    }
    ensure(shift_err < 1e-9, format!("global shift moved logits by {shift_err:e}"))?;

    let mut norm_err = 0.0f64;
    for trial in 0..1000 {
        let len = 2 * r.random_range(1..32usize);
        let v: Vec<f64> = (0..len).map(|_| r.random_range(-100.0..100.0)).collect();
        let rope = RotaryConfig { base: 10_000.0, tau_scale: r.random_range(0.01..10.0) };
        let y = rotary_modulate(&v, r.random_range(-1e4..1e4) + trial as f64, &rope);
        let n0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n1 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        norm_err = norm_err.max((n0 - n1).abs() / n0.max(1.0));
    }
    ensure(norm_err <= 1e-12, format!("rotary changed a norm by {norm_err:e}"))?;
    Ok(format!("causality at 1e-12, shift invariance {shift_err:.1e}, rotary norm {norm_err:.1e}"))
}

// ── 5 ────────────────────────────────────────────────────────────────

fn elbo_structure(_: &mut Shared) -> Outcome {
    let mut r = RngState::new(8).stream(&[rng::tag("acceptance-kl")]);
    let mut min_kl = f64::INFINITY;
    for case in 0..1000 {
        let d = r.random_range(1..65usize);
        let n = r.random_range(1..9usize);
        let means = (0..n).map(|_| (0..d).map(|_| 5.0 * rng::standard_normal(&mut r)).collect()).collect();
        let stds = (0..n).map(|_| (0..d).map(|_| 10f64.powf(r.random_range(-4.0..1.5))).collect()).collect();
        let post = PatchPosterior::from_components(means, stds);
        let kl = post.kl_to_prior();
        ensure(kl >= 0.0, format!("case {case}: KL {kl}"))?;
        let mut tape = Tape::new();
        let m = tape.constant(post.mean.clone(), &[1, d]).map_err(fmt_err)?;
        let v = tape.constant(post.var.clone(), &[1, d]).map_err(fmt_err)?;
        let t = kl_rows(&mut tape, m, v).map_err(fmt_err)?;
        ensure(tape.item(t) >= 0.0, format!("case {case}: tape KL negative"))?;
        min_kl = min_kl.min(kl);
    }
    let self_kl = kl_to_standard_normal(&[0.0; 64], &[1.0; 64]);
    ensure(self_kl.abs() < 1e-12, format!("KL(prior || prior) = {self_kl:e}"))?;

    let half = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let m = FlexTsf::new(tiny_config(), 1).map_err(fmt_err)?;
    let sample = row(16, 16, 4);
    let mut tape = Tape::new();
    let p = m.params.register(&mut tape, false);
    let mut tf = m.forward_teacher_forced(&mut tape, &p, &sample, None, true).map_err(fmt_err)?;
    let base = m.loss_elbo(&mut tape, &tf, 1.0).map_err(fmt_err)?;
    let mut perturbed = tf.clone();
    for v in &mut perturbed.context_target {
        *v += 100.0;
    }
    let after = m.loss_elbo(&mut tape, &perturbed, 1.0).map_err(fmt_err)?;
    ensure(tape.item(after.nll) == tape.item(base.nll), "context targets changed the NLL")?;

    tf.horizon_target = tape.value(tf.horizon_pred).to_vec();
    let exact = m.loss_elbo(&mut tape, &tf, 1.0).map_err(fmt_err)?;
    let nll_err = (tape.item(exact.nll) - half).abs().max((gaussian_nll(&[0.5, -2.0], &[0.5, -2.0]) - half).abs());
    ensure(nll_err < 1e-9 && (HALF_LN_TWO_PI - half).abs() < 1e-15, format!("NLL at the exact prediction off by {nll_err:e}"))?;
    Ok(format!("min KL over 1000 posteriors {min_kl:.2e}, KL(prior||prior) {self_kl:.0e}, exact-prediction NLL off by {nll_err:.1e}, context-independent NLL"))
}

// ── 6 ────────────────────────────────────────────────────────────────

fn end_to_end(shared: &mut Shared) -> Outcome {
    let mut lines = Vec::new();
    let mut failed = false;
    for seed in [1, 2, 3] {
        let start = Instant::now();
        let ds = make_synthetic(SynthKind::DropMaskedSine, 1000, (60, 120), seed);
        let run = run_classic(&ds, ModelConfig::classic(), &classic_regime(seed), &classic_opts()).map_err(fmt_err)?;
        let secs = start.elapsed().as_secs_f64();
        let r = &run.report;
        let ok = r.mse < 0.5 * r.baseline_last_value && r.mse < r.baseline_mean && secs < 600.0;
        failed |= !ok;
        lines.push(format!(
            "seed {seed}: mse {:.4} vs mean {:.4}, half last-value {:.4} ({secs:.0}s){}",
            r.mse,
            r.baseline_mean,
            0.5 * r.baseline_last_value,
            if ok { "" } else { " FAILED" }
        ));
        if seed == 1 {
            shared.drop_masked_base = Some(r.mse);
        }
    }
    let text = lines.join("; ");
    if failed {
        Err(text)
    } else {
        Ok(text)
    }
}

// ── 7 ────────────────────────────────────────────────────────────────

fn pretrain_family(disable_vt_norm: bool) -> flextsf::Result<FlexTsf> {
    let src = make_synthetic(SynthKind::SineFamily, 1000, (60, 120), 11);
    let mut cfg = ModelConfig::classic();
    cfg.ablation.disable_vt_norm = disable_vt_norm;
    let regime = TrainRegime {
        lr: 1e-3,
        epochs: 10,
        steps_per_epoch: 50,
        schedule: LrSchedule::Cosine { warmup_steps: 50 },
        ..TrainRegime::pretrain(1)
    };
    Ok(run_pretrain(&src, cfg, &regime, &RunOptions::default())?.model)
}

fn shifted_targets() -> [(&'static str, flextsf::series::Dataset); 2] {
    let mut freq = SynthConfig::new(SynthKind::Sine, 300, (60, 120), 12);
    freq.period_range = (16.0, 32.0);
    [("frequency-shifted", freq.generate()), ("scale-shifted", make_synthetic(SynthKind::ScaleShiftedSine, 300, (60, 120), 13))]
}

fn zero_shot_generalization(shared: &mut Shared) -> Outcome {
    let targets = shifted_targets();
    let with = pretrain_family(false).map_err(fmt_err)?;
    let without = pretrain_family(true).map_err(fmt_err)?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, ds) in &targets {
        let (a, _) = zero_shot(&with, ds, 1, &RunOptions::default()).map_err(fmt_err)?;
        let (b, _) = zero_shot(&without, ds, 1, &RunOptions::default()).map_err(fmt_err)?;
        ok &= a.mse < a.baseline_mean && b.mse >= b.baseline_mean;
        parts.push(format!("{name}: {:.4} vs mean {:.4}, without VT-Norm {:.4}", a.mse, a.baseline_mean, b.mse));
    }
    shared.pretrained = Some(with);
    if ok {
        Ok(parts.join("; "))
    } else {
        Err(parts.join("; "))
    }
}

// ── 8 ────────────────────────────────────────────────────────────────

fn ablation_directions(shared: &mut Shared) -> Outcome {
    let classic = |kind: SynthKind, ablation: AblationFlags| -> Result<EvalReport, String> {
        let ds = make_synthetic(kind, 1000, (60, 120), 1);
        let config = ModelConfig { ablation, ..ModelConfig::classic() };
        Ok(run_classic(&ds, config, &classic_regime(1), &classic_opts()).map_err(fmt_err)?.report)
    };
    let drop_base = match shared.drop_masked_base {
        Some(m) => m,
        None => classic(SynthKind::DropMaskedSine, AblationFlags::default())?.mse,
    };
    let flat = classic(SynthKind::DropMaskedSine, AblationFlags { disable_ivp_patcher: true, ..Default::default() })?.mse;
    let mixed_base = classic(SynthKind::MixedFreqSine, AblationFlags::default())?.mse;
    let plain = classic(SynthKind::MixedFreqSine, AblationFlags { disable_led_extras: true, ..Default::default() })?.mse;
    let text = format!(
        "irregular: base {drop_base:.4}, no-ivp-patcher {flat:.4} ({:+.1}%); mixed-frequency: base {mixed_base:.4}, no-led-extras {plain:.4} ({:+.1}%)",
        100.0 * (flat - drop_base) / drop_base,
        100.0 * (plain - mixed_base) / mixed_base
    );
    if flat > drop_base && plain > mixed_base {
        Ok(text)
    } else {
        Err(text)
    }
}

// ── 9 ────────────────────────────────────────────────────────────────

fn few_shot_contract(shared: &mut Shared) -> Outcome {
    let base = match shared.pretrained.take() {
        Some(m) => m,
        None => pretrain_family(false).map_err(fmt_err)?,
    };
    let groups = base.param_groups();
    let (mut sum10, mut sum500) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in [1u64, 2, 3] {
        let ds = make_synthetic(SynthKind::DropMaskedSine, 1000, (60, 120), seed);
        let regime = TrainRegime { lr: 1e-3, batch_size: 32, epochs: 10, ..TrainRegime::finetune(seed) };
        let runs = few_shot(&base, &ds, &[0, 10, 500], &regime, &RunOptions::default()).map_err(fmt_err)?;
        for (rep, tuned) in &runs {
            for id in &groups.core {
                ensure(
                    tuned.params.get(*id).values == base.params.get(*id).values,
                    format!("k={}: core array {} changed", rep.k, base.params.get(*id).name),
                )?;
            }
        }
        let (zs, _) = zero_shot(&base, &ds, seed, &RunOptions::default()).map_err(fmt_err)?;
        ensure(runs[0].0 == zs, format!("seed {seed}: k=0 report differs from zero-shot"))?;
        sum10 += runs[1].0.mse;
        sum500 += runs[2].0.mse;
        per_seed.push(format!("{:.4}/{:.4}", runs[1].0.mse, runs[2].0.mse));
    }
    let (m10, m500) = (sum10 / 3.0, sum500 / 3.0);
    let text = format!(
        "core unchanged, k=0 == zero-shot; mean MSE k=10 {m10:.4}, k=500 {m500:.4} (per seed {})",
        per_seed.join(", ")
    );
    if m500 <= m10 {
        Ok(text)
    } else {
        Err(text)
    }
}

// ── 10 ───────────────────────────────────────────────────────────────

const TINY: &str = r#"
seed = 7
[data]
synth = "drop-masked-sine"
series = 40
[model]
latent_dim = 8
heads = 2
head_dim = 4
solver_hidden = 8
infer_hidden = 8
[train]
epochs = 2
batch_size = 8
steps_per_epoch = 3
"#;

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flextsf")).current_dir(dir).args(args).output().map_err(fmt_err)?;
    ensure(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
}

fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn reproducibility(_: &mut Shared) -> Outcome {
    let commands: [(&str, &[&str]); 7] = [
        ("synth", &[]),
        ("train", &[]),
        ("pretrain", &[]),
        ("finetune", &["--checkpoint", "../pre/checkpoint.bin", "--finetune.k", "5"]),
        ("eval", &["--checkpoint", "../train/checkpoint.bin"]),
        ("forecast", &["--checkpoint", "../train/checkpoint.bin"]),
        ("ablate", &["--train.epochs", "1"]),
    ];
    let mut roots = Vec::new();
    for _ in 0..2 {
        let root = tempfile::tempdir().map_err(fmt_err)?;
        fs::write(root.path().join("tiny.toml"), TINY).map_err(fmt_err)?;
        for (cmd, extra) in &commands {
            let dir = root.path().join(if *cmd == "pretrain" { "pre" } else { cmd });
            fs::create_dir_all(&dir).map_err(fmt_err)?;
            let mut args = vec![*cmd, "--config", "../tiny.toml", "--out", "."];
            args.extend_from_slice(extra);
            cli(&dir, &args)?;
        }
        roots.push(root);
    }
    let mut files = 0;
    for (cmd, _) in &commands {
        let name = if *cmd == "pretrain" { "pre" } else { cmd };
        let a = all_files(&roots[0].path().join(name));
        let b = all_files(&roots[1].path().join(name));
        ensure(a.len() == b.len(), format!("{cmd}: different artifact sets"))?;
        for ((fa, ba), (_, bb)) in a.iter().zip(&b) {
            ensure(ba == bb, format!("{cmd}: {fa} differs between runs"))?;
            files += 1;
        }
    }
    Ok(format!("7 commands run twice, {files} artifacts byte-identical"))
}

// ── 11 ───────────────────────────────────────────────────────────────

fn configuration_fidelity(_: &mut Shared) -> Outcome {
    let c = ModelConfig::classic();
    let shape = (c.head_dim, c.heads, c.layers, c.latent_dim);
    ensure(shape == (16, 4, 2, 64), format!("classic preset is (head_dim, heads, layers, d_z) = {shape:?}"))?;
    let m = FlexTsf::new(c, 0).map_err(fmt_err)?;
    Ok(format!("head_dim 16, heads 4, layers 2, d_z 64; {} parameters (reference model: 440,066)", m.count_parameters()))
}

// ── driver ───────────────────────────────────────────────────────────

type Check = fn(&mut Shared) -> Outcome;

const CRITERIA: [(usize, &str, Check); 11] = [
    (1, "gradient fidelity", gradient_fidelity),
    (2, "VT-Norm contract", vtnorm_contract),
    (3, "IVP solver contracts", solver_contracts),
    (4, "attention contracts", attention_contracts),
    (5, "ELBO structure", elbo_structure),
    (6, "end-to-end learning", end_to_end),
    (7, "zero-shot generalization", zero_shot_generalization),
    (8, "ablation directions", ablation_directions),
    (9, "few-shot contract", few_shot_contract),
    (10, "reproducibility", reproducibility),
    (11, "configuration fidelity", configuration_fidelity),
];

fn main() {
    // `cargo test -- --list` and similar probes expect no work
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<BTreeSet<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let mut failures = 0;
    for (n, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
