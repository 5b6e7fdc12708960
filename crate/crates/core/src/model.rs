//! The assembled forecaster: patch encoding, the attention stack, the
//! variational loss, and autoregressive generation.

use std::collections::BTreeMap;
use std::str::FromStr;

use flextsf_tensor::rng::{self, Rng};
use flextsf_tensor::{ParamId, ParamStore, ParamVars, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionSequence, AttentionStack, NodeKind, RotaryConfig};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::patcher::{
    segment, DecodeTarget, EncodedPatches, FlatPatcher, IvpSolverConfig, Noise, Patch, PatchDecoder, PatchEncoder,
    SolverKind,
};
use crate::series::{BatchRow, Segment};
use crate::vtnorm::FeatureStandardizer;

pub const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Sample,
    Mean,
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(SamplingMode::Sample),
            "mean" => Ok(SamplingMode::Mean),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default)]
    pub disable_vt_norm: bool,
    #[serde(default)]
    pub disable_ivp_patcher: bool,
    #[serde(default)]
    pub disable_led_extras: bool,
}

impl AblationFlags {
    pub fn label(&self) -> &'static str {
        match (self.disable_vt_norm, self.disable_ivp_patcher, self.disable_led_extras) {
            (false, false, false) => "base",
            (true, false, false) => "no-vt-norm",
            (false, true, false) => "no-ivp-patcher",
            (false, false, true) => "no-led-extras",
            _ => "mixed",
        }
    }
}

/// Missing keys take the classic preset's value when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_len: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub solver: SolverKind,
    pub solver_hidden: usize,
    pub infer_hidden: usize,
    pub steps_per_unit: f64,
    pub rotary_base: f64,
    pub tau_scale: f64,
    pub kl_weight: f64,
    pub sampling: SamplingMode,
    /// index-embedding rows when the leader/rotary extras are ablated
    pub max_positions: usize,
    /// horizon patches per pre-training draw
    pub horizon_patches: usize,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::classic()
    }
}

impl ModelConfig {
    pub fn classic() -> Self {
        Self {
            patch_len: 8,
            latent_dim: 64,
            heads: 4,
            head_dim: 16,
            layers: 2,
            ff_mult: 4,
            solver: SolverKind::ResnetFlow,
            solver_hidden: 32,
            infer_hidden: 64,
            steps_per_unit: 16.0,
            rotary_base: 10_000.0,
            tau_scale: 1.0,
            kl_weight: 1.0,
            sampling: SamplingMode::Mean,
            max_positions: 256,
            horizon_patches: 4,
            ablation: AblationFlags::default(),
        }
    }

    pub fn large() -> Self {
        Self { latent_dim: 768, heads: 12, head_dim: 64, layers: 6, solver_hidden: 256, infer_hidden: 768, ..Self::classic() }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_len == 0 || self.layers == 0 || self.heads == 0 {
            return bad("patch_len, layers and heads must be positive".into());
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.solver == SolverKind::ResnetFlow && self.latent_dim % 2 != 0 {
            return bad(format!("latent_dim must be even for the flow solver, got {}", self.latent_dim));
        }
        if !(self.kl_weight >= 0.0) || !(self.steps_per_unit > 0.0) || !(self.tau_scale > 0.0) {
            return bad("kl_weight must be >= 0, steps_per_unit and tau_scale > 0".into());
        }
        Ok(())
    }

    /// Flat `key = value` rendering used in checkpoints and config echoes.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let table = toml::Table::try_from(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten("", &table, &mut out);
        out
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.to_string());
            }
        }
    }
}

/// Input, output and static-feature maps versus everything else. Few-shot
/// fine-tuning updates only the io group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroups {
    pub io: Vec<ParamId>,
    pub core: Vec<ParamId>,
}

pub fn is_io_param(name: &str) -> bool {
    ["enc.in.", "dec.out.", "attn.leader.", "flat."].iter().any(|p| name.starts_with(p))
}

/// One sequence prepared for teacher forcing.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub horizon_pred: Var,
    pub horizon_target: Vec<f64>,
    /// next-patch predictions at context positions, when requested
    pub context_pred: Option<Var>,
    pub context_target: Vec<f64>,
    pub encoded: EncodedPatches,
    pub context_patches: usize,
    pub horizon_patches: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub nll: Var,
    pub kl: Var,
}

/// Mean Gaussian negative log-likelihood with unit variance.
pub fn gaussian_nll(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(target).map(|(p, t)| 0.5 * (p - t) * (p - t) + HALF_LN_TWO_PI).sum::<f64>() / n
}

#[derive(Debug, Clone)]
pub struct FlexTsf {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub standardizer: FeatureStandardizer,
    encoder: Option<PatchEncoder>,
    decoder: Option<PatchDecoder>,
    flat: Option<FlatPatcher>,
    proj_in: Option<Linear>,
    proj_out: Option<Linear>,
    leader: Option<Linear>,
    dummy: ParamId,
    index: Option<ParamId>,
    stack: AttentionStack,
}

impl FlexTsf {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let d_z = config.latent_dim;
        let d_m = config.model_dim();
        let solver = |_: ()| IvpSolverConfig {
            kind: config.solver,
            latent_dim: d_z,
            hidden: config.solver_hidden,
            steps_per_unit: config.steps_per_unit,
        };
        let (encoder, decoder, flat) = if config.ablation.disable_ivp_patcher {
            (None, None, Some(FlatPatcher::new(&mut init, config.patch_len, d_z)?))
        } else {
            (
                Some(PatchEncoder::new(&mut init, solver(()), config.infer_hidden)?),
                Some(PatchDecoder::new(&mut init, solver(()))?),
                None,
            )
        };
        let (proj_in, proj_out) = if d_z != d_m {
            (Some(init.linear("attn.proj_in", d_z, d_m)?), Some(init.linear("attn.proj_out", d_m, d_z)?))
        } else {
            (None, None)
        };
        let extras = !config.ablation.disable_led_extras;
        let leader = if extras { Some(init.linear("attn.leader", 6, d_m)?) } else { None };
        let dummy = init.normal("attn.dummy", &[1, d_m], 0.5)?;
        let index = if extras { None } else { Some(init.normal("attn.index", &[config.max_positions, d_m], 0.5)?) };
        let stack = AttentionStack::new(
            &mut init,
            AttentionConfig {
                heads: config.heads,
                head_dim: config.head_dim,
                layers: config.layers,
                ff_mult: config.ff_mult,
                rotary: extras.then_some(RotaryConfig { base: config.rotary_base, tau_scale: config.tau_scale }),
            },
        )?;
        Ok(Self {
            config,
            params,
            standardizer: FeatureStandardizer::default(),
            encoder,
            decoder,
            flat,
            proj_in,
            proj_out,
            leader,
            dummy,
            index,
            stack,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn param_groups(&self) -> ParamGroups {
        let (io, core): (Vec<_>, Vec<_>) = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), is_io_param(&p.name)))
            .partition(|(_, io)| *io);
        ParamGroups { io: io.into_iter().map(|(i, _)| i).collect(), core: core.into_iter().map(|(i, _)| i).collect() }
    }

    pub fn encode(&self, tape: &mut Tape, p: &ParamVars, patches: &[&Patch], noise: Noise<'_>) -> Result<EncodedPatches> {
        match (&self.encoder, &self.flat) {
            (Some(e), _) => e.encode(tape, p, patches, noise),
            (None, Some(f)) => f.encode(tape, p, patches, noise),
            _ => unreachable!("one patcher is always built"),
        }
    }

    pub fn decode(&self, tape: &mut Tape, p: &ParamVars, latents: Var, targets: &[DecodeTarget]) -> Result<Var> {
        match (&self.decoder, &self.flat) {
            (Some(d), _) => d.decode(tape, p, latents, targets),
            (None, Some(f)) => f.decode(tape, p, latents, targets),
            _ => unreachable!("one patcher is always built"),
        }
    }

    pub fn encoder(&self) -> Option<&PatchEncoder> {
        self.encoder.as_ref()
    }

    pub fn stack(&self) -> &AttentionStack {
        &self.stack
    }

    /// Builds the node matrix for `[leader?] ++ picks` where each pick is a
    /// patch representation row or the dummy, with positions for the index
    /// embedding.
    fn assemble(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        features: &[f64; 6],
        reps: Var,
        picks: &[(Pick, f64, usize)],
    ) -> Result<AttentionSequence> {
        let reps = match self.proj_in {
            Some(l) => l.forward(tape, p, reps)?,
            None => reps,
        };
        let n_reps = tape.shape(reps)[0];
        let mut parts = vec![reps, p.get(self.dummy)];
        let dummy_row = n_reps;
        let leader_row = n_reps + 1;
        if let Some(l) = self.leader {
            let f = tape.constant(features.to_vec(), &[1, 6])?;
            parts.push(l.forward(tape, p, f)?);
        }
        let pool = tape.concat_rows(&parts)?;
        let mut rows = Vec::new();
        let mut tau = Vec::new();
        let mut kinds = Vec::new();
        let mut positions = Vec::new();
        if self.leader.is_some() {
            rows.push(leader_row);
            tau.push(0.0);
            kinds.push(NodeKind::Leader);
        }
        for &(pick, t, pos) in picks {
            match pick {
                Pick::Rep(r) => {
                    rows.push(r);
                    kinds.push(NodeKind::Patch);
                }
                Pick::Dummy => {
                    rows.push(dummy_row);
                    kinds.push(NodeKind::Dummy);
                }
            }
            tau.push(t);
            positions.push(pos.min(self.config.max_positions - 1));
        }
        let mut nodes = tape.gather_rows(pool, &rows)?;
        if let Some(idx) = self.index {
            let emb = tape.gather_rows(p.get(idx), &positions)?;
            nodes = tape.add(nodes, emb)?;
        }
        Ok(AttentionSequence { nodes, tau, kinds })
    }

    fn dummy_latents(&self, tape: &mut Tape, p: &ParamVars, out: Var, rows: &[usize]) -> Result<Var> {
        let d = tape.gather_rows(out, rows)?;
        match self.proj_out {
            Some(l) => l.forward(tape, p, d),
            None => Ok(d),
        }
    }

    /// Teacher-forced pass over one normalized row: context patches and
    /// observed horizon patches are encoded together; each horizon patch is
    /// predicted from a dummy node placed at its first timestamp that sees
    /// the leader, all context patches and the preceding true horizon
    /// patches.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        row: &BatchRow,
        noise_rng: Option<&mut rng::StreamRng>,
        with_context: bool,
    ) -> Result<TeacherForced> {
        let pl = self.config.patch_len;
        let ctx = segment(&row.context, pl)?;
        if ctx.is_empty() {
            return Err(Error::Data("context has no observed points".into()));
        }
        let hz: Vec<Patch> = if row.horizon.is_empty() { Vec::new() } else { segment(&row.horizon, pl)? };
        // chunks that are entirely missing are dropped by `segment`; chunk
        // boundaries stay aligned with generation because `segment` never
        // merges across them
        if hz.is_empty() {
            return Err(Error::Data("horizon has no observed points".into()));
        }
        let (k, j) = (ctx.len(), hz.len());
        let all: Vec<&Patch> = ctx.iter().chain(hz.iter()).collect();
        let noise: Option<Vec<f64>> = match (self.config.sampling, noise_rng) {
            (SamplingMode::Sample, Some(r)) => {
                Some((0..(k + j) * self.config.latent_dim).map(|_| rng::standard_normal(r)).collect())
            }
            _ => None,
        };
        let encoded = self.encode(tape, p, &all, noise.as_deref())?;

        let mut picks = Vec::with_capacity(k + 2 * j);
        for (i, patch) in ctx.iter().enumerate() {
            picks.push((Pick::Rep(i), patch.tau, i));
        }
        let mut dummy_nodes = Vec::with_capacity(j);
        let offset = usize::from(self.leader.is_some());
        for (h, patch) in hz.iter().enumerate() {
            dummy_nodes.push(picks.len() + offset);
            picks.push((Pick::Dummy, patch.tau, k + h));
            if h + 1 < j {
                picks.push((Pick::Rep(k + h), patch.tau, k + h));
            }
        }
        let seq = self.assemble(tape, p, &row.features, encoded.rep, &picks)?;
        let out = self.stack.forward(tape, p, &seq, None)?;
        let latents = self.dummy_latents(tape, p, out, &dummy_nodes)?;
        let (targets, horizon_target) = observed_targets(&hz, (0..j).collect());
        let horizon_pred = self.decode(tape, p, latents, &targets)?;

        let (context_pred, context_target) = if with_context && k > 1 {
            let nodes: Vec<usize> = (0..k - 1).map(|i| i + offset).collect();
            let lat = self.dummy_latents(tape, p, out, &nodes)?;
            let (targets, values) = observed_targets(&ctx[1..], (0..k - 1).collect());
            (Some(self.decode(tape, p, lat, &targets)?), values)
        } else {
            (None, Vec::new())
        };
        Ok(TeacherForced {
            horizon_pred,
            horizon_target,
            context_pred,
            context_target,
            encoded,
            context_patches: k,
            horizon_patches: j,
        })
    }

    /// Mean per-point NLL over the horizon plus `kl_weight` times the mean
    /// per-patch KL over every encoded patch.
    pub fn loss_elbo(&self, tape: &mut Tape, tf: &TeacherForced, kl_weight: f64) -> Result<LossTerms> {
        let n = tf.horizon_target.len();
        let target = tape.constant(tf.horizon_target.clone(), &[n, 1])?;
        let diff = tape.sub(tf.horizon_pred, target)?;
        let sq = tape.square(diff);
        let sq = tape.mean(sq);
        let half = tape.scale(sq, 0.5);
        let nll = tape.add_scalar(half, HALF_LN_TWO_PI);
        let kl = tape.mean(tf.encoded.kl);
        let weighted = tape.scale(kl, kl_weight);
        let total = tape.add(nll, weighted)?;
        Ok(LossTerms { total, nll, kl })
    }

    /// Loss of one row with the configured KL weight.
    pub fn loss(&self, tape: &mut Tape, p: &ParamVars, row: &BatchRow, noise: Option<&mut rng::StreamRng>) -> Result<LossTerms> {
        let tf = self.forward_teacher_forced(tape, p, row, noise, false)?;
        self.loss_elbo(tape, &tf, self.config.kl_weight)
    }

    /// Autoregressive forecast at `horizon_times` (normalized, ascending, not
    /// before the context end). Uses posterior means throughout.
    pub fn generate(&self, context: &Segment, features: &[f64; 6], horizon_times: &[f64]) -> Result<Vec<f64>> {
        if horizon_times.is_empty() {
            return Err(Error::Data("empty forecast horizon".into()));
        }
        if horizon_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("horizon timestamps must be strictly increasing".into()));
        }
        let pl = self.config.patch_len;
        let ctx = segment(context, pl)?;
        if ctx.is_empty() {
            return Err(Error::Data("context has no observed points".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let k = ctx.len();
        let refs: Vec<&Patch> = ctx.iter().collect();
        let mut reps = self.encode(&mut tape, &p, &refs, None)?.rep;
        let mut picks: Vec<(Pick, f64, usize)> = ctx.iter().enumerate().map(|(i, c)| (Pick::Rep(i), c.tau, i)).collect();
        let mut out = Vec::with_capacity(horizon_times.len());
        let chunks: Vec<&[f64]> = horizon_times.chunks(pl).collect();
        for (step, times) in chunks.iter().enumerate() {
            let tau = times[0];
            let mut step_picks = picks.clone();
            step_picks.push((Pick::Dummy, tau, k + step));
            let seq = self.assemble(&mut tape, &p, features, reps, &step_picks)?;
            let last = seq.tau.len() - 1;
            let states = self.stack.forward(&mut tape, &p, &seq, None)?;
            let latent = self.dummy_latents(&mut tape, &p, states, &[last])?;
            let target = DecodeTarget { source: 0, tau_start: tau, times: times.to_vec() };
            let pred = self.decode(&mut tape, &p, latent, &[target])?;
            let values = tape.value(pred).to_vec();
            if step + 1 < chunks.len() {
                let patch = Patch { times: times.to_vec(), values: values.clone(), observed: vec![true; times.len()], tau };
                let enc = self.encode(&mut tape, &p, &[&patch], None)?;
                let n_rows = tape.shape(reps)[0];
                reps = tape.concat_rows(&[reps, enc.rep])?;
                picks.push((Pick::Rep(n_rows), tau, k + step));
            }
            out.extend(values);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("forecast produced non-finite values".into()));
        }
        Ok(out)
    }

    /// Plain attention logits for every layer and head of a probe sequence
    /// made of the given patch representations; used to check relative
    /// time behavior.
    pub fn attention_logits(&self, reps: &[Vec<f64>], tau: &[f64], features: &[f64; 6]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let d = self.config.latent_dim;
        let flat: Vec<f64> = reps.iter().flatten().copied().collect();
        let reps_var = tape.constant(flat, &[reps.len(), d])?;
        let picks: Vec<(Pick, f64, usize)> = tau.iter().enumerate().map(|(i, &t)| (Pick::Rep(i), t, i)).collect();
        let seq = self.assemble(&mut tape, &p, features, reps_var, &picks)?;
        let mut logits = Vec::new();
        self.stack.forward(&mut tape, &p, &seq, Some(&mut logits))?;
        Ok(logits.into_iter().map(|v| tape.value(v).to_vec()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pick {
    Rep(usize),
    Dummy,
}

fn observed_targets(patches: &[Patch], sources: Vec<usize>) -> (Vec<DecodeTarget>, Vec<f64>) {
    let mut targets = Vec::with_capacity(patches.len());
    let mut values = Vec::new();
    for (patch, src) in patches.iter().zip(sources) {
        let mut times = Vec::new();
        for i in 0..patch.len() {
            if patch.observed[i] {
                times.push(patch.times[i]);
                values.push(patch.values[i]);
            }
        }
        targets.push(DecodeTarget { source: src, tau_start: patch.tau, times });
    }
    (targets, values)
}

/// Random pre-training window: `(start, context_len, target_len)`, or `None`
/// when the series is shorter than two patches.
pub fn pretrain_subsequence<R: Rng + ?Sized>(
    len: usize,
    patch_len: usize,
    horizon_patches: usize,
    rng: &mut R,
) -> Option<(usize, usize, usize)> {
    if len < 2 * patch_len {
        return None;
    }
    let start = rng.random_range(0..=len - 2 * patch_len);
    let ctx = rng.random_range(patch_len..=len - patch_len - start);
    let target = (patch_len * horizon_patches).min(len - start - ctx);
    Some((start, ctx, target))
}
