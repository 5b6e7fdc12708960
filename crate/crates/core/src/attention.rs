//! Causal self-attention over `[leader, patches…, dummy]` with continuous-time
//! rotary modulation of queries and keys in every layer.

use flextsf_tensor::{ParamId, ParamVars, Tape, Var};

use crate::error::{Error, Result};
use crate::layers::{Init, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Leader,
    Patch,
    Dummy,
}

/// Node embeddings with their time indicators. Dummy nodes are visible only
/// to themselves, so several forecast queries can share one pass without
/// seeing each other.
#[derive(Debug, Clone)]
pub struct AttentionSequence {
    pub nodes: Var,
    pub tau: Vec<f64>,
    pub kinds: Vec<NodeKind>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotaryConfig {
    pub base: f64,
    pub tau_scale: f64,
}

impl Default for RotaryConfig {
    fn default() -> Self {
        Self { base: 10_000.0, tau_scale: 1.0 }
    }
}

/// Pair frequencies `base^(−2j/head_dim)`.
pub fn rotary_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2).map(|j| base.powf(-2.0 * j as f64 / head_dim as f64)).collect()
}

/// Rotates each consecutive pair of `x` by `tau·θ_j`.
pub fn rotary_modulate(x: &[f64], tau: f64, cfg: &RotaryConfig) -> Vec<f64> {
    let theta = rotary_frequencies(x.len(), cfg.base);
    let mut out = x.to_vec();
    for (j, th) in theta.iter().enumerate() {
        let (s, c) = (tau * cfg.tau_scale * th).sin_cos();
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        out[2 * j] = a * c - b * s;
        out[2 * j + 1] = a * s + b * c;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub rotary: Option<RotaryConfig>,
}

impl AttentionConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub config: AttentionConfig,
    layers: Vec<Layer>,
    final_norm: LayerNorm,
}

impl AttentionStack {
    pub fn new(init: &mut Init<'_>, config: AttentionConfig) -> Result<Self> {
        if config.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim must be even, got {}", config.head_dim)));
        }
        let d = config.model_dim();
        let layers = (0..config.layers)
            .map(|l| {
                let n = |s: &str| format!("attn.l{l}.{s}");
                Ok(Layer {
                    ln1: init.layer_norm(&n("ln1"), d)?,
                    q: init.linear(&n("q"), d, d)?,
                    k: init.linear(&n("k"), d, d)?,
                    v: init.linear(&n("v"), d, d)?,
                    o: init.linear_scaled(&n("o"), d, d, 0.5)?,
                    ln2: init.layer_norm(&n("ln2"), d)?,
                    ff1: init.linear(&n("ff1"), d, config.ff_mult * d)?,
                    ff2: init.linear_scaled(&n("ff2"), config.ff_mult * d, d, 0.5)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers, final_norm: init.layer_norm("attn.final", d)? })
    }

    fn mask(kinds: &[NodeKind]) -> Vec<f64> {
        let n = kinds.len();
        let mut m = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            for j in 0..=i {
                if j == i || kinds[j] != NodeKind::Dummy {
                    m[i * n + j] = 0.0;
                }
            }
        }
        m
    }

    fn angles(&self, tau: &[f64]) -> Option<Vec<f64>> {
        let rot = self.config.rotary?;
        let theta = rotary_frequencies(self.config.head_dim, rot.base);
        let pairs = self.config.model_dim() / 2;
        let mut a = Vec::with_capacity(tau.len() * pairs);
        for &t in tau {
            for _ in 0..self.config.heads {
                a.extend(theta.iter().map(|th| t * rot.tau_scale * th));
            }
        }
        Some(a)
    }

    /// Runs every layer; returns all final positions `[n, d_m]`. When
    /// `logits` is given, the pre-mask scaled attention logits of every
    /// layer and head are pushed onto it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        seq: &AttentionSequence,
        mut logits: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let n = seq.tau.len();
        if seq.kinds.len() != n || tape.shape(seq.nodes)[0] != n {
            return Err(Error::Data("attention sequence parts disagree in length".into()));
        }
        let (hd, heads) = (self.config.head_dim, self.config.heads);
        let mask = tape.constant(Self::mask(&seq.kinds), &[n, n])?;
        let angles = match self.angles(&seq.tau) {
            Some(a) => Some(tape.constant(a, &[n, self.config.model_dim() / 2])?),
            None => None,
        };
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = seq.nodes;
        for layer in &self.layers {
            let h = layer.ln1.forward(tape, p, x)?;
            let mut q = layer.q.forward(tape, p, h)?;
            let mut k = layer.k.forward(tape, p, h)?;
            let v = layer.v.forward(tape, p, h)?;
            if let Some(a) = angles {
                q = tape.rotate_pairs(q, a)?;
                k = tape.rotate_pairs(k, a)?;
            }
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, scale);
                if let Some(l) = logits.as_deref_mut() {
                    l.push(s);
                }
                let s = tape.add(s, mask)?;
                let w = tape.softmax_lastdim(s);
                outs.push(tape.matmul(w, vh)?);
            }
            let att = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let att = layer.o.forward(tape, p, att)?;
            x = tape.add(x, att)?;
            let h = layer.ln2.forward(tape, p, x)?;
            let f = layer.ff1.forward(tape, p, h)?;
            let f = tape.tanh(f);
            let f = layer.ff2.forward(tape, p, f)?;
            x = tape.add(x, f)?;
        }
        self.final_norm.forward(tape, p, x)
    }

    /// All attention parameter ids (layers and final norm).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            for lin in [l.q, l.k, l.v, l.o, l.ff1, l.ff2] {
                ids.extend([lin.w, lin.b]);
            }
            for ln in [l.ln1, l.ln2] {
                ids.extend([ln.gain, ln.bias]);
            }
        }
        ids.extend([self.final_norm.gain, self.final_norm.bias]);
        ids
    }
}
