//! Parameter construction and the small dense building blocks shared by the
//! encoder, decoder and attention stack.

use flextsf_tensor::rng::{self, RngState};
use flextsf_tensor::{ParamId, ParamStore, ParamVars, Tape, Var};

use crate::error::Result;

/// Adds named parameters to a store. Each parameter draws from its own
/// stream keyed by its name, so the values of one parameter never depend on
/// which other parameters exist.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: RngState,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: RngState::new(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let mut r = self.rng.stream(&[rng::tag("init"), rng::tag(name)]);
        let n = shape.iter().product();
        let values = (0..n).map(|_| std * rng::standard_normal(&mut r)).collect();
        Ok(self.store.add(name, shape, values)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        Ok(self.store.add(name, shape, vec![value; n])?)
    }

    pub fn values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        Ok(self.store.add(name, shape, values)?)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.linear_scaled(name, fan_in, fan_out, 1.0)
    }

    /// Linear map with weights drawn at `gain / sqrt(fan_in)`.
    pub fn linear_scaled(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<Linear> {
        let w = self.normal(&format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt())?;
        let b = self.constant(&format!("{name}.b"), &[fan_out], 0.0)?;
        Ok(Linear { w, b })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let gain = self.constant(&format!("{name}.g"), &[dim], 1.0)?;
        let bias = self.constant(&format!("{name}.b"), &[dim], 0.0)?;
        Ok(LayerNorm { gain, bias })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// `x·W + b` for `x` of shape `[rows, fan_in]`.
    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.get(self.w))?;
        Ok(tape.add(y, p.get(self.b))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS);
        let s = tape.mul(n, p.get(self.gain))?;
        Ok(tape.add(s, p.get(self.bias))?)
    }
}
