use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};

/// A named, shaped array of trainable scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of parameters. Order is the registration order and is
/// part of the checkpoint contract.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Parameter leaves registered on one tape, indexed like the store.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch { shape: shape.to_vec(), expected, actual: values.len() });
        }
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::Invalid { op: "ParamStore::add", msg: format!("duplicate parameter {name}") });
        }
        self.params.push(Param { name, shape: shape.to_vec(), values });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn as_slice(&self) -> &[Param] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Registers every parameter on `tape`, as gradient-tracking leaves when
    /// `trainable`, otherwise as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| tape.leaf(p.values.clone(), &p.shape, trainable).expect("store validated shapes"))
                .collect(),
        )
    }

    /// Collects the gradients of registered parameters, zero-filled where a
    /// parameter did not influence the loss.
    pub fn gradients(&self, tape: &Tape, vars: &ParamVars) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&vars.0)
            .map(|(p, &v)| tape.grad(v).map_or_else(|| vec![0.0; p.values.len()], <[f64]>::to_vec))
            .collect()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.values.len()]).collect()
    }
}

/// Adds `src` into `dst` element-wise.
pub fn accumulate(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
}
