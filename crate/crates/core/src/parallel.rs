//! Batch loss and gradient evaluation.
//!
//! Rows are split into fixed-size chunks; each chunk is one tape. Chunk
//! gradients are summed in chunk order, so the result does not depend on
//! whether chunks run on the rayon pool or one after another.

use flextsf_tensor::rng::{self, RngState};
use flextsf_tensor::{accumulate, Tape};

use crate::error::Result;
use crate::model::FlexTsf;
use crate::series::BatchRow;

/// Rows per tape.
pub const CHUNK_ROWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

/// Mean loss terms and mean gradients over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub grads: Vec<Vec<f64>>,
    pub rows: usize,
}

/// Identifies the noise stream of one row: `(seed, step, row index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
}

struct ChunkResult {
    loss: f64,
    nll: f64,
    kl: f64,
    grads: Vec<Vec<f64>>,
}

fn chunk(model: &FlexTsf, rows: &[&BatchRow], first: usize, key: NoiseKey, kl_weight: f64) -> Result<ChunkResult> {
    let mut tape = Tape::new();
    let p = model.params.register(&mut tape, true);
    let root = RngState::new(key.seed);
    let mut totals = Vec::with_capacity(rows.len());
    let (mut nll, mut kl) = (0.0, 0.0);
    for (i, row) in rows.iter().enumerate() {
        let mut noise = root.stream(&[rng::tag("noise"), key.step, (first + i) as u64]);
        let tf = model.forward_teacher_forced(&mut tape, &p, row, Some(&mut noise), false)?;
        let terms = model.loss_elbo(&mut tape, &tf, kl_weight)?;
        nll += tape.item(terms.nll);
        kl += tape.item(terms.kl);
        totals.push(terms.total);
    }
    let mut sum = totals[0];
    for &t in &totals[1..] {
        sum = tape.add(sum, t)?;
    }
    let loss = tape.item(sum);
    tape.backward(sum)?;
    Ok(ChunkResult { loss, nll, kl, grads: model.params.gradients(&tape, &p) })
}

pub fn batch_gradients(
    model: &FlexTsf,
    rows: &[&BatchRow],
    key: NoiseKey,
    kl_weight: f64,
    exec: Execution,
) -> Result<BatchGradients> {
    let starts: Vec<usize> = (0..rows.len()).step_by(CHUNK_ROWS).collect();
    let run = |&s: &usize| chunk(model, &rows[s..(s + CHUNK_ROWS).min(rows.len())], s, key, kl_weight);
    let results: Vec<Result<ChunkResult>> = match exec {
        Execution::Sequential => starts.iter().map(run).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            starts.par_iter().map(run).collect()
        }
    };
    let mut out = BatchGradients { loss: 0.0, nll: 0.0, kl: 0.0, grads: model.params.zeros_like(), rows: rows.len() };
    for r in results {
        let r = r?;
        out.loss += r.loss;
        out.nll += r.nll;
        out.kl += r.kl;
        accumulate(&mut out.grads, &r.grads);
    }
    let n = rows.len().max(1) as f64;
    out.loss /= n;
    out.nll /= n;
    out.kl /= n;
    for g in &mut out.grads {
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok(out)
}
