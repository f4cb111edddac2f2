//! Small building blocks shared by the model's sub-modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ParamId, ParameterStore, Tape, Var};

/// Inverted dropout with its own random stream.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.dropout(x, self.rate, &mut self.rng)
    }
}

pub(crate) fn maybe_dropout(tape: &mut Tape<'_>, x: Var, drop: Option<&mut Dropout>) -> Var {
    match drop {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

/// Stack of affine layers with relu between them (none after the last).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers `{prefix}.{k}.w` and `{prefix}.{k}.b` for each consecutive
    /// pair of `dims`.
    pub fn register<R: Rng>(store: &mut ParameterStore, prefix: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let wid = store.add_glorot(&format!("{prefix}.{k}.w"), &[w[1], w[0]], rng);
                let bid = store.add_zeros(&format!("{prefix}.{k}.b"), &[w[1]]);
                (wid, bid)
            })
            .collect();
        Self { layers }
    }

    /// Looks up the layers registered under `prefix`.
    pub fn lookup(store: &ParameterStore, prefix: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|k| Ok((store.id(&format!("{prefix}.{k}.w"))?, store.id(&format!("{prefix}.{k}.b"))?)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Applies the stack to a vector or to every row of a matrix. Dropout,
    /// when given, follows each hidden activation.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mut drop: Option<&mut Dropout>) -> Result<Var> {
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (tape.param(w), tape.param(b));
            h = tape.linear(h, wv, Some(bv))?;
            if k + 1 < self.layers.len() {
                h = tape.relu(h);
                h = maybe_dropout(tape, h, drop.as_deref_mut());
            }
        }
        Ok(h)
    }

    pub fn output_dim(&self, store: &ParameterStore) -> usize {
        let (w, _) = *self.layers.last().expect("mlp has layers");
        store.value(w).shape()[0]
    }
}
