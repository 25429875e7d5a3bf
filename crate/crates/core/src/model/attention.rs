use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Score assigned to disallowed query/key pairs. Its softmax weight
/// underflows to exactly zero, so masked keys contribute nothing.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            heads,
        }
    }

    /// Attends `queries` (n×d) over `keys_values` (m×d).
    ///
    /// Key `j` is visible to query `i` when `key_mask[j]` holds and, if
    /// `causal`, `j <= i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys_values: Var,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let n = tape.shape(queries)[0];
        let m = tape.shape(keys_values)[0];
        let d = tape.shape(queries)[1];
        if key_mask.len() != m {
            return Err(Error::dim(format!("{} key flags for {m} keys", key_mask.len())));
        }
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::contract("attention over a fully masked key set"));
        }
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let keep: Vec<bool> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| key_mask[j] && (!causal || j <= i))
            .collect();
        let needs_mask = keep.iter().any(|&k| !k);

        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys_values)?;
        let v = self.value.forward(tape, keys_values)?;
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(q, cols.0, cols.1)?;
            let kh = tape.slice_cols(k, cols.0, cols.1)?;
            let vh = tape.slice_cols(v, cols.0, cols.1)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if needs_mask {
                scores = tape.masked_fill(scores, &keep, MASKED_SCORE)?;
            }
            let weights = tape.softmax(scores, 1)?;
            outputs.push(tape.matmul(weights, vh)?);
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs, 1)?
        };
        self.out.forward(tape, merged)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.out]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
