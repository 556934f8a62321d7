//! Permutation-invariant masked-reconstruction encoder.
//!
//! Each gene is a token `e_g + (W_v x_g + b_v)` when observed or `e_g + m`
//! when masked. Tokens pass through `L` Pre-LN encoder layers (multi-head
//! attention, exact-GELU feed-forward) without any positional signal, then a
//! linear head emits one scalar per gene. The cell embedding is the mean of
//! the final residual stream over all tokens. There is no final layer norm
//! and no dropout.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{param_count, ModelConfig, Preset};
pub use params::{xavier_bound, LayerParams, ParamKind, ParameterSet};

use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric failure in encoder layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-gene predictions and the pooled cell embedding for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub predictions: Vec<T>,
    pub pooled: Vec<T>,
}

/// A batch of cells that all present the same number of tokens.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a, T> {
    pub tokens_per_cell: usize,
    pub gene_ids: &'a [usize],
    pub values: &'a [T],
    pub mask: &'a [bool],
}

impl<T> BatchInput<'_, T> {
    pub fn n_cells(&self) -> usize {
        self.gene_ids
            .len()
            .checked_div(self.tokens_per_cell)
            .unwrap_or(0)
    }
}

/// Tape handles for a batched forward pass.
pub struct BatchForward {
    /// `[cells * tokens, 1]` predictions.
    pub predictions: Var,
    /// `[cells * tokens, d]` final residual stream.
    pub hidden: Var,
    /// One leaf per tensor of [`ParameterSet::named`], same order.
    pub params: Vec<Var>,
}

fn validate_input<T>(config: &ModelConfig, input: &BatchInput<'_, T>) -> Result<(), ModelError> {
    let n = input.tokens_per_cell;
    let total = input.gene_ids.len();
    if n == 0 || total == 0 || !total.is_multiple_of(n) {
        return Err(ModelError::InvalidInput(format!(
            "{total} tokens do not form cells of {n}"
        )));
    }
    if input.values.len() != total || input.mask.len() != total {
        return Err(ModelError::InvalidInput(format!(
            "gene ids {total}, values {}, mask {} must have equal length",
            input.values.len(),
            input.mask.len()
        )));
    }
    if n > config.vocab {
        return Err(ModelError::InvalidInput(format!(
            "{n} tokens per cell exceeds vocabulary {}",
            config.vocab
        )));
    }
    let mut seen = vec![usize::MAX; config.vocab];
    for (cell, ids) in input.gene_ids.chunks_exact(n).enumerate() {
        for &g in ids {
            if g >= config.vocab {
                return Err(ModelError::InvalidInput(format!(
                    "gene id {g} out of range for vocabulary {}",
                    config.vocab
                )));
            }
            if seen[g] == cell {
                return Err(ModelError::InvalidInput(format!(
                    "gene id {g} repeated within cell {cell}"
                )));
            }
            seen[g] = cell;
        }
    }
    Ok(())
}

impl<T: Scalar> ParameterSet<T> {
    /// Registers every parameter tensor as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<Vec<Var>, ModelError> {
        self.named()
            .into_iter()
            .map(|(_, _, t)| tape.leaf(t.clone()).map_err(ModelError::from))
            .collect()
    }

    /// Records the full forward pass for a batch on `tape`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        input: &BatchInput<'_, T>,
    ) -> Result<BatchForward, ModelError> {
        validate_input(&self.config, input)?;
        let params = self.register(tape)?;
        let (cells, heads) = (input.n_cells(), self.config.heads);
        let score_scale = T::from_f64(1.0 / (self.config.head_dim() as f64).sqrt());

        let mut x = tape.embed(
            params[0],
            params[1],
            params[2],
            params[3],
            input.gene_ids,
            input.values,
            input.mask,
        )?;
        for l in 0..self.config.layers {
            let p = &params[4 + 16 * l..4 + 16 * (l + 1)];
            let at = |e: TensorError| ModelError::Layer {
                layer: l,
                source: e,
            };
            let h = tape.layer_norm(x, p[0], p[1], LAYER_NORM_EPS).map_err(at)?;
            let q = tape.linear(h, p[2], p[3]).map_err(at)?;
            let k = tape.linear(h, p[4], p[5]).map_err(at)?;
            let v = tape.linear(h, p[6], p[7]).map_err(at)?;
            let q = tape.split_heads(q, cells, heads).map_err(at)?;
            let k = tape.split_heads(k, cells, heads).map_err(at)?;
            let v = tape.split_heads(v, cells, heads).map_err(at)?;
            let scores = tape.bmm(q, k, true).map_err(at)?;
            let scores = tape.scale(scores, score_scale).map_err(at)?;
            let attn = tape.softmax_rows(scores).map_err(at)?;
            let ctx = tape.bmm(attn, v, false).map_err(at)?;
            let ctx = tape.merge_heads(ctx, cells, heads).map_err(at)?;
            let attn_out = tape.linear(ctx, p[8], p[9]).map_err(at)?;
            x = tape.add(x, attn_out).map_err(at)?;

            let h = tape
                .layer_norm(x, p[10], p[11], LAYER_NORM_EPS)
                .map_err(at)?;
            let f = tape.linear(h, p[12], p[13]).map_err(at)?;
            let f = tape.gelu(f).map_err(at)?;
            let f = tape.linear(f, p[14], p[15]).map_err(at)?;
            x = tape.add(x, f).map_err(at)?;
        }
        let n = params.len();
        let predictions = tape.linear(x, params[n - 2], params[n - 1])?;
        Ok(BatchForward {
            predictions,
            hidden: x,
            params,
        })
    }

    /// Token matrix (`tokens x d`) for one cell.
    pub fn embed(
        &self,
        gene_ids: &[usize],
        values: &[T],
        mask: &[bool],
    ) -> Result<Tensor<T>, ModelError> {
        let input = BatchInput {
            tokens_per_cell: gene_ids.len(),
            gene_ids,
            values,
            mask,
        };
        validate_input(&self.config, &input)?;
        let mut tape = Tape::new();
        let table = tape.leaf(self.gene_embedding.clone())?;
        let w = tape.leaf(self.value_proj_weight.clone())?;
        let b = tape.leaf(self.value_proj_bias.clone())?;
        let m = tape.leaf(self.mask_token.clone())?;
        let tokens = tape.embed(table, w, b, m, gene_ids, values, mask)?;
        Ok(tape.value(tokens).clone())
    }

    /// Predictions and pooled embedding for a single cell.
    pub fn forward(
        &self,
        gene_ids: &[usize],
        values: &[T],
        mask: &[bool],
    ) -> Result<ForwardOutput<T>, ModelError> {
        let input = BatchInput {
            tokens_per_cell: gene_ids.len(),
            gene_ids,
            values,
            mask,
        };
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, &input)?;
        let pooled = mean_pool(tape.value(out.hidden), gene_ids.len())
            .into_iter()
            .next()
            .unwrap_or_default();
        Ok(ForwardOutput {
            predictions: tape.value(out.predictions).data().to_vec(),
            pooled,
        })
    }
}

/// Mean over each cell's tokens of a `[cells * tokens, d]` tensor.
pub fn mean_pool<T: Scalar>(hidden: &Tensor<T>, tokens_per_cell: usize) -> Vec<Vec<T>> {
    let d = hidden.last_dim();
    let inv = T::ONE / T::from_usize(tokens_per_cell);
    hidden
        .data()
        .chunks_exact(tokens_per_cell * d)
        .map(|cell| {
            let mut acc = vec![T::ZERO; d];
            for tok in cell.chunks_exact(d) {
                for (a, &v) in acc.iter_mut().zip(tok) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv);
            acc
        })
        .collect()
}
