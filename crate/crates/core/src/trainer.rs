//! Masked-reconstruction training: mask sampling, masked metrics, AdamW with
//! decoupled weight decay, gradient accumulation and clipping, periodic
//! evaluation with a fixed mask set, and best-checkpoint tracking.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, ExpressionMatrix, SplitTag, Stage};
use crate::model::{
    save_checkpoint, BatchInput, CheckpointMeta, ModelConfig, ModelError, ParameterSet,
};
use crate::rng::{stream, Rng};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const METADATA_FILE: &str = "metadata.json";
pub const CHECKPOINT_FILE: &str = "ckpt_best.bin";

/// Effective batch the base learning rate refers to.
const LR_REFERENCE_BATCH: f64 = 256.0;

/// Cells per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot mask {k} of {v} positions")]
    DegenerateMask { k: usize, v: usize },
    #[error("masked metric needs at least one masked position")]
    EmptyMask,
    #[error("length mismatch: pred {pred}, target {target}, mask {mask}")]
    LengthMismatch {
        pred: usize,
        target: usize,
        mask: usize,
    },
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("corpus has no split assignment")]
    MissingSplit,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mask_rate: f64,
    pub physical_batch: usize,
    pub grad_accum: usize,
    pub base_lr_reference: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            physical_batch: 4,
            grad_accum: 8,
            base_lr_reference: 2.5e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 60_000,
            eval_every: 1_000,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.physical_batch * self.grad_accum
    }

    /// Base rate scaled linearly with the effective batch.
    pub fn lr(&self) -> f64 {
        self.base_lr_reference * self.effective_batch() as f64 / LR_REFERENCE_BATCH
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask_rate {} outside (0, 1)", self.mask_rate));
        }
        if self.physical_batch == 0
            || self.grad_accum == 0
            || self.total_steps == 0
            || self.eval_every == 0
        {
            return bad("batch, accumulation, step and eval counts must be >= 1".into());
        }
        if !(self.base_lr_reference > 0.0 && self.base_lr_reference.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.base_lr_reference
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return bad("clip_norm must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Exactly `round(rate * v)` positions, uniform without replacement.
pub fn sample_mask(v: usize, rate: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    let k = mask_count(v, rate)?;
    let mut order: Vec<usize> = (0..v).collect();
    let mut mask = vec![false; v];
    for i in 0..k {
        let j = rng.random_range(i..v);
        order.swap(i, j);
        mask[order[i]] = true;
    }
    Ok(mask)
}

pub fn mask_count(v: usize, rate: f64) -> Result<usize> {
    let k = (rate * v as f64).round() as usize;
    if k == 0 || k >= v {
        return Err(TrainError::DegenerateMask { k, v });
    }
    Ok(k)
}

fn masked_reduce<T: Scalar>(
    pred: &[T],
    target: &[T],
    mask: &[bool],
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
            mask: mask.len(),
        });
    }
    let (mut acc, mut n) = (0.0, 0usize);
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            acc += f(p.to_f64() - t.to_f64());
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(acc / n as f64)
}

/// Mean squared error over masked positions only.
pub fn masked_mse<T: Scalar>(pred: &[T], target: &[T], mask: &[bool]) -> Result<f64> {
    masked_reduce(pred, target, mask, |e| e * e)
}

/// Mean absolute error over masked positions only.
pub fn masked_mae<T: Scalar>(pred: &[T], target: &[T], mask: &[bool]) -> Result<f64> {
    masked_reduce(pred, target, mask, f64::abs)
}

/// Rescales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// AdamW with bias-corrected moments and decoupled weight decay. Moments are
/// kept in f64 regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(
            c.lr(),
            c.adam_beta1,
            c.adam_beta2,
            c.adam_eps,
            c.weight_decay,
        )
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `decays[i]` says whether tensor `i` receives weight decay.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        decays: &[bool],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != decays.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decays.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.first[i].len() != p.len() {
                return Err(TrainError::InvalidConfig(format!(
                    "tensor {i}: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let decay = if decays[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (theta, grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = grad.to_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let t = theta.to_f64();
                let next = t - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * t);
                *theta = T::from_f64(next);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub tokens_seen: u64,
}

/// Run summary; serialized as the run's metadata file. The history lives in
/// its own JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lr: f64,
    pub param_count: u64,
    pub config_hash: String,
    pub seed: u64,
    pub split_seed: Option<u64>,
    pub corpus: String,
    pub best_val_mse: f64,
    pub best_step: u64,
    pub precision: String,
    pub weight_decay_excludes: Vec<String>,
    #[serde(skip)]
    pub history: Vec<HistoryRow>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut rec: RunRecord =
            serde_json::from_str(&fs::read_to_string(dir.join(METADATA_FILE))?)?;
        rec.history = read_history(&dir.join(HISTORY_FILE))?;
        Ok(rec)
    }
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(TrainError::from))
        .collect()
}

pub fn tokens_seen(step: u64, config: &TrainConfig, vocab: usize) -> u64 {
    step * config.effective_batch() as u64 * vocab as u64
}

/// SHA-256 of the canonical JSON of both configs.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("configs serialize");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub best: ParameterSet<f32>,
    pub last: ParameterSet<f32>,
}

/// Masked metrics of `params` over `cells`, each with its own mask.
pub fn evaluate(
    params: &ParameterSet<f32>,
    corpus: &ExpressionMatrix,
    cells: &[usize],
    masks: &[Vec<bool>],
) -> Result<(f64, f64)> {
    let v = corpus.n_genes();
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for (chunk, chunk_masks) in cells.chunks(EVAL_CHUNK).zip(masks.chunks(EVAL_CHUNK)) {
        let (ids, values, mask) = gather(corpus, chunk, chunk_masks);
        let mut tape = Tape::new();
        let out = params.forward_batch(
            &mut tape,
            &BatchInput {
                tokens_per_cell: v,
                gene_ids: &ids,
                values: &values,
                mask: &mask,
            },
        )?;
        let pred = tape.value(out.predictions).data();
        for ((p, t), &m) in pred.iter().zip(&values).zip(&mask) {
            if m {
                let e = f64::from(p - t);
                sq += e * e;
                abs += e.abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok((sq / n as f64, abs / n as f64))
}

fn gather(
    corpus: &ExpressionMatrix,
    cells: &[usize],
    masks: &[Vec<bool>],
) -> (Vec<usize>, Vec<f32>, Vec<bool>) {
    let v = corpus.n_genes();
    let mut ids = Vec::with_capacity(cells.len() * v);
    let mut values = Vec::with_capacity(cells.len() * v);
    let mut mask = Vec::with_capacity(cells.len() * v);
    for (&c, m) in cells.iter().zip(masks) {
        ids.extend(0..v);
        values.extend_from_slice(corpus.row(c));
        mask.extend_from_slice(m);
    }
    (ids, values, mask)
}

/// Shuffled epoch iteration over the training cells; the partial final batch
/// of each epoch is dropped.
struct EpochSampler {
    cells: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl EpochSampler {
    fn new(cells: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            cells,
            cursor: 0,
            rng: stream(seed, "epoch"),
        };
        s.cells.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> &[usize] {
        if self.cursor + size > self.cells.len() {
            self.cells.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = &self.cells[self.cursor..self.cursor + size];
        self.cursor += size;
        batch
    }
}

fn is_non_finite(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Tensor(TensorError::NonFinite { .. })
            | ModelError::Layer {
                source: TensorError::NonFinite { .. },
                ..
            }
    )
}

/// Trains one model. When `out_dir` is given, writes the history file, the
/// metadata file and the best checkpoint there.
pub fn train(
    model: &ModelConfig,
    corpus: &ExpressionMatrix,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    model.validate()?;
    if corpus.stage() != Stage::NormalizedLog1p {
        return Err(CorpusError::WrongStage {
            expected: Stage::NormalizedLog1p,
            found: corpus.stage(),
        }
        .into());
    }
    let v = corpus.n_genes();
    if model.vocab != v {
        return Err(TrainError::InvalidConfig(format!(
            "model vocabulary {} does not match corpus with {v} genes",
            model.vocab
        )));
    }
    let split = corpus.split().ok_or(TrainError::MissingSplit)?;
    let train_cells = split.indices(SplitTag::Train);
    let val_cells = split.indices(SplitTag::Val);
    if val_cells.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    if train_cells.len() < config.physical_batch {
        return Err(TrainError::InvalidConfig(format!(
            "{} training cells cannot fill a batch of {}",
            train_cells.len(),
            config.physical_batch
        )));
    }
    mask_count(v, config.mask_rate)?;

    let mut eval_rng = stream(config.seed, "eval-mask");
    let eval_masks = val_cells
        .iter()
        .map(|_| sample_mask(v, config.mask_rate, &mut eval_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut params = ParameterSet::<f32>::init(model, config.seed)?;
    let decays: Vec<bool> = params.named().iter().map(|(_, k, _)| k.decays()).collect();
    let mut optimizer = AdamW::from_config(config);
    let mut sampler = EpochSampler::new(train_cells, config.seed);
    let mut mask_rng = stream(config.seed, "mask");

    let mut record = RunRecord {
        model: *model,
        train: *config,
        lr: config.lr(),
        param_count: model.param_count(),
        config_hash: config_hash(model, config),
        seed: config.seed,
        split_seed: Some(split.seed()),
        corpus: corpus.provenance().to_string(),
        best_val_mse: f64::INFINITY,
        best_step: 0,
        precision: "f32".into(),
        weight_decay_excludes: vec!["bias".into(), "layer_norm".into()],
        history: Vec::new(),
    };
    let mut history_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(HISTORY_FILE))?))
        }
        None => None,
    };
    let mut best = params.clone();
    let (mut window_loss, mut window_steps) = (0.0, 0u64);

    for step in 1..=config.total_steps {
        let diverged = |detail: String| TrainError::Diverged { step, detail };
        let mut accum: Option<Vec<Tensor<f32>>> = None;
        let mut step_loss = 0.0;
        for _ in 0..config.grad_accum {
            let cells = sampler.next_batch(config.physical_batch).to_vec();
            let masks = cells
                .iter()
                .map(|_| sample_mask(v, config.mask_rate, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let (ids, values, mask) = gather(corpus, &cells, &masks);
            let mut tape = Tape::new();
            let input = BatchInput {
                tokens_per_cell: v,
                gene_ids: &ids,
                values: &values,
                mask: &mask,
            };
            let out = params.forward_batch(&mut tape, &input).map_err(|e| {
                if is_non_finite(&e) {
                    diverged(e.to_string())
                } else {
                    e.into()
                }
            })?;
            let loss = tape
                .masked_mse(out.predictions, &values, &mask)
                .map_err(|e| diverged(e.to_string()))?;
            let loss_value = f64::from(tape.value(loss).data()[0]);
            if !loss_value.is_finite() {
                return Err(diverged(format!("loss {loss_value}")));
            }
            step_loss += loss_value;
            let mut grads = tape.backward(loss).map_err(|e| diverged(e.to_string()))?;
            match accum.as_mut() {
                None => accum = Some(out.params.iter().map(|&p| grads.take(p)).collect()),
                Some(acc) => {
                    for (a, &p) in acc.iter_mut().zip(&out.params) {
                        a.add_assign(&grads.take(p))?;
                    }
                }
            }
        }
        let mut grads = accum.expect("grad_accum >= 1");
        let inv = 1.0 / config.grad_accum as f32;
        for g in grads.iter_mut() {
            g.scale_in_place(inv);
        }
        let norm = clip_global_norm(&mut grads, config.clip_norm);
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm {norm}")));
        }
        {
            let mut slots: Vec<&mut Tensor<f32>> =
                params.named_mut().into_iter().map(|(_, _, t)| t).collect();
            optimizer.step(&mut slots, &grads, &decays)?;
        }
        window_loss += step_loss / config.grad_accum as f64;
        window_steps += 1;

        if step % config.eval_every == 0 || step == config.total_steps {
            let (val_mse, val_mae) =
                evaluate(&params, corpus, &split.indices(SplitTag::Val), &eval_masks)?;
            if !val_mse.is_finite() {
                return Err(diverged(format!("validation mse {val_mse}")));
            }
            let row = HistoryRow {
                step,
                train_mse: window_loss / window_steps as f64,
                val_mse,
                val_mae,
                tokens_seen: tokens_seen(step, config, v),
            };
            (window_loss, window_steps) = (0.0, 0);
            if let Some(f) = history_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&row)?)?;
                f.flush()?;
            }
            record.history.push(row);
            if val_mse < record.best_val_mse {
                record.best_val_mse = val_mse;
                record.best_step = step;
                best = params.clone();
                if let Some(dir) = out_dir {
                    let meta = CheckpointMeta {
                        config: *model,
                        seed: config.seed,
                        step,
                        best_val_mse: val_mse,
                    };
                    save_checkpoint(&best, &meta, &dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
    }

    if let Some(dir) = out_dir {
        write_metadata(&record, dir)?;
    }
    Ok(TrainOutput {
        record,
        best,
        last: params,
    })
}

fn write_metadata(record: &RunRecord, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(METADATA_FILE);
    fs::write(&path, serde_json::to_string_pretty(record)? + "\n")?;
    Ok(path)
}
