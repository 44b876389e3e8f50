//! Finetuning in four regimes: concat, soup (full), soup (decoder-only) and
//! QA-only, with document-level activation checkpointing, gradient
//! accumulation, global clipping and the warmup+cosine schedule.
//!
//! Per-document work runs on the worker pool; every reduction into the
//! shared gradient buffer happens in document order, so a fixed seed gives
//! an identical loss trajectory no matter how many threads ran.

mod optim;

pub use optim::{cosine_lr, AdamW, AdamWOpts};

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::PAD_ID;
use crate::data::{format_input, Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, LayerState, Model, ModelGrads, ModelState, TrainPass};
use crate::parallel;
use crate::soup::{pool_states, pool_states_traced, SoupConfig};
use crate::tensor::{cross_entropy_with_grad, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Concat,
    SoupFull,
    SoupDecoderOnly,
    QaOnly,
}

impl TrainMode {
    pub fn is_soup(self) -> bool {
        matches!(self, TrainMode::SoupFull | TrainMode::SoupDecoderOnly)
    }
}

fn default_lr_max() -> f64 {
    3e-4
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_warmup_frac() -> f64 {
    0.10
}
fn default_clip_norm() -> f64 {
    1.0
}
fn default_grad_accum() -> usize {
    4
}
fn default_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    #[serde(default)]
    pub soup_cfg: SoupConfig,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_grad_accum")]
    pub grad_accum_steps: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub checkpoint_docs: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            soup_cfg: SoupConfig::default(),
            lr_max: default_lr_max(),
            betas: default_betas(),
            weight_decay: default_weight_decay(),
            warmup_frac: default_warmup_frac(),
            clip_norm: default_clip_norm(),
            grad_accum_steps: default_grad_accum(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            checkpoint_docs: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0) {
            return Err(Error::Config(format!("lr_max must be > 0, got {}", self.lr_max)));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac must be in (0, 1), got {}",
                self.warmup_frac
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        for (name, v) in [
            ("grad_accum_steps", self.grad_accum_steps),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        Ok(())
    }

    fn adamw_opts(&self) -> AdamWOpts {
        AdamWOpts {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

/// Tracks live tape floats so tests can pin peak activation memory.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl ActivationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&self, n: usize) {
        let cur = self.current.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(cur, Ordering::SeqCst);
    }

    fn sub(&self, n: usize) {
        self.current.fetch_sub(n, Ordering::SeqCst);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

fn meter_add<E: Scalar>(meter: Option<&ActivationMeter>, pass: &TrainPass<E>) -> usize {
    let n = pass.float_count();
    if let Some(m) = meter {
        m.add(n);
    }
    n
}

fn meter_sub(meter: Option<&ActivationMeter>, n: usize) {
    if let Some(m) = meter {
        m.sub(n);
    }
}

/// Left-pad every document to a common length, the doc-batch layout. Pads
/// are state-neutral so this never changes the encoded states.
fn left_pad(docs: &mut [Vec<usize>]) {
    let max = docs.iter().map(Vec::len).max().unwrap_or(0);
    for d in docs.iter_mut() {
        if d.len() < max {
            let mut padded = vec![PAD_ID; max];
            padded[max - d.len()..].copy_from_slice(d);
            *d = padded;
        }
    }
}

/// Next-token targets and loss mask: position `t` is scored iff token `t+1`
/// is an answer token (or the closing eos).
fn shifted_targets(tokens: &[usize], answer_mask: &[bool]) -> (Vec<usize>, Vec<bool>) {
    let t_len = tokens.len();
    let mut targets = vec![0usize; t_len];
    let mut mask = vec![false; t_len];
    for t in 0..t_len.saturating_sub(1) {
        targets[t] = tokens[t + 1];
        mask[t] = answer_mask[t + 1];
    }
    (targets, mask)
}

/// Document encodes whose activations were dropped; the backward pass
/// recomputes each document's forward on the fly, one document at a time,
/// so peak activation memory does not grow with the number of documents.
pub struct CheckpointedDocEncode<E> {
    doc_tokens: Vec<Vec<usize>>,
    pub states: Vec<Vec<Tensor<E>>>,
}

pub fn checkpointed_encode<E: Scalar>(
    model: &Model<E>,
    docs: &[Vec<usize>],
) -> Result<CheckpointedDocEncode<E>> {
    let states: Result<Vec<Vec<Tensor<E>>>> = parallel::map_collect(docs, |d| {
        let st = model.encode(d, None)?;
        Ok(st.layers.into_iter().map(|l| l.s).collect())
    })
    .into_iter()
    .collect();
    Ok(CheckpointedDocEncode {
        doc_tokens: docs.to_vec(),
        states: states?,
    })
}

impl<E: Scalar> CheckpointedDocEncode<E> {
    pub fn backward(
        &self,
        model: &Model<E>,
        d_states: &[Vec<Tensor<E>>],
        grads: &mut ModelGrads<E>,
        meter: Option<&ActivationMeter>,
    ) -> Result<()> {
        debug_assert_eq!(d_states.len(), self.doc_tokens.len());
        for (doc, d_state) in self.doc_tokens.iter().zip(d_states) {
            let pass = model.forward_train(doc, None, None)?;
            let n = meter_add(meter, &pass);
            let mut buf = ModelGrads::zeros(model.config());
            model.backward(&pass, None, Some(d_state), &mut buf);
            grads.add_assign(&buf);
            meter_sub(meter, n);
        }
        Ok(())
    }
}

fn states_to_model_state<E: Scalar>(
    model: &Model<E>,
    layers: &[Tensor<E>],
    token_count: usize,
) -> ModelState<E> {
    ModelState {
        layers: layers.iter().map(|s| LayerState { s: s.clone() }).collect(),
        model_fingerprint: model.fingerprint(),
        source_token_count: token_count,
    }
}

/// Loss + gradients for one example; `scale` folds in batch-size and
/// accumulation weighting.
fn example_grads<E: Scalar>(
    model: &Model<E>,
    ex: &Example,
    cfg: &TrainConfig,
    vocab: &Vocab,
    scale: E,
    meter: Option<&ActivationMeter>,
) -> Result<(E, ModelGrads<E>)> {
    let mut grads = ModelGrads::zeros(model.config());
    let loss = match cfg.mode {
        TrainMode::Concat => {
            let f = format_input(ex, false, vocab)?;
            joint_loss(model, &f.token_ids, &f.answer_mask, scale, meter, &mut grads)?
        }
        TrainMode::QaOnly => {
            // no documents: the formatted input never touches doc text
            let stripped = Example {
                docs: Vec::new(),
                ..ex.clone()
            };
            let f = format_input(&stripped, false, vocab)?;
            joint_loss(model, &f.token_ids, &f.answer_mask, scale, meter, &mut grads)?
        }
        TrainMode::SoupFull | TrainMode::SoupDecoderOnly => {
            let f = format_input(ex, true, vocab)?;
            if f.segment_spans.is_empty() {
                return Err(Error::Pipeline(
                    "soup training needs at least one document segment".into(),
                ));
            }
            let mut docs: Vec<Vec<usize>> =
                (0..f.segment_spans.len()).map(|i| f.doc_tokens(i).to_vec()).collect();
            left_pad(&mut docs);
            let qa = f.qa_tokens().to_vec();
            let (targets, mask) = shifted_targets(&qa, f.qa_answer_mask());
            let from = mask
                .iter()
                .position(|m| *m)
                .ok_or_else(|| Error::InvalidExample("no scored positions".into()))?;

            match cfg.mode {
                TrainMode::SoupDecoderOnly => {
                    // the pooled state is a constant here: no gradient flows
                    // into the document-encoding pass
                    let states: Result<Vec<ModelState<E>>> =
                        parallel::map_collect(&docs, |d| model.encode(d, None))
                            .into_iter()
                            .collect();
                    let pooled = pool_states(&states?, &cfg.soup_cfg)?;
                    let (loss, _) = decode_loss(
                        model, &qa, &targets, &mask, from, &pooled, scale, meter, &mut grads,
                    )?;
                    loss
                }
                TrainMode::SoupFull if cfg.checkpoint_docs => {
                    let enc = checkpointed_encode(model, &docs)?;
                    let pool = pool_states_traced(&enc.states, &cfg.soup_cfg)?;
                    let token_count: usize = docs.iter().map(|d| d.len()).sum();
                    let injected = states_to_model_state(model, &pool.pooled, token_count);
                    let (loss, d_injected) = decode_loss(
                        model, &qa, &targets, &mask, from, &injected, scale, meter, &mut grads,
                    )?;
                    let d_docs = pool.backward(&d_injected);
                    enc.backward(model, &d_docs, &mut grads, meter)?;
                    loss
                }
                _ => {
                    // direct path: keep every document's tape alive
                    let passes: Result<Vec<TrainPass<E>>> =
                        parallel::map_collect(&docs, |d| model.forward_train(d, None, None))
                            .into_iter()
                            .collect();
                    let passes = passes?;
                    let tape_floats: usize = passes.iter().map(|p| p.float_count()).sum();
                    if let Some(m) = meter {
                        m.add(tape_floats);
                    }
                    let doc_states: Vec<Vec<Tensor<E>>> =
                        passes.iter().map(|p| p.final_state().to_vec()).collect();
                    let pool = pool_states_traced(&doc_states, &cfg.soup_cfg)?;
                    let token_count: usize = docs.iter().map(|d| d.len()).sum();
                    let injected = states_to_model_state(model, &pool.pooled, token_count);
                    let (loss, d_injected) = decode_loss(
                        model, &qa, &targets, &mask, from, &injected, scale, meter, &mut grads,
                    )?;
                    let d_docs = pool.backward(&d_injected);
                    let bufs: Vec<ModelGrads<E>> = parallel::map_collect(
                        &passes.iter().zip(&d_docs).collect::<Vec<_>>(),
                        |(pass, d_state)| {
                            let mut buf = ModelGrads::zeros(model.config());
                            model.backward(pass, None, Some(d_state), &mut buf);
                            buf
                        },
                    );
                    for buf in &bufs {
                        grads.add_assign(buf);
                    }
                    meter_sub(meter, tape_floats);
                    loss
                }
            }
        }
    };
    Ok((loss, grads))
}

/// Joint-sequence loss (concat / qa-only): one forward over the whole
/// sequence, cross entropy on the answer positions.
fn joint_loss<E: Scalar>(
    model: &Model<E>,
    tokens: &[usize],
    answer_mask: &[bool],
    scale: E,
    meter: Option<&ActivationMeter>,
    grads: &mut ModelGrads<E>,
) -> Result<E> {
    let (targets, mask) = shifted_targets(tokens, answer_mask);
    let from = mask
        .iter()
        .position(|m| *m)
        .ok_or_else(|| Error::InvalidExample("no scored positions".into()))?;
    let pass = model.forward_train(tokens, None, Some(from))?;
    let n = meter_add(meter, &pass);
    let logits = pass.logits.as_ref().expect("logits requested");
    let (loss, mut dlogits) = cross_entropy_with_grad(logits, &targets[from..], &mask[from..])?;
    dlogits.scale(scale);
    model.backward(&pass, Some(&dlogits), None, grads);
    meter_sub(meter, n);
    Ok(loss)
}

/// Decode the QA tail from an injected state and backprop the answer loss.
/// Returns the loss and the gradient w.r.t. the injected state.
#[allow(clippy::too_many_arguments)]
fn decode_loss<E: Scalar>(
    model: &Model<E>,
    qa: &[usize],
    targets: &[usize],
    mask: &[bool],
    from: usize,
    injected: &ModelState<E>,
    scale: E,
    meter: Option<&ActivationMeter>,
    grads: &mut ModelGrads<E>,
) -> Result<(E, Vec<Tensor<E>>)> {
    let pass = model.forward_train(qa, Some(injected), Some(from))?;
    let n = meter_add(meter, &pass);
    let logits = pass.logits.as_ref().expect("logits requested");
    let (loss, mut dlogits) = cross_entropy_with_grad(logits, &targets[from..], &mask[from..])?;
    dlogits.scale(scale);
    let d_injected = model.backward(&pass, Some(&dlogits), None, grads);
    meter_sub(meter, n);
    Ok((loss, d_injected))
}

/// One micro-batch: accumulate gradients into the parameters, return the
/// mean loss. The optimizer runs separately, every `grad_accum_steps` calls.
pub fn train_step<E: Scalar>(
    model: &mut Model<E>,
    batch: &[Example],
    cfg: &TrainConfig,
    vocab: &Vocab,
    meter: Option<&ActivationMeter>,
) -> Result<E> {
    if batch.is_empty() {
        return Err(Error::Pipeline("empty micro-batch".into()));
    }
    let scale = E::from_f64(1.0 / (batch.len() as f64 * cfg.grad_accum_steps as f64));
    let shared: &Model<E> = model;
    let results: Vec<Result<(E, ModelGrads<E>)>> = parallel::map_collect(batch, |ex| {
        example_grads(shared, ex, cfg, vocab, scale, meter)
    });
    let mut total = E::zero();
    let mut buffers = Vec::with_capacity(results.len());
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        buffers.push(grads);
    }
    for buf in &buffers {
        model.accumulate_grads(buf);
    }
    Ok(total / E::from_f64(batch.len() as f64))
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSink {
    pub log_csv: Option<PathBuf>,
    pub ckpt_dir: Option<PathBuf>,
    /// Save a checkpoint every this many optimizer steps (0 = final only).
    pub ckpt_every: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub total_steps: usize,
}

/// Full training loop: seeded shuffling per epoch, gradient accumulation,
/// cosine schedule, CSV logging, periodic checkpoints.
pub fn train(
    model: &mut Model<f32>,
    data: &[Example],
    cfg: &TrainConfig,
    vocab: &Vocab,
    sink: Option<&TrainSink>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidExample("empty training set".into()));
    }
    let micro_per_epoch = data.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum_steps);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut opt = AdamW::new_for(&model.parameters());
    let opts = cfg.adamw_opts();
    let mut log = Vec::with_capacity(total_steps);
    let mut csv = match sink.and_then(|s| s.log_csv.as_ref()) {
        Some(path) => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut f = fs::File::create(path)?;
            writeln!(f, "step,lr,loss,grad_norm")?;
            Some(f)
        }
        None => None,
    };

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9e3779b9)));
        order.shuffle(&mut rng);

        let mut micro_in_group = 0usize;
        let mut loss_sum = 0.0f64;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let n_chunks = chunks.len();
        for (ci, chunk) in chunks.into_iter().enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let loss = train_step(model, &batch, cfg, vocab, None)?;
            loss_sum += loss.into_f64();
            micro_in_group += 1;

            if micro_in_group == cfg.grad_accum_steps || ci + 1 == n_chunks {
                let lr = cosine_lr((step + 1).min(total_steps), total_steps, cfg.lr_max, cfg.warmup_frac);
                let gnorm = opt.step(&mut model.parameters_mut(), lr, &opts);
                model.refresh_fingerprint();
                step += 1;
                let entry = StepLog {
                    step,
                    lr,
                    loss: loss_sum / micro_in_group as f64,
                    grad_norm: gnorm.into_f64(),
                };
                if let Some(f) = csv.as_mut() {
                    writeln!(
                        f,
                        "{},{},{},{}",
                        entry.step, entry.lr, entry.loss, entry.grad_norm
                    )?;
                }
                log.push(entry);
                micro_in_group = 0;
                loss_sum = 0.0;

                if let Some(s) = sink {
                    if s.ckpt_every > 0 && step % s.ckpt_every == 0 {
                        if let Some(dir) = &s.ckpt_dir {
                            save_checkpoint(model, &dir.join(format!("checkpoint_{step}.ckpt")))?;
                        }
                    }
                }
            }
        }
    }
    if let Some(dir) = sink.and_then(|s| s.ckpt_dir.as_ref()) {
        save_checkpoint(model, &dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { log, total_steps })
}
