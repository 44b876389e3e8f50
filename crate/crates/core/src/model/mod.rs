//! A minimal selective state-space layer stack.
//!
//! Maps token sequences to logits and exposes the per-layer final recurrent
//! states, which are what gets pooled, cached and injected. One parameter set
//! serves both roles: encoding documents into states and decoding answers
//! from an injected state.

mod io;
mod layer;

pub use io::{load_checkpoint, save_checkpoint};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{rmsnorm_row, rmsnorm_row_backward, Parameter, Scalar, Tensor};

use layer::{matvec, matvec_t_acc, outer_acc, LayerTape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub n_heads: usize,
    pub eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("n_heads", self.n_heads),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.d_inner % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_inner {} not divisible by n_heads {}",
                self.d_inner, self.n_heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_inner / self.n_heads
    }

    /// Flat length of one layer state: n_heads * d_head * d_state.
    pub fn state_len(&self) -> usize {
        self.d_inner * self.d_state
    }

    pub fn state_shape(&self) -> [usize; 3] {
        [self.n_heads, self.d_head(), self.d_state]
    }
}

/// Weights of one layer, in checkpoint declaration order.
#[derive(Debug, Clone)]
pub struct LayerParams<E> {
    pub w_in: Parameter<E>,     // [d_inner, d_model]
    pub w_z: Parameter<E>,      // [d_inner, d_model]
    pub w_b: Parameter<E>,      // [d_state, d_model]
    pub w_c: Parameter<E>,      // [d_state, d_model]
    pub w_dt: Parameter<E>,     // [n_heads, d_model]
    pub b_dt: Parameter<E>,     // [n_heads]
    pub a_decay: Parameter<E>,  // [n_heads], softplus-mapped at use
    pub w_out: Parameter<E>,    // [d_model, d_inner]
    pub norm_gain: Parameter<E>, // [d_model]
}

/// The fixed-size recurrent state of one layer. Its shape depends only on
/// the model config, never on sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<E> {
    pub s: Tensor<E>,
}

impl<E: Scalar> LayerState<E> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        LayerState {
            s: Tensor::zeros(&cfg.state_shape()),
        }
    }
}

/// Per-layer recurrent states plus the identity of the model that produced
/// them. States pooled together must share the fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<E> {
    pub layers: Vec<LayerState<E>>,
    pub model_fingerprint: [u8; 32],
    pub source_token_count: usize,
}

impl<E: Scalar> ModelState<E> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.s.all_finite())
    }
}

pub struct Model<E> {
    config: ModelConfig,
    pub embedding: Parameter<E>,  // [vocab, d_model]
    pub layers: Vec<LayerParams<E>>,
    pub final_norm: Parameter<E>, // [d_model]
    pub lm_head: Parameter<E>,    // [vocab, d_model]
    fingerprint: [u8; 32],
    encode_calls: AtomicUsize,
}

impl<E: Scalar> Clone for Model<E> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            embedding: self.embedding.clone(),
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head.clone(),
            fingerprint: self.fingerprint,
            encode_calls: AtomicUsize::new(0),
        }
    }
}

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

impl<E: Scalar> Model<E> {
    /// Deterministic initialization from `config.seed`; weights scaled by
    /// 1/sqrt(fan_in), delta bias set so softplus(b_dt) is 0.5 at init.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, i, n, h) = (
            config.vocab_size,
            config.d_model,
            config.d_inner,
            config.d_state,
            config.n_heads,
        );
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, || E::from_f64(dist.sample(rng)))
        };

        let embedding = Parameter::new("embedding", normal(&[v, d], 1.0 / (d as f64).sqrt(), &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        let in_std = 1.0 / (d as f64).sqrt();
        let b_dt_init = E::from_f64(softplus_inv(0.5));
        for l in 0..config.n_layers {
            // effective decay rates spread geometrically across heads: slow
            // heads hold long-range content, fast heads give the stack a
            // recency channel (there is no local convolution to do it)
            let a_init: Vec<E> = (0..h)
                .map(|hh| {
                    let (lo, hi) = (0.02f64, 4.0f64);
                    let a_eff = if h == 1 {
                        0.3
                    } else {
                        lo * (hi / lo).powf(hh as f64 / (h - 1) as f64)
                    };
                    E::from_f64(softplus_inv(a_eff))
                })
                .collect();
            layers.push(LayerParams {
                w_in: Parameter::new(format!("layer{l}.w_in"), normal(&[i, d], in_std, &mut rng)),
                w_z: Parameter::new(format!("layer{l}.w_z"), normal(&[i, d], in_std, &mut rng)),
                w_b: Parameter::new(format!("layer{l}.w_b"), normal(&[n, d], in_std, &mut rng)),
                w_c: Parameter::new(format!("layer{l}.w_c"), normal(&[n, d], in_std, &mut rng)),
                w_dt: Parameter::new(format!("layer{l}.w_dt"), normal(&[h, d], in_std, &mut rng)),
                b_dt: Parameter::new(
                    format!("layer{l}.b_dt"),
                    Tensor::from_fn(&[h], || b_dt_init),
                ),
                a_decay: Parameter::new(
                    format!("layer{l}.a_decay"),
                    Tensor::from_vec(&[h], a_init).expect("shape"),
                ),
                // the block output starts at zero so the residual stream
                // keeps clean token identity at init; the recurrent readout
                // otherwise swamps the embeddings by orders of magnitude
                w_out: Parameter::new(format!("layer{l}.w_out"), Tensor::zeros(&[d, i])),
                norm_gain: Parameter::new(
                    format!("layer{l}.norm_gain"),
                    Tensor::from_fn(&[d], E::one),
                ),
            });
        }
        let final_norm = Parameter::new("final_norm", Tensor::from_fn(&[d], E::one));
        let lm_head = Parameter::new("lm_head", normal(&[v, d], 1.0 / (d as f64).sqrt(), &mut rng));

        let mut model = Model {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
            fingerprint: [0; 32],
            encode_calls: AtomicUsize::new(0),
        };
        model.refresh_fingerprint();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Hash of the config plus a checksum of every parameter value.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// Recompute the fingerprint; must be called after mutating parameter
    /// values (the optimizer does).
    pub fn refresh_fingerprint(&mut self) {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let mut buf = Vec::new();
        for p in self.parameters() {
            buf.clear();
            buf.reserve(p.value.len() * 8);
            for v in p.value.data() {
                buf.extend_from_slice(&v.into_f64().to_le_bytes());
            }
            hasher.update(&buf);
        }
        self.fingerprint = hasher.finalize().into();
    }

    /// Parameters in declaration order (the checkpoint layout).
    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut v: Vec<&Parameter<E>> = Vec::with_capacity(3 + self.layers.len() * 9);
        v.push(&self.embedding);
        for l in &self.layers {
            v.extend([
                &l.w_in, &l.w_z, &l.w_b, &l.w_c, &l.w_dt, &l.b_dt, &l.a_decay, &l.w_out,
                &l.norm_gain,
            ]);
        }
        v.push(&self.final_norm);
        v.push(&self.lm_head);
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut v: Vec<&mut Parameter<E>> = Vec::with_capacity(3 + self.layers.len() * 9);
        v.push(&mut self.embedding);
        for l in &mut self.layers {
            v.extend([
                &mut l.w_in,
                &mut l.w_z,
                &mut l.w_b,
                &mut l.w_c,
                &mut l.w_dt,
                &mut l.b_dt,
                &mut l.a_decay,
                &mut l.w_out,
                &mut l.norm_gain,
            ]);
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.lm_head);
        v
    }

    pub fn zero_state(&self) -> ModelState<E> {
        ModelState {
            layers: (0..self.config.n_layers)
                .map(|_| LayerState::zeros(&self.config))
                .collect(),
            model_fingerprint: self.fingerprint,
            source_token_count: 0,
        }
    }

    pub fn num_param_values(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    /// Number of `encode` calls since the last reset. Instrumentation for
    /// cache-transparency and qa-only tests.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn reset_encode_calls(&self) {
        self.encode_calls.store(0, Ordering::Relaxed);
    }

    fn check_state(&self, state: &ModelState<E>) -> Result<()> {
        if state.model_fingerprint != self.fingerprint {
            return Err(Error::StaleState);
        }
        if state.layers.len() != self.config.n_layers {
            return Err(Error::ShapeMismatch {
                left: format!("{} state layers", state.layers.len()),
                right: format!("{} model layers", self.config.n_layers),
            });
        }
        Ok(())
    }

    /// Token ids -> embedding stream plus pad mask.
    fn embed(&self, tokens: &[usize]) -> Result<(Vec<E>, Vec<bool>)> {
        if tokens.is_empty() {
            return Err(Error::InvalidExample("empty token sequence".into()));
        }
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        let mut xs = vec![E::zero(); tokens.len() * d];
        let mut pads = vec![false; tokens.len()];
        let emb = self.embedding.value.data();
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= v {
                return Err(Error::Vocab(format!("token id {tok} >= vocab size {v}")));
            }
            pads[t] = tok == PAD_ID;
            xs[t * d..(t + 1) * d].copy_from_slice(&emb[tok * d..(tok + 1) * d]);
        }
        Ok((xs, pads))
    }

    fn initial_raw(&self, initial: Option<&ModelState<E>>) -> Result<(Vec<Tensor<E>>, usize)> {
        match initial {
            Some(st) => {
                self.check_state(st)?;
                // cloned so injected/cached states are never mutated
                Ok((
                    st.layers.iter().map(|l| l.s.clone()).collect(),
                    st.source_token_count,
                ))
            }
            None => Ok((
                (0..self.config.n_layers)
                    .map(|_| Tensor::zeros(&self.config.state_shape()))
                    .collect(),
                0,
            )),
        }
    }

    fn head_logits_row(&self, x_final: &[E], out: &mut [E]) {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        let mut xn = x_final.to_vec();
        rmsnorm_row(&mut xn, self.final_norm.value.data(), E::from_f64(self.config.eps));
        matvec(self.lm_head.value.data(), v, d, &xn, out);
    }

    /// Inference pass: run the stack from `initial`, returning logits for
    /// positions `logits_from..` and the final state. No tape is recorded.
    pub fn forward_from(
        &self,
        tokens: &[usize],
        initial: Option<&ModelState<E>>,
        logits_from: usize,
    ) -> Result<(Tensor<E>, ModelState<E>)> {
        let (mut xs, pads) = self.embed(tokens)?;
        let (mut states, init_count) = self.initial_raw(initial)?;
        for (l, p) in self.layers.iter().enumerate() {
            xs = layer::layer_forward(&self.config, p, &xs, &pads, states[l].data_mut(), None);
        }
        let t_len = tokens.len();
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let n_logit = t_len.saturating_sub(logits_from);
        let mut logits = Tensor::zeros(&[n_logit, v]);
        for t in logits_from..t_len {
            let row = &xs[t * d..(t + 1) * d];
            self.head_logits_row(row, &mut logits.data_mut()[(t - logits_from) * v..(t - logits_from + 1) * v]);
        }
        let nonpad = pads.iter().filter(|p| !**p).count();
        let state = ModelState {
            layers: states.into_iter().map(|s| LayerState { s }).collect(),
            model_fingerprint: self.fingerprint,
            source_token_count: init_count + nonpad,
        };
        Ok((logits, state))
    }

    /// Run the stack over `tokens` starting from `initial` (or zero) and
    /// return the final per-layer states. Pad tokens pass the state through.
    pub fn encode(&self, tokens: &[usize], initial: Option<&ModelState<E>>) -> Result<ModelState<E>> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let t_len = tokens.len();
        let (_, state) = self.forward_from(tokens, initial, t_len)?;
        Ok(state)
    }

    /// Decode `query` conditioned on an injected state: the same layer stack,
    /// initialized from the state's per-layer tensors. Returns `[T, V]`
    /// logits. The injected state is cloned, never mutated.
    pub fn decode(&self, query: &[usize], injected: &ModelState<E>) -> Result<Tensor<E>> {
        let (logits, _) = self.forward_from(query, Some(injected), 0)?;
        Ok(logits)
    }

    /// Joint pass from the zero state; logits for every position.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<E>> {
        let (logits, _) = self.forward_from(tokens, None, 0)?;
        Ok(logits)
    }

    /// Forward with full tape recording for a later [`Model::backward`].
    pub fn forward_train(
        &self,
        tokens: &[usize],
        initial: Option<&ModelState<E>>,
        logits_from: Option<usize>,
    ) -> Result<TrainPass<E>> {
        let (mut xs, pads) = self.embed(tokens)?;
        let (mut states, _) = self.initial_raw(initial)?;
        let t_len = tokens.len();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let mut tape = layer::new_tape(&self.config, t_len, states[l].data());
            xs = layer::layer_forward(
                &self.config,
                p,
                &xs,
                &pads,
                states[l].data_mut(),
                Some(&mut tape),
            );
            tapes.push(tape);
        }
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let from = logits_from.unwrap_or(t_len);
        let logits = if from < t_len {
            let mut lg = Tensor::zeros(&[t_len - from, v]);
            for t in from..t_len {
                let row = &xs[t * d..(t + 1) * d];
                self.head_logits_row(row, &mut lg.data_mut()[(t - from) * v..(t - from + 1) * v]);
            }
            Some(lg)
        } else {
            None
        };
        let nonpad = pads.iter().filter(|p| !**p).count();
        Ok(TrainPass {
            tokens: tokens.to_vec(),
            logits_from: from,
            logits,
            tapes,
            xs_final: xs,
            final_state: states,
            nonpad_tokens: nonpad,
        })
    }

    /// Hand-written backward through a recorded pass.
    ///
    /// `dlogits` matches `pass.logits`; `ds_final` is the gradient w.r.t. the
    /// final per-layer states (for passes whose state flows onward, e.g. into
    /// pooling). Parameter gradients accumulate into `grads`; the return
    /// value is the gradient w.r.t. the initial per-layer states.
    pub fn backward(
        &self,
        pass: &TrainPass<E>,
        dlogits: Option<&Tensor<E>>,
        ds_final: Option<&[Tensor<E>]>,
        grads: &mut ModelGrads<E>,
    ) -> Vec<Tensor<E>> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let t_len = pass.tokens.len();
        let mut dxs = vec![E::zero(); t_len * d];

        if let Some(dl) = dlogits {
            debug_assert_eq!(dl.shape()[0], t_len - pass.logits_from);
            let eps = E::from_f64(self.config.eps);
            let gain = self.final_norm.value.data();
            let mut dxn = vec![E::zero(); d];
            let mut xn = vec![E::zero(); d];
            for t in pass.logits_from..t_len {
                let drow = &dl.data()[(t - pass.logits_from) * v..(t - pass.logits_from + 1) * v];
                if drow.iter().all(|g| *g == E::zero()) {
                    continue;
                }
                let xrow = &pass.xs_final[t * d..(t + 1) * d];
                xn.copy_from_slice(xrow);
                rmsnorm_row(&mut xn, gain, eps);
                outer_acc(grads.lm_head.data_mut(), drow, &xn);
                dxn.iter_mut().for_each(|g| *g = E::zero());
                matvec_t_acc(self.lm_head.value.data(), v, d, drow, &mut dxn);
                rmsnorm_row_backward(
                    xrow,
                    gain,
                    eps,
                    &dxn,
                    &mut dxs[t * d..(t + 1) * d],
                    grads.final_norm.data_mut(),
                );
            }
        }

        let mut ds0 = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let dsf = ds_final.map(|v| v[l].data());
            let (dx_prev, ds_init) = layer::layer_backward(
                &self.config,
                &self.layers[l],
                &pass.tapes[l],
                &dxs,
                dsf,
                &mut grads.layers[l],
            );
            dxs = dx_prev;
            ds0.push(Tensor::from_vec(&self.config.state_shape(), ds_init).expect("state shape"));
        }
        ds0.reverse();

        let gemb = grads.embedding.data_mut();
        for (t, &tok) in pass.tokens.iter().enumerate() {
            let grow = &mut gemb[tok * d..(tok + 1) * d];
            for (g, dv) in grow.iter_mut().zip(&dxs[t * d..(t + 1) * d]) {
                *g += *dv;
            }
        }
        ds0
    }

    /// Add a gradient buffer into the parameters' accumulated grads.
    pub fn accumulate_grads(&mut self, grads: &ModelGrads<E>) {
        let slots = grads.iter();
        for (p, g) in self.parameters_mut().into_iter().zip(slots) {
            p.grad.add_assign(g);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

/// One step of a single layer on one input vector. Exposed for the linearity
/// and zero-case contracts; [`layer_forward`](Model::forward_from) is the
/// streaming form.
pub fn layer_step<E: Scalar>(
    cfg: &ModelConfig,
    params: &LayerParams<E>,
    x: &Tensor<E>,
    s_prev: &LayerState<E>,
) -> Result<(Tensor<E>, LayerState<E>)> {
    if x.shape() != [cfg.d_model] {
        return Err(Error::ShapeMismatch {
            left: format!("{:?}", x.shape()),
            right: format!("[{}]", cfg.d_model),
        });
    }
    let mut s = s_prev.s.clone();
    let out = layer::layer_forward(cfg, params, x.data(), &[false], s.data_mut(), None);
    Ok((Tensor::from_vec(&[cfg.d_model], out)?, LayerState { s }))
}

/// A recorded forward pass: tapes for every layer plus the outputs.
pub struct TrainPass<E> {
    tokens: Vec<usize>,
    logits_from: usize,
    pub logits: Option<Tensor<E>>,
    tapes: Vec<LayerTape<E>>,
    xs_final: Vec<E>,
    final_state: Vec<Tensor<E>>,
    nonpad_tokens: usize,
}

impl<E: Scalar> TrainPass<E> {
    pub fn final_state(&self) -> &[Tensor<E>] {
        &self.final_state
    }

    pub fn nonpad_tokens(&self) -> usize {
        self.nonpad_tokens
    }

    pub fn final_model_state(&self, model: &Model<E>) -> ModelState<E> {
        ModelState {
            layers: self
                .final_state
                .iter()
                .map(|s| LayerState { s: s.clone() })
                .collect(),
            model_fingerprint: model.fingerprint(),
            source_token_count: self.nonpad_tokens,
        }
    }

    /// Cached activation floats held by this pass (tape memory meter).
    pub fn float_count(&self) -> usize {
        self.tapes.iter().map(|t| t.float_count()).sum::<usize>()
            + self.xs_final.len()
            + self.logits.as_ref().map_or(0, |l| l.len())
    }
}

/// Gradient buffer for one layer, mirroring [`LayerParams`].
#[derive(Debug, Clone)]
pub struct LayerGrads<E> {
    pub w_in: Tensor<E>,
    pub w_z: Tensor<E>,
    pub w_b: Tensor<E>,
    pub w_c: Tensor<E>,
    pub w_dt: Tensor<E>,
    pub b_dt: Tensor<E>,
    pub a_decay: Tensor<E>,
    pub w_out: Tensor<E>,
    pub norm_gain: Tensor<E>,
}

/// Gradient buffer mirroring the whole model. Per-document backward passes
/// each fill their own buffer; buffers are then reduced in a canonical order
/// so training stays deterministic under parallel execution.
#[derive(Debug, Clone)]
pub struct ModelGrads<E> {
    pub embedding: Tensor<E>,
    pub layers: Vec<LayerGrads<E>>,
    pub final_norm: Tensor<E>,
    pub lm_head: Tensor<E>,
}

impl<E: Scalar> ModelGrads<E> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, d, i, n, h) = (cfg.vocab_size, cfg.d_model, cfg.d_inner, cfg.d_state, cfg.n_heads);
        ModelGrads {
            embedding: Tensor::zeros(&[v, d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerGrads {
                    w_in: Tensor::zeros(&[i, d]),
                    w_z: Tensor::zeros(&[i, d]),
                    w_b: Tensor::zeros(&[n, d]),
                    w_c: Tensor::zeros(&[n, d]),
                    w_dt: Tensor::zeros(&[h, d]),
                    b_dt: Tensor::zeros(&[h]),
                    a_decay: Tensor::zeros(&[h]),
                    w_out: Tensor::zeros(&[d, i]),
                    norm_gain: Tensor::zeros(&[d]),
                })
                .collect(),
            final_norm: Tensor::zeros(&[d]),
            lm_head: Tensor::zeros(&[v, d]),
        }
    }

    /// Slots in the same order as [`Model::parameters`].
    pub fn iter(&self) -> Vec<&Tensor<E>> {
        let mut v: Vec<&Tensor<E>> = Vec::with_capacity(3 + self.layers.len() * 9);
        v.push(&self.embedding);
        for l in &self.layers {
            v.extend([
                &l.w_in, &l.w_z, &l.w_b, &l.w_c, &l.w_dt, &l.b_dt, &l.a_decay, &l.w_out,
                &l.norm_gain,
            ]);
        }
        v.push(&self.final_norm);
        v.push(&self.lm_head);
        v
    }

    pub fn iter_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut v: Vec<&mut Tensor<E>> = Vec::with_capacity(3 + self.layers.len() * 9);
        v.push(&mut self.embedding);
        for l in &mut self.layers {
            v.extend([
                &mut l.w_in,
                &mut l.w_z,
                &mut l.w_b,
                &mut l.w_c,
                &mut l.w_dt,
                &mut l.b_dt,
                &mut l.a_decay,
                &mut l.w_out,
                &mut l.norm_gain,
            ]);
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.lm_head);
        v
    }

    pub fn add_assign(&mut self, other: &ModelGrads<E>) {
        for (a, b) in self.iter_mut().into_iter().zip(other.iter()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: E) {
        for t in self.iter_mut() {
            t.scale(s);
        }
    }
}
