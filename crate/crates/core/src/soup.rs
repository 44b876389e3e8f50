//! State souping: pool independently encoded states into one.
//!
//! Documents are encoded separately from the zero state and their per-layer
//! states merged elementwise with a commutative operator (average, sum, max),
//! optionally unit-normalizing each input before pooling and/or the result
//! after. Inputs are reduced in a canonical order (sorted by a content
//! digest), so the pooled state is bit-identical under any permutation of the
//! inputs despite floating-point non-associativity.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerState, Model, ModelState};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    Average,
    Sum,
    Max,
}

/// Pooling operator plus normalization placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoupConfig {
    pub op: PoolOp,
    #[serde(default)]
    pub norm_before: bool,
    #[serde(default)]
    pub norm_after: bool,
}

impl Default for SoupConfig {
    fn default() -> Self {
        SoupConfig {
            op: PoolOp::Average,
            norm_before: false,
            norm_after: false,
        }
    }
}

impl SoupConfig {
    pub fn average() -> Self {
        SoupConfig::default()
    }

    pub fn sum() -> Self {
        SoupConfig {
            op: PoolOp::Sum,
            ..SoupConfig::default()
        }
    }

    pub fn max() -> Self {
        SoupConfig {
            op: PoolOp::Max,
            ..SoupConfig::default()
        }
    }
}

/// Divide each layer's state tensor by its own Frobenius norm.
pub fn normalize_state<E: Scalar>(state: &ModelState<E>) -> Result<ModelState<E>> {
    let mut out = state.clone();
    for (li, layer) in out.layers.iter_mut().enumerate() {
        let norm = layer.s.frob_norm();
        if norm == E::zero() {
            return Err(Error::DegenerateState { layer: li });
        }
        layer.s.scale(E::one() / norm);
    }
    Ok(out)
}

/// Content digest used to fix the reduction order independent of how the
/// caller ordered the inputs.
fn state_digest<E: Scalar>(state: &ModelState<E>) -> [u8; 32] {
    let mut h = Sha256::new();
    for layer in &state.layers {
        let mut buf = Vec::with_capacity(layer.s.len() * 8);
        for v in layer.s.data() {
            buf.extend_from_slice(&v.into_f64().to_le_bytes());
        }
        h.update(&buf);
    }
    h.finalize().into()
}

fn check_poolable<E: Scalar>(states: &[ModelState<E>]) -> Result<()> {
    if states.is_empty() {
        return Err(Error::EmptyPool);
    }
    let first = &states[0];
    for st in &states[1..] {
        if st.model_fingerprint != first.model_fingerprint {
            return Err(Error::IncompatibleStates);
        }
        if st.layers.len() != first.layers.len() {
            return Err(Error::IncompatibleStates);
        }
        for (a, b) in st.layers.iter().zip(&first.layers) {
            if a.s.shape() != b.s.shape() {
                return Err(Error::IncompatibleStates);
            }
        }
    }
    Ok(())
}

fn canonical_order<E: Scalar>(states: &[ModelState<E>]) -> Vec<usize> {
    let digests: Vec<[u8; 32]> = states.iter().map(state_digest).collect();
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.sort_by(|&a, &b| digests[a].cmp(&digests[b]));
    order
}

/// Pool `states` elementwise per layer according to `cfg`.
///
/// The output inherits the inputs' fingerprint; its source token count is the
/// sum of the inputs'.
pub fn pool_states<E: Scalar>(states: &[ModelState<E>], cfg: &SoupConfig) -> Result<ModelState<E>> {
    Ok(pool_core(states, cfg, false)?.0)
}

/// Encode every document independently from the zero state (in parallel when
/// enabled), then pool.
pub fn soup_encode<E: Scalar>(
    model: &Model<E>,
    docs: &[Vec<usize>],
    cfg: &SoupConfig,
) -> Result<ModelState<E>> {
    if docs.is_empty() {
        return Err(Error::EmptyPool);
    }
    let states: Vec<Result<ModelState<E>>> =
        parallel::map_collect(docs, |doc| model.encode(doc, None));
    let states: Result<Vec<ModelState<E>>> = states.into_iter().collect();
    pool_states(&states?, cfg)
}

// ---------------------------------------------------------------------------
// traced pooling (training path)
// ---------------------------------------------------------------------------

/// A pooling forward recorded for backward. Produced by
/// [`pool_states_traced`]; `backward` maps the gradient w.r.t. the pooled
/// state back to gradients w.r.t. every input state, in input order.
pub struct PoolPass<E> {
    cfg: SoupConfig,
    k: usize,
    n_layers: usize,
    pub pooled: Vec<Tensor<E>>,
    // norm_before: normalized inputs and their norms, input-indexed
    eff_normed: Option<Vec<Vec<Tensor<E>>>>,
    before_norms: Option<Vec<Vec<E>>>,
    // max: winning input index per layer per element
    winners: Option<Vec<Vec<usize>>>,
    // norm_after: the normalized result is `pooled`; keep the pre-norm norms
    after_norms: Option<Vec<E>>,
}

/// Like [`pool_states`] but keeps what the backward pass needs. Takes raw
/// per-layer tensors (the shape produced by a training forward pass).
pub fn pool_states_traced<E: Scalar>(
    inputs: &[Vec<Tensor<E>>],
    cfg: &SoupConfig,
) -> Result<PoolPass<E>> {
    if inputs.is_empty() {
        return Err(Error::EmptyPool);
    }
    let states: Vec<ModelState<E>> = inputs
        .iter()
        .map(|layers| ModelState {
            layers: layers.iter().map(|s| LayerState { s: s.clone() }).collect(),
            model_fingerprint: [0; 32],
            source_token_count: 0,
        })
        .collect();
    let (pooled_state, trace) = pool_core(&states, cfg, true)?;
    let mut pass = trace.expect("trace requested");
    pass.pooled = pooled_state.layers.into_iter().map(|l| l.s).collect();
    Ok(pass)
}

fn pool_core<E: Scalar>(
    states: &[ModelState<E>],
    cfg: &SoupConfig,
    trace: bool,
) -> Result<(ModelState<E>, Option<PoolPass<E>>)> {
    check_poolable(states)?;
    let k = states.len();
    let n_layers = states[0].layers.len();
    let order = canonical_order(states);

    // effective inputs: normalized copies when norm_before is set
    let mut eff_normed: Option<Vec<Vec<Tensor<E>>>> = None;
    let mut before_norms: Option<Vec<Vec<E>>> = None;
    if cfg.norm_before {
        let mut normed = Vec::with_capacity(k);
        let mut norms = Vec::with_capacity(k);
        for st in states {
            let mut layers = Vec::with_capacity(n_layers);
            let mut st_norms = Vec::with_capacity(n_layers);
            for (li, layer) in st.layers.iter().enumerate() {
                let norm = layer.s.frob_norm();
                if norm == E::zero() {
                    return Err(Error::DegenerateState { layer: li });
                }
                let mut t = layer.s.clone();
                t.scale(E::one() / norm);
                layers.push(t);
                st_norms.push(norm);
            }
            normed.push(layers);
            norms.push(st_norms);
        }
        eff_normed = Some(normed);
        before_norms = Some(norms);
    }
    let eff = |i: usize, li: usize| -> &Tensor<E> {
        match &eff_normed {
            Some(n) => &n[i][li],
            None => &states[i].layers[li].s,
        }
    };

    let mut pooled: Vec<Tensor<E>> = Vec::with_capacity(n_layers);
    let mut winners: Option<Vec<Vec<usize>>> = if trace && cfg.op == PoolOp::Max {
        Some(Vec::with_capacity(n_layers))
    } else {
        None
    };
    for li in 0..n_layers {
        let mut acc = eff(order[0], li).clone();
        match cfg.op {
            PoolOp::Average | PoolOp::Sum => {
                for &i in &order[1..] {
                    acc.add_assign(eff(i, li));
                }
                if cfg.op == PoolOp::Average {
                    acc.scale(E::one() / E::from_f64(k as f64));
                }
            }
            PoolOp::Max => {
                let mut win = vec![order[0]; acc.len()];
                for &i in &order[1..] {
                    let src = eff(i, li);
                    for (ei, (a, b)) in acc.data_mut().iter_mut().zip(src.data()).enumerate() {
                        if *b > *a {
                            *a = *b;
                            win[ei] = i;
                        }
                    }
                }
                if let Some(w) = winners.as_mut() {
                    w.push(win);
                }
            }
        }
        pooled.push(acc);
    }

    let mut after_norms = None;
    if cfg.norm_after {
        let mut norms = Vec::with_capacity(n_layers);
        for (li, t) in pooled.iter_mut().enumerate() {
            let norm = t.frob_norm();
            if norm == E::zero() {
                return Err(Error::DegenerateState { layer: li });
            }
            t.scale(E::one() / norm);
            norms.push(norm);
        }
        after_norms = Some(norms);
    }

    let out = ModelState {
        layers: pooled.iter().map(|s| LayerState { s: s.clone() }).collect(),
        model_fingerprint: states[0].model_fingerprint,
        source_token_count: states.iter().map(|s| s.source_token_count).sum(),
    };
    let pass = trace.then(|| PoolPass {
        cfg: *cfg,
        k,
        n_layers,
        pooled,
        eff_normed,
        before_norms,
        winners,
        after_norms,
    });
    Ok((out, pass))
}

/// Backward of `y = x / ||x||` given the normalized value `xhat` and `||x||`:
/// `dx = (dy - xhat * (xhat . dy)) / norm`.
fn unit_norm_backward<E: Scalar>(xhat: &Tensor<E>, norm: E, dy: &Tensor<E>) -> Tensor<E> {
    let mut dot = E::zero();
    for (a, b) in xhat.data().iter().zip(dy.data()) {
        dot += *a * *b;
    }
    let mut dx = dy.clone();
    dx.axpy(-dot, xhat);
    dx.scale(E::one() / norm);
    dx
}

impl<E: Scalar> PoolPass<E> {
    /// Map `d_pooled` back to per-input state gradients (input order).
    pub fn backward(&self, d_pooled: &[Tensor<E>]) -> Vec<Vec<Tensor<E>>> {
        debug_assert_eq!(d_pooled.len(), self.n_layers);

        // through norm_after: `pooled` holds the normalized value
        let d_pre: Vec<Tensor<E>> = match &self.after_norms {
            Some(norms) => self
                .pooled
                .iter()
                .zip(norms)
                .zip(d_pooled)
                .map(|((xhat, &norm), dy)| unit_norm_backward(xhat, norm, dy))
                .collect(),
            None => d_pooled.to_vec(),
        };

        // through the pooling operator, to the effective (possibly normalized)
        // inputs
        let inv_k = E::one() / E::from_f64(self.k as f64);
        let mut d_eff: Vec<Vec<Tensor<E>>> = (0..self.k)
            .map(|_| d_pre.iter().map(|t| t.zeros_like()).collect())
            .collect();
        for li in 0..self.n_layers {
            match self.cfg.op {
                PoolOp::Sum => {
                    for item in d_eff.iter_mut() {
                        item[li].add_assign(&d_pre[li]);
                    }
                }
                PoolOp::Average => {
                    for item in d_eff.iter_mut() {
                        item[li].axpy(inv_k, &d_pre[li]);
                    }
                }
                PoolOp::Max => {
                    let win = &self.winners.as_ref().expect("max trace")[li];
                    for (ei, &w) in win.iter().enumerate() {
                        d_eff[w][li].data_mut()[ei] += d_pre[li].data()[ei];
                    }
                }
            }
        }

        // through norm_before
        match (&self.eff_normed, &self.before_norms) {
            (Some(normed), Some(norms)) => d_eff
                .iter()
                .enumerate()
                .map(|(i, layers)| {
                    layers
                        .iter()
                        .enumerate()
                        .map(|(li, dy)| unit_norm_backward(&normed[i][li], norms[i][li], dy))
                        .collect()
                })
                .collect(),
            _ => d_eff,
        }
    }
}
