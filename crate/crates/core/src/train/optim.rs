//! AdamW with decoupled weight decay, global gradient clipping, and the
//! linear-warmup + cosine-decay learning-rate schedule.

use crate::tensor::{Parameter, Scalar, Tensor};

/// Linear warmup from 0 to `lr_max` over the first `warmup_frac` of
/// training, then cosine decay back to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, warmup_frac: f64) -> f64 {
    assert!(step <= total_steps, "step {step} past total {total_steps}");
    let warmup = (warmup_frac * total_steps as f64).floor() as usize;
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return lr_max;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWOpts {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWOpts {
    fn default() -> Self {
        AdamWOpts {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// First/second moment state per parameter, in parameter order.
pub struct AdamW<E> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    t: usize,
}

impl<E: Scalar> AdamW<E> {
    pub fn new_for(params: &[&Parameter<E>]) -> Self {
        AdamW {
            m: params.iter().map(|p| p.value.zeros_like()).collect(),
            v: params.iter().map(|p| p.value.zeros_like()).collect(),
            t: 0,
        }
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn global_grad_norm(params: &[&mut Parameter<E>]) -> E {
        let mut acc = E::zero();
        for p in params {
            for g in p.grad.data() {
                acc += *g * *g;
            }
        }
        acc.sqrt()
    }

    /// One update: clip gradients to `opts.clip_norm` (global norm), apply
    /// AdamW with decoupled weight decay, zero the gradients. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [&mut Parameter<E>], lr: f64, opts: &AdamWOpts) -> E {
        assert_eq!(params.len(), self.m.len(), "optimizer bound to other params");
        self.t += 1;
        let norm = Self::global_grad_norm(&params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>());
        let clip = E::from_f64(opts.clip_norm);
        let scale = if norm > clip { clip / norm } else { E::one() };

        let (b1, b2) = (E::from_f64(opts.beta1), E::from_f64(opts.beta2));
        let eps = E::from_f64(opts.eps);
        let wd = E::from_f64(opts.weight_decay);
        let lr = E::from_f64(lr);
        let bias1 = E::one() - E::from_f64(opts.beta1.powi(self.t as i32));
        let bias2 = E::one() - E::from_f64(opts.beta2.powi(self.t as i32));

        for (p, (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(&mut self.v)) {
            let pd = p.value.data_mut();
            let gd = p.grad.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for idx in 0..pd.len() {
                let g = gd[idx] * scale;
                md[idx] = b1 * md[idx] + (E::one() - b1) * g;
                vd[idx] = b2 * vd[idx] + (E::one() - b2) * g * g;
                let m_hat = md[idx] / bias1;
                let v_hat = vd[idx] / bias2;
                pd[idx] = pd[idx] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[idx]);
                gd[idx] = E::zero();
            }
        }
        norm
    }
}
