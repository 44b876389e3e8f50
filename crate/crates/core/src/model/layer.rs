//! The selective state-space layer kernel: forward, tape, backward.
//!
//! Per head `h`, slot `p`, state column `n`, with `xn = rmsnorm(x)`:
//!
//! ```text
//! dt[h]     = softplus(W_dt . xn + b_dt)
//! alpha[h]  = exp(-dt[h] * softplus(a_decay[h]))
//! S'[h,p,n] = alpha[h] * S[h,p,n] + (dt[h] * uin[h,p]) * B[n]
//! yin[h,p]  = S'[h,p,:] . C
//! out       = x + W_out . (silu(W_z . xn) (.) yin)
//! ```
//!
//! The update is strictly linear in `S` given the input, which is what makes
//! independently encoded states poolable. Pad positions pass the state and
//! the residual stream through untouched (`alpha = 1`, `u = 0`).

use crate::model::{LayerGrads, LayerParams, ModelConfig};
use crate::tensor::{rmsnorm_row, rmsnorm_row_backward, sigmoid, silu, silu_deriv, softplus, Scalar};

/// `y = W . x` for row-major `w: [rows, cols]`.
pub(crate) fn matvec<E: Scalar>(w: &[E], rows: usize, cols: usize, x: &[E], y: &mut [E]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = E::zero();
        for (a, b) in row.iter().zip(x) {
            acc += *a * *b;
        }
        *yi = acc;
    }
}

/// `y += W^T . d` for row-major `w: [rows, cols]`, `d: [rows]`.
pub(crate) fn matvec_t_acc<E: Scalar>(w: &[E], rows: usize, cols: usize, d: &[E], y: &mut [E]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(d.len(), rows);
    debug_assert_eq!(y.len(), cols);
    for (di, row) in d.iter().zip(w.chunks_exact(cols)) {
        for (yi, wi) in y.iter_mut().zip(row) {
            *yi += *di * *wi;
        }
    }
}

/// `g += d (x) x` (outer product) for row-major `g: [d.len(), x.len()]`.
pub(crate) fn outer_acc<E: Scalar>(g: &mut [E], d: &[E], x: &[E]) {
    debug_assert_eq!(g.len(), d.len() * x.len());
    for (di, grow) in d.iter().zip(g.chunks_exact_mut(x.len())) {
        for (gi, xi) in grow.iter_mut().zip(x) {
            *gi += *di * *xi;
        }
    }
}

/// Everything the backward pass needs from one forward sweep of a layer.
pub(crate) struct LayerTape<E> {
    pub t_len: usize,
    pub pad: Vec<bool>,
    pub x: Vec<E>,      // [T, d_model] layer input stream
    pub xn: Vec<E>,     // [T, d_model]
    pub dt_pre: Vec<E>, // [T, n_heads]
    pub uin: Vec<E>,    // [T, d_inner]
    pub b: Vec<E>,      // [T, d_state]
    pub c: Vec<E>,      // [T, d_state]
    pub z: Vec<E>,      // [T, d_inner]
    pub yin: Vec<E>,    // [T, d_inner]
    pub s_hist: Vec<E>, // [T, state_len], state after each step
    pub s0: Vec<E>,     // [state_len]
}

impl<E: Scalar> LayerTape<E> {
    fn with_capacity(cfg: &ModelConfig, t_len: usize, s0: &[E]) -> Self {
        let (d, i, n, h) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.n_heads);
        let s_len = s0.len();
        LayerTape {
            t_len: 0,
            pad: Vec::with_capacity(t_len),
            x: Vec::with_capacity(t_len * d),
            xn: Vec::with_capacity(t_len * d),
            dt_pre: Vec::with_capacity(t_len * h),
            uin: Vec::with_capacity(t_len * i),
            b: Vec::with_capacity(t_len * n),
            c: Vec::with_capacity(t_len * n),
            z: Vec::with_capacity(t_len * i),
            yin: Vec::with_capacity(t_len * i),
            s_hist: Vec::with_capacity(t_len * s_len),
            s0: s0.to_vec(),
        }
    }

    /// Number of cached floats; the unit of the activation-memory meter.
    pub fn float_count(&self) -> usize {
        self.x.len()
            + self.xn.len()
            + self.dt_pre.len()
            + self.uin.len()
            + self.b.len()
            + self.c.len()
            + self.z.len()
            + self.yin.len()
            + self.s_hist.len()
            + self.s0.len()
    }

    fn s_prev(&self, t: usize, s_len: usize) -> &[E] {
        if t == 0 {
            &self.s0
        } else {
            &self.s_hist[(t - 1) * s_len..t * s_len]
        }
    }
}

struct StepBuf<E> {
    xn: Vec<E>,
    dt_pre: Vec<E>,
    uin: Vec<E>,
    b: Vec<E>,
    c: Vec<E>,
    z: Vec<E>,
    yin: Vec<E>,
    o: Vec<E>,
}

impl<E: Scalar> StepBuf<E> {
    fn new(cfg: &ModelConfig) -> Self {
        StepBuf {
            xn: vec![E::zero(); cfg.d_model],
            dt_pre: vec![E::zero(); cfg.n_heads],
            uin: vec![E::zero(); cfg.d_inner],
            b: vec![E::zero(); cfg.d_state],
            c: vec![E::zero(); cfg.d_state],
            z: vec![E::zero(); cfg.d_inner],
            yin: vec![E::zero(); cfg.d_inner],
            o: vec![E::zero(); cfg.d_inner],
        }
    }
}

/// Run one layer over a token stream. `xs` is `[T, d_model]`, `s` the flat
/// recurrent state, mutated in place. Returns the output stream. When `tape`
/// is given every intermediate is recorded for the backward pass.
pub(crate) fn layer_forward<E: Scalar>(
    cfg: &ModelConfig,
    p: &LayerParams<E>,
    xs: &[E],
    pads: &[bool],
    s: &mut [E],
    mut tape: Option<&mut LayerTape<E>>,
) -> Vec<E> {
    let (d, i, n, h) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.n_heads);
    let p_head = i / h;
    let t_len = pads.len();
    debug_assert_eq!(xs.len(), t_len * d);
    let eps = E::from_f64(cfg.eps);

    if let Some(tp) = tape.as_deref_mut() {
        debug_assert_eq!(tp.s0, s);
    }

    // softplus(a_decay), hoisted: input-independent
    let a_eff: Vec<E> = p.a_decay.value.data().iter().map(|a| softplus(*a)).collect();

    let gain = p.norm_gain.value.data();
    let mut out = vec![E::zero(); t_len * d];
    let mut buf = StepBuf::new(cfg);

    for t in 0..t_len {
        let x_t = &xs[t * d..(t + 1) * d];
        let out_t = &mut out[t * d..(t + 1) * d];
        if pads[t] {
            // state passthrough: alpha = 1, u = 0; residual stream untouched
            out_t.copy_from_slice(x_t);
            if let Some(tp) = tape.as_deref_mut() {
                tp.t_len += 1;
                tp.pad.push(true);
                tp.x.extend_from_slice(x_t);
                tp.xn.extend(std::iter::repeat(E::zero()).take(d));
                tp.dt_pre.extend(std::iter::repeat(E::zero()).take(h));
                tp.uin.extend(std::iter::repeat(E::zero()).take(i));
                tp.b.extend(std::iter::repeat(E::zero()).take(n));
                tp.c.extend(std::iter::repeat(E::zero()).take(n));
                tp.z.extend(std::iter::repeat(E::zero()).take(i));
                tp.yin.extend(std::iter::repeat(E::zero()).take(i));
                tp.s_hist.extend_from_slice(s);
            }
            continue;
        }

        buf.xn.copy_from_slice(x_t);
        rmsnorm_row(&mut buf.xn, gain, eps);

        matvec(p.w_dt.value.data(), h, d, &buf.xn, &mut buf.dt_pre);
        for (dp, bd) in buf.dt_pre.iter_mut().zip(p.b_dt.value.data()) {
            *dp += *bd;
        }
        matvec(p.w_in.value.data(), i, d, &buf.xn, &mut buf.uin);
        matvec(p.w_b.value.data(), n, d, &buf.xn, &mut buf.b);
        matvec(p.w_c.value.data(), n, d, &buf.xn, &mut buf.c);
        matvec(p.w_z.value.data(), i, d, &buf.xn, &mut buf.z);

        for hh in 0..h {
            let dt = softplus(buf.dt_pre[hh]);
            let alpha = (-dt * a_eff[hh]).exp();
            for pp in 0..p_head {
                let slot = hh * p_head + pp;
                let srow = &mut s[slot * n..(slot + 1) * n];
                let uval = dt * buf.uin[slot];
                let mut acc = E::zero();
                for (sv, (bv, cv)) in srow.iter_mut().zip(buf.b.iter().zip(&buf.c)) {
                    *sv = alpha * *sv + uval * *bv;
                    acc += *sv * *cv;
                }
                buf.yin[slot] = acc;
            }
        }

        for (o, (z, y)) in buf.o.iter_mut().zip(buf.z.iter().zip(&buf.yin)) {
            *o = silu(*z) * *y;
        }
        matvec(p.w_out.value.data(), d, i, &buf.o, out_t);
        for (ov, xv) in out_t.iter_mut().zip(x_t) {
            *ov += *xv;
        }

        if let Some(tp) = tape.as_deref_mut() {
            tp.t_len += 1;
            tp.pad.push(false);
            tp.x.extend_from_slice(x_t);
            tp.xn.extend_from_slice(&buf.xn);
            tp.dt_pre.extend_from_slice(&buf.dt_pre);
            tp.uin.extend_from_slice(&buf.uin);
            tp.b.extend_from_slice(&buf.b);
            tp.c.extend_from_slice(&buf.c);
            tp.z.extend_from_slice(&buf.z);
            tp.yin.extend_from_slice(&buf.yin);
            tp.s_hist.extend_from_slice(s);
        }
    }
    out
}

pub(crate) fn new_tape<E: Scalar>(cfg: &ModelConfig, t_len: usize, s0: &[E]) -> LayerTape<E> {
    LayerTape::with_capacity(cfg, t_len, s0)
}

/// Backward sweep of one layer.
///
/// `d_out` is the gradient of the loss w.r.t. this layer's output stream,
/// `ds_final` the gradient w.r.t. the layer's final state. Parameter
/// gradients accumulate into `g`; returns `(d_input_stream, d_initial_state)`.
pub(crate) fn layer_backward<E: Scalar>(
    cfg: &ModelConfig,
    p: &LayerParams<E>,
    tape: &LayerTape<E>,
    d_out: &[E],
    ds_final: Option<&[E]>,
    g: &mut LayerGrads<E>,
) -> (Vec<E>, Vec<E>) {
    let (d, i, n, h) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.n_heads);
    let p_head = i / h;
    let s_len = h * p_head * n;
    let t_len = tape.t_len;
    debug_assert_eq!(d_out.len(), t_len * d);
    let eps = E::from_f64(cfg.eps);

    let a_eff: Vec<E> = p.a_decay.value.data().iter().map(|a| softplus(*a)).collect();
    let gain = p.norm_gain.value.data();

    let mut dx = vec![E::zero(); t_len * d];
    let mut ds: Vec<E> = match ds_final {
        Some(v) => {
            debug_assert_eq!(v.len(), s_len);
            v.to_vec()
        }
        None => vec![E::zero(); s_len],
    };

    let mut d_o = vec![E::zero(); i];
    let mut d_z = vec![E::zero(); i];
    let mut d_uin = vec![E::zero(); i];
    let mut d_b = vec![E::zero(); n];
    let mut d_c = vec![E::zero(); n];
    let mut d_dt_pre = vec![E::zero(); h];
    let mut d_xn = vec![E::zero(); d];
    let mut o = vec![E::zero(); i];
    let mut ds_total = vec![E::zero(); s_len];

    for t in (0..t_len).rev() {
        let dy = &d_out[t * d..(t + 1) * d];
        let dx_t = &mut dx[t * d..(t + 1) * d];
        if tape.pad[t] {
            // passthrough: residual gradient flows, state carry unchanged
            for (a, b) in dx_t.iter_mut().zip(dy) {
                *a += *b;
            }
            continue;
        }

        let x_t = &tape.x[t * d..(t + 1) * d];
        let xn = &tape.xn[t * d..(t + 1) * d];
        let dt_pre = &tape.dt_pre[t * h..(t + 1) * h];
        let uin = &tape.uin[t * i..(t + 1) * i];
        let b = &tape.b[t * n..(t + 1) * n];
        let c = &tape.c[t * n..(t + 1) * n];
        let z = &tape.z[t * i..(t + 1) * i];
        let yin = &tape.yin[t * i..(t + 1) * i];
        let s_after = &tape.s_hist[t * s_len..(t + 1) * s_len];
        let s_prev = tape.s_prev(t, s_len);

        // out = x + W_out . o, o = silu(z) (.) yin
        for (a, b) in dx_t.iter_mut().zip(dy) {
            *a += *b;
        }
        for ((ov, zv), yv) in o.iter_mut().zip(z).zip(yin) {
            *ov = silu(*zv) * *yv;
        }
        outer_acc(g.w_out.data_mut(), dy, &o);
        d_o.iter_mut().for_each(|v| *v = E::zero());
        matvec_t_acc(p.w_out.value.data(), d, i, dy, &mut d_o);

        d_c.iter_mut().for_each(|v| *v = E::zero());
        for hh in 0..h {
            let dt = softplus(dt_pre[hh]);
            let alpha = (-dt * a_eff[hh]).exp();
            let mut d_alpha = E::zero();
            let mut d_dt = E::zero();
            for pp in 0..p_head {
                let slot = hh * p_head + pp;
                let gate = silu(z[slot]);
                let d_yin = d_o[slot] * gate;
                d_z[slot] = d_o[slot] * yin[slot] * silu_deriv(z[slot]);

                let srow_after = &s_after[slot * n..(slot + 1) * n];
                let srow_prev = &s_prev[slot * n..(slot + 1) * n];
                let ds_row = &mut ds[slot * n..(slot + 1) * n];
                let dst_row = &mut ds_total[slot * n..(slot + 1) * n];
                let mut d_u = E::zero();
                for nn in 0..n {
                    // yin = s_after . c  plus the carry from step t+1
                    let dst = d_yin * c[nn] + ds_row[nn];
                    dst_row[nn] = dst;
                    d_c[nn] += d_yin * srow_after[nn];
                    // s_after = alpha * s_prev + uval * b
                    d_alpha += dst * srow_prev[nn];
                    d_u += dst * b[nn];
                    ds_row[nn] = alpha * dst; // carry to step t-1
                }
                // u = dt * uin
                d_uin[slot] = dt * d_u;
                d_dt += d_u * uin[slot];
            }
            // alpha = exp(-dt * a_eff)
            d_dt += d_alpha * alpha * (-a_eff[hh]);
            let d_a_eff = d_alpha * alpha * (-dt);
            g.a_decay.data_mut()[hh] += d_a_eff * sigmoid(p.a_decay.value.data()[hh]);
            d_dt_pre[hh] = d_dt * sigmoid(dt_pre[hh]);
        }
        // d_b needs ds_total complete for every head
        d_b.iter_mut().for_each(|v| *v = E::zero());
        for hh in 0..h {
            let dt = softplus(dt_pre[hh]);
            for pp in 0..p_head {
                let slot = hh * p_head + pp;
                let uval = dt * uin[slot];
                let dst_row = &ds_total[slot * n..(slot + 1) * n];
                for nn in 0..n {
                    d_b[nn] += dst_row[nn] * uval;
                }
            }
        }

        d_xn.iter_mut().for_each(|v| *v = E::zero());
        outer_acc(g.w_dt.data_mut(), &d_dt_pre, xn);
        for (gb, dv) in g.b_dt.data_mut().iter_mut().zip(&d_dt_pre) {
            *gb += *dv;
        }
        matvec_t_acc(p.w_dt.value.data(), h, d, &d_dt_pre, &mut d_xn);
        outer_acc(g.w_in.data_mut(), &d_uin, xn);
        matvec_t_acc(p.w_in.value.data(), i, d, &d_uin, &mut d_xn);
        outer_acc(g.w_b.data_mut(), &d_b, xn);
        matvec_t_acc(p.w_b.value.data(), n, d, &d_b, &mut d_xn);
        outer_acc(g.w_c.data_mut(), &d_c, xn);
        matvec_t_acc(p.w_c.value.data(), n, d, &d_c, &mut d_xn);
        outer_acc(g.w_z.data_mut(), &d_z, xn);
        matvec_t_acc(p.w_z.value.data(), i, d, &d_z, &mut d_xn);

        rmsnorm_row_backward(x_t, gain, eps, &d_xn, dx_t, g.norm_gain.data_mut());
    }

    (dx, ds)
}
