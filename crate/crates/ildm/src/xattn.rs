//! Cross-domain self-attention with a scheduled log-bias on the image branch.
//!
//! Queries stay per-domain while keys/values are the concatenation
//! (K_x z_x) ++ (K_i z_i), (V_x z_x) ++ (V_i z_i). The image branch adds
//! log(w) to the logits of the cross-domain block before the softmax; the
//! intrinsic branch attends over the same concatenation unbiased. w = 0 is
//! handled by exact masking — cross keys are excluded from the softmax
//! support entirely — so the w = 0 image branch is the single-domain
//! attention computation, operation for operation.
//!
//! Everything here is generic over f32/f64: the f32 instantiation is what the
//! denoiser runs, the f64 instantiation is what the finite-difference checks
//! validate.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Minimal float abstraction so the same attention code runs in both
/// precisions.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;

    /// Max over a slice, 8-lane order (max is order-insensitive for finite
    /// values, so this is just the vectorizable shape).
    fn slice_max(xs: &[Self]) -> Self {
        let mut acc = [Self::from_f64(f64::NEG_INFINITY); 8];
        let chunks = xs.len() / 8;
        for c in 0..chunks {
            for l in 0..8 {
                acc[l] = acc[l].maxv(xs[c * 8 + l]);
            }
        }
        let mut m = acc[0];
        for a in &acc[1..] {
            m = m.maxv(*a);
        }
        for &x in &xs[chunks * 8..] {
            m = m.maxv(x);
        }
        m
    }

    /// In place x <- exp(x - max); returns the 8-lane sum of the results.
    fn exp_shift_sum(xs: &mut [Self], max: Self) -> Self {
        let mut acc = [Self::ZERO; 8];
        let chunks = xs.len() / 8;
        for c in 0..chunks {
            for l in 0..8 {
                let e = (xs[c * 8 + l] - max).exp();
                xs[c * 8 + l] = e;
                acc[l] += e;
            }
        }
        let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        for x in &mut xs[chunks * 8..] {
            let e = (*x - max).exp();
            *x = e;
            s += e;
        }
        s
    }

    fn div_slice(xs: &mut [Self], c: Self) {
        for x in xs.iter_mut() {
            *x = *x / c;
        }
    }
}

/// Cephes-style expf: ~2 ulp, branchless so softmax loops vectorize, and a
/// pure function of the bits so results stay reproducible.
#[inline(always)]
pub fn fast_exp_f32(x: f32) -> f32 {
    let x = x.max(-87.0).min(88.0);
    let z = (std::f32::consts::LOG2_E * x + 0.5).floor();
    let r = x - z * 0.693_359_375 - z * (-2.121_944_4e-4);
    let mut p = 1.987_569_2e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5.000_000_2e-1;
    let res = p * r * r + r + 1.0;
    // z is clamped to a small range, so the unchecked cast is in range and
    // the loop stays vectorizable (the saturating cast defeats SIMD)
    let zi = unsafe { z.to_int_unchecked::<i32>() };
    let bits = ((zi + 127) << 23) as u32;
    res * f32::from_bits(bits)
}

impl Real for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        fast_exp_f32(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maxv(self, other: f32) -> f32 {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maxv(self, other: f64) -> f64 {
        if other > self {
            other
        } else {
            self
        }
    }
}

/// Per-layer, per-timestep cross-domain weight w^(l,t). Timesteps are in the
/// quoted [0, 1000] range.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnWeightSchedule {
    /// w = 1 iff l is a listed block and t <= tau, else 0.
    Drop { layers: Vec<usize>, tau: f64 },
    /// w = alpha * exp(-(t - tau)^2 / sigma^2), every block.
    Gaussian { alpha: f64, tau: f64, sigma: f64 },
    /// w = 1 everywhere (training mode).
    Full,
    /// w = 0 everywhere.
    Off,
}

impl AttnWeightSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            AttnWeightSchedule::Drop { tau, .. } => {
                if !tau.is_finite() || *tau < 0.0 {
                    return Err(Error::config("tau", format!("{tau} must be finite and >= 0")));
                }
            }
            AttnWeightSchedule::Gaussian { alpha, tau, sigma } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::config("alpha", format!("{alpha} not in (0,1]")));
                }
                if !(*sigma > 0.0) {
                    return Err(Error::config("sigma", format!("{sigma} must be > 0")));
                }
                if !tau.is_finite() {
                    return Err(Error::config("tau", "must be finite"));
                }
            }
            AttnWeightSchedule::Full | AttnWeightSchedule::Off => {}
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AttnWeightSchedule::Drop { .. } => "drop",
            AttnWeightSchedule::Gaussian { .. } => "gauss",
            AttnWeightSchedule::Full => "full",
            AttnWeightSchedule::Off => "off",
        }
    }
}

/// Exact evaluation of the scheduling rules.
pub fn eval_weight(sched: &AttnWeightSchedule, l: usize, t_paper: f64) -> f64 {
    match sched {
        AttnWeightSchedule::Drop { layers, tau } => {
            if layers.contains(&l) && t_paper <= *tau {
                1.0
            } else {
                0.0
            }
        }
        AttnWeightSchedule::Gaussian { alpha, tau, sigma } => {
            let d = t_paper - tau;
            alpha * (-(d * d) / (sigma * sigma)).exp()
        }
        AttnWeightSchedule::Full => 1.0,
        AttnWeightSchedule::Off => 0.0,
    }
}

#[inline]
fn axpy_r<R: Real>(out: &mut [R], a: R, x: &[R]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += a * v;
    }
}

/// Fixed-order 4-lane dot product (vectorizable, deterministic).
#[inline]
fn dot4_r<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [R::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// rows[r, c] -> out[c, r]
fn transpose_r<R: Real>(x: &[R], rows: usize, cols: usize, out: &mut [R]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// Single-head scaled-dot attention over a key/value set whose columns at
/// `cross_start..m` carry an additive log(w) logit bias. With w = 0 those
/// columns are excluded from the softmax support. `probs` must be n*m and is
/// fully overwritten (masked columns become exact zeros).
///
/// Keys/values are processed through transposed [d, m] scratch layouts so the
/// inner loops run along m and vectorize.
#[allow(clippy::too_many_arguments)]
pub fn attn_core<R: Real>(
    q: &[R],
    n: usize,
    dk: usize,
    k: &[R],
    m: usize,
    v: &[R],
    dv: usize,
    cross_start: usize,
    w: f64,
    out: &mut [R],
    probs: &mut [R],
) {
    debug_assert_eq!(q.len(), n * dk);
    debug_assert_eq!(k.len(), m * dk);
    debug_assert_eq!(v.len(), m * dv);
    debug_assert_eq!(out.len(), n * dv);
    debug_assert_eq!(probs.len(), n * m);
    debug_assert!(cross_start <= m);
    let m_eff = if w == 0.0 { cross_start } else { m };
    let ln_w = R::from_f64(if w == 0.0 { 0.0 } else { w.ln() });
    let scale = R::from_f64(1.0 / (dk as f64).sqrt());
    let mut kt = vec![R::ZERO; dk * m];
    let mut vt = vec![R::ZERO; dv * m];
    transpose_r(k, m, dk, &mut kt);
    transpose_r(v, m, dv, &mut vt);
    let mut q_scaled = vec![R::ZERO; dk];
    for i in 0..n {
        for (qs, &qq) in q_scaled.iter_mut().zip(q[i * dk..(i + 1) * dk].iter()) {
            *qs = qq * scale;
        }
        let p_row = &mut probs[i * m..(i + 1) * m];
        for p in p_row.iter_mut() {
            *p = R::ZERO;
        }
        for (c, &qs) in q_scaled.iter().enumerate() {
            axpy_r(&mut p_row[..m_eff], qs, &kt[c * m..c * m + m_eff]);
        }
        for p in p_row[cross_start..m_eff].iter_mut() {
            *p = *p + ln_w;
        }
        let row_max = R::slice_max(&p_row[..m_eff]);
        let denom = R::exp_shift_sum(&mut p_row[..m_eff], row_max);
        R::div_slice(&mut p_row[..m_eff], denom);
        let out_row = &mut out[i * dv..(i + 1) * dv];
        for (c, o) in out_row.iter_mut().enumerate() {
            *o = dot4_r(&p_row[..m_eff], &vt[c * m..c * m + m_eff]);
        }
    }
}

/// Backward pass for `attn_core`. Accumulates (+=) into dq, dk_acc, dv_acc.
#[allow(clippy::too_many_arguments)]
pub fn attn_core_backward<R: Real>(
    q: &[R],
    n: usize,
    dk: usize,
    k: &[R],
    m: usize,
    v: &[R],
    dv: usize,
    cross_start: usize,
    w: f64,
    probs: &[R],
    dout: &[R],
    dq: &mut [R],
    dk_acc: &mut [R],
    dv_acc: &mut [R],
) {
    let m_eff = if w == 0.0 { cross_start } else { m };
    let scale = R::from_f64(1.0 / (dk as f64).sqrt());
    let mut kt = vec![R::ZERO; dk * m];
    let mut vt = vec![R::ZERO; dv * m];
    transpose_r(k, m, dk, &mut kt);
    transpose_r(v, m, dv, &mut vt);
    // transposed accumulators, written back at the end
    let mut dkt = vec![R::ZERO; dk * m];
    let mut dvt = vec![R::ZERO; dv * m];
    let mut dp = vec![R::ZERO; m_eff];
    let mut ds = vec![R::ZERO; m_eff];
    for i in 0..n {
        let p_row = &probs[i * m..(i + 1) * m];
        let dout_row = &dout[i * dv..(i + 1) * dv];
        let q_row = &q[i * dk..(i + 1) * dk];
        // dp = dout_i . v_j over j ; dvt[c] += dout_i[c] * p_row
        for d in dp.iter_mut() {
            *d = R::ZERO;
        }
        for (c, &g) in dout_row.iter().enumerate() {
            axpy_r(&mut dp, g, &vt[c * m..c * m + m_eff]);
            axpy_r(&mut dvt[c * m..c * m + m_eff], g, &p_row[..m_eff]);
        }
        let row_dot = dot4_r(&dp, &p_row[..m_eff]);
        for j in 0..m_eff {
            ds[j] = p_row[j] * (dp[j] - row_dot) * scale;
        }
        // dq_i[c] = ds . k_col(c) ; dkt[c] += q_i[c] * ds
        let dq_row = &mut dq[i * dk..(i + 1) * dk];
        for (c, o) in dq_row.iter_mut().enumerate() {
            *o += dot4_r(&ds, &kt[c * m..c * m + m_eff]);
            axpy_r(&mut dkt[c * m..c * m + m_eff], q_row[c], &ds);
        }
    }
    for j in 0..m_eff {
        for c in 0..dk {
            dk_acc[j * dk + c] += dkt[c * m + j];
        }
        for c in 0..dv {
            dv_acc[j * dv + c] += dvt[c * m + j];
        }
    }
}

/// The six learned projections of one block, single-head, row-major
/// [d_out, d_model], applied as y = z W^T.
#[derive(Clone, Debug)]
pub struct AttnProjections<R> {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub wq_x: Vec<R>,
    pub wk_x: Vec<R>,
    pub wv_x: Vec<R>,
    pub wq_i: Vec<R>,
    pub wk_i: Vec<R>,
    pub wv_i: Vec<R>,
}

impl<R: Real> AttnProjections<R> {
    pub fn random(d_model: usize, d_k: usize, d_v: usize, rng: &mut Rng) -> Self {
        let mut mk = |rows: usize, cols: usize| -> Vec<R> {
            let std = 1.0 / (cols as f64).sqrt();
            (0..rows * cols).map(|_| R::from_f64(rng.normal() * std)).collect()
        };
        AttnProjections {
            d_model,
            d_k,
            d_v,
            wq_x: mk(d_k, d_model),
            wk_x: mk(d_k, d_model),
            wv_x: mk(d_v, d_model),
            wq_i: mk(d_k, d_model),
            wk_i: mk(d_k, d_model),
            wv_i: mk(d_v, d_model),
        }
    }
}

/// y[n, d_out] = z[n, d_model] * w[d_out, d_model]^T
fn project<R: Real>(z: &[R], n: usize, d_model: usize, w: &[R], d_out: usize) -> Vec<R> {
    let mut y = vec![R::ZERO; n * d_out];
    for i in 0..n {
        let z_row = &z[i * d_model..(i + 1) * d_model];
        let y_row = &mut y[i * d_out..(i + 1) * d_out];
        for (j, yv) in y_row.iter_mut().enumerate() {
            let w_row = &w[j * d_model..(j + 1) * d_model];
            let mut s = R::ZERO;
            for (a, b) in z_row.iter().zip(w_row.iter()) {
                s += *a * *b;
            }
            *yv = s;
        }
    }
    y
}

/// dW += dy^T z ; dz += dy W
#[allow(clippy::too_many_arguments)]
fn project_backward<R: Real>(
    z: &[R],
    n: usize,
    d_model: usize,
    w: &[R],
    d_out: usize,
    dy: &[R],
    dw: &mut [R],
    dz: &mut [R],
) {
    for i in 0..n {
        let z_row = &z[i * d_model..(i + 1) * d_model];
        let dy_row = &dy[i * d_out..(i + 1) * d_out];
        let dz_row = &mut dz[i * d_model..(i + 1) * d_model];
        for (j, &g) in dy_row.iter().enumerate() {
            let w_row = &w[j * d_model..(j + 1) * d_model];
            let dw_row = &mut dw[j * d_model..(j + 1) * d_model];
            for c in 0..d_model {
                dw_row[c] += g * z_row[c];
                dz_row[c] += g * w_row[c];
            }
        }
    }
}

/// Output of one cross-domain attention evaluation, with the softmax rows
/// kept for inspection and backward.
#[derive(Clone, Debug)]
pub struct CrossDomainOutput<R> {
    pub attn_x: Vec<R>,
    pub attn_i: Vec<R>,
    /// [n, 2n] image-branch rows (cross block zeroed when w = 0)
    pub probs_x: Vec<R>,
    /// [n, 2n] intrinsic-branch rows
    pub probs_i: Vec<R>,
    pub n: usize,
}

/// Eq. 1 + Eq. 4: both branches attend over the shared concatenation
/// (K_x z_x) ++ (K_i z_i); the image branch carries the log(w) bias on the
/// second block, the intrinsic branch is unbiased.
pub fn cross_domain_attention<R: Real>(
    z_x: &[R],
    z_i: &[R],
    n: usize,
    proj: &AttnProjections<R>,
    w: f64,
) -> Result<CrossDomainOutput<R>> {
    if z_x.len() != n * proj.d_model || z_i.len() != n * proj.d_model {
        return Err(Error::contract(format!(
            "cross_domain_attention: token tensors must both be [{n}, {}], got {} and {} elements",
            proj.d_model,
            z_x.len(),
            z_i.len()
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::contract(format!("weight w={w} not in [0,1]")));
    }
    let (d, dk, dv) = (proj.d_model, proj.d_k, proj.d_v);
    let q_x = project(z_x, n, d, &proj.wq_x, dk);
    let q_i = project(z_i, n, d, &proj.wq_i, dk);
    let k_x = project(z_x, n, d, &proj.wk_x, dk);
    let k_i = project(z_i, n, d, &proj.wk_i, dk);
    let v_x = project(z_x, n, d, &proj.wv_x, dv);
    let v_i = project(z_i, n, d, &proj.wv_i, dv);
    let mut k_cat = k_x;
    k_cat.extend_from_slice(&k_i);
    let mut v_cat = v_x;
    v_cat.extend_from_slice(&v_i);

    let m = 2 * n;
    let mut attn_x = vec![R::ZERO; n * dv];
    let mut attn_i = vec![R::ZERO; n * dv];
    let mut probs_x = vec![R::ZERO; n * m];
    let mut probs_i = vec![R::ZERO; n * m];
    attn_core(&q_x, n, dk, &k_cat, m, &v_cat, dv, n, w, &mut attn_x, &mut probs_x);
    attn_core(&q_i, n, dk, &k_cat, m, &v_cat, dv, m, 1.0, &mut attn_i, &mut probs_i);
    Ok(CrossDomainOutput { attn_x, attn_i, probs_x, probs_i, n })
}

/// Gradients of a scalar loss sum(g_x . attn_x) + sum(g_i . attn_i) with
/// respect to every projection matrix and both token tensors.
#[derive(Clone, Debug)]
pub struct CrossDomainGrads<R> {
    pub d_wq_x: Vec<R>,
    pub d_wk_x: Vec<R>,
    pub d_wv_x: Vec<R>,
    pub d_wq_i: Vec<R>,
    pub d_wk_i: Vec<R>,
    pub d_wv_i: Vec<R>,
    pub d_z_x: Vec<R>,
    pub d_z_i: Vec<R>,
}

pub fn cross_domain_attention_backward<R: Real>(
    z_x: &[R],
    z_i: &[R],
    n: usize,
    proj: &AttnProjections<R>,
    w: f64,
    fwd: &CrossDomainOutput<R>,
    g_x: &[R],
    g_i: &[R],
) -> CrossDomainGrads<R> {
    let (d, dk, dv) = (proj.d_model, proj.d_k, proj.d_v);
    let m = 2 * n;
    // recompute the projected activations (cheaper than caching everything)
    let q_x = project(z_x, n, d, &proj.wq_x, dk);
    let q_i = project(z_i, n, d, &proj.wq_i, dk);
    let k_x = project(z_x, n, d, &proj.wk_x, dk);
    let k_i = project(z_i, n, d, &proj.wk_i, dk);
    let v_x = project(z_x, n, d, &proj.wv_x, dv);
    let v_i = project(z_i, n, d, &proj.wv_i, dv);
    let mut k_cat = k_x;
    k_cat.extend_from_slice(&k_i);
    let mut v_cat = v_x;
    v_cat.extend_from_slice(&v_i);

    let mut dq_x = vec![R::ZERO; n * dk];
    let mut dq_i = vec![R::ZERO; n * dk];
    let mut dk_cat = vec![R::ZERO; m * dk];
    let mut dv_cat = vec![R::ZERO; m * dv];
    attn_core_backward(
        &q_x, n, dk, &k_cat, m, &v_cat, dv, n, w, &fwd.probs_x, g_x, &mut dq_x, &mut dk_cat,
        &mut dv_cat,
    );
    attn_core_backward(
        &q_i, n, dk, &k_cat, m, &v_cat, dv, m, 1.0, &fwd.probs_i, g_i, &mut dq_i, &mut dk_cat,
        &mut dv_cat,
    );

    let mut g = CrossDomainGrads {
        d_wq_x: vec![R::ZERO; dk * d],
        d_wk_x: vec![R::ZERO; dk * d],
        d_wv_x: vec![R::ZERO; dv * d],
        d_wq_i: vec![R::ZERO; dk * d],
        d_wk_i: vec![R::ZERO; dk * d],
        d_wv_i: vec![R::ZERO; dv * d],
        d_z_x: vec![R::ZERO; n * d],
        d_z_i: vec![R::ZERO; n * d],
    };
    let (dk_own, dk_cross) = dk_cat.split_at(n * dk);
    let (dv_own, dv_cross) = dv_cat.split_at(n * dv);
    project_backward(z_x, n, d, &proj.wq_x, dk, &dq_x, &mut g.d_wq_x, &mut g.d_z_x);
    project_backward(z_x, n, d, &proj.wk_x, dk, dk_own, &mut g.d_wk_x, &mut g.d_z_x);
    project_backward(z_x, n, d, &proj.wv_x, dv, dv_own, &mut g.d_wv_x, &mut g.d_z_x);
    project_backward(z_i, n, d, &proj.wq_i, dk, &dq_i, &mut g.d_wq_i, &mut g.d_z_i);
    project_backward(z_i, n, d, &proj.wk_i, dk, dk_cross, &mut g.d_wk_i, &mut g.d_z_i);
    project_backward(z_i, n, d, &proj.wv_i, dv, dv_cross, &mut g.d_wv_i, &mut g.d_z_i);
    g
}

fn loss_of<R: Real>(out: &CrossDomainOutput<R>, g_x: &[R], g_i: &[R]) -> f64 {
    let mut s = 0.0f64;
    for (a, b) in out.attn_x.iter().zip(g_x.iter()) {
        s += a.to_f64() * b.to_f64();
    }
    for (a, b) in out.attn_i.iter().zip(g_i.iter()) {
        s += a.to_f64() * b.to_f64();
    }
    s
}

/// Compare the analytic gradients against central finite differences in f64.
/// Returns the max over all parameter and input components of
/// |analytic - numeric| / max(|analytic|, 1e-8).
pub fn attention_backward_check(
    n: usize,
    d_model: usize,
    d_k: usize,
    d_v: usize,
    w: f64,
    seed: u64,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::config("epsilon", format!("{epsilon} not in [1e-6, 1e-3]")));
    }
    let mut rng = Rng::new(seed);
    let proj = AttnProjections::<f64>::random(d_model, d_k, d_v, &mut rng);
    let mut z_x = vec![0.0f64; n * d_model];
    let mut z_i = vec![0.0f64; n * d_model];
    rng.fill_normal_f64(&mut z_x);
    rng.fill_normal_f64(&mut z_i);
    let mut g_x = vec![0.0f64; n * d_v];
    let mut g_i = vec![0.0f64; n * d_v];
    rng.fill_normal_f64(&mut g_x);
    rng.fill_normal_f64(&mut g_i);

    let fwd = cross_domain_attention(&z_x, &z_i, n, &proj, w)?;
    let grads = cross_domain_attention_backward(&z_x, &z_i, n, &proj, w, &fwd, &g_x, &g_i);

    let mut max_rel = 0.0f64;
    let mut check = |name: &str,
                     analytic: &[f64],
                     read: &dyn Fn(&AttnProjections<f64>, &[f64], &[f64], usize) -> f64,
                     write: &mut dyn FnMut(
        &mut AttnProjections<f64>,
        &mut [f64],
        &mut [f64],
        usize,
        f64,
    )|
     -> Result<()> {
        for idx in 0..analytic.len() {
            let a = analytic[idx];
            if !a.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient in {name}[{idx}]")));
            }
            let orig = read(&proj, &z_x, &z_i, idx);
            let mut p_hi = proj.clone();
            let mut zx_hi = z_x.clone();
            let mut zi_hi = z_i.clone();
            write(&mut p_hi, &mut zx_hi, &mut zi_hi, idx, orig + epsilon);
            let hi = loss_of(&cross_domain_attention(&zx_hi, &zi_hi, n, &p_hi, w)?, &g_x, &g_i);
            let mut p_lo = proj.clone();
            let mut zx_lo = z_x.clone();
            let mut zi_lo = z_i.clone();
            write(&mut p_lo, &mut zx_lo, &mut zi_lo, idx, orig - epsilon);
            let lo = loss_of(&cross_domain_attention(&zx_lo, &zi_lo, n, &p_lo, w)?, &g_x, &g_i);
            let numeric = (hi - lo) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / a.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        Ok(())
    };

    macro_rules! check_mat {
        ($name:literal, $grad:expr, $field:ident) => {
            check(
                $name,
                &$grad,
                &|p, _, _, i| p.$field[i],
                &mut |p, _, _, i, v| p.$field[i] = v,
            )?;
        };
    }
    check_mat!("wq_x", grads.d_wq_x, wq_x);
    check_mat!("wk_x", grads.d_wk_x, wk_x);
    check_mat!("wv_x", grads.d_wv_x, wv_x);
    check_mat!("wq_i", grads.d_wq_i, wq_i);
    check_mat!("wk_i", grads.d_wk_i, wk_i);
    check_mat!("wv_i", grads.d_wv_i, wv_i);
    check("z_x", &grads.d_z_x, &|_, zx, _, i| zx[i], &mut |_, zx, _, i, v| zx[i] = v)?;
    check("z_i", &grads.d_z_i, &|_, _, zi, i| zi[i], &mut |_, _, zi, i, v| zi[i] = v)?;
    Ok(max_rel)
}

/// Reference image-branch path materializing the full [n, 2n] additive bias
/// matrix (log 1 = 0 on the own block, log w on the cross block; -inf rows
/// for w = 0). Used to validate the fused masked path and to benchmark it.
pub fn biased_attention_explicit<R: Real>(
    q: &[R],
    n: usize,
    dk: usize,
    k_cat: &[R],
    v_cat: &[R],
    dv: usize,
    w: f64,
) -> Vec<R> {
    let m = 2 * n;
    let ln_w = R::from_f64(w.ln()); // -inf when w = 0
    let bias: Vec<R> = (0..m)
        .map(|j| if j < n { R::ZERO } else { ln_w })
        .collect();
    let scale = R::from_f64(1.0 / (dk as f64).sqrt());
    let mut out = vec![R::ZERO; n * dv];
    let mut s_row = vec![R::ZERO; m];
    for i in 0..n {
        let q_row = &q[i * dk..(i + 1) * dk];
        let mut row_max = R::from_f64(f64::NEG_INFINITY);
        for j in 0..m {
            let k_row = &k_cat[j * dk..(j + 1) * dk];
            let mut s = R::ZERO;
            for (a, b) in q_row.iter().zip(k_row.iter()) {
                s += *a * *b;
            }
            s = s * scale + bias[j];
            s_row[j] = s;
            row_max = row_max.maxv(s);
        }
        let mut denom = R::ZERO;
        for s in s_row.iter_mut() {
            *s = (*s - row_max).exp();
            denom += *s;
        }
        let out_row = &mut out[i * dv..(i + 1) * dv];
        for j in 0..m {
            let p = s_row[j] / denom;
            let v_row = &v_cat[j * dv..(j + 1) * dv];
            for (o, vv) in out_row.iter_mut().zip(v_row.iter()) {
                *o += p * *vv;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub n: usize,
    pub d: usize,
    pub w: f64,
    pub reps: usize,
    pub explicit_median_ns: u64,
    pub explicit_p95_ns: u64,
    pub fused_median_ns: u64,
    pub fused_p95_ns: u64,
    pub fused_tokens_per_sec: f64,
    pub max_abs_diff: f64,
}

fn percentile_ns(sorted: &[u64], p: f64) -> u64 {
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Time the explicit bias-matrix path against the fused masked path on one
/// random instance and confirm they agree.
pub fn bench_attention(n: usize, d: usize, w: f64, reps: usize) -> Result<BenchReport> {
    if n == 0 || d == 0 || reps == 0 {
        return Err(Error::config("bench", "n, d, reps must be positive"));
    }
    let mut rng = Rng::new(0x5EED);
    let mk = |len: usize, rng: &mut Rng| -> Vec<f32> {
        let mut v = vec![0.0f32; len];
        rng.fill_normal_f32(&mut v);
        v
    };
    let q = mk(n * d, &mut rng);
    let k_cat = mk(2 * n * d, &mut rng);
    let v_cat = mk(2 * n * d, &mut rng);

    let mut fused_out = vec![0.0f32; n * d];
    let mut probs = vec![0.0f32; n * 2 * n];
    let mut fused_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = std::time::Instant::now();
        attn_core(&q, n, d, &k_cat, 2 * n, &v_cat, d, n, w, &mut fused_out, &mut probs);
        fused_times.push(t0.elapsed().as_nanos() as u64);
    }
    let mut explicit_out = Vec::new();
    let mut explicit_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = std::time::Instant::now();
        explicit_out = biased_attention_explicit(&q, n, d, &k_cat, &v_cat, d, w);
        explicit_times.push(t0.elapsed().as_nanos() as u64);
    }
    let mut max_abs = 0.0f64;
    for (a, b) in fused_out.iter().zip(explicit_out.iter()) {
        max_abs = max_abs.max((a - b).abs() as f64);
    }
    fused_times.sort_unstable();
    explicit_times.sort_unstable();
    let fused_median = percentile_ns(&fused_times, 0.5);
    Ok(BenchReport {
        n,
        d,
        w,
        reps,
        explicit_median_ns: percentile_ns(&explicit_times, 0.5),
        explicit_p95_ns: percentile_ns(&explicit_times, 0.95),
        fused_median_ns: fused_median,
        fused_p95_ns: percentile_ns(&fused_times, 0.95),
        fused_tokens_per_sec: n as f64 / (fused_median as f64 * 1e-9),
        max_abs_diff: max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_drop() -> AttnWeightSchedule {
        AttnWeightSchedule::Drop { layers: vec![3, 4, 5, 6, 7], tau: 900.0 }
    }

    fn paper_gauss() -> AttnWeightSchedule {
        AttnWeightSchedule::Gaussian { alpha: 1.0, tau: 800.0, sigma: 100.0 }
    }

    #[test]
    fn drop_schedule_paper_points() {
        let s = paper_drop();
        assert_eq!(eval_weight(&s, 3, 500.0), 1.0);
        assert_eq!(eval_weight(&s, 1, 500.0), 0.0);
        assert_eq!(eval_weight(&s, 3, 950.0), 0.0);
        assert_eq!(eval_weight(&s, 7, 900.0), 1.0); // boundary is inclusive
        assert_eq!(eval_weight(&s, 8, 0.0), 0.0);
    }

    #[test]
    fn gaussian_schedule_paper_points() {
        let s = paper_gauss();
        assert_eq!(eval_weight(&s, 1, 800.0), 1.0);
        let w = eval_weight(&s, 5, 700.0);
        assert!((w - 0.36787944117144233).abs() < 1e-15, "{w}");
        // symmetric around tau; maximum exactly at tau
        assert_eq!(eval_weight(&s, 1, 700.0), eval_weight(&s, 1, 900.0));
        for t in 0..=1000 {
            let w = eval_weight(&s, 1, t as f64);
            assert!(w > 0.0 && w <= 1.0);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(AttnWeightSchedule::Gaussian { alpha: 0.0, tau: 800.0, sigma: 100.0 }
            .validate()
            .is_err());
        assert!(AttnWeightSchedule::Gaussian { alpha: 1.1, tau: 800.0, sigma: 100.0 }
            .validate()
            .is_err());
        let e = AttnWeightSchedule::Gaussian { alpha: 1.0, tau: 800.0, sigma: 0.0 }
            .validate()
            .unwrap_err();
        assert_eq!(e.category(), "config");
        assert!(paper_drop().validate().is_ok());
        assert_eq!(eval_weight(&AttnWeightSchedule::Full, 9, 1000.0), 1.0);
        assert_eq!(eval_weight(&AttnWeightSchedule::Off, 1, 0.0), 0.0);
    }

    #[test]
    fn hand_computed_scalar_case() {
        // N=1, d_k=1: own (k=1, v=2), cross (k=1, v=4), q=1, w=0.5
        // logits (1, 1 + ln .5) -> softmax (2/3, 1/3) -> 2*(2/3) + 4*(1/3) = 8/3
        let proj = AttnProjections::<f64> {
            d_model: 1,
            d_k: 1,
            d_v: 1,
            wq_x: vec![1.0],
            wk_x: vec![1.0],
            wv_x: vec![2.0],
            wq_i: vec![1.0],
            wk_i: vec![1.0],
            wv_i: vec![4.0],
        };
        let out = cross_domain_attention(&[1.0], &[1.0], 1, &proj, 0.5).unwrap();
        assert!((out.attn_x[0] - 8.0 / 3.0).abs() < 1e-12, "{}", out.attn_x[0]);
        assert!((out.probs_x[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out.probs_x[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    /// Naive single-domain attention used as the independent endpoint oracle.
    fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, dk: usize, dv: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let mut logits = vec![0.0; m];
            for j in 0..m {
                let mut s = 0.0;
                for c in 0..dk {
                    s += q[i * dk + c] * k[j * dk + c];
                }
                logits[j] = s / (dk as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..m {
                for c in 0..dv {
                    out[i * dv + c] += exps[j] / z * v[j * dv + c];
                }
            }
        }
        out
    }

    fn random_instance(n: usize, d: usize, seed: u64) -> (Vec<f64>, Vec<f64>, AttnProjections<f64>) {
        let mut rng = Rng::new(seed);
        let proj = AttnProjections::<f64>::random(d, d, d, &mut rng);
        let mut z_x = vec![0.0; n * d];
        let mut z_i = vec![0.0; n * d];
        rng.fill_normal_f64(&mut z_x);
        rng.fill_normal_f64(&mut z_i);
        (z_x, z_i, proj)
    }

    #[test]
    fn endpoint_identities() {
        for seed in 0..20 {
            let n = 1 + (seed as usize * 7) % 16;
            let d = 1 + (seed as usize * 5) % 32;
            let (z_x, z_i, proj) = random_instance(n, d, seed);
            let q_x = project(&z_x, n, d, &proj.wq_x, d);
            let k_x = project(&z_x, n, d, &proj.wk_x, d);
            let v_x = project(&z_x, n, d, &proj.wv_x, d);
            let k_i = project(&z_i, n, d, &proj.wk_i, d);
            let v_i = project(&z_i, n, d, &proj.wv_i, d);
            let mut k_cat = k_x.clone();
            k_cat.extend_from_slice(&k_i);
            let mut v_cat = v_x.clone();
            v_cat.extend_from_slice(&v_i);

            // w = 1: plain attention over the 2N concatenated tokens
            let full = cross_domain_attention(&z_x, &z_i, n, &proj, 1.0).unwrap();
            let want = naive_attention(&q_x, &k_cat, &v_cat, n, 2 * n, d, d);
            for (a, b) in full.attn_x.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "w=1 {a} vs {b}");
            }

            // w = 0: attention with the intrinsic tokens absent
            let off = cross_domain_attention(&z_x, &z_i, n, &proj, 0.0).unwrap();
            let want = naive_attention(&q_x, &k_x, &v_x, n, n, d, d);
            for (a, b) in off.attn_x.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "w=0 {a} vs {b}");
            }
            // cross half of the image-branch rows is exactly zero
            for i in 0..n {
                for j in n..2 * n {
                    assert_eq!(off.probs_x[i * 2 * n + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_intrinsic_invariant_to_w() {
        let (z_x, z_i, proj) = random_instance(6, 8, 99);
        let mut base_i: Option<Vec<f64>> = None;
        for &w in &[1.0, 0.7, 0.3, 0.05, 1e-6] {
            let out = cross_domain_attention(&z_x, &z_i, 6, &proj, w).unwrap();
            for i in 0..6 {
                let sx: f64 = out.probs_x[i * 12..(i + 1) * 12].iter().sum();
                let si: f64 = out.probs_i[i * 12..(i + 1) * 12].iter().sum();
                assert!((sx - 1.0).abs() < 1e-6);
                assert!((si - 1.0).abs() < 1e-6);
            }
            match &base_i {
                None => base_i = Some(out.attn_i.clone()),
                Some(b) => {
                    for (a, bb) in out.attn_i.iter().zip(b.iter()) {
                        assert_eq!(a, bb, "intrinsic branch must ignore w");
                    }
                }
            }
        }
    }

    #[test]
    fn cross_mass_monotone_in_w() {
        let (z_x, z_i, proj) = random_instance(5, 8, 7);
        let ws = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0];
        let mut prev: Option<Vec<f64>> = None;
        for &w in &ws {
            let out = cross_domain_attention(&z_x, &z_i, 5, &proj, w).unwrap();
            // every individual cross-domain weight is nondecreasing in w,
            // every own-domain weight nonincreasing
            if let Some(p) = &prev {
                for i in 0..5 {
                    for j in 0..10 {
                        let cur = out.probs_x[i * 10 + j];
                        let old = p[i * 10 + j];
                        if j < 5 {
                            assert!(cur <= old + 1e-12, "own mass must not grow");
                        } else {
                            assert!(cur >= old - 1e-12, "cross mass must not shrink");
                        }
                    }
                }
            }
            prev = Some(out.probs_x.clone());
        }
    }

    #[test]
    fn token_count_mismatch_rejected() {
        let (z_x, _, proj) = random_instance(4, 8, 1);
        let z_i_short = vec![0.0; 3 * 8];
        let e = cross_domain_attention(&z_x, &z_i_short, 4, &proj, 0.5).unwrap_err();
        assert_eq!(e.category(), "contract");
    }

    #[test]
    fn gradcheck_random_instances() {
        for seed in 0..4 {
            let err = attention_backward_check(4, 8, 8, 8, 0.37, seed, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn gradcheck_linear_value_path() {
        // constant value tensors: gradients w.r.t. V projections are exact
        let err = attention_backward_check(3, 4, 4, 4, 1.0, 11, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradcheck_epsilon_validation() {
        assert!(attention_backward_check(2, 2, 2, 2, 0.5, 0, 1e-2).is_err());
        assert!(attention_backward_check(2, 2, 2, 2, 0.5, 0, 1e-7).is_err());
    }

    #[test]
    fn masked_path_carries_no_gradient() {
        // w = 0 and no cotangent on the intrinsic output: nothing can reach
        // the intrinsic-branch key/value projections through the image branch.
        let (z_x, z_i, proj) = random_instance(4, 6, 3);
        let fwd = cross_domain_attention(&z_x, &z_i, 4, &proj, 0.0).unwrap();
        let mut g_x = vec![0.0; 4 * 6];
        let mut rng = Rng::new(5);
        rng.fill_normal_f64(&mut g_x);
        let g_i = vec![0.0; 4 * 6];
        let grads = cross_domain_attention_backward(&z_x, &z_i, 4, &proj, 0.0, &fwd, &g_x, &g_i);
        assert!(grads.d_wk_i.iter().all(|&g| g == 0.0));
        assert!(grads.d_wv_i.iter().all(|&g| g == 0.0));
        assert!(grads.d_wq_i.iter().all(|&g| g == 0.0));
        assert!(grads.d_z_i.iter().all(|&g| g == 0.0));
        // while the image-side projections do receive gradient
        assert!(grads.d_wq_x.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn explicit_and_fused_paths_agree() {
        let mut rng = Rng::new(21);
        for &(n, d) in &[(1usize, 1usize), (8, 16), (32, 8)] {
            for &w in &[0.0, 0.31, 1.0] {
                let mut q = vec![0.0f32; n * d];
                let mut k_cat = vec![0.0f32; 2 * n * d];
                let mut v_cat = vec![0.0f32; 2 * n * d];
                rng.fill_normal_f32(&mut q);
                rng.fill_normal_f32(&mut k_cat);
                rng.fill_normal_f32(&mut v_cat);
                let mut fused = vec![0.0f32; n * d];
                let mut probs = vec![0.0f32; n * 2 * n];
                attn_core(&q, n, d, &k_cat, 2 * n, &v_cat, d, n, w, &mut fused, &mut probs);
                let explicit = biased_attention_explicit(&q, n, d, &k_cat, &v_cat, d, w);
                for (a, b) in fused.iter().zip(explicit.iter()) {
                    assert!((a - b).abs() < 1e-6, "n={n} w={w}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn bench_smoke_n1_exact_agreement() {
        let r = bench_attention(1, 4, 0.5, 3).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        let r = bench_attention(64, 16, 0.0, 5).unwrap();
        assert!(r.max_abs_diff < 1e-6);
    }
}
