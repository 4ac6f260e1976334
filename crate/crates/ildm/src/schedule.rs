//! Discrete-time diffusion machinery shared by both domains: the noise
//! schedule, forward corruption, epsilon/v/x0 conversions, and the
//! deterministic reverse step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Timestep range the schedule hyperparameters are quoted in. Internal step
/// indices map onto this range so tau/sigma keep their meaning for any T.
pub const PAPER_T: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    Epsilon,
    V,
}

impl Parameterization {
    pub fn tag(self) -> u8 {
        match self {
            Parameterization::Epsilon => 0,
            Parameterization::V => 1,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Parameterization::Epsilon),
            1 => Ok(Parameterization::V),
            _ => Err(Error::config("parameterization", format!("unknown tag {t}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Internal index -> quoted [0, 1000] range (identity when T = 1000).
    pub fn to_paper_time(&self, t: usize) -> f64 {
        t as f64 * PAPER_T / self.steps() as f64
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::contract(format!(
                "timestep {t} out of range for T={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn build_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::config("T", "step count must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::config("beta_start", format!("{beta_start} not in (0,1)")));
    }
    if !(beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::config("beta_end", format!("{beta_end} not in (0,1)")));
    }
    if beta_start > beta_end {
        return Err(Error::config("beta_start", "beta_start must be <= beta_end"));
    }
    let beta: Vec<f64> = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0f64;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "forward_diffuse")?;
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (ca, cb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&x, &e)| ca * x + cb * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// v = sqrt(abar_t) eps - sqrt(1 - abar_t) x0
pub fn to_v_target(x0: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, eps, "to_v_target")?;
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (ca, cb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&x, &e)| ca * e - cb * x)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Recover the x0 estimate implied by a model output under `param`.
pub fn pred_to_x0(x_t: &Tensor, pred: &Tensor, t: usize, param: Parameterization, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, pred, "pred_to_x0")?;
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (ca, cb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = match param {
        // x0 = (x_t - sqrt(1-abar) eps) / sqrt(abar)
        Parameterization::Epsilon => x_t
            .data()
            .iter()
            .zip(pred.data().iter())
            .map(|(&xt, &e)| (xt - cb * e) / ca)
            .collect(),
        // x0 = sqrt(abar) x_t - sqrt(1-abar) v
        Parameterization::V => x_t
            .data()
            .iter()
            .zip(pred.data().iter())
            .map(|(&xt, &v)| ca * xt - cb * v)
            .collect(),
    };
    Tensor::from_vec(x_t.shape(), data)
}

/// eps recovered from (x_t, v) by the exact linear inversion
/// eps = sqrt(1-abar) x_t + sqrt(abar) v (well conditioned at every t).
pub fn eps_from_v(x_t: &Tensor, v: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, v, "eps_from_v")?;
    s.check_t(t)?;
    let ab = s.alpha_bar()[t];
    let (ca, cb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = x_t
        .data()
        .iter()
        .zip(v.data().iter())
        .map(|(&xt, &vv)| cb * xt + ca * vv)
        .collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// eps implied by (x_t, x0).
pub fn implied_eps(x_t: &Tensor, x0: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, x0, "implied_eps")?;
    s.check_t(t)?;
    let ab = s.alpha_bar[t];
    let (ca, cb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = x_t
        .data()
        .iter()
        .zip(x0.data().iter())
        .map(|(&xt, &x)| (xt - ca * x) / cb)
        .collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// One deterministic reverse step. `t_prev = None` means this is the final
/// step and the (clamped) x0 estimate is returned directly.
pub fn ddim_step(
    x_t: &Tensor,
    pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    param: Parameterization,
    x0_clip: f64,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(x_t, pred, "ddim_step")?;
    s.check_t(t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::contract(format!("ddim_step: t_prev {tp} must be < t {t}")));
        }
    }
    let clip = x0_clip as f32;
    let mut x0 = pred_to_x0(x_t, pred, t, param, s)?;
    for v in x0.data_mut() {
        *v = v.clamp(-clip, clip);
    }
    let eps = implied_eps(x_t, &x0, t, s)?;
    // abar at the destination; 1 at the end of the chain so the output is x0
    let ab_prev = match t_prev {
        Some(tp) => s.alpha_bar[tp],
        None => 1.0,
    };
    let (ca, cb) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&x, &e)| ca * x + cb * e)
        .collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// Descending internal timesteps for an `n_steps`-step sampling run,
/// uniformly spaced over [0, T).
pub fn sampling_timesteps(t_total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 1 || n_steps > t_total {
        return Err(Error::config(
            "steps",
            format!("sampling steps {n_steps} must be in [1, {t_total}]"),
        ));
    }
    let mut ts: Vec<usize> = (0..n_steps).map(|i| i * t_total / n_steps).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}
