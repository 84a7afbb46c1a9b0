//! Noise schedules, the forward corruption process, deterministic DDIM
//! sampling, and classifier-free guidance.
//!
//! Schedule tables are computed and stored in `f64`; per-step coefficients
//! are converted to the working precision at the point of use so f32 and
//! f64 code paths share one table.

use ndarray::ArrayD;

use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Betas interpolated linearly from 1e-4 to 2e-2.
    Linear,
    /// Squared-cosine alpha-bar curve with the usual 0.008 offset.
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::argument(format!(
                "unknown schedule kind '{other}' (expected linear|cosine)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

/// Precomputed per-timestep schedule quantities.
#[derive(Clone, Debug)]
pub struct ScheduleTable {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;

impl ScheduleTable {
    pub fn new(kind: ScheduleKind, t_total: usize) -> Result<Self> {
        if t_total < 2 {
            return Err(Error::range(format!(
                "schedule needs at least 2 steps, got {t_total}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..t_total)
                .map(|t| {
                    LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * t as f64
                            / (t_total - 1) as f64
                })
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let v = ((t / t_total as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                    v.cos().powi(2)
                };
                let f0 = f(0.0);
                let mut prev_bar = 1.0;
                (0..t_total)
                    .map(|t| {
                        let bar = f((t + 1) as f64) / f0;
                        let beta = (1.0 - bar / prev_bar).clamp(1e-8, 0.999);
                        prev_bar = bar;
                        beta
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_total);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(ScheduleTable {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Alpha-bar for the step *before* `t_prev`; `None` encodes the clean
    /// endpoint where alpha-bar is exactly 1.
    pub fn alpha_bar_opt(&self, t_prev: Option<usize>) -> f64 {
        match t_prev {
            Some(t) => self.alpha_bars[t],
            None => 1.0,
        }
    }
}

/// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse<E: Scalar>(
    x0: &ArrayD<E>,
    eps: &ArrayD<E>,
    t: usize,
    table: &ScheduleTable,
) -> ArrayD<E> {
    assert_eq!(x0.shape(), eps.shape(), "forward_diffuse: shape mismatch");
    let ab = table.alpha_bar(t);
    let c0 = E::from_f64(ab.sqrt());
    let ce = E::from_f64((1.0 - ab).sqrt());
    let mut out = x0.mapv(|v| v * c0);
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
        *o += e * ce;
    });
    out
}

/// Invert the forward process given a noise estimate:
/// `x0_hat = (x_t - sqrt(1-abar) eps_hat) / sqrt(abar)`.
pub fn pred_x0_from_eps<E: Scalar>(
    xt: &ArrayD<E>,
    eps_hat: &ArrayD<E>,
    t: usize,
    table: &ScheduleTable,
) -> ArrayD<E> {
    let ab = table.alpha_bar(t);
    let inv = E::from_f64(1.0 / ab.sqrt());
    let ce = E::from_f64((1.0 - ab).sqrt());
    let mut out = xt.to_owned();
    ndarray::Zip::from(&mut out).and(eps_hat).for_each(|o, &e| {
        *o = (*o - e * ce) * inv;
    });
    out
}

/// The matching noise estimate implied by a direct `x0` prediction:
/// `eps_hat = (x_t - sqrt(abar) x0_hat) / sqrt(1-abar)`.
pub fn eps_from_pred_x0<E: Scalar>(
    xt: &ArrayD<E>,
    x0_hat: &ArrayD<E>,
    t: usize,
    table: &ScheduleTable,
) -> ArrayD<E> {
    let ab = table.alpha_bar(t);
    let c0 = E::from_f64(ab.sqrt());
    let inv = E::from_f64(1.0 / (1.0 - ab).sqrt());
    let mut out = xt.to_owned();
    ndarray::Zip::from(&mut out).and(x0_hat).for_each(|o, &x| {
        *o = (*o - x * c0) * inv;
    });
    out
}

/// Descending DDIM timestep list: `steps` indices spread uniformly over
/// `[0, t_total-1]`, starting at `t_total-1` and ending at 0.
pub fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 2 || steps > t_total {
        return Err(Error::range(format!(
            "ddim steps must be in [2, {t_total}], got {steps}"
        )));
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            let f = i as f64 * (t_total - 1) as f64 / (steps - 1) as f64;
            f.round() as usize
        })
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// One deterministic (eta = 0) DDIM update from `t` to `t_prev`
/// (`None` = final step onto the clean sample).
pub fn ddim_step<E: Scalar>(
    xt: &ArrayD<E>,
    eps_hat: &ArrayD<E>,
    t: usize,
    t_prev: Option<usize>,
    table: &ScheduleTable,
) -> ArrayD<E> {
    let x0_hat = pred_x0_from_eps(xt, eps_hat, t, table);
    let ab_prev = table.alpha_bar_opt(t_prev);
    let c0 = E::from_f64(ab_prev.sqrt());
    let ce = E::from_f64((1.0 - ab_prev).sqrt());
    let mut out = x0_hat.mapv(|v| v * c0);
    ndarray::Zip::from(&mut out).and(eps_hat).for_each(|o, &e| {
        *o += e * ce;
    });
    out
}

/// Classifier-free guidance: `eps = w * cond + (1 - w) * uncond`.
///
/// `w = 1` and `w = 0` return the corresponding input bit-for-bit rather
/// than going through the arithmetic.
pub fn cfg_combine<E: Scalar>(cond: &ArrayD<E>, uncond: &ArrayD<E>, w: f64) -> ArrayD<E> {
    assert_eq!(cond.shape(), uncond.shape(), "cfg_combine: shape mismatch");
    if w == 1.0 {
        return cond.to_owned();
    }
    if w == 0.0 {
        return uncond.to_owned();
    }
    let cw = E::from_f64(w);
    let uw = E::from_f64(1.0 - w);
    let mut out = cond.mapv(|c| c * cw);
    ndarray::Zip::from(&mut out).and(uncond).for_each(|o, &u| {
        *o += u * uw;
    });
    out
}

/// Run the full DDIM loop. `model(x_t, t)` returns the noise estimate
/// (after any guidance combination the caller wants to apply).
pub fn ddim_sample<E: Scalar, M>(
    mut model: M,
    x_init: ArrayD<E>,
    table: &ScheduleTable,
    steps: usize,
) -> Result<ArrayD<E>>
where
    M: FnMut(&ArrayD<E>, usize) -> ArrayD<E>,
{
    let ts = ddim_timesteps(table.len(), steps)?;
    let mut x = x_init;
    for (i, &t) in ts.iter().enumerate() {
        let eps_hat = model(&x, t);
        if eps_hat.shape() != x.shape() {
            return Err(Error::shape(format!(
                "model output shape {:?} != state shape {:?}",
                eps_hat.shape(),
                x.shape()
            )));
        }
        let t_prev = ts.get(i + 1).copied();
        x = ddim_step(&x, &eps_hat, t, t_prev, table);
        let finite = x.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric {
                step: t,
                message: "non-finite state during DDIM sampling".into(),
            });
        }
    }
    Ok(x)
}
