//! Flow-matching mathematics on the straight data-to-noise path.
//!
//! `tau = 0` is data and `tau = 1` is the standard Gaussian prior. The path is
//! `x_tau = (1 - tau) x0 + tau x1`, whose velocity `dx/dtau = x1 - x0` is the
//! regression target. Sampling integrates the learned field from `tau = 1`
//! back to `tau = 0` with explicit Euler steps.

use crate::error::{invalid, Result};
use crate::mat::MelGrid;
use crate::real::Real;

/// Default number of Euler steps used by the sampler.
pub const DEFAULT_ODE_STEPS: usize = 32;

/// A position on the flow path, always inside `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct FlowStep(f64);

impl FlowStep {
    pub fn new(tau: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&tau) {
            Ok(Self(tau))
        } else {
            invalid(format!("flow step {tau} outside [0, 1]"))
        }
    }

    pub const DATA: FlowStep = FlowStep(0.0);
    pub const PRIOR: FlowStep = FlowStep(1.0);

    #[inline]
    pub fn tau(self) -> f64 {
        self.0
    }
}

/// Classifier-free guidance scale `w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceScale(f64);

impl GuidanceScale {
    pub fn new(w: f64) -> Result<Self> {
        if w.is_finite() && w >= 0.0 {
            Ok(Self(w))
        } else {
            invalid(format!("guidance scale must be finite and >= 0, got {w}"))
        }
    }

    #[inline]
    pub fn w(self) -> f64 {
        self.0
    }

    /// True when the unconditional branch has no influence on the result.
    #[inline]
    pub fn is_conditional_only(self) -> bool {
        self.0 == 1.0
    }
}

impl Default for GuidanceScale {
    fn default() -> Self {
        Self(3.0)
    }
}

/// One training draw along the path, with its interpolant.
#[derive(Clone, Debug)]
pub struct FlowSample<R: Real = f32> {
    pub x0: MelGrid<R>,
    pub x1: MelGrid<R>,
    pub tau: FlowStep,
    pub x_tau: MelGrid<R>,
}

impl<R: Real> FlowSample<R> {
    pub fn new(x0: MelGrid<R>, x1: MelGrid<R>, tau: FlowStep) -> Result<Self> {
        let x_tau = interpolate(&x0, &x1, tau)?;
        Ok(Self { x0, x1, tau, x_tau })
    }

    pub fn target(&self) -> MelGrid<R> {
        target_velocity(&self.x0, &self.x1).expect("shapes checked at construction")
    }
}

/// `(1 - tau) x0 + tau x1`, returning the endpoints themselves at `tau ∈ {0, 1}`.
pub fn interpolate<R: Real>(x0: &MelGrid<R>, x1: &MelGrid<R>, tau: FlowStep) -> Result<MelGrid<R>> {
    x0.ensure_same_shape(x1, "interpolate")?;
    if tau.0 == 0.0 {
        return Ok(x0.clone());
    }
    if tau.0 == 1.0 {
        return Ok(x1.clone());
    }
    let t = R::c(tau.0);
    let s = R::one() - t;
    let mut out = x0.clone();
    for (o, &b) in out.data_mut().iter_mut().zip(x1.data()) {
        *o = s * *o + t * b;
    }
    Ok(out)
}

/// `x1 - x0`, the constant velocity of the straight path.
pub fn target_velocity<R: Real>(x0: &MelGrid<R>, x1: &MelGrid<R>) -> Result<MelGrid<R>> {
    x0.ensure_same_shape(x1, "target_velocity")?;
    let mut out = x1.clone();
    for (o, &a) in out.data_mut().iter_mut().zip(x0.data()) {
        *o -= a;
    }
    Ok(out)
}

fn check_mask<R: Real>(grid: &MelGrid<R>, frame_mask: &[bool]) -> Result<usize> {
    if frame_mask.len() != grid.rows() {
        return invalid(format!(
            "frame mask has {} entries for {} frames",
            frame_mask.len(),
            grid.rows()
        ));
    }
    let active = frame_mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return invalid("frame mask selects no frames; loss undefined");
    }
    Ok(active)
}

/// Mean squared error between `v_pred` and `x1 - x0` over unmasked frames.
pub fn fm_loss<R: Real>(
    v_pred: &MelGrid<R>,
    x0: &MelGrid<R>,
    x1: &MelGrid<R>,
    frame_mask: &[bool],
) -> Result<R> {
    fm_loss_and_grad(v_pred, x0, x1, frame_mask).map(|(l, _)| l)
}

/// [`fm_loss`] together with its gradient with respect to `v_pred`.
///
/// Masked frames receive an exactly-zero gradient.
pub fn fm_loss_and_grad<R: Real>(
    v_pred: &MelGrid<R>,
    x0: &MelGrid<R>,
    x1: &MelGrid<R>,
    frame_mask: &[bool],
) -> Result<(R, MelGrid<R>)> {
    v_pred.ensure_same_shape(x0, "fm_loss prediction vs data")?;
    x0.ensure_same_shape(x1, "fm_loss data vs noise")?;
    let active = check_mask(v_pred, frame_mask)?;
    let count = R::c((active * v_pred.cols()) as f64);
    let two_over = R::c(2.0) / count;
    let mut grad = MelGrid::zeros(v_pred.rows(), v_pred.cols());
    let mut sum = R::zero();
    for (f, &keep) in frame_mask.iter().enumerate() {
        if !keep {
            continue;
        }
        let (v, a, b) = (v_pred.row(f), x0.row(f), x1.row(f));
        let g = grad.row_mut(f);
        for j in 0..v.len() {
            let d = v[j] - (b[j] - a[j]);
            sum += d * d;
            g[j] = two_over * d;
        }
    }
    Ok((sum / count, grad))
}

/// `(1 - w) v_uncond + w v_cond`.
pub fn cfg_combine<R: Real>(
    v_uncond: &MelGrid<R>,
    v_cond: &MelGrid<R>,
    w: GuidanceScale,
) -> Result<MelGrid<R>> {
    v_uncond.ensure_same_shape(v_cond, "cfg_combine")?;
    if w.0 == 1.0 {
        return Ok(v_cond.clone());
    }
    if w.0 == 0.0 {
        return Ok(v_uncond.clone());
    }
    let wc = R::c(w.0);
    let wu = R::one() - wc;
    let mut out = v_cond.clone();
    for (o, &u) in out.data_mut().iter_mut().zip(v_uncond.data()) {
        *o = wu * u + wc * *o;
    }
    Ok(out)
}

/// Integrates `dx/dtau = v(x, tau)` from `tau = 1` to `tau = 0` in `num_steps`
/// uniform explicit-Euler steps, each applying `x <- x - v(x, tau) / num_steps`.
pub fn euler_sample<R, F>(mut velocity_fn: F, x1: &MelGrid<R>, num_steps: usize) -> Result<MelGrid<R>>
where
    R: Real,
    F: FnMut(&MelGrid<R>, FlowStep) -> Result<MelGrid<R>>,
{
    if num_steps == 0 {
        return invalid("euler_sample needs at least one step");
    }
    let dt = R::c(1.0 / num_steps as f64);
    let mut x = x1.clone();
    for k in 0..num_steps {
        let tau = FlowStep::new(1.0 - k as f64 / num_steps as f64)?;
        let v = velocity_fn(&x, tau)?;
        x.ensure_same_shape(&v, "velocity field output")?;
        for (xv, &vv) in x.data_mut().iter_mut().zip(v.data()) {
            *xv -= dt * vv;
        }
    }
    Ok(x)
}
