//! Measurement-consistency guidance on the image branch and low-light
//! parameter fitting.
//!
//! With decoder `D`, encoder `E`, operator `A` and residuals
//! `r1 = y - A D z0`, `r2 = z0 - E(A^T y + (I - A^T A) D z0)`, the loss is
//! `|r1|^2 + gamma1 |r2|^2` and its gradient in `z0` is
//! `-2 D^T A^T r1 + 2 gamma1 (r2 - D^T (I - A^T A) E^T r2)`.

use serde::{Deserialize, Serialize};

use crate::codecs::LatentCodec;
use crate::degradation::DegradationOp;
use crate::denoisers::{denoise_z0, denoise_z0_vjp, Denoiser};
use crate::error::{Error, Result};
use crate::schedules::DdpmSchedule;
use crate::tensor::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDiff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma1: f64,
    pub step_size: f64,
    pub steps_per_t: usize,
    pub grad_mode: GradMode,
    /// Use finite differences when the denoiser has no closed-form Jacobian.
    pub fd_fallback: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.1,
            step_size: 0.1,
            steps_per_t: 1,
            grad_mode: GradMode::Analytic,
            fd_fallback: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "guidance.step_size must be >= 0, got {}",
                self.step_size
            )));
        }
        if !(self.gamma1 >= 0.0 && self.gamma1.is_finite()) {
            return Err(Error::Config(format!(
                "guidance.gamma1 must be >= 0, got {}",
                self.gamma1
            )));
        }
        Ok(())
    }
}

pub const FD_STEP: f32 = 1e-3;

fn require_linear(op: &DegradationOp) -> Result<()> {
    if op.is_linear() {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "projection loss needs a linear operator; use the low-light path".into(),
        ))
    }
}

struct Residuals {
    r1: VideoTensor,
    r2: VideoTensor,
}

fn residuals(
    z0: &VideoTensor,
    y: &VideoTensor,
    op: &DegradationOp,
    codec: &dyn LatentCodec,
) -> Result<Residuals> {
    let x = codec.decode(z0)?;
    let ax = op.apply(&x)?;
    let r1 = y.sub(&ax)?;
    // A^T y + (I - A^T A) x = x + A^T (y - A x)
    let proj = x.add(&op.apply_adjoint(&r1)?)?;
    let r2 = z0.sub(&codec.encode(&proj)?)?;
    Ok(Residuals { r1, r2 })
}

/// `|y - A D z0|^2 + gamma1 |z0 - E(A^T y + (I - A^T A) D z0)|^2`.
pub fn psld_loss(
    z0_hat: &VideoTensor,
    y: &VideoTensor,
    op: &DegradationOp,
    codec: &dyn LatentCodec,
    gamma1: f64,
) -> Result<f64> {
    require_linear(op)?;
    let r = residuals(z0_hat, y, op, codec)?;
    Ok(r.r1.norm_sq() + gamma1 * r.r2.norm_sq())
}

/// Loss value and gradient with respect to `z0_hat`.
pub fn psld_loss_grad_z0(
    z0_hat: &VideoTensor,
    y: &VideoTensor,
    op: &DegradationOp,
    codec: &dyn LatentCodec,
    gamma1: f64,
) -> Result<(f64, VideoTensor)> {
    require_linear(op)?;
    let Residuals { r1, r2 } = residuals(z0_hat, y, op, codec)?;
    let loss = r1.norm_sq() + gamma1 * r2.norm_sq();
    let g_rec = codec.decode_adjoint(&op.apply_adjoint(&r1)?)?;
    let mut grad = g_rec.scale(-2.0);
    if gamma1 != 0.0 {
        let u = codec.encode_adjoint(&r2)?;
        let p = u.sub(&op.apply_adjoint(&op.apply(&u)?)?)?;
        let g_reg = r2.sub(&codec.decode_adjoint(&p)?)?;
        grad = grad.affine_combine(1.0, &g_reg, 2.0 * gamma1)?;
    }
    Ok((loss, grad))
}

/// `|y - A(D z0)|^2` and its `z0` gradient; `A` may be affine.
pub fn rec_loss_grad_z0(
    z0_hat: &VideoTensor,
    y: &VideoTensor,
    op: &DegradationOp,
    codec: &dyn LatentCodec,
) -> Result<(f64, VideoTensor)> {
    let x = codec.decode(z0_hat)?;
    let r1 = y.sub(&op.apply(&x)?)?;
    let grad = codec.decode_adjoint(&op.linear_adjoint(&r1)?)?.scale(-2.0);
    Ok((r1.norm_sq(), grad))
}

/// Guidance objective for `op`: the full projection loss for linear operators,
/// the reconstruction term alone for the affine low-light model.
pub fn objective_grad_z0(
    z0_hat: &VideoTensor,
    y: &VideoTensor,
    op: &DegradationOp,
    codec: &dyn LatentCodec,
    gamma1: f64,
) -> Result<(f64, VideoTensor)> {
    if op.is_linear() {
        psld_loss_grad_z0(z0_hat, y, op, codec, gamma1)
    } else {
        rec_loss_grad_z0(z0_hat, y, op, codec)
    }
}

fn objective(
    z0_hat: &VideoTensor,
    y: &VideoTensor,
    op: &DegradationOp,
    codec: &dyn LatentCodec,
    gamma1: f64,
) -> Result<f64> {
    if op.is_linear() {
        psld_loss(z0_hat, y, op, codec, gamma1)
    } else {
        let x = codec.decode(z0_hat)?;
        Ok(y.sub(&op.apply(&x)?)?.norm_sq())
    }
}

/// Everything the guidance gradient needs besides the latent itself.
pub struct GuidanceProblem<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a DdpmSchedule,
    pub y: &'a VideoTensor,
    pub op: &'a DegradationOp,
    pub codec: &'a dyn LatentCodec,
}

impl GuidanceProblem<'_> {
    /// Objective as a function of the noisy latent `z_t`.
    pub fn loss_at(&self, z_t: &VideoTensor, t: usize, gamma1: f64) -> Result<f64> {
        let z0 = denoise_z0(self.denoiser, z_t, t, self.schedule)?;
        objective(&z0, self.y, self.op, self.codec, gamma1)
    }
}

/// Central finite differences of the objective in `z_t`, one coordinate at a time.
/// The divisor is the step actually representable in `f32`.
pub fn finite_diff_gradient(
    z_t: &VideoTensor,
    t: usize,
    problem: &GuidanceProblem<'_>,
    gamma1: f64,
) -> Result<VideoTensor> {
    let mut grad = vec![0.0f32; z_t.len()];
    let mut probe = z_t.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let v = z_t.data()[i];
        let (hi, lo) = (v + FD_STEP, v - FD_STEP);
        probe.data_mut()[i] = hi;
        let fp = problem.loss_at(&probe, t, gamma1)?;
        probe.data_mut()[i] = lo;
        let fm = problem.loss_at(&probe, t, gamma1)?;
        probe.data_mut()[i] = v;
        *g = ((fp - fm) / (hi as f64 - lo as f64)) as f32;
    }
    VideoTensor::new(z_t.dims(), grad)
}

/// Gradient of the objective with respect to `z_t`.
pub fn psld_gradient(
    z_t: &VideoTensor,
    t: usize,
    problem: &GuidanceProblem<'_>,
    cfg: &GuidanceConfig,
) -> Result<VideoTensor> {
    if cfg.grad_mode == GradMode::FiniteDiff {
        return finite_diff_gradient(z_t, t, problem, cfg.gamma1);
    }
    let z0 = denoise_z0(problem.denoiser, z_t, t, problem.schedule)?;
    let (_, g0) = objective_grad_z0(&z0, problem.y, problem.op, problem.codec, cfg.gamma1)?;
    match denoise_z0_vjp(problem.denoiser, z_t, t, problem.schedule, &g0) {
        Some(g) => g?.check_finite("psld_gradient"),
        None if cfg.fd_fallback => finite_diff_gradient(z_t, t, problem, cfg.gamma1),
        None => Err(Error::Unsupported(
            "analytic guidance gradient needs an affine denoiser".into(),
        )),
    }
}

/// `z - step_size * grad / max|grad|`; zero gradients leave `z` unchanged.
pub fn guided_update(z: &VideoTensor, grad: &VideoTensor, cfg: &GuidanceConfig) -> Result<VideoTensor> {
    z.ensure_same_dims(grad, "guided_update")?;
    let m = grad.max_abs();
    if cfg.step_size == 0.0 || m == 0.0 {
        return Ok(z.clone());
    }
    z.affine_combine(1.0, grad, -cfg.step_size / m)
}

/// `steps_per_t` normalized gradient steps at timestep `t`.
pub fn guide(
    z: &VideoTensor,
    t: usize,
    problem: &GuidanceProblem<'_>,
    cfg: &GuidanceConfig,
) -> Result<VideoTensor> {
    let mut z = z.clone();
    if cfg.step_size == 0.0 {
        return Ok(z);
    }
    for _ in 0..cfg.steps_per_t {
        let g = psld_gradient(&z, t, problem, cfg)?;
        z = guided_update(&z, &g, cfg)?;
    }
    Ok(z)
}

/// Low-light model `y = f * x + M` with a single-frame mask broadcast over time.
#[derive(Clone, Debug, PartialEq)]
pub struct LowLightParams {
    pub f: f64,
    /// Dims `(1, C, H, W)`.
    pub mask: VideoTensor,
    pub lr: f64,
    pub iters: usize,
}

pub const MIN_LOWLIGHT_FACTOR: f64 = 1e-3;

impl LowLightParams {
    /// `f = 1`, `M = 0` for videos with dims `video`.
    pub fn identity(video: crate::tensor::Dims, lr: f64, iters: usize) -> Self {
        let [_, c, h, w] = video;
        Self {
            f: 1.0,
            mask: VideoTensor::zeros([1, c, h, w]),
            lr,
            iters,
        }
    }

    pub fn operator(&self) -> DegradationOp {
        DegradationOp::LowLight {
            factor: self.f,
            mask: self.mask.clone(),
        }
    }
}

fn check_mask(x: &VideoTensor, mask: &VideoTensor) -> Result<()> {
    let [_, c, h, w] = x.dims();
    if mask.dims() != [1, c, h, w] {
        return Err(Error::Shape(format!(
            "low-light mask {:?} must be one frame of {:?}",
            mask.dims(),
            x.dims()
        )));
    }
    Ok(())
}

/// `|y - (f x + M)|^2`.
pub fn lowlight_loss(y: &VideoTensor, x: &VideoTensor, f: f64, mask: &VideoTensor) -> Result<f64> {
    y.ensure_same_dims(x, "lowlight_loss")?;
    check_mask(x, mask)?;
    let n = x.frame_len();
    let mut acc = 0.0;
    for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
        let r = yv as f64 - f * xv as f64 - mask.data()[i % n] as f64;
        acc += r * r;
    }
    Ok(acc)
}

/// Gershgorin bound on the Hessian of [`lowlight_loss`] in `(f, M)`.
/// Gradient descent with `lr < 2 / bound` does not increase the loss.
pub fn lowlight_lipschitz(x: &VideoTensor) -> f64 {
    let n = x.frame_len();
    let t = x.frames() as f64;
    let mut col = vec![0.0f64; n];
    let mut sq = 0.0;
    for (i, &v) in x.data().iter().enumerate() {
        col[i % n] += v as f64;
        sq += (v as f64) * (v as f64);
    }
    let cross: f64 = col.iter().map(|c| c.abs()).sum();
    let row_f = 2.0 * sq + 2.0 * cross;
    let row_m = 2.0 * t + 2.0 * col.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    row_f.max(row_m)
}

/// Gradient descent on `|y - (f D(z0) + M)|^2`, projecting `f >= 1e-3`.
pub fn lowlight_fit(
    y: &VideoTensor,
    z0_hat: &VideoTensor,
    codec: &dyn LatentCodec,
    params: &LowLightParams,
) -> Result<LowLightParams> {
    let x = codec.decode(z0_hat)?;
    lowlight_fit_pixels(y, &x, params)
}

/// [`lowlight_fit`] on an already decoded video.
pub fn lowlight_fit_pixels(
    y: &VideoTensor,
    x: &VideoTensor,
    params: &LowLightParams,
) -> Result<LowLightParams> {
    y.ensure_same_dims(x, "lowlight_fit")?;
    check_mask(x, &params.mask)?;
    let n = x.frame_len();
    let mut f = params.f;
    let mut mask: Vec<f64> = params.mask.data().iter().map(|&v| v as f64).collect();
    let mut g_mask = vec![0.0f64; n];
    for _ in 0..params.iters {
        if params.lr == 0.0 {
            break;
        }
        let mut g_f = 0.0;
        g_mask.iter_mut().for_each(|g| *g = 0.0);
        for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
            let r = yv as f64 - f * xv as f64 - mask[i % n];
            g_f -= 2.0 * r * xv as f64;
            g_mask[i % n] -= 2.0 * r;
        }
        f = (f - params.lr * g_f).max(MIN_LOWLIGHT_FACTOR);
        for (m, g) in mask.iter_mut().zip(&g_mask) {
            *m -= params.lr * g;
        }
    }
    let mask = VideoTensor::new(params.mask.dims(), mask.into_iter().map(|v| v as f32).collect())?;
    Ok(LowLightParams {
        f,
        mask,
        lr: params.lr,
        iters: params.iters,
    })
}
