//! Variance schedules and the DDIM/EDM step rules.
//!
//! Timesteps index the training schedule from 1..=N; `t = 0` denotes the
//! clean latent, where `alpha_bar = 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, VideoTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdpmSchedule {
    /// `n_train` betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(n_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::InvalidArgument("n_train must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if n_train == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (n_train - 1) as f64;
            (0..n_train).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0f64, |acc, &b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn n_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products for t = 1..=N.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.alpha_bars.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::TimestepOutOfRange {
                t,
                n_train: self.n_train(),
            }),
        }
    }
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps`.
pub fn add_noise(
    z0: &VideoTensor,
    t: usize,
    eps: &VideoTensor,
    schedule: &DdpmSchedule,
) -> Result<VideoTensor> {
    let ab = schedule.alpha_bar(t)?;
    if ab == 1.0 {
        z0.ensure_same_dims(eps, "add_noise")?;
        return Ok(z0.clone());
    }
    z0.affine_combine(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Clean-latent estimate `z_t / sqrt(ab) - sqrt(1 - ab) * eps / sqrt(ab)`.
pub fn predict_z0(
    z_t: &VideoTensor,
    eps_pred: &VideoTensor,
    t: usize,
    schedule: &DdpmSchedule,
) -> Result<VideoTensor> {
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::DegenerateTimestep { t, alpha_bar: ab });
    }
    let s = ab.sqrt();
    z_t.affine_combine(1.0 / s, eps_pred, -(1.0 - ab).sqrt() / s)
}

/// Noise implied by `(z_t, z0)`: the inverse of [`predict_z0`] in `eps`.
pub fn implied_noise(
    z_t: &VideoTensor,
    z0_hat: &VideoTensor,
    t: usize,
    schedule: &DdpmSchedule,
) -> Result<VideoTensor> {
    let ab = schedule.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::DegenerateTimestep { t, alpha_bar: ab });
    }
    let s = (1.0 - ab).sqrt();
    z_t.affine_combine(1.0 / s, z0_hat, -ab.sqrt() / s)
}

/// Update rule of [`ddim_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdimForm {
    /// Posterior-mean form: weighted mix of `z_t` and `z0_hat`, plus `sigma * noise`.
    /// With `sigma = 0` it drops the noise component and contracts samples
    /// toward the denoiser's mean.
    Posterior,
    /// Implicit form: `sqrt(ab_prev) z0_hat + sqrt(1 - ab_prev - sigma^2) eps + sigma * noise`.
    #[default]
    Implicit,
}

/// Strictly decreasing sampling timesteps; each step goes `t -> t_prev` and
/// the last one lands on `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimGrid {
    timesteps: Vec<usize>,
    pub eta: f64,
    pub rng_seed: u64,
    pub form: DdimForm,
}

impl DdimGrid {
    /// `steps` uniformly spaced timesteps `k * (n_train / steps) + 1`, descending.
    pub fn uniform(n_train: usize, steps: usize, eta: f64, rng_seed: u64) -> Result<Self> {
        if steps == 0 || steps > n_train {
            return Err(Error::InvalidArgument(format!(
                "grid steps must be in 1..={n_train}, got {steps}"
            )));
        }
        let ratio = n_train / steps;
        let timesteps = (0..steps).rev().map(|k| k * ratio + 1).collect();
        Self::from_timesteps(timesteps, eta, rng_seed)
    }

    pub fn from_timesteps(timesteps: Vec<usize>, eta: f64, rng_seed: u64) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::InvalidArgument("empty DDIM grid".into()));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) || timesteps.last() == Some(&0) {
            return Err(Error::InvalidArgument(
                "DDIM timesteps must be strictly decreasing and positive".into(),
            ));
        }
        if !(eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
        }
        Ok(Self {
            timesteps,
            eta,
            rng_seed,
            form: DdimForm::default(),
        })
    }

    pub fn with_form(mut self, form: DdimForm) -> Self {
        self.form = form;
        self
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// `(t, t_prev)` for step `k`.
    pub fn step(&self, k: usize) -> (usize, usize) {
        let t = self.timesteps[k];
        let t_prev = self.timesteps.get(k + 1).copied().unwrap_or(0);
        (t, t_prev)
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(|k| self.step(k))
    }

    /// Deterministic per-step noise for `eta > 0`; `stream` separates branches.
    pub fn step_noise(&self, k: usize, stream: u64, dims: Dims) -> VideoTensor {
        let seed = self
            .rng_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((stream << 32) ^ k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::randn(dims, &mut rng)
    }
}

/// DDIM noise scale `eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)`.
pub fn ddim_sigma(t: usize, t_prev: usize, eta: f64, schedule: &DdpmSchedule) -> Result<f64> {
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if eta == 0.0 || ab_t >= 1.0 {
        return Ok(0.0);
    }
    Ok(eta
        * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
            .max(0.0)
            .sqrt())
}

/// One reverse step `t -> t_prev`. In the posterior form:
///
/// `z_prev = sqrt(a)(1 - ab_prev)/(1 - ab_t) z_t + sqrt(ab_prev) b/(1 - ab_t) z0_hat + sigma eps`
///
/// with `a = ab_t / ab_prev` the effective alpha over the stride and `b = 1 - a`.
/// See [`DdimForm`] for the implicit form.
pub fn ddim_step(
    z_t: &VideoTensor,
    eps_pred: &VideoTensor,
    t: usize,
    t_prev: usize,
    grid: &DdimGrid,
    schedule: &DdpmSchedule,
    noise: Option<&VideoTensor>,
) -> Result<VideoTensor> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!(
            "DDIM step needs t > t_prev, got {t} -> {t_prev}"
        )));
    }
    z_t.ensure_same_dims(eps_pred, "ddim_step")?;
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let z0_hat = predict_z0(z_t, eps_pred, t, schedule)?;
    let sigma = ddim_sigma(t, t_prev, grid.eta, schedule)?;
    let mut out = match grid.form {
        DdimForm::Posterior => {
            let alpha = ab_t / ab_prev;
            let beta = 1.0 - alpha;
            let c_z = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let c_x = ab_prev.sqrt() * beta / (1.0 - ab_t);
            z_t.affine_combine(c_z, &z0_hat, c_x)?
        }
        DdimForm::Implicit => {
            let c_eps = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            z0_hat.affine_combine(ab_prev.sqrt(), eps_pred, c_eps)?
        }
    };
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::InvalidArgument("eta > 0 needs a noise tensor".into()))?;
        out = out.affine_combine(1.0, noise, sigma)?;
    }
    out.check_finite("ddim_step")
}

/// Runs the full grid from `z_init` with a noise predictor `eps_fn(z_t, t)`.
pub fn ddim_sample(
    z_init: &VideoTensor,
    grid: &DdimGrid,
    schedule: &DdpmSchedule,
    mut eps_fn: impl FnMut(&VideoTensor, usize) -> Result<VideoTensor>,
) -> Result<VideoTensor> {
    let mut z = z_init.clone();
    for (k, (t, t_prev)) in grid.steps().enumerate() {
        let eps = eps_fn(&z, t)?;
        let noise = (grid.eta > 0.0).then(|| grid.step_noise(k, 0, z.dims()));
        z = ddim_step(&z, &eps, t, t_prev, grid, schedule, noise.as_ref())?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdmCoeffs {
    pub c_skip: f64,
    pub c_in: f64,
    pub c_out: f64,
    /// `ln(sigma) / 4`; `-inf` at `sigma = 0`.
    pub c_noise: f64,
}

pub fn edm_coeffs(sigma: f64, sigma_data: f64) -> EdmCoeffs {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let root = (s2 + d2).sqrt();
    EdmCoeffs {
        c_skip: d2 / (s2 + d2),
        c_in: 1.0 / root,
        c_out: sigma * sigma_data / root,
        c_noise: sigma.ln() / 4.0,
    }
}

/// Descending sigma grid ending at a terminal 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EdmSchedule {
    sigmas: Vec<f64>,
    pub sigma_data: f64,
}

impl EdmSchedule {
    /// Karras interpolation of `n` sigmas between `sigma_max` and `sigma_min`, plus 0.
    pub fn karras(n: usize, sigma_min: f64, sigma_max: f64, rho: f64, sigma_data: f64) -> Result<Self> {
        if n < 2 || !(sigma_min > 0.0 && sigma_min < sigma_max) || !(rho > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad Karras grid: n={n}, sigma in [{sigma_min}, {sigma_max}], rho={rho}"
            )));
        }
        let lo = sigma_min.powf(1.0 / rho);
        let hi = sigma_max.powf(1.0 / rho);
        let mut sigmas: Vec<f64> = (0..n)
            .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(rho))
            .collect();
        sigmas.push(0.0);
        Self::from_sigmas(sigmas, sigma_data)
    }

    pub fn from_sigmas(sigmas: Vec<f64>, sigma_data: f64) -> Result<Self> {
        if sigmas.len() < 2 || !(sigma_data > 0.0) {
            return Err(Error::InvalidArgument("EDM schedule needs >= 2 sigmas".into()));
        }
        let (last, body) = sigmas.split_last().unwrap();
        if body.iter().any(|&s| !(s > 0.0)) || *last < 0.0 {
            return Err(Error::InvalidArgument(
                "sigmas must be positive except a terminal 0".into(),
            ));
        }
        if sigmas.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidArgument(
                "sigmas must be strictly decreasing".into(),
            ));
        }
        Ok(Self { sigmas, sigma_data })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// The lowest `steps + 1` sigmas in ascending order.
    pub fn ascending(&self, steps: usize) -> Result<Vec<f64>> {
        if steps + 1 > self.sigmas.len() {
            return Err(Error::InvalidArgument(format!(
                "{steps} EDM steps need {} sigmas, schedule has {}",
                steps + 1,
                self.sigmas.len()
            )));
        }
        Ok(self.sigmas.iter().rev().take(steps + 1).copied().collect())
    }

    pub fn coeffs(&self, sigma: f64) -> EdmCoeffs {
        edm_coeffs(sigma, self.sigma_data)
    }
}
