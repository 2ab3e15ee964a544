//! Noise predictors: the [`Denoiser`] trait and closed-form toy models.

use std::sync::Arc;

use crate::degradation::{temporal_mean, temporal_mean_adjoint};
use crate::error::{Error, Result};
use crate::schedules::{implied_noise, predict_z0, DdpmSchedule};
use crate::tensor::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserMode {
    /// Image model: frames are denoised independently.
    PerFrame,
    /// Video model: sees the whole clip.
    WholeClip,
}

/// An epsilon-predictor `eps(z_t, t)`.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, z_t: &VideoTensor, t: usize, schedule: &DdpmSchedule) -> Result<VideoTensor>;

    fn mode(&self) -> DenoiserMode;

    /// `J^T v` where `J` is the Jacobian of `z_t -> predict_z0(z_t, eps(z_t, t), t)`.
    /// `None` when the map is not affine and no closed form exists.
    fn z0_vjp(
        &self,
        _z_t: &VideoTensor,
        _t: usize,
        _schedule: &DdpmSchedule,
        _v: &VideoTensor,
    ) -> Option<Result<VideoTensor>> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict_noise(&self, z_t: &VideoTensor, t: usize, s: &DdpmSchedule) -> Result<VideoTensor> {
        (**self).predict_noise(z_t, t, s)
    }
    fn mode(&self) -> DenoiserMode {
        (**self).mode()
    }
    fn z0_vjp(
        &self,
        z_t: &VideoTensor,
        t: usize,
        s: &DdpmSchedule,
        v: &VideoTensor,
    ) -> Option<Result<VideoTensor>> {
        (**self).z0_vjp(z_t, t, s, v)
    }
}

/// `z0_hat` at timestep `t`. At `t = 0` the latent is already clean and the
/// denoiser is not consulted.
pub fn denoise_z0(
    den: &dyn Denoiser,
    z_t: &VideoTensor,
    t: usize,
    schedule: &DdpmSchedule,
) -> Result<VideoTensor> {
    if t == 0 {
        return Ok(z_t.clone());
    }
    let eps = den.predict_noise(z_t, t, schedule)?;
    predict_z0(z_t, &eps, t, schedule)?.check_finite("denoise_z0")
}

/// `J^T v` for [`denoise_z0`], identity at `t = 0`.
pub fn denoise_z0_vjp(
    den: &dyn Denoiser,
    z_t: &VideoTensor,
    t: usize,
    schedule: &DdpmSchedule,
    v: &VideoTensor,
) -> Option<Result<VideoTensor>> {
    if t == 0 {
        return Some(Ok(v.clone()));
    }
    den.z0_vjp(z_t, t, schedule, v)
}

fn nondegenerate(t: usize, schedule: &DdpmSchedule) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    if ab >= 1.0 || ab <= 0.0 {
        return Err(Error::DegenerateTimestep { t, alpha_bar: ab });
    }
    Ok(ab)
}

/// Predicts the exact noise that relates `z_t` to a known clean latent.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub target: VideoTensor,
}

impl OracleDenoiser {
    pub fn new(target: VideoTensor) -> Self {
        Self { target }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, z_t: &VideoTensor, t: usize, s: &DdpmSchedule) -> Result<VideoTensor> {
        nondegenerate(t, s)?;
        z_t.ensure_same_dims(&self.target, "oracle denoiser")?;
        implied_noise(z_t, &self.target, t, s)
    }

    fn mode(&self) -> DenoiserMode {
        DenoiserMode::PerFrame
    }

    fn z0_vjp(
        &self,
        z_t: &VideoTensor,
        _t: usize,
        _s: &DdpmSchedule,
        v: &VideoTensor,
    ) -> Option<Result<VideoTensor>> {
        Some(
            z_t.ensure_same_dims(v, "oracle vjp")
                .map(|_| VideoTensor::zeros(v.dims())),
        )
    }
}

/// Posterior-mean predictor for the prior `z0 ~ N(mean, var * I)`.
#[derive(Clone, Debug)]
pub struct GaussianPriorDenoiser {
    pub mean: VideoTensor,
    pub var: f64,
    pub mode: DenoiserMode,
}

impl GaussianPriorDenoiser {
    pub fn new(mean: VideoTensor, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior variance {var} must be > 0"
            )));
        }
        Ok(Self {
            mean,
            var,
            mode: DenoiserMode::PerFrame,
        })
    }

    pub fn with_mode(mut self, mode: DenoiserMode) -> Self {
        self.mode = mode;
        self
    }

    /// Weight on `z_t` in `E[z0 | z_t]`.
    fn gain(&self, ab: f64) -> f64 {
        ab.sqrt() * self.var / (ab * self.var + 1.0 - ab)
    }

    /// `E[z0 | z_t]`.
    pub fn posterior_mean(&self, z_t: &VideoTensor, t: usize, s: &DdpmSchedule) -> Result<VideoTensor> {
        let ab = s.alpha_bar(t)?;
        let den = ab * self.var + 1.0 - ab;
        z_t.affine_combine(self.gain(ab), &self.mean, (1.0 - ab) / den)
    }
}

impl Denoiser for GaussianPriorDenoiser {
    fn predict_noise(&self, z_t: &VideoTensor, t: usize, s: &DdpmSchedule) -> Result<VideoTensor> {
        nondegenerate(t, s)?;
        let post = self.posterior_mean(z_t, t, s)?;
        implied_noise(z_t, &post, t, s)
    }

    fn mode(&self) -> DenoiserMode {
        self.mode
    }

    fn z0_vjp(
        &self,
        z_t: &VideoTensor,
        t: usize,
        s: &DdpmSchedule,
        v: &VideoTensor,
    ) -> Option<Result<VideoTensor>> {
        Some((|| {
            z_t.ensure_same_dims(v, "gaussian vjp")?;
            // ẑ0 = predict_z0(z, implied_noise(z, post)) = post, so J = gain * I.
            Ok(v.scale(self.gain(s.alpha_bar(t)?)))
        })())
    }
}

/// Blends the base model's `z0_hat` with its centered temporal moving average.
pub struct TemporalSmootherDenoiser {
    base: Arc<dyn Denoiser>,
    strength: f64,
    window: usize,
}

impl TemporalSmootherDenoiser {
    pub fn new(base: Arc<dyn Denoiser>, strength: f64, window: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::InvalidArgument(format!(
                "smoother strength {strength} outside [0, 1]"
            )));
        }
        if window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "smoother window {window} must be odd"
            )));
        }
        Ok(Self {
            base,
            strength,
            window,
        })
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn check_frames(&self, z: &VideoTensor) -> Result<()> {
        if self.window > z.frames() {
            return Err(Error::Shape(format!(
                "smoother window {} exceeds {} frames",
                self.window,
                z.frames()
            )));
        }
        Ok(())
    }

    /// `(1 - k) x + k * smooth(x)`.
    pub fn blend(&self, z0_base: &VideoTensor) -> Result<VideoTensor> {
        let smooth = temporal_mean(z0_base, self.window);
        VideoTensor::lerp(z0_base, &smooth, self.strength)
    }
}

impl Denoiser for TemporalSmootherDenoiser {
    fn predict_noise(&self, z_t: &VideoTensor, t: usize, s: &DdpmSchedule) -> Result<VideoTensor> {
        self.check_frames(z_t)?;
        let eps = self.base.predict_noise(z_t, t, s)?;
        if self.strength == 0.0 {
            return Ok(eps);
        }
        let z0 = predict_z0(z_t, &eps, t, s)?;
        implied_noise(z_t, &self.blend(&z0)?, t, s)
    }

    fn mode(&self) -> DenoiserMode {
        DenoiserMode::WholeClip
    }

    fn z0_vjp(
        &self,
        z_t: &VideoTensor,
        t: usize,
        s: &DdpmSchedule,
        v: &VideoTensor,
    ) -> Option<Result<VideoTensor>> {
        if let Err(e) = self.check_frames(v) {
            return Some(Err(e));
        }
        let smooth_t = temporal_mean_adjoint(v, self.window);
        let inner = match VideoTensor::lerp(v, &smooth_t, self.strength) {
            Ok(x) => x,
            Err(e) => return Some(Err(e)),
        };
        self.base.z0_vjp(z_t, t, s, &inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{add_noise, ddim_sample, DdimGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sched() -> DdpmSchedule {
        DdpmSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn randn(dims: crate::tensor::Dims, seed: u64) -> VideoTensor {
        VideoTensor::randn(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn oracle_recovers_noise_and_target() {
        let s = sched();
        let target = randn([2, 3, 4, 4], 1);
        let eps = randn([2, 3, 4, 4], 2);
        let den = OracleDenoiser::new(target.clone());
        for t in [1, 100, 500, 1000] {
            let z = add_noise(&target, t, &eps, &s).unwrap();
            let e = den.predict_noise(&z, t, &s).unwrap();
            assert!(e.rel_err(&eps).unwrap() <= 1e-5);
            let z0 = predict_z0(&z, &e, t, &s).unwrap();
            assert!(z0.rel_err(&target).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn oracle_rejects_clean_timestep() {
        let den = OracleDenoiser::new(VideoTensor::zeros([1, 1, 1, 1]));
        let err = den.predict_noise(&VideoTensor::zeros([1, 1, 1, 1]), 0, &sched());
        assert!(matches!(err, Err(Error::DegenerateTimestep { .. })));
    }

    #[test]
    fn oracle_with_zero_target() {
        let s = sched();
        let z = randn([1, 1, 2, 2], 4);
        let ab = s.alpha_bar(300).unwrap();
        let e = OracleDenoiser::new(VideoTensor::zeros(z.dims()))
            .predict_noise(&z, 300, &s)
            .unwrap();
        let want = z.scale(1.0 / (1.0 - ab).sqrt());
        assert!(e.max_abs_diff(&want).unwrap() <= 1e-6);
    }

    #[test]
    fn oracle_ddim_chain_reconstructs_target() {
        let s = sched();
        let target = randn([2, 2, 4, 4], 9);
        let grid = DdimGrid::uniform(1000, 50, 0.0, 0).unwrap();
        let z_t = add_noise(&target, grid.timesteps()[0], &randn(target.dims(), 10), &s).unwrap();
        let den = OracleDenoiser::new(target.clone());
        let out = ddim_sample(&z_t, &grid, &s, |z, t| den.predict_noise(z, t, &s)).unwrap();
        assert!(out.rel_err(&target).unwrap() <= 1e-4);
    }

    #[test]
    fn gaussian_scalar_posterior() {
        // mu = 0, var = 1, alpha_bar = 0.5 -> E[z0 | z] = sqrt(0.5) z.
        let s = DdpmSchedule::from_betas(vec![0.5]).unwrap();
        let den = GaussianPriorDenoiser::new(VideoTensor::zeros([1, 1, 1, 1]), 1.0).unwrap();
        let z = VideoTensor::full([1, 1, 1, 1], 1.3);
        let post = den.posterior_mean(&z, 1, &s).unwrap();
        assert!((post.data()[0] as f64 - 0.5f64.sqrt() * 1.3).abs() < 1e-6);
    }

    #[test]
    fn gaussian_tiny_variance_predicts_prior_mean() {
        let s = sched();
        let mean = randn([1, 1, 2, 2], 3);
        let den = GaussianPriorDenoiser::new(mean.clone(), 1e-12).unwrap();
        let z = randn([1, 1, 2, 2], 4);
        let ab = s.alpha_bar(400).unwrap();
        let e = den.predict_noise(&z, 400, &s).unwrap();
        let want = z
            .affine_combine(1.0 / (1.0 - ab).sqrt(), &mean, -ab.sqrt() / (1.0 - ab).sqrt())
            .unwrap();
        assert!(e.max_abs_diff(&want).unwrap() <= 1e-5);
    }

    #[test]
    fn gaussian_posterior_matches_monte_carlo() {
        let (mu, var, ab) = (0.3f64, 0.5f64, 0.4f64);
        let s = DdpmSchedule::from_betas(vec![1.0 - ab]).unwrap();
        let den = GaussianPriorDenoiser::new(VideoTensor::full([1, 1, 1, 1], mu as f32), var).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (lo, hi) = (0.2, 0.3);
        let mut picked = Vec::new();
        for _ in 0..400_000 {
            let z0 = mu + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let zt = ab.sqrt() * z0 + (1.0 - ab).sqrt() * rng.sample::<f64, _>(StandardNormal);
            if (lo..hi).contains(&zt) {
                picked.push((zt, z0));
            }
        }
        let n = picked.len() as f64;
        assert!(n > 10_000.0);
        let emp = picked.iter().map(|p| p.1).sum::<f64>() / n;
        let sd = (picked.iter().map(|p| (p.1 - emp).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mean_zt = picked.iter().map(|p| p.0).sum::<f64>() / n;
        let z = VideoTensor::full([1, 1, 1, 1], mean_zt as f32);
        let pred = den.posterior_mean(&z, 1, &s).unwrap().data()[0] as f64;
        assert!((pred - emp).abs() <= 3.0 * sd / n.sqrt(), "{pred} vs {emp}");
    }

    #[test]
    fn smoother_zero_strength_is_base() {
        let s = sched();
        let base: Arc<dyn Denoiser> =
            Arc::new(GaussianPriorDenoiser::new(randn([4, 1, 2, 2], 1), 0.5).unwrap());
        let sm = TemporalSmootherDenoiser::new(base.clone(), 0.0, 3).unwrap();
        let z = randn([4, 1, 2, 2], 2);
        assert_eq!(
            sm.predict_noise(&z, 200, &s).unwrap(),
            base.predict_noise(&z, 200, &s).unwrap()
        );
    }

    #[test]
    fn smoother_static_clip_is_base() {
        let s = sched();
        let frame = randn([1, 2, 3, 3], 5);
        let mean = frame.repeat_frame(5).unwrap();
        let z = randn([1, 2, 3, 3], 6).repeat_frame(5).unwrap();
        let base: Arc<dyn Denoiser> = Arc::new(GaussianPriorDenoiser::new(mean, 0.7).unwrap());
        let sm = TemporalSmootherDenoiser::new(base.clone(), 0.8, 3).unwrap();
        let a = sm.predict_noise(&z, 600, &s).unwrap();
        let b = base.predict_noise(&z, 600, &s).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
    }

    #[test]
    fn smoother_blend_mean_arithmetic() {
        let base: Arc<dyn Denoiser> = Arc::new(OracleDenoiser::new(VideoTensor::zeros([3, 1, 1, 1])));
        let sm = TemporalSmootherDenoiser::new(base, 1.0, 3).unwrap();
        let x = VideoTensor::new([3, 1, 1, 1], vec![0.0, 2.0, 4.0]).unwrap();
        let out = sm.blend(&x).unwrap();
        let want = [2.0 / 3.0, 2.0, 10.0 / 3.0];
        for (o, w) in out.data().iter().zip(want) {
            assert!((*o as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn smoother_rejects_even_or_oversized_window() {
        let base: Arc<dyn Denoiser> = Arc::new(OracleDenoiser::new(VideoTensor::zeros([2, 1, 1, 1])));
        assert!(TemporalSmootherDenoiser::new(base.clone(), 0.5, 2).is_err());
        let sm = TemporalSmootherDenoiser::new(base, 0.5, 3).unwrap();
        assert!(sm
            .predict_noise(&VideoTensor::zeros([2, 1, 1, 1]), 10, &sched())
            .is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let s = sched();
        let base: Arc<dyn Denoiser> =
            Arc::new(GaussianPriorDenoiser::new(randn([4, 1, 2, 2], 1), 0.3).unwrap());
        let sm = TemporalSmootherDenoiser::new(base, 0.6, 3).unwrap();
        let z = randn([4, 1, 2, 2], 2);
        let v = randn([4, 1, 2, 2], 3);
        let t = 350;
        let g = sm.z0_vjp(&z, t, &s, &v).unwrap().unwrap();
        // Directional check: <J^T v, d> == <v, J d> for the affine map.
        let d = randn([4, 1, 2, 2], 4);
        let f0 = denoise_z0(&sm, &z, t, &s).unwrap();
        let f1 = denoise_z0(&sm, &z.add(&d).unwrap(), t, &s).unwrap();
        let jd = f1.sub(&f0).unwrap();
        let lhs = g.dot(&d).unwrap();
        let rhs = v.dot(&jd).unwrap();
        assert!((lhs - rhs).abs() <= 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    fn temporal_msd(x: &VideoTensor) -> f64 {
        let mut acc = 0.0;
        for t in 1..x.frames() {
            acc += x.frame(t).dist_sq(&x.frame(t - 1)).unwrap();
        }
        acc / ((x.frames() - 1) * x.frame_len()) as f64
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn smoother_never_raises_temporal_variance(
            seed in proptest::prelude::any::<u64>(),
            kappa in 0.01f64..=1.0,
            window in proptest::prop_oneof![proptest::strategy::Just(3usize), proptest::strategy::Just(5usize)],
        ) {
            let base: Arc<dyn Denoiser> = Arc::new(OracleDenoiser::new(VideoTensor::zeros([6, 1, 3, 3])));
            let sm = TemporalSmootherDenoiser::new(base, kappa, window).unwrap();
            let x = randn([6, 1, 3, 3], seed);
            let y = sm.blend(&x).unwrap();
            proptest::prop_assert!(temporal_msd(&y) <= temporal_msd(&x) + 1e-9);
        }

        #[test]
        fn predictions_stay_finite(seed in proptest::prelude::any::<u64>(), k in 0usize..50) {
            let s = sched();
            let grid = DdimGrid::uniform(1000, 50, 0.0, 0).unwrap();
            let t = grid.timesteps()[k];
            let mean = randn([4, 1, 2, 2], seed);
            let z = randn([4, 1, 2, 2], seed ^ 1);
            let g: Arc<dyn Denoiser> = Arc::new(GaussianPriorDenoiser::new(mean.clone(), 0.4).unwrap());
            let dens: Vec<Arc<dyn Denoiser>> = vec![
                Arc::new(OracleDenoiser::new(mean)),
                g.clone(),
                Arc::new(TemporalSmootherDenoiser::new(g, 0.5, 3).unwrap()),
            ];
            for d in dens {
                let z0 = denoise_z0(d.as_ref(), &z, t, &s).unwrap();
                proptest::prop_assert!(z0.is_finite());
                proptest::prop_assert_eq!(z0.dims(), z.dims());
            }
        }
    }
}
