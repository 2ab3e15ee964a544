//! Temporal strengthening: EDM inversion, first-frame-conditioned EDM
//! resampling, and chaining over clips that share one frame.

use serde::{Deserialize, Serialize};

use crate::codecs::{Codec2D, LatentCodec};
use crate::error::{Error, Result};
use crate::schedules::{EdmCoeffs, EdmSchedule};
use crate::tensor::VideoTensor;

/// Raw network `F(u; c_noise)`; preconditioning is applied by the caller.
pub trait EdmDenoiser: Send + Sync {
    fn raw(&self, u: &VideoTensor, c_noise: f64) -> Result<VideoTensor>;
}

/// `F(u) = (1 - rho) u + rho * cond`, with a one-frame `cond` broadcast over time.
#[derive(Clone, Debug)]
pub struct ToyConditionalDenoiser {
    pub rho: f64,
    pub cond: VideoTensor,
}

impl ToyConditionalDenoiser {
    pub fn new(rho: f64, cond: VideoTensor) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!(
                "condition weight {rho} outside [0, 1]"
            )));
        }
        if cond.frames() != 1 {
            return Err(Error::Shape(format!(
                "conditioning must be a single frame, got {:?}",
                cond.dims()
            )));
        }
        Ok(Self { rho, cond })
    }
}

impl EdmDenoiser for ToyConditionalDenoiser {
    fn raw(&self, u: &VideoTensor, _c_noise: f64) -> Result<VideoTensor> {
        if u.dims()[1..] != self.cond.dims()[1..] {
            return Err(Error::Shape(format!(
                "conditioning frame {:?} does not match latent {:?}",
                self.cond.dims(),
                u.dims()
            )));
        }
        if self.rho == 0.0 {
            return Ok(u.clone());
        }
        let n = u.frame_len();
        let (keep, w) = (1.0 - self.rho, self.rho);
        let c = self.cond.data();
        let data = u
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (keep * v as f64 + w * c[i % n] as f64) as f32)
            .collect();
        VideoTensor::new(u.dims(), data)
    }
}

/// Which coefficient indices the inversion step uses for the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    /// `c_in` at the current sigma, `c_noise`, `c_out`, `c_skip` at the next.
    Mixed,
    /// Every coefficient at the next sigma.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdmRunConfig {
    pub schedule: EdmSchedule,
    pub steps: usize,
    pub index_mode: IndexMode,
}

impl EdmRunConfig {
    fn ascending(&self) -> Result<Vec<f64>> {
        self.schedule.ascending(self.steps)
    }
}

/// `D(z; sigma) = c_skip z + c_out F(c_in z; c_noise)`.
pub fn edm_denoise(den: &dyn EdmDenoiser, z: &VideoTensor, k: &EdmCoeffs) -> Result<VideoTensor> {
    let f = den.raw(&z.scale(k.c_in), k.c_noise)?;
    z.affine_combine(k.c_skip, &f, k.c_out)
}

/// One inversion step from `sigma_t` up to `sigma_next`.
pub fn edm_invert_step(
    z: &VideoTensor,
    den: &dyn EdmDenoiser,
    schedule: &EdmSchedule,
    sigma_t: f64,
    sigma_next: f64,
    mode: IndexMode,
) -> Result<VideoTensor> {
    let here = schedule.coeffs(sigma_t);
    let next = schedule.coeffs(sigma_next);
    let c_in = match mode {
        IndexMode::Mixed => here.c_in,
        IndexMode::Uniform => next.c_in,
    };
    let d = sigma_t - sigma_next;
    let denom = d * (1.0 - next.c_skip) + sigma_next;
    if denom.abs() < 1e-12 {
        return Err(Error::SingularStep {
            sigma_from: sigma_t,
            sigma_to: sigma_next,
        });
    }
    let f = den.raw(&z.scale(c_in), next.c_noise)?;
    z.affine_combine(sigma_next / denom, &f, d * next.c_out / denom)?
        .check_finite("edm_invert")
}

/// One sampling step from `sigma_next` down to `sigma_t`.
pub fn edm_sample_step(
    z: &VideoTensor,
    den: &dyn EdmDenoiser,
    schedule: &EdmSchedule,
    sigma_next: f64,
    sigma_t: f64,
) -> Result<VideoTensor> {
    if sigma_next < 1e-12 {
        return Err(Error::SingularStep {
            sigma_from: sigma_next,
            sigma_to: sigma_t,
        });
    }
    let d = edm_denoise(den, z, &schedule.coeffs(sigma_next))?;
    if sigma_t == 0.0 {
        return d.check_finite("edm_sample");
    }
    let ratio = (sigma_t - sigma_next) / sigma_next;
    z.affine_combine(1.0 + ratio, &d, -ratio)?
        .check_finite("edm_sample")
}

/// Every intermediate latent of the inversion, starting with `z0`.
pub fn edm_invert_trace(
    z0: &VideoTensor,
    den: &dyn EdmDenoiser,
    cfg: &EdmRunConfig,
) -> Result<Vec<VideoTensor>> {
    let sig = cfg.ascending()?;
    let mut out = vec![z0.clone()];
    for w in sig.windows(2) {
        let next = edm_invert_step(
            out.last().unwrap(),
            den,
            &cfg.schedule,
            w[0],
            w[1],
            cfg.index_mode,
        )?;
        out.push(next);
    }
    Ok(out)
}

/// Every intermediate latent of the sampler, starting with `z_top`.
pub fn edm_sample_trace(
    z_top: &VideoTensor,
    den: &dyn EdmDenoiser,
    cfg: &EdmRunConfig,
) -> Result<Vec<VideoTensor>> {
    let sig = cfg.ascending()?;
    let mut out = vec![z_top.clone()];
    for w in sig.windows(2).rev() {
        let next = edm_sample_step(out.last().unwrap(), den, &cfg.schedule, w[1], w[0])?;
        out.push(next);
    }
    Ok(out)
}

pub fn edm_invert(z0: &VideoTensor, den: &dyn EdmDenoiser, cfg: &EdmRunConfig) -> Result<VideoTensor> {
    Ok(edm_invert_trace(z0, den, cfg)?.pop().unwrap())
}

pub fn edm_sample(z_top: &VideoTensor, den: &dyn EdmDenoiser, cfg: &EdmRunConfig) -> Result<VideoTensor> {
    Ok(edm_sample_trace(z_top, den, cfg)?.pop().unwrap())
}

/// Clips of `clip_len` frames; consecutive clips share one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipPlan {
    pub clip_len: usize,
}

impl ClipPlan {
    pub fn new(clip_len: usize) -> Result<Self> {
        if clip_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "clip_len {clip_len} must be >= 2"
            )));
        }
        Ok(Self { clip_len })
    }

    /// Frame ranges `start..end` covering `0..frames`.
    pub fn ranges(&self, frames: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + self.clip_len).min(frames);
            out.push((start, end));
            if end == frames {
                break;
            }
            start = end - 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub enabled: bool,
    pub steps: usize,
    pub rho: f64,
    pub clip_len: usize,
    pub index_mode: IndexMode,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub karras_rho: f64,
    pub sigma_data: f64,
    /// Spatial block of the post-processing codec.
    pub codec_block: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            steps: 25,
            rho: 0.15,
            clip_len: 8,
            index_mode: IndexMode::Mixed,
            sigma_min: 0.02,
            sigma_max: 80.0,
            karras_rho: 7.0,
            sigma_data: 0.5,
            codec_block: 2,
        }
    }
}

impl PostprocessConfig {
    pub fn run_config(&self) -> Result<EdmRunConfig> {
        let schedule = EdmSchedule::karras(
            self.steps.max(2),
            self.sigma_min,
            self.sigma_max,
            self.karras_rho,
            self.sigma_data,
        )?;
        Ok(EdmRunConfig {
            schedule,
            steps: self.steps,
            index_mode: self.index_mode,
        })
    }
}

/// Latent-space bookkeeping from [`strengthen`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StrengthenTrace {
    /// Conditioning frame used by each clip.
    pub conditions: Vec<VideoTensor>,
    /// Processed last frame of each clip.
    pub last_frames: Vec<VideoTensor>,
}

/// Invert and resample each clip, conditioning on the previous clip's processed last frame.
pub fn strengthen(
    video: &VideoTensor,
    cfg: &EdmRunConfig,
    rho: f64,
    plan: ClipPlan,
    codec: &dyn LatentCodec,
) -> Result<(VideoTensor, StrengthenTrace)> {
    if video.frames() < 2 {
        return Err(Error::Shape(format!(
            "strengthening needs >= 2 frames, got {}",
            video.frames()
        )));
    }
    let mut trace = StrengthenTrace::default();
    let mut pieces = Vec::new();
    let mut cond: Option<VideoTensor> = None;
    for (k, (s, e)) in plan.ranges(video.frames()).into_iter().enumerate() {
        let z0 = codec.encode(&video.slice_frames(s, e)?)?;
        let c = cond.take().unwrap_or_else(|| z0.frame(0));
        let den = ToyConditionalDenoiser::new(rho, c.clone())?;
        let z_top = edm_invert(&z0, &den, cfg)?;
        let z = edm_sample(&z_top, &den, cfg)?;
        let last = z.frame(z.frames() - 1);
        trace.conditions.push(c);
        trace.last_frames.push(last.clone());
        cond = Some(last);
        let frames = codec.decode(&z)?;
        pieces.push(if k == 0 {
            frames
        } else {
            frames.slice_frames(1, frames.frames())?
        });
    }
    Ok((VideoTensor::concat_frames(&pieces)?, trace))
}

/// [`strengthen`] with the settings and codec from `cfg`.
pub fn strengthen_with(
    video: &VideoTensor,
    cfg: &PostprocessConfig,
) -> Result<(VideoTensor, StrengthenTrace)> {
    let codec = Codec2D::lossless(cfg.codec_block);
    strengthen(
        video,
        &cfg.run_config()?,
        cfg.rho,
        ClipPlan::new(cfg.clip_len)?,
        &codec,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(dims: crate::tensor::Dims, seed: u64) -> VideoTensor {
        VideoTensor::randn(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn run_cfg(steps: usize, mode: IndexMode) -> EdmRunConfig {
        EdmRunConfig {
            schedule: EdmSchedule::karras(25, 0.02, 80.0, 7.0, 0.5).unwrap(),
            steps,
            index_mode: mode,
        }
    }

    /// Makes `D(z) = z` at every sigma, so the sampler bracket vanishes.
    struct PreconditionedIdentity(f64);
    impl EdmDenoiser for PreconditionedIdentity {
        fn raw(&self, u: &VideoTensor, c_noise: f64) -> Result<VideoTensor> {
            let sigma = (4.0 * c_noise).exp();
            let k = crate::schedules::edm_coeffs(sigma, self.0);
            // D = c_skip z + c_out F = z with z = u / c_in.
            Ok(u.scale((1.0 - k.c_skip) / (k.c_out * k.c_in)))
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let z = randn([2, 4, 2, 2], 1);
        let den = ToyConditionalDenoiser::new(0.2, z.frame(0)).unwrap();
        let cfg = run_cfg(0, IndexMode::Mixed);
        assert_eq!(edm_invert(&z, &den, &cfg).unwrap(), z);
        assert_eq!(edm_sample(&z, &den, &cfg).unwrap(), z);
    }

    #[test]
    fn sampler_fixed_point() {
        let z = randn([2, 4, 2, 2], 2);
        let cfg = run_cfg(25, IndexMode::Mixed);
        let out = edm_sample(&z, &PreconditionedIdentity(0.5), &cfg).unwrap();
        assert!(out.max_abs_diff(&z).unwrap() <= 1e-5);
    }

    #[test]
    fn inversion_with_skip_one_network_is_static() {
        // With D = z the inversion numerator and denominator both reduce to
        // sigma_next + d (1 - c_skip), so each step returns its input.
        let z = randn([2, 4, 2, 2], 3);
        let cfg = run_cfg(25, IndexMode::Uniform);
        let out = edm_invert(&z, &PreconditionedIdentity(0.5), &cfg).unwrap();
        assert!(out.rel_err(&z).unwrap() <= 1e-5);
    }

    #[test]
    fn scripted_steps_match() {
        let z = randn([2, 4, 2, 2], 4);
        let cond = randn([1, 4, 2, 2], 5);
        let rho = 0.15;
        let den = ToyConditionalDenoiser::new(rho, cond.clone()).unwrap();
        let cfg = run_cfg(25, IndexMode::Mixed);
        let sig = cfg.ascending().unwrap();
        let up = edm_invert_trace(&z, &den, &cfg).unwrap();
        let sd = 0.5f64;
        let n = z.frame_len();
        for (i, w) in sig.windows(2).enumerate() {
            let (s0, s1) = (w[0], w[1]);
            let c_in0 = 1.0 / (s0 * s0 + sd * sd).sqrt();
            let c_skip1 = sd * sd / (s1 * s1 + sd * sd);
            let c_out1 = s1 * sd / (s1 * s1 + sd * sd).sqrt();
            for (j, &v) in up[i].data().iter().enumerate() {
                let v = v as f64;
                let f = (1.0 - rho) * c_in0 * v + rho * cond.data()[j % n] as f64;
                let want = (s1 * v + (s0 - s1) * c_out1 * f) / ((s0 - s1) * (1.0 - c_skip1) + s1);
                let got = up[i + 1].data()[j] as f64;
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "step {i}");
            }
        }
        let down = edm_sample_trace(up.last().unwrap(), &den, &cfg).unwrap();
        for (i, w) in sig.windows(2).rev().enumerate() {
            let (s0, s1) = (w[0], w[1]);
            let root = (s1 * s1 + sd * sd).sqrt();
            let (c_skip, c_out, c_in) = (sd * sd / (root * root), s1 * sd / root, 1.0 / root);
            for (j, &v) in down[i].data().iter().enumerate() {
                let v = v as f64;
                let d = c_skip * v + c_out * ((1.0 - rho) * c_in * v + rho * cond.data()[j % n] as f64);
                let want = v + (s0 - s1) / s1 * (v - d);
                let got = down[i + 1].data()[j] as f64;
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "step {i}");
            }
        }
    }

    #[test]
    fn singular_sampling_step_rejected() {
        let z = randn([1, 4, 1, 1], 6);
        let den = ToyConditionalDenoiser::new(0.0, z.clone()).unwrap();
        let s = EdmSchedule::karras(5, 0.02, 80.0, 7.0, 0.5).unwrap();
        assert!(matches!(
            edm_sample_step(&z, &den, &s, 0.0, 0.0),
            Err(Error::SingularStep { .. })
        ));
    }

    #[test]
    fn clip_ranges_share_one_frame() {
        let plan = ClipPlan::new(8).unwrap();
        assert_eq!(plan.ranges(8), vec![(0, 8)]);
        assert_eq!(plan.ranges(15), vec![(0, 8), (7, 15)]);
        assert_eq!(plan.ranges(16), vec![(0, 8), (7, 15), (14, 16)]);
        assert!(ClipPlan::new(1).is_err());
        for t in 2..40 {
            let r = plan.ranges(t);
            let total: usize = r.iter().map(|(s, e)| e - s).sum::<usize>() - (r.len() - 1);
            assert_eq!(total, t);
        }
    }

    #[test]
    fn static_clip_stays_static() {
        let frame = VideoTensor::from_fn([1, 3, 4, 4], |_, c, y, x| (c + y * 4 + x) as f32 / 24.0);
        let v = frame.repeat_frame(6).unwrap();
        let (out, _) = strengthen_with(&v, &PostprocessConfig::default()).unwrap();
        for t in 1..out.frames() {
            assert!(out.frame(t).max_abs_diff(&out.frame(0)).unwrap() <= 1e-3);
        }
    }

    #[test]
    fn chaining_passes_last_frame_exactly() {
        let v = randn([12, 1, 4, 4], 9).map(|x| 0.5 + 0.1 * x);
        let cfg = PostprocessConfig {
            clip_len: 5,
            ..Default::default()
        };
        let (out, trace) = strengthen_with(&v, &cfg).unwrap();
        assert_eq!(out.dims(), v.dims());
        assert_eq!(trace.conditions.len(), 3);
        for k in 1..trace.conditions.len() {
            assert_eq!(trace.conditions[k], trace.last_frames[k - 1]);
        }
    }

    #[test]
    fn single_clip_without_conditioning_is_round_trip() {
        let v = randn([4, 1, 4, 4], 8).map(|x| 0.5 + 0.1 * x);
        let cfg = PostprocessConfig {
            rho: 0.0,
            ..Default::default()
        };
        let (out, _) = strengthen_with(&v, &cfg).unwrap();
        let codec = Codec2D::lossless(2);
        let rc = cfg.run_config().unwrap();
        let z0 = codec.encode(&v).unwrap();
        let den = ToyConditionalDenoiser::new(0.0, z0.frame(0)).unwrap();
        let rt = codec
            .decode(&edm_sample(&edm_invert(&z0, &den, &rc).unwrap(), &den, &rc).unwrap())
            .unwrap();
        assert!(out.max_abs_diff(&rt).unwrap() <= 1e-3);
    }
}
