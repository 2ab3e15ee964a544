//! Latent fusion across the image branch and the two video branches.

use serde::{Deserialize, Serialize};

use crate::codecs::LatentCodec;
use crate::denoisers::{denoise_z0, Denoiser};
use crate::error::Result;
use crate::schedules::DdpmSchedule;
use crate::tensor::VideoTensor;

/// `(lambda_f1, lambda_f2, lambda_f)`, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRatios {
    pub lambda_f1: f64,
    pub lambda_f2: f64,
    pub lambda_f: f64,
}

impl FusionRatios {
    /// Clamps each weight to `[0, 1]`.
    pub fn new(lambda_f1: f64, lambda_f2: f64, lambda_f: f64) -> Self {
        Self {
            lambda_f1: lambda_f1.clamp(0.0, 1.0),
            lambda_f2: lambda_f2.clamp(0.0, 1.0),
            lambda_f: lambda_f.clamp(0.0, 1.0),
        }
    }

    pub const FIXED: FusionRatios = FusionRatios {
        lambda_f1: 0.1,
        lambda_f2: 0.01,
        lambda_f: 0.5,
    };

    pub const ZERO: FusionRatios = FusionRatios {
        lambda_f1: 0.0,
        lambda_f2: 0.0,
        lambda_f: 0.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda_f1, self.lambda_f2, self.lambda_f]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Default for FusionRatios {
    fn default() -> Self {
        Self::FIXED
    }
}

/// The three live trajectories at timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    pub z_i: VideoTensor,
    pub z_v1: VideoTensor,
    pub z_v2: VideoTensor,
    pub t: usize,
}

/// `(1 - l) z_i + l z_v1`.
pub fn fuse_homologous(z_i: &VideoTensor, z_v1: &VideoTensor, lambda_f1: f64) -> Result<VideoTensor> {
    VideoTensor::lerp(z_i, z_v1, lambda_f1)
}

/// `z_f2 = lerp(z_i, z_v2i, lambda_f2)`.
pub fn fuse_heterogeneous(z_i: &VideoTensor, z_v2_to_i: &VideoTensor, lambda_f2: f64) -> Result<VideoTensor> {
    VideoTensor::lerp(z_i, z_v2_to_i, lambda_f2)
}

/// `lerp(z_f1, lerp(z_i, z_v2i, lambda_f2), lambda_f)`.
pub fn fuse_final(
    z_i: &VideoTensor,
    z_f1: &VideoTensor,
    z_v2_to_i: &VideoTensor,
    ratios: &FusionRatios,
) -> Result<VideoTensor> {
    z_i.ensure_same_dims(z_f1, "fuse_final")?;
    let z_f2 = fuse_heterogeneous(z_i, z_v2_to_i, ratios.lambda_f2)?;
    VideoTensor::lerp(z_f1, &z_f2, ratios.lambda_f)
}

/// `l z_v2 + (1 - l) z_i_to_v2`. The weight multiplies the video latent here.
pub fn fuse_for_hetero(z_v2: &VideoTensor, z_i_to_v2: &VideoTensor, lambda_f2: f64) -> Result<VideoTensor> {
    VideoTensor::lerp(z_i_to_v2, z_v2, lambda_f2)
}

/// A latent moved into the other branch's space.
#[derive(Clone, Debug, PartialEq)]
pub struct Converted {
    /// Noisy latent in the target space.
    pub z_t: VideoTensor,
    /// Clean-latent estimate in the target space.
    pub z0: VideoTensor,
}

/// Moves noisy latents between the image (2D codec) and video (3D codec) spaces.
///
/// The clean estimate goes through pixel space (`E_dst(D_src(z0))`); the noise
/// implied by the source trajectory is carried with `D_dst^T D_src` and both are
/// recombined with the destination schedule at the same timestep index.
pub struct LatentBridge<'a> {
    pub codec2d: &'a dyn LatentCodec,
    pub codec3d: &'a dyn LatentCodec,
    pub schedule_i: &'a DdpmSchedule,
    pub schedule_v2: &'a DdpmSchedule,
}

#[allow(clippy::too_many_arguments)]
fn transfer(
    z_t: &VideoTensor,
    z0: &VideoTensor,
    t: usize,
    src_codec: &dyn LatentCodec,
    dst_codec: &dyn LatentCodec,
    src_sched: &DdpmSchedule,
    dst_sched: &DdpmSchedule,
) -> Result<Converted> {
    let z0_dst = dst_codec.encode(&src_codec.decode(z0)?)?;
    let ab_src = src_sched.alpha_bar(t)?;
    let ab_dst = dst_sched.alpha_bar(t)?;
    if ab_dst >= 1.0 || ab_src >= 1.0 {
        return Ok(Converted {
            z_t: z0_dst.scale(ab_dst.sqrt()),
            z0: z0_dst,
        });
    }
    let s = (1.0 - ab_src).sqrt();
    let noise = z_t.affine_combine(1.0 / s, z0, -ab_src.sqrt() / s)?;
    let noise_dst = dst_codec.decode_adjoint(&src_codec.decode(&noise)?)?;
    let z = z0_dst.affine_combine(ab_dst.sqrt(), &noise_dst, (1.0 - ab_dst).sqrt())?;
    Ok(Converted {
        z_t: z.check_finite("latent transfer")?,
        z0: z0_dst,
    })
}

impl LatentBridge<'_> {
    /// `z_t^{V2 -> I}` from the heterogeneous branch latent.
    pub fn v2_to_image(&self, z_v2: &VideoTensor, den_v2: &dyn Denoiser, t: usize) -> Result<Converted> {
        let z0 = denoise_z0(den_v2, z_v2, t, self.schedule_v2)?;
        self.v2_to_image_with_z0(z_v2, &z0, t)
    }

    pub fn v2_to_image_with_z0(&self, z_v2: &VideoTensor, z0: &VideoTensor, t: usize) -> Result<Converted> {
        transfer(
            z_v2,
            z0,
            t,
            self.codec3d,
            self.codec2d,
            self.schedule_v2,
            self.schedule_i,
        )
    }

    /// `z_t^{I -> V2}` from the image branch latent.
    pub fn image_to_v2(&self, z_i: &VideoTensor, den_i: &dyn Denoiser, t: usize) -> Result<Converted> {
        let z0 = denoise_z0(den_i, z_i, t, self.schedule_i)?;
        self.image_to_v2_with_z0(z_i, &z0, t)
    }

    pub fn image_to_v2_with_z0(&self, z_i: &VideoTensor, z0: &VideoTensor, t: usize) -> Result<Converted> {
        transfer(
            z_i,
            z0,
            t,
            self.codec2d,
            self.codec3d,
            self.schedule_i,
            self.schedule_v2,
        )
    }
}
