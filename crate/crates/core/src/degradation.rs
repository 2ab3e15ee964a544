//! Forward degradation operators and their adjoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, VideoTensor};

#[derive(Clone, Debug, PartialEq)]
pub enum DegradationOp {
    /// `k x k` mean pooling per frame.
    Downsample { factor: usize },
    /// Normalized separable Gaussian, reflect padding.
    GaussianBlur { radius: usize, sigma: f64 },
    /// Centered mean over `window` frames, edge-clamped.
    TemporalUniformBlur { window: usize },
    /// `factor * x + mask`; `mask` has the video's dims or a single frame broadcast over T.
    LowLight { factor: f64, mask: VideoTensor },
    /// Applied left to right.
    Compose(Vec<DegradationOp>),
}

impl DegradationOp {
    pub fn is_linear(&self) -> bool {
        match self {
            DegradationOp::LowLight { .. } => false,
            DegradationOp::Compose(ops) => ops.iter().all(DegradationOp::is_linear),
            _ => true,
        }
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let [t, c, h, w] = input;
        match self {
            DegradationOp::Downsample { factor: k } => {
                if *k == 0 || h % k != 0 || w % k != 0 {
                    return Err(Error::Shape(format!(
                        "{h}x{w} frame not divisible by downsample factor {k}"
                    )));
                }
                Ok([t, c, h / k, w / k])
            }
            DegradationOp::GaussianBlur { radius, sigma } => {
                if !(*sigma > 0.0) {
                    return Err(Error::InvalidArgument(format!("blur sigma {sigma} <= 0")));
                }
                if *radius >= h.max(1) || *radius >= w.max(1) {
                    return Err(Error::Shape(format!(
                        "blur radius {radius} too large for {h}x{w} reflect padding"
                    )));
                }
                Ok(input)
            }
            DegradationOp::TemporalUniformBlur { window } => {
                check_window(*window, t)?;
                Ok(input)
            }
            DegradationOp::LowLight { mask, .. } => {
                mask_matches(mask, input)?;
                Ok(input)
            }
            DegradationOp::Compose(ops) => ops.iter().try_fold(input, |d, op| op.output_dims(d)),
        }
    }

    pub fn apply(&self, x: &VideoTensor) -> Result<VideoTensor> {
        self.output_dims(x.dims())?;
        match self {
            DegradationOp::Downsample { factor } => Ok(mean_pool(x, *factor)),
            DegradationOp::GaussianBlur { radius, sigma } => {
                Ok(blur_separable(x, &gaussian_kernel(*radius, *sigma), false))
            }
            DegradationOp::TemporalUniformBlur { window } => Ok(temporal_mean(x, *window)),
            DegradationOp::LowLight { factor, mask } => Ok(add_mask(&x.scale(*factor), mask)),
            DegradationOp::Compose(ops) => ops.iter().try_fold(x.clone(), |acc, op| op.apply(&acc)),
        }
    }

    /// Exact adjoint `A^T` of a linear operator.
    pub fn apply_adjoint(&self, y: &VideoTensor) -> Result<VideoTensor> {
        if !self.is_linear() {
            return Err(Error::Unsupported(
                "adjoint of the affine low-light operator".into(),
            ));
        }
        self.linear_adjoint(y)
    }

    /// Adjoint of the linear part of the operator. For `LowLight` that is `factor * y`.
    pub fn linear_adjoint(&self, y: &VideoTensor) -> Result<VideoTensor> {
        match self {
            DegradationOp::Downsample { factor } => {
                let [t, c, h, w] = y.dims();
                DegradationOp::Downsample { factor: *factor }.output_dims([t, c, h * factor, w * factor])?;
                Ok(replicate_up(y, *factor, 1.0 / (factor * factor) as f64))
            }
            DegradationOp::GaussianBlur { radius, sigma } => {
                self.output_dims(y.dims())?;
                Ok(blur_separable(y, &gaussian_kernel(*radius, *sigma), true))
            }
            DegradationOp::TemporalUniformBlur { window } => {
                check_window(*window, y.frames())?;
                Ok(temporal_mean_adjoint(y, *window))
            }
            DegradationOp::LowLight { factor, mask } => {
                mask_matches(mask, y.dims())?;
                Ok(y.scale(*factor))
            }
            DegradationOp::Compose(ops) => ops
                .iter()
                .rev()
                .try_fold(y.clone(), |acc, op| op.linear_adjoint(&acc)),
        }
    }

    /// Lifts a measurement back to the signal grid (nearest upsampling for
    /// pooling, identity otherwise). Used to seed latents from a degraded clip.
    pub fn lift(&self, y: &VideoTensor) -> Result<VideoTensor> {
        match self {
            DegradationOp::Downsample { factor } => Ok(replicate_up(y, *factor, 1.0)),
            DegradationOp::Compose(ops) => ops.iter().rev().try_fold(y.clone(), |acc, op| op.lift(&acc)),
            _ => Ok(y.clone()),
        }
    }
}

/// Adds i.i.d. Gaussian noise of std `sigma` (no-op for `sigma == 0`).
pub fn add_measurement_noise(y: &VideoTensor, sigma: f64, seed: u64) -> VideoTensor {
    if sigma == 0.0 {
        return y.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = VideoTensor::randn(y.dims(), &mut rng);
    y.affine_combine(1.0, &n, sigma).expect("same dims")
}

fn check_window(window: usize, frames: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "temporal window must be odd, got {window}"
        )));
    }
    if window > frames {
        return Err(Error::Shape(format!(
            "temporal window {window} exceeds {frames} frames"
        )));
    }
    Ok(())
}

fn mask_matches(mask: &VideoTensor, dims: Dims) -> Result<()> {
    let md = mask.dims();
    if md == dims || (md[0] == 1 && md[1..] == dims[1..]) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "low-light mask {md:?} does not fit video {dims:?}"
        )))
    }
}

/// `x + mask`, broadcasting a single-frame mask over time.
pub(crate) fn add_mask(x: &VideoTensor, mask: &VideoTensor) -> VideoTensor {
    let n = x.frame_len();
    let single = mask.frames() == 1 && x.frames() != 1;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let m = if single {
            mask.data()[i % n]
        } else {
            mask.data()[i]
        };
        *v += m;
    }
    out
}

fn mean_pool(x: &VideoTensor, k: usize) -> VideoTensor {
    let [t, c, h, w] = x.dims();
    let inv = 1.0 / (k * k) as f64;
    VideoTensor::from_fn([t, c, h / k, w / k], |ti, ci, yi, xi| {
        let mut acc = 0.0f64;
        for dy in 0..k {
            for dx in 0..k {
                acc += x.get(ti, ci, yi * k + dy, xi * k + dx) as f64;
            }
        }
        (acc * inv) as f32
    })
}

fn replicate_up(y: &VideoTensor, k: usize, scale: f64) -> VideoTensor {
    let [t, c, h, w] = y.dims();
    VideoTensor::from_fn([t, c, h * k, w * k], |ti, ci, yi, xi| {
        (y.get(ti, ci, yi / k, xi / k) as f64 * scale) as f32
    })
}

pub(crate) fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Separable convolution with reflect padding; `adjoint` scatters instead of gathers.
fn blur_separable(x: &VideoTensor, kernel: &[f64], adjoint: bool) -> VideoTensor {
    let horizontal = blur_axis(x, kernel, adjoint, true);
    blur_axis(&horizontal, kernel, adjoint, false)
}

fn blur_axis(x: &VideoTensor, kernel: &[f64], adjoint: bool, along_w: bool) -> VideoTensor {
    let [t, c, h, w] = x.dims();
    let r = (kernel.len() / 2) as i64;
    let n = if along_w { w } else { h };
    let mut out = vec![0.0f64; x.len()];
    for ti in 0..t {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let pos = if along_w { xi } else { yi } as i64;
                    let src = x.get(ti, ci, yi, xi) as f64;
                    let mut acc = 0.0;
                    for (j, &kv) in kernel.iter().enumerate() {
                        let q = reflect(pos + j as i64 - r, n);
                        let (qy, qx) = if along_w { (yi, q) } else { (q, xi) };
                        if adjoint {
                            out[x.index(ti, ci, qy, qx)] += kv * src;
                        } else {
                            acc += kv * x.get(ti, ci, qy, qx) as f64;
                        }
                    }
                    if !adjoint {
                        out[x.index(ti, ci, yi, xi)] = acc;
                    }
                }
            }
        }
    }
    VideoTensor::from_parts(x.dims(), out.into_iter().map(|v| v as f32).collect())
}

/// Per-pixel centered moving average over `window` frames, replicating edge frames.
pub fn temporal_mean(x: &VideoTensor, window: usize) -> VideoTensor {
    let t_n = x.frames() as i64;
    let r = (window / 2) as i64;
    let n = x.frame_len();
    let inv = 1.0 / window as f64;
    let mut out = vec![0.0f32; x.len()];
    for t in 0..t_n {
        let dst = &mut out[t as usize * n..(t as usize + 1) * n];
        let mut acc = vec![0.0f64; n];
        for j in -r..=r {
            let s = (t + j).clamp(0, t_n - 1) as usize;
            for (a, &v) in acc.iter_mut().zip(x.frame_data(s)) {
                *a += v as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = (a * inv) as f32;
        }
    }
    VideoTensor::from_parts(x.dims(), out)
}

/// Adjoint of [`temporal_mean`].
pub fn temporal_mean_adjoint(y: &VideoTensor, window: usize) -> VideoTensor {
    let t_n = y.frames() as i64;
    let r = (window / 2) as i64;
    let n = y.frame_len();
    let inv = 1.0 / window as f64;
    let mut out = vec![0.0f64; y.len()];
    for t in 0..t_n {
        let src = y.frame_data(t as usize);
        for j in -r..=r {
            let s = (t + j).clamp(0, t_n - 1) as usize;
            for (o, &v) in out[s * n..(s + 1) * n].iter_mut().zip(src) {
                *o += v as f64 * inv;
            }
        }
    }
    VideoTensor::from_parts(y.dims(), out.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_video(dims: Dims, seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::randn(dims, &mut rng)
    }

    fn adjoint_gap(op: &DegradationOp, dims: Dims, seed: u64) -> f64 {
        let x = rand_video(dims, seed);
        let ax = op.apply(&x).unwrap();
        let y = rand_video(ax.dims(), seed ^ 0xABCD);
        let aty = op.apply_adjoint(&y).unwrap();
        let lhs = ax.dot(&y).unwrap();
        let rhs = x.dot(&aty).unwrap();
        (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0)
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let x = VideoTensor::full([2, 3, 8, 8], 0.3);
        let y = DegradationOp::Downsample { factor: 4 }.apply(&x).unwrap();
        assert_eq!(y.dims(), [2, 3, 2, 2]);
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn downsample_rejects_indivisible() {
        let x = VideoTensor::zeros([1, 1, 6, 8]);
        assert!(DegradationOp::Downsample { factor: 4 }.apply(&x).is_err());
    }

    #[test]
    fn downsample_adjoint_and_aat() {
        let op = DegradationOp::Downsample { factor: 2 };
        let y = rand_video([2, 1, 3, 3], 4);
        let up = op.apply_adjoint(&y).unwrap();
        // A^T replicates y / k^2.
        assert!((up.get(0, 0, 1, 1) - y.get(0, 0, 0, 0) / 4.0).abs() < 1e-7);
        let aat = op.apply(&up).unwrap().scale(4.0);
        assert!(aat.max_abs_diff(&y).unwrap() <= 1e-5);
    }

    #[test]
    fn temporal_blur_window_one_is_identity() {
        let x = rand_video([4, 2, 3, 3], 1);
        let y = DegradationOp::TemporalUniformBlur { window: 1 }
            .apply(&x)
            .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn temporal_blur_rejects_even_or_long_window() {
        let x = rand_video([4, 1, 2, 2], 1);
        assert!(DegradationOp::TemporalUniformBlur { window: 2 }
            .apply(&x)
            .is_err());
        assert!(DegradationOp::TemporalUniformBlur { window: 5 }
            .apply(&x)
            .is_err());
    }

    #[test]
    fn lowlight_identity_and_adjoint_unsupported() {
        let x = rand_video([2, 3, 4, 4], 2);
        let op = DegradationOp::LowLight {
            factor: 1.0,
            mask: VideoTensor::zeros([1, 3, 4, 4]),
        };
        assert_eq!(op.apply(&x).unwrap(), x);
        assert!(matches!(op.apply_adjoint(&x), Err(Error::Unsupported(_))));
    }

    #[test]
    fn blur_adjoint_matches_forward_on_interior() {
        // Symmetric kernel: A^T and A agree away from the reflect boundary.
        let op = DegradationOp::GaussianBlur {
            radius: 1,
            sigma: 0.8,
        };
        let mut x = VideoTensor::zeros([1, 1, 9, 9]);
        let i = x.index(0, 0, 4, 4);
        x.data_mut()[i] = 1.0;
        let a = op.apply(&x).unwrap();
        let at = op.apply_adjoint(&x).unwrap();
        assert!(a.max_abs_diff(&at).unwrap() <= 1e-7);
    }

    #[test]
    fn zero_in_zero_out() {
        let ops = [
            DegradationOp::Downsample { factor: 2 },
            DegradationOp::GaussianBlur {
                radius: 2,
                sigma: 1.0,
            },
            DegradationOp::TemporalUniformBlur { window: 3 },
        ];
        for op in &ops {
            let z = VideoTensor::zeros([3, 1, 4, 4]);
            let y = op.apply(&z).unwrap();
            assert!(op.apply_adjoint(&y).unwrap().max_abs() == 0.0);
        }
    }

    #[test]
    fn compose_lifts_and_adjoints() {
        let op = DegradationOp::Compose(vec![
            DegradationOp::GaussianBlur {
                radius: 1,
                sigma: 1.0,
            },
            DegradationOp::Downsample { factor: 2 },
        ]);
        assert!(adjoint_gap(&op, [2, 3, 8, 8], 11) <= 1e-4);
        let y = rand_video([2, 3, 4, 4], 3);
        assert_eq!(op.lift(&y).unwrap().dims(), [2, 3, 8, 8]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn linear_variants_satisfy_adjoint_identity(
            seed in any::<u64>(),
            t in 1usize..=5,
            c in 1usize..=3,
            hb in 1usize..=4,
            wb in 1usize..=4,
            which in 0usize..3,
        ) {
            let dims = [t, c, hb * 4, wb * 4];
            let op = match which {
                0 => DegradationOp::Downsample { factor: 4 },
                1 => DegradationOp::GaussianBlur { radius: 2, sigma: 1.2 },
                _ => DegradationOp::TemporalUniformBlur { window: if t >= 3 { 3 } else { 1 } },
            };
            prop_assert!(adjoint_gap(&op, dims, seed) <= 1e-4);
        }
    }
}
