//! Image/video metrics: sharpness proxy, warping error, PSNR, SSIM.
//!
//! Pixel values are taken to lie in `[0, 1]`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{FlowField, VideoTensor};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WIN: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Central-difference derivative along an axis of length `n` (one-sided at the ends).
#[inline]
fn central(get: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else if i == 0 {
        get(1) - get(0)
    } else if i == n - 1 {
        get(n - 1) - get(n - 2)
    } else {
        0.5 * (get(i + 1) - get(i - 1))
    }
}

/// Mean over frames of mean gradient magnitude divided by the frame's value range.
pub fn sharpness_proxy(v: &VideoTensor) -> f64 {
    let [t_n, c_n, h, w] = v.dims();
    if t_n == 0 || v.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for t in 0..t_n {
        let frame = v.frame(t);
        let (lo, hi) = frame.min_max();
        let range = ((hi - lo) as f64).max(1e-6);
        let mut acc = 0.0;
        for c in 0..c_n {
            for y in 0..h {
                for x in 0..w {
                    let gy = central(|i| v.get(t, c, i, x) as f64, y, h);
                    let gx = central(|j| v.get(t, c, y, j) as f64, x, w);
                    acc += (gx * gx + gy * gy).sqrt();
                }
            }
        }
        total += acc / (c_n * h * w) as f64 / range;
    }
    total / t_n as f64
}

/// Bilinear sample of frame `t`, channel `c` at `(sy, sx)`; `None` outside the frame.
fn bilinear(v: &VideoTensor, t: usize, c: usize, sy: f64, sx: f64) -> Option<f64> {
    let (h, w) = (v.height() as f64, v.width() as f64);
    if !(sy >= 0.0 && sx >= 0.0 && sy <= h - 1.0 && sx <= w - 1.0) {
        return None;
    }
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let p = |y, x| v.get(t, c, y, x) as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Mean over frame pairs of the mean `|v[t+1] - warp(v[t], flow[t])|` on in-bounds pixels.
pub fn warping_error(v: &VideoTensor, flow: &FlowField) -> Result<f64> {
    flow.check_video(v.dims())
        .map_err(|e| Error::Metric(e.to_string()))?;
    let [t_n, c_n, h, w] = v.dims();
    let mut total = 0.0;
    for t in 0..t_n - 1 {
        let (mut acc, mut count) = (0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = flow.at(t, y, x);
                let (sy, sx) = (y as f64 - dy as f64, x as f64 - dx as f64);
                for c in 0..c_n {
                    if let Some(s) = bilinear(v, t, c, sy, sx) {
                        acc += (v.get(t + 1, c, y, x) as f64 - s).abs();
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::Metric(format!(
                "every pixel of frame {} warps out of bounds",
                t + 1
            )));
        }
        total += acc / count as f64;
    }
    Ok(total / (t_n - 1) as f64)
}

pub fn mse(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    Ok(a.dist_sq(b)? / a.len().max(1) as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn window_starts(n: usize) -> (usize, Vec<usize>) {
    let win = SSIM_WIN.min(n);
    let starts = (0..=n - win).step_by(SSIM_STRIDE).collect();
    (win, starts)
}

/// Windowed SSIM (8x8 windows, stride 4) averaged over frames, channels and windows.
/// Frames smaller than a window use the whole frame as one window.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    a.ensure_same_dims(b, "ssim")?;
    let [t_n, c_n, h, w] = a.dims();
    if a.is_empty() {
        return Err(Error::Metric("ssim of an empty tensor".into()));
    }
    let (wh, ys) = window_starts(h);
    let (ww, xs) = window_starts(w);
    let n = (wh * ww) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for t in 0..t_n {
        for c in 0..c_n {
            for &y0 in &ys {
                for &x0 in &xs {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in y0..y0 + wh {
                        for x in x0..x0 + ww {
                            let p = a.get(t, c, y, x) as f64;
                            let q = b.get(t, c, y, x) as f64;
                            sa += p;
                            sb += q;
                            saa += p * p;
                            sbb += q * q;
                            sab += p * q;
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let va = (saa / n - ma * ma).max(0.0);
                    let vb = (sbb / n - mb * mb).max(0.0);
                    let cov = sab / n - ma * mb;
                    let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub warp_error: Option<f64>,
    pub sharpness: f64,
}

/// All metrics of `v`, with reference-based ones only when `reference` is given.
pub fn evaluate(
    v: &VideoTensor,
    reference: Option<&VideoTensor>,
    flow: Option<&FlowField>,
) -> Result<Metrics> {
    let (psnr, ssim) = match reference {
        Some(r) => (Some(psnr(v, r)?), Some(ssim(v, r)?)),
        None => (None, None),
    };
    Ok(Metrics {
        psnr,
        ssim,
        warp_error: flow.map(|f| warping_error(v, f)).transpose()?,
        sharpness: sharpness_proxy(v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkerboard(cell: usize, n: usize) -> VideoTensor {
        VideoTensor::from_fn([1, 1, n, n], |_, _, y, x| ((y / cell + x / cell) % 2) as f32)
    }

    fn mean_blur2(v: &VideoTensor) -> VideoTensor {
        // 2x2 box average with replicated right/bottom edge.
        let [_, _, h, w] = v.dims();
        VideoTensor::from_fn(v.dims(), |t, c, y, x| {
            let y1 = (y + 1).min(h - 1);
            let x1 = (x + 1).min(w - 1);
            (v.get(t, c, y, x) + v.get(t, c, y1, x) + v.get(t, c, y, x1) + v.get(t, c, y1, x1)) / 4.0
        })
    }

    #[test]
    fn sharpness_basics() {
        assert_eq!(sharpness_proxy(&VideoTensor::full([2, 3, 5, 5], 0.3)), 0.0);
        let cb = checkerboard(4, 16);
        assert!(sharpness_proxy(&cb) > sharpness_proxy(&mean_blur2(&cb)));
        let s1 = sharpness_proxy(&cb);
        let s2 = sharpness_proxy(&cb.scale(2.0));
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn sharpness_ramp_by_hand() {
        // Horizontal ramp 0, 1, 2, 3: gradient 1 everywhere, range 3.
        let v = VideoTensor::from_fn([1, 1, 2, 4], |_, _, _, x| x as f32);
        assert!((sharpness_proxy(&v) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn warping_static_and_shift() {
        let frame = VideoTensor::from_fn([1, 1, 4, 5], |_, _, y, x| (y * 5 + x) as f32 * 0.03);
        let st = frame.repeat_frame(3).unwrap();
        assert_eq!(warping_error(&st, &FlowField::zeros_for(st.dims())).unwrap(), 0.0);

        // Frame t+1 is frame t moved right by one pixel.
        let v = VideoTensor::from_fn([3, 1, 4, 6], |t, _, y, x| {
            ((x as i64 - t as i64) * 7 + y as i64 * 3) as f32 * 0.01
        });
        let flow = FlowField::constant_for(v.dims(), 0.0, 1.0);
        assert!(warping_error(&v, &flow).unwrap() < 1e-7);

        // Zero flow on the same video: mean horizontal neighbour difference = 0.07.
        let we = warping_error(&v, &FlowField::zeros_for(v.dims())).unwrap();
        assert!((we - 0.07).abs() < 1e-6, "{we}");
    }

    #[test]
    fn warping_all_invalid_is_error() {
        let v = VideoTensor::zeros([2, 1, 3, 3]);
        let flow = FlowField::constant_for(v.dims(), 0.0, 10.0);
        assert!(matches!(warping_error(&v, &flow), Err(Error::Metric(_))));
    }

    #[test]
    fn bilinear_half_pixel_shift() {
        let v = VideoTensor::from_fn(
            [2, 1, 1, 4],
            |t, _, _, x| if t == 0 { x as f32 } else { x as f32 - 0.5 },
        );
        let flow = FlowField::constant_for(v.dims(), 0.0, 0.5);
        assert!(warping_error(&v, &flow).unwrap() < 1e-7);
    }

    #[test]
    fn psnr_and_ssim_examples() {
        let a = VideoTensor::zeros([1, 1, 4, 4]);
        let b = VideoTensor::full([1, 1, 4, 4], 0.5);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let x = VideoTensor::randn([2, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(1)).clamp(0.0, 1.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = VideoTensor::full([1, 1, 16, 16], 0.5);
        let noisy = c
            .zip_map(
                &VideoTensor::randn(c.dims(), &mut ChaCha8Rng::seed_from_u64(2)),
                "n",
                |a, n| a + 1e-3 * n,
            )
            .unwrap();
        let s = ssim(&c, &noisy).unwrap();
        assert!(s < 1.0 && s > 0.9, "{s}");
    }

    #[test]
    fn ssim_small_frame_is_single_window() {
        let (_, starts) = window_starts(5);
        assert_eq!(starts, vec![0]);
        let (win, starts) = window_starts(16);
        assert_eq!((win, starts), (8, vec![0, 4, 8]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metric_symmetry_and_affine_invariance(
            seed in any::<u64>(), alpha in 0.1f64..5.0, beta in -2.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = VideoTensor::randn([2, 1, 9, 10], &mut rng).clamp(0.0, 1.0);
            let b = VideoTensor::randn([2, 1, 9, 10], &mut rng).clamp(0.0, 1.0);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let s1 = sharpness_proxy(&a);
            let s2 = sharpness_proxy(&a.scale(alpha).add_scalar(beta));
            prop_assert!((s1 - s2).abs() <= 1e-4 * s1.max(1e-3));
            let flow = FlowField::zeros_for(a.dims());
            prop_assert!(warping_error(&a, &flow).unwrap() >= 0.0);
        }
    }
}
