//! Orthonormal Haar block codecs standing in for 2D and 3D autoencoders.
//!
//! Each `b x b` spatial block (times `g` frames for the 3D codec) is mapped to
//! `b^2 g` coefficients stored as extra channels. Coefficients are ranked in a
//! fixed low-to-high frequency order and everything past `keep_ratio` is zeroed
//! on encode. Decode is the plain inverse transform, so `decode` is the exact
//! transpose of the full (untruncated) forward transform.

use crate::error::{Error, Result};
use crate::tensor::{Dims, VideoTensor};

/// Latent-space autoencoder interface used by guidance, fusion and search.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, x: &VideoTensor) -> Result<VideoTensor>;
    fn decode(&self, z: &VideoTensor) -> Result<VideoTensor>;
    /// `D^T`: the forward transform without truncation.
    fn decode_adjoint(&self, x: &VideoTensor) -> Result<VideoTensor>;
    /// `E^T`: zero the dropped coefficients, then invert.
    fn encode_adjoint(&self, z: &VideoTensor) -> Result<VideoTensor>;
    fn latent_dims(&self, pixel: Dims) -> Result<Dims>;
    fn pixel_dims(&self, latent: Dims) -> Result<Dims>;
}

/// Orthonormal Haar matrix of size `n` (a power of two), rows low to high frequency.
fn haar_matrix(n: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![1.0]];
    }
    let half = haar_matrix(n / 2);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut rows = Vec::with_capacity(n);
    for r in &half {
        rows.push(r.iter().flat_map(|&v| [v * s, v * s]).collect());
    }
    for i in 0..n / 2 {
        let mut r = vec![0.0; n];
        r[2 * i] = s;
        r[2 * i + 1] = -s;
        rows.push(r);
    }
    rows
}

#[derive(Clone, Debug)]
struct BlockTransform {
    block: usize,
    group: usize,
    keep: usize,
    /// `basis[k][(i * b + j) * b + l]` for temporal offset i, row j, col l.
    basis: Vec<Vec<f64>>,
}

impl BlockTransform {
    fn new(block: usize, group: usize, keep_ratio: f64) -> Result<Self> {
        if block == 0 || !block.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "codec block {block} must be a power of two"
            )));
        }
        if group == 0 || !group.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "codec temporal group {group} must be a power of two"
            )));
        }
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_ratio {keep_ratio} outside (0, 1]"
            )));
        }
        let hs = haar_matrix(block);
        let ht = haar_matrix(group);
        let mut order: Vec<(usize, usize, usize)> = (0..group)
            .flat_map(|ft| (0..block).flat_map(move |u| (0..block).map(move |v| (ft, u, v))))
            .collect();
        order.sort_by_key(|&(ft, u, v)| (ft + u + v, ft, u, v));
        let basis = order
            .iter()
            .map(|&(ft, u, v)| {
                let mut e = Vec::with_capacity(group * block * block);
                for &a in &ht[ft][..group] {
                    for j in 0..block {
                        for l in 0..block {
                            e.push(a * hs[u][j] * hs[v][l]);
                        }
                    }
                }
                e
            })
            .collect();
        let n = group * block * block;
        let keep = ((keep_ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            block,
            group,
            keep: keep.min(n),
            basis,
        })
    }

    fn coeffs(&self) -> usize {
        self.basis.len()
    }

    fn latent_dims(&self, [t, c, h, w]: Dims) -> Result<Dims> {
        let (b, g) = (self.block, self.group);
        if h % b != 0 || w % b != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} frame not divisible by codec block {b}"
            )));
        }
        if t % g != 0 {
            return Err(Error::Shape(format!(
                "{t} frames not divisible by codec temporal group {g}"
            )));
        }
        Ok([t / g, c * self.coeffs(), h / b, w / b])
    }

    fn pixel_dims(&self, [t, c, h, w]: Dims) -> Result<Dims> {
        let n = self.coeffs();
        if c % n != 0 {
            return Err(Error::Shape(format!(
                "latent channels {c} not a multiple of {n} coefficients"
            )));
        }
        Ok([t * self.group, c / n, h * self.block, w * self.block])
    }

    fn forward(&self, x: &VideoTensor, truncate: bool) -> Result<VideoTensor> {
        let [lt, lc, lh, lw] = self.latent_dims(x.dims())?;
        let (b, g, n) = (self.block, self.group, self.coeffs());
        let live = if truncate { self.keep } else { n };
        let mut out = VideoTensor::zeros([lt, lc, lh, lw]);
        let mut patch = vec![0.0f64; n];
        for ti in 0..lt {
            for c in 0..x.channels() {
                for yi in 0..lh {
                    for xi in 0..lw {
                        let mut p = 0;
                        for i in 0..g {
                            for j in 0..b {
                                for l in 0..b {
                                    patch[p] = x.get(ti * g + i, c, yi * b + j, xi * b + l) as f64;
                                    p += 1;
                                }
                            }
                        }
                        for (k, e) in self.basis.iter().take(live).enumerate() {
                            let v: f64 = e.iter().zip(&patch).map(|(a, b)| a * b).sum();
                            let idx = out.index(ti, c * n + k, yi, xi);
                            out.data_mut()[idx] = v as f32;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn inverse(&self, z: &VideoTensor, truncate: bool) -> Result<VideoTensor> {
        let dims = self.pixel_dims(z.dims())?;
        let (b, g, n) = (self.block, self.group, self.coeffs());
        let live = if truncate { self.keep } else { n };
        let [lt, _, lh, lw] = z.dims();
        let mut out = VideoTensor::zeros(dims);
        let mut patch = vec![0.0f64; n];
        for ti in 0..lt {
            for c in 0..dims[1] {
                for yi in 0..lh {
                    for xi in 0..lw {
                        patch.iter_mut().for_each(|v| *v = 0.0);
                        for (k, e) in self.basis.iter().take(live).enumerate() {
                            let coef = z.get(ti, c * n + k, yi, xi) as f64;
                            for (p, &ev) in patch.iter_mut().zip(e) {
                                *p += coef * ev;
                            }
                        }
                        let mut p = 0;
                        for i in 0..g {
                            for j in 0..b {
                                for l in 0..b {
                                    let idx = out.index(ti * g + i, c, yi * b + j, xi * b + l);
                                    out.data_mut()[idx] = patch[p] as f32;
                                    p += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Per-frame codec: latent dims `(T, C b^2, H/b, W/b)`.
#[derive(Clone, Debug)]
pub struct Codec2D {
    inner: BlockTransform,
    keep_ratio: f64,
}

impl Codec2D {
    pub fn new(block: usize, keep_ratio: f64) -> Result<Self> {
        Ok(Self {
            inner: BlockTransform::new(block, 1, keep_ratio)?,
            keep_ratio,
        })
    }

    pub fn lossless(block: usize) -> Self {
        Self::new(block, 1.0).expect("valid block")
    }

    pub fn block(&self) -> usize {
        self.inner.block
    }

    pub fn keep_ratio(&self) -> f64 {
        self.keep_ratio
    }

    /// Number of coefficients retained per block.
    pub fn kept(&self) -> usize {
        self.inner.keep
    }
}

/// Spatiotemporal codec: latent dims `(T/g, C b^2 g, H/b, W/b)`.
#[derive(Clone, Debug)]
pub struct Codec3D {
    inner: BlockTransform,
    keep_ratio: f64,
}

impl Codec3D {
    pub fn new(block: usize, group: usize, keep_ratio: f64) -> Result<Self> {
        Ok(Self {
            inner: BlockTransform::new(block, group, keep_ratio)?,
            keep_ratio,
        })
    }

    pub fn lossless(block: usize, group: usize) -> Self {
        Self::new(block, group, 1.0).expect("valid block and group")
    }

    pub fn block(&self) -> usize {
        self.inner.block
    }

    pub fn group(&self) -> usize {
        self.inner.group
    }

    pub fn keep_ratio(&self) -> f64 {
        self.keep_ratio
    }

    pub fn kept(&self) -> usize {
        self.inner.keep
    }
}

macro_rules! impl_codec {
    ($ty:ty) => {
        impl LatentCodec for $ty {
            fn encode(&self, x: &VideoTensor) -> Result<VideoTensor> {
                self.inner.forward(x, true)
            }
            fn decode(&self, z: &VideoTensor) -> Result<VideoTensor> {
                self.inner.inverse(z, false)
            }
            fn decode_adjoint(&self, x: &VideoTensor) -> Result<VideoTensor> {
                self.inner.forward(x, false)
            }
            fn encode_adjoint(&self, z: &VideoTensor) -> Result<VideoTensor> {
                self.inner.inverse(z, true)
            }
            fn latent_dims(&self, pixel: Dims) -> Result<Dims> {
                self.inner.latent_dims(pixel)
            }
            fn pixel_dims(&self, latent: Dims) -> Result<Dims> {
                self.inner.pixel_dims(latent)
            }
        }
    };
}

impl_codec!(Codec2D);
impl_codec!(Codec3D);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_video(dims: Dims, seed: u64) -> VideoTensor {
        VideoTensor::randn(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn haar_rows_are_orthonormal() {
        for n in [1, 2, 4, 8] {
            let h = haar_matrix(n);
            for i in 0..n {
                for j in 0..n {
                    let d: f64 = h[i].iter().zip(&h[j]).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn latent_dims() {
        let c2 = Codec2D::lossless(2);
        assert_eq!(c2.latent_dims([8, 3, 32, 32]).unwrap(), [8, 12, 16, 16]);
        let c3 = Codec3D::lossless(2, 2);
        assert_eq!(c3.latent_dims([8, 3, 32, 32]).unwrap(), [4, 24, 16, 16]);
        assert!(c3.latent_dims([7, 3, 32, 32]).is_err());
        assert!(c2.latent_dims([8, 3, 31, 32]).is_err());
    }

    #[test]
    fn lossless_round_trips() {
        let x = rand_video([4, 3, 8, 8], 5);
        let c2 = Codec2D::lossless(2);
        assert!(
            c2.decode(&c2.encode(&x).unwrap())
                .unwrap()
                .max_abs_diff(&x)
                .unwrap()
                <= 1e-5
        );
        let c4 = Codec2D::lossless(4);
        assert!(
            c4.decode(&c4.encode(&x).unwrap())
                .unwrap()
                .max_abs_diff(&x)
                .unwrap()
                <= 1e-5
        );
        let c3 = Codec3D::lossless(2, 2);
        assert!(
            c3.decode(&c3.encode(&x).unwrap())
                .unwrap()
                .max_abs_diff(&x)
                .unwrap()
                <= 1e-5
        );
    }

    #[test]
    fn constant_image_survives_heavy_truncation() {
        let x = VideoTensor::full([2, 1, 4, 4], 0.7);
        let c2 = Codec2D::new(2, 0.25).unwrap();
        assert_eq!(c2.kept(), 1);
        assert!(
            c2.decode(&c2.encode(&x).unwrap())
                .unwrap()
                .max_abs_diff(&x)
                .unwrap()
                <= 1e-6
        );
        let c3 = Codec3D::new(2, 2, 0.125).unwrap();
        assert!(
            c3.decode(&c3.encode(&x).unwrap())
                .unwrap()
                .max_abs_diff(&x)
                .unwrap()
                <= 1e-6
        );
    }

    #[test]
    fn truncation_does_not_add_energy() {
        let x = rand_video([2, 3, 8, 8], 7);
        let c = Codec2D::new(2, 0.25).unwrap();
        let y = c.decode(&c.encode(&x).unwrap()).unwrap();
        assert!(y.norm_sq() <= x.norm_sq());
        assert!(y.norm_sq() < x.norm_sq() * 0.5);
    }

    #[test]
    fn g1_codec3d_matches_codec2d_layout() {
        let x = rand_video([3, 2, 4, 4], 2);
        let a = Codec2D::lossless(2).encode(&x).unwrap();
        let b = Codec3D::lossless(2, 1).encode(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adjoints_are_transposes() {
        let c = Codec3D::new(2, 2, 0.75).unwrap();
        let x = rand_video([4, 1, 4, 4], 3);
        let z = rand_video(c.latent_dims(x.dims()).unwrap(), 4);
        // <E x, z> == <x, E^T z>
        let lhs = c.encode(&x).unwrap().dot(&z).unwrap();
        let rhs = x.dot(&c.encode_adjoint(&z).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0));
        // <D z, x> == <z, D^T x>
        let lhs = c.decode(&z).unwrap().dot(&x).unwrap();
        let rhs = z.dot(&c.decode_adjoint(&x).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn orthonormal_linear_and_idempotent(
            seed in any::<u64>(),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            keep in prop_oneof![Just(1.0), Just(0.75), Just(0.5), Just(0.25)],
        ) {
            let c = Codec3D::new(2, 2, keep).unwrap();
            let x = rand_video([4, 2, 4, 6], seed);
            let y = rand_video([4, 2, 4, 6], seed.wrapping_add(1));
            let ex = c.encode(&x).unwrap();
            let ey = c.encode(&y).unwrap();
            if keep == 1.0 {
                let lhs = ex.dot(&ey).unwrap();
                let rhs = x.dot(&y).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-4 * rhs.abs().max(1.0));
            }
            let again = c.encode(&c.decode(&ex).unwrap()).unwrap();
            prop_assert!(again.max_abs_diff(&ex).unwrap() <= 1e-5);
            let combo = x.affine_combine(a, &y, b).unwrap();
            let lin = ex.affine_combine(a, &ey, b).unwrap();
            prop_assert!(c.encode(&combo).unwrap().max_abs_diff(&lin).unwrap() <= 1e-5);
        }
    }
}
