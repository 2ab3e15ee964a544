//! Dense `T x C x H x W` video/latent tensors.
//!
//! Storage is `f32`, row-major within a frame and ordered `T -> C -> H -> W`.
//! Reductions (dot products, norms, means) accumulate in `f64`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `(frames, channels, rows, cols)`.
pub type Dims = [usize; 4];

/// Number of elements for `dims`, or `None` on overflow.
pub fn checked_len(dims: Dims) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    dims: Dims,
    data: Vec<f32>,
}

impl VideoTensor {
    /// Builds a tensor, validating the length and that every value is finite.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(dims).ok_or(Error::DimOverflow(dims))?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("VideoTensor::new"));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_parts(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(checked_len(dims), Some(data.len()));
        Self { dims, data }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        let len = checked_len(dims).expect("tensor dims overflow");
        Self::from_parts(dims, vec![value; len])
    }

    /// Builds a tensor by evaluating `f(t, c, h, w)` at every index.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [t_n, c_n, h_n, w_n] = dims;
        let mut data = Vec::with_capacity(checked_len(dims).expect("tensor dims overflow"));
        for t in 0..t_n {
            for c in 0..c_n {
                for h in 0..h_n {
                    for w in 0..w_n {
                        data.push(f(t, c, h, w));
                    }
                }
            }
        }
        Self::from_parts(dims, data)
    }

    /// Standard-normal samples.
    pub fn randn<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let len = checked_len(dims).expect("tensor dims overflow");
        let data = (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self::from_parts(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, c_n, h_n, w_n] = self.dims;
        ((t * c_n + c) * h_n + h) * w_n + w
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(t, c, h, w)]
    }

    pub fn frame_data(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// A single-frame tensor holding frame `t`.
    pub fn frame(&self, t: usize) -> VideoTensor {
        let [_, c, h, w] = self.dims;
        Self::from_parts([1, c, h, w], self.frame_data(t).to_vec())
    }

    /// Frames `start..end` as a new tensor.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<VideoTensor> {
        if start > end || end > self.frames() {
            return Err(Error::Shape(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        let n = self.frame_len();
        let [_, c, h, w] = self.dims;
        Ok(Self::from_parts(
            [end - start, c, h, w],
            self.data[start * n..end * n].to_vec(),
        ))
    }

    /// Concatenates along the frame axis.
    pub fn concat_frames(parts: &[VideoTensor]) -> Result<VideoTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut frames = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "frame dims {:?} differ from {:?}",
                    &p.dims[1..],
                    [c, h, w]
                )));
            }
            frames += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts([frames, c, h, w], data))
    }

    /// Repeats a single-frame tensor `frames` times.
    pub fn repeat_frame(&self, frames: usize) -> Result<VideoTensor> {
        if self.frames() != 1 {
            return Err(Error::Shape(format!(
                "repeat_frame needs one frame, got {}",
                self.frames()
            )));
        }
        let [_, c, h, w] = self.dims;
        let mut data = Vec::with_capacity(self.len() * frames);
        for _ in 0..frames {
            data.extend_from_slice(&self.data);
        }
        Ok(Self::from_parts([frames, c, h, w], data))
    }

    pub fn ensure_same_dims(&self, other: &VideoTensor, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> VideoTensor {
        Self::from_parts(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(
        &self,
        other: &VideoTensor,
        what: &str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<VideoTensor> {
        self.ensure_same_dims(other, what)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.dims, data))
    }

    /// `(1 - w) * a + w * b`. `w = 0` and `w = 1` return the inputs bit-exact.
    pub fn lerp(a: &VideoTensor, b: &VideoTensor, w: f64) -> Result<VideoTensor> {
        a.ensure_same_dims(b, "lerp")?;
        if w == 0.0 {
            return Ok(a.clone());
        }
        if w == 1.0 {
            return Ok(b.clone());
        }
        let keep = 1.0 - w;
        Ok(Self::from_parts(
            a.dims,
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| (keep * x as f64 + w * y as f64) as f32)
                .collect(),
        ))
    }

    pub fn add(&self, other: &VideoTensor) -> Result<VideoTensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &VideoTensor) -> Result<VideoTensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> VideoTensor {
        self.map(|v| (v as f64 * s) as f32)
    }

    /// `a * self + b * other`, evaluated in f64 per element.
    pub fn affine_combine(&self, a: f64, other: &VideoTensor, b: f64) -> Result<VideoTensor> {
        self.zip_map(other, "affine_combine", |x, y| {
            (a * x as f64 + b * y as f64) as f32
        })
    }

    pub fn add_scalar(&self, s: f64) -> VideoTensor {
        self.map(|v| (v as f64 + s) as f32)
    }

    pub fn dot(&self, other: &VideoTensor) -> Result<f64> {
        self.ensure_same_dims(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &VideoTensor) -> Result<f64> {
        self.ensure_same_dims(other, "dist_sq")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum())
    }

    /// `||self - other|| / ||other||`.
    pub fn rel_err(&self, reference: &VideoTensor) -> Result<f64> {
        let num = self.dist_sq(reference)?.sqrt();
        let den = reference.norm();
        Ok(if den == 0.0 { num } else { num / den })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
    }

    pub fn max_abs_diff(&self, other: &VideoTensor) -> Result<f64> {
        self.ensure_same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs())))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> VideoTensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, what: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Same data with new dims of equal element count.
    pub fn reshape(self, dims: Dims) -> Result<VideoTensor> {
        if checked_len(dims) != Some(self.data.len()) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Self::from_parts(dims, self.data))
    }
}

/// Per-pixel `(dy, dx)` displacements between consecutive frames, dims `(T-1, 2, H, W)`.
///
/// `flow[t]` lives on the grid of frame `t + 1`: the content at pixel `q` of
/// frame `t + 1` came from `q - flow[t](q)` in frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(VideoTensor);

impl FlowField {
    pub fn new(tensor: VideoTensor) -> Result<Self> {
        if tensor.channels() != 2 {
            return Err(Error::Shape(format!(
                "flow needs 2 channels (dy, dx), got dims {:?}",
                tensor.dims()
            )));
        }
        Ok(Self(tensor))
    }

    /// Zero flow for a video with dims `video`.
    pub fn zeros_for(video: Dims) -> Self {
        let [t, _, h, w] = video;
        Self(VideoTensor::zeros([t.saturating_sub(1), 2, h, w]))
    }

    /// Spatially and temporally constant flow.
    pub fn constant_for(video: Dims, dy: f32, dx: f32) -> Self {
        let [t, _, h, w] = video;
        Self(VideoTensor::from_fn(
            [t.saturating_sub(1), 2, h, w],
            |_, c, _, _| if c == 0 { dy } else { dx },
        ))
    }

    pub fn pairs(&self) -> usize {
        self.0.frames()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize) -> (f32, f32) {
        (self.0.get(t, 0, y, x), self.0.get(t, 1, y, x))
    }

    pub fn tensor(&self) -> &VideoTensor {
        &self.0
    }

    pub fn into_tensor(self) -> VideoTensor {
        self.0
    }

    /// Checks that this flow annotates a video with dims `video`.
    pub fn check_video(&self, video: Dims) -> Result<()> {
        let [t, _, h, w] = video;
        if t < 2 || self.0.dims() != [t - 1, 2, h, w] {
            return Err(Error::Shape(format!(
                "flow dims {:?} do not annotate video dims {video:?}",
                self.0.dims()
            )));
        }
        Ok(())
    }

    /// Flow for frames `start..end` of the annotated video.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<FlowField> {
        if end <= start {
            return Err(Error::Shape("empty flow slice".into()));
        }
        Ok(Self(self.0.slice_frames(start, end - 1)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lerp_endpoints_are_bit_exact() {
        let a = VideoTensor::from_fn([2, 1, 2, 2], |t, _, h, w| {
            if t == 0 && h == 0 && w == 0 {
                -0.0
            } else {
                (t + h * 3 + w) as f32 * 0.37 - 1.0
            }
        });
        let b = a.map(|v| v * 2.0 + 1.0);
        let l0 = VideoTensor::lerp(&a, &b, 0.0).unwrap();
        let l1 = VideoTensor::lerp(&a, &b, 1.0).unwrap();
        let bits = |t: &VideoTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&l0), bits(&a));
        assert_eq!(bits(&l1), bits(&b));
    }

    #[test]
    fn lerp_midpoint() {
        let a = VideoTensor::full([1, 1, 2, 2], 2.0);
        let b = VideoTensor::full([1, 1, 2, 2], 4.0);
        let m = VideoTensor::lerp(&a, &b, 0.5).unwrap();
        assert!(m.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn lerp_rejects_mismatched_dims() {
        let a = VideoTensor::zeros([1, 1, 2, 2]);
        let b = VideoTensor::zeros([1, 1, 2, 3]);
        assert!(matches!(VideoTensor::lerp(&a, &b, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn new_rejects_nan_and_bad_len() {
        assert!(VideoTensor::new([1, 1, 1, 2], vec![0.0]).is_err());
        assert!(VideoTensor::new([1, 1, 1, 1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn flow_checks_video_dims() {
        let f = FlowField::zeros_for([3, 1, 4, 4]);
        assert!(f.check_video([3, 3, 4, 4]).is_ok());
        assert!(f.check_video([4, 3, 4, 4]).is_err());
    }

    proptest! {
        #[test]
        fn lerp_is_bounded(
            vals in proptest::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..64),
            w in 0.0f64..=1.0,
        ) {
            let n = vals.len();
            let a = VideoTensor::new([1, 1, 1, n], vals.iter().map(|p| p.0).collect()).unwrap();
            let b = VideoTensor::new([1, 1, 1, n], vals.iter().map(|p| p.1).collect()).unwrap();
            let l = VideoTensor::lerp(&a, &b, w).unwrap();
            for ((&x, &y), &z) in a.data().iter().zip(b.data()).zip(l.data()) {
                prop_assert!(z >= x.min(y) && z <= x.max(y));
            }
        }
    }
}
