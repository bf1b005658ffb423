//! Frames, clips, flow fields and bicubic resampling.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{contract, Result};
use crate::real::Real;

/// An RGB image with values nominally in `[0, 1]`, stored planar as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        contract!(width > 0 && height > 0, "empty frame {width}×{height}");
        contract!(data.len() == 3 * width * height, "{} values for a {width}×{height} RGB frame", data.len());
        Ok(Frame { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Frame { width, height, data: vec![value; 3 * width * height] }
    }

    /// Builds a frame from `f(channel, y, x)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Frame { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Sub-image with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Frame> {
        contract!(
            x0 + width <= self.width && y0 + height <= self.height && width > 0 && height > 0,
            "crop {width}×{height}+{x0}+{y0} outside {}×{}",
            self.width,
            self.height
        );
        Ok(Frame::from_fn(width, height, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    pub fn clamped(mut self) -> Frame {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Bicubic resize of every plane.
    pub fn resize(&self, width: usize, height: usize) -> Frame {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            data.extend(resize_plane(self.plane(c), self.height, self.width, height, width));
        }
        Frame { width, height, data }
    }
}

/// An ordered, uniformly shaped sequence of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
}

impl Clip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        contract!(!frames.is_empty(), "empty clip");
        let (w, h) = (frames[0].width, frames[0].height);
        for (i, f) in frames.iter().enumerate() {
            contract!(f.width == w && f.height == h, "frame {i} is {}×{}, expected {w}×{h}", f.width, f.height);
        }
        Ok(Clip { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn reversed(&self) -> Clip {
        Clip { frames: self.frames.iter().rev().cloned().collect() }
    }
}

/// Per-pixel displacement in pixels, stored `[2, H, W]` (x plane then y plane).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField { width, height, data: vec![0.0; 2 * width * height] }
    }

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        contract!(data.len() == 2 * width * height, "{} values for a {width}×{height} flow field", data.len());
        Ok(FlowField { width, height, data })
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let n = width * height;
        let mut data = vec![dx; 2 * n];
        data[n..].iter_mut().for_each(|v| *v = dy);
        FlowField { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `(dx, dy)` at pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let n = self.width * self.height;
        let i = y * self.width + x;
        (self.data[i], self.data[n + i])
    }

    pub fn set(&mut self, x: usize, y: usize, d: (f32, f32)) {
        let n = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = d.0;
        self.data[n + i] = d.1;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = Float::abs(x);
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and normalised weights for each output coordinate along one axis.
///
/// Pixel centres are aligned; when shrinking, the kernel is stretched by the
/// inverse scale so it also low-passes. Borders replicate the edge sample.
pub fn resize_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = dst as f64 / src as f64;
    let (kscale, support) = if scale < 1.0 { (scale, 2.0 / scale) } else { (1.0, 2.0) };
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let w = cubic((i as f64 - center) * kscale);
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, src as isize - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resize of one `h×w` plane to `oh×ow`.
pub fn resize_plane<T: Real>(plane: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    assert_eq!(plane.len(), h * w);
    let wx = resize_weights(w, ow);
    let wy = resize_weights(h, oh);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for (x, taps) in wx.iter().enumerate() {
            rows[y * ow + x] = taps.iter().map(|&(i, wt)| src[i] * T::of(wt)).sum();
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for (y, taps) in wy.iter().enumerate() {
        let dst = &mut out[y * ow..(y + 1) * ow];
        for &(i, wt) in taps {
            let wt = T::of(wt);
            let src = &rows[i * ow..(i + 1) * ow];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * wt);
        }
    }
    out
}
