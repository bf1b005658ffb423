//! Image quality metrics, the Charbonnier loss and the flow consistency statistic.

use alloc::vec::Vec;

// Float supplies the math methods when std is not linked.
#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::sample_plane;
use crate::data::{estimate_flow, FlowEstimator};
use crate::error::{contract, Error, Result};
use crate::image::{Clip, FlowField, Frame};

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &Frame, b: &Frame) -> Result<()> {
    contract!(a.same_shape(b), "frames {}×{} and {}×{} differ", a.width(), a.height(), b.width(), b.height());
    Ok(())
}

/// Peak signal-to-noise ratio in dB for peak value 1.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_pair(a, b)?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the fully covered ("valid") region.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = alloc::vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = alloc::vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale structural similarity, averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    contract!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "frame {w}×{h} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window");
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter_valid(&x, h, w, &k), filter_valid(&y, h, w, &k));
        let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &k), filter_valid(&yy, h, w, &k), filter_valid(&xy, h, w, &k));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// Which Charbonnier reduction to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CharbonnierForm {
    /// Mean over elements of `sqrt(d² + ε²)`.
    #[default]
    PerPixel,
    /// `sqrt(‖d‖² + ε²)` over the whole tensor.
    Norm,
}

/// Default smoothing constant of the loss.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Charbonnier distance between two equally shaped value slices.
pub fn charbonnier(pred: &[f64], target: &[f64], eps: f64, form: CharbonnierForm) -> Result<f64> {
    contract!(pred.len() == target.len() && !pred.is_empty(), "lengths {} and {} differ", pred.len(), target.len());
    if !(eps > 0.0) {
        return Err(Error::Domain(alloc::format!("Charbonnier ε must be positive, got {eps}")));
    }
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, q)| p - q).collect();
    Ok(crate::autodiff::charbonnier_value(&diff, eps, form))
}

/// Charbonnier loss between two frames.
pub fn charbonnier_frames(pred: &Frame, gt: &Frame, eps: f64, form: CharbonnierForm) -> Result<f64> {
    check_pair(pred, gt)?;
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let q: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    charbonnier(&p, &q, eps, form)
}

/// Per-pixel forward–backward residual `‖o_f(p) + o_b(p + o_f(p))‖`.
pub fn consistency_map(fwd: &FlowField, bwd: &FlowField) -> Result<Vec<f64>> {
    contract!(fwd.width() == bwd.width() && fwd.height() == bwd.height(), "flow fields differ in size");
    let (w, h) = (fwd.width(), fwd.height());
    let n = w * h;
    let (bx, by) = bwd.data().split_at(n);
    let mut out = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = fwd.at(x, y);
            let (dx, dy) = (dx as f64, dy as f64);
            let (sx, sy) = (x as f64 + dx, y as f64 + dy);
            let rx = dx + sample_plane(bx, h, w, sx as f32, sy as f32) as f64;
            let ry = dy + sample_plane(by, h, w, sx as f32, sy as f32) as f64;
            out.push((rx * rx + ry * ry).sqrt());
        }
    }
    Ok(out)
}

/// Mean forward–backward consistency error over all adjacent frame pairs.
pub fn flow_consistency_error(clip: &Clip, est: FlowEstimator) -> Result<f64> {
    contract!(clip.len() >= 2, "flow consistency needs at least two frames, got {}", clip.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in clip.frames().windows(2) {
        let fwd = estimate_flow(&pair[0], &pair[1], est)?;
        let bwd = estimate_flow(&pair[1], &pair[0], est)?;
        let m = consistency_map(&fwd, &bwd)?;
        count += m.len();
        sum += m.iter().sum::<f64>();
    }
    Ok(sum / count as f64)
}

/// Per-frame and clip-mean quality numbers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricReport {
    pub fn evaluate(sr: &Clip, gt: &Clip) -> Result<Self> {
        contract!(sr.len() == gt.len(), "{} output frames for {} reference frames", sr.len(), gt.len());
        let mut r = MetricReport::default();
        for (a, b) in sr.frames().iter().zip(gt.frames()) {
            r.psnr.push(psnr(a, b)?);
            r.ssim.push(ssim(a, b)?);
        }
        Ok(r)
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_psnr_and_sentinel() {
        let z = Frame::filled(4, 4, 0.0);
        let h = Frame::filled(4, 4, 0.5);
        assert!((psnr(&z, &h).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_of_self_and_inverse() {
        let a = Frame::from_fn(24, 20, |c, y, x| ((x / 3 + y / 2 + c) % 2) as f32);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let inv = Frame::from_fn(24, 20, |c, y, x| 1.0 - a.get(c, y, x));
        assert!(ssim(&a, &inv).unwrap() < 0.1);
        assert!(ssim(&Frame::filled(8, 8, 0.0), &Frame::filled(8, 8, 0.0)).is_err());
    }

    #[test]
    fn charbonnier_of_equal_inputs_is_eps() {
        let v = [0.1, 0.7, 0.3];
        assert_eq!(charbonnier(&v, &v, 1e-3, CharbonnierForm::PerPixel).unwrap(), 1e-3);
        assert_eq!(charbonnier(&v, &v, 1e-3, CharbonnierForm::Norm).unwrap(), 1e-3);
        assert!(matches!(charbonnier(&v, &v, 0.0, CharbonnierForm::PerPixel), Err(Error::Domain(_))));
    }

    #[test]
    fn inverse_constant_flows_are_consistent() {
        let f = FlowField::constant(6, 5, 1.0, -2.0);
        let b = FlowField::constant(6, 5, -1.0, 2.0);
        let m = consistency_map(&f, &b).unwrap();
        // Inside the map the residual vanishes; samples that leave it read zero.
        assert_eq!(m[2 * 6 + 2], 0.0);
    }
}
