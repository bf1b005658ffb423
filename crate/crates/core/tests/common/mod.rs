//! Reference implementations written directly from the definitions, shared by the test targets.
#![allow(dead_code)]

use medvsr_core::image::Frame;
use medvsr_core::ssm::{Discretization, SSMParams};

/// Step-by-step recurrence, one channel at a time, reading out through `c`.
pub fn reference_scan(p: &SSMParams<f64>, x: &[f64], c: &[f64]) -> Vec<f64> {
    let (d, n) = (p.a.len(), p.state);
    let l = x.len() / d;
    let mut y = vec![0.0; d * l];
    for ch in 0..d {
        let mut h = vec![0.0; n];
        for i in 0..l {
            let dt = p.delta[ch * l + i];
            let a_bar = (dt * p.a[ch]).exp();
            let coef = match p.mode {
                Discretization::Simplified => dt,
                Discretization::ZeroOrderHold => (a_bar - 1.0) / p.a[ch],
            };
            for k in 0..n {
                h[k] = a_bar * h[k] + coef * p.b[k * l + i] * x[ch * l + i];
            }
            y[ch * l + i] = (0..n).map(|k| c[k * l + i] * h[k]).sum();
        }
    }
    y
}

pub fn psnr_direct(a: &Frame, b: &Frame) -> f64 {
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / n;
    -10.0 * mse.log10()
}

/// SSIM with an explicit 11×11 Gaussian (σ = 1.5) window over every fully covered position.
pub fn ssim_direct(a: &Frame, b: &Frame) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    for c in 0..3 {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let mut acc = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / total;
                        let (p, q) = (pa[(y0 + i) * w + x0 + j] as f64, pb[(y0 + i) * w + x0 + j] as f64);
                        mx += k * p;
                        my += k * q;
                        sxx += k * p * p;
                        syy += k * q * q;
                        sxy += k * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        sum += acc / ((h - 10) * (w - 10)) as f64;
    }
    sum / 3.0
}

/// Sample standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
