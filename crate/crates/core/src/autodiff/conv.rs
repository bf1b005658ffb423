use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Shape, Var};
use crate::real::Real;

/// Valid output range `[lo, hi)` for a tap displaced by `d` over length `n`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((n as isize) - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (ylo, yhi) = tap_range(h, dy);
                let (xlo, xhi) = tap_range(w, dx);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    if y < ylo || y >= yhi || xlo >= xhi {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let sy = (y as isize + dy) as usize;
                    dst[..xlo].iter_mut().for_each(|v| *v = T::zero());
                    dst[xhi..].iter_mut().for_each(|v| *v = T::zero());
                    let sx0 = (xlo as isize + dx) as usize;
                    dst[xlo..xhi].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (ylo, yhi) = tap_range(h, dy);
                let (xlo, xhi) = tap_range(w, dx);
                if xlo >= xhi {
                    continue;
                }
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (xlo as isize + dx) as usize;
                    let src = &row[y * w + xlo..y * w + xhi];
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
}

struct Conv2dOp<T> {
    cols: Option<Vec<T>>,
    w: Rc<Vec<T>>,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
}

impl<T: Real> Backward<T> for Conv2dOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let (cin, cout, k) = (self.cin, self.cout, self.k);
        let hw = self.h * self.wd;
        let kk = cin * k * k;
        if sink.wants(0) {
            let mut dcols = vec![T::zero(); kk * hw];
            T::gemm(kk, cout, hw, T::one(), &self.w, true, g, false, T::zero(), &mut dcols);
            let dx = sink.get(0).unwrap();
            col2im(&dcols, cin, self.h, self.wd, k, dx);
        }
        if let Some(dw) = sink.get(1) {
            let cols = self.cols.as_ref().expect("conv2d input was saved");
            T::gemm(cout, hw, kk, T::one(), g, false, cols, true, T::one(), dw);
        }
        if let Some(db) = sink.get(2) {
            for (o, d) in db.iter_mut().enumerate() {
                *d += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
}

struct DepthwiseOp<T> {
    x: Option<Rc<Vec<T>>>,
    w: Rc<Vec<T>>,
    c: usize,
    m: usize,
    h: usize,
    wd: usize,
    k: usize,
}

impl<T: Real> Backward<T> for DepthwiseOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let (c, m, h, w, k) = (self.c, self.m, self.h, self.wd, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        if let Some(dx) = sink.get(0) {
            for ch in 0..c {
                let taps = &self.w[ch * k * k..(ch + 1) * k * k];
                for img in 0..m {
                    let off = (ch * m + img) * hw;
                    let gp = &g[off..off + hw];
                    let dp = &mut dx[off..off + hw];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (ylo, yhi) = tap_range(h, dy);
                        for kx in 0..k {
                            let ddx = kx as isize - pad;
                            let (xlo, xhi) = tap_range(w, ddx);
                            let wt = taps[ky * k + kx];
                            for y in ylo..yhi {
                                let sy = (y as isize + dy) as usize;
                                let sx0 = (xlo as isize + ddx) as usize;
                                let src = &gp[y * w + xlo..y * w + xhi];
                                let dst = &mut dp[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += wt * s);
                            }
                        }
                    }
                }
            }
        }
        if let Some(dw) = sink.get(1) {
            let x = self.x.as_ref().expect("depthwise input was saved");
            for ch in 0..c {
                for img in 0..m {
                    let off = (ch * m + img) * hw;
                    let gp = &g[off..off + hw];
                    let xp = &x[off..off + hw];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (ylo, yhi) = tap_range(h, dy);
                        for kx in 0..k {
                            let ddx = kx as isize - pad;
                            let (xlo, xhi) = tap_range(w, ddx);
                            let mut acc = T::zero();
                            for y in ylo..yhi {
                                let sy = (y as isize + dy) as usize;
                                let sx0 = (xlo as isize + ddx) as usize;
                                let a = &gp[y * w + xlo..y * w + xhi];
                                let b = &xp[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                                acc += a.iter().zip(b).map(|(&p, &q)| p * q).sum::<T>();
                            }
                            dw[ch * k * k + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        if let Some(db) = sink.get(2) {
            let per = m * hw;
            for (ch, d) in db.iter_mut().enumerate() {
                *d += g[ch * per..(ch + 1) * per].iter().copied().sum::<T>();
            }
        }
    }
}

struct Conv1dOp<T> {
    x: Option<Rc<Vec<T>>>,
    w: Rc<Vec<T>>,
    c: usize,
    seg: usize,
    k: usize,
}

impl<T: Real> Backward<T> for Conv1dOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let (c, seg, k) = (self.c, self.seg, self.k);
        let pad = (k / 2) as isize;
        let s = g.len() / c;
        let nseg = s / seg;
        if let Some(dx) = sink.get(0) {
            for ch in 0..c {
                for sg in 0..nseg {
                    let base = ch * s + sg * seg;
                    for t in 0..k {
                        let d = t as isize - pad;
                        let (lo, hi) = tap_range(seg, d);
                        let wt = self.w[ch * k + t];
                        for i in lo..hi {
                            dx[base + (i as isize + d) as usize] += wt * g[base + i];
                        }
                    }
                }
            }
        }
        if let Some(dw) = sink.get(1) {
            let x = self.x.as_ref().expect("conv1d input was saved");
            for ch in 0..c {
                for sg in 0..nseg {
                    let base = ch * s + sg * seg;
                    for t in 0..k {
                        let d = t as isize - pad;
                        let (lo, hi) = tap_range(seg, d);
                        let mut acc = T::zero();
                        for i in lo..hi {
                            acc += g[base + i] * x[base + (i as isize + d) as usize];
                        }
                        dw[ch * k + t] += acc;
                    }
                }
            }
        }
        if let Some(db) = sink.get(2) {
            for (ch, d) in db.iter_mut().enumerate() {
                *d += g[ch * s..(ch + 1) * s].iter().copied().sum::<T>();
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    fn bias_or_zero(&self, b: Option<&Var<T>>, n: usize) -> Var<T> {
        match b {
            Some(b) => {
                assert_eq!(b.len(), n);
                b.clone()
            }
            None => self.zeros(&[n]),
        }
    }

    /// Dense 2-D convolution, stride 1, zero padding preserving `H×W`.
    ///
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]` with odd `k`.
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let wd = w.dims();
        let (cout, cin, k) = (wd[0], wd[1], wd[2]);
        assert!(k % 2 == 1 && wd.len() == 4 && wd[3] == k, "conv2d weight {:?}", w.shape);
        let xd = x.dims();
        assert!(xd.len() == 3 && xd[0] == cin, "conv2d input {:?} vs weight {:?}", x.shape, w.shape);
        if k == 1 {
            let w2 = w.reshape(&[cout, cin]);
            return self.linear(x, &w2, b);
        }
        let (h, wdt) = (xd[1], xd[2]);
        let hw = h * wdt;
        let kk = cin * k * k;
        let mut cols = vec![T::zero(); kk * hw];
        im2col(&x.data, cin, h, wdt, k, &mut cols);
        let mut out = vec![T::zero(); cout * hw];
        if let Some(b) = b {
            for (o, &bv) in b.data.iter().enumerate() {
                out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
        }
        T::gemm(cout, kk, hw, T::one(), &w.data, false, &cols, false, T::one(), &mut out);
        let bias = self.bias_or_zero(b, cout);
        let keep_cols = w.node.is_some();
        self.record(Shape::new(&[cout, h, wdt]), out, &[x, w, &bias], move || Conv2dOp {
            cols: keep_cols.then_some(cols),
            w: w.data.clone(),
            cin,
            cout,
            h,
            wd: wdt,
            k,
        })
    }

    /// Per-channel 2-D convolution with zero padding.
    ///
    /// `x: [C, H, W]` or `[C, M, H, W]` (M images sharing channel `c`'s kernel),
    /// `w: [C, k, k]`.
    pub fn depthwise_conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let xd = x.dims();
        let (c, m, h, wdt) = match *xd {
            [c, h, w] => (c, 1, h, w),
            [c, m, h, w] => (c, m, h, w),
            _ => panic!("depthwise_conv2d input {:?}", x.shape),
        };
        let k = w.dims()[1];
        assert!(k % 2 == 1 && w.len() == c * k * k, "depthwise weight {:?} for {c} channels", w.shape);
        let pad = (k / 2) as isize;
        let hw = h * wdt;
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let taps = &w.data[ch * k * k..(ch + 1) * k * k];
            let bv = b.map(|b| b.data[ch]).unwrap_or_else(T::zero);
            for img in 0..m {
                let off = (ch * m + img) * hw;
                let xp = &x.data[off..off + hw];
                let op = &mut out[off..off + hw];
                op.iter_mut().for_each(|v| *v = bv);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (ylo, yhi) = tap_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (xlo, xhi) = tap_range(wdt, dx);
                        let wt = taps[ky * k + kx];
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (xlo as isize + dx) as usize;
                            let src = &xp[sy * wdt + sx0..sy * wdt + sx0 + (xhi - xlo)];
                            let dst = &mut op[y * wdt + xlo..y * wdt + xhi];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += wt * s);
                        }
                    }
                }
            }
        }
        let bias = self.bias_or_zero(b, c);
        let keep_x = w.node.is_some();
        self.record(x.shape, out, &[x, w, &bias], || DepthwiseOp {
            x: keep_x.then(|| x.data.clone()),
            w: w.data.clone(),
            c,
            m,
            h,
            wd: wdt,
            k,
        })
    }

    /// Per-channel 1-D convolution along independent segments of length `seg`,
    /// centred taps with zero padding at every segment edge.
    ///
    /// `x: [C, S]` with `S` a multiple of `seg`, `w: [C, k]`.
    pub fn conv1d_segments(&self, x: &Var<T>, seg: usize, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let c = x.shape.channels();
        let s = x.shape.inner();
        assert!(seg > 0 && s % seg == 0, "conv1d: length {s} not a multiple of segment {seg}");
        let k = w.len() / c;
        assert!(k % 2 == 1 && w.len() == c * k, "conv1d weight {:?} for {c} channels", w.shape);
        let pad = (k / 2) as isize;
        let nseg = s / seg;
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let bv = b.map(|b| b.data[ch]).unwrap_or_else(T::zero);
            for sg in 0..nseg {
                let base = ch * s + sg * seg;
                out[base..base + seg].iter_mut().for_each(|v| *v = bv);
                for t in 0..k {
                    let d = t as isize - pad;
                    let (lo, hi) = tap_range(seg, d);
                    let wt = w.data[ch * k + t];
                    for i in lo..hi {
                        out[base + i] += wt * x.data[base + (i as isize + d) as usize];
                    }
                }
            }
        }
        let bias = self.bias_or_zero(b, c);
        let keep_x = w.node.is_some();
        self.record(x.shape, out, &[x, w, &bias], || Conv1dOp {
            x: keep_x.then(|| x.data.clone()),
            w: w.data.clone(),
            c,
            seg,
            k,
        })
    }
}
