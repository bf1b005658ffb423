use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::sample::{plane_slopes, taps};
use super::{Backward, GradSink, Graph, Shape, Var};
use crate::real::Real;

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    groups: usize,
}

impl Geometry {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn kk(&self) -> usize {
        self.k * self.k
    }
    /// Sampling position of tap `t` at pixel `p` for group `g`.
    #[inline]
    fn position<T: Real>(&self, offsets: &[T], g: usize, t: usize, p: usize) -> (T, T) {
        let hw = self.hw();
        let pad = (self.k / 2) as isize;
        let (y, x) = (p / self.w, p % self.w);
        let (ky, kx) = (t / self.k, t % self.k);
        let ch = (g * self.kk() + t) * 2;
        let ox = offsets[ch * hw + p];
        let oy = offsets[(ch + 1) * hw + p];
        (
            T::of((x as isize + kx as isize - pad) as f64) + ox,
            T::of((y as isize + ky as isize - pad) as f64) + oy,
        )
    }
}

fn deform_columns<T: Real>(geo: Geometry, x: &[T], offsets: &[T], mask: &[T]) -> Vec<T> {
    let (hw, kk) = (geo.hw(), geo.kk());
    let per_group = geo.cin / geo.groups;
    let mut cols = vec![T::zero(); geo.cin * kk * hw];
    for g in 0..geo.groups {
        for t in 0..kk {
            let mrow = &mask[(g * kk + t) * hw..(g * kk + t + 1) * hw];
            for p in 0..hw {
                let (px, py) = geo.position(offsets, g, t, p);
                let (tp, _, _) = taps(px, py, geo.h, geo.w);
                let m = mrow[p];
                for ci in g * per_group..(g + 1) * per_group {
                    let plane = &x[ci * hw..(ci + 1) * hw];
                    let v = tp.iter().fold(T::zero(), |acc, &(i, wt)| match i {
                        Some(i) => acc + wt * plane[i],
                        None => acc,
                    });
                    cols[(ci * kk + t) * hw + p] = m * v;
                }
            }
        }
    }
    cols
}

struct DeformOp<T> {
    geo: Geometry,
    x: Rc<Vec<T>>,
    offsets: Rc<Vec<T>>,
    mask: Rc<Vec<T>>,
    w: Rc<Vec<T>>,
    cols: Option<Vec<T>>,
}

impl<T: Real> Backward<T> for DeformOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let geo = self.geo;
        let (hw, kk) = (geo.hw(), geo.kk());
        let rows = geo.cin * kk;
        if let Some(dw) = sink.get(3) {
            let cols = self.cols.as_ref().expect("deform columns were saved");
            T::gemm(geo.cout, hw, rows, T::one(), g, false, cols, true, T::one(), dw);
        }
        if let Some(db) = sink.get(4) {
            for (o, d) in db.iter_mut().enumerate() {
                *d += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if !(sink.wants(0) || sink.wants(1) || sink.wants(2)) {
            return;
        }
        let mut dcols = vec![T::zero(); rows * hw];
        T::gemm(rows, geo.cout, hw, T::one(), &self.w, true, g, false, T::zero(), &mut dcols);
        let per_group = geo.cin / geo.groups;
        let want_x = sink.wants(0);
        let mut dx = if want_x { vec![T::zero(); self.x.len()] } else { Vec::new() };
        let mut doff = vec![T::zero(); self.offsets.len()];
        let mut dmask = vec![T::zero(); self.mask.len()];
        for grp in 0..geo.groups {
            for t in 0..kk {
                let mrow = (grp * kk + t) * hw;
                let och = (grp * kk + t) * 2;
                for p in 0..hw {
                    let (px, py) = geo.position(&self.offsets, grp, t, p);
                    let (tp, fx, fy) = taps(px, py, geo.h, geo.w);
                    let m = self.mask[mrow + p];
                    let (mut sx, mut sy, mut sm) = (T::zero(), T::zero(), T::zero());
                    for ci in grp * per_group..(grp + 1) * per_group {
                        let d = dcols[(ci * kk + t) * hw + p];
                        if d == T::zero() {
                            continue;
                        }
                        let plane = &self.x[ci * hw..(ci + 1) * hw];
                        let v = tp.iter().fold(T::zero(), |acc, &(i, wt)| match i {
                            Some(i) => acc + wt * plane[i],
                            None => acc,
                        });
                        sm += d * v;
                        let (slx, sly) = plane_slopes(plane, &tp, fx, fy);
                        sx += d * m * slx;
                        sy += d * m * sly;
                        if want_x {
                            for &(i, wt) in &tp {
                                if let Some(i) = i {
                                    dx[ci * hw + i] += d * m * wt;
                                }
                            }
                        }
                    }
                    dmask[mrow + p] += sm;
                    doff[och * hw + p] += sx;
                    doff[(och + 1) * hw + p] += sy;
                }
            }
        }
        for (slot, buf) in [(0usize, dx), (1, doff), (2, dmask)] {
            if let Some(d) = sink.get(slot) {
                d.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Modulated deformable convolution (stride 1, `k×k`, size preserving).
    ///
    /// * `x: [Cin, H, W]`, split into `groups` contiguous channel groups;
    /// * `offsets: [groups·k²·2, H, W]`, pairs `(dx, dy)` per group and tap;
    /// * `mask: [groups·k², H, W]`, multiplicative modulation per group and tap;
    /// * `w: [Cout, Cin, k, k]`.
    pub fn deform_conv2d(
        &self,
        x: &Var<T>,
        offsets: &Var<T>,
        mask: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        groups: usize,
    ) -> Var<T> {
        let xd = x.dims();
        let wd = w.dims();
        let (cin, h, wdt) = (xd[0], xd[1], xd[2]);
        let (cout, k) = (wd[0], wd[2]);
        assert!(wd[1] == cin && k % 2 == 1 && cin % groups == 0, "deform_conv2d {:?} with {:?}", x.shape, w.shape);
        let geo = Geometry { cin, cout, h, w: wdt, k, groups };
        assert_eq!(offsets.dims(), &[groups * k * k * 2, h, wdt]);
        assert_eq!(mask.dims(), &[groups * k * k, h, wdt]);
        let cols = deform_columns(geo, &x.data, &offsets.data, &mask.data);
        let hw = h * wdt;
        let mut out = vec![T::zero(); cout * hw];
        if let Some(b) = b {
            for (o, &bv) in b.data.iter().enumerate() {
                out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
        }
        T::gemm(cout, cin * k * k, hw, T::one(), &w.data, false, &cols, false, T::one(), &mut out);
        let bias = match b {
            Some(b) => b.clone(),
            None => self.zeros(&[cout]),
        };
        let keep_cols = w.node.is_some();
        self.record(Shape::new(&[cout, h, wdt]), out, &[x, offsets, mask, w, &bias], move || DeformOp {
            geo,
            x: x.data.clone(),
            offsets: offsets.data.clone(),
            mask: mask.data.clone(),
            w: w.data.clone(),
            cols: keep_cols.then_some(cols),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::Graph;
    use alloc::vec;

    const CIN: usize = 4;
    const COUT: usize = 3;
    const H: usize = 5;
    const W: usize = 4;
    const K: usize = 3;
    const G: usize = 2;

    fn inputs() -> (vec::Vec<f64>, vec::Vec<f64>, vec::Vec<f64>, vec::Vec<f64>) {
        let x = values(CIN * H * W, 51);
        let off: vec::Vec<f64> = values(G * K * K * 2 * H * W, 52).iter().map(|v| 0.37 + 0.9 * v).collect();
        let mask: vec::Vec<f64> = values(G * K * K * H * W, 53).iter().map(|v| 0.5 + 0.4 * v).collect();
        let w = values(COUT * CIN * K * K, 54);
        (x, off, mask, w)
    }

    #[test]
    fn zero_offsets_unit_mask_equal_plain_convolution() {
        let (x, _, _, w) = inputs();
        let g = Graph::<f64>::new();
        let xv = g.constant(&[CIN, H, W], x);
        let wv = g.constant(&[COUT, CIN, K, K], w);
        let d = g.deform_conv2d(&xv, &g.zeros(&[G * K * K * 2, H, W]), &g.full(&[G * K * K, H, W], 1.0), &wv, None, G);
        let c = g.conv2d(&xv, &wv, None);
        for (a, b) in d.data().iter().zip(c.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_for_every_input() {
        let (x, off, mask, w) = inputs();
        let run = |which: usize| {
            let (x, off, mask, w) = (x.clone(), off.clone(), mask.clone(), w.clone());
            let (dims, x0): (vec::Vec<usize>, vec::Vec<f64>) = match which {
                0 => (vec![CIN, H, W], x.clone()),
                1 => (vec![G * K * K * 2, H, W], off.clone()),
                2 => (vec![G * K * K, H, W], mask.clone()),
                _ => (vec![COUT, CIN, K, K], w.clone()),
            };
            check(&dims, &x0, move |g, v| {
                let xs = if which == 0 { v.clone() } else { g.constant(&[CIN, H, W], x.clone()) };
                let os = if which == 1 { v.clone() } else { g.constant(&[G * K * K * 2, H, W], off.clone()) };
                let ms = if which == 2 { v.clone() } else { g.constant(&[G * K * K, H, W], mask.clone()) };
                let ws = if which == 3 { v.clone() } else { g.constant(&[COUT, CIN, K, K], w.clone()) };
                probe(g, &g.deform_conv2d(&xs, &os, &ms, &ws, None, G), 55)
            })
        };
        for which in 0..4 {
            let (a, n) = run(which);
            assert_close(&a, &n, 1e-5);
        }
    }
}
