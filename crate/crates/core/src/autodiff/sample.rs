use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Shape, Var};
use crate::real::Real;

/// The four bilinear taps around `(x, y)` in an `h×w` plane.
///
/// Each tap is `(flat index or None when outside, weight)`, ordered
/// `(y0,x0), (y0,x1), (y1,x0), (y1,x1)`. Also returns the fractional parts.
#[inline]
pub(crate) fn taps<T: Real>(x: T, y: T, h: usize, w: usize) -> ([(Option<usize>, T); 4], T, T) {
    if !(x.is_finite() && y.is_finite()) {
        return ([(None, T::zero()); 4], T::zero(), T::zero());
    }
    let xf = x.floor();
    let yf = y.floor();
    let fx = x - xf;
    let fy = y - yf;
    let x0 = xf.to_isize().unwrap_or(isize::MIN / 2);
    let y0 = yf.to_isize().unwrap_or(isize::MIN / 2);
    let at = |yy: isize, xx: isize| -> Option<usize> {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
    };
    let one = T::one();
    (
        [
            (at(y0, x0), (one - fx) * (one - fy)),
            (at(y0, x0 + 1), fx * (one - fy)),
            (at(y0 + 1, x0), (one - fx) * fy),
            (at(y0 + 1, x0 + 1), fx * fy),
        ],
        fx,
        fy,
    )
}

/// Bilinear read of one plane with zero extension outside.
#[inline]
pub fn sample_plane<T: Real>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let (t, _, _) = taps(x, y, h, w);
    t.iter().fold(T::zero(), |acc, &(i, wt)| match i {
        Some(i) => acc + wt * plane[i],
        None => acc,
    })
}

/// Derivatives of the bilinear read with respect to `x` and `y`.
#[inline]
pub(crate) fn plane_slopes<T: Real>(plane: &[T], t: &[(Option<usize>, T); 4], fx: T, fy: T) -> (T, T) {
    let v = |k: usize| t[k].0.map(|i| plane[i]).unwrap_or_else(T::zero);
    let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
    let one = T::one();
    let dx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
    let dy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
    (dx, dy)
}

struct SampleOp<T> {
    f: Rc<Vec<T>>,
    coords: Rc<Vec<T>>,
    c: usize,
    h: usize,
    w: usize,
}

impl<T: Real> Backward<T> for SampleOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let q = self.coords.len() / 2;
        let (c, h, w) = (self.c, self.h, self.w);
        let hw = h * w;
        if let Some(df) = sink.get(0) {
            for p in 0..q {
                let (t, _, _) = taps(self.coords[p], self.coords[q + p], h, w);
                for ch in 0..c {
                    let gv = g[ch * q + p];
                    for &(i, wt) in &t {
                        if let Some(i) = i {
                            df[ch * hw + i] += gv * wt;
                        }
                    }
                }
            }
        }
        if let Some(dc) = sink.get(1) {
            for p in 0..q {
                let (t, fx, fy) = taps(self.coords[p], self.coords[q + p], h, w);
                let (mut sx, mut sy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let (dx, dy) = plane_slopes(&self.f[ch * hw..(ch + 1) * hw], &t, fx, fy);
                    let gv = g[ch * q + p];
                    sx += gv * dx;
                    sy += gv * dy;
                }
                dc[p] += sx;
                dc[q + p] += sy;
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Reads `f: [C, H, W]` at real positions `coords: [2, Ho, Wo]` (x then y, pixel
    /// units). Positions outside the map contribute zeros.
    pub fn bilinear_sample(&self, f: &Var<T>, coords: &Var<T>) -> Var<T> {
        let fd = f.dims();
        let cd = coords.dims();
        assert!(fd.len() == 3 && cd.len() == 3 && cd[0] == 2, "bilinear_sample {:?} at {:?}", f.shape, coords.shape);
        let (c, h, w) = (fd[0], fd[1], fd[2]);
        let q = cd[1] * cd[2];
        let hw = h * w;
        let mut out = vec![T::zero(); c * q];
        for p in 0..q {
            let (t, _, _) = taps(coords.data[p], coords.data[q + p], h, w);
            for ch in 0..c {
                let plane = &f.data[ch * hw..(ch + 1) * hw];
                out[ch * q + p] = t.iter().fold(T::zero(), |acc, &(i, wt)| match i {
                    Some(i) => acc + wt * plane[i],
                    None => acc,
                });
            }
        }
        self.record(Shape::new(&[c, cd[1], cd[2]]), out, &[f, coords], || SampleOp {
            f: f.data.clone(),
            coords: coords.data.clone(),
            c,
            h,
            w,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::Graph;
    use alloc::vec::Vec;

    fn interior_coords(n: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
        let r = values(2 * n, seed);
        let mut c = Vec::new();
        c.extend(r[..n].iter().map(|v| 0.6 + (v + 1.0) / 2.0 * (w as f64 - 2.2)));
        c.extend(r[n..].iter().map(|v| 0.6 + (v + 1.0) / 2.0 * (h as f64 - 2.2)));
        c
    }

    #[test]
    fn gradients_in_values_and_positions() {
        let (c, h, w) = (2, 5, 6);
        let f0 = values(c * h * w, 41);
        let c0 = interior_coords(6, h, w, 42);
        let (a, n) = check(&[c, h, w], &f0, |g, f| probe(g, &g.bilinear_sample(f, &g.constant(&[2, 2, 3], c0.clone())), 1));
        assert_close(&a, &n, 1e-6);
        let (a, n) = check(&[2, 2, 3], &c0, |g, xy| probe(g, &g.bilinear_sample(&g.constant(&[c, h, w], f0.clone()), xy), 1));
        assert_close(&a, &n, 1e-6);
    }

    #[test]
    fn integer_grid_reproduces_input_and_outside_is_zero() {
        let g = Graph::<f64>::new();
        let (h, w) = (3, 4);
        let f = g.constant(&[1, h, w], values(h * w, 5));
        let mut xy = Vec::new();
        for _y in 0..h {
            for x in 0..w {
                xy.push(x as f64);
            }
        }
        for y in 0..h {
            for _x in 0..w {
                xy.push(y as f64);
            }
        }
        let out = g.bilinear_sample(&f, &g.constant(&[2, h, w], xy));
        assert_eq!(out.data(), f.data());
        let far = g.bilinear_sample(&f, &g.constant(&[2, 1, 1], alloc::vec![-5.0, 10.0]));
        assert_eq!(far.data(), &[0.0]);
    }
}
