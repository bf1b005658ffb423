use alloc::rc::Rc;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Shape, Var};
use crate::real::Real;

struct GatherOp {
    idx: Rc<Vec<u32>>,
    p_in: usize,
}

impl<T: Real> Backward<T> for GatherOp {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let q = self.idx.len();
        let c = g.len() / q;
        if let Some(dx) = sink.get(0) {
            for ch in 0..c {
                let src = &g[ch * q..(ch + 1) * q];
                let dst = &mut dx[ch * self.p_in..(ch + 1) * self.p_in];
                for (&i, &v) in self.idx.iter().zip(src) {
                    dst[i as usize] += v;
                }
            }
        }
    }
}

struct ConcatOp {
    sizes: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatOp {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let mut off = 0;
        for (i, &n) in self.sizes.iter().enumerate() {
            if let Some(d) = sink.get(i) {
                d.iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a += b);
            }
            off += n;
        }
    }
}

struct SliceOp {
    start: usize,
}

impl<T: Real> Backward<T> for SliceOp {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(d) = sink.get(0) {
            d[self.start..self.start + g.len()].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
}

struct ShuffleOp {
    // out[i] = in[perm[i]]
    perm: Vec<u32>,
}

impl<T: Real> Backward<T> for ShuffleOp {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(d) = sink.get(0) {
            for (&p, &v) in self.perm.iter().zip(g) {
                d[p as usize] += v;
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// `out[c, q] = x[c, idx[q]]` over the flattened non-channel positions.
    pub fn gather_positions(&self, x: &Var<T>, idx: &Rc<Vec<u32>>, out_dims: &[usize]) -> Var<T> {
        let c = x.shape.channels();
        let p_in = x.shape.inner();
        let shape = Shape::new(out_dims);
        assert!(shape.channels() == c && shape.inner() == idx.len(), "gather to {:?} from {:?}", out_dims, x.shape);
        let q = idx.len();
        let mut out = Vec::with_capacity(c * q);
        for ch in 0..c {
            let plane = &x.data[ch * p_in..(ch + 1) * p_in];
            out.extend(idx.iter().map(|&i| plane[i as usize]));
        }
        self.record(shape, out, &[x], || GatherOp { idx: idx.clone(), p_in })
    }

    /// Stacks tensors along the channel dimension; trailing sizes must agree.
    pub fn concat_channels(&self, xs: &[&Var<T>]) -> Var<T> {
        assert!(!xs.is_empty());
        let inner = xs[0].shape.inner();
        let mut c = 0;
        let mut out = Vec::with_capacity(xs.iter().map(|x| x.len()).sum());
        for x in xs {
            assert_eq!(x.shape.inner(), inner, "concat {:?} with {:?}", x.shape, xs[0].shape);
            c += x.shape.channels();
            out.extend_from_slice(&x.data);
        }
        let shape = xs[0].shape.with_channels(c);
        let sizes = xs.iter().map(|x| x.len()).collect();
        self.record(shape, out, xs, || ConcatOp { sizes })
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, x: &Var<T>, start: usize, len: usize) -> Var<T> {
        assert!(start + len <= x.shape.channels(), "slice {start}+{len} of {:?}", x.shape);
        let inner = x.shape.inner();
        let out = x.data[start * inner..(start + len) * inner].to_vec();
        self.record(x.shape.with_channels(len), out, &[x], || SliceOp { start: start * inner })
    }

    /// Sub-pixel rearrangement `[C·r², H, W] -> [C, H·r, W·r]`.
    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Var<T> {
        let d = x.dims();
        assert!(d.len() == 3 && d[0] % (r * r) == 0, "pixel_shuffle({r}) on {:?}", x.shape);
        let perm = pixel_shuffle_perm(d[0] / (r * r), d[1], d[2], r);
        let out = perm.iter().map(|&p| x.data[p as usize]).collect();
        self.record(Shape::new(&[d[0] / (r * r), d[1] * r, d[2] * r]), out, &[x], || ShuffleOp { perm })
    }
}

/// Source index in `[C·r², H, W]` for every element of `[C, H·r, W·r]`.
pub fn pixel_shuffle_perm(c: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    let (oh, ow) = (h * r, w * r);
    let mut perm = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let (y, i) = (oy / r, oy % r);
            for ox in 0..ow {
                let (x, j) = (ox / r, ox % r);
                let src_c = ch * r * r + i * r + j;
                perm.push(((src_c * h + y) * w + x) as u32);
            }
        }
    }
    perm
}
