use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Var};
use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer normalisation across channels at every position.
struct LayerNormOp<T> {
    xhat: Rc<Vec<T>>,
    rstd: Vec<T>,
    gamma: Rc<Vec<T>>,
    c: usize,
}

impl<T: Real> Backward<T> for LayerNormOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let c = self.c;
        let p = g.len() / c;
        if sink.wants(0) {
            // dxhat = g * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let mut m1 = vec![T::zero(); p];
            let mut m2 = vec![T::zero(); p];
            for ch in 0..c {
                let gm = self.gamma[ch];
                let row = &g[ch * p..(ch + 1) * p];
                let xr = &self.xhat[ch * p..(ch + 1) * p];
                for i in 0..p {
                    let d = row[i] * gm;
                    m1[i] += d;
                    m2[i] += d * xr[i];
                }
            }
            let inv_c = T::one() / T::of(c as f64);
            let dx = sink.get(0).unwrap();
            for ch in 0..c {
                let gm = self.gamma[ch];
                let row = &g[ch * p..(ch + 1) * p];
                let xr = &self.xhat[ch * p..(ch + 1) * p];
                let out = &mut dx[ch * p..(ch + 1) * p];
                for i in 0..p {
                    out[i] += self.rstd[i] * (row[i] * gm - m1[i] * inv_c - xr[i] * m2[i] * inv_c);
                }
            }
        }
        if let Some(dg) = sink.get(1) {
            for ch in 0..c {
                let row = &g[ch * p..(ch + 1) * p];
                let xr = &self.xhat[ch * p..(ch + 1) * p];
                dg[ch] += row.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        if let Some(db) = sink.get(2) {
            for ch in 0..c {
                db[ch] += g[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Normalises the channel vector at each position, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
        let c = x.shape.channels();
        assert!(gamma.len() == c && beta.len() == c, "layer_norm affine params for {c} channels");
        let p = x.shape.inner();
        let inv_c = T::one() / T::of(c as f64);
        let mut mean = vec![T::zero(); p];
        for ch in 0..c {
            mean.iter_mut().zip(&x.data[ch * p..(ch + 1) * p]).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            for (i, &v) in x.data[ch * p..(ch + 1) * p].iter().enumerate() {
                let d = v - mean[i];
                var[i] += d * d;
            }
        }
        let eps = T::of(LN_EPS);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v * inv_c + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let (gm, bt) = (gamma.data[ch], beta.data[ch]);
            for i in 0..p {
                let xh = (x.data[ch * p + i] - mean[i]) * rstd[i];
                xhat[ch * p + i] = xh;
                out[ch * p + i] = xh * gm + bt;
            }
        }
        self.record(x.shape, out, &[x, gamma, beta], || LayerNormOp { xhat: Rc::new(xhat), rstd, gamma: gamma.data.clone(), c })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;

    #[test]
    fn layer_norm_gradients() {
        let (c, p) = (5, 4);
        let x0: alloc::vec::Vec<f64> = values(c * p, 21).iter().map(|v| v * 2.0).collect();
        let gm: alloc::vec::Vec<f64> = values(c, 22).iter().map(|v| 1.0 + 0.5 * v).collect();
        let bt = values(c, 23);
        let (a, n) = check(&[c, p], &x0, |g, x| {
            let y = g.layer_norm(x, &g.constant(&[c], gm.clone()), &g.constant(&[c], bt.clone()));
            probe(g, &y, 24)
        });
        assert_close(&a, &n, 1e-6);
        let (a, n) = check(&[c], &gm, |g, gamma| {
            let y = g.layer_norm(&g.constant(&[c, p], x0.clone()), gamma, &g.constant(&[c], bt.clone()));
            probe(g, &y, 24)
        });
        assert_close(&a, &n, 1e-6);
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let g = super::Graph::<f64>::new();
        let x = g.constant(&[4, 2], alloc::vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let y = g.layer_norm(&x, &g.full(&[4], 1.0), &g.zeros(&[4]));
        for pos in 0..2 {
            let col: alloc::vec::Vec<f64> = (0..4).map(|c| y.data()[c * 2 + pos]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
