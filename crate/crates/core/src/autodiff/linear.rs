use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Var};
use crate::real::Real;

/// `y[Cout, P] = W[Cout, Cin] · x[Cin, P] (+ b)`
struct LinearOp<T> {
    x: Rc<Vec<T>>,
    w: Rc<Vec<T>>,
    cin: usize,
    cout: usize,
    p: usize,
}

impl<T: Real> Backward<T> for LinearOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let (cin, cout, p) = (self.cin, self.cout, self.p);
        if let Some(dx) = sink.get(0) {
            // dx = W^T · g
            T::gemm(cin, cout, p, T::one(), &self.w, true, g, false, T::one(), dx);
        }
        if let Some(dw) = sink.get(1) {
            // dW = g · x^T
            T::gemm(cout, p, cin, T::one(), g, false, &self.x, true, T::one(), dw);
        }
        if let Some(db) = sink.get(2) {
            for (o, d) in db.iter_mut().enumerate() {
                *d += g[o * p..(o + 1) * p].iter().copied().sum::<T>();
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Channel mixing: a 1×1 convolution over any trailing layout.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let (cout, cin) = (w.dims()[0], w.dims()[1]);
        assert_eq!(w.len(), cout * cin);
        assert_eq!(x.shape.channels(), cin, "linear: input {:?} vs weight {:?}", x.shape, w.shape);
        let p = x.shape.inner();
        let mut out = vec![T::zero(); cout * p];
        if let Some(b) = b {
            assert_eq!(b.len(), cout);
            for (o, &bv) in b.data.iter().enumerate() {
                out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
        }
        T::gemm(cout, cin, p, T::one(), &w.data, false, &x.data, false, T::one(), &mut out);
        let shape = x.shape.with_channels(cout);
        let zero_b;
        let b_ref = match b {
            Some(b) => b,
            None => {
                zero_b = self.zeros(&[cout]);
                &zero_b
            }
        };
        self.record(shape, out, &[x, w, b_ref], || LinearOp { x: x.data.clone(), w: w.data.clone(), cin, cout, p })
    }
}
