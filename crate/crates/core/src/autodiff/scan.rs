use alloc::rc::Rc;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Var};
use crate::real::Real;
use crate::ssm::{scan_backward, scan_forward, Discretization, ScanDims, ScanGrads};

struct ScanOp<T> {
    dims: ScanDims,
    mode: Discretization,
    x: Rc<Vec<T>>,
    dt: Rc<Vec<T>>,
    b: Rc<Vec<T>>,
    c: Rc<Vec<T>>,
    a: Rc<Vec<T>>,
    hist: Vec<T>,
}

impl<T: Real> Backward<T> for ScanOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let grads: ScanGrads<T> = scan_backward(self.dims, self.mode, &self.x, &self.dt, &self.b, &self.c, &self.a, &self.hist, g);
        for (slot, buf) in [grads.x, grads.dt, grads.b, grads.c, grads.a].into_iter().enumerate() {
            if let Some(d) = sink.get(slot) {
                d.iter_mut().zip(&buf).for_each(|(p, &q)| *p += q);
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Selective state-space scan with a scalar negative `A` per channel.
    ///
    /// * `x, dt: [D, S]` inputs and positive timescales;
    /// * `b, c: [N, S]` input and output projections, shared across channels;
    /// * `a: [D]` continuous transition values (negative);
    ///
    /// `S` is split into independent segments of length `seg`; the hidden state
    /// starts at zero in each. Returns `y: [D, S]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &self,
        x: &Var<T>,
        dt: &Var<T>,
        b: &Var<T>,
        c: &Var<T>,
        a: &Var<T>,
        seg: usize,
        mode: Discretization,
    ) -> Var<T> {
        let d = x.shape.channels();
        let s = x.shape.inner();
        let n = b.shape.channels();
        assert!(dt.len() == d * s && b.len() == n * s && c.len() == n * s && a.len() == d, "selective_scan shapes");
        assert!(seg > 0 && s % seg == 0, "scan length {s} not a multiple of segment {seg}");
        let dims = ScanDims { channels: d, state: n, len: s, seg };
        let keep = self.tracks(&[x, dt, b, c, a]);
        let (y, hist) = scan_forward(dims, mode, &x.data, &dt.data, &b.data, &c.data, &a.data, None, keep);
        self.record(x.shape, y, &[x, dt, b, c, a], || ScanOp {
            dims,
            mode,
            x: x.data.clone(),
            dt: dt.data.clone(),
            b: b.data.clone(),
            c: c.data.clone(),
            a: a.data.clone(),
            hist,
        })
    }
}
