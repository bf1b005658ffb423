use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Shape, Var};
use crate::metrics::CharbonnierForm;
use crate::real::Real;

struct CharbonnierOp<T> {
    diff: Vec<T>,
    eps: T,
    form: CharbonnierForm,
    value: T,
}

impl<T: Real> Backward<T> for CharbonnierOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        let n = T::of(self.diff.len() as f64);
        let eps2 = self.eps * self.eps;
        let grad: Vec<T> = match self.form {
            CharbonnierForm::PerPixel => self.diff.iter().map(|&d| g[0] * d / (d * d + eps2).sqrt() / n).collect(),
            CharbonnierForm::Norm => self.diff.iter().map(|&d| g[0] * d / self.value).collect(),
        };
        if let Some(dp) = sink.get(0) {
            dp.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b);
        }
        if let Some(dt) = sink.get(1) {
            dt.iter_mut().zip(&grad).for_each(|(a, &b)| *a -= b);
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// Charbonnier penalty between `pred` and `target`; see [`CharbonnierForm`].
    pub fn charbonnier(&self, pred: &Var<T>, target: &Var<T>, eps: T, form: CharbonnierForm) -> Var<T> {
        assert_eq!(pred.len(), target.len(), "charbonnier {:?} vs {:?}", pred.shape, target.shape);
        let diff: Vec<T> = pred.data.iter().zip(target.data.iter()).map(|(&p, &t)| p - t).collect();
        let value = charbonnier_value(&diff, eps, form);
        self.record(Shape::new(&[1]), vec![value], &[pred, target], || CharbonnierOp { diff, eps, form, value })
    }
}

pub(crate) fn charbonnier_value<T: Real>(diff: &[T], eps: T, form: CharbonnierForm) -> T {
    match form {
        CharbonnierForm::PerPixel => {
            // Accumulate the excess over ε so identical inputs give exactly ε.
            let s: T = diff.iter().map(|&d| d.hypot(eps) - eps).sum();
            eps + s / T::of(diff.len() as f64)
        }
        CharbonnierForm::Norm => diff.iter().map(|&d| d * d).sum::<T>().sqrt().hypot(eps),
    }
}

