use alloc::rc::Rc;
use alloc::vec::Vec;

use super::{Backward, GradSink, Graph, Var};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Silu,
    Sigmoid,
    Softplus,
    Tanh,
    /// `limit * tanh(x / limit)`
    SoftClamp,
    Exp,
    Square,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    fn apply<T: Real>(self, x: T, limit: T) -> T {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Tanh => x.tanh(),
            Unary::SoftClamp => limit * (x / limit).tanh(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    fn derivative<T: Real>(self, x: T, limit: T) -> T {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Unary::SoftClamp => {
                let t = (x / limit).tanh();
                T::one() - t * t
            }
            Unary::Exp => x.exp(),
            Unary::Square => x + x,
        }
    }
}

struct UnaryOp<T> {
    kind: Unary,
    limit: T,
    input: Rc<Vec<T>>,
}

impl<T: Real> Backward<T> for UnaryOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.get(0) {
            for ((d, &x), &gy) in dx.iter_mut().zip(self.input.iter()).zip(g) {
                *d += gy * self.kind.derivative(x, self.limit);
            }
        }
    }
}

enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryOp<T> {
    kind: BinaryKind,
    lhs: Option<Rc<Vec<T>>>,
    rhs: Option<Rc<Vec<T>>>,
}

impl<T: Real> Backward<T> for BinaryOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        match self.kind {
            BinaryKind::Add | BinaryKind::Sub => {
                if let Some(da) = sink.get(0) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                let neg = matches!(self.kind, BinaryKind::Sub);
                if let Some(db) = sink.get(1) {
                    if neg {
                        db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            BinaryKind::Mul => {
                if let Some(da) = sink.get(0) {
                    let b = self.rhs.as_ref().expect("rhs saved");
                    for i in 0..da.len() {
                        da[i] += g[i] * b[i];
                    }
                }
                if let Some(db) = sink.get(1) {
                    let a = self.lhs.as_ref().expect("lhs saved");
                    for i in 0..db.len() {
                        db[i] += g[i] * a[i];
                    }
                }
            }
        }
    }
}

struct ScaleOp<T> {
    s: T,
}

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.get(0) {
            dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * self.s);
        }
    }
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.get(0) {
            dx.iter_mut().for_each(|d| *d += g[0]);
        }
    }
}

/// Per-channel bias (or scale) broadcast over everything after the first dim.
struct ChannelBiasOp;

impl<T: Real> Backward<T> for ChannelBiasOp {
    fn backward(&self, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(dx) = sink.get(0) {
            dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        }
        if let Some(db) = sink.get(1) {
            let c = db.len();
            let inner = g.len() / c;
            for (ch, d) in db.iter_mut().enumerate() {
                *d += g[ch * inner..(ch + 1) * inner].iter().copied().sum::<T>();
            }
        }
    }
}

impl<T: Real> Graph<'_, T> {
    pub(crate) fn unary(&self, x: &Var<T>, kind: Unary, limit: T) -> Var<T> {
        let out: Vec<T> = x.data.iter().map(|&v| kind.apply(v, limit)).collect();
        self.record(x.shape, out, &[x], || UnaryOp { kind, limit, input: x.data.clone() })
    }

    /// `x * sigmoid(x)`, the smooth gated activation used throughout the network.
    pub fn silu(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, Unary::Silu, T::one())
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, Unary::Sigmoid, T::one())
    }

    pub fn softplus(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, Unary::Softplus, T::one())
    }

    pub fn tanh(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, Unary::Tanh, T::one())
    }

    /// Smoothly bounds values to `(-limit, limit)`, identity near zero.
    pub fn soft_clamp(&self, x: &Var<T>, limit: T) -> Var<T> {
        self.unary(x, Unary::SoftClamp, limit)
    }

    pub fn exp(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, Unary::Exp, T::one())
    }

    pub fn square(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, Unary::Square, T::one())
    }

    fn binary(&self, a: &Var<T>, b: &Var<T>, kind: BinaryKind) -> Var<T> {
        assert_eq!(a.len(), b.len(), "elementwise op on {:?} and {:?}", a.shape, b.shape);
        let out: Vec<T> = match kind {
            BinaryKind::Add => a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x + y).collect(),
            BinaryKind::Sub => a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x - y).collect(),
            BinaryKind::Mul => a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect(),
        };
        let mul = matches!(kind, BinaryKind::Mul);
        let (want_a, want_b) = (a.node.is_some(), b.node.is_some());
        self.record(a.shape, out, &[a, b], || BinaryOp {
            kind,
            lhs: (mul && want_b).then(|| a.data.clone()),
            rhs: (mul && want_a).then(|| b.data.clone()),
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&self, x: &Var<T>, s: T) -> Var<T> {
        let out = x.data.iter().map(|&v| v * s).collect();
        self.record(x.shape, out, &[x], || ScaleOp { s })
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&self, x: &Var<T>, bias: &Var<T>) -> Var<T> {
        let c = x.shape.channels();
        assert_eq!(bias.len(), c, "bias of {} for {} channels", bias.len(), c);
        let inner = x.shape.inner();
        let mut out = x.to_vec();
        for (ch, &b) in bias.data.iter().enumerate() {
            out[ch * inner..(ch + 1) * inner].iter_mut().for_each(|v| *v += b);
        }
        self.record(x.shape, out, &[x, bias], || ChannelBiasOp)
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let s = x.data.iter().copied().sum();
        self.record(super::Shape::new(&[1]), alloc::vec![s], &[x], || SumOp)
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = T::of(x.len() as f64);
        let s = self.sum(x);
        self.scale(&s, T::one() / n)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;

    #[test]
    fn unary_gradients_match_finite_differences() {
        let x0 = values(12, 3).iter().map(|v| v * 3.0).collect::<alloc::vec::Vec<_>>();
        for (name, op) in [
            ("silu", 0usize),
            ("sigmoid", 1),
            ("softplus", 2),
            ("tanh", 3),
            ("soft_clamp", 4),
            ("exp", 5),
            ("square", 6),
        ] {
            let (a, n) = check(&[12], &x0, |g, x| {
                let y = match op {
                    0 => g.silu(x),
                    1 => g.sigmoid(x),
                    2 => g.softplus(x),
                    3 => g.tanh(x),
                    4 => g.soft_clamp(x, 2.0),
                    5 => g.exp(x),
                    _ => g.square(x),
                };
                probe(g, &y, 7)
            });
            assert_close(&a, &n, 1e-6);
            let _ = name;
        }
    }

    #[test]
    fn binary_and_bias_gradients() {
        let x0 = values(6, 1);
        let other = values(6, 2);
        let (a, n) = check(&[2, 3], &x0, |g, x| {
            let o = g.constant(&[2, 3], other.clone());
            let y = g.mul(&g.add(x, &o), &g.sub(x, &o));
            let y = g.mul(&y, x);
            let b = g.constant(&[2], alloc::vec![0.5, -1.0]);
            probe(g, &g.add_channel_bias(&y, &b), 4)
        });
        assert_close(&a, &n, 1e-6);
        let (a, n) = check(&[2], &[0.3, -0.7], |g, b| {
            let x = g.constant(&[2, 3], other.clone());
            probe(g, &g.add_channel_bias(&x, b), 9)
        });
        assert_close(&a, &n, 1e-6);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(super::sigmoid(1000.0f64), 1.0);
        assert_eq!(super::sigmoid(-1000.0f64), 0.0);
        assert_eq!(super::softplus(50.0f64), 50.0);
    }
}
