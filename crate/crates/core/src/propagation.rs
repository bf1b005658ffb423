//! Second-order recurrent propagation with a cross state-space block.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::blocks::{warp, DeformAlign, Lpe, Mlp, WindowGeometry};
use crate::error::{contract, Result};
use crate::image::FlowField;
use crate::params::{Init, ParamId};
use crate::real::Real;
use crate::ssm::{Discretization, SelectiveProjection, SCAN_CONV_KERNEL};

/// How two consecutive flows are combined into a two-step flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ComposeMode {
    /// Elementwise sum.
    #[default]
    Sum,
    /// Follow the first hop, then read the second flow where it lands.
    Warp,
}

/// Two-step flow from `o_b` (current → previous) and `o_a` (previous → the one before).
pub fn compose_flows(o_a: &FlowField, o_b: &FlowField, mode: ComposeMode) -> Result<FlowField> {
    contract!(
        o_a.width() == o_b.width() && o_a.height() == o_b.height(),
        "flows {}×{} and {}×{} differ",
        o_a.width(),
        o_a.height(),
        o_b.width(),
        o_b.height()
    );
    let (w, h) = (o_a.width(), o_a.height());
    let data = match mode {
        ComposeMode::Sum => o_a.data().iter().zip(o_b.data()).map(|(a, b)| a + b).collect(),
        ComposeMode::Warp => {
            let g = Graph::<f32>::new();
            let a = g.constant(&[2, h, w], o_a.data().to_vec());
            let b = g.constant(&[2, h, w], o_b.data().to_vec());
            g.add(&b, &warp(&g, &a, &b)).to_vec()
        }
    };
    FlowField::new(w, h, data)
}

/// Which frames feed the cross block and where its residual attaches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PropScheme {
    /// The frame two steps back supports the previous frame.
    #[default]
    T2T1,
    /// The frame two steps back supports the current frame.
    T2T,
    /// The previous frame supports the current frame.
    T1T,
    /// Both `T2T` and `T1T`, each with its own block.
    Both,
}

/// Output-matrix path for a distant sequence with its own weights.
#[derive(Clone, Debug)]
struct FarControl {
    norm_gamma: ParamId,
    norm_beta: ParamId,
    proj: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
}

/// Options shared by every cross block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CssbOptions {
    pub width: usize,
    pub state: usize,
    pub lpe: bool,
    pub separate_projection: bool,
    pub mode: Discretization,
}

/// Scan over the near sequence read out through a control matrix from the far sequence.
#[derive(Clone, Debug)]
pub struct Cssb {
    pub opts: CssbOptions,
    near: SelectiveProjection,
    far: Option<FarControl>,
    lpe: Option<Lpe>,
    out_gamma: ParamId,
    out_beta: ParamId,
    out_proj: ParamId,
}

impl Cssb {
    pub fn init<T: Real>(p: &mut Init<'_, T>, opts: CssbOptions) -> Self {
        let (d, n) = (opts.width, opts.state);
        let sp = opts.separate_projection;
        let near = SelectiveProjection::init(&mut p.scope("near"), d, d, n, true, !sp);
        let far = sp.then(|| {
            let mut q = p.scope("far");
            FarControl {
                norm_gamma: q.constant("norm.gamma", &[d], 1.0),
                norm_beta: q.zeros("norm.beta", &[d]),
                proj: q.fan_in("proj", &[n, d], d),
                conv_w: q.fan_in("conv.w", &[n, SCAN_CONV_KERNEL], SCAN_CONV_KERNEL),
                conv_b: q.zeros("conv.b", &[n]),
            }
        });
        let lpe = opts.lpe.then(|| Lpe::init(&mut p.scope("lpe"), n));
        Cssb {
            opts,
            near,
            far,
            lpe,
            out_gamma: p.constant("out.norm.gamma", &[d], 1.0),
            out_beta: p.zeros("out.norm.beta", &[d]),
            out_proj: p.fan_in("out.proj", &[d, d], d),
        }
    }

    /// `v_far, v_near: [D, tokens]` laid out by `geo`; returns `[D, tokens]`.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, v_far: &Var<T>, v_near: &Var<T>, geo: &WindowGeometry) -> Result<Var<T>> {
        let want = [self.opts.width, geo.total()];
        contract!(v_near.dims() == want && v_far.dims() == want, "cross block inputs {:?} / {:?}, expected {:?}", v_far.dims(), v_near.dims(), want);
        let seg = geo.tokens();
        let s = self.near.apply(g, v_near, seg);
        let control = match &self.far {
            Some(f) => {
                let n = g.layer_norm(v_far, &g.param(f.norm_gamma), &g.param(f.norm_beta));
                let c = g.linear(&n, &g.param(f.proj), None);
                g.silu(&g.conv1d_segments(&c, seg, &g.param(f.conv_w), Some(&g.param(f.conv_b))))
            }
            None => self.near.control(g, v_far, seg),
        };
        let control = match &self.lpe {
            Some(l) => l.apply(g, &control, geo),
            None => control,
        };
        let y = g.selective_scan(&s.x, &s.dt, &s.b, &control, &s.a, seg, self.opts.mode);
        let z = g.silu(s.z.as_ref().expect("near projection has a gate"));
        let h = g.layer_norm(&g.mul(&z, &y), &g.param(self.out_gamma), &g.param(self.out_beta));
        Ok(g.linear(&h, &g.param(self.out_proj), None))
    }
}

/// Cross block, residual, token MLP, residual, merged back to a map.
#[derive(Clone, Debug)]
pub struct CrossUnit {
    pub cssb: Cssb,
    pub mlp: Mlp,
}

impl CrossUnit {
    pub fn init<T: Real>(p: &mut Init<'_, T>, opts: CssbOptions) -> Self {
        CrossUnit { cssb: Cssb::init(&mut p.scope("cssb"), opts), mlp: Mlp::init(&mut p.scope("mlp"), opts.width) }
    }

    /// `far, near: [D, H, W]`.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, far: &Var<T>, near: &Var<T>, geo: &WindowGeometry) -> Result<Var<T>> {
        let v_far = geo.partition(g, far);
        let v_near = geo.partition(g, near);
        let v_hat = g.add(&self.cssb.apply(g, &v_far, &v_near, geo)?, &v_near);
        let refined = g.add(&self.mlp.apply(g, &v_hat), &v_hat);
        Ok(geo.merge(g, &refined))
    }
}

/// Weights of one propagation branch.
#[derive(Clone, Debug)]
pub struct BranchWeights {
    pub scheme: PropScheme,
    /// Absent when the cross block is disabled.
    pub units: Vec<CrossUnit>,
    pub align: DeformAlign,
}

/// Options for one propagation branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchOptions {
    pub cssb: CssbOptions,
    pub scheme: PropScheme,
    pub enabled: bool,
    pub groups: usize,
}

impl BranchWeights {
    pub fn init<T: Real>(p: &mut Init<'_, T>, opts: BranchOptions) -> Result<Self> {
        let width = opts.cssb.width;
        let count = match (opts.enabled, opts.scheme) {
            (false, _) => 0,
            (true, PropScheme::Both) => 2,
            (true, _) => 1,
        };
        let units = (0..count).map(|i| CrossUnit::init(&mut p.scope(&alloc::format!("unit{i}")), opts.cssb)).collect();
        let align = DeformAlign::init(&mut p.scope("align"), width, 3 * width, width, opts.groups, Some(2 * width))?;
        Ok(BranchWeights { scheme: opts.scheme, units, align })
    }
}

/// Flow field as a `[2, H, W]` constant.
pub fn flow_var<T: Real>(g: &Graph<'_, T>, o: &FlowField) -> Var<T> {
    g.constant(&[2, o.height(), o.width()], o.data().iter().map(|&v| T::of(v as f64)).collect())
}

/// Inputs of one propagation step.
pub struct StepInputs<'a, T: Real> {
    pub f_tm2: &'a Var<T>,
    pub f_tm1: &'a Var<T>,
    pub f_t: &'a Var<T>,
    pub o_tm2: &'a FlowField,
    pub o_tm1: &'a FlowField,
}

/// One step: align the two previous propagated features to the current frame.
pub fn cssp_step<T: Real>(
    g: &Graph<'_, T>,
    w: &BranchWeights,
    compose: ComposeMode,
    inp: &StepInputs<'_, T>,
    geo: &WindowGeometry,
) -> Result<Var<T>> {
    let d = inp.f_t.dims();
    contract!(
        inp.f_tm1.dims() == d && inp.f_tm2.dims() == d,
        "feature shapes {:?}, {:?}, {:?} differ",
        inp.f_tm2.dims(),
        inp.f_tm1.dims(),
        d
    );
    contract!(d.len() == 3 && geo.height == d[1] && geo.width == d[2], "window geometry does not match {:?}", d);
    for o in [inp.o_tm1, inp.o_tm2] {
        contract!(o.height() == d[1] && o.width() == d[2], "flow {}×{} for features {:?}", o.width(), o.height(), d);
    }
    let o_tm1 = flow_var(g, inp.o_tm1);
    let f_bar = warp(g, inp.f_tm1, &o_tm1);
    let distant = || -> Result<Var<T>> {
        let composite = compose_flows(inp.o_tm2, inp.o_tm1, compose)?;
        Ok(warp(g, inp.f_tm2, &flow_var(g, &composite)))
    };
    let (first, second) = match (w.scheme, w.units.as_slice()) {
        (PropScheme::T2T1, [u]) => (u.apply(g, &distant()?, inp.f_tm1, geo)?, f_bar),
        (PropScheme::T2T1, _) => (inp.f_tm1.clone(), f_bar),
        (PropScheme::T2T, [u]) => (u.apply(g, &distant()?, inp.f_t, geo)?, f_bar),
        (PropScheme::T1T, [u]) => (u.apply(g, &f_bar, inp.f_t, geo)?, f_bar),
        (PropScheme::Both, [a, b]) => (a.apply(g, &distant()?, inp.f_t, geo)?, b.apply(g, &f_bar, inp.f_t, geo)?),
        (_, _) => (inp.f_t.clone(), f_bar),
    };
    let cat = g.concat_channels(&[&first, &second, inp.f_t]);
    w.align.apply(g, inp.f_tm1, &cat)
}
