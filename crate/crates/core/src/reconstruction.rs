//! Fusion of propagated features and ×4 upsampling.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::blocks::{BlockKind, ConvBlock, Mlp, WindowGeometry};
use crate::error::{contract, Error, Result};
use crate::image::{resize_plane, Frame};
use crate::params::{Init, ParamId};
use crate::real::Real;
use crate::ssm::{Discretization, SelectiveProjection};

/// Options for the fusion scan block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IssbOptions {
    pub width: usize,
    pub state: usize,
    pub branches: usize,
    /// Concatenate the scan output with the gate instead of multiplying them.
    pub concat: bool,
    pub mode: Discretization,
}

/// Fuses branch features with a 1×1 reduction, then scans each window.
#[derive(Clone, Debug)]
pub struct Issb {
    pub opts: IssbOptions,
    reduce_w: ParamId,
    reduce_b: ParamId,
    proj: SelectiveProjection,
    out_gamma: ParamId,
    out_beta: ParamId,
    out_proj: ParamId,
}

impl Issb {
    pub fn init<T: Real>(p: &mut Init<'_, T>, opts: IssbOptions) -> Result<Self> {
        let w = opts.width;
        contract!(opts.branches > 0, "fusion needs at least one branch");
        contract!(!opts.concat || w % 2 == 0, "concatenating fusion needs an even width, got {w}");
        let jw = opts.branches * w;
        let reduce_w = p.fan_in("reduce.w", &[w, jw], jw);
        let reduce_b = p.zeros("reduce.b", &[w]);
        let inner = if opts.concat { w / 2 } else { w };
        let proj = SelectiveProjection::init(&mut p.scope("proj"), w, inner, opts.state, true, true);
        Ok(Issb {
            opts,
            reduce_w,
            reduce_b,
            proj,
            out_gamma: p.constant("out.norm.gamma", &[w], 1.0),
            out_beta: p.zeros("out.norm.beta", &[w]),
            out_proj: p.fan_in("out.proj", &[w, w], w),
        })
    }

    /// `feats`: one `[W, H, W']` map per branch, all the same shape. Returns the fused map.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, feats: &[&Var<T>], geo: &WindowGeometry) -> Result<Var<T>> {
        contract!(feats.len() == self.opts.branches, "{} branch features, expected {}", feats.len(), self.opts.branches);
        let want = [self.opts.width, geo.height, geo.width];
        for (j, f) in feats.iter().enumerate() {
            contract!(f.dims() == want, "branch {j} feature {:?}, expected {:?}", f.dims(), want);
        }
        let cat = if feats.len() == 1 { feats[0].clone() } else { g.concat_channels(feats) };
        let fused = g.linear(&cat, &g.param(self.reduce_w), Some(&g.param(self.reduce_b)));
        let v = geo.partition(g, &fused);
        let seg = geo.tokens();
        let s = self.proj.apply(g, &v, seg);
        let c = s.c.as_ref().expect("fusion projection emits C");
        let y = g.selective_scan(&s.x, &s.dt, &s.b, c, &s.a, seg, self.opts.mode);
        let z = g.silu(s.z.as_ref().expect("fusion projection has a gate"));
        let h = if self.opts.concat { g.concat_channels(&[&y, &z]) } else { g.mul(&z, &y) };
        let h = g.layer_norm(&h, &g.param(self.out_gamma), &g.param(self.out_beta));
        let out = g.add(&g.linear(&h, &g.param(self.out_proj), None), &v);
        Ok(geo.merge(g, &out))
    }
}

/// Options for the reconstruction stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IssrOptions {
    pub issb: IssbOptions,
    pub block: BlockKind,
    pub kernel: usize,
    pub depth: usize,
}

/// Fusion block, token MLP, then a stack of local convolution blocks.
#[derive(Clone, Debug)]
pub struct Issr {
    pub issb: Issb,
    pub mlp: Mlp,
    pub blocks: Vec<ConvBlock>,
}

impl Issr {
    pub fn init<T: Real>(p: &mut Init<'_, T>, opts: IssrOptions) -> Result<Self> {
        let issb = Issb::init(&mut p.scope("issb"), opts.issb)?;
        let mlp = Mlp::init(&mut p.scope("mlp"), opts.issb.width);
        let blocks = (0..opts.depth)
            .map(|i| ConvBlock::init(&mut p.scope(&alloc::format!("block{i}")), opts.block, opts.issb.width, opts.kernel))
            .collect::<Result<Vec<_>>>()?;
        Ok(Issr { issb, mlp, blocks })
    }

    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, feats: &[&Var<T>], geo: &WindowGeometry) -> Result<Var<T>> {
        let fused = self.issb.apply(g, feats, geo)?;
        let mut h = g.add(&self.mlp.apply(g, &fused), &fused);
        for b in &self.blocks {
            h = b.apply(g, &h);
        }
        Ok(h)
    }
}

/// The only supported upsampling factor.
pub const UPSCALE: usize = 4;

/// Two sub-pixel ×2 stages and an RGB head added to the bicubic enlargement.
#[derive(Clone, Debug)]
pub struct Upsampler {
    stages: [(ParamId, ParamId); 2],
    head_w: ParamId,
    head_b: ParamId,
}

impl Upsampler {
    /// The RGB head starts at zero so the initial output is the bicubic enlargement.
    pub fn init<T: Real>(p: &mut Init<'_, T>, width: usize) -> Self {
        let mut stage = |i: usize| {
            let w = p.fan_in(&alloc::format!("up{i}.w"), &[4 * width, width, 3, 3], 9 * width);
            let b = p.zeros(&alloc::format!("up{i}.b"), &[4 * width]);
            (w, b)
        };
        let stages = [stage(0), stage(1)];
        Upsampler { stages, head_w: p.zeros("head.w", &[3, width, 3, 3]), head_b: p.zeros("head.b", &[3]) }
    }

    /// `feat: [W, h, w]`, `lr` the matching low-resolution frame. Output `[3, 4h, 4w]`, unclamped.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, feat: &Var<T>, lr: &Frame, scale: usize) -> Result<Var<T>> {
        if scale != UPSCALE {
            return Err(Error::Unsupported(alloc::format!("upsampling factor {scale}; only {UPSCALE} is available")));
        }
        let d = feat.dims();
        contract!(d.len() == 3 && d[1] == lr.height() && d[2] == lr.width(), "feature {:?} for a {}×{} frame", d, lr.width(), lr.height());
        let mut h = feat.clone();
        for &(w, b) in &self.stages {
            h = g.silu(&g.pixel_shuffle(&g.conv2d(&h, &g.param(w), Some(&g.param(b))), 2));
        }
        let rgb = g.conv2d(&h, &g.param(self.head_w), Some(&g.param(self.head_b)));
        Ok(g.add(&rgb, &g.constant(&[3, scale * d[1], scale * d[2]], bicubic_up(lr, scale))))
    }
}

/// Bicubic enlargement of `lr` by `scale`, planar.
pub fn bicubic_up<T: Real>(lr: &Frame, scale: usize) -> Vec<T> {
    let (h, w) = (lr.height(), lr.width());
    let mut out = Vec::with_capacity(3 * scale * scale * h * w);
    for c in 0..3 {
        let plane: Vec<T> = lr.plane(c).iter().map(|&v| T::of(v as f64)).collect();
        out.extend(resize_plane(&plane, h, w, scale * h, scale * w));
    }
    out
}
