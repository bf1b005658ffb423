//! Reusable differentiable blocks: local windows, position embedding, MLP,
//! convolution blocks, sampling and deformable alignment.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

// Float supplies the math methods when std is not linked.
#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::params::{Init, ParamId};
use crate::real::Real;
use crate::ssm::{Origin, TokenSequence};

/// A dense `[C, H, W]` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        contract!(data.len() == channels * height * width, "{} values for a {channels}×{height}×{width} map", data.len());
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn from_var(v: &Var<T>) -> Self {
        let d = v.dims();
        assert_eq!(d.len(), 3, "feature map from {:?}", d);
        FeatureMap { channels: d[0], height: d[1], width: d[2], data: v.to_vec() }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Tiling of an `H×W` map into `win_h×win_w` windows after reflect padding.
///
/// Tokens are laid out window by window (row-major over the window grid),
/// row-major inside each window.
#[derive(Clone, Debug)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub rows: usize,
    pub cols: usize,
    gather: Rc<Vec<u32>>,
    scatter: Rc<Vec<u32>>,
}

impl PartialEq for WindowGeometry {
    fn eq(&self, o: &Self) -> bool {
        (self.height, self.width, self.win_h, self.win_w) == (o.height, o.width, o.win_h, o.win_w)
    }
}

impl WindowGeometry {
    /// Square windows of side `l`.
    pub fn new(height: usize, width: usize, l: usize) -> Result<Self> {
        contract!(l >= 2, "window side {l} must be at least 2");
        Self::rect(height, width, l, l)
    }

    /// One window covering the whole map.
    pub fn whole(height: usize, width: usize) -> Result<Self> {
        Self::rect(height, width, height, width)
    }

    fn rect(height: usize, width: usize, win_h: usize, win_w: usize) -> Result<Self> {
        contract!(height > 0 && width > 0 && win_h > 0 && win_w > 0, "empty window geometry");
        let rows = height.div_ceil(win_h);
        let cols = width.div_ceil(win_w);
        let mut gather = Vec::with_capacity(rows * cols * win_h * win_w);
        let mut scatter = vec![0u32; height * width];
        for r in 0..rows {
            for c in 0..cols {
                for i in 0..win_h {
                    for j in 0..win_w {
                        let (y, x) = (r * win_h + i, c * win_w + j);
                        let src = reflect(y as isize, height) * width + reflect(x as isize, width);
                        if y < height && x < width {
                            scatter[y * width + x] = gather.len() as u32;
                        }
                        gather.push(src as u32);
                    }
                }
            }
        }
        Ok(WindowGeometry { height, width, win_h, win_w, rows, cols, gather: Rc::new(gather), scatter: Rc::new(scatter) })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Tokens per window.
    pub fn tokens(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Tokens over all windows.
    pub fn total(&self) -> usize {
        self.count() * self.tokens()
    }

    /// Flattened source pixel for each token.
    pub fn partition_index(&self) -> &Rc<Vec<u32>> {
        &self.gather
    }

    /// Token holding each unpadded pixel.
    pub fn merge_index(&self) -> &Rc<Vec<u32>> {
        &self.scatter
    }

    /// `[C, H, W] -> [C, tokens]`.
    pub fn partition<T: Real>(&self, g: &Graph<'_, T>, f: &Var<T>) -> Var<T> {
        let c = f.dims()[0];
        assert_eq!(f.dims(), &[c, self.height, self.width], "partition of {:?}", f.dims());
        g.gather_positions(f, &self.gather, &[c, self.total()])
    }

    /// `[C, tokens] -> [C, H, W]`, dropping padding.
    pub fn merge<T: Real>(&self, g: &Graph<'_, T>, v: &Var<T>) -> Var<T> {
        let c = v.dims()[0];
        assert_eq!(v.dims(), &[c, self.total()], "merge of {:?}", v.dims());
        g.gather_positions(v, &self.scatter, &[c, self.height, self.width])
    }

    /// The same tokens viewed as `[C, windows, win_h, win_w]`.
    pub fn as_images<T: Real>(&self, v: &Var<T>) -> Var<T> {
        v.reshape(&[v.dims()[0], self.count(), self.win_h, self.win_w])
    }
}

/// Token sequences of every window of a map.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid<T> {
    pub geometry: WindowGeometry,
    pub channels: usize,
    /// `[C, windows · tokens]`.
    pub tokens: Vec<T>,
}

impl<T: Real> WindowGrid<T> {
    /// Window `(r, c)` as its own sequence, tagged with its grid position and `frame`.
    pub fn window(&self, r: usize, c: usize, frame: usize) -> TokenSequence<T> {
        let n = self.geometry.tokens();
        let total = self.geometry.total();
        let w = r * self.geometry.cols + c;
        let mut values = Vec::with_capacity(self.channels * n);
        for ch in 0..self.channels {
            values.extend_from_slice(&self.tokens[ch * total + w * n..ch * total + (w + 1) * n]);
        }
        TokenSequence::new(self.channels, n, values)
            .expect("window layout")
            .with_origin(Origin { window_row: r, window_col: c, frame })
    }
}

/// Splits `f` into `l×l` windows, reflect-padding the bottom and right edges.
pub fn window_partition<T: Real>(f: &FeatureMap<T>, l: usize) -> Result<WindowGrid<T>> {
    let geometry = WindowGeometry::new(f.height, f.width, l)?;
    Ok(partition_with(f, geometry))
}

/// Partition for an arbitrary (possibly whole-frame) geometry.
pub fn partition_with<T: Real>(f: &FeatureMap<T>, geometry: WindowGeometry) -> WindowGrid<T> {
    let hw = f.height * f.width;
    let mut tokens = Vec::with_capacity(f.channels * geometry.total());
    for ch in 0..f.channels {
        let plane = &f.data[ch * hw..(ch + 1) * hw];
        tokens.extend(geometry.gather.iter().map(|&i| plane[i as usize]));
    }
    WindowGrid { geometry, channels: f.channels, tokens }
}

/// Inverse of [`window_partition`] on the unpadded region.
pub fn window_merge<T: Real>(grid: &WindowGrid<T>, height: usize, width: usize) -> Result<FeatureMap<T>> {
    let geo = &grid.geometry;
    contract!(
        geo.height == height && geo.width == width && grid.tokens.len() == grid.channels * geo.total(),
        "grid of {} windows ({}×{} each) does not tile {height}×{width}",
        geo.count(),
        geo.win_h,
        geo.win_w
    );
    let total = geo.total();
    let mut data = Vec::with_capacity(grid.channels * height * width);
    for ch in 0..grid.channels {
        let row = &grid.tokens[ch * total..(ch + 1) * total];
        data.extend(geo.scatter.iter().map(|&i| row[i as usize]));
    }
    FeatureMap::new(grid.channels, height, width, data)
}

pub const LPE_KERNEL: usize = 3;

/// Learnable position embedding: a zero-padded depthwise convolution over each
/// window viewed as an image.
#[derive(Clone, Debug)]
pub struct Lpe {
    pub w: ParamId,
    pub b: ParamId,
}

impl Lpe {
    /// Starts as the identity map.
    pub fn init<T: Real>(p: &mut Init<'_, T>, channels: usize) -> Self {
        let k = LPE_KERNEL;
        let mut w = vec![T::zero(); channels * k * k];
        for c in 0..channels {
            w[c * k * k + k * k / 2] = T::one();
        }
        Lpe { w: p.with("w", &[channels, k, k], w), b: p.zeros("b", &[channels]) }
    }

    /// `seq: [C, tokens]` laid out by `geo`.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, seq: &Var<T>, geo: &WindowGeometry) -> Var<T> {
        let img = geo.as_images(seq);
        let out = g.depthwise_conv2d(&img, &g.param(self.w), Some(&g.param(self.b)));
        out.reshape(seq.dims())
    }
}

/// Applies a depthwise kernel to one square token sequence.
pub fn lpe<T: Real>(seq: &TokenSequence<T>, kernel: &[T], bias: &[T]) -> Result<TokenSequence<T>> {
    let l = (seq.len() as f64).sqrt() as usize;
    contract!(l * l == seq.len(), "{} tokens do not form a square window", seq.len());
    let c = seq.channels();
    contract!(kernel.len() % c == 0 && bias.len() == c, "kernel of {} values for {c} channels", kernel.len());
    let k = ((kernel.len() / c) as f64).sqrt() as usize;
    contract!(k * k * c == kernel.len() && k % 2 == 1, "kernel must be odd and square");
    let g = Graph::<T>::new();
    let x = g.constant(&[c, l, l], seq.values().to_vec());
    let w = g.constant(&[c, k, k], kernel.to_vec());
    let b = g.constant(&[c], bias.to_vec());
    let y = g.depthwise_conv2d(&x, &w, Some(&b));
    Ok(TokenSequence::new(c, seq.len(), y.to_vec())?.with_origin(seq.origin))
}

/// Token-wise `LN → expand ×2 → SiLU → project`, output layer zero-initialised.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

pub const MLP_RATIO: usize = 2;

impl Mlp {
    pub fn init<T: Real>(p: &mut Init<'_, T>, c: usize) -> Self {
        let hidden = c * MLP_RATIO;
        Mlp {
            norm_gamma: p.constant("norm.gamma", &[c], 1.0),
            norm_beta: p.zeros("norm.beta", &[c]),
            fc1_w: p.fan_in("fc1.w", &[hidden, c], c),
            fc1_b: p.zeros("fc1.b", &[hidden]),
            fc2_w: p.zeros("fc2.w", &[c, hidden]),
            fc2_b: p.zeros("fc2.b", &[c]),
        }
    }

    /// Works on any `[C, ...]` layout since it never mixes positions.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Var<T> {
        let n = g.layer_norm(x, &g.param(self.norm_gamma), &g.param(self.norm_beta));
        let h = g.silu(&g.linear(&n, &g.param(self.fc1_w), Some(&g.param(self.fc1_b))));
        g.linear(&h, &g.param(self.fc2_w), Some(&g.param(self.fc2_b)))
    }
}

/// Local-aggregation block used in reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Depthwise `k×k`, then pointwise, SiLU, pointwise, plus the input.
    #[default]
    Lksb,
    /// Two dense 3×3 convolutions with SiLU between, plus the input.
    Res,
    /// Inverted residual: pointwise ×2 expansion, depthwise 3×3, pointwise projection.
    Depthwise,
    /// Dense 3×3 on a quarter of the channels, then the pointwise pair.
    Partial,
}

/// A residual convolution block whose last layer starts at zero.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kind: BlockKind,
    pub kernel: usize,
    /// `(weight, bias)` per layer, in application order.
    layers: Vec<(ParamId, ParamId)>,
}

impl ConvBlock {
    /// `kernel` applies to [`BlockKind::Lksb`]; the other kinds use 3×3.
    pub fn init<T: Real>(p: &mut Init<'_, T>, kind: BlockKind, c: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Contract(format!("block kernel {kernel} must be odd")));
        }
        let mut layer = |name: &str, dims: &[usize], fan_in: Option<usize>| {
            let w = match fan_in {
                Some(f) => p.fan_in(&format!("{name}.w"), dims, f),
                None => p.zeros(&format!("{name}.w"), dims),
            };
            (w, p.zeros(&format!("{name}.b"), &[dims[0]]))
        };
        let (kernel, layers) = match kind {
            BlockKind::Lksb => (
                kernel,
                vec![
                    layer("dw", &[c, kernel, kernel], Some(kernel * kernel)),
                    layer("pw1", &[c, c], Some(c)),
                    layer("pw2", &[c, c], None),
                ],
            ),
            BlockKind::Res => (3, vec![layer("conv1", &[c, c, 3, 3], Some(9 * c)), layer("conv2", &[c, c, 3, 3], None)]),
            BlockKind::Depthwise => (
                3,
                vec![
                    layer("expand", &[2 * c, c], Some(c)),
                    layer("dw", &[2 * c, 3, 3], Some(9)),
                    layer("project", &[c, 2 * c], None),
                ],
            ),
            BlockKind::Partial => {
                let q = c.div_ceil(4);
                (
                    3,
                    vec![layer("pconv", &[q, q, 3, 3], Some(9 * q)), layer("pw1", &[c, c], Some(c)), layer("pw2", &[c, c], None)],
                )
            }
        };
        Ok(ConvBlock { kind, kernel, layers })
    }

    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Var<T> {
        let w = |i: usize| g.param(self.layers[i].0);
        let b = |i: usize| g.param(self.layers[i].1);
        let branch = match self.kind {
            BlockKind::Lksb => {
                let d = g.depthwise_conv2d(x, &w(0), Some(&b(0)));
                let h = g.silu(&g.linear(&d, &w(1), Some(&b(1))));
                g.linear(&h, &w(2), Some(&b(2)))
            }
            BlockKind::Res => {
                let h = g.silu(&g.conv2d(x, &w(0), Some(&b(0))));
                g.conv2d(&h, &w(1), Some(&b(1)))
            }
            BlockKind::Depthwise => {
                let e = g.silu(&g.linear(x, &w(0), Some(&b(0))));
                let d = g.silu(&g.depthwise_conv2d(&e, &w(1), Some(&b(1))));
                g.linear(&d, &w(2), Some(&b(2)))
            }
            BlockKind::Partial => {
                let c = x.dims()[0];
                let q = c.div_ceil(4);
                let head = g.conv2d(&g.slice_channels(x, 0, q), &w(0), Some(&b(0)));
                let mixed = if q < c { g.concat_channels(&[&head, &g.slice_channels(x, q, c - q)]) } else { head };
                let h = g.silu(&g.linear(&mixed, &w(1), Some(&b(1))));
                g.linear(&h, &w(2), Some(&b(2)))
            }
        };
        g.add(x, &branch)
    }
}

/// Bilinear read of `f: [C, H, W]` at `coords: [2, Ho, Wo]`, rejecting NaN positions.
pub fn bilinear_sample<T: Real>(g: &Graph<'_, T>, f: &Var<T>, coords: &Var<T>) -> Result<Var<T>> {
    if coords.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN sampling coordinate".into()));
    }
    Ok(g.bilinear_sample(f, coords))
}

/// Pixel-centre grid `[2, H, W]` (x plane, then y plane).
pub fn pixel_grid<T: Real>(h: usize, w: usize) -> Vec<T> {
    let mut v = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        v.extend((0..w).map(|x| T::of(x as f64)));
    }
    for y in 0..h {
        v.extend((0..w).map(|_| T::of(y as f64)));
    }
    v
}

/// `out(p) = f(p + o(p))` with zeros outside.
pub fn warp<T: Real>(g: &Graph<'_, T>, f: &Var<T>, flow: &Var<T>) -> Var<T> {
    let d = f.dims();
    assert_eq!(flow.dims(), &[2, d[1], d[2]], "flow {:?} for features {:?}", flow.dims(), d);
    let grid = g.constant(&[2, d[1], d[2]], pixel_grid(d[1], d[2]));
    g.bilinear_sample(f, &g.add(&grid, flow))
}

/// Largest offset magnitude the alignment head can produce, in pixels.
pub const OFFSET_LIMIT: f64 = 10.0;
pub const DEFORM_GROUPS: usize = 4;
pub const DEFORM_KERNEL: usize = 3;

/// Modulated deformable convolution whose offsets are predicted from a guide feature.
#[derive(Clone, Debug)]
pub struct DeformAlign {
    pub groups: usize,
    head1_w: ParamId,
    head1_b: ParamId,
    head2_w: ParamId,
    head2_b: ParamId,
    head3_w: ParamId,
    head3_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    pub dcn_w: ParamId,
    pub dcn_b: ParamId,
}

impl DeformAlign {
    /// `guide` channels in, `inputs` concatenated channels sampled, `out` channels produced.
    ///
    /// With `passthrough = Some(start)`, the main kernel starts close to copying
    /// input channels `start..start + out` (compensating the initial 0.5 modulation).
    pub fn init<T: Real>(
        p: &mut Init<'_, T>,
        guide: usize,
        inputs: usize,
        out: usize,
        groups: usize,
        passthrough: Option<usize>,
    ) -> Result<Self> {
        contract!(groups > 0 && inputs % groups == 0, "{inputs} input channels do not split into {groups} groups");
        let k = DEFORM_KERNEL;
        let kk = k * k;
        let head_out = 3 * groups * kk;
        let head1_w = p.fan_in("head1.w", &[guide, guide, 3, 3], 9 * guide);
        let head1_b = p.zeros("head1.b", &[guide]);
        let head2_w = p.fan_in("head2.w", &[guide, guide, 3, 3], 9 * guide);
        let head2_b = p.zeros("head2.b", &[guide]);
        let head3_w = p.fan_in("head3.w", &[guide, guide, 3, 3], 9 * guide);
        let head3_b = p.zeros("head3.b", &[guide]);
        let out_w = p.zeros("offset.w", &[head_out, guide, 3, 3]);
        let out_b = p.zeros("offset.b", &[head_out]);
        let bound = 0.1 / ((inputs * kk) as f64).sqrt();
        let mut w: Vec<T> = (0..out * inputs * kk).map(|_| T::of(rand::Rng::random_range(p.rng(), -bound..bound))).collect();
        if let Some(start) = passthrough {
            contract!(start + out <= inputs, "passthrough slice {start}+{out} beyond {inputs} inputs");
            for o in 0..out {
                w[(o * inputs + start + o) * kk + kk / 2] += T::of(2.0);
            }
        }
        let dcn_w = p.with("dcn.w", &[out, inputs, k, k], w);
        let dcn_b = p.zeros("dcn.b", &[out]);
        Ok(DeformAlign { groups, head1_w, head1_b, head2_w, head2_b, head3_w, head3_b, out_w, out_b, dcn_w, dcn_b })
    }

    /// Raw offsets `[2·G·k², H, W]` (soft-clamped) and modulation `[G·k², H, W]`.
    pub fn offsets<T: Real>(&self, g: &Graph<'_, T>, guide: &Var<T>) -> (Var<T>, Var<T>) {
        let p = |id| g.param(id);
        let h = g.silu(&g.conv2d(guide, &p(self.head1_w), Some(&p(self.head1_b))));
        let r = g.silu(&g.conv2d(&h, &p(self.head2_w), Some(&p(self.head2_b))));
        let h = g.add(&h, &g.conv2d(&r, &p(self.head3_w), Some(&p(self.head3_b))));
        let raw = g.conv2d(&h, &p(self.out_w), Some(&p(self.out_b)));
        let kk = DEFORM_KERNEL * DEFORM_KERNEL;
        let n_off = 2 * self.groups * kk;
        let off = g.soft_clamp(&g.slice_channels(&raw, 0, n_off), T::of(OFFSET_LIMIT));
        let mask = g.sigmoid(&g.slice_channels(&raw, n_off, self.groups * kk));
        (off, mask)
    }

    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, guide: &Var<T>, cat: &Var<T>) -> Result<Var<T>> {
        let (gd, cd) = (guide.dims(), cat.dims());
        contract!(gd.len() == 3 && cd.len() == 3 && gd[1..] == cd[1..], "guide {:?} and input {:?} are not aligned", gd, cd);
        let (off, mask) = self.offsets(g, guide);
        Ok(g.deform_conv2d(cat, &off, &mask, &g.param(self.dcn_w), Some(&g.param(self.dcn_b)), self.groups))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::values;

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn geometry_counts() {
        let g = WindowGeometry::new(32, 32, 16).unwrap();
        assert_eq!((g.count(), g.tokens()), (4, 256));
        let g = WindowGeometry::new(10, 7, 4).unwrap();
        assert_eq!((g.rows, g.cols), (3, 2));
        assert!(WindowGeometry::new(8, 8, 1).is_err());
    }

    #[test]
    fn partition_and_merge_roundtrip_with_padding() {
        for (h, w, l) in [(8, 8, 8), (10, 7, 4), (5, 9, 2), (3, 3, 16)] {
            let f = FeatureMap::new(2, h, w, values(2 * h * w, (h * w) as u64)).unwrap();
            let grid = window_partition(&f, l).unwrap();
            assert_eq!(window_merge(&grid, h, w).unwrap(), f);
        }
    }

    #[test]
    fn windows_carry_their_origin() {
        let f = FeatureMap::new(1, 4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let grid = window_partition(&f, 2).unwrap();
        let w = grid.window(1, 0, 5);
        assert_eq!(w.values(), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(w.origin, Origin { window_row: 1, window_col: 0, frame: 5 });
    }

    #[test]
    fn averaging_lpe_attenuates_borders_only() {
        let seq = TokenSequence::new(1, 16, vec![1.0f64; 16]).unwrap();
        let out = lpe(&seq, &[1.0 / 9.0; 9], &[0.0]).unwrap();
        assert!((out.at(0, 5) - 1.0).abs() < 1e-12);
        assert!(out.at(0, 0) < 0.5);
        let mut id = [0.0; 9];
        id[4] = 1.0;
        assert_eq!(lpe(&seq, &id, &[0.0]).unwrap(), seq);
        assert!(lpe(&TokenSequence::<f64>::zeros(1, 6), &id, &[0.0]).is_err());
    }

    #[test]
    fn nan_coordinates_are_rejected() {
        let g = Graph::<f64>::new();
        let f = g.zeros(&[1, 2, 2]);
        let c = g.constant(&[2, 1, 1], vec![f64::NAN, 0.0]);
        assert!(matches!(bilinear_sample(&g, &f, &c), Err(Error::Numeric(_))));
    }
}
