//! Discretised selective state-space machinery.
//!
//! The recurrence `h_i = exp(Δ_i A) h_{i-1} + B̄_i x_i`, `y_i = C_i · h_i` runs
//! with one negative scalar `A` per channel and `B`, `C` shared across
//! channels. [`scan_forward`] and [`scan_backward`] are the shared kernels used
//! both by the plain-value API below and by the differentiable graph op.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

// Float supplies the math methods when std is not linked.
#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::params::{Init, ParamId};
use crate::real::Real;

/// How `B̄` is derived from `(A, B, Δ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Discretization {
    /// `B̄ = Δ·B`.
    #[default]
    Simplified,
    /// Exact zero-order hold: `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`.
    ZeroOrderHold,
}

/// `expm1(z)/z` and its derivative, with the removable singularity at 0 handled by a series.
fn phi<T: Real>(z: T) -> (T, T) {
    if z.abs() < T::of(1e-3) {
        let (c2, c3, c4, c5) = (T::of(0.5), T::of(1.0 / 6.0), T::of(1.0 / 24.0), T::of(1.0 / 120.0));
        let v = T::one() + z * (c2 + z * (c3 + z * (c4 + z * c5)));
        let d = c2 + z * (T::of(2.0) * c3 + z * (T::of(3.0) * c4 + z * T::of(4.0) * c5));
        (v, d)
    } else {
        let em1 = z.exp_m1();
        let v = em1 / z;
        let d = (z * (em1 + T::one()) - em1) / (z * z);
        (v, d)
    }
}

/// Input coefficient `coef` with `B̄ = coef·B`, plus `∂coef/∂Δ` and `∂coef/∂A`.
#[inline]
fn input_coef<T: Real>(mode: Discretization, dt: T, a: T) -> (T, T, T) {
    match mode {
        Discretization::Simplified => (dt, T::one(), T::zero()),
        Discretization::ZeroOrderHold => {
            let (p, dp) = phi(dt * a);
            (dt * p, p + dt * a * dp, dt * dt * dp)
        }
    }
}

/// Discretises one scalar triple: returns `(Ā, B̄)`.
pub fn discretize_scalar<T: Real>(a: T, b: T, dt: T, mode: Discretization) -> (T, T) {
    let (coef, _, _) = input_coef(mode, dt, a);
    ((dt * a).exp(), coef * b)
}

/// Extents of one batched scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    /// `D`, independent channels.
    pub channels: usize,
    /// `N`, state size.
    pub state: usize,
    /// `S`, total tokens (all segments).
    pub len: usize,
    /// Tokens per independent segment; the state restarts at each boundary.
    pub seg: usize,
}

pub(crate) fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| src[r * cols + c]));
    }
    out
}

/// Runs the recurrence.
///
/// Layouts: `x, dt: [D, S]`, `b, c: [N, S]`, `a: [D]`, `h0: [D, N]` (applied at
/// the start of every segment; zero when absent). Returns `y: [D, S]` and, when
/// `keep_hist`, every hidden state in layout `[D, S, N]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<T: Real>(
    dims: ScanDims,
    mode: Discretization,
    x: &[T],
    dt: &[T],
    b: &[T],
    c: &[T],
    a: &[T],
    h0: Option<&[T]>,
    keep_hist: bool,
) -> (Vec<T>, Vec<T>) {
    let ScanDims { channels: d, state: n, len: s, seg } = dims;
    let bt = transpose(b, n, s);
    let ct = transpose(c, n, s);
    let mut y = vec![T::zero(); d * s];
    let mut hist = if keep_hist { vec![T::zero(); d * s * n] } else { Vec::new() };
    let mut h = vec![T::zero(); n];
    for ch in 0..d {
        let av = a[ch];
        for start in (0..s).step_by(seg) {
            match h0 {
                Some(h0) => h.copy_from_slice(&h0[ch * n..(ch + 1) * n]),
                None => h.iter_mut().for_each(|v| *v = T::zero()),
            }
            for i in start..start + seg {
                let di = dt[ch * s + i];
                let decay = (di * av).exp();
                let (coef, _, _) = input_coef(mode, di, av);
                let xi = x[ch * s + i];
                let bi = &bt[i * n..(i + 1) * n];
                let ci = &ct[i * n..(i + 1) * n];
                let mut acc = T::zero();
                for k in 0..n {
                    h[k] = decay * h[k] + coef * bi[k] * xi;
                    acc += ci[k] * h[k];
                }
                y[ch * s + i] = acc;
                if keep_hist {
                    hist[(ch * s + i) * n..(ch * s + i + 1) * n].copy_from_slice(&h);
                }
            }
        }
    }
    (y, hist)
}

/// Gradients of a scan with respect to every input, in the input layouts.
pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub dt: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub a: Vec<T>,
}

/// Reverse pass of [`scan_forward`] for a zero initial state; `hist` is the
/// `[D, S, N]` history it returned and `g` the output gradient `[D, S]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Real>(
    dims: ScanDims,
    mode: Discretization,
    x: &[T],
    dt: &[T],
    b: &[T],
    c: &[T],
    a: &[T],
    hist: &[T],
    g: &[T],
) -> ScanGrads<T> {
    let ScanDims { channels: d, state: n, len: s, seg } = dims;
    assert_eq!(hist.len(), d * s * n, "scan history missing");
    let bt = transpose(b, n, s);
    let ct = transpose(c, n, s);
    let mut gx = vec![T::zero(); d * s];
    let mut gdt = vec![T::zero(); d * s];
    let mut gbt = vec![T::zero(); s * n];
    let mut gct = vec![T::zero(); s * n];
    let mut ga = vec![T::zero(); d];
    let mut dh = vec![T::zero(); n];
    for ch in 0..d {
        let av = a[ch];
        for start in (0..s).step_by(seg) {
            dh.iter_mut().for_each(|v| *v = T::zero());
            for i in (start..start + seg).rev() {
                let idx = ch * s + i;
                let di = dt[idx];
                let decay = (di * av).exp();
                let (coef, dcoef_dt, dcoef_da) = input_coef(mode, di, av);
                let xi = x[idx];
                let u = coef * xi;
                let gy = g[idx];
                let hi = &hist[idx * n..(idx + 1) * n];
                let bi = &bt[i * n..(i + 1) * n];
                let ci = &ct[i * n..(i + 1) * n];
                let gbi = &mut gbt[i * n..(i + 1) * n];
                let mut ddecay = T::zero();
                let mut du = T::zero();
                if i > start {
                    let hp = &hist[(idx - 1) * n..idx * n];
                    for k in 0..n {
                        dh[k] += ci[k] * gy;
                        ddecay += dh[k] * hp[k];
                    }
                } else {
                    for k in 0..n {
                        dh[k] += ci[k] * gy;
                    }
                }
                let gci = &mut gct[i * n..(i + 1) * n];
                for k in 0..n {
                    gci[k] += hi[k] * gy;
                    du += dh[k] * bi[k];
                    gbi[k] += dh[k] * u;
                    dh[k] *= decay;
                }
                gx[idx] = du * coef;
                let dcoef = du * xi;
                gdt[idx] = ddecay * decay * av + dcoef * dcoef_dt;
                ga[ch] += ddecay * decay * di + dcoef * dcoef_da;
            }
        }
    }
    ScanGrads { x: gx, dt: gdt, b: transpose(&gbt, s, n), c: transpose(&gct, s, n), a: ga }
}

/// Provenance of a token sequence inside a clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Origin {
    pub window_row: usize,
    pub window_col: usize,
    pub frame: usize,
}

/// `L` tokens of `D` channels, stored channel-major (`[D, L]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    channels: usize,
    len: usize,
    values: Vec<T>,
    pub origin: Origin,
}

impl<T: Real> TokenSequence<T> {
    /// `values` channel-major, `channels · len` of them.
    pub fn new(channels: usize, len: usize, values: Vec<T>) -> Result<Self> {
        contract!(values.len() == channels * len, "{} values for {channels} channels × {len} tokens", values.len());
        Ok(TokenSequence { channels, len, values, origin: Origin::default() })
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        TokenSequence { channels, len, values: vec![T::zero(); channels * len], origin: Origin::default() }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn at(&self, channel: usize, token: usize) -> T {
        self.values[channel * self.len + token]
    }

    /// Channel `channel` across all tokens.
    pub fn channel(&self, channel: usize) -> &[T] {
        &self.values[channel * self.len..(channel + 1) * self.len]
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// Continuous state-space quantities for one sequence of `D` channels and `L` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SSMParams<T> {
    /// `[D]`, one scalar transition value per channel.
    pub a: Vec<T>,
    /// `[N, L]` input projection per token.
    pub b: Vec<T>,
    /// `[N, L]` output projection per token.
    pub c: Vec<T>,
    /// `[D, L]` positive timescales.
    pub delta: Vec<T>,
    pub state: usize,
    pub mode: Discretization,
}

/// `Ā: [D, L]` and `B̄: [D, N, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// The structured convolution kernel `K̄_i = C·Ā^i·B̄`, one row of taps per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanKernel<T> {
    pub channels: usize,
    /// `[D, L]`.
    pub taps: Vec<T>,
}

impl<T: Real> SSMParams<T> {
    pub fn channels(&self) -> usize {
        self.a.len()
    }

    pub fn len(&self) -> usize {
        if self.a.is_empty() {
            0
        } else {
            self.delta.len() / self.a.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks layouts and the value domain; returns `(D, N, L)`.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let d = self.a.len();
        let n = self.state;
        contract!(d > 0 && n > 0, "empty state-space parameters");
        contract!(self.delta.len() % d == 0, "Δ has {} values for {d} channels", self.delta.len());
        let l = self.delta.len() / d;
        contract!(self.b.len() == n * l, "B has {} values, expected {}", self.b.len(), n * l);
        contract!(self.c.len() == n * l, "C has {} values, expected {}", self.c.len(), n * l);
        let all = self.a.iter().chain(&self.b).chain(&self.c).chain(&self.delta);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite state-space parameter".into()));
        }
        if let Some(bad) = self.delta.iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain(format!("timescale Δ must be positive, got {bad}")));
        }
        Ok((d, n, l))
    }

    fn scan_dims(&self) -> Result<ScanDims> {
        let (d, n, l) = self.validate()?;
        Ok(ScanDims { channels: d, state: n, len: l, seg: l })
    }
}

/// Discretises every channel and token.
pub fn discretize<T: Real>(params: &SSMParams<T>) -> Result<Discretized<T>> {
    let (d, n, l) = params.validate()?;
    let mut a_bar = vec![T::zero(); d * l];
    let mut b_bar = vec![T::zero(); d * n * l];
    for ch in 0..d {
        for i in 0..l {
            let dt = params.delta[ch * l + i];
            let (coef, _, _) = input_coef(params.mode, dt, params.a[ch]);
            a_bar[ch * l + i] = (dt * params.a[ch]).exp();
            for k in 0..n {
                b_bar[(ch * n + k) * l + i] = coef * params.b[k * l + i];
            }
        }
    }
    if a_bar.iter().chain(&b_bar).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("discretisation overflowed".into()));
    }
    Ok(Discretized { a_bar, b_bar })
}

fn check_input<T: Real>(dims: ScanDims, x: &TokenSequence<T>, h0: Option<&[T]>) -> Result<()> {
    contract!(x.channels() == dims.channels, "input has {} channels, parameters {}", x.channels(), dims.channels);
    contract!(x.len() == dims.len, "input has {} tokens, parameters {}", x.len(), dims.len);
    contract!(dims.len >= 1, "empty sequence");
    if let Some(h0) = h0 {
        contract!(h0.len() == dims.channels * dims.state, "initial state has {} values, expected {}", h0.len(), dims.channels * dims.state);
    }
    Ok(())
}

/// Runs the recurrence in token order from `h0` (`[D, N]`, zero when `None`).
pub fn ssm_scan<T: Real>(params: &SSMParams<T>, x: &TokenSequence<T>, h0: Option<&[T]>) -> Result<TokenSequence<T>> {
    let dims = params.scan_dims()?;
    check_input(dims, x, h0)?;
    let (y, _) = scan_forward(dims, params.mode, x.values(), &params.delta, &params.b, &params.c, &params.a, h0, false);
    Ok(TokenSequence { channels: dims.channels, len: dims.len, values: y, origin: x.origin })
}

/// Same recurrence with the output projection taken from another sequence.
///
/// `c_far` carries `N` channels over the same token count as `x`.
pub fn cross_scan<T: Real>(near: &SSMParams<T>, x: &TokenSequence<T>, c_far: &TokenSequence<T>) -> Result<TokenSequence<T>> {
    let dims = near.scan_dims()?;
    check_input(dims, x, None)?;
    contract!(c_far.len() == x.len(), "far sequence has {} tokens, near {}", c_far.len(), x.len());
    contract!(c_far.channels() == dims.state, "far control has {} channels, state size {}", c_far.channels(), dims.state);
    if c_far.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite far control values".into()));
    }
    let (y, _) = scan_forward(dims, near.mode, x.values(), &near.delta, &near.b, c_far.values(), &near.a, None, false);
    Ok(TokenSequence { channels: dims.channels, len: dims.len, values: y, origin: x.origin })
}

fn constant_rows<T: Real>(v: &[T], rows: usize, len: usize) -> bool {
    (0..rows).all(|r| v[r * len..(r + 1) * len].iter().all(|&e| e == v[r * len]))
}

/// Kernel taps for time-invariant parameters; token-varying inputs are rejected.
pub fn scan_kernel<T: Real>(params: &SSMParams<T>) -> Result<ScanKernel<T>> {
    let (d, n, l) = params.validate()?;
    contract!(
        constant_rows(&params.delta, d, l) && constant_rows(&params.b, n, l) && constant_rows(&params.c, n, l),
        "kernel form needs parameters constant along the sequence"
    );
    let mut taps = vec![T::zero(); d * l];
    for ch in 0..d {
        let (a_bar, b_bar0) = discretize_scalar(params.a[ch], T::one(), params.delta[ch * l], params.mode);
        let cb: T = (0..n).map(|k| params.c[k * l] * b_bar0 * params.b[k * l]).sum();
        for i in 0..l {
            taps[ch * l + i] = cb * a_bar.powi(i as i32);
        }
    }
    Ok(ScanKernel { channels: d, taps })
}

/// Causal convolution of `x` with the scan kernel.
pub fn ssm_kernel_apply<T: Real>(params: &SSMParams<T>, x: &TokenSequence<T>) -> Result<TokenSequence<T>> {
    let dims = params.scan_dims()?;
    check_input(dims, x, None)?;
    let kernel = scan_kernel(params)?;
    let l = dims.len;
    let mut y = vec![T::zero(); dims.channels * l];
    for ch in 0..dims.channels {
        let k = &kernel.taps[ch * l..(ch + 1) * l];
        let xs = x.channel(ch);
        for i in 0..l {
            y[ch * l + i] = (0..=i).map(|j| k[j] * xs[i - j]).sum();
        }
    }
    Ok(TokenSequence { channels: dims.channels, len: l, values: y, origin: x.origin })
}

/// Width of the 1-D convolution along the scan.
pub const SCAN_CONV_KERNEL: usize = 3;

/// `ln(exp(y) - 1)`, the preimage of `y` under softplus.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Learnable data-dependent projection producing the per-token scan inputs.
///
/// From normalised tokens `v: [D, S]` a single linear map yields, in order, the
/// gate `z` (optional), `x`, `B`, `C` (optional) and the raw timescale. `x`,
/// `B` and `C` pass through a centred 1-D convolution within each window and
/// SiLU; the timescale is `softplus(raw + bias)`.
#[derive(Clone, Debug)]
pub struct SelectiveProjection {
    pub input: usize,
    pub inner: usize,
    pub state: usize,
    pub gate: bool,
    pub with_c: bool,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
}

/// Outputs of [`SelectiveProjection::apply`].
pub struct Selective<T: Real> {
    pub z: Option<Var<T>>,
    pub x: Var<T>,
    pub b: Var<T>,
    pub c: Option<Var<T>>,
    pub dt: Var<T>,
    /// `A = -exp(a_log)`, `[inner]`.
    pub a: Var<T>,
}

impl SelectiveProjection {
    /// Registers parameters: `input` token channels, `inner` scan channels, `state` = N.
    pub fn init<T: Real>(p: &mut Init<'_, T>, input: usize, inner: usize, state: usize, gate: bool, with_c: bool) -> Self {
        let norm_gamma = p.constant("norm.gamma", &[input], 1.0);
        let norm_beta = p.zeros("norm.beta", &[input]);
        let rows = Self::rows_for(inner, state, gate, with_c);
        let proj = p.fan_in("proj", &[rows, input], input);
        let conv_ch = inner + state * (1 + with_c as usize);
        let conv_w = p.fan_in("conv.w", &[conv_ch, SCAN_CONV_KERNEL], SCAN_CONV_KERNEL);
        let conv_b = p.zeros("conv.b", &[conv_ch]);
        let (lo, hi) = (1e-3f64.ln(), 0.1f64.ln());
        let dt: Vec<T> = (0..inner)
            .map(|_| T::of(inverse_softplus(rand::Rng::random_range(p.rng(), lo..hi).exp())))
            .collect();
        let dt_bias = p.with("dt_bias", &[inner], dt);
        let a: Vec<T> = (0..inner).map(|_| T::of(rand::Rng::random_range(p.rng(), 1.0f64..16.0).ln())).collect();
        let a_log = p.with("a_log", &[inner], a);
        SelectiveProjection { input, inner, state, gate, with_c, norm_gamma, norm_beta, proj, conv_w, conv_b, dt_bias, a_log }
    }

    fn rows_for(inner: usize, state: usize, gate: bool, with_c: bool) -> usize {
        inner * (2 + gate as usize) + state * (1 + with_c as usize)
    }

    /// Row offset of `C` inside the projection and the convolution channels.
    fn c_offsets(&self) -> (usize, usize) {
        let z = if self.gate { self.inner } else { 0 };
        (z + self.inner + self.state, self.inner + self.state)
    }

    /// Projects `v: [input, S]` scanned in windows of `seg` tokens.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, v: &Var<T>, seg: usize) -> Selective<T> {
        let normed = g.layer_norm(v, &g.param(self.norm_gamma), &g.param(self.norm_beta));
        let p = g.linear(&normed, &g.param(self.proj), None);
        let (inner, n) = (self.inner, self.state);
        let mut row = 0;
        let z = self.gate.then(|| {
            row += inner;
            g.slice_channels(&p, 0, inner)
        });
        let conv_ch = inner + n * (1 + self.with_c as usize);
        let pre = g.slice_channels(&p, row, conv_ch);
        let raw_dt = g.slice_channels(&p, row + conv_ch, inner);
        let conv = g.conv1d_segments(&pre, seg, &g.param(self.conv_w), Some(&g.param(self.conv_b)));
        let act = g.silu(&conv);
        let x = g.slice_channels(&act, 0, inner);
        let b = g.slice_channels(&act, inner, n);
        let c = self.with_c.then(|| g.slice_channels(&act, inner + n, n));
        let dt = g.softplus(&g.add_channel_bias(&raw_dt, &g.param(self.dt_bias)));
        let a = g.scale(&g.exp(&g.param(self.a_log)), -T::one());
        Selective { z, x, b, c, dt, a }
    }

    /// The `C` path alone, applied to a different sequence with this projection's weights.
    pub fn control<T: Real>(&self, g: &Graph<'_, T>, v: &Var<T>, seg: usize) -> Var<T> {
        assert!(self.with_c, "projection has no output-matrix rows");
        let (row, conv_row) = self.c_offsets();
        let normed = g.layer_norm(v, &g.param(self.norm_gamma), &g.param(self.norm_beta));
        let w = g.slice_channels(&g.param(self.proj), row, self.state);
        let p = g.linear(&normed, &w, None);
        let cw = g.slice_channels(&g.param(self.conv_w), conv_row, self.state);
        let cb = g.slice_channels(&g.param(self.conv_b), conv_row, self.state);
        g.silu(&g.conv1d_segments(&p, seg, &cw, Some(&cb)))
    }
}

/// Plain-value projection of one token sequence into scan inputs `(x, B̄, Δ)`.
///
/// `B̄` is laid out `[D, N, L]` and follows `mode`.
pub fn selective_params<T: Real>(
    v: &TokenSequence<T>,
    proj: &SelectiveProjection,
    params: &crate::params::ParamSet<T>,
    mode: Discretization,
) -> Result<(TokenSequence<T>, Vec<T>, TokenSequence<T>)> {
    contract!(v.channels() == proj.input, "tokens have {} channels, projection expects {}", v.channels(), proj.input);
    contract!(!v.is_empty(), "empty sequence");
    let g = Graph::inference(params);
    let l = v.len();
    let vv = g.constant(&[v.channels(), l], v.values().to_vec());
    let s = proj.apply(&g, &vv, l);
    let x = TokenSequence::new(proj.inner, l, s.x.to_vec())?.with_origin(v.origin);
    let dt = TokenSequence::new(proj.inner, l, s.dt.to_vec())?.with_origin(v.origin);
    let ssm = SSMParams { a: s.a.to_vec(), b: s.b.to_vec(), c: s.b.to_vec(), delta: dt.values().to_vec(), state: proj.state, mode };
    let b_bar = discretize(&ssm)?.b_bar;
    Ok((x, b_bar, dt))
}
