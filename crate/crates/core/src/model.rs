//! End-to-end network: feature extraction, alternating propagation branches,
//! per-frame reconstruction, and the training step.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::{BlockKind, WindowGeometry, DEFORM_GROUPS};
use crate::data::{estimate_flow, FlowEstimator, SCALE};
use crate::error::{contract, Error, Result};
use crate::image::{Clip, FlowField, Frame};
use crate::metrics::{CharbonnierForm, CHARBONNIER_EPS};
use crate::optim::Adam;
use crate::params::{Init, ParamId, ParamSet};
use crate::propagation::{cssp_step, BranchOptions, BranchWeights, ComposeMode, CssbOptions, PropScheme, StepInputs};
use crate::real::Real;
use crate::reconstruction::{Issr, IssrOptions, IssbOptions, Upsampler};
use crate::ssm::Discretization;

/// Time order of a propagation branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Direction {
    #[default]
    Backward,
    Forward,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Backward => Direction::Forward,
            Direction::Forward => Direction::Backward,
        }
    }
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    /// SSM state size.
    pub state: usize,
    /// Window side for local scans.
    pub window: usize,
    pub branches: usize,
    /// Reconstruction block kernel.
    pub kernel: usize,
    pub depth: usize,
    pub scale: usize,
    /// Use zero flow instead of block matching.
    pub flow_zero: bool,
    pub flow_block: usize,
    pub flow_radius: usize,
    pub cssb: bool,
    pub lpe: bool,
    pub cssb_windows: bool,
    pub separate_projection: bool,
    pub issb_windows: bool,
    pub concat: bool,
    pub prop_scheme: PropScheme,
    pub compose: ComposeMode,
    pub block: BlockKind,
    pub deform_groups: usize,
    pub discretization: Discretization,
    /// Direction of the first branch; later branches alternate.
    pub first_direction: Direction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            state: 16,
            window: 16,
            branches: 4,
            kernel: 7,
            depth: 3,
            scale: SCALE,
            flow_zero: false,
            flow_block: 8,
            flow_radius: 4,
            cssb: true,
            lpe: true,
            cssb_windows: true,
            separate_projection: true,
            issb_windows: true,
            concat: true,
            prop_scheme: PropScheme::T2T1,
            compose: ComposeMode::Sum,
            block: BlockKind::Lksb,
            deform_groups: DEFORM_GROUPS,
            discretization: Discretization::Simplified,
            first_direction: Direction::Backward,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Contract(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Contract(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn choice<E: Copy>(key: &str, v: &str, table: &[(&str, E)]) -> Result<E> {
    table.iter().find(|(n, _)| *n == v).map(|(_, e)| *e).ok_or_else(|| {
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        Error::Contract(format!("{key}: {v:?} is not one of {}", names.join("|")))
    })
}

fn name_of<E: PartialEq>(e: E, table: &[(&'static str, E)]) -> &'static str {
    table.iter().find(|(_, x)| *x == e).map(|(n, _)| *n).expect("every variant is named")
}

const SCHEMES: &[(&str, PropScheme)] =
    &[("t2t1", PropScheme::T2T1), ("t2t", PropScheme::T2T), ("t1t", PropScheme::T1T), ("both", PropScheme::Both)];
const COMPOSE: &[(&str, ComposeMode)] = &[("sum", ComposeMode::Sum), ("warp", ComposeMode::Warp)];
const BLOCKS: &[(&str, BlockKind)] = &[
    ("lksb", BlockKind::Lksb),
    ("res", BlockKind::Res),
    ("depthwise", BlockKind::Depthwise),
    ("partial", BlockKind::Partial),
];
const MODES: &[(&str, Discretization)] =
    &[("simplified", Discretization::Simplified), ("zoh", Discretization::ZeroOrderHold)];
const FLOWS: &[(&str, bool)] = &[("block_match", false), ("zero", true)];
const DIRECTIONS: &[(&str, Direction)] = &[("backward", Direction::Backward), ("forward", Direction::Forward)];

impl ModelConfig {
    /// Every key accepted by [`ModelConfig::set`], in dump order.
    pub const KEYS: &'static [&'static str] = &[
        "width",
        "state",
        "window",
        "branches",
        "kernel",
        "depth",
        "scale",
        "flow",
        "flow_block",
        "flow_radius",
        "cssb",
        "lpe",
        "cssb_windows",
        "separate_projection",
        "issb_windows",
        "concat",
        "prop_scheme",
        "compose",
        "block",
        "deform_groups",
        "discretization",
        "first_direction",
    ];

    pub fn validate(&self) -> Result<()> {
        contract!(self.width > 0 && self.state > 0, "width and state must be positive");
        contract!(self.branches >= 2 && self.branches % 2 == 0, "branch count {} must be even and at least 2", self.branches);
        if self.scale != SCALE {
            return Err(Error::Unsupported(format!("scale {}; only {SCALE} is available", self.scale)));
        }
        contract!(self.window >= 2, "window side {} below 2", self.window);
        contract!(self.kernel % 2 == 1, "kernel {} must be odd", self.kernel);
        contract!(!self.concat || self.width % 2 == 0, "concatenating fusion needs an even width");
        contract!(
            self.deform_groups > 0 && (3 * self.width) % self.deform_groups == 0,
            "{} alignment groups do not divide {} channels",
            self.deform_groups,
            3 * self.width
        );
        contract!(self.flow_block > 0, "flow block size must be positive");
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "width" => self.width = parse_usize(key, v)?,
            "state" => self.state = parse_usize(key, v)?,
            "window" => self.window = parse_usize(key, v)?,
            "branches" => self.branches = parse_usize(key, v)?,
            "kernel" => self.kernel = parse_usize(key, v)?,
            "depth" => self.depth = parse_usize(key, v)?,
            "scale" => self.scale = parse_usize(key, v)?,
            "flow" => self.flow_zero = choice(key, v, FLOWS)?,
            "flow_block" => self.flow_block = parse_usize(key, v)?,
            "flow_radius" => self.flow_radius = parse_usize(key, v)?,
            "cssb" => self.cssb = parse_bool(key, v)?,
            "lpe" => self.lpe = parse_bool(key, v)?,
            "cssb_windows" => self.cssb_windows = parse_bool(key, v)?,
            "separate_projection" => self.separate_projection = parse_bool(key, v)?,
            "issb_windows" => self.issb_windows = parse_bool(key, v)?,
            "concat" => self.concat = parse_bool(key, v)?,
            "prop_scheme" => self.prop_scheme = choice(key, v, SCHEMES)?,
            "compose" => self.compose = choice(key, v, COMPOSE)?,
            "block" => self.block = choice(key, v, BLOCKS)?,
            "deform_groups" => self.deform_groups = parse_usize(key, v)?,
            "discretization" => self.discretization = choice(key, v, MODES)?,
            "first_direction" => self.first_direction = choice(key, v, DIRECTIONS)?,
            _ => return Err(Error::Contract(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs that [`ModelConfig::set`] reads back to an equal config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("width", self.width.to_string()),
            ("state", self.state.to_string()),
            ("window", self.window.to_string()),
            ("branches", self.branches.to_string()),
            ("kernel", self.kernel.to_string()),
            ("depth", self.depth.to_string()),
            ("scale", self.scale.to_string()),
            ("flow", name_of(self.flow_zero, FLOWS).to_string()),
            ("flow_block", self.flow_block.to_string()),
            ("flow_radius", self.flow_radius.to_string()),
            ("cssb", self.cssb.to_string()),
            ("lpe", self.lpe.to_string()),
            ("cssb_windows", self.cssb_windows.to_string()),
            ("separate_projection", self.separate_projection.to_string()),
            ("issb_windows", self.issb_windows.to_string()),
            ("concat", self.concat.to_string()),
            ("prop_scheme", name_of(self.prop_scheme, SCHEMES).to_string()),
            ("compose", name_of(self.compose, COMPOSE).to_string()),
            ("block", name_of(self.block, BLOCKS).to_string()),
            ("deform_groups", self.deform_groups.to_string()),
            ("discretization", name_of(self.discretization, MODES).to_string()),
            ("first_direction", name_of(self.first_direction, DIRECTIONS).to_string()),
        ]
    }

    /// Parses `key=value` pairs over the defaults.
    pub fn from_entries<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn flow(&self) -> FlowEstimator {
        if self.flow_zero {
            FlowEstimator::Zero
        } else {
            FlowEstimator::BlockMatch { block: self.flow_block, radius: self.flow_radius }
        }
    }

    pub fn direction(&self, branch: usize) -> Direction {
        if branch % 2 == 0 {
            self.first_direction
        } else {
            self.first_direction.flip()
        }
    }

    fn geometry(&self, local: bool, h: usize, w: usize) -> Result<WindowGeometry> {
        if local {
            WindowGeometry::new(h, w, self.window)
        } else {
            WindowGeometry::whole(h, w)
        }
    }
}

/// Per-frame shallow feature extraction.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stem: (ParamId, ParamId),
    blocks: Vec<[(ParamId, ParamId); 2]>,
}

pub const EXTRACT_BLOCKS: usize = 2;

impl FeatureExtractor {
    pub fn init<T: Real>(p: &mut Init<'_, T>, width: usize) -> Self {
        let stem = (p.fan_in("stem.w", &[width, 3, 3, 3], 27), p.zeros("stem.b", &[width]));
        let blocks = (0..EXTRACT_BLOCKS)
            .map(|i| {
                let mut conv = |j: usize| {
                    let w = p.fan_in(&format!("res{i}.conv{j}.w"), &[width, width, 3, 3], 9 * width);
                    (w, p.zeros(&format!("res{i}.conv{j}.b"), &[width]))
                };
                [conv(0), conv(1)]
            })
            .collect();
        FeatureExtractor { stem, blocks }
    }

    /// `frame: [3, H, W]` → `[width, H, W]`.
    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, frame: &Var<T>) -> Var<T> {
        let conv = |x: &Var<T>, (w, b): (ParamId, ParamId)| g.conv2d(x, &g.param(w), Some(&g.param(b)));
        let mut f = conv(frame, self.stem);
        for [c0, c1] in &self.blocks {
            let r = conv(&g.silu(&conv(&f, *c0)), *c1);
            f = g.add(&f, &r);
        }
        f
    }
}

/// Structure of the network; the weights live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub extract: FeatureExtractor,
    pub branches: Vec<BranchWeights>,
    pub issr: Issr,
    pub up: Upsampler,
}

impl Network {
    /// Registers every weight in `p`, drawing initial values from its RNG.
    pub fn init<T: Real>(p: &mut Init<'_, T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let extract = FeatureExtractor::init(&mut p.scope("extract"), w);
        let cssb = CssbOptions {
            width: w,
            state: config.state,
            lpe: config.lpe,
            separate_projection: config.separate_projection,
            mode: config.discretization,
        };
        let opts = BranchOptions { cssb, scheme: config.prop_scheme, enabled: config.cssb, groups: config.deform_groups };
        let branches = (0..config.branches)
            .map(|j| BranchWeights::init(&mut p.scope(&format!("branch{j}")), opts))
            .collect::<Result<Vec<_>>>()?;
        let issb = IssbOptions {
            width: w,
            state: config.state,
            branches: config.branches,
            concat: config.concat,
            mode: config.discretization,
        };
        let issr = Issr::init(
            &mut p.scope("issr"),
            IssrOptions { issb, block: config.block, kernel: config.kernel, depth: config.depth },
        )?;
        let up = Upsampler::init(&mut p.scope("up"), w);
        Ok(Network { config: config.clone(), extract, branches, issr, up })
    }
}

/// Network structure plus weights.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::init(&mut Init::new(&mut params, &mut rng), config)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Same structure with weights converted to `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { net: self.net.clone(), params: self.params.cast() }
    }

    /// Super-resolves `lr`, clamping the output to `[0, 1]`.
    pub fn forward_clip(&self, lr: &Clip) -> Result<Clip> {
        let flows = ClipFlows::estimate(lr, self.net.config.flow())?;
        let g = Graph::inference(&self.params);
        let out = forward_graph(&g, &self.net, lr, &flows)?;
        let frames = out
            .iter()
            .map(|v| {
                let d = v.dims();
                Frame::new(d[2], d[1], v.data().iter().map(|x| x.as_f64() as f32).collect()).map(Frame::clamped)
            })
            .collect::<Result<Vec<_>>>()?;
        Clip::new(frames)
    }
}

/// Flows between neighbouring frames, estimated once per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFlows {
    /// `prev[t]` aligns frame `t` to frame `t - 1` (`None` at `t = 0`).
    pub prev: Vec<Option<FlowField>>,
    /// `next[t]` aligns frame `t` to frame `t + 1` (`None` at the end).
    pub next: Vec<Option<FlowField>>,
}

impl ClipFlows {
    pub fn estimate(clip: &Clip, est: FlowEstimator) -> Result<Self> {
        let f = clip.frames();
        let n = f.len();
        let mut prev = vec![None; n];
        let mut next = vec![None; n];
        for t in 1..n {
            prev[t] = Some(estimate_flow(&f[t], &f[t - 1], est)?);
            next[t - 1] = Some(estimate_flow(&f[t - 1], &f[t], est)?);
        }
        Ok(ClipFlows { prev, next })
    }

    /// Flow from frame `t` towards the previously visited frame of a `dir` branch.
    fn toward_visited(&self, dir: Direction, t: usize) -> Option<&FlowField> {
        match dir {
            Direction::Forward => self.prev[t].as_ref(),
            Direction::Backward => self.next[t].as_ref(),
        }
    }
}

/// Frame-to-frame features: extracted, propagated per branch, and the SR outputs.
pub fn forward_graph<T: Real>(g: &Graph<'_, T>, net: &Network, lr: &Clip, flows: &ClipFlows) -> Result<Vec<Var<T>>> {
    let cfg = &net.config;
    let n = lr.len();
    contract!(n > 0, "empty clip");
    contract!(flows.prev.len() == n && flows.next.len() == n, "flows for {} frames, clip has {n}", flows.prev.len());
    let (h, w) = (lr.height(), lr.width());
    let geo_prop = cfg.geometry(cfg.cssb_windows, h, w)?;
    let geo_fuse = cfg.geometry(cfg.issb_windows, h, w)?;
    let zero = FlowField::zeros(w, h);

    let mut prev: Vec<Var<T>> = lr
        .frames()
        .iter()
        .map(|f| {
            let x = g.constant(&[3, h, w], f.data().iter().map(|&v| T::of(v as f64)).collect());
            net.extract.apply(g, &x)
        })
        .collect();
    let mut per_branch: Vec<Vec<Var<T>>> = Vec::with_capacity(net.branches.len());
    for (j, bw) in net.branches.iter().enumerate() {
        let dir = cfg.direction(j);
        let order: Vec<usize> = match dir {
            Direction::Forward => (0..n).collect(),
            Direction::Backward => (0..n).rev().collect(),
        };
        let mut outs: Vec<Option<Var<T>>> = vec![None; n];
        for (s, &t) in order.iter().enumerate() {
            let f_t = &prev[t];
            let visited = |k: usize| outs[order[s - k]].clone().expect("visited frame has an output");
            let (f_tm1, f_tm2, o_tm1, o_tm2) = match s {
                0 => (f_t.clone(), f_t.clone(), &zero, &zero),
                1 => {
                    let f = visited(1);
                    (f.clone(), f, flows.toward_visited(dir, t).unwrap_or(&zero), &zero)
                }
                _ => (
                    visited(1),
                    visited(2),
                    flows.toward_visited(dir, t).unwrap_or(&zero),
                    flows.toward_visited(dir, order[s - 1]).unwrap_or(&zero),
                ),
            };
            let inp = StepInputs { f_tm2: &f_tm2, f_tm1: &f_tm1, f_t, o_tm2, o_tm1 };
            outs[t] = Some(cssp_step(g, bw, cfg.compose, &inp, &geo_prop)?);
        }
        prev = outs.into_iter().map(|o| o.expect("every frame visited")).collect();
        per_branch.push(prev.clone());
    }
    (0..n)
        .map(|t| {
            let feats: Vec<&Var<T>> = per_branch.iter().map(|b| &b[t]).collect();
            let fused = net.issr.apply(g, &feats, &geo_fuse)?;
            net.up.apply(g, &fused, &lr.frames()[t], cfg.scale)
        })
        .collect()
}

/// One training pair: low-resolution clip, its high-resolution target, and its flows.
#[derive(Clone, Debug)]
pub struct Sample {
    pub lr: Clip,
    pub hr: Clip,
    pub flows: ClipFlows,
}

impl Sample {
    pub fn new(lr: Clip, hr: Clip, est: FlowEstimator) -> Result<Self> {
        contract!(lr.len() == hr.len(), "{} LR frames for {} HR frames", lr.len(), hr.len());
        contract!(
            hr.width() == SCALE * lr.width() && hr.height() == SCALE * lr.height(),
            "HR {}×{} is not ×{SCALE} of LR {}×{}",
            hr.width(),
            hr.height(),
            lr.width(),
            lr.height()
        );
        let flows = ClipFlows::estimate(&lr, est)?;
        Ok(Sample { lr, hr, flows })
    }
}

/// Batch loss: mean over samples of the per-frame Charbonnier summed over frames.
pub fn batch_loss<T: Real>(g: &Graph<'_, T>, net: &Network, batch: &[Sample]) -> Result<Var<T>> {
    contract!(!batch.is_empty(), "empty batch");
    let mut total: Option<Var<T>> = None;
    for s in batch {
        let out = forward_graph(g, net, &s.lr, &s.flows)?;
        for (sr, hr) in out.iter().zip(s.hr.frames()) {
            let target = g.constant(sr.dims(), hr.data().iter().map(|&v| T::of(v as f64)).collect());
            let l = g.charbonnier(sr, &target, T::of(CHARBONNIER_EPS), CharbonnierForm::PerPixel);
            total = Some(match total {
                Some(t) => g.add(&t, &l),
                None => l,
            });
        }
    }
    Ok(g.scale(&total.expect("non-empty batch"), T::of(1.0 / batch.len() as f64)))
}

/// One optimisation step at learning rate `lr`; returns the loss before the update.
pub fn train_step<T: Real>(model: &mut Model<T>, adam: &mut Adam<T>, batch: &[Sample], lr: f64) -> Result<f64> {
    let (value, grads) = {
        let g = Graph::with_params(&model.params);
        let loss = batch_loss(&g, &model.net, batch)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        (value, g.param_grads(&g.backward(&loss)))
    };
    for ((_, p), gr) in model.params.iter().zip(&grads) {
        if let Some(bad) = gr.as_ref().and_then(|v| v.iter().position(|x| !x.as_f64().is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient for {} at element {bad} (loss {value})", p.name())));
        }
    }
    adam.update(&mut model.params, &grads, lr);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clip, SynthKind};

    fn tiny() -> ModelConfig {
        ModelConfig { width: 8, state: 4, window: 4, depth: 1, kernel: 3, ..ModelConfig::default() }
    }

    #[test]
    fn config_entries_roundtrip() {
        let mut c = tiny();
        c.flow_zero = true;
        c.flow_radius = 2;
        c.prop_scheme = PropScheme::Both;
        c.block = BlockKind::Partial;
        c.first_direction = Direction::Forward;
        let e = c.entries();
        assert_eq!(e.iter().map(|p| p.0).collect::<Vec<_>>(), ModelConfig::KEYS);
        let back = ModelConfig::from_entries(e.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig::default().set("widht", "3").is_err());
        assert!(ModelConfig::default().set("block", "huge").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            ModelConfig { branches: 3, ..tiny() },
            ModelConfig { kernel: 4, ..tiny() },
            ModelConfig { window: 1, ..tiny() },
            ModelConfig { width: 7, ..tiny() },
        ] {
            assert!(matches!(Model::<f32>::new(&c, 0), Err(Error::Contract(_))), "{c:?}");
        }
        assert!(matches!(Model::<f32>::new(&ModelConfig { scale: 2, ..tiny() }, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn output_is_four_times_larger_and_single_frames_work() {
        let m = Model::<f32>::new(&tiny(), 1).unwrap();
        let clip = synth_clip(SynthKind::MovingBars { velocity: (0.5, 0.0) }, 3, 8, 12, 0).unwrap();
        let sr = m.forward_clip(&clip).unwrap();
        assert_eq!((sr.len(), sr.width(), sr.height()), (3, 48, 32));
        let one = Clip::new(vec![clip.frames()[0].clone()]).unwrap();
        assert_eq!(m.forward_clip(&one).unwrap().len(), 1);
        assert!(m.forward_clip(&clip).unwrap() == sr);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let m = Model::<f32>::new(&tiny(), 1).unwrap();
        let g = Graph::with_params(&m.params);
        assert!(batch_loss(&g, &m.net, &[]).is_err());
    }
}
