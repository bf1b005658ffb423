//! Central finite-difference checks of graph gradients, for inputs and parameters alike.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

// Float supplies the math methods when std is not linked.
#[allow(unused_imports)]
use num_traits::Float;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub rel: f64,
    /// Entries sampled per tensor; `usize::MAX` checks every one.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { step: 1e-5, rel: 1e-3, per_tensor: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest relative error seen.
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Relative error with a floor at 1% of the tensor's largest gradient, so entries that are
/// numerically zero do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64, tensor_scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-2 * tensor_scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares backpropagated gradients of a random projection of `f`'s output against central
/// differences, for every input tensor and every parameter `f` touches.
pub fn check<F>(params: &ParamSet<f64>, inputs: &[(Vec<usize>, Vec<f64>)], f: F, opts: CheckOptions) -> Result<GradReport>
where
    F: Fn(&Graph<'_, f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights: Option<Vec<f64>> = None;
    let mut eval = |p: &ParamSet<f64>, xs: &[Vec<f64>], record: bool| -> Result<(f64, Vec<Vec<f64>>, Vec<Option<Vec<f64>>>)> {
        let g = if record { Graph::with_params(p) } else { Graph::inference(p) };
        let vars: Vec<Var<f64>> = inputs
            .iter()
            .zip(xs)
            .map(|((dims, _), x)| if record { g.leaf(dims, x.clone()) } else { g.constant(dims, x.clone()) })
            .collect();
        let y = f(&g, &vars)?;
        let w = weights.get_or_insert_with(|| (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let wv = g.constant(y.dims(), w.clone());
        let s = g.sum(&g.mul(&y, &wv));
        if !record {
            return Ok((s.item(), Vec::new(), Vec::new()));
        }
        let grads = g.backward(&s);
        let dx = vars.iter().map(|v| grads.wrt(v).map(|d| d.to_vec()).unwrap_or_else(|| alloc::vec![0.0; v.len()])).collect();
        Ok((s.item(), dx, g.param_grads(&grads)))
    };

    let x0: Vec<Vec<f64>> = inputs.iter().map(|(_, x)| x.clone()).collect();
    let (_, dx, dp) = eval(params, &x0, true)?;
    let mut sel = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradReport::default();
    let h = opts.step;

    let compare = |report: &mut GradReport, label: &str, analytic: &[f64], numeric: &[(usize, f64)]| {
        let scale = analytic.iter().chain(numeric.iter().map(|(_, n)| n)).fold(0.0f64, |m, v| m.max(v.abs()));
        for &(i, n) in numeric {
            let e = relative_error(analytic[i], n, scale);
            report.checked += 1;
            report.worst = report.worst.max(e);
            if !(e <= opts.rel) {
                report.failures.push(format!("{label}[{i}]: analytic {:.6e} numeric {n:.6e}", analytic[i]));
            }
        }
    };

    for (k, grad) in dx.iter().enumerate() {
        let mut numeric = Vec::new();
        for i in pick(grad.len(), opts.per_tensor, &mut sel) {
            let mut xs = x0.clone();
            xs[k][i] += h;
            let up = eval(params, &xs, false)?.0;
            xs[k][i] -= 2.0 * h;
            let down = eval(params, &xs, false)?.0;
            numeric.push((i, (up - down) / (2.0 * h)));
        }
        compare(&mut report, &format!("input{k}"), grad, &numeric);
    }

    let mut p = params.clone();
    for (id, param) in params.iter() {
        let Some(grad) = &dp[id.index()] else { continue };
        let mut numeric = Vec::new();
        for i in pick(param.data().len(), opts.per_tensor, &mut sel) {
            let v = param.data()[i];
            p.data_mut(id)[i] = v + h;
            let up = eval(&p, &x0, false)?.0;
            p.data_mut(id)[i] = v - h;
            let down = eval(&p, &x0, false)?.0;
            p.data_mut(id)[i] = v;
            numeric.push((i, (up - down) / (2.0 * h)));
        }
        compare(&mut report, param.name(), grad, &numeric);
    }
    Ok(report)
}

/// Adds uniform noise in `[-amount, amount)` to every parameter so zero-initialised layers
/// stop masking the gradients of the layers before them.
pub fn perturb(params: &mut ParamSet<f64>, amount: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in params.data_mut(id) {
            *v += rng.random_range(-amount..amount);
        }
    }
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    let n = dims.iter().product();
    (dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Names of the layers covered by [`layer_suite`], in order.
pub const SUITE: &[&str] = &[
    "selective_params",
    "lpe",
    "lksb",
    "bilinear_sample",
    "deformable_align",
    "mlp",
    "cssb",
    "issb",
    "issr",
    "charbonnier",
    "warp",
    "cssp_step",
    "extract_features",
];

fn off_grid(v: &mut [f64]) {
    // Bilinear interpolation has kinks at integer positions.
    for x in v {
        if (*x - x.round()).abs() < 0.05 {
            *x += 0.1;
        }
    }
}

/// Checks every differentiable layer of the network on a small random instance.
pub fn layer_suite(seed: u64, opts: CheckOptions) -> Result<Vec<(&'static str, GradReport)>> {
    use crate::blocks::{BlockKind, ConvBlock, DeformAlign, Lpe, Mlp, WindowGeometry};
    use crate::metrics::CharbonnierForm;
    use crate::params::Init;
    use crate::image::FlowField;
    use crate::propagation::{cssp_step, BranchOptions, BranchWeights, ComposeMode, Cssb, CssbOptions, PropScheme, StepInputs};
    use crate::reconstruction::{Issb, IssbOptions, Issr, IssrOptions};
    use crate::ssm::{Discretization, SelectiveProjection};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, &name) in SUITE.iter().enumerate() {
        let mut ps = ParamSet::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut p = Init::new(&mut ps, &mut init_rng);
        let (d, n) = (4, 3);
        let geo = WindowGeometry::new(4, 4, 2)?;
        let mode = if k % 2 == 0 { Discretization::ZeroOrderHold } else { Discretization::Simplified };
        let report = match name {
            "selective_params" => {
                let sp = SelectiveProjection::init(&mut p, d, 5, n, true, true);
                perturb(&mut ps, 0.2, seed);
                let x = random(&mut rng, &[d, 8], -1.0, 1.0);
                check(
                    &ps,
                    &[x],
                    |g, v| {
                        let s = sp.apply(g, &v[0], 4);
                        let parts = [s.z.unwrap(), s.x, s.b, s.c.unwrap(), s.dt];
                        let refs: Vec<&Var<f64>> = parts.iter().collect();
                        let a = s.a.reshape(&[5, 1]);
                        Ok(g.concat_channels(&[&g.concat_channels(&refs).reshape(&[(5 * 3 + 2 * n) * 8, 1]), &a]))
                    },
                    opts,
                )?
            }
            "lpe" => {
                let l = Lpe::init(&mut p, d);
                perturb(&mut ps, 0.2, seed);
                let x = random(&mut rng, &[d, geo.total()], -1.0, 1.0);
                check(&ps, &[x], |g, v| Ok(l.apply(g, &v[0], &geo)), opts)?
            }
            "lksb" => {
                let b = ConvBlock::init(&mut p, BlockKind::Lksb, d, 5)?;
                perturb(&mut ps, 0.2, seed);
                let x = random(&mut rng, &[d, 6, 6], -1.0, 1.0);
                check(&ps, &[x], |g, v| Ok(b.apply(g, &v[0])), opts)?
            }
            "bilinear_sample" => {
                let f = random(&mut rng, &[2, 5, 6], -1.0, 1.0);
                let mut c = random(&mut rng, &[2, 3, 4], -0.8, 5.6);
                off_grid(&mut c.1);
                check(&ps, &[f, c], |g, v| crate::blocks::bilinear_sample(g, &v[0], &v[1]), opts)?
            }
            "deformable_align" => {
                let a = DeformAlign::init(&mut p, d, 2 * d, d, 2, Some(d))?;
                perturb(&mut ps, 0.05, seed);
                let guide = random(&mut rng, &[d, 5, 5], -1.0, 1.0);
                let cat = random(&mut rng, &[2 * d, 5, 5], -1.0, 1.0);
                check(&ps, &[guide, cat], |g, v| a.apply(g, &v[0], &v[1]), opts)?
            }
            "mlp" => {
                let m = Mlp::init(&mut p, d);
                perturb(&mut ps, 0.2, seed);
                let x = random(&mut rng, &[d, 6], -1.0, 1.0);
                check(&ps, &[x], |g, v| Ok(m.apply(g, &v[0])), opts)?
            }
            "cssb" => {
                let c = Cssb::init(&mut p, CssbOptions { width: 8, state: n, lpe: true, separate_projection: true, mode });
                perturb(&mut ps, 0.2, seed);
                let one = WindowGeometry::whole(4, 4)?;
                let far = random(&mut rng, &[8, one.total()], -1.0, 1.0);
                let near = random(&mut rng, &[8, one.total()], -1.0, 1.0);
                check(&ps, &[far, near], |g, v| c.apply(g, &v[0], &v[1], &one), opts)?
            }
            "issb" => {
                let b = Issb::init(&mut p, IssbOptions { width: d, state: n, branches: 2, concat: true, mode })?;
                perturb(&mut ps, 0.2, seed);
                let f0 = random(&mut rng, &[d, 4, 4], -1.0, 1.0);
                let f1 = random(&mut rng, &[d, 4, 4], -1.0, 1.0);
                check(&ps, &[f0, f1], |g, v| b.apply(g, &[&v[0], &v[1]], &geo), opts)?
            }
            "issr" => {
                let issb = IssbOptions { width: d, state: n, branches: 2, concat: false, mode };
                let r = Issr::init(&mut p, IssrOptions { issb, block: BlockKind::Lksb, kernel: 3, depth: 1 })?;
                perturb(&mut ps, 0.2, seed);
                let f0 = random(&mut rng, &[d, 4, 4], -1.0, 1.0);
                let f1 = random(&mut rng, &[d, 4, 4], -1.0, 1.0);
                check(&ps, &[f0, f1], |g, v| r.apply(g, &[&v[0], &v[1]], &geo), opts)?
            }
            "warp" => {
                let f = random(&mut rng, &[2, 5, 5], -1.0, 1.0);
                let mut o = random(&mut rng, &[2, 5, 5], -0.9, 0.9);
                // Keep every sample point inside the map and off the pixel grid.
                for (i, v) in o.1.iter_mut().enumerate() {
                    let base = if i < 25 { i % 5 } else { (i - 25) / 5 } as f64;
                    *v = (base + *v).clamp(0.2, 3.8) - base;
                }
                let mut pos: Vec<f64> = o.1.clone();
                off_grid(&mut pos);
                o.1 = pos;
                check(&ps, &[f, o], |g, v| Ok(crate::blocks::warp(g, &v[0], &v[1])), opts)?
            }
            "cssp_step" => {
                let width = 8;
                let cssb = CssbOptions { width, state: n, lpe: true, separate_projection: true, mode };
                let bw = BranchWeights::init(&mut p, BranchOptions { cssb, scheme: PropScheme::T2T1, enabled: true, groups: 2 })?;
                perturb(&mut ps, 0.05, seed);
                let geo = WindowGeometry::new(8, 8, 4)?;
                let flow = |rng: &mut ChaCha8Rng| {
                    let mut f = FlowField::zeros(8, 8);
                    f.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.7f32..0.7));
                    f
                };
                let (o_tm2, o_tm1) = (flow(&mut rng), flow(&mut rng));
                let fs: Vec<_> = (0..3).map(|_| random(&mut rng, &[width, 8, 8], -1.0, 1.0)).collect();
                let r = check(
                    &ps,
                    &fs,
                    |g, v| {
                        let inp = StepInputs { f_tm2: &v[0], f_tm1: &v[1], f_t: &v[2], o_tm2: &o_tm2, o_tm1: &o_tm1 };
                        cssp_step(g, &bw, ComposeMode::Sum, &inp, &geo)
                    },
                    opts,
                )?;
                // The distant frame must actually reach the output.
                let g = Graph::with_params(&ps);
                let v: Vec<Var<f64>> = fs.iter().map(|(d, x)| g.leaf(d, x.clone())).collect();
                let inp = StepInputs { f_tm2: &v[0], f_tm1: &v[1], f_t: &v[2], o_tm2: &o_tm2, o_tm1: &o_tm1 };
                let y = cssp_step(&g, &bw, ComposeMode::Sum, &inp, &geo)?;
                let grads = g.backward(&g.sum(&g.square(&y)));
                let mut r = r;
                if !grads.wrt(&v[0]).is_some_and(|d| d.iter().any(|&x| x != 0.0)) {
                    r.failures.push("no gradient reaches the distant frame".into());
                }
                r
            }
            "extract_features" => {
                let e = crate::model::FeatureExtractor::init(&mut p, d);
                perturb(&mut ps, 0.1, seed);
                let x = random(&mut rng, &[3, 6, 6], 0.0, 1.0);
                check(&ps, &[x], |g, v| Ok(e.apply(g, &v[0])), opts)?
            }
            _ => {
                let pred = random(&mut rng, &[3, 4, 4], 0.0, 1.0);
                let target = random(&mut rng, &[3, 4, 4], 0.0, 1.0);
                let mut r = GradReport::default();
                for form in [CharbonnierForm::PerPixel, CharbonnierForm::Norm] {
                    let one = check(&ps, &[pred.clone(), target.clone()], |g, v| Ok(g.charbonnier(&v[0], &v[1], 1e-3, form)), opts)?;
                    r.checked += one.checked;
                    r.worst = r.worst.max(one.worst);
                    r.failures.extend(one.failures);
                }
                r
            }
        };
        out.push((name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient_and_passes_a_right_one() {
        let mut ps = ParamSet::new();
        let w = ps.add("w".into(), &[3], alloc::vec![0.5, -1.0, 2.0]);
        let x = (alloc::vec![3], alloc::vec![0.3, 0.1, -0.4]);
        let ok = check(&ps, &[x.clone()], |g, v| Ok(g.mul(&g.tanh(&v[0]), &g.param(w))), CheckOptions::default()).unwrap();
        assert!(ok.passed(), "{:?}", ok.failures);
        assert_eq!(ok.checked, 6);
        // Treating a parameter as a constant in the graph hides its gradient from backprop only.
        let bad = check(
            &ps,
            &[x],
            |g, v| {
                let p = g.param(w);
                let frozen = g.constant(&[3], p.to_vec());
                Ok(g.add(&g.mul(&v[0], &frozen), &g.scale(&p, 0.0)))
            },
            CheckOptions::default(),
        )
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn every_layer_matches_central_differences() {
        for (name, r) in layer_suite(1, CheckOptions::default()).unwrap() {
            assert!(r.passed(), "{name}: worst {:.3e} {:?}", r.worst, r.failures);
        }
    }
}
