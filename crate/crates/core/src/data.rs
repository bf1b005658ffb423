//! Degradation, patch sampling, procedural clips and flow estimation.

use alloc::vec::Vec;

// Float supplies the math methods when std is not linked.
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::image::{Clip, FlowField, Frame};

/// Upscaling factor the model is built for.
pub const SCALE: usize = 4;

/// Bicubic downsampling followed by additive Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    /// Standard deviation on the 0–255 scale.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec { scale: SCALE, noise_std: 15.0, seed: 0 }
    }
}

/// Centre-crops a frame so both sides are multiples of `m`.
pub fn crop_to_multiple(frame: &Frame, m: usize) -> Result<Frame> {
    let (w, h) = ((frame.width() / m) * m, (frame.height() / m) * m);
    contract!(w > 0 && h > 0, "frame {}×{} smaller than scale {m}", frame.width(), frame.height());
    frame.crop((frame.width() - w) / 2, (frame.height() - h) / 2, w, h)
}

/// Downsamples every frame, adds noise and clamps to `[0, 1]`.
pub fn degrade(hr: &Clip, spec: &DegradationSpec) -> Result<Clip> {
    if spec.scale != SCALE {
        return Err(Error::Unsupported(alloc::format!("scale {} (only {SCALE} is supported)", spec.scale)));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Domain(alloc::format!("noise std {} must be finite and non-negative", spec.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.noise_std / 255.0;
    let frames = hr
        .frames()
        .iter()
        .map(|f| {
            let f = crop_to_multiple(f, spec.scale)?;
            let mut lr = f.resize(f.width() / spec.scale, f.height() / spec.scale);
            if sigma > 0.0 {
                for v in lr.data_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = (*v as f64 + sigma * n) as f32;
                }
            }
            Ok(lr.clamped())
        })
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames)
}

/// Offsets of one training crop, in LR pixels and frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub t0: usize,
    pub x0: usize,
    pub y0: usize,
}

/// Draws a temporal window of `t` frames and an aligned spatial crop of side
/// `size` (HR pixels), returning `(hr_patch, lr_patch)`.
pub fn sample_patch_with<R: Rng>(hr: &Clip, lr: &Clip, size: usize, t: usize, rng: &mut R) -> Result<(Clip, Clip, PatchWindow)> {
    contract!(size % SCALE == 0 && size > 0, "patch side {size} not a positive multiple of {SCALE}");
    contract!(hr.len() == lr.len(), "HR clip has {} frames, LR {}", hr.len(), lr.len());
    contract!(t >= 1 && t <= lr.len(), "need {t} frames, clip has {}", lr.len());
    contract!(
        hr.width() == lr.width() * SCALE && hr.height() == lr.height() * SCALE,
        "HR {}×{} is not {SCALE}× LR {}×{}",
        hr.width(),
        hr.height(),
        lr.width(),
        lr.height()
    );
    let ls = size / SCALE;
    contract!(ls <= lr.width() && ls <= lr.height(), "patch {size} larger than frames {}×{}", hr.width(), hr.height());
    let win = PatchWindow {
        t0: rng.random_range(0..=lr.len() - t),
        x0: rng.random_range(0..=lr.width() - ls),
        y0: rng.random_range(0..=lr.height() - ls),
    };
    let mut hp = Vec::with_capacity(t);
    let mut lp = Vec::with_capacity(t);
    for i in win.t0..win.t0 + t {
        hp.push(hr.frames()[i].crop(win.x0 * SCALE, win.y0 * SCALE, size, size)?);
        lp.push(lr.frames()[i].crop(win.x0, win.y0, ls, ls)?);
    }
    Ok((Clip::new(hp)?, Clip::new(lp)?, win))
}

/// A dihedral transform, an optional time reversal and a colour-channel permutation,
/// applied identically to an HR patch and its LR counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip_x: bool,
    pub flip_y: bool,
    pub transpose: bool,
    pub reverse: bool,
    /// Output channel `c` reads input channel `channels[c]`.
    pub channels: [usize; 3],
}

impl Augment {
    pub const IDENTITY: Augment = Augment { flip_x: false, flip_y: false, transpose: false, reverse: false, channels: [0, 1, 2] };

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        Augment {
            flip_x: rng.random(),
            flip_y: rng.random(),
            transpose: rng.random(),
            reverse: rng.random(),
            channels: PERMS[rng.random_range(0..PERMS.len())],
        }
    }

    pub fn frame(&self, f: &Frame) -> Frame {
        let (w, h) = (f.width(), f.height());
        let (ow, oh) = if self.transpose { (h, w) } else { (w, h) };
        Frame::from_fn(ow, oh, |c, y, x| {
            let (x, y) = if self.transpose { (y, x) } else { (x, y) };
            let x = if self.flip_x { w - 1 - x } else { x };
            let y = if self.flip_y { h - 1 - y } else { y };
            f.get(self.channels[c], y, x)
        })
    }

    pub fn clip(&self, clip: &Clip) -> Result<Clip> {
        let mut frames: Vec<Frame> = clip.frames().iter().map(|f| self.frame(f)).collect();
        if self.reverse {
            frames.reverse();
        }
        Clip::new(frames)
    }
}

/// [`sample_patch_with`] from a fresh seeded generator.
pub fn sample_patch(hr: &Clip, lr: &Clip, size: usize, t: usize, seed: u64) -> Result<(Clip, Clip)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_patch_with(hr, lr, size, t, &mut rng).map(|(h, l, _)| (h, l))
}

/// Gratings summed in a synthetic texture.
pub const TEXTURE_GRATINGS: usize = 24;

/// Edge softness of synthetic bars, in HR pixels.
pub const BAR_EDGE: f64 = 3.0;

/// Procedural clip families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthKind {
    /// Soft-edged coloured bars translating at `velocity` px/frame.
    MovingBars { velocity: (f64, f64) },
    /// A sum of random gratings translating at `velocity` px/frame.
    DriftingTexture { velocity: (f64, f64) },
    /// A static texture displaced by independent integer shifts in `[-max_shift, max_shift]`.
    Jitter { max_shift: i32 },
}

struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

fn gratings(rng: &mut ChaCha8Rng, count: usize, min_period: f64, max_period: f64) -> Vec<Grating> {
    (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..core::f64::consts::PI);
            let period = rng.random_range(min_period..max_period);
            let k = 2.0 * core::f64::consts::PI / period;
            Grating {
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                phase: rng.random_range(0.0..2.0 * core::f64::consts::PI),
                amp: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            }
        })
        .collect()
}

fn texture(gs: &[Grating], c: usize, x: f64, y: f64) -> f64 {
    let s: f64 = gs.iter().map(|g| g.amp[c] * (g.kx * x + g.ky * y + g.phase).sin()).sum();
    0.5 + 0.35 * s / (gs.len() as f64).sqrt()
}

/// Per-frame integer displacements of a jitter clip.
pub fn jitter_shifts(frames: usize, max_shift: i32, seed: u64) -> Vec<(i32, i32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17_7e55);
    (0..frames)
        .map(|_| (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift)))
        .collect()
}

/// Renders a deterministic procedural clip of `t` frames.
pub fn synth_clip(kind: SynthKind, t: usize, height: usize, width: usize, seed: u64) -> Result<Clip> {
    contract!(t >= 1 && height > 0 && width > 0, "empty synthetic clip");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Frame> = match kind {
        SynthKind::MovingBars { velocity } => {
            let theta: f64 = rng.random_range(0.0..core::f64::consts::PI);
            let period: f64 = rng.random_range(12.0..28.0);
            let duty: f64 = rng.random_range(0.3..0.7);
            let lo: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.1..0.45));
            let hi: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.55..0.9));
            let (nx, ny) = (theta.cos(), theta.sin());
            let shade = gratings(&mut rng, 2, 60.0, 120.0);
            (0..t)
                .map(|i| {
                    let (ox, oy) = (velocity.0 * i as f64, velocity.1 * i as f64);
                    Frame::from_fn(width, height, |c, y, x| {
                        let (px, py) = (x as f64 + 0.5 - ox, y as f64 + 0.5 - oy);
                        let u = (px * nx + py * ny) / period;
                        let frac = u - u.floor();
                        // Signed distance to the nearest bar edge in pixels, softened over a few pixels.
                        let d = if frac < duty { frac.min(duty - frac) } else { -(frac - duty).min(1.0 - frac) };
                        let edge = 0.5 + 0.5 * (d * period / BAR_EDGE).tanh();
                        let base = lo[c] + (hi[c] - lo[c]) * edge;
                        (base + 0.3 * (texture(&shade, c, px, py) - 0.5)) as f32
                    })
                })
                .collect()
        }
        SynthKind::DriftingTexture { velocity } => {
            let gs = gratings(&mut rng, TEXTURE_GRATINGS, 10.0, 64.0);
            (0..t)
                .map(|i| {
                    let (ox, oy) = (velocity.0 * i as f64, velocity.1 * i as f64);
                    Frame::from_fn(width, height, |c, y, x| texture(&gs, c, x as f64 + 0.5 - ox, y as f64 + 0.5 - oy) as f32)
                })
                .collect()
        }
        SynthKind::Jitter { max_shift } => {
            contract!(max_shift >= 0, "negative jitter amplitude {max_shift}");
            let gs = gratings(&mut rng, TEXTURE_GRATINGS, 10.0, 64.0);
            jitter_shifts(t, max_shift, seed)
                .into_iter()
                .map(|(sx, sy)| {
                    Frame::from_fn(width, height, |c, y, x| {
                        texture(&gs, c, x as f64 + 0.5 - sx as f64, y as f64 + 0.5 - sy as f64) as f32
                    })
                })
                .collect()
        }
    };
    Clip::new(frames.into_iter().map(Frame::clamped).collect())
}

/// `count` clips alternating moving bars and drifting textures, each with its own velocity and seed.
pub fn synth_corpus(count: usize, t: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Clip>> {
    (0..count as u64)
        .map(|i| {
            let kind = if i % 2 == 0 {
                SynthKind::MovingBars { velocity: (0.6 + 0.1 * i as f64, -0.4) }
            } else {
                SynthKind::DriftingTexture { velocity: (-0.5, 0.3 + 0.1 * i as f64) }
            };
            synth_clip(kind, t, height, width, seed.wrapping_add(i))
        })
        .collect()
}

/// Optical-flow stand-ins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowEstimator {
    Zero,
    /// Exhaustive block matching on the sum of absolute RGB differences.
    BlockMatch { block: usize, radius: usize },
}

impl Default for FlowEstimator {
    fn default() -> Self {
        FlowEstimator::BlockMatch { block: 8, radius: 4 }
    }
}

/// Flow `o` with `a(p) ≈ b(p + o(p))`.
pub fn estimate_flow(a: &Frame, b: &Frame, est: FlowEstimator) -> Result<FlowField> {
    contract!(a.same_shape(b), "frames {}×{} and {}×{} differ", a.width(), a.height(), b.width(), b.height());
    let (w, h) = (a.width(), a.height());
    let mut flow = FlowField::zeros(w, h);
    let FlowEstimator::BlockMatch { block, radius } = est else {
        return Ok(flow);
    };
    contract!(block > 0, "block size must be positive");
    let r = radius as isize;
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (bw, bh) = (block.min(w - bx), block.min(h - by));
            let mut best: Option<(f64, isize, (isize, isize))> = None;
            for dx in -r..=r {
                for dy in -r..=r {
                    let (x0, y0) = (bx as isize + dx, by as isize + dy);
                    if x0 < 0 || y0 < 0 || x0 as usize + bw > w || y0 as usize + bh > h {
                        continue;
                    }
                    let mut sad = 0.0f64;
                    for c in 0..3 {
                        for y in 0..bh {
                            for x in 0..bw {
                                let p = a.get(c, by + y, bx + x);
                                let q = b.get(c, y0 as usize + y, x0 as usize + x);
                                sad += (p - q).abs() as f64;
                            }
                        }
                    }
                    let cand = (sad, dx * dx + dy * dy, (dx, dy));
                    let better = match &best {
                        None => true,
                        Some(b) => (cand.0, cand.1, cand.2) < (b.0, b.1, b.2),
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, (dx, dy)) = best.expect("zero displacement is always a candidate");
            for y in by..by + bh {
                for x in bx..bx + bw {
                    flow.set(x, y, (dx as f32, dy as f32));
                }
            }
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn augmentation_permutes_pixels_and_commutes_with_noiseless_degradation() {
        let hr = synth_clip(SynthKind::DriftingTexture { velocity: (0.5, 0.25) }, 3, 32, 24, 4).unwrap();
        assert!(Augment::IDENTITY.clip(&hr).unwrap() == hr);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = DegradationSpec { noise_std: 0.0, ..Default::default() };
        for _ in 0..12 {
            let a = Augment::random(&mut rng);
            let out = a.clip(&hr).unwrap();
            let mut before: Vec<u32> = hr.frames().iter().flat_map(|f| f.data().iter().map(|v| v.to_bits())).collect();
            let mut after: Vec<u32> = out.frames().iter().flat_map(|f| f.data().iter().map(|v| v.to_bits())).collect();
            before.sort_unstable();
            after.sort_unstable();
            assert_eq!(before, after);
            let x = degrade(&out, &clean).unwrap();
            let y = a.clip(&degrade(&hr, &clean).unwrap()).unwrap();
            let worst = x.frames().iter().zip(y.frames()).flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs())).fold(0.0f32, f32::max);
            assert!(worst < 1e-5, "{a:?}: {worst}");
        }
    }

    #[test]
    fn constant_frames_degrade_to_the_same_constant() {
        let hr = Clip::new(vec![Frame::filled(32, 24, 0.4)]).unwrap();
        let lr = degrade(&hr, &DegradationSpec { noise_std: 0.0, ..Default::default() }).unwrap();
        assert_eq!((lr.width(), lr.height()), (8, 6));
        assert!(lr.frames()[0].data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn indivisible_frames_are_centre_cropped() {
        let f = Frame::from_fn(10, 9, |_, y, x| (y * 10 + x) as f32);
        let c = crop_to_multiple(&f, 4).unwrap();
        assert_eq!((c.width(), c.height()), (8, 8));
        assert_eq!(c.get(0, 0, 0), 1.0);
    }

    #[test]
    fn patch_offsets_are_aligned() {
        let hr = synth_clip(SynthKind::DriftingTexture { velocity: (0.5, 0.0) }, 5, 64, 48, 3).unwrap();
        let lr = degrade(&hr, &DegradationSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (hp, lp, win) = sample_patch_with(&hr, &lr, 16, 3, &mut rng).unwrap();
        assert_eq!(hp.frames()[0], hr.frames()[win.t0].crop(win.x0 * 4, win.y0 * 4, 16, 16).unwrap());
        assert_eq!(lp.frames()[2], lr.frames()[win.t0 + 2].crop(win.x0, win.y0, 4, 4).unwrap());
        let sq = synth_clip(SynthKind::DriftingTexture { velocity: (0.5, 0.0) }, 2, 32, 32, 3).unwrap();
        let sq_lr = degrade(&sq, &DegradationSpec::default()).unwrap();
        let (h2, l2) = sample_patch(&sq, &sq_lr, 32, 2, 1).unwrap();
        assert_eq!((h2, l2), (sq, sq_lr));
    }

    #[test]
    fn zero_estimator_returns_zero_and_block_match_prefers_zero_on_ties() {
        let f = Frame::filled(16, 16, 0.5);
        assert!(estimate_flow(&f, &f, FlowEstimator::Zero).unwrap().is_zero());
        assert!(estimate_flow(&f, &f, FlowEstimator::default()).unwrap().is_zero());
    }
}
