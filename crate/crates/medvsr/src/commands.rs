//! The work behind each CLI verb, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use medvsr_core::checkpoint::Checkpoint;
use medvsr_core::data::{crop_to_multiple, degrade as degrade_clip, DegradationSpec, FlowEstimator, SCALE};
use medvsr_core::image::Clip;
use medvsr_core::metrics::{flow_consistency_error, mean, MetricReport};
use medvsr_core::model::{Model, ModelConfig};
use medvsr_core::training::{ClipPair, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{is_single_clip, list_clips, load_clip, save_clip};
use crate::report::{
    read_csv, write_csv, write_jsonl, AblationRecord, ClipMetrics, FlowErrorRecord, FrameMetrics, LossLog, LossRecord,
    ManifestRecord, Summary,
};

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("{key} is not set")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

/// Per-clip degradation seeds, drawn in sorted clip order from the run seed.
pub fn clip_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Mirrors the HR tree in `hr_dir` into an LR tree under `out`, with a seed manifest.
pub fn degrade(cfg: &RunConfig) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let hr_dir = required(&cfg.hr_dir, "hr_dir")?;
    let clips = list_clips(hr_dir)?;
    create_dir(&cfg.out)?;
    cfg.write_resolved(&cfg.out)?;
    let mut manifest = Vec::with_capacity(clips.len());
    for ((name, dir), seed) in clips.iter().zip(clip_seeds(cfg.seed, clips.len())) {
        let hr = load_clip(dir)?;
        let spec = DegradationSpec { scale: cfg.model.scale, noise_std: cfg.noise_std, seed };
        let lr = degrade_clip(&hr, &spec)?;
        save_clip(&cfg.out.join(name), &lr)?;
        manifest.push(ManifestRecord { clip: name.clone(), frames: lr.len(), seed, noise_std: cfg.noise_std });
    }
    write_csv(&cfg.out.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

/// Pairs HR and LR clips by name, centre-cropping HR to a multiple of the scale.
pub fn load_pairs(hr_dir: &Path, lr_dir: &Path) -> Result<Vec<(String, ClipPair)>> {
    let hr = list_clips(hr_dir)?;
    let lr = list_clips(lr_dir)?;
    let mut out = Vec::with_capacity(hr.len());
    for (name, hdir) in &hr {
        let (_, ldir) = lr
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| CliError::Usage(format!("clip {name} has no LR counterpart in {}", lr_dir.display())))?;
        let hclip = load_clip(hdir)?;
        let hclip = Clip::new(hclip.frames().iter().map(|f| crop_to_multiple(f, SCALE)).collect::<medvsr_core::Result<Vec<_>>>()?)?;
        let lclip = load_clip(ldir)?;
        if hclip.len() != lclip.len() || hclip.width() != SCALE * lclip.width() || hclip.height() != SCALE * lclip.height() {
            return Err(CliError::Usage(format!(
                "clip {name}: HR {}×{}×{} does not match LR {}×{}×{} at ×{SCALE}",
                hclip.len(),
                hclip.width(),
                hclip.height(),
                lclip.len(),
                lclip.width(),
                lclip.height()
            )));
        }
        out.push((name.clone(), ClipPair { hr: hclip, lr: lclip }));
    }
    Ok(out)
}

/// Fails when an explicitly configured model key disagrees with a checkpoint.
pub fn check_compatible(cfg: &RunConfig, stored: &ModelConfig) -> Result<()> {
    let stored: Vec<(&str, String)> = stored.entries();
    let wanted = cfg.model.entries();
    for key in cfg.explicit_model_keys() {
        let a = stored.iter().find(|(k, _)| *k == key).map(|(_, v)| v);
        let b = wanted.iter().find(|(k, _)| *k == key).map(|(_, v)| v);
        if a != b {
            return Err(CliError::Usage(format!(
                "config sets {key} = {}, checkpoint has {}",
                b.map(String::as_str).unwrap_or("?"),
                a.map(String::as_str).unwrap_or("?")
            )));
        }
    }
    Ok(())
}

pub fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:08}.ckpt"))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn train_meta(cfg: &RunConfig) -> Vec<(String, String)> {
    let keep = ["iterations", "lr", "min_lr", "batch", "patch", "frames", "augment", "seed"];
    cfg.entries().into_iter().filter(|(k, _)| keep.contains(&k.as_str())).collect()
}

/// Result of a training run.
pub struct TrainOutcome {
    pub rows: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub trainer: Trainer,
}

/// Trains on in-memory pairs, logging to `out/loss.csv` and checkpointing into `out/checkpoints`.
pub fn train_pairs(cfg: &RunConfig, data: &[ClipPair], resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    cfg.write_resolved(&cfg.out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            check_compatible(cfg, ck.model.config())?;
            Trainer::resume(ck, cfg.train)
        }
        None => Trainer::new(&cfg.model, cfg.train, cfg.seed)?,
    };
    let mut log = LossLog::open(&cfg.out.join("loss.csv"), trainer.iteration)?;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    while !trainer.finished() {
        let row = match trainer.step(data) {
            Ok(r) => r,
            Err(e) => {
                let diag = cfg.out.join("failure.txt");
                let text = format!("iteration {}\n{e}\n", trainer.iteration + 1);
                fs::write(&diag, text).map_err(CliError::io(&diag))?;
                return Err(e.into());
            }
        };
        let rec = LossRecord { iteration: row.iteration, loss: row.loss, lr: row.lr };
        log.push(&rec)?;
        rows.push(rec);
        let every = cfg.checkpoint_every;
        if (every > 0 && trainer.iteration % every == 0) || trainer.finished() {
            let path = checkpoint_path(&cfg.out, trainer.iteration);
            create_dir(path.parent().expect("checkpoint directory"))?;
            fs::write(&path, trainer.checkpoint(train_meta(cfg)).to_bytes()).map_err(CliError::io(&path))?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome { rows, checkpoints, trainer })
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let pairs = load_pairs(required(&cfg.hr_dir, "hr_dir")?, required(&cfg.lr_dir, "lr_dir")?)?;
    let data: Vec<ClipPair> = pairs.into_iter().map(|(_, p)| p).collect();
    train_pairs(cfg, &data, resume)
}

/// Super-resolves every clip under `input` with the checkpointed weights, mirroring names under `out`.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, input: &Path) -> Result<Vec<PathBuf>> {
    let ck = read_checkpoint(checkpoint)?;
    check_compatible(cfg, ck.model.config())?;
    let single = is_single_clip(input)?;
    let clips = list_clips(input)?;
    create_dir(&cfg.out)?;
    let mut resolved = cfg.clone();
    resolved.model = ck.model.config().clone();
    resolved.write_resolved(&cfg.out)?;
    let mut written = Vec::new();
    for (name, dir) in clips {
        let lr = load_clip(&dir)?;
        let sr = ck.model.forward_clip(&lr)?;
        let dst = if single { cfg.out.clone() } else { cfg.out.join(&name) };
        save_clip(&dst, &sr)?;
        written.push(dst);
    }
    Ok(written)
}

/// Per-clip and aggregate PSNR/SSIM of `sr` against `gt`.
pub fn eval(cfg: &RunConfig, sr: &Path, gt: &Path) -> Result<(Vec<ClipMetrics>, Summary)> {
    let sr_clips = list_clips(sr)?;
    let gt_clips = list_clips(gt)?;
    let single = is_single_clip(sr)? && is_single_clip(gt)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    if !single && sr_clips.len() != gt_clips.len() {
        return Err(CliError::Usage(format!("{} SR clips for {} ground-truth clips", sr_clips.len(), gt_clips.len())));
    }
    for (name, gdir) in &gt_clips {
        let sdir = if single {
            &sr_clips[0].1
        } else {
            &sr_clips
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| CliError::Usage(format!("clip {name} missing from {}", sr.display())))?
                .1
        };
        let (s, g) = (load_clip(sdir)?, load_clip(gdir)?);
        if s.len() != g.len() {
            return Err(CliError::Usage(format!("clip {name}: {} SR frames for {} ground-truth frames", s.len(), g.len())));
        }
        let m = MetricReport::evaluate(&s, &g)?;
        for (f, (&p, &q)) in m.psnr.iter().zip(&m.ssim).enumerate() {
            rows.push(FrameMetrics { clip: name.clone(), frame: f + 1, psnr: p, ssim: q });
        }
        reports.push(ClipMetrics {
            clip: name.clone(),
            frames: s.len(),
            mean_psnr: m.mean_psnr(),
            mean_ssim: m.mean_ssim(),
            psnr: m.psnr,
            ssim: m.ssim,
        });
    }
    let col = |f: fn(&FrameMetrics) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let summary = Summary {
        clips: reports.len(),
        frames: rows.len(),
        mean_psnr: col(|r| r.psnr),
        mean_ssim: col(|r| r.ssim),
        clip_mean_psnr: mean(&reports.iter().map(|r| r.mean_psnr).collect::<Vec<_>>()),
        clip_mean_ssim: mean(&reports.iter().map(|r| r.mean_ssim).collect::<Vec<_>>()),
    };
    create_dir(&cfg.out)?;
    cfg.write_resolved(&cfg.out)?;
    write_jsonl(&cfg.out.join("metrics.jsonl"), &reports)?;
    write_csv(&cfg.out.join("metrics.csv"), &rows)?;
    write_jsonl(&cfg.out.join("summary.jsonl"), std::slice::from_ref(&summary))?;
    Ok((reports, summary))
}

/// Mean forward/backward flow inconsistency per clip under the configured estimator.
pub fn flow_error(cfg: &RunConfig, input: &Path) -> Result<(Vec<FlowErrorRecord>, f64)> {
    let est: FlowEstimator = cfg.model.flow();
    let mut rows = Vec::new();
    for (name, dir) in list_clips(input)? {
        let clip = load_clip(&dir)?;
        rows.push(FlowErrorRecord { clip: name, frames: clip.len(), error: flow_consistency_error(&clip, est)? });
    }
    let m = mean(&rows.iter().map(|r| r.error).collect::<Vec<_>>());
    create_dir(&cfg.out)?;
    cfg.write_resolved(&cfg.out)?;
    write_csv(&cfg.out.join("flow_error.csv"), &rows)?;
    Ok((rows, m))
}

/// Ablation axes and their variants as config overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Cssb,
    Issb,
    Lksb,
    Prop,
    Window,
}

impl std::str::FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cssb" => Axis::Cssb,
            "issb" => Axis::Issb,
            "lksb" => Axis::Lksb,
            "prop" => Axis::Prop,
            "window" => Axis::Window,
            _ => return Err(CliError::Usage(format!("unknown ablation axis {s:?} (cssb|issb|lksb|prop|window)"))),
        })
    }
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Cssb, Axis::Issb, Axis::Lksb, Axis::Prop, Axis::Window];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Cssb => "cssb",
            Axis::Issb => "issb",
            Axis::Lksb => "lksb",
            Axis::Prop => "prop",
            Axis::Window => "window",
        }
    }

    /// `(variant name, overrides)`; the first row is the reference configuration.
    pub fn variants(self) -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
        match self {
            Axis::Cssb => vec![
                ("full", vec![]),
                ("no_lpe", vec![("lpe", "false")]),
                ("no_lw", vec![("cssb_windows", "false")]),
                ("no_sp", vec![("separate_projection", "false")]),
            ],
            Axis::Issb => vec![("full", vec![]), ("no_lw", vec![("issb_windows", "false")]), ("no_cat", vec![("concat", "false")])],
            Axis::Lksb => vec![
                ("lksb_k3", vec![("block", "lksb"), ("kernel", "3")]),
                ("lksb_k5", vec![("block", "lksb"), ("kernel", "5")]),
                ("lksb_k7", vec![("block", "lksb"), ("kernel", "7")]),
                ("lksb_k9", vec![("block", "lksb"), ("kernel", "9")]),
                ("res", vec![("block", "res"), ("kernel", "3")]),
                ("depthwise", vec![("block", "depthwise"), ("kernel", "3")]),
                ("partial", vec![("block", "partial"), ("kernel", "3")]),
            ],
            Axis::Prop => ["t2t", "t1t", "t2t1", "both"].into_iter().map(|s| (s, vec![("prop_scheme", s)])).collect(),
            Axis::Window => ["4", "8", "16", "32"].into_iter().map(|s| (s, vec![("window", s)])).collect(),
        }
    }
}

/// Mean PSNR/SSIM of `model` over validation pairs, every frame weighted equally.
pub fn validate_model(model: &Model<f32>, val: &[ClipPair]) -> Result<(f64, f64)> {
    let mut p = Vec::new();
    let mut s = Vec::new();
    for pair in val {
        let m = MetricReport::evaluate(&model.forward_clip(&pair.lr)?, &pair.hr)?;
        p.extend(m.psnr);
        s.extend(m.ssim);
    }
    Ok((mean(&p), mean(&s)))
}

/// Trains every variant of `axis` with the same seed and schedule; writes `ablation_<axis>.csv`.
pub fn ablate_pairs(cfg: &RunConfig, axis: Axis, train: &[ClipPair], val: &[ClipPair]) -> Result<Vec<AblationRecord>> {
    create_dir(&cfg.out)?;
    cfg.write_resolved(&cfg.out)?;
    let mut rows = Vec::new();
    for (name, overrides) in axis.variants() {
        let mut v = cfg.clone();
        for (k, val) in &overrides {
            v.set(k, val)?;
        }
        v.out = cfg.out.join(axis.name()).join(name);
        // Only the final checkpoint is kept per variant.
        v.checkpoint_every = 0;
        let outcome = train_pairs(&v, train, None)?;
        let model = &outcome.trainer.model;
        let (psnr, ssim) = validate_model(model, val)?;
        rows.push(AblationRecord { variant: name.to_string(), params: model.num_params(), psnr, ssim });
    }
    write_csv(&cfg.out.join(format!("ablation_{}.csv", axis.name())), &rows)?;
    Ok(rows)
}

pub fn ablate(cfg: &RunConfig, axis: Axis) -> Result<Vec<AblationRecord>> {
    cfg.validate()?;
    let train: Vec<ClipPair> =
        load_pairs(required(&cfg.hr_dir, "hr_dir")?, required(&cfg.lr_dir, "lr_dir")?)?.into_iter().map(|(_, p)| p).collect();
    let val = match (&cfg.val_hr_dir, &cfg.val_lr_dir) {
        (Some(h), Some(l)) => load_pairs(h, l)?.into_iter().map(|(_, p)| p).collect(),
        (None, None) => train.clone(),
        _ => return Err(CliError::Usage("set both val_hr_dir and val_lr_dir, or neither".into())),
    };
    ablate_pairs(cfg, axis, &train, &val)
}

/// Loss rows of a finished run.
pub fn read_loss_log(out: &Path) -> Result<Vec<LossRecord>> {
    read_csv(&out.join("loss.csv"))
}
