use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use medvsr::commands::{self, ablate_pairs, Axis};
use medvsr::config::{RunConfig, RESOLVED_NAME};
use medvsr::io::{frame_name, load_clip, save_clip};
use medvsr::report::{read_csv, read_jsonl, FrameMetrics, Summary};
use medvsr::CliError;
use medvsr_core::data::{synth_clip, SynthKind};
use medvsr_core::image::{Clip, Frame};
use medvsr_core::training::ClipPair;
use tempfile::TempDir;

const TINY: &[&str] = &["width=8", "state=4", "window=4", "depth=1", "kernel=3", "patch=16", "frames=2", "batch=1"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_medvsr"))
}

fn hr_tree(root: &Path) -> PathBuf {
    let hr = root.join("hr");
    for (i, name) in ["alpha", "beta"].iter().enumerate() {
        let kind = if i == 0 { SynthKind::MovingBars { velocity: (1.0, 0.5) } } else { SynthKind::DriftingTexture { velocity: (-0.5, 1.0) } };
        save_clip(&hr.join(name), &synth_clip(kind, 3, 32, 32, i as u64).unwrap()).unwrap();
    }
    hr
}

/// HR tree plus a degraded LR tree and a tiny-model config.
fn setup(root: &Path) -> RunConfig {
    let hr = hr_tree(root);
    let mut cfg = RunConfig::default();
    cfg.apply(TINY).unwrap();
    cfg.hr_dir = Some(hr);
    cfg.out = root.join("lr");
    commands::degrade(&cfg).unwrap();
    cfg.lr_dir = Some(root.join("lr"));
    cfg.out = root.join("run");
    cfg
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn png_roundtrip_is_exact_on_the_8_bit_grid() {
    let tmp = TempDir::new().unwrap();
    let f = Frame::from_fn(7, 5, |c, y, x| ((c * 37 + y * 11 + x * 53) % 256) as f32 / 255.0);
    let clip = Clip::new(vec![f.clone(), f]).unwrap();
    save_clip(tmp.path(), &clip).unwrap();
    assert_eq!(load_clip(tmp.path()).unwrap(), clip);
}

#[test]
fn a_hole_in_the_numbering_names_the_missing_frame() {
    let tmp = TempDir::new().unwrap();
    save_clip(tmp.path(), &Clip::new(vec![Frame::filled(4, 4, 0.5); 4]).unwrap()).unwrap();
    fs::remove_file(tmp.path().join(frame_name(3))).unwrap();
    let err = load_clip(tmp.path()).unwrap_err();
    assert!(matches!(err, CliError::Gap { index: 3, .. }), "{err}");
    assert!(err.to_string().contains("frame_00003.png"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn degrading_twice_writes_identical_files() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::default();
    cfg.hr_dir = Some(hr_tree(tmp.path()));
    cfg.out = tmp.path().join("a");
    let manifest = commands::degrade(&cfg).unwrap();
    assert_eq!(manifest.len(), 2);
    cfg.out = tmp.path().join("b");
    commands::degrade(&cfg).unwrap();
    assert_eq!(tree_bytes(&tmp.path().join("a")).into_iter().filter(|(p, _)| !p.ends_with(RESOLVED_NAME)).collect::<Vec<_>>(), {
        tree_bytes(&tmp.path().join("b")).into_iter().filter(|(p, _)| !p.ends_with(RESOLVED_NAME)).collect::<Vec<_>>()
    });
    let lr = load_clip(&tmp.path().join("a").join("alpha")).unwrap();
    assert_eq!((lr.len(), lr.width(), lr.height()), (3, 8, 8));
}

#[test]
fn one_iteration_gives_one_checkpoint_and_one_log_row() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = setup(tmp.path());
    cfg.apply(&["iterations=1"]).unwrap();
    let o = commands::train(&cfg, None).unwrap();
    assert_eq!(o.checkpoints, vec![commands::checkpoint_path(&cfg.out, 1)]);
    assert_eq!(commands::read_loss_log(&cfg.out).unwrap().len(), 1);
    let resolved = RunConfig::from_file(&cfg.out.join(RESOLVED_NAME)).unwrap();
    assert_eq!(resolved.entries(), cfg.entries());
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = setup(tmp.path());
    cfg.apply(&["iterations=4", "checkpoint_every=2"]).unwrap();
    let whole = commands::train(&cfg, None).unwrap();
    let log = fs::read(cfg.out.join("loss.csv")).unwrap();
    let last = fs::read(commands::checkpoint_path(&cfg.out, 4)).unwrap();
    assert_eq!(whole.rows.len(), 4);

    // Simulate a crash after the second checkpoint: later rows and checkpoints are stale.
    let crashed = tmp.path().join("crashed");
    for (rel, bytes) in tree_bytes(&cfg.out) {
        let dst = crashed.join(&rel);
        fs::create_dir_all(dst.parent().unwrap()).unwrap();
        fs::write(dst, bytes).unwrap();
    }
    fs::remove_file(commands::checkpoint_path(&crashed, 4)).unwrap();
    let mut part = cfg.clone();
    part.out = crashed;
    let resumed = commands::train(&part, Some(&commands::checkpoint_path(&part.out, 2))).unwrap();
    assert_eq!(resumed.rows.len(), 2);
    assert_eq!(fs::read(part.out.join("loss.csv")).unwrap(), log);
    assert_eq!(fs::read(commands::checkpoint_path(&part.out, 4)).unwrap(), last);
}

#[test]
fn inference_is_repeatable_and_eval_aggregates_frames() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = setup(tmp.path());
    cfg.apply(&["iterations=1"]).unwrap();
    let ck = commands::train(&cfg, None).unwrap().checkpoints.pop().unwrap();
    let lr = cfg.lr_dir.clone().unwrap();
    let hr = cfg.hr_dir.clone().unwrap();
    cfg.out = tmp.path().join("sr1");
    commands::infer(&cfg, &ck, &lr).unwrap();
    cfg.out = tmp.path().join("sr2");
    commands::infer(&cfg, &ck, &lr).unwrap();
    let frames = |d: &str| tree_bytes(&tmp.path().join(d)).into_iter().filter(|(p, _)| !p.ends_with(RESOLVED_NAME)).collect::<Vec<_>>();
    assert_eq!(frames("sr1").len(), 6);
    assert_eq!(frames("sr1"), frames("sr2"));

    cfg.out = tmp.path().join("eval");
    let (clips, s) = commands::eval(&cfg, &tmp.path().join("sr1"), &hr).unwrap();
    assert_eq!((s.clips, s.frames), (2, 6));
    let rows: Vec<FrameMetrics> = read_csv(&cfg.out.join("metrics.csv")).unwrap();
    let mean = rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64;
    assert!((s.mean_psnr - mean).abs() < 1e-12);
    let per_clip = clips.iter().map(|c| c.mean_psnr).sum::<f64>() / 2.0;
    assert!((s.clip_mean_psnr - per_clip).abs() < 1e-12);
    let stored: Vec<Summary> = read_jsonl(&cfg.out.join("summary.jsonl")).unwrap();
    assert_eq!(stored, vec![s]);
}

#[test]
fn kernel_ablation_reports_growing_parameter_counts() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply(TINY).unwrap();
    cfg.apply(&["iterations=1"]).unwrap();
    cfg.out = tmp.path().to_path_buf();
    let hr = synth_clip(SynthKind::MovingBars { velocity: (1.0, 0.0) }, 2, 16, 16, 0).unwrap();
    let lr = medvsr_core::data::degrade(&hr, &Default::default()).unwrap();
    let data = [ClipPair { hr, lr }];
    let rows = ablate_pairs(&cfg, Axis::Lksb, &data, &data).unwrap();
    let lksb: Vec<usize> = rows.iter().filter(|r| r.variant.starts_with("lksb")).map(|r| r.params).collect();
    assert_eq!(lksb.len(), 4);
    assert!(lksb.windows(2).all(|p| p[0] < p[1]), "{lksb:?}");
    assert!(tmp.path().join("ablation_lksb.csv").exists());
}

#[test]
fn exit_codes_separate_usage_from_numeric_failures() {
    let tmp = TempDir::new().unwrap();
    let out = |args: &[&str]| bin().args(args).output().unwrap();

    assert_eq!(out(&[]).status.code(), Some(2));
    let unknown = out(&["ablate", "--axis", "nope", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("nope"));
    assert_eq!(out(&["train", "--override", "widht=3"]).status.code(), Some(2));

    let clip = tmp.path().join("gappy");
    save_clip(&clip, &Clip::new(vec![Frame::filled(4, 4, 0.5); 4]).unwrap()).unwrap();
    fs::remove_file(clip.join(frame_name(3))).unwrap();
    let gap = out(&["flow-error", "--input", clip.to_str().unwrap(), "--out", tmp.path().join("fe").to_str().unwrap()]);
    assert_eq!(gap.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&gap.stderr).contains("frame_00003.png"));

    let cfg = setup(tmp.path());
    let run = tmp.path().join("blowup");
    let mut args: Vec<String> = vec!["train".into(), "--out".into(), run.display().to_string()];
    let keys = [
        format!("hr_dir={}", cfg.hr_dir.unwrap().display()),
        format!("lr_dir={}", cfg.lr_dir.unwrap().display()),
        "iterations=5".into(),
        "lr=1e38".into(),
    ];
    for kv in TINY.iter().map(|s| s.to_string()).chain(keys) {
        args.push("--override".into());
        args.push(kv);
    }
    let blown = bin().args(&args).output().unwrap();
    assert_eq!(blown.status.code(), Some(3), "{}", String::from_utf8_lossy(&blown.stderr));
    assert!(run.join("failure.txt").exists());
}

