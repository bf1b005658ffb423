//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use medvsr_core::model::ModelConfig;
use medvsr_core::training::TrainSettings;

use crate::error::{CliError, Result};

/// File name of the resolved configuration written next to every command's outputs.
pub const RESOLVED_NAME: &str = "resolved_config.txt";

/// Everything a command needs: model, degradation, schedule, data paths and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Gaussian noise standard deviation on the 0–255 scale.
    pub noise_std: f64,
    pub train: TrainSettings,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub out: PathBuf,
    pub hr_dir: Option<PathBuf>,
    pub lr_dir: Option<PathBuf>,
    pub val_hr_dir: Option<PathBuf>,
    pub val_lr_dir: Option<PathBuf>,
    /// Model keys given explicitly rather than defaulted.
    explicit_model: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            noise_std: 15.0,
            train: TrainSettings::default(),
            checkpoint_every: 500,
            seed: 0,
            out: PathBuf::from("out"),
            hr_dir: None,
            lr_dir: None,
            val_hr_dir: None,
            val_lr_dir: None,
            explicit_model: BTreeSet::new(),
        }
    }
}

/// Keys that are not model keys, in dump order.
pub const RUN_KEYS: &[&str] = &[
    "noise_std",
    "iterations",
    "lr",
    "min_lr",
    "batch",
    "patch",
    "frames",
    "augment",
    "checkpoint_every",
    "seed",
    "out",
    "hr_dir",
    "lr_dir",
    "val_hr_dir",
    "val_lr_dir",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Splits `key = value` text into pairs, skipping blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Usage(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "noise_std" => self.noise_std = num(key, v)?,
            "iterations" => self.train.iterations = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "min_lr" => self.train.min_lr = num(key, v)?,
            "batch" => self.train.batch = num(key, v)?,
            "patch" => self.train.patch = num(key, v)?,
            "frames" => self.train.frames = num(key, v)?,
            "augment" => self.train.augment = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "hr_dir" => self.hr_dir = path(v),
            "lr_dir" => self.lr_dir = path(v),
            "val_hr_dir" => self.val_hr_dir = path(v),
            "val_lr_dir" => self.val_lr_dir = path(v),
            _ if ModelConfig::KEYS.contains(&key) => {
                self.model.set(key, v).map_err(|e| CliError::Usage(e.to_string()))?;
                self.explicit_model.insert(key.to_string());
            }
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        RunConfig::from_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Checks ranges that no single key can check alone.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let t = &self.train;
        let ok = t.iterations > 0 && t.batch > 0 && t.frames > 0 && t.patch > 0 && t.patch % self.model.scale == 0;
        if !ok {
            return Err(CliError::Usage("iterations, batch and frames must be positive and patch a positive multiple of 4".into()));
        }
        if !(t.lr >= 0.0 && t.min_lr >= 0.0 && t.lr.is_finite() && t.min_lr.is_finite()) {
            return Err(CliError::Usage("learning rates must be finite and non-negative".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(CliError::Usage("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Model keys set explicitly by a file or override.
    pub fn explicit_model_keys(&self) -> impl Iterator<Item = &str> {
        self.explicit_model.iter().map(String::as_str)
    }

    /// Every key with its resolved value, model keys first.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.model.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let t = &self.train;
        let run = [
            self.noise_std.to_string(),
            t.iterations.to_string(),
            t.lr.to_string(),
            t.min_lr.to_string(),
            t.batch.to_string(),
            t.patch.to_string(),
            t.frames.to_string(),
            t.augment.to_string(),
            self.checkpoint_every.to_string(),
            self.seed.to_string(),
            self.out.display().to_string(),
            show(&self.hr_dir),
            show(&self.lr_dir),
            show(&self.val_hr_dir),
            show(&self.val_lr_dir),
        ];
        out.extend(RUN_KEYS.iter().map(|k| k.to_string()).zip(run));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let p = dir.join(RESOLVED_NAME);
        fs::write(&p, self.to_text()).map_err(CliError::io(&p))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_roundtrips() {
        let mut c = RunConfig::default();
        c.apply(&["width=8", "prop_scheme=both", "lr=0.001", "hr_dir=data/hr", "flow=zero"]).unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back.entries(), c.entries());
        assert_eq!(back.model, c.model);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(RunConfig::from_text("widht = 3").is_err());
        assert!(RunConfig::from_text("width 3").is_err());
        assert!(RunConfig::from_text("batch = two").is_err());
        let c = RunConfig::from_text("# desk profile\n\nwidth = 16 # narrow\n").unwrap();
        assert_eq!(c.model.width, 16);
        assert_eq!(c.explicit_model_keys().collect::<Vec<_>>(), ["width"]);
    }
}
