//! Resumable training loop over paired clips.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{sample_patch_with, Augment};
use crate::error::{contract, Result};
use crate::image::Clip;
use crate::model::{train_step, Model, ModelConfig, Sample};
use crate::optim::{Adam, CosineSchedule};

/// Schedule and batch shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub iterations: u64,
    pub lr: f64,
    pub min_lr: f64,
    pub batch: usize,
    /// HR patch side.
    pub patch: usize,
    /// Frames per training clip.
    pub frames: usize,
    /// Random flips, transposes, time reversal and channel permutations of each patch.
    pub augment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { iterations: 2000, lr: 2e-4, min_lr: 1e-7, batch: 2, patch: 96, frames: 7, augment: true }
    }
}

impl TrainSettings {
    /// Peak rate at the first step, floor at the last.
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { max: self.lr, min: self.min_lr, total: self.iterations.saturating_sub(1) }
    }
}

/// One loss-log row; `iteration` counts completed steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Training pair of a high-resolution clip and its degraded counterpart.
#[derive(Clone, Debug)]
pub struct ClipPair {
    pub hr: Clip,
    pub lr: Clip,
}

/// Weights, optimiser, data RNG and progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub settings: TrainSettings,
}

/// Offset between the weight-initialisation seed and the data-sampling seed.
const DATA_STREAM: u64 = 1;

impl Trainer {
    pub fn new(config: &ModelConfig, settings: TrainSettings, seed: u64) -> Result<Self> {
        contract!(settings.batch > 0 && settings.frames > 0, "batch and frame count must be positive");
        let model = Model::new(config, seed)?;
        let adam = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        Ok(Trainer { model, adam, rng, iteration: 0, settings })
    }

    pub fn resume(ckpt: Checkpoint, settings: TrainSettings) -> Self {
        Trainer { model: ckpt.model, adam: ckpt.adam, rng: ckpt.rng, iteration: ckpt.iteration, settings }
    }

    pub fn checkpoint(&self, meta: Vec<(String, String)>) -> Checkpoint {
        Checkpoint { model: self.model.clone(), adam: self.adam.clone(), iteration: self.iteration, rng: self.rng.clone(), meta }
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.settings.iterations
    }

    /// Draws a batch of random patches and takes one optimisation step.
    pub fn step(&mut self, data: &[ClipPair]) -> Result<LossRow> {
        contract!(!data.is_empty(), "no training clips");
        let s = self.settings;
        let lr = s.schedule().lr(self.iteration);
        let mut batch = Vec::with_capacity(s.batch);
        for _ in 0..s.batch {
            let pair = &data[self.rng.random_range(0..data.len())];
            let (mut hr, mut lo, _) = sample_patch_with(&pair.hr, &pair.lr, s.patch, s.frames, &mut self.rng)?;
            if s.augment {
                let a = Augment::random(&mut self.rng);
                hr = a.clip(&hr)?;
                lo = a.clip(&lo)?;
            }
            batch.push(Sample::new(lo, hr, self.model.config().flow())?);
        }
        let loss = train_step(&mut self.model, &mut self.adam, &batch, lr)?;
        self.iteration += 1;
        Ok(LossRow { iteration: self.iteration, loss, lr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{degrade, synth_clip, DegradationSpec, SynthKind};

    #[test]
    fn schedule_spans_first_to_last_step() {
        let s = TrainSettings { iterations: 10, ..TrainSettings::default() }.schedule();
        assert_eq!(s.lr(0), 2e-4);
        assert!((s.lr(9) - 1e-7).abs() < 1e-18);
        let one = TrainSettings { iterations: 1, ..TrainSettings::default() }.schedule();
        assert_eq!(one.lr(0), 2e-4);
    }

    #[test]
    fn resumed_trainer_continues_identically() {
        let cfg = ModelConfig { width: 8, state: 4, window: 4, depth: 1, kernel: 3, ..ModelConfig::default() };
        let settings = TrainSettings { iterations: 4, batch: 1, patch: 16, frames: 2, ..TrainSettings::default() };
        let hr = synth_clip(SynthKind::DriftingTexture { velocity: (0.5, 0.0) }, 3, 24, 24, 1).unwrap();
        let lr = degrade(&hr, &DegradationSpec::default()).unwrap();
        let data = [ClipPair { hr, lr }];
        let mut a = Trainer::new(&cfg, settings, 5).unwrap();
        let mut rows = Vec::new();
        let mut saved = None;
        while !a.finished() {
            rows.push(a.step(&data).unwrap());
            if a.iteration == 2 {
                saved = Some(a.checkpoint(Vec::new()).to_bytes());
            }
        }
        let ck = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
        let mut b = Trainer::resume(ck, settings);
        let mut tail = Vec::new();
        while !b.finished() {
            tail.push(b.step(&data).unwrap());
        }
        assert_eq!(tail, rows[2..]);
        assert_eq!(b.checkpoint(Vec::new()).to_bytes(), a.checkpoint(Vec::new()).to_bytes());
    }
}
