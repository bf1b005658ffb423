//! Versioned binary container for weights, optimiser moments and RNG state.
//!
//! Layout: the 8-byte magic, a little-endian `u32` version, a `u64` manifest
//! length, the UTF-8 manifest, then every tensor as little-endian `f32`.
//! Manifest lines are `key=value`; tensors are listed as
//! `tensor=<section> <name> <dims> <offset> <count>` with `dims` joined by `x`
//! and offsets counted in elements from the start of the payload.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"MEDVSRCK";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 3] = ["param", "adam.m", "adam.v"];

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    /// Completed optimisation steps.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    /// Free-form settings echoed alongside the model, such as the schedule.
    pub meta: Vec<(String, String)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    contract!(s.len() == 64 && s.is_ascii(), "rng seed {s:?} is not 64 hex digits");
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| Error::Format(format!("bad hex in rng seed {s:?}")))?;
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in self.model.config().entries() {
            manifest.push_str(&format!("config.{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta.{k}={v}\n"));
        }
        manifest.push_str(&format!("iteration={}\n", self.iteration));
        manifest.push_str(&format!("adam.step={}\n", self.adam.step));
        manifest.push_str(&format!("rng.seed={}\n", hex(&self.rng.get_seed())));
        manifest.push_str(&format!("rng.stream={}\n", self.rng.get_stream()));
        manifest.push_str(&format!("rng.word_pos={}\n", self.rng.get_word_pos()));
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (section, i) in SECTIONS.iter().flat_map(|s| (0..self.model.params.len()).map(move |i| (*s, i))) {
            let (_, p) = self.model.params.iter().nth(i).expect("index in range");
            let data: &[f32] = match section {
                "param" => p.data(),
                "adam.m" => &self.adam.m[i],
                _ => &self.adam.v[i],
            };
            let dims: Vec<String> = p.dims().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor={section} {} {} {offset} {}\n", p.name(), dims.join("x"), data.len()));
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += data.len();
        }
        let mut out = Vec::with_capacity(20 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let manifest = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest = core::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[20 + len..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload length is not a multiple of 4"));
        }
        let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

        let mut config = Vec::new();
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        let (mut iteration, mut step, mut seed, mut stream, mut word_pos) = (None, None, None, None, None);
        for line in manifest.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("manifest line {line:?} has no '='")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("{k}: bad integer {v:?}")));
            if let Some(key) = k.strip_prefix("config.") {
                config.push((key, v));
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.push((key.to_string(), v.to_string()));
            } else {
                match k {
                    "iteration" => iteration = Some(num(v)?),
                    "adam.step" => step = Some(num(v)?),
                    "rng.seed" => seed = Some(unhex(v).map_err(|e| bad(e.to_string()))?),
                    "rng.stream" => stream = Some(num(v)?),
                    "rng.word_pos" => word_pos = Some(v.parse::<u128>().map_err(|_| bad(format!("bad word position {v:?}")))?),
                    "tensor" => tensors.push(v),
                    _ => return Err(bad(format!("unknown manifest key {k:?}"))),
                }
            }
        }
        let missing = |what: &str| bad(format!("manifest lacks {what}"));
        let config = ModelConfig::from_entries(config).map_err(|e| bad(e.to_string()))?;
        // The structure is rebuilt from the config; the weights are then replaced from the payload.
        let mut model = Model::<f32>::new(&config, 0).map_err(|e| bad(e.to_string()))?;
        let mut adam = Adam::new(&model.params);
        adam.step = step.ok_or_else(|| missing("adam.step"))?;
        let n = model.params.len();
        if tensors.len() != 3 * n {
            return Err(bad(format!("{} tensors, expected {}", tensors.len(), 3 * n)));
        }
        for (j, t) in tensors.iter().enumerate() {
            let parts: Vec<&str> = t.split(' ').collect();
            let [section, name, dims, offset, count] = parts[..] else {
                return Err(bad(format!("malformed tensor line {t:?}")));
            };
            let (sec, i) = (j / n, j % n);
            let id = model.params.iter().nth(i).map(|(id, _)| id).expect("index in range");
            let p = model.params.get(id);
            let want_dims: Vec<String> = p.dims().iter().map(|d| d.to_string()).collect();
            if section != SECTIONS[sec] || name != p.name() || dims != want_dims.join("x") {
                return Err(bad(format!(
                    "tensor {j} is {section} {name} [{dims}], expected {} {} [{}]",
                    SECTIONS[sec],
                    p.name(),
                    want_dims.join("x")
                )));
            }
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {t:?}")))?;
            let count: usize = count.parse().map_err(|_| bad(format!("bad count in {t:?}")))?;
            if count != p.data().len() || offset + count > floats.len() {
                return Err(bad(format!("tensor {name} spans {offset}+{count} outside the payload")));
            }
            let src = &floats[offset..offset + count];
            match sec {
                0 => model.params.data_mut(id).copy_from_slice(src),
                1 => adam.m[i].copy_from_slice(src),
                _ => adam.v[i].copy_from_slice(src),
            }
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed.ok_or_else(|| missing("rng.seed"))?);
        rng.set_stream(stream.ok_or_else(|| missing("rng.stream"))?);
        rng.set_word_pos(word_pos.ok_or_else(|| missing("rng.word_pos"))?);
        Ok(Checkpoint { model, adam, iteration: iteration.ok_or_else(|| missing("iteration"))?, rng, meta })
    }

    /// Weights only, as stored.
    pub fn params(&self) -> &ParamSet<f32> {
        &self.model.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { width: 8, state: 4, window: 4, depth: 1, kernel: 3, ..ModelConfig::default() };
        let model = Model::<f32>::new(&cfg, 7).unwrap();
        let mut adam = Adam::new(&model.params);
        adam.step = 3;
        adam.m[0][0] = 0.25;
        adam.v[1][0] = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        Checkpoint { model, adam, iteration: 3, rng, meta: alloc::vec![("lr".into(), "0.0002".into())] }
    }

    #[test]
    fn roundtrip_reproduces_bytes_and_state() {
        let c = sample();
        let bytes = c.to_bytes();
        let mut back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adam.m, c.adam.m);
        assert_eq!(back.meta, c.meta);
        let mut orig = c.rng.clone();
        assert_eq!(back.rng.random::<u64>(), orig.random::<u64>());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Format(_))));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
    }
}
