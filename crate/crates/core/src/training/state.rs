use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, AdamConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::network::{ConsistencyModel, ModelConfig, Which};

const STATE_MAGIC: &[u8; 4] = b"CMTS";
const STATE_VERSION: u32 = 1;

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: ConsistencyModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = ConsistencyModel::new(model_cfg, cfg.seed)?;
        let adam = Adam::new(cfg.adam, model.params(Which::Online));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            step: 0,
            model,
            adam,
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let model = self.model.to_bytes()?;
        out.extend_from_slice(&(model.len() as u64).to_le_bytes());
        out.extend_from_slice(&model);
        out.extend_from_slice(&self.adam.steps.to_le_bytes());
        let c = self.adam.config;
        for v in [c.beta1, c.beta2, c.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for buf in self.adam.m.iter().chain(&self.adam.v) {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated training state while reading {what}")));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4, "magic")? != STATE_MAGIC {
            return Err(Error::Checkpoint("bad magic, expected CMTS".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != STATE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported training state version {version}")));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let step = u64_at(take(8, "step")?);
        let model_len = u64_at(take(8, "model length")?) as usize;
        let model = ConsistencyModel::from_bytes(take(model_len, "model")?, None)?;
        let adam_steps = u64_at(take(8, "optimizer step")?);
        let config = AdamConfig {
            beta1: f64_at(take(8, "beta1")?),
            beta2: f64_at(take(8, "beta2")?),
            eps: f64_at(take(8, "adam eps")?),
        };
        let sizes: Vec<usize> = model.params(Which::Online).iter().map(|(_, p)| p.value().len()).collect();
        let mut read_moments = |what: &str| -> Result<Vec<Vec<f64>>> {
            sizes
                .iter()
                .map(|&n| Ok(take(8 * n, what)?.chunks_exact(8).map(f64_at).collect()))
                .collect()
        };
        let m = read_moments("first moments")?;
        let v = read_moments("second moments")?;
        let seed: [u8; 32] = take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = u64_at(take(8, "rng stream")?);
        let word_pos = u128::from_le_bytes(take(16, "rng position")?.try_into().expect("16 bytes"));
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in training state".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            step,
            model,
            adam: Adam {
                config,
                steps: adam_steps,
                m,
                v,
            },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
