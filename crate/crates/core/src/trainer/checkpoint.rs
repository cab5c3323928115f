//! Checkpoint container.
//!
//! Layout: magic `FMRNCKPT`, `u32` version, `u64` header length and a JSON
//! header (configs, skeleton, counters, generator state, tensor index),
//! `u64` blob length and the `f64` blob (parameters, Adam moments, batch-norm
//! statistics), then the SHA-256 of everything before it. Integers are
//! little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::kinematics::Skeleton;
use crate::losses::{LossConfig, LossWeights};
use crate::model::{FreqMrn, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::optim::OptimizerState;
use crate::trainer::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"FMRNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormEntry {
    name: String,
    channels: usize,
    initialized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: String,
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
    skeleton: String,
    skeleton_name: String,
    joints: usize,
    config_hash: String,
    epoch: usize,
    seed: u64,
    step: u64,
    lr: f64,
    rng: RngState,
    params: Vec<TensorEntry>,
    norms: Vec<NormEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Format("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Format(format!("bad hex `{s}`"))))
        .collect()
}

/// Hash of everything that fixes the parameter layout.
pub fn config_hash(model: &ModelConfig, skeleton_name: &str, joints: usize) -> String {
    let text = serde_json::json!({ "model": model, "skeleton": skeleton_name, "joints": joints }).to_string();
    hex(&Sha256::digest(text.as_bytes()))
}

/// What a checkpoint tells a caller that only wants to predict.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: FreqMrn,
    pub skeleton: Skeleton,
    pub config_hash: String,
    pub epoch: usize,
}

impl Trainer {
    pub fn config_hash(&self) -> String {
        config_hash(&self.model.config, self.skeleton.name(), self.model.joints)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params.iter().map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        });
        let norms = self.model.norms.iter().map(|(n, s)| NormEntry {
            name: n.to_string(),
            channels: s.channels(),
            initialized: s.initialized,
        });
        let header = Header {
            model: self.model.config.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
            skeleton: self.skeleton.to_toml_string(),
            skeleton_name: self.skeleton.name().to_string(),
            joints: self.model.joints,
            config_hash: self.config_hash(),
            epoch: self.epoch,
            seed: self.seed,
            step: self.optimizer.step,
            lr: self.optimizer.lr,
            rng: RngState {
                seed: hex(&self.rng.get_seed()),
                stream: self.rng.get_stream().to_string(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            params: params.collect(),
            norms: norms.collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut blob = Vec::new();
        let tensors = self
            .model
            .params
            .values()
            .iter()
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            blob.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
        }
        for (_, s) in self.model.norms.iter() {
            blob.extend(s.mean.iter().chain(&s.var).flat_map(|x| x.to_le_bytes()));
        }
        let mut out = Vec::with_capacity(header.len() + blob.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 8 + 32 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        if &body[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let read_len = |at: usize| -> Result<usize> {
            body.get(at..at + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
                .ok_or_else(|| Error::Format("checkpoint is truncated".into()))
        };
        let header_len = read_len(12)?;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Format("checkpoint header overruns the file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let blob_len = read_len(header_end)?;
        let blob = &body[header_end + 8..];
        if blob.len() != blob_len || blob_len % 8 != 0 {
            return Err(Error::Format("checkpoint blob length mismatch".into()));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));

        let skeleton = Skeleton::from_toml_str(&header.skeleton)?;
        let hash = config_hash(&header.model, &header.skeleton_name, header.joints);
        if hash != header.config_hash || skeleton.joint_count() != header.joints {
            return Err(Error::Format(
                "checkpoint header is inconsistent with its config hash".into(),
            ));
        }
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = FreqMrn::new(header.model.clone(), header.joints, &mut scratch)?;

        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Format("checkpoint blob is too short".into()));
            }
            Tensor::new(shape.to_vec(), data)
        };
        let read_all = |take: &mut dyn FnMut(&[usize]) -> Result<Tensor>| -> Result<Vec<(String, Tensor)>> {
            header
                .params
                .iter()
                .map(|e| Ok((e.name.clone(), take(&e.shape)?)))
                .collect()
        };
        let params = read_all(&mut take)?;
        let m = read_all(&mut take)?;
        let v = read_all(&mut take)?;
        let mut norms = Vec::with_capacity(header.norms.len());
        for e in &header.norms {
            let mean = take(&[e.channels])?.into_data();
            let var = take(&[e.channels])?.into_data();
            norms.push((
                e.name.clone(),
                RunningStats {
                    mean,
                    var,
                    initialized: e.initialized,
                },
            ));
        }
        if values.next().is_some() {
            return Err(Error::Format("checkpoint blob has trailing data".into()));
        }
        model.params.load(params)?;
        model.norms.load(norms)?;

        let mut optimizer = OptimizerState::new(model.params.values(), header.lr, header.train.adam());
        optimizer.m = m.into_iter().map(|(_, t)| t).collect();
        optimizer.v = v.into_iter().map(|(_, t)| t).collect();
        optimizer.step = header.step;

        let seed: [u8; 32] = unhex(&header.rng.seed)?
            .try_into()
            .map_err(|_| Error::Format("generator seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        let parse = |s: &str| {
            s.parse::<u128>()
                .map_err(|_| Error::Format(format!("bad generator field `{s}`")))
        };
        rng.set_stream(parse(&header.rng.stream)? as u64);
        rng.set_word_pos(parse(&header.rng.word_pos)?);

        let weights = LossWeights::for_skeleton(&skeleton, header.model.query, header.model.future, &header.loss)?;
        Ok(Trainer {
            model,
            optimizer,
            loss: header.loss,
            train: header.train,
            weights,
            skeleton,
            epoch: header.epoch,
            seed: header.seed,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let trainer = Trainer::load(path)?;
        Ok(LoadedModel {
            config_hash: trainer.config_hash(),
            epoch: trainer.epoch,
            model: trainer.model,
            skeleton: trainer.skeleton,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainer() -> Trainer {
        let sk = Skeleton::synthetic(1, 3, 100.0).unwrap();
        let model = ModelConfig {
            history: 8,
            query: 3,
            future: 2,
            stages: 2,
            residual_pairs: 1,
            latent: 4,
            ..ModelConfig::default()
        };
        Trainer::new(model, LossConfig::default(), TrainConfig::default(), &sk, 11).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut tr = trainer();
        tr.optimizer.step = 7;
        tr.optimizer.m[0].data_mut()[0] = 0.125;
        tr.epoch = 3;
        use rand::RngCore;
        tr.rng.next_u64();
        let back = Trainer::from_bytes(&tr.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.params, tr.model.params);
        assert_eq!(back.model.norms, tr.model.norms);
        assert_eq!(back.optimizer, tr.optimizer);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.rng, tr.rng);
        assert_eq!(back.weights, tr.weights);
        assert_eq!(back.config_hash(), tr.config_hash());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = trainer().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Trainer::from_bytes(&flipped), Err(Error::Format(_))));
        assert!(matches!(
            Trainer::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Format(_))
        ));
        assert!(matches!(Trainer::from_bytes(b"short"), Err(Error::Format(_))));
    }

    #[test]
    fn hash_tracks_layout() {
        let a = config_hash(&ModelConfig::default(), "s", 4);
        assert_eq!(a, config_hash(&ModelConfig::default(), "s", 4));
        assert_ne!(a, config_hash(&ModelConfig::default(), "s", 5));
        assert_ne!(
            a,
            config_hash(
                &ModelConfig {
                    latent: 8,
                    ..ModelConfig::default()
                },
                "s",
                4
            )
        );
    }
}
