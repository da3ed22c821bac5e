//! Binary checkpoints: a parameter manifest over a flat little-endian f32
//! payload, the Adam moments, the step counter, and the config snapshot.
//! Round trips are bitwise lossless.

use super::adam::Adam;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u32 = 1;

/// One manifest row: parameter name, shape, and offset (in f32 elements)
/// into the payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// In-memory checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub manifest: Vec<ManifestEntry>,
    pub params: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub adam_t: u64,
}

impl Checkpoint {
    /// Snapshots the model and optimizer.
    pub fn capture(model: &Model<f32>, adam: &Adam<f32>, config: &TrainConfig, step: u64) -> Self {
        let mut manifest = Vec::new();
        let mut params = Vec::new();
        for (name, t) in model.params() {
            manifest.push(ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                offset: params.len() as u64,
            });
            params.extend_from_slice(t.data());
        }
        let flat = |ts: &[Tensor<f32>]| -> Vec<f32> {
            ts.iter().flat_map(|t| t.data().iter().copied()).collect()
        };
        Checkpoint {
            config: config.clone(),
            step,
            manifest,
            adam_m: flat(&adam.m),
            adam_v: flat(&adam.v),
            adam_t: adam.t,
            params,
        }
    }

    /// Rebuilds the model and optimizer exactly as captured.
    pub fn restore(&self) -> Result<(Model<f32>, Adam<f32>)> {
        let mut model = Model::init(self.config.model_config(), self.config.seed);
        let shapes: Vec<Vec<usize>> = {
            let named = model.params();
            if named.len() != self.manifest.len() {
                return Err(Error::BadCheckpoint(format!(
                    "manifest has {} entries, model wants {}",
                    self.manifest.len(),
                    named.len()
                )));
            }
            for ((name, t), entry) in named.iter().zip(&self.manifest) {
                if *name != entry.name || t.shape() != entry.shape {
                    return Err(Error::BadCheckpoint(format!(
                        "parameter mismatch: checkpoint {}{:?} vs model {}{:?}",
                        entry.name,
                        entry.shape,
                        name,
                        t.shape()
                    )));
                }
            }
            named.iter().map(|(_, t)| t.shape().to_vec()).collect()
        };

        for ((_, t), entry) in model.params_mut().into_iter().zip(&self.manifest) {
            let start = entry.offset as usize;
            let end = start + t.numel();
            if end > self.params.len() {
                return Err(Error::BadCheckpoint("payload too short".into()));
            }
            t.data_mut().copy_from_slice(&self.params[start..end]);
        }

        let mut adam = Adam::new(self.config.learning_rate, &shapes);
        adam.t = self.adam_t;
        let fill = |dst: &mut [Tensor<f32>], src: &[f32]| -> Result<()> {
            let mut off = 0;
            for t in dst.iter_mut() {
                let end = off + t.numel();
                if end > src.len() {
                    return Err(Error::BadCheckpoint("moment payload too short".into()));
                }
                t.data_mut().copy_from_slice(&src[off..end]);
                off = end;
            }
            if off != src.len() {
                return Err(Error::BadCheckpoint("moment payload too long".into()));
            }
            Ok(())
        };
        fill(&mut adam.m, &self.adam_m)?;
        fill(&mut adam.v, &self.adam_v)?;
        Ok((model, adam))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = Vec::new();
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut bytes.as_slice())
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let cfg = self.config.to_toml();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&(self.manifest.len() as u32).to_le_bytes())?;
        for e in &self.manifest {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&e.offset.to_le_bytes())?;
        }
        let write_f32s = |w: &mut W, data: &[f32]| -> std::io::Result<()> {
            w.write_all(&(data.len() as u64).to_le_bytes())?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        write_f32s(w, &self.params)?;
        write_f32s(w, &self.adam_m)?;
        write_f32s(w, &self.adam_v)?;
        w.write_all(&self.adam_t.to_le_bytes())?;
        Ok(())
    }

    fn read<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated version"))?;
        if u32::from_le_bytes(u32buf) != VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated step"))?;
        let step = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated config length"))?;
        let mut cfg_bytes = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut cfg_bytes).map_err(|_| bad("truncated config"))?;
        let config = TrainConfig::from_toml(
            std::str::from_utf8(&cfg_bytes).map_err(|_| bad("config not utf-8"))?,
        )?;

        r.read_exact(&mut u32buf).map_err(|_| bad("truncated manifest"))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated name length"))?;
            let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated rank"))?;
            let rank = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u32buf).map_err(|_| bad("truncated shape"))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            r.read_exact(&mut u64buf).map_err(|_| bad("truncated offset"))?;
            manifest.push(ManifestEntry {
                name: String::from_utf8(name).map_err(|_| bad("name not utf-8"))?,
                shape,
                offset: u64::from_le_bytes(u64buf),
            });
        }
        let read_f32s = |r: &mut R| -> Result<Vec<f32>> {
            let mut u64b = [0u8; 8];
            r.read_exact(&mut u64b).map_err(|_| bad("truncated payload length"))?;
            let len = u64::from_le_bytes(u64b) as usize;
            let mut data = vec![0u8; len * 4];
            r.read_exact(&mut data).map_err(|_| bad("truncated payload"))?;
            Ok(data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let params = read_f32s(r)?;
        let adam_m = read_f32s(r)?;
        let adam_v = read_f32s(r)?;
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated adam step"))?;
        let adam_t = u64::from_le_bytes(u64buf);

        // Manifest offsets must partition the payload exactly.
        let mut expect = 0u64;
        for e in &manifest {
            if e.offset != expect {
                return Err(bad("manifest offsets do not partition the payload"));
            }
            expect += e.shape.iter().product::<usize>() as u64;
        }
        if expect != params.len() as u64 {
            return Err(bad("payload length disagrees with manifest"));
        }

        Ok(Checkpoint {
            config,
            step,
            manifest,
            params,
            adam_m,
            adam_v,
            adam_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Model<f32>, Adam<f32>, TrainConfig) {
        let cfg = TrainConfig {
            encoder_channels: [4, 4, 8, 8, 8],
            projected_channels: 6,
            decoder_channels: 4,
            k_bases: 4,
            ..TrainConfig::default()
        };
        let model = Model::init(cfg.model_config(), cfg.seed);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let adam = Adam::new(cfg.learning_rate, &shapes);
        (model, adam, cfg)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (model, mut adam, cfg) = tiny();
        adam.t = 17;
        adam.m[0].data_mut()[0] = 0.125;
        let ck = Checkpoint::capture(&model, &adam, &cfg, 99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);

        let (model2, adam2) = loaded.restore().unwrap();
        for ((n1, t1), (n2, t2)) in model.params().iter().zip(model2.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        assert_eq!(adam2.t, 17);
        assert_eq!(adam2.m[0].data()[0], 0.125);
    }

    #[test]
    fn manifest_partitions_payload() {
        let (model, adam, cfg) = tiny();
        let ck = Checkpoint::capture(&model, &adam, &cfg, 1);
        let mut expect = 0u64;
        for e in &ck.manifest {
            assert_eq!(e.offset, expect);
            expect += e.shape.iter().product::<usize>() as u64;
        }
        assert_eq!(expect as usize, ck.params.len());
        assert_eq!(ck.params.len(), model.num_scalars());
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let (model, adam, cfg) = tiny();
        let ck = Checkpoint::capture(&model, &adam, &cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
