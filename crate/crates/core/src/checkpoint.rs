//! Model checkpoints.
//!
//! Layout: the ASCII line `FEDFAIR-CHECKPOINT 1`, one line of JSON manifest,
//! then every tensor's values as little-endian `f64` in manifest order with
//! no padding. The manifest lists each tensor's name and shape and, for the
//! embedding tables, the row ids.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fairness::GroupStats;
use crate::model::{EmbeddingTable, GatLayer, ModelState};

const MAGIC: &str = "FEDFAIR-CHECKPOINT 1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint or unsupported version")]
    BadMagic,
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("payload holds {found} bytes, manifest expects {expected}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
    pub epoch: usize,
    pub stats: GroupStats,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub seed: u64,
    pub epoch: usize,
    pub stats: GroupStats,
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        let s = &self.state;
        let h = s.hidden;
        let mut tensors = vec![
            TensorEntry {
                name: "users".into(),
                shape: vec![s.users.len(), h],
                ids: Some(s.users.ids().to_vec()),
            },
            TensorEntry {
                name: "items".into(),
                shape: vec![s.items.len(), h],
                ids: Some(s.items.ids().to_vec()),
            },
        ];
        for l in 0..s.layers.len() {
            tensors.push(TensorEntry {
                name: format!("layer{l}.theta"),
                shape: vec![h, h],
                ids: None,
            });
            tensors.push(TensorEntry {
                name: format!("layer{l}.attention"),
                shape: vec![2 * h],
                ids: None,
            });
        }
        CheckpointManifest {
            hidden: h,
            layers: s.layers.len(),
            seed: self.seed,
            epoch: self.epoch,
            stats: self.stats,
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let manifest = serde_json::to_string(&self.manifest()).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{manifest}")?;
        let s = &self.state;
        let mut put = |xs: &[f64]| -> std::io::Result<()> {
            for x in xs {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        put(s.users.data())?;
        put(s.items.data())?;
        for l in &s.layers {
            put(&l.transform)?;
            put(&l.attention)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        line.clear();
        r.read_line(&mut line)?;
        let m: CheckpointManifest =
            serde_json::from_str(line.trim_end()).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * 8;
        if payload.len() != expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

        let h = m.hidden;
        let bad = |msg: &str| CheckpointError::Manifest(msg.to_string());
        if m.tensors.len() != 2 + 2 * m.layers {
            return Err(bad("tensor count does not match layer count"));
        }
        let table = |t: &TensorEntry, name: &str, data: Vec<f64>| -> Result<EmbeddingTable, CheckpointError> {
            let ids = t.ids.clone().ok_or_else(|| bad("embedding table without ids"))?;
            if t.name != name || t.shape != [ids.len(), h] {
                return Err(bad("embedding table shape"));
            }
            Ok(EmbeddingTable::from_parts(ids, h, data))
        };
        let users = table(&m.tensors[0], "users", take(m.tensors[0].shape.iter().product()))?;
        let items = table(&m.tensors[1], "items", take(m.tensors[1].shape.iter().product()))?;
        let mut layers = Vec::with_capacity(m.layers);
        for pair in m.tensors[2..].chunks(2) {
            if pair[0].shape != [h, h] || pair[1].shape != [2 * h] {
                return Err(bad("layer shape"));
            }
            layers.push(GatLayer {
                transform: take(h * h),
                attention: take(2 * h),
            });
        }
        Ok(Checkpoint {
            state: ModelState {
                hidden: h,
                users,
                items,
                layers,
            },
            seed: m.seed,
            epoch: m.epoch,
            stats: m.stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::substream;

    fn sample(layers: usize) -> Checkpoint {
        let cfg = ModelConfig {
            hidden: 3,
            layers,
            ..ModelConfig::default()
        };
        let mut state = ModelState::init(&[4, 1, 9], &[2, 7], &cfg, &mut substream(5, "ck", &[]));
        // awkward values must survive too
        state.items.data_mut()[0] = -0.0;
        state.items.data_mut()[1] = f64::MIN_POSITIVE / 4.0;
        state.items.data_mut()[2] = 1e308;
        Checkpoint {
            state,
            seed: 5,
            epoch: 12,
            stats: GroupStats { p: -1.25, q: -0.75 },
        }
    }

    fn bits(s: &ModelState) -> Vec<u64> {
        s.users
            .data()
            .iter()
            .chain(s.items.data())
            .chain(s.layers.iter().flat_map(|l| l.transform.iter().chain(&l.attention)))
            .map(|x| x.to_bits())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for layers in [1, 2] {
            let ck = sample(layers);
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice()).unwrap();
            assert_eq!(bits(&back.state), bits(&ck.state));
            assert_eq!(back.state.users.ids(), ck.state.users.ids());
            assert_eq!((back.seed, back.epoch, back.stats), (ck.seed, ck.epoch, ck.stats));
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let ck = sample(1);
        ck.save(&p).unwrap();
        assert_eq!(bits(&Checkpoint::load(&p).unwrap().state), bits(&ck.state));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(matches!(
            Checkpoint::read_from(&b"hello\n"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut buf = Vec::new();
        sample(1).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Checkpoint::read_from(buf.as_slice()),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
