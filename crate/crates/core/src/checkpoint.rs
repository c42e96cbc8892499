//! Self-describing checkpoint containers with byte-stable serialization.
//!
//! A checkpoint echoes the full model and optimizer configuration, then
//! stores every parameter as a flat f64 array under its name, partitioned
//! into the backbone / per-expert / global groups, together with its
//! momentum buffer and the training RNG state. Serialization is compact
//! JSON with a fixed field order, so identical state always produces
//! identical bytes and save → load → save is the identity on files.

use crate::model::ModelConfig;
use crate::params::{ParamError, ParamRegistry};
use crate::trainer::OptimConfig;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_TAG: &str = "d2sdk-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("unsupported checkpoint format {got:?}, expected {FORMAT_TAG:?}")]
    FormatTag { got: String },
    #[error("parameter {name}: registry shape {got:?} != checkpoint shape {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {name}: {what} length {got} != shape volume {expected}")]
    LengthMismatch {
        name: String,
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Enough ChaCha state to reconstruct the training stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        let wp = rng.get_word_pos();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos_hi: (wp >> 64) as u64,
            word_pos_lo: wp as u64,
        }
    }

    /// Rebuild the generator at the captured position.
    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub momentum: Vec<f64>,
}

/// One named partition of the parameters: "backbone", "expert.k", or
/// "global".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epoch: usize,
    /// Which selection policy saved this snapshot.
    pub policy: String,
    pub rng: RngState,
    pub groups: Vec<ParamGroup>,
}

fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    match parts.next() {
        Some("expert") => match parts.next() {
            Some(k) => format!("expert.{k}"),
            None => "expert".to_string(),
        },
        Some(first) => first.to_string(),
        None => String::new(),
    }
}

/// Snapshot the registry into a checkpoint, preserving declaration order
/// within first-appearance-ordered groups.
pub fn capture(
    reg: &ParamRegistry,
    model: &ModelConfig,
    optim: &OptimConfig,
    epoch: usize,
    policy: &str,
    rng: RngState,
) -> Checkpoint {
    let mut groups: Vec<ParamGroup> = Vec::new();
    for id in reg.ids() {
        let name = reg.name(id).to_string();
        let group_name = group_of(&name);
        let entry = ParamEntry {
            shape: reg.value(id).shape().to_vec(),
            values: reg.value(id).data().to_vec(),
            momentum: reg.momentum(id).to_vec(),
            name,
        };
        match groups.iter_mut().find(|g| g.name == group_name) {
            Some(g) => g.entries.push(entry),
            None => groups.push(ParamGroup {
                name: group_name,
                entries: vec![entry],
            }),
        }
    }
    Checkpoint {
        format: FORMAT_TAG.to_string(),
        model: model.clone(),
        optim: optim.clone(),
        epoch,
        policy: policy.to_string(),
        rng,
        groups,
    }
}

/// Load checkpoint values and momentum back into a registry built from
/// the same configuration.
pub fn restore(ckpt: &Checkpoint, reg: &mut ParamRegistry) -> Result<(), CheckpointError> {
    if ckpt.format != FORMAT_TAG {
        return Err(CheckpointError::FormatTag {
            got: ckpt.format.clone(),
        });
    }
    for group in &ckpt.groups {
        for entry in &group.entries {
            let id = reg.id(&entry.name)?;
            let shape = reg.value(id).shape().to_vec();
            if shape != entry.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: entry.name.clone(),
                    got: shape,
                    expected: entry.shape.clone(),
                });
            }
            let numel: usize = entry.shape.iter().product();
            for (what, len) in [("values", entry.values.len()), ("momentum", entry.momentum.len())]
            {
                if len != numel {
                    return Err(CheckpointError::LengthMismatch {
                        name: entry.name.clone(),
                        what,
                        got: len,
                        expected: numel,
                    });
                }
            }
            reg.value_mut(id).data_mut().copy_from_slice(&entry.values);
            reg.set_momentum(id, entry.momentum.clone());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Checkpoint, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.format != FORMAT_TAG {
            return Err(CheckpointError::FormatTag { got: ckpt.format });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut body = self.to_json()?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_json(std::fs::read_to_string(path)?.trim_end())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::params::derive_rng;

    fn sample_checkpoint() -> (ParamRegistry, Checkpoint) {
        let cfg = ModelConfig::micro();
        let (reg, _) = init_model(&cfg).unwrap();
        let rng = derive_rng(7, "train.shuffle");
        let state = RngState::capture(7, &rng);
        let ckpt = capture(&reg, &cfg, &OptimConfig::default(), 3, "last-epoch", state);
        (reg, ckpt)
    }

    #[test]
    fn groups_partition_all_parameters() {
        let (reg, ckpt) = sample_checkpoint();
        let total: usize = ckpt.groups.iter().map(|g| g.entries.len()).sum();
        assert_eq!(total, reg.len());
        let names: Vec<&str> = ckpt.groups.iter().map(|g| g.name.as_str()).collect();
        assert!(names.contains(&"backbone"));
        assert!(names.contains(&"expert.0"));
        assert!(names.contains(&"expert.1"));
        assert!(names.contains(&"global"));
        assert_eq!(names.len(), 4);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, ckpt) = sample_checkpoint();
        let first = ckpt.to_json().unwrap();
        let reloaded = Checkpoint::from_json(&first).unwrap();
        let second = reloaded.to_json().unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn restore_round_trips_values_and_momentum() {
        let (mut reg, ckpt) = sample_checkpoint();
        let id = reg.id("backbone.fc1.w").unwrap();
        let original = reg.value(id).data().to_vec();
        reg.value_mut(id).data_mut().fill(0.0);
        reg.set_momentum(id, vec![0.5; original.len()]);
        restore(&ckpt, &mut reg).unwrap();
        assert_eq!(reg.value(id).data(), &original[..]);
        assert!(reg.momentum(id).iter().all(|&m| m == 0.0));
    }

    #[test]
    fn restore_rejects_wrong_format_and_shape() {
        let (mut reg, mut ckpt) = sample_checkpoint();
        let mut bad = ckpt.clone();
        bad.format = "other".into();
        assert!(matches!(
            restore(&bad, &mut reg),
            Err(CheckpointError::FormatTag { .. })
        ));
        ckpt.groups[0].entries[0].shape = vec![1, 2];
        assert!(matches!(
            restore(&ckpt, &mut reg),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rng_state_restores_position() {
        use rand::RngCore;
        let mut rng = derive_rng(11, "train.shuffle");
        for _ in 0..5 {
            rng.next_u64();
        }
        let state = RngState::capture(11, &rng);
        let mut back = state.restore();
        assert_eq!(back.next_u64(), rng.next_u64());
    }

    #[test]
    fn file_round_trip() {
        let (_, ckpt) = sample_checkpoint();
        let dir = std::env::temp_dir().join("d2sdk-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.json");
        ckpt.save(&path).unwrap();
        let first_bytes = std::fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.save(&path).unwrap();
        let second_bytes = std::fs::read(&path).unwrap();
        assert_eq!(first_bytes, second_bytes);
        assert_eq!(loaded, ckpt);
        std::fs::remove_dir_all(&dir).ok();
    }
}
