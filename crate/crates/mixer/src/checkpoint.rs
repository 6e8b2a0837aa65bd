//! Versioned JSON checkpoints. Arrays serialize with shape headers via
//! [`crate::tensor::Tensor`]; float64 payloads round-trip bit-exactly.

use crate::error::{Error, Result};
use crate::trainer::{Model, TrainState};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Full resumable run state.
#[derive(Clone, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub version: u32,
    pub state: TrainState,
}

/// Model-only snapshot (e.g. the best-validation model).
#[derive(Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub model: Model,
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint {}: {e}", path.display())))?;
    if let Some(v) = value.get("version").and_then(|v| v.as_u64()) {
        if v != CHECKPOINT_VERSION as u64 {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {v} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
    }
    serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint {}: {e}", path.display())))
}

/// FNV-1a over the bit patterns of the shared parameters (experts,
/// offsets, gate); contexts are deliberately excluded so the checksum
/// certifies the frozen-parameter contract during adaptation.
pub fn shared_param_checksum(model: &Model) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bits: u64| {
        for byte in bits.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for expert in &model.bank.experts {
        for p in expert.params() {
            for &v in p.data() {
                eat(v.to_bits());
            }
        }
    }
    for &o in &model.bank.offsets {
        eat(o.to_bits());
    }
    for &v in model.gate.w.data() {
        eat(v.to_bits());
    }
    for &v in model.gate.b.data() {
        eat(v.to_bits());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{init_backbone, BackboneConfig, BackboneKind};
    use crate::moe::ExpertBank;

    fn model() -> Model {
        let cfg = BackboneConfig {
            kind: BackboneKind::Hypernet,
            state_dim: 2,
            context_dim: 2,
            width: 4,
            feature_dim: 4,
        };
        let bank = ExpertBank::new(vec![init_backbone(&cfg, 0), init_backbone(&cfg, 5)], false);
        Model::new(bank, 2, 3)
    }

    #[test]
    fn model_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.json");
        let cp = ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            model: model(),
        };
        save_json(&path, &cp).unwrap();
        let loaded: ModelCheckpoint = load_json(&path).unwrap();
        assert_eq!(loaded.model, cp.model);
        assert_eq!(
            shared_param_checksum(&loaded.model),
            shared_param_checksum(&cp.model)
        );
    }

    #[test]
    fn corrupt_and_mismatched_checkpoints_are_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            load_json::<ModelCheckpoint>(&path),
            Err(Error::Checkpoint(_))
        ));

        let versioned = dir.path().join("old.json");
        let mut cp = serde_json::to_value(ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            model: model(),
        })
        .unwrap();
        cp["version"] = serde_json::json!(99);
        std::fs::write(&versioned, serde_json::to_string(&cp).unwrap()).unwrap();
        assert!(matches!(
            load_json::<ModelCheckpoint>(&versioned),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn checksum_ignores_contexts_but_not_weights() {
        let mut m1 = model();
        let base = shared_param_checksum(&m1);
        m1.contexts[0] = crate::tensor::Tensor::vector(vec![9.0, 9.0]);
        assert_eq!(shared_param_checksum(&m1), base);
        m1.gate.b.data_mut()[0] += 1.0;
        assert_ne!(shared_param_checksum(&m1), base);
    }
}
