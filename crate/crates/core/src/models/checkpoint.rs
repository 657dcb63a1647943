//! Versioned binary model checkpoints with a JSON metadata sidecar.
//!
//! Layout: magic, version, model kind, a hash of the channel schema, the
//! schema itself, normalization statistics, architecture fields and the flat
//! parameter vector, all little-endian.

use super::{DilatedRnn, HybridModel, Model, ModelError, Sign};
use crate::features::{Channel, NormStats};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"GCKP";
const VERSION: u32 = 1;

/// A model loaded from (or destined for) a checkpoint.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Hybrid(HybridModel),
    Dilated(DilatedRnn),
}

impl LoadedModel {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            LoadedModel::Hybrid(m) => m,
            LoadedModel::Dilated(m) => m,
        }
    }

    pub fn as_model_mut(&mut self) -> &mut dyn Model {
        match self {
            LoadedModel::Hybrid(m) => m,
            LoadedModel::Dilated(m) => m,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        self.as_model().kind_name()
    }
}

/// Human-readable sidecar describing a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub channels: Vec<String>,
    pub n_params: usize,
    pub schema_hash_hex: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_val_gmse: Option<f64>,
}

impl CheckpointMeta {
    pub fn for_model(model: &dyn Model) -> Self {
        Self {
            kind: model.kind_name().to_string(),
            channels: model.channels().iter().map(|c| c.as_str().into()).collect(),
            n_params: model.n_params(),
            schema_hash_hex: hex(&schema_hash(model.channels())),
            train_seed: None,
            best_val_gmse: None,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn schema_hash(channels: &[Channel]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for c in channels {
        hasher.update([channel_code(*c)]);
    }
    hasher.finalize().into()
}

fn channel_code(c: Channel) -> u8 {
    // Stable wire codes shared with the windows file.
    Channel::BASE
        .iter()
        .chain(Channel::EVENT.iter())
        .position(|x| *x == c)
        .expect("known channel") as u8
}

fn channel_from_code(code: u8) -> Option<Channel> {
    Channel::BASE
        .iter()
        .chain(Channel::EVENT.iter())
        .nth(code as usize)
        .copied()
}

pub fn save_checkpoint<W: Write>(model: &LoadedModel, mut w: W) -> Result<(), ModelError> {
    let m = model.as_model();
    let channels = m.channels();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let kind: u8 = match model {
        LoadedModel::Hybrid(_) => 0,
        LoadedModel::Dilated(_) => 1,
    };
    w.write_all(&[kind])?;
    w.write_all(&schema_hash(channels))?;
    w.write_all(&(channels.len() as u16).to_le_bytes())?;
    for c in channels {
        w.write_all(&[channel_code(*c)])?;
    }
    let norm = m.norm();
    for v in norm.mean.iter().chain(norm.std.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    match model {
        LoadedModel::Hybrid(h) => {
            for s in h.signs() {
                w.write_all(&[s.code()])?;
            }
        }
        LoadedModel::Dilated(d) => {
            w.write_all(&(d.hidden() as u16).to_le_bytes())?;
            w.write_all(&(d.dilations().len() as u16).to_le_bytes())?;
            for dil in d.dilations() {
                w.write_all(&(*dil as u16).to_le_bytes())?;
            }
        }
    }
    let params = m.params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<LoadedModel, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    if u32::from_le_bytes(u32b) != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let mut stored_hash = [0u8; 32];
    r.read_exact(&mut stored_hash)?;
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b)?;
    let n_channels = u16::from_le_bytes(u16b) as usize;
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let mut c = [0u8; 1];
        r.read_exact(&mut c)?;
        channels.push(channel_from_code(c[0]).ok_or_else(|| bad("unknown channel"))?);
    }
    if schema_hash(&channels) != stored_hash {
        return Err(bad("schema hash mismatch"));
    }
    let mut f64b = [0u8; 8];
    let mut read_f64s = |n: usize, r: &mut R| -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut f64b)?;
            out.push(f64::from_le_bytes(f64b));
        }
        Ok(out)
    };
    let mean = read_f64s(n_channels, &mut r)?;
    let std = read_f64s(n_channels, &mut r)?;
    let norm = NormStats {
        channels: channels.clone(),
        mean,
        std,
    };
    match kind[0] {
        0 => {
            let mut signs = Vec::with_capacity(n_channels);
            for _ in 0..n_channels {
                let mut s = [0u8; 1];
                r.read_exact(&mut s)?;
                signs.push(Sign::from_code(s[0]).ok_or_else(|| bad("unknown sign code"))?);
            }
            let mut u64b = [0u8; 8];
            r.read_exact(&mut u64b)?;
            let n_params = u64::from_le_bytes(u64b) as usize;
            let params = read_f64s(n_params, &mut r)?;
            if params.len() != crate::features::WINDOW_STEPS * n_channels + 1 {
                return Err(bad("hybrid parameter count mismatch"));
            }
            Ok(LoadedModel::Hybrid(HybridModel::from_parts(
                norm, signs, params,
            )))
        }
        1 => {
            let mut u16b = [0u8; 2];
            r.read_exact(&mut u16b)?;
            let hidden = u16::from_le_bytes(u16b) as usize;
            r.read_exact(&mut u16b)?;
            let n_dil = u16::from_le_bytes(u16b) as usize;
            let mut dilations = Vec::with_capacity(n_dil);
            for _ in 0..n_dil {
                r.read_exact(&mut u16b)?;
                dilations.push(u16::from_le_bytes(u16b) as usize);
            }
            let mut u64b = [0u8; 8];
            r.read_exact(&mut u64b)?;
            let n_params = u64::from_le_bytes(u64b) as usize;
            let params = read_f64s(n_params, &mut r)?;
            Ok(LoadedModel::Dilated(DilatedRnn::from_parts(
                norm, hidden, dilations, params,
            )))
        }
        k => Err(bad(&format!("unknown model kind {k}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testutil::{fitted_norm, synthetic_store};

    #[test]
    fn round_trip_preserves_predictions() {
        let store = synthetic_store(5, 81);
        let norm = fitted_norm(&store);
        let hybrid = LoadedModel::Hybrid(HybridModel::new(norm.clone(), 1));
        let dilated = LoadedModel::Dilated(DilatedRnn::new(norm, 12, &[1, 2, 4], 2));
        for model in [hybrid, dilated] {
            let mut buf = Vec::new();
            save_checkpoint(&model, &mut buf).unwrap();
            let loaded = load_checkpoint(&buf[..]).unwrap();
            assert_eq!(model.kind_name(), loaded.kind_name());
            for w in &store.windows {
                let a = model.as_model().forward(&w.matrix);
                let b = loaded.as_model().forward(&w.matrix);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn corrupted_schema_hash_is_rejected() {
        let store = synthetic_store(2, 82);
        let norm = fitted_norm(&store);
        let model = LoadedModel::Hybrid(HybridModel::new(norm, 1));
        let mut buf = Vec::new();
        save_checkpoint(&model, &mut buf).unwrap();
        buf[12] ^= 0xff; // inside the stored schema hash
        assert!(matches!(
            load_checkpoint(&buf[..]),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn metadata_describes_the_model() {
        let store = synthetic_store(2, 83);
        let norm = fitted_norm(&store);
        let model = HybridModel::new(norm, 1);
        let meta = CheckpointMeta::for_model(&model);
        assert_eq!(meta.kind, "hybrid");
        assert_eq!(meta.channels.len(), 9);
        assert_eq!(meta.n_params, model.n_params());
        let json = serde_json::to_string_pretty(&meta).unwrap();
        assert!(json.contains("schema_hash_hex"));
    }
}
