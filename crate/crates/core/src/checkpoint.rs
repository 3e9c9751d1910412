//! Checkpoint container: magic "QATF", format version, length-prefixed
//! JSON manifest (names, shapes, dtypes, quantizer params, config
//! snapshot, payload hash), then tensor payloads as little-endian f32 in
//! manifest order. Save -> load -> save is byte-identical; the payload
//! hash is verified on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MicroLM, ModelConfig, WeightRole};
use crate::quant::QuantizerState;
use crate::util::fnv1a64_hex;

pub const MAGIC: &[u8; 4] = b"QATF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorMeta>,
    pub quantizers: BTreeMap<String, QuantizerState>,
    pub activation_quant: BTreeMap<String, QuantizerState>,
    pub config_snapshot: serde_json::Value,
    pub payload_hash: String,
}

/// Serialize the model (and a config snapshot) to `path`.
pub fn save(path: &Path, model: &MicroLM<f32>, config_snapshot: &serde_json::Value) -> Result<()> {
    let params = model.named_params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, p) in &params {
        let t = p.borrow();
        tensors.push(TensorMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut quantizers = BTreeMap::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (role, lin) in [
            (WeightRole::Q, &layer.attn.wq),
            (WeightRole::K, &layer.attn.wk),
            (WeightRole::V, &layer.attn.wv),
            (WeightRole::O, &layer.attn.wo),
            (WeightRole::Gate, &layer.mlp.w_gate),
            (WeightRole::Up, &layer.mlp.w_up),
            (WeightRole::Down, &layer.mlp.w_down),
        ] {
            if let Some(q) = &lin.quantizer {
                quantizers.insert(MicroLM::<f32>::weight_name(li, role), q.clone());
            }
        }
    }
    for (name, lin) in [("embed", &model.embed), ("head", &model.head)] {
        if let Some(q) = &lin.quantizer {
            quantizers.insert(name.to_string(), q.clone());
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        tensors,
        quantizers,
        activation_quant: model.activation_quant.clone().unwrap_or_default(),
        config_snapshot: config_snapshot.clone(),
        payload_hash: format!("fnv1a64:{}", fnv1a64_hex(&payload)),
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;

    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(&(manifest_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&manifest_json).map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint, verifying magic, version, and the payload hash.
pub fn load(path: &Path) -> Result<(MicroLM<f32>, Manifest)> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, not a QATF checkpoint")));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    file.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let manifest_len = u32::from_le_bytes(word) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let expected: usize =
        manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest wants {expected}",
            payload.len()
        )));
    }
    let hash = format!("fnv1a64:{}", fnv1a64_hex(&payload));
    if hash != manifest.payload_hash {
        return Err(Error::Checkpoint(format!(
            "manifest hash mismatch: stored {}, computed {hash}",
            manifest.payload_hash
        )));
    }

    let mut model = MicroLM::<f32>::new(manifest.model_config.clone(), 0)?;
    let params = model.named_params();
    let by_name: BTreeMap<&str, _> =
        params.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    let mut offset = 0usize;
    for meta in &manifest.tensors {
        let p = by_name.get(meta.name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("manifest tensor '{}' not in model", meta.name))
        })?;
        let mut t = p.borrow_mut();
        if t.shape() != meta.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' shape {:?} vs model {:?}",
                meta.name,
                meta.shape,
                t.shape()
            )));
        }
        for v in t.data_mut() {
            let bytes: [u8; 4] = payload[offset..offset + 4].try_into().unwrap();
            *v = f32::from_le_bytes(bytes);
            offset += 4;
        }
    }

    for (name, state) in &manifest.quantizers {
        attach_by_name(&mut model, name, state.clone())?;
    }
    if !manifest.activation_quant.is_empty() {
        model.activation_quant = Some(manifest.activation_quant.clone());
    }
    Ok((model, manifest))
}

fn attach_by_name(model: &mut MicroLM<f32>, name: &str, state: QuantizerState) -> Result<()> {
    let bad = || Error::Checkpoint(format!("quantizer key '{name}' is not a weight name"));
    match name {
        "embed" => {
            model.embed.quantizer = Some(state);
            return Ok(());
        }
        "head" => {
            model.head.quantizer = Some(state);
            return Ok(());
        }
        _ => {}
    }
    let rest = name.strip_prefix("layer").ok_or_else(bad)?;
    let (idx, suffix) = rest.split_once('.').ok_or_else(bad)?;
    let li: usize = idx.parse().map_err(|_| bad())?;
    if li >= model.layers.len() {
        return Err(bad());
    }
    let layer = &mut model.layers[li];
    let slot = match suffix {
        "wq" => &mut layer.attn.wq,
        "wk" => &mut layer.attn.wk,
        "wv" => &mut layer.attn.wv,
        "wo" => &mut layer.attn.wo,
        "w_gate" => &mut layer.mlp.w_gate,
        "w_up" => &mut layer.mlp.w_up,
        "w_down" => &mut layer.mlp.w_down,
        _ => return Err(bad()),
    };
    slot.quantizer = Some(state);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_quantizers, CalibrationMethod, ModelConfig};
    use crate::quant::{Granularity, QuantScheme, Symmetry};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("qatlab_ckpt_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_model() -> MicroLM<f32> {
        let cfg = ModelConfig {
            vocab_size: 17,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 8,
            rope_base: 10000.0,
            rmsnorm_eps: 1e-5,
        };
        MicroLM::new(cfg, 3).unwrap()
    }

    #[test]
    fn roundtrip_byte_identical_with_quantizers() {
        let dir = tmpdir("rt");
        let mut model = small_model();
        let scheme =
            QuantScheme::new(4, Symmetry::SymmetricSigned, Granularity::PerChannel { axis: 1 })
                .unwrap();
        attach_quantizers(&mut model, scheme, &WeightRole::ALL, CalibrationMethod::MinMax)
            .unwrap();
        // Activation quantizers persist through the manifest as well.
        crate::model::calibrate_activations_minmax(
            &mut model,
            &[(vec![1u32, 2, 3, 4], 1usize, 4usize)],
            16,
        )
        .unwrap();

        let snapshot = serde_json::json!({"purpose": "test"});
        let p1 = dir.join("a.qatf");
        save(&p1, &model, &snapshot).unwrap();
        let (loaded, manifest) = load(&p1).unwrap();
        assert_eq!(manifest.quantizers.len(), 14);
        assert_eq!(manifest.activation_quant.len(), 2 * 7 + 1);
        assert_eq!(loaded.activation_quant, model.activation_quant);

        let p2 = dir.join("b.qatf");
        save(&p2, &loaded, &manifest.config_snapshot).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Loaded weights match the source bitwise.
        for ((_, a), (_, b)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(a.borrow().data(), b.borrow().data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_payload_detected() {
        let dir = tmpdir("corrupt");
        let model = small_model();
        let p = dir.join("c.qatf");
        save(&p, &model, &serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40; // flip a payload bit
        std::fs::write(&p, &bytes).unwrap();
        match load(&p) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("hash"), "{msg}"),
            other => panic!("expected hash error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tmpdir("magic");
        let p = dir.join("m.qatf");
        std::fs::write(&p, b"NOPE0000").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
