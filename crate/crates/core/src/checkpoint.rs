//! Self-describing checkpoint container.
//!
//! Layout: magic, version, length-prefixed JSON header (architecture,
//! tokenizer table, role, seed, parameter shapes), little-endian 32-bit
//! parameter blob, then a SHA-256 digest of everything preceding it.
//! Parameters are stored in 32-bit, so a round trip reproduces forward
//! outputs bit-exactly in either compute mode.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig, Params, Role};
use crate::tensor::{Element, Tensor};
use crate::tokenizer::Tokenizer;

const MAGIC: &[u8; 4] = b"MMJB";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tokenizer: Vec<String>,
    role: Role,
    seed: u64,
    param_shapes: Vec<(String, Vec<usize>)>,
}

/// Serialize a model to checkpoint bytes.
pub fn to_bytes<E: Element>(model: &Model<E>) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION,
        config: model.cfg.clone(),
        tokenizer: model.tokenizer.words().to_vec(),
        role: model.role,
        seed: model.seed,
        param_shapes: param_specs(&model.cfg),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);

    let blob_len: usize = model.params.ordered().iter().map(|t| t.len()).sum();
    out.extend_from_slice(&((blob_len * 4) as u64).to_le_bytes());
    for t in model.params.ordered() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parse checkpoint bytes into a model in the chosen compute mode.
pub fn from_bytes<E: Element>(bytes: &[u8]) -> Result<Model<E>> {
    let fail = |m: &str| Error::CheckpointFormat(m.to_string());
    if bytes.len() < 4 + 4 + 8 + 8 + 32 {
        return Err(fail("truncated file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expected = Sha256::digest(body);
    if digest != expected.as_slice() {
        return Err(fail("content digest mismatch"));
    }
    if &body[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if body.len() < header_end + 8 {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[16..header_end])?;
    header.config.validate()?;
    if header.param_shapes != param_specs(&header.config) {
        return Err(fail("parameter layout does not match architecture"));
    }

    let blob_len = u64::from_le_bytes(body[header_end..header_end + 8].try_into().unwrap()) as usize;
    let blob = &body[header_end + 8..];
    if blob.len() != blob_len || blob_len % 4 != 0 {
        return Err(fail("parameter blob length mismatch"));
    }

    let mut tokenizer = Tokenizer::from_words(header.tokenizer)?;
    tokenizer.rebuild_index();
    if tokenizer.vocab_size() != header.config.vocab_size {
        return Err(fail("tokenizer size does not match vocabulary"));
    }

    let mut offset = 0usize;
    let mut tensors = Vec::new();
    for (_, shape) in &header.param_shapes {
        let n: usize = shape.iter().product();
        if offset + n * 4 > blob.len() {
            return Err(fail("parameter blob shorter than declared shapes"));
        }
        let data: Vec<E> = blob[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| E::from_f32_exact(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
        offset += n * 4;
    }
    let params = Params::from_ordered(&header.config, tensors)?;
    let model = Model {
        cfg: header.config,
        tokenizer,
        params,
        role: header.role,
        seed: header.seed,
    };
    if !model.all_params_finite() {
        return Err(fail("non-finite parameter values"));
    }
    Ok(model)
}

pub fn save<E: Element>(model: &Model<E>, path: &Path) -> Result<()> {
    crate::artifact::atomic_write(path, &to_bytes(model)?)
}

pub fn load<E: Element>(path: &Path) -> Result<Model<E>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Content digest of a model: SHA-256 over its checkpoint serialization.
pub fn digest<E: Element>(model: &Model<E>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(model)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagestate::ImageState;
    use crate::model::Segment;

    fn model() -> Model<f64> {
        let tok = Tokenizer::toy();
        Model::init(ModelConfig::desk(), tok, Role::Surrogate, 3).unwrap()
    }

    #[test]
    fn round_trip_forward_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let m2: Model<f64> = from_bytes(&bytes).unwrap();
        let img = ImageState::clean(8, 8, 1);
        let toks = [1usize, 9, 33, 4];
        let a = m.forward(&img, &[Segment::Tokens(&toks)]).unwrap();
        let b = m2.forward(&img, &[Segment::Tokens(&toks)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_mode_load_preserves_values() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let m32: Model<f32> = from_bytes(&bytes).unwrap();
        let m64: Model<f64> = from_bytes(&bytes).unwrap();
        for (a, b) in m32.params.ordered().iter().zip(m64.params.ordered()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert_eq!(f64::from(x), y);
            }
        }
    }

    #[test]
    fn corrupt_file_rejected() {
        let m = model();
        let mut bytes = to_bytes(&m).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(from_bytes::<f64>(&bytes).is_err());

        let truncated = &bytes[..bytes.len() / 3];
        assert!(from_bytes::<f64>(truncated).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let m = model();
        let mut bytes = to_bytes(&m).unwrap();
        bytes[4] = 99; // bump version field
        // digest no longer matches either; rebuild it so the version check is hit
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        assert!(matches!(
            from_bytes::<f64>(&bytes),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn digest_is_stable() {
        let m = model();
        assert_eq!(digest(&m).unwrap(), digest(&m).unwrap());
    }
}
