//! Single-file checkpoints: `u64` LE header length, a JSON header, then raw
//! little-endian `f64` blobs at the offsets listed in the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{IcmFormer, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig};

pub const FORMAT_VERSION: &str = "icmf-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainHeader {
    config: TrainConfig,
    step: usize,
    adam_t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainHeader>,
}

/// Optimizer progress stored next to the weights so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    pub adam: AdamState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
}

pub fn to_bytes(model: &Model, train: Option<&TrainState>) -> Result<Vec<u8>> {
    let store = &model.params;
    let mut items: Vec<(String, &[usize], &[f64])> = store
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape(), t.data()))
        .collect();
    if let Some(ts) = train {
        for (k, (name, t)) in store.iter().enumerate() {
            items.push((format!("adam.m.{name}"), t.shape(), &ts.adam.m[k]));
            items.push((format!("adam.v.{name}"), t.shape(), &ts.adam.v[k]));
        }
    }
    let mut offset = 0;
    let entries = items
        .iter()
        .map(|(name, shape, data)| {
            let e = TensorEntry { name: name.clone(), shape: shape.to_vec(), offset };
            offset += data.len() * 8;
            e
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION.into(),
        config: model.config().clone(),
        tensors: entries,
        train: train.map(|t| TrainHeader {
            config: t.config.clone(),
            step: t.step,
            adam_t: t.adam.t,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &items {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("file shorter than the header length prefix"))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {:?}, expected {FORMAT_VERSION:?}", header.version)));
    }
    let blob = &bytes[8 + hlen..];
    let read = |e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| bad(format!("tensor {} extends past end of file", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(e.shape.clone(), data)
    };
    let net = IcmFormer::new(header.config.clone())?;
    let n_params = net.manifest().len();
    if header.tensors.len() < n_params {
        return Err(bad(format!(
            "checkpoint holds {} tensors, config {:?} needs {n_params}",
            header.tensors.len(),
            header.config
        )));
    }
    let mut names = Vec::with_capacity(n_params);
    let mut tensors = Vec::with_capacity(n_params);
    for e in &header.tensors[..n_params] {
        names.push(e.name.clone());
        tensors.push(read(e)?);
    }
    let params = ParamStore::from_parts(names, tensors)?;
    let model = Model::new(net, params)?;
    let train = match header.train {
        None => None,
        Some(th) => {
            let rest = &header.tensors[n_params..];
            if rest.len() != 2 * n_params {
                return Err(bad(format!("expected {} optimizer tensors, found {}", 2 * n_params, rest.len())));
            }
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for pair in rest.chunks_exact(2) {
                m.push(read(&pair[0])?.into_data());
                v.push(read(&pair[1])?.into_data());
            }
            Some(TrainState {
                config: th.config,
                step: th.step,
                adam: AdamState { m, v, t: th.adam_t },
            })
        }
    };
    Ok(Checkpoint { model, train })
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn save(path: &Path, model: &Model, train: Option<&TrainState>) -> Result<()> {
    let bytes = to_bytes(model, train)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and checks it against an expected model config.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.model.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint config {:?} does not match requested config {:?}",
            ck.model.config(),
            expected
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let model = Model::init(ModelConfig::tiny(), 3).unwrap();
        let bytes = to_bytes(&model, None).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params, model.params);
        assert!(back.train.is_none());

        let mut adam = AdamState::new(&model.params);
        adam.t = 7;
        adam.m[0][0] = 0.25;
        let ts = TrainState { config: TrainConfig::desk(), step: 12, adam };
        let bytes2 = to_bytes(&model, Some(&ts)).unwrap();
        let back = from_bytes(&bytes2).unwrap();
        assert_eq!(back.train.unwrap(), ts);
        assert_eq!(to_bytes(&back.model, None).unwrap(), bytes);
    }

    #[test]
    fn rejects_truncation_and_version() {
        let model = Model::init(ModelConfig::tiny(), 0).unwrap();
        let bytes = to_bytes(&model, None).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..4]).is_err());
        let mut bumped = bytes.clone();
        let at = bumped.windows(7).position(|w| w == b"icmf-v1").unwrap();
        bumped[at + 6] = b'9';
        assert!(matches!(from_bytes(&bumped), Err(Error::Checkpoint(_))));
    }
}
