//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LHCKPT\0\n" | u32 version | u64 header_len | header (key=value text)
//! u32 n_params | per param: u32 name_len, name, u32 ndim, u64 dims.., f32 data..
//! u8 has_optimizer | per param: u64 step, f32 m.., f32 v..
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerHetModel, ModelConfig, Topology};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LHCKPT\0\n";
pub const VERSION: u32 = 1;

/// Adam moments and per-tensor step counts, aligned with the parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: Vec<u64>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn zeros(params: &ParamStore) -> Self {
        Self {
            step: vec![0; params.len()],
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub topology: Topology,
    pub step: u64,
    /// Hash of the parameters the run started from.
    pub base_hash: String,
    /// Extra run metadata (training config, data stream position).
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
    pub optim: Option<OptimState>,
}

/// SHA-256 over names, shapes and values, in store order.
pub fn params_hash(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for p in params.iter() {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn model_config_kv(c: &ModelConfig, out: &mut BTreeMap<String, String>) {
    out.insert("model.n_layers".into(), c.n_layers.to_string());
    out.insert("model.share_threshold".into(), c.share_threshold.to_string());
    out.insert("model.d_model".into(), c.d_model.to_string());
    out.insert("model.n_heads".into(), c.n_heads.to_string());
    out.insert("model.d_ff".into(), c.d_ff.to_string());
    out.insert("model.max_seq_len".into(), c.max_seq_len.to_string());
    out.insert("model.vocab_size".into(), c.vocab_size.to_string());
    out.insert("model.patch_size".into(), c.patch_size.to_string());
    out.insert("model.image_side".into(), c.image_side.to_string());
}

pub fn model_config_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<usize> {
        let v = kv.get(k).ok_or_else(|| Error::Config(format!("missing {k}")))?;
        v.parse().map_err(|_| Error::Config(format!("{k}={v:?} is not an integer")))
    };
    Ok(ModelConfig {
        n_layers: get("model.n_layers")?,
        share_threshold: get("model.share_threshold")?,
        d_model: get("model.d_model")?,
        n_heads: get("model.n_heads")?,
        d_ff: get("model.d_ff")?,
        max_seq_len: get("model.max_seq_len")?,
        vocab_size: get("model.vocab_size")?,
        patch_size: get("model.patch_size")?,
        image_side: get("model.image_side")?,
    })
}

impl Checkpoint {
    pub fn from_model(model: &LayerHetModel, step: u64, base_hash: String, optim: Option<OptimState>) -> Self {
        Self {
            config: model.config().clone(),
            topology: model.topology(),
            step,
            base_hash,
            meta: BTreeMap::new(),
            params: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            optim,
        }
    }

    pub fn param_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.params {
            store.insert(name.clone(), t.clone())?;
        }
        Ok(store)
    }

    /// Rebuilds the model; a shape or name mismatch against the stored
    /// config is a `CheckpointMismatch`.
    pub fn model(&self) -> Result<LayerHetModel> {
        LayerHetModel::from_params(self.config.clone(), self.topology, self.param_store()?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = self.meta.clone();
        model_config_kv(&self.config, &mut kv);
        kv.insert("topology".into(), self.topology.as_str().into());
        kv.insert("step".into(), self.step.to_string());
        kv.insert("base_hash".into(), self.base_hash.clone());
        let mut header = String::new();
        for (k, v) in &kv {
            let _ = writeln!(header, "{k}={v}");
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optim {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                for i in 0..self.params.len() {
                    out.extend_from_slice(&o.step[i].to_le_bytes());
                    put_f32s(&mut out, &o.m[i]);
                    put_f32s(&mut out, &o.v[i]);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Version("missing checkpoint magic bytes".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let header_len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Truncated("header is not utf-8".into()))?;
        let mut meta = crate::config::parse_kv(header)?;
        let config = model_config_from_kv(&meta)?;
        let topology: Topology = take_meta(&mut meta, "topology")?.parse()?;
        let step = take_meta(&mut meta, "step")?
            .parse()
            .map_err(|_| Error::Config("step is not an integer".into()))?;
        let base_hash = take_meta(&mut meta, "base_hash")?;
        meta.retain(|k, _| !k.starts_with("model."));

        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Truncated("parameter name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut o = OptimState {
                    step: Vec::with_capacity(n),
                    m: Vec::with_capacity(n),
                    v: Vec::with_capacity(n),
                };
                for (_, t) in &params {
                    o.step.push(r.u64()?);
                    o.m.push(r.f32s(t.numel())?);
                    o.v.push(r.f32s(t.numel())?);
                }
                Some(o)
            }
            b => return Err(Error::Truncated(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Truncated(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            topology,
            step,
            base_hash,
            meta,
            params,
            optim,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take_meta(meta: &mut BTreeMap<String, String>, key: &str) -> Result<String> {
    meta.remove(key).ok_or_else(|| Error::Config(format!("checkpoint header lacks {key}")))
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated("tensor too large".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
