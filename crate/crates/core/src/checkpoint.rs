//! Binary checkpoint format.
//!
//! Layout: magic `INNC`, u32 version, u32 metadata byte length, metadata as
//! UTF-8 `key=value` lines (arch, N, K, alpha, beta, gamma, seed, epoch),
//! u32 tensor count, then per tensor: u32 name length, name, u32 rank, dims
//! as u32, raw f32 data. All integers and floats little-endian. Round trips
//! are bit-exact; writes go through a temp file and rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{SmallConvNet, PARAM_NAMES};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"INNC";
const VERSION: u32 = 1;

/// Metadata keys are fixed and ordered; floats render via the shortest
/// round-trip decimal form.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub arch: String,
    pub n: usize,
    pub k: usize,
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub seed: u64,
    pub epoch: usize,
}

impl CheckpointMeta {
    fn render(&self) -> String {
        format!(
            "arch={}\nN={}\nK={}\nalpha={}\nbeta={}\ngamma={}\nseed={}\nepoch={}\n",
            self.arch, self.n, self.k, self.alpha, self.beta, self.gamma, self.seed, self.epoch
        )
    }

    fn parse(text: &str) -> std::result::Result<Self, CheckpointError> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Metadata(format!("line `{line}` has no `=`")))?;
            fields.insert(key.to_string(), value.to_string());
        }
        let get = |key: &str| {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| CheckpointError::Metadata(format!("missing key `{key}`")))
        };
        let num = |key: &str| -> std::result::Result<u64, CheckpointError> {
            get(key)?
                .parse()
                .map_err(|_| CheckpointError::Metadata(format!("key `{key}` is not an integer")))
        };
        let fnum = |key: &str| -> std::result::Result<f32, CheckpointError> {
            get(key)?
                .parse()
                .map_err(|_| CheckpointError::Metadata(format!("key `{key}` is not a float")))
        };
        Ok(CheckpointMeta {
            arch: get("arch")?,
            n: num("N")? as usize,
            k: num("K")? as usize,
            alpha: fnum("alpha")?,
            beta: fnum("beta")?,
            gamma: fnum("gamma")?,
            seed: num("seed")?,
            epoch: num("epoch")? as usize,
        })
    }
}

/// An on-disk parameter set: ordered named tensors plus metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Packages a network's parameters under [`PARAM_NAMES`].
    pub fn from_model(model: &SmallConvNet, meta: CheckpointMeta) -> Self {
        let tensors = PARAM_NAMES
            .iter()
            .zip(&model.params)
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Rebuilds the network; the input shape is recovered from the arch
    /// string `smallconvnet-CxHxW` and the logit width from N*K.
    pub fn to_model(&self) -> Result<SmallConvNet> {
        let input_shape = parse_arch(&self.meta.arch)?;
        if self.tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Checkpoint(CheckpointError::Metadata(format!(
                "{} tensors, expected {}",
                self.tensors.len(),
                PARAM_NAMES.len()
            ))));
        }
        let mut params = Vec::with_capacity(PARAM_NAMES.len());
        for (expected, (name, t)) in PARAM_NAMES.iter().zip(&self.tensors) {
            if name != expected {
                return Err(Error::Checkpoint(CheckpointError::Metadata(format!(
                    "tensor `{name}` where `{expected}` was expected"
                ))));
            }
            params.push(t.clone().with_grad());
        }
        let n_outputs = self.meta.n * self.meta.k;
        let expected_last = params[7].numel();
        if expected_last != n_outputs {
            return Err(Error::Checkpoint(CheckpointError::Metadata(format!(
                "final bias has {expected_last} entries, metadata implies {n_outputs}"
            ))));
        }
        Ok(SmallConvNet { input_shape, n_outputs, params })
    }
}

/// Canonical arch string for the one supported architecture.
pub fn arch_string(input_shape: [usize; 3]) -> String {
    format!("smallconvnet-{}x{}x{}", input_shape[0], input_shape[1], input_shape[2])
}

fn parse_arch(arch: &str) -> Result<[usize; 3]> {
    let rest = arch.strip_prefix("smallconvnet-").ok_or_else(|| {
        Error::Checkpoint(CheckpointError::Metadata(format!("unknown arch `{arch}`")))
    })?;
    let dims: Vec<usize> = rest.split('x').filter_map(|p| p.parse().ok()).collect();
    match dims[..] {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Checkpoint(CheckpointError::Metadata(format!(
            "arch `{arch}` does not encode CxHxW"
        )))),
    }
}

/// Serializes to the wire format.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = ckpt.meta.render();
    let mut buf = Vec::with_capacity(64 + meta.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + len > self.buf.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses the wire format.
pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "header").map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = cur.u32("header")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta_text = std::str::from_utf8(meta_bytes)
        .map_err(|_| CheckpointError::Metadata("metadata is not UTF-8".into()))?;
    let meta = CheckpointMeta::parse(meta_text)?;
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u32(&format!("tensor {i} name length"))? as usize;
        let name_bytes = cur.take(name_len, &format!("tensor {i} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Metadata(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = cur.u32(&format!("tensor `{name}` rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32(&format!("tensor `{name}` dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4, &format!("tensor `{name}` data"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(Checkpoint { meta, tensors })
}

/// Writes atomically: temp file in the target directory, then rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(CheckpointError::Io)?;
    decode(&bytes)
}

/// Shared atomic file emission: a finished file either exists in full or
/// not at all.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
