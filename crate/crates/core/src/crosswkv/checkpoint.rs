//! Binary checkpoint format.
//!
//! ```text
//! "CWKV1" | dtype u8 | D D_q D_v H N chunk rank_w rank_a rank_v rank_g (u32 LE)
//!         | is_first_layer u8 | mode u8 | gn_affine u8 | record count u32
//! record: name_len u32 | name (utf-8) | rank u32 | dims u32 × rank | scalars LE
//! ```
//!
//! A JSON copy of the layer configuration is written next to the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CrossWkvParams, LayerConfig, LoraRanks};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};
use crate::wkv::Mode;

pub const MAGIC: &[u8; 5] = b"CWKV1";

/// A layer configuration plus an ordered list of named tensors. Models with
/// several layers store each layer's fields under a name prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub config: LayerConfig,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "D_q")]
    d_q: usize,
    #[serde(rename = "D_v")]
    d_v: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "N")]
    n: usize,
    chunk: usize,
    mode: Mode,
    is_first_layer: bool,
}

/// `model.cwkv` → `model.cwkv.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

fn bad(record: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        record: record.to_string(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(bad(record, format!("truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, record: &str) -> Result<u8> {
        Ok(self.take(1, record)?[0])
    }

    fn u32(&mut self, record: &str) -> Result<usize> {
        let b = self.take(4, record)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint fields fit in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

impl Checkpoint {
    pub fn from_layer(cfg: &LayerConfig, params: &CrossWkvParams) -> Self {
        Self {
            dtype: DType::F64,
            config: *cfg,
            tensors: params
                .fields()
                .iter()
                .map(|(n, t)| (n.to_string(), (*t).clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Reassembles a layer's parameters from the records named
    /// `{prefix}{field}`, checking every shape against `cfg`.
    pub fn layer_params(&self, prefix: &str, cfg: &LayerConfig) -> Result<CrossWkvParams> {
        CrossWkvParams::shapes(cfg).try_map(|field, shape| {
            let name = format!("{prefix}{field}");
            let t = self.get(&name).ok_or_else(|| bad(&name, "missing"))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(
                    &name,
                    format!("shape {:?}, config expects {shape:?}", t.shape()),
                ));
            }
            Ok(t.clone())
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.dtype.tag());
        for v in [
            c.d, c.d_q, c.d_v, c.h, c.n, c.chunk, c.ranks.w, c.ranks.a, c.ranks.v, c.ranks.g,
        ] {
            push_u32(&mut out, v);
        }
        out.extend([c.is_first_layer as u8, c.mode.tag(), c.gn_affine as u8]);
        push_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.rank());
            for &d in t.shape() {
                push_u32(&mut out, d);
            }
            for &x in t.data() {
                match self.dtype {
                    DType::F32 => (x as f32).extend_le(&mut out),
                    DType::F64 => x.extend_le(&mut out),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        const HEADER: &str = "header";
        if r.take(MAGIC.len(), HEADER)? != MAGIC {
            return Err(bad(HEADER, "bad magic"));
        }
        let tag = r.u8(HEADER)?;
        let dtype =
            DType::from_tag(tag).ok_or_else(|| bad(HEADER, format!("unknown dtype tag {tag}")))?;
        let mut f = [0usize; 10];
        for v in &mut f {
            *v = r.u32(HEADER)?;
        }
        let flag = |v: u8, what: &str| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(bad(HEADER, format!("{what} flag is {v}"))),
        };
        let is_first_layer = flag(r.u8(HEADER)?, "is_first_layer")?;
        let mode_tag = r.u8(HEADER)?;
        let mode = Mode::from_tag(mode_tag)
            .ok_or_else(|| bad(HEADER, format!("unknown mode tag {mode_tag}")))?;
        let gn_affine = flag(r.u8(HEADER)?, "gn_affine")?;
        let config = LayerConfig {
            d: f[0],
            d_q: f[1],
            d_v: f[2],
            h: f[3],
            n: f[4],
            chunk: f[5],
            ranks: LoraRanks {
                w: f[6],
                a: f[7],
                v: f[8],
                g: f[9],
            },
            is_first_layer,
            mode,
            gn_affine,
        };
        config.validate().map_err(|e| bad(HEADER, e.to_string()))?;

        let count = r.u32(HEADER)?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let placeholder = format!("#{i}");
            let name_len = r.u32(&placeholder)?;
            let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
                .map_err(|_| bad(&placeholder, "name is not utf-8"))?
                .to_string();
            let rank = r.u32(&name)?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32(&name)?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(&name, "element count overflows"))?;
            let size = dtype.size();
            let raw = r.take(numel.saturating_mul(size), &name)?;
            let data = raw
                .chunks_exact(size)
                .map(|b| match dtype {
                    DType::F32 => f32::from_le(b).as_f64(),
                    DType::F64 => f64::from_le(b),
                })
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(&name, e.to_string()))?;
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(bad(&name, "duplicate record"));
            }
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(bad(
                "trailer",
                format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            dtype,
            config,
            tensors,
        })
    }

    /// Writes the binary file and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let c = &self.config;
        let sidecar = Sidecar {
            d: c.d,
            d_q: c.d_q,
            d_v: c.d_v,
            h: c.h,
            n: c.n,
            chunk: c.chunk,
            mode: c.mode,
            is_first_layer: c.is_first_layer,
        };
        let json_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(json_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(params: &CrossWkvParams, cfg: &LayerConfig, path: &Path) -> Result<()> {
    Checkpoint::from_layer(cfg, params).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(CrossWkvParams, LayerConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let params = ckpt.layer_params("", &ckpt.config)?;
    Ok((params, ckpt.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosswkv::init_params;

    fn sample() -> Checkpoint {
        let cfg = LayerConfig::tiny()
            .with_first_layer(false)
            .with_mode(Mode::Chunked);
        Checkpoint::from_layer(&cfg, &init_params(&cfg, 9).unwrap())
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn f32_round_trip_is_stable() {
        let mut ck = sample();
        ck.dtype = DType::F32;
        let once = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(once.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] ^= 0x20;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("gn_beta"), "{err}");
        let err = Checkpoint::from_bytes(&bytes[..20]).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_record() {
        let mut ck = sample();
        ck.tensors[5].1 = Tensor::zeros([3, 8]);
        let err = ck.layer_params("", &ck.config).unwrap_err();
        assert!(err.to_string().contains("w_r"), "{err}");
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            sidecar_path(Path::new("a/b.cwkv")),
            Path::new("a/b.cwkv.json")
        );
    }
}
