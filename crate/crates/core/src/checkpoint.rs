//! Binary checkpoint format.
//!
//! ```text
//! "IQVQ"                      magic
//! u32                         format version
//! u32                         record count
//! per record:
//!   u16 + UTF-8               name
//!   u8                        rank
//!   u32 × rank                extents
//!   f64 × prod(extents)       payload
//! u32 + UTF-8                 metadata, one key=value per line
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Model, TransformerConfig};
use crate::numeric::Tensor;
use crate::vq::{Codebook, CodebookRole};

pub const MAGIC: &[u8; 4] = b"IQVQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
    pub metadata: Vec<(String, String)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank exceeds 255".into()))?);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| Error::Checkpoint("extent exceeds u32".into()))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry {k:?} cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = r.utf8(nlen)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            records.push((name, Tensor::new(&shape, data)?));
        }
        let mlen = r.u32()? as usize;
        let meta = r.utf8(mlen)?;
        let metadata = meta
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after metadata".into()));
        }
        Ok(Self { records, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const COMMON_NAME: &str = "codebook.common";
const HQ_PLUS_NAME: &str = "codebook.hq_plus";

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut records = Vec::new();
        let stores = [
            &self.encoder.params,
            &self.decoder.params,
            &self.discriminator.params,
            &self.embedding.params,
            &self.transformer.params,
        ];
        for store in stores {
            records.extend(store.named().map(|(n, t)| (n.to_string(), t.clone())));
        }
        records.push((COMMON_NAME.to_string(), self.common.entries.clone()));
        records.push((HQ_PLUS_NAME.to_string(), self.hq_plus.entries.clone()));
        let tc = self.transformer.config;
        let metadata = vec![
            ("transformer.layers".into(), tc.layers.to_string()),
            ("transformer.heads".into(), tc.heads.to_string()),
            ("transformer.ffn".into(), tc.ffn.to_string()),
            ("codebook.common_size".into(), tc.common_size.to_string()),
            ("codebook.hq_size".into(), tc.hq_size.to_string()),
        ];
        Checkpoint { records, metadata }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            ckpt.meta(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")))?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("metadata {k}: {e}")))
        };
        let tc = TransformerConfig {
            layers: get("transformer.layers")?,
            heads: get("transformer.heads")?,
            ffn: get("transformer.ffn")?,
            common_size: get("codebook.common_size")?,
            hq_size: get("codebook.hq_size")?,
        };
        let mut model = Model::new(0, tc);
        let lookup = |name: &str| ckpt.tensor(name);
        model.encoder.params.load_from(lookup)?;
        model.decoder.params.load_from(lookup)?;
        model.discriminator.params.load_from(lookup)?;
        model.embedding.params.load_from(lookup)?;
        model.transformer.params.load_from(lookup)?;
        let cb = |name: &str, role| -> Result<Codebook> {
            let t = ckpt.tensor(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Codebook::new(t.clone(), role)
        };
        model.common = cb(COMMON_NAME, CodebookRole::Common)?;
        model.hq_plus = cb(HQ_PLUS_NAME, CodebookRole::HqPlus)?;
        if model.common.size() != tc.common_size || model.hq_plus.size() != tc.hq_size {
            return Err(Error::Checkpoint("codebook sizes disagree with metadata".into()));
        }
        Ok(model)
    }
}
