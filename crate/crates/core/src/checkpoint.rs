//! Binary checkpoints of trained contexts.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! "DPRO"                      magic
//! u32                         format version
//! u32 L, u32 D_w, u32 D_e     dimensions
//! u32 K                       number of trained groups
//! u8                          1 if background contexts follow each group
//! u64 init, u64 data, u64 encoder seeds
//! [u8; 32]                    SHA-256 of the canonical configuration text
//! u32 n, n bytes              canonical configuration text (UTF-8)
//! K times:
//!   f64 lo, f64 hi            grading interval
//!   L·D_w f64                 context, row major
//!   L·D_w f64                 background context, if present
//! ```
//!
//! Reals are always stored as 64-bit floats.

use crate::config::{hash_text, Config, Seeds};
use crate::error::{Error, Result};
use crate::prompt::{BackgroundContext, PromptContext};
use crate::scalar::Scalar;
use crate::trainer::{Params, TrainRun};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DPRO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupState<T> {
    pub lo: f64,
    pub hi: f64,
    pub params: Params<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub context_len: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub seeds: Seeds,
    pub config_hash: [u8; 32],
    pub config_text: String,
    pub groups: Vec<GroupState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Captures a training run together with the configuration it used.
    pub fn from_run(run: &TrainRun<T>, config: &Config) -> Self {
        let t = &run.config;
        let text = config.canonical_text();
        Checkpoint {
            context_len: t.context_len,
            token_dim: t.token_dim,
            embed_dim: t.embed_dim,
            seeds: t.seeds,
            config_hash: hash_text(&text),
            config_text: text,
            groups: run
                .groups
                .iter()
                .map(|g| GroupState {
                    lo: g.lo,
                    hi: g.hi,
                    params: g.params.clone(),
                })
                .collect(),
        }
    }

    /// The configuration recorded in the file.
    pub fn config(&self) -> Result<Config> {
        Config::parse_text(&self.config_text)
    }

    pub fn params(&self) -> Vec<Params<T>> {
        self.groups.iter().map(|g| g.params.clone()).collect()
    }

    pub fn has_background(&self) -> bool {
        self.groups.first().is_some_and(|g| g.params.background.is_some())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.context_len, self.token_dim, self.embed_dim, self.groups.len()] {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.push(u8::from(self.has_background()));
        for s in [self.seeds.init, self.seeds.data, self.seeds.encoder] {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config_text.as_bytes());
        let put = |xs: &[T], b: &mut Vec<u8>| {
            for x in xs {
                b.extend_from_slice(&x.to_f64_lossless().to_le_bytes());
            }
        };
        for g in &self.groups {
            b.extend_from_slice(&g.lo.to_le_bytes());
            b.extend_from_slice(&g.hi.to_le_bytes());
            put(g.params.context.as_flat(), &mut b);
            if let Some(bg) = &g.params.background {
                put(bg.0.as_flat(), &mut b);
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let l = r.u32()? as usize;
        let d_w = r.u32()? as usize;
        let d_e = r.u32()? as usize;
        let k = r.u32()? as usize;
        let has_bg = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("invalid background flag {other}"))),
        };
        let seeds = Seeds {
            init: r.u64()?,
            data: r.u64()?,
            encoder: r.u64()?,
        };
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let n = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("configuration text is not UTF-8".into()))?;
        if hash_text(&config_text) != config_hash {
            return Err(Error::Checkpoint("configuration hash does not match the stored text".into()));
        }
        let mut groups = Vec::with_capacity(k);
        for _ in 0..k {
            let lo = r.f64()?;
            let hi = r.f64()?;
            let context = PromptContext::from_flat(l, d_w, r.reals(l * d_w)?)?;
            let background = if has_bg {
                Some(BackgroundContext(PromptContext::from_flat(l, d_w, r.reals(l * d_w)?)?))
            } else {
                None
            };
            groups.push(GroupState {
                lo,
                hi,
                params: Params { context, background },
            });
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last group",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint {
            context_len: l,
            token_dim: d_w,
            embed_dim: d_e,
            seeds,
            config_hash,
            config_text,
            groups,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "file truncated: needed {n} bytes at offset {}, {} available",
                self.at,
                self.bytes.len() - self.at
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        (0..n).map(|_| self.f64().map(T::lit)).collect()
    }
}
