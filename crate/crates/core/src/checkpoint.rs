//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"CNETCKPT"
//! version    u32
//! header     u32 length + UTF-8 `key=value` lines (model config, then
//!            `meta.*` training metadata)
//! records    u32 count, then per record:
//!              u16 name length, name, u8 rank, rank x u32 dims,
//!              product(dims) x f32
//! optimizer  u8 flag; when 1: u64 step, u32 count, then per entry:
//!              u16 name length, name, u32 n, n x f64 first moment,
//!              n x f64 second moment
//! checksum   u64 FNV-1a of every preceding byte
//! ```
//!
//! Parameters are stored as f32; the trainer keeps them f32-representable
//! so saving is lossless. Optimizer moments are stored as f64 so that a
//! resumed run continues exactly where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{init_params, ConcateNet, ModelConfig};
use crate::numerics::params::fnv1a;
use crate::numerics::ParamStore;
use crate::trainer::AdamState;

const MAGIC: &[u8; 8] = b"CNETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
    pub optimizer: Option<AdamState>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| ck_err(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ck_err(format!(
                "truncated file: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = usize::from(self.u16()?);
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ck_err("record name is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| ck_err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn config_header(c: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("channels".into(), c.channels.to_string()),
        ("bands".into(), c.bands.to_string()),
        ("depth".into(), c.depth.to_string()),
        ("bins".into(), c.bins.to_string()),
        ("nlr_channels".into(), c.nlr_channels.to_string()),
        ("sample_rate".into(), c.sample_rate.to_string()),
    ]
}

fn parse_header(text: &str) -> Result<(ModelConfig, BTreeMap<String, String>)> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ck_err(format!("bad header line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let mut get = |k: &str| -> Result<usize> {
        kv.remove(k)
            .ok_or_else(|| ck_err(format!("header lacks `{k}`")))?
            .parse()
            .map_err(|_| ck_err(format!("header `{k}` is not an integer")))
    };
    let config = ModelConfig {
        channels: get("channels")?,
        bands: get("bands")?,
        depth: get("depth")?,
        bins: get("bins")?,
        nlr_channels: get("nlr_channels")?,
        sample_rate: u32::try_from(get("sample_rate")?).map_err(|_| ck_err("sample_rate out of range"))?,
    };
    let mut meta = BTreeMap::new();
    for (k, v) in kv {
        match k.strip_prefix("meta.") {
            Some(m) => {
                meta.insert(m.to_string(), v);
            }
            None => return Err(ck_err(format!("unknown header key `{k}`"))),
        }
    }
    Ok((config, meta))
}

impl Checkpoint {
    pub fn from_model(model: &ConcateNet) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            metadata: BTreeMap::new(),
            optimizer: None,
        }
    }

    pub fn into_model(self) -> Result<ConcateNet> {
        ConcateNet::from_params(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in config_header(&self.config) {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(ck_err(format!("metadata entry `{k}` cannot be encoded")));
            }
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_name(&mut out, name)?;
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                out.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
                for (name, m) in &opt.m {
                    let v = opt
                        .v
                        .get(name)
                        .filter(|v| v.len() == m.len())
                        .ok_or_else(|| ck_err(format!("optimizer moments for `{name}` are inconsistent")))?;
                    put_name(&mut out, name)?;
                    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                    m.iter().chain(v).for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Parses and validates a checkpoint. Every parameter the config
    /// requires must be present with the right shape, and nothing else.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| ck_err("not a checkpoint (file too short)"))? != MAGIC {
            return Err(ck_err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ck_err(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        if buf.len() < 8 {
            return Err(ck_err("truncated file"));
        }
        let body = &buf[..buf.len() - 8];
        let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| ck_err("header is not UTF-8"))?;
        let (config, metadata) = parse_header(header)?;
        config.validate()?;

        let mut params = init_params(&config, 0)?;
        let mut seen = std::collections::BTreeSet::new();
        let count = r.u32()?;
        for _ in 0..count {
            let name = r.name()?;
            let rank = usize::from(r.u8()?);
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let expected = params
                .get_mut(&name)
                .map_err(|_| ck_err(format!("unexpected parameter `{name}`")))?;
            if expected.shape() != shape.as_slice() {
                return Err(ck_err(format!(
                    "parameter `{name}` has shape {shape:?}, expected {:?}",
                    expected.shape()
                )));
            }
            let bytes = r.take(expected.len() * 4)?;
            for (d, c) in expected.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *d = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
            }
            if !seen.insert(name.clone()) {
                return Err(ck_err(format!("duplicate parameter `{name}`")));
            }
        }
        if let Some(missing) = params.names().find(|n| !seen.contains(*n)) {
            return Err(ck_err(format!("missing parameter `{missing}`")));
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.u32()?;
                let mut opt = AdamState {
                    step,
                    ..AdamState::default()
                };
                for _ in 0..n {
                    let name = r.name()?;
                    let len = r.u32()? as usize;
                    match params.get(&name) {
                        Ok(p) if p.len() == len => {}
                        _ => return Err(ck_err(format!("optimizer entry `{name}` does not match a parameter"))),
                    }
                    opt.m.insert(name.clone(), r.f64s(len)?);
                    opt.v.insert(name, r.f64s(len)?);
                }
                Some(opt)
            }
            f => return Err(ck_err(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(ck_err(if r.pos > body.len() {
                "truncated file".to_string()
            } else {
                format!("{} trailing bytes", body.len() - r.pos)
            }));
        }
        if fnv1a(body) != stored {
            return Err(ck_err("checksum mismatch (file corrupted or truncated)"));
        }
        Ok(Self {
            config,
            params,
            metadata,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |tmp| Ok(fs::write(tmp, &bytes)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => ck_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
