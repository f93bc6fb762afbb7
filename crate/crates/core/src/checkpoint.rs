//! DFB1 parameter container.
//!
//! ```text
//! magic       b"DFB1"
//! version     u32
//! params      u64 parameter count
//! config_len  u32, then the NetConfig canonical text (UTF-8)
//! values      params x f64
//! sections    u32 count, then per section:
//!             name_len u32, name, rows u64, cols u64, rows*cols f64
//! ```
//!
//! Plain network checkpoints carry no sections. SWAG posteriors add
//! `second_moment` and `deviations`, BNN posteriors add `log_std` and
//! `prior_std`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnet::{NetConfig, Network};

pub const DFB_MAGIC: &[u8; 4] = b"DFB1";
pub const DFB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Section {
    pub fn vector(name: &str, data: Vec<f64>) -> Self {
        Self { name: name.into(), rows: 1, cols: data.len(), data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub config: NetConfig,
    pub params: Vec<f64>,
    pub sections: Vec<Section>,
}

impl ParamFile {
    pub fn from_network(net: &Network) -> Self {
        Self {
            config: net.config().clone(),
            params: net.get_params(),
            sections: Vec::new(),
        }
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("DFB1 file has no '{name}' section")))
    }

    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.config.clone())?;
        net.set_params(&self.params)?;
        Ok(net)
    }

    pub fn encode(&self) -> Vec<u8> {
        let config = self.config.to_string();
        let mut out = Vec::new();
        out.extend_from_slice(DFB_MAGIC);
        out.extend_from_slice(&DFB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.rows as u64).to_le_bytes());
            out.extend_from_slice(&(s.cols as u64).to_le_bytes());
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != DFB_MAGIC {
            return Err(Error::Format("not a DFB1 file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DFB_VERSION {
            return Err(Error::Format(format!("unsupported DFB1 version {version}")));
        }
        let count = r.u64()? as usize;
        let config_len = r.u32()? as usize;
        let config: NetConfig = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Format("DFB1 config is not UTF-8".into()))?
            .parse()?;
        if config.parameter_count() != count {
            return Err(Error::Format(format!(
                "DFB1 header declares {count} parameters but its config implies {}",
                config.parameter_count()
            )));
        }
        let params = r.f64s(count)?;
        let n_sections = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("DFB1 section name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format("DFB1 section size overflow".into()))?;
            let data = r.f64s(len)?;
            sections.push(Section { name, rows, cols, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after DFB1 payload", buf.len() - r.pos)));
        }
        Ok(Self { config, params, sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("DFB1 file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("DFB1 size overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    ParamFile::from_network(net).write(path)
}

pub fn load_network(path: &Path) -> Result<Network> {
    ParamFile::read(path)?.to_network()
}
