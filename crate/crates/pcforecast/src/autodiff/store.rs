//! Parameter checkpoint blocks: "PCFM" magic, version, then a named table of
//! (name, shape, float32 payload) entries. Round trips are bit-exact.

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCFM";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered named parameter table, including batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTable {
    pub entries: Vec<ParamEntry>,
}

impl ParamTable {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let entry = ParamEntry {
            name: name.into(),
            shape,
            data,
        };
        assert_eq!(
            entry.data.len(),
            entry.shape.iter().product::<usize>(),
            "entry '{}' data does not match its shape",
            entry.name
        );
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.push(VERSION);
        bytes.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            bytes.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(e.name.as_bytes());
            bytes.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(format!("parameter table: {msg}"));
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(fail("truncated"));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = take(&mut off, 1)?[0];
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let read_u32 = |off: &mut usize| -> Result<u32> {
            let s = take(off, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        let count = read_u32(&mut off)? as usize;
        let mut table = ParamTable::default();
        for _ in 0..count {
            let name_len = read_u32(&mut off)? as usize;
            let name = std::str::from_utf8(take(&mut off, name_len)?)
                .map_err(|_| fail("name is not utf-8"))?
                .to_string();
            let rank = read_u32(&mut off)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut off)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let s = take(&mut off, 4)?;
                data.push(f32::from_le_bytes([s[0], s[1], s[2], s[3]]));
            }
            table.entries.push(ParamEntry { name, shape, data });
        }
        if off != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(table)
    }
}
