//! Binary checkpoint format.
//!
//! ```text
//! "RPNC" | u32 version | u32 layer count
//! weight table, bias table, weight-momentum table, bias-momentum table
//!   each: per layer  u16 name len | name (utf-8) | u32 rows | u32 cols | rows·cols f64
//! u32 crc32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Biases are stored as `1 × len`
//! (the repression layer has `len = 0`).

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{LayerParams, RepNet, RepNetConfig, RepNetParams};

pub const MAGIC: &[u8; 4] = b"RPNC";
pub const VERSION: u32 = 1;

fn write_entry(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, values: &[f64]) {
    out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
    out.extend_from_slice(name.as_bytes());
    out.write_u32::<LittleEndian>(rows as u32).unwrap();
    out.write_u32::<LittleEndian>(cols as u32).unwrap();
    for &v in values {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
}

pub fn encode(params: &RepNetParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    out.write_u32::<LittleEndian>(params.layers.len() as u32).unwrap();
    for table in [&params.layers, &params.momentum] {
        for l in table {
            write_entry(
                &mut out,
                &l.name,
                l.weights.rows(),
                l.weights.cols(),
                l.weights.as_slice(),
            );
        }
        for l in table {
            write_entry(&mut out, &l.name, 1, l.bias.len(), &l.bias);
        }
    }
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc).unwrap();
    out
}

/// `(name, rows, cols, values)` of one table entry.
type Entry = (String, usize, usize, Vec<f64>);

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn entry(&mut self) -> Result<Entry> {
        let start = self.pos as u64;
        let len = self.u16("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "layer name")?)
            .map_err(|_| Error::Format {
                offset: start + 2,
                msg: "layer name is not utf-8".into(),
            })?
            .to_string();
        let rows = self.u32("rows")? as usize;
        let cols = self.u32("cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format {
                offset: start,
                msg: format!("layer '{name}' shape {rows}x{cols} overflows"),
            })?;
        let raw = self.take(count * 8, &format!("values of layer '{name}'"))?;
        let mut values = vec![0.0; count];
        LittleEndian::read_f64_into(raw, &mut values);
        Ok((name, rows, cols, values))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RepNetParams> {
    // the CRC trails the payload; parse within the payload so truncation
    // reports the offset where data ran out
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: 0,
            msg: "file shorter than magic".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", &bytes[..4]),
        });
    }
    let payload_end = bytes.len().saturating_sub(4).max(4);
    let mut cur = Cursor {
        bytes: &bytes[..payload_end],
        pos: 4,
    };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = cur.u32("layer count")? as usize;

    let read_table = |cur: &mut Cursor<'_>, names: Option<&[String]>| -> Result<Vec<Entry>> {
        let mut out = Vec::with_capacity(count.min(1024));
        for k in 0..count {
            let offset = cur.pos as u64;
            let e = cur.entry()?;
            if let Some(names) = names {
                if e.0 != names[k] {
                    return Err(Error::Format {
                        offset,
                        msg: format!("entry '{}' does not match layer '{}'", e.0, names[k]),
                    });
                }
            }
            out.push(e);
        }
        Ok(out)
    };

    let mut tables = Vec::with_capacity(4);
    let weights = read_table(&mut cur, None)?;
    let names: Vec<String> = weights.iter().map(|e| e.0.clone()).collect();
    tables.push(weights);
    for _ in 0..3 {
        tables.push(read_table(&mut cur, Some(&names))?);
    }
    if cur.pos != payload_end || bytes.len() < payload_end + 4 {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: "unexpected bytes before checksum".into(),
        });
    }
    let stored = LittleEndian::read_u32(&bytes[payload_end..]);
    let actual = crc32fast::hash(&bytes[..payload_end]);
    if stored != actual {
        return Err(Error::Format {
            offset: payload_end as u64,
            msg: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        });
    }

    let build = |w: &Entry, b: &Entry| -> Result<LayerParams> {
        if b.1 != 1 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bias of layer '{}' must have one row", b.0),
            });
        }
        let weights = Matrix::new(w.1, w.2, w.3.clone()).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("layer '{}': {e}", w.0),
        })?;
        Ok(LayerParams {
            name: w.0.clone(),
            weights,
            bias: b.3.clone(),
        })
    };
    let mut layers = Vec::with_capacity(count);
    let mut momentum = Vec::with_capacity(count);
    for k in 0..count {
        layers.push(build(&tables[0][k], &tables[1][k])?);
        momentum.push(build(&tables[2][k], &tables[3][k])?);
    }
    Ok(RepNetParams { layers, momentum })
}

pub fn save_checkpoint(params: &RepNetParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RepNetParams> {
    decode(&std::fs::read(path)?)
}

/// Loads parameters and checks them against `config`; a mismatch is a shape
/// error naming the offending layer.
pub fn load_network(path: &Path, config: RepNetConfig) -> Result<RepNet> {
    RepNet::from_params(config, load_checkpoint(path)?)
}
