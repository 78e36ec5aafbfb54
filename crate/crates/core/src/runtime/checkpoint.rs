//! Checkpoint files and the graph nodes that read and write them.
//!
//! A file is the magic `TGCKPT01` followed by entries until end of file.
//! Each entry is: u32 name length, UTF-8 name, u8 dtype code (0 = f32,
//! 1 = f64), u8 rank, rank u64 extents, little-endian element payload, and a
//! u32 CRC32 over all preceding bytes of the entry. Integers are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use crate::graph::{Graph, GraphError, NodeDef, NodeId, OpKind, TensorRef};
use crate::tensor::{DType, TensorData, TensorValue};

pub const MAGIC: &[u8; 8] = b"TGCKPT01";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0} is not a checkpoint file")]
    BadMagic(String),
    #[error("checkpoint entry {entry} is truncated")]
    Truncated { entry: usize },
    #[error("checksum mismatch in checkpoint entry {entry} ({name:?})")]
    ChecksumMismatch { entry: usize, name: String },
    #[error("checkpoint has no variable named {0:?}")]
    NameNotFound(String),
    #[error("checkpoint variable {name:?} is {got}, graph expects {expected}")]
    ShapeMismatchAtRestore {
        name: String,
        expected: String,
        got: String,
    },
    #[error("cannot checkpoint {name:?}: {reason}")]
    Unsupported { name: String, reason: String },
}

fn io_err(path: &Path, e: io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn encode_entry(name: &str, value: &TensorValue) -> Result<Vec<u8>, CheckpointError> {
    let code = match value.dtype() {
        DType::F32 | DType::F64 => value.dtype().code(),
        other => {
            return Err(CheckpointError::Unsupported {
                name: name.to_string(),
                reason: format!("dtype {other}"),
            })
        }
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(code);
    buf.push(value.rank() as u8);
    for &d in value.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match value.data() {
        TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        TensorData::Summary(_) => unreachable!("rejected above"),
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn encode(entries: &[(String, TensorValue)]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = MAGIC.to_vec();
    for (name, value) in entries {
        out.extend(encode_entry(name, value)?);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    entry: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { entry: self.entry })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Vec<(String, TensorValue)>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic(origin.to_string()));
    }
    let mut c = Cursor {
        bytes,
        pos: MAGIC.len(),
        entry: 0,
    };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let start = c.pos;
        let name_len = c.u32()? as usize;
        let name_bytes = c.take(name_len)?;
        let code = c.u8()?;
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated { entry: c.entry })?;
        let dtype = DType::from_code(code).filter(|d| d.is_float());
        let width = dtype.map_or(0, DType::size_of);
        let payload = c.take(
            count
                .checked_mul(width)
                .ok_or(CheckpointError::Truncated { entry: c.entry })?,
        )?;
        let body_end = c.pos;
        let stored = c.u32()?;
        let name = String::from_utf8_lossy(name_bytes).into_owned();
        if crc32fast::hash(&bytes[start..body_end]) != stored {
            return Err(CheckpointError::ChecksumMismatch { entry: c.entry, name });
        }
        let data = match dtype {
            Some(DType::F32) => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Some(DType::F64) => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ),
            _ => {
                return Err(CheckpointError::Unsupported {
                    name,
                    reason: format!("dtype code {code}"),
                })
            }
        };
        let value = TensorValue::new(dims, data).expect("payload sized from dims");
        out.push((name, value));
        c.entry += 1;
    }
    Ok(out)
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn write_file(path: &Path, entries: &[(String, TensorValue)]) -> Result<(), CheckpointError> {
    let bytes = encode(entries)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| io_err(path, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, TensorValue)>, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Looks up `name` and checks it against the declared dtype and dims.
pub fn lookup(
    entries: &[(String, TensorValue)],
    name: &str,
    dtype: DType,
    dims: &[usize],
) -> Result<TensorValue, CheckpointError> {
    let (_, value) = entries
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| CheckpointError::NameNotFound(name.to_string()))?;
    if value.dtype() != dtype || value.dims() != dims {
        return Err(CheckpointError::ShapeMismatchAtRestore {
            name: name.to_string(),
            expected: format!("{dtype}{dims:?}"),
            got: format!("{}{:?}", value.dtype(), value.dims()),
        });
    }
    Ok(value.clone())
}

/// Save and Restore nodes covering a set of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Saver {
    /// Writes every covered variable.
    pub save_op: NodeId,
    /// Reads every covered variable back and assigns it.
    pub restore_op: NodeId,
    pub variables: Vec<NodeId>,
    /// Default path baked into the nodes; a run may override it.
    pub path: String,
}

impl Saver {
    /// Covers every registered variable.
    pub fn new(graph: &mut Graph, path: &str) -> Result<Saver, GraphError> {
        let vars: Vec<TensorRef> = graph.variables().iter().map(|v| graph.output(v.variable, 0)).collect();
        Saver::for_variables(graph, &vars, path)
    }

    pub fn for_variables(graph: &mut Graph, vars: &[TensorRef], path: &str) -> Result<Saver, GraphError> {
        graph.scoped("save", |g| {
            let names: Vec<String> = vars.iter().map(|v| g.expect_node(v.node).name.clone()).collect();
            let save_op = g.insert(
                NodeDef::new(OpKind::Save)
                    .inputs(vars)
                    .attr("names", names.clone())
                    .attr("path", path)
                    .name("save"),
            )?;
            let mut assigns = Vec::with_capacity(vars.len());
            for (v, name) in vars.iter().zip(&names) {
                let restored = g.add_node(
                    NodeDef::new(OpKind::Restore)
                        .attr("path", path)
                        .attr("name", name.as_str())
                        .attr("dtype", v.dtype)
                        .attr("shape", v.shape.clone())
                        .name("restore"),
                )?;
                let a = g.assign(v, &restored[0])?;
                assigns.push(a.node);
            }
            let restore_op = g.group(assigns, "restore_all")?;
            Ok(Saver {
                save_op,
                restore_op,
                variables: vars.iter().map(|v| v.node).collect(),
                path: path.to_string(),
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, TensorValue)> {
        vec![
            (
                "w".to_string(),
                TensorValue::from_f32(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
            ),
            ("b".to_string(), TensorValue::from_f64(&[], vec![0.1]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes, "mem").unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, v1), (n2, v2)) in sample().iter().zip(&back) {
            assert_eq!(n1, n2);
            assert!(v1.bit_eq(v2));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode(&bytes, "mem"),
            Err(CheckpointError::ChecksumMismatch { .. }) | Err(CheckpointError::Truncated { .. })
        ));
        let good = encode(&sample()).unwrap();
        assert!(matches!(
            decode(&good[..good.len() - 2], "mem"),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(decode(b"NOTACKPT", "mem"), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn lookup_checks_names_and_shapes() {
        let entries = vec![("w".to_string(), TensorValue::zeros(DType::F32, &[784, 10]))];
        assert!(lookup(&entries, "w", DType::F32, &[784, 10]).is_ok());
        assert!(matches!(
            lookup(&entries, "w", DType::F32, &[10, 784]),
            Err(CheckpointError::ShapeMismatchAtRestore { .. })
        ));
        assert_eq!(
            lookup(&entries, "v", DType::F32, &[1]),
            Err(CheckpointError::NameNotFound("v".into()))
        );
    }
}
