//! Parameter checkpoints: a text manifest (name, shape, precision,
//! partition tag) followed by raw little-endian value arrays. Round-trips
//! are bit-exact; frozen-weight contracts compare these bytes directly.

use crate::error::{Error, Result};
use crate::model::params::{Partition, VisitParams};
use crate::scalar::{Precision, Scalar};
use std::path::Path;

const MAGIC: &str = "gpeft-ckpt 1";

/// One manifest entry plus its payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub precision: Precision,
    pub tensors: Vec<RawTensor>,
}

impl RawCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Concatenated bytes of one partition, in manifest order.
    pub fn partition_bytes(&self, partition: Partition) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.tensors.iter().filter(|t| t.partition == partition) {
            out.extend_from_slice(&t.bytes);
        }
        out
    }
}

/// Shared two-part container: UTF-8 header lines, a `data` marker, then a
/// binary payload.
pub fn write_sections(header: &[String], payload: &[u8], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for line in header {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(b"data\n");
    out.extend_from_slice(payload);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_sections(path: &Path) -> Result<(Vec<String>, Vec<u8>)> {
    let content = std::fs::read(path)?;
    let marker: &[u8] = b"\ndata\n";
    let pos = content
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Parse(format!("{}: no data marker", path.display())))?;
    let header = std::str::from_utf8(&content[..pos])
        .map_err(|_| Error::Parse(format!("{}: header is not UTF-8", path.display())))?;
    let payload = content[pos + marker.len()..].to_vec();
    Ok((header.lines().map(str::to_string).collect(), payload))
}

fn save_filtered<S: Scalar>(
    params: &dyn VisitParams<S>,
    keep: &dyn Fn(Partition) -> bool,
    path: &Path,
) -> Result<()> {
    let mut header = vec![MAGIC.to_string(), format!("precision {}", S::PRECISION.as_str())];
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    params.visit(&mut |name, partition, tensor| {
        if !keep(partition) {
            return;
        }
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        entries.push(format!("t {name} {} {}", partition.tag(), dims.join(",")));
        for &v in tensor.values() {
            v.write_le(&mut payload);
        }
    });
    header.push(format!("tensors {}", entries.len()));
    header.extend(entries);
    write_sections(&header, &payload, path)
}

/// Full checkpoint: every parameter in all three partitions.
pub fn save<S: Scalar>(params: &dyn VisitParams<S>, path: &Path) -> Result<()> {
    save_filtered(params, &|_| true, path)
}

/// Adapter-only checkpoint (Θ_peft and Θ_g) — the per-application unit of
/// storage; the frozen backbone is shared.
pub fn save_adapters<S: Scalar>(params: &dyn VisitParams<S>, path: &Path) -> Result<()> {
    save_filtered(params, &|p| p != Partition::Pre, path)
}

pub fn load_raw(path: &Path) -> Result<RawCheckpoint> {
    let (header, payload) = read_sections(path)?;
    let mut lines = header.iter();
    if lines.next().map(String::as_str) != Some(MAGIC) {
        return Err(Error::Parse(format!("{}: not a checkpoint", path.display())));
    }
    let precision_line = lines.next().ok_or_else(|| Error::Parse("missing precision".into()))?;
    let precision = precision_line
        .strip_prefix("precision ")
        .and_then(Precision::parse)
        .ok_or_else(|| Error::Parse(format!("bad precision line {precision_line:?}")))?;
    let count_line = lines.next().ok_or_else(|| Error::Parse("missing tensor count".into()))?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad tensor count {count_line:?}")))?;

    let mut tensors = Vec::with_capacity(count);
    let mut offset = 0usize;
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| Error::Parse("manifest truncated".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "t" {
            return Err(Error::Parse(format!("bad manifest line {line:?}")));
        }
        let partition = Partition::parse(fields[2])
            .ok_or_else(|| Error::Parse(format!("bad partition tag {:?}", fields[2])))?;
        let shape: Vec<usize> = fields[3]
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Parse(format!("bad dim {d:?}"))))
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let n_bytes = count * precision.bytes();
        if offset + n_bytes > payload.len() {
            return Err(Error::Parse("checkpoint payload truncated".into()));
        }
        tensors.push(RawTensor {
            name: fields[1].to_string(),
            partition,
            shape,
            bytes: payload[offset..offset + n_bytes].to_vec(),
        });
        offset += n_bytes;
    }
    if offset != payload.len() {
        return Err(Error::Parse("checkpoint payload has trailing bytes".into()));
    }
    Ok(RawCheckpoint { precision, tensors })
}

/// Apply a checkpoint onto existing parameters. Every tensor in the file
/// must match a parameter by name and shape; parameters the file does not
/// mention are left untouched (that is how adapter-only checkpoints load).
pub fn load_into<S: Scalar>(params: &mut dyn VisitParams<S>, path: &Path) -> Result<()> {
    let raw = load_raw(path)?;
    if raw.precision != S::PRECISION {
        return Err(Error::Parse(format!(
            "checkpoint precision {} does not match run precision {}",
            raw.precision.as_str(),
            S::PRECISION.as_str()
        )));
    }
    let mut applied = vec![false; raw.tensors.len()];
    let mut failure: Option<Error> = None;
    params.visit_values_mut(&mut |name, _, values| {
        if failure.is_some() {
            return;
        }
        if let Some(idx) = raw.tensors.iter().position(|t| t.name == name) {
            let t = &raw.tensors[idx];
            let width = S::PRECISION.bytes();
            if t.bytes.len() != values.len() * width {
                failure = Some(Error::Parse(format!(
                    "tensor {name} has {} bytes, parameter wants {}",
                    t.bytes.len(),
                    values.len() * width
                )));
                return;
            }
            for (i, v) in values.iter_mut().enumerate() {
                *v = S::read_le(&t.bytes[i * width..(i + 1) * width]);
            }
            applied[idx] = true;
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(idx) = applied.iter().position(|a| !a) {
        return Err(Error::Parse(format!(
            "checkpoint tensor {} has no matching parameter",
            raw.tensors[idx].name
        )));
    }
    Ok(())
}
