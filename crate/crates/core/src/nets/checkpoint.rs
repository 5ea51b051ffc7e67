//! Parameter checkpoints: one JSON header line, then raw little-endian `f64`s.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::MlpSpec;
use crate::error::{invalid, Result};

const FORMAT: &str = "snflow-params-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParams {
    pub name: String,
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub nets: Vec<NamedParams>,
    /// Free-form model description stored alongside the weights.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn net(&self, name: &str) -> Option<&NamedParams> {
        self.nets.iter().find(|n| n.name == name)
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    spec: MlpSpec,
    /// `(weight_start, bias_start)` per layer, relative to `start`.
    layers: Vec<(usize, usize)>,
    start: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    nets: Vec<Entry>,
    meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let mut start = 0;
    let mut nets = Vec::new();
    for n in &ckpt.nets {
        if n.params.len() != n.spec.num_params() {
            return Err(invalid(format!("net `{}` has the wrong parameter count", n.name)));
        }
        nets.push(Entry {
            name: n.name.clone(),
            spec: n.spec.clone(),
            layers: n.spec.offsets(),
            start,
            len: n.params.len(),
        });
        start += n.params.len();
    }
    let header = Header {
        format: FORMAT.into(),
        nets,
        meta: ckpt.meta.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for n in &ckpt.nets {
        for p in &n.params {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT {
        return Err(invalid(format!("unknown checkpoint format `{}`", header.format)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if bytes.len() % 8 != 0 {
        return Err(invalid("checkpoint payload is not a whole number of f64s"));
    }
    let mut nets = Vec::new();
    for e in header.nets {
        e.spec.validate()?;
        if e.len != e.spec.num_params() || e.layers != e.spec.offsets() {
            return Err(invalid(format!("inconsistent header for net `{}`", e.name)));
        }
        let Some(params) = values.get(e.start..e.start + e.len) else {
            return Err(invalid(format!("checkpoint truncated inside net `{}`", e.name)));
        };
        nets.push(NamedParams {
            name: e.name,
            spec: e.spec,
            params: params.to_vec(),
        });
    }
    Ok(Checkpoint {
        nets,
        meta: header.meta,
    })
}
