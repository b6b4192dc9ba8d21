//! Parameter serialization.
//!
//! Layout: a plain-text header followed by raw little-endian `f64` values.
//!
//! ```text
//! CDGM-PARAMS-1
//! layers <count>
//! <fan_in> <fan_out>        (one line per layer, head last)
//! data
//! <weights row-major, then bias, for each layer in order>
//! ```

use std::io::{BufRead, Write};

use super::{Dense, ParamSet};
use crate::{Error, Result};

pub const PARAMS_MAGIC: &str = "CDGM-PARAMS-1";

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    writeln!(w, "{PARAMS_MAGIC}")?;
    writeln!(w, "layers {}", params.layers.len())?;
    for layer in &params.layers {
        let (i, o) = layer.weight.dim();
        writeln!(w, "{i} {o}")?;
    }
    writeln!(w, "data")?;
    for t in params.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        path: "<params>".into(),
        reason: reason.into(),
    }
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(bad("unexpected end of header"));
    }
    Ok(line.trim_end().to_string())
}

pub fn read_params<R: BufRead>(mut r: R) -> Result<ParamSet> {
    let magic = header_line(&mut r)?;
    if magic != PARAMS_MAGIC {
        return Err(bad(format!("expected magic {PARAMS_MAGIC}, found {magic:?}")));
    }
    let count_line = header_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("layers ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(format!("bad layer count line {count_line:?}")))?;
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let line = header_line(&mut r)?;
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(i)), Some(Ok(o)), None) => dims.push((i, o)),
            _ => return Err(bad(format!("bad layer shape line {line:?}"))),
        }
    }
    if header_line(&mut r)? != "data" {
        return Err(bad("missing data marker"));
    }
    let mut params = ParamSet {
        layers: dims.iter().map(|&(i, o)| Dense::zeros(i, o)).collect(),
    };
    let mut buf = [0u8; 8];
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| bad("parameter data truncated"))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok(params)
}
