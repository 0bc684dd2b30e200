//! Plain-text storage for named tensors.
//!
//! ```text
//! flair-tensors 1
//! <name> <dim0>x<dim1>...
//! <v0> <v1> ...
//! ```
//!
//! One header line and one value line per tensor, in the order given to
//! [`write_tensors`]. Values use 17 significant digits.

use std::io::{BufRead, Write};

use crate::datagen::fmt_f64;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

const MAGIC: &str = "flair-tensors 1";

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, &Tensor)]) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidTensor(format!("tensor name `{name}` must be a single token")));
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{name} {}", shape.join("x"))?;
        let values: Vec<String> = t.data().iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{}", values.join(" "))?;
    }
    Ok(())
}

pub fn read_tensors<R: BufRead>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut lines = r.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    let first = match lines.next() {
        Some((_, l)) => l?,
        None => String::new(),
    };
    if first.trim_end() != MAGIC {
        return Err(parse_err(0, format!("expected `{MAGIC}`")));
    }
    let mut out = Vec::new();
    while let Some((i, header)) = lines.next() {
        let header = header?;
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        let (Some(name), Some(shape), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(i, format!("bad tensor header `{header}`")));
        };
        let shape = shape
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err(i, format!("bad shape `{shape}`")))?;
        let Some((j, values)) = lines.next() else {
            return Err(parse_err(i + 1, format!("missing values for `{name}`")));
        };
        let data = values?
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(j, e.to_string()))?;
        let t = Tensor::new(shape, data).map_err(|e| parse_err(j, e.to_string()))?;
        out.push((name.to_string(), t));
    }
    Ok(out)
}
