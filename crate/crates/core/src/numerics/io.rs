//! `D2A1` tensor files: one ASCII header line `D2A1 f32 <ndim> <dims...>\n`
//! followed by row-major little-endian `f32` payload.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &str = "D2A1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let header = format!("{MAGIC} f32 {} {}\n", t.shape().len(), dims.join(" "));
    let mut buf = Vec::with_capacity(header.len() + 4 * t.numel());
    buf.extend_from_slice(header.as_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode<R: Read>(reader: R) -> Result<Tensor> {
    let mut reader = BufReader::new(reader);
    let mut header = Vec::new();
    reader.read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(Error::Format("missing header terminator".into()));
    }
    let header = std::str::from_utf8(&header[..header.len() - 1])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(Error::Format(format!("bad magic in header {header:?}")));
    }
    if fields.next() != Some("f32") {
        return Err(Error::Format(format!("unsupported dtype in header {header:?}")));
    }
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed header {header:?}")))
    };
    let ndim = parse(fields.next())?;
    let shape = (0..ndim).map(|_| parse(fields.next())).collect::<Result<Vec<_>>>()?;
    if fields.next().is_some() {
        return Err(Error::Format(format!("trailing header fields in {header:?}")));
    }
    let numel: usize = shape.iter().product();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != numel * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            numel * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(fs::File::open(path)?)
}
