//! Weight file layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "UNETAEC1"
//! version      u32      1
//! encoders     u32
//! decoders     u32
//! base filters u32
//! residual     u32      1 = Conf1, 2 = Conf2
//! depth        u32
//! layers       u32
//! per layer, in canonical order, the kernel then the bias tensor:
//!   precision  u8       0 = f32, 1 = f16
//!   count      u32
//!   values     count × 4 or count × 2 bytes
//! ```
//!
//! Kernels are `[tap][in][out]`.

use std::io::{Read, Write};
use std::path::Path;

use half::f16;

use super::{Layer, NetTopology, NetWeights, Network, Precision, ResidualConfig};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"UNETAEC1";
const VERSION: u32 = 1;

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_weights<W: Write>(mut out: W, weights: &NetWeights) -> std::io::Result<()> {
    let topo = weights.topology();
    out.write_all(MAGIC)?;
    for v in [
        VERSION,
        topo.num_encoders as u32,
        topo.num_decoders as u32,
        topo.base_filters as u32,
        topo.residual.code(),
        topo.depth as u32,
        weights.network.layers().len() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    let tag = weights.precision.tag();
    let mut buf = Vec::new();
    for layer in weights.network.layers() {
        for tensor in [&layer.weights, &layer.bias] {
            buf.clear();
            buf.push(tag);
            buf.extend_from_slice(&(tensor.len() as u32).to_le_bytes());
            match weights.precision {
                Precision::Fp32 => tensor
                    .iter()
                    .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
                Precision::Fp16 => tensor
                    .iter()
                    .for_each(|&v| buf.extend_from_slice(&f16::from_f32(v).to_le_bytes())),
            }
            out.write_all(&buf)?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format(format!("truncated weight file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn read_tensor(
    cur: &mut Cursor<'_>,
    expect_len: usize,
    precision: &mut Option<Precision>,
) -> Result<Vec<f32>> {
    let tag = cur.u8()?;
    let p =
        Precision::from_tag(tag).ok_or_else(|| format(format!("unknown precision tag {tag}")))?;
    match precision {
        Some(prev) if *prev != p => return Err(format("mixed precision tags")),
        _ => *precision = Some(p),
    }
    let n = cur.u32()? as usize;
    if n != expect_len {
        return Err(format(format!(
            "tensor holds {n} values, topology needs {expect_len}"
        )));
    }
    let raw = cur.take(
        n.checked_mul(p.bytes_per_value())
            .ok_or_else(|| format("tensor too large"))?,
    )?;
    let vals = match p {
        Precision::Fp32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect::<Vec<_>>(),
        Precision::Fp16 => raw
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    };
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(format("non-finite weight"));
    }
    Ok(vals)
}

pub fn parse_weights(bytes: &[u8]) -> Result<NetWeights> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur
        .take(8)
        .map_err(|_| format("file too short for magic"))?
        != MAGIC
    {
        return Err(format("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let num_encoders = cur.u32()? as usize;
    let num_decoders = cur.u32()? as usize;
    let base_filters = cur.u32()? as usize;
    let code = cur.u32()?;
    let residual = ResidualConfig::from_code(code)
        .ok_or_else(|| format(format!("unknown residual config {code}")))?;
    let depth = cur.u32()? as usize;
    let topo = NetTopology {
        num_encoders,
        num_decoders,
        base_filters,
        residual,
        depth,
    };
    topo.validate()
        .map_err(|e| format(format!("bad topology header: {e}")))?;
    let shapes = topo.layer_shapes();
    let count = cur.u32()? as usize;
    if count != shapes.len() {
        return Err(format(format!(
            "{count} layers for a topology with {}",
            shapes.len()
        )));
    }
    let mut precision = None;
    let mut layers = Vec::with_capacity(count);
    for s in &shapes {
        let weights = read_tensor(&mut cur, s.kind.taps() * s.in_ch * s.out_ch, &mut precision)?;
        let bias = read_tensor(&mut cur, s.out_ch, &mut precision)?;
        layers.push(Layer {
            kind: s.kind,
            in_ch: s.in_ch,
            out_ch: s.out_ch,
            weights,
            bias,
        });
    }
    if cur.pos != bytes.len() {
        return Err(format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(NetWeights {
        network: Network::from_layers(topo, layers)?,
        precision: precision.unwrap_or(Precision::Fp32),
    })
}

pub fn read_weights<R: Read>(mut r: R) -> Result<NetWeights> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| format(format!("read failed: {e}")))?;
    parse_weights(&bytes)
}

pub fn save_weights(path: impl AsRef<Path>, weights: &NetWeights) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    write_weights(&mut w, weights).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_weights(&bytes)
}
