//! Binary checkpoint format.
//!
//! ```text
//! "OCCM"            4 bytes
//! version           u32 LE
//! config length     u32 LE, followed by that many bytes of canonical JSON
//! tensor count      u32 LE
//! per tensor:       u32 rank, rank × u32 dims, then f64 LE values
//! ```
//!
//! Tensors appear in layer order: conv weight then bias (if any); batchnorm
//! scale, shift, running mean, running variance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Layer, Network, NetworkConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OCCM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn put_tensor(out: &mut impl Write, dims: &[usize], values: &[f64]) -> std::io::Result<()> {
    put_u32(out, dims.len() as u32)?;
    for &d in dims {
        put_u32(out, d as u32)?;
    }
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn tensors(net: &Network) -> Vec<(Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                let s = c.weight.shape();
                out.push((vec![s.n, s.c, s.h, s.w], c.weight.data()));
                if let Some(b) = &c.bias {
                    out.push((vec![b.len()], b.as_slice()));
                }
            }
            Layer::BatchNorm(bn) => {
                for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    out.push((vec![v.len()], v.as_slice()));
                }
            }
            _ => {}
        }
    }
    out
}

pub fn write_checkpoint(net: &Network, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    put_u32(out, CHECKPOINT_VERSION)?;
    let json = net.config().to_canonical_json();
    put_u32(out, json.len() as u32)?;
    out.write_all(json.as_bytes())?;
    let ts = tensors(net);
    put_u32(out, ts.len() as u32)?;
    for (dims, values) in ts {
        put_tensor(out, &dims, values)?;
    }
    Ok(())
}

pub fn write_checkpoint_file(net: &Network, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(net, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
    origin: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::format(self.origin, format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self, expected: &[usize]) -> Result<Vec<f64>> {
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != expected {
            return Err(Error::format(
                self.origin,
                format!("tensor shape {dims:?} does not match config ({expected:?})"),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Reads one network record. One-class configs are rebuilt as one-class
/// networks, anything else as a plain stack.
pub fn read_checkpoint(input: &mut impl Read) -> Result<Network> {
    read_from(input, Path::new("<checkpoint>"))
}

fn read_from(input: &mut impl Read, origin: &Path) -> Result<Network> {
    let mut r = Reader { inner: input, origin };
    let magic = r.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(origin, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let json = r.bytes(len)?;
    let config: NetworkConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::format(origin, format!("bad config block: {e}")))?;
    let mut net = if config.validate().is_ok() {
        Network::build(config)?
    } else {
        Network::build_plain(config)?
    };
    let expected: Vec<Vec<usize>> = tensors(&net).into_iter().map(|(d, _)| d).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::format(
            origin,
            format!("checkpoint has {count} tensors, config needs {}", expected.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for dims in &expected {
        values.push(r.tensor(dims)?);
    }
    let mut it = values.into_iter();
    for layer in net.layers_mut() {
        match layer {
            Layer::Conv(c) => {
                c.weight.data_mut().copy_from_slice(&it.next().expect("counted"));
                if let Some(b) = c.bias.as_mut() {
                    *b = it.next().expect("counted");
                }
            }
            Layer::BatchNorm(bn) => {
                bn.gamma = it.next().expect("counted");
                bn.beta = it.next().expect("counted");
                bn.running_mean = it.next().expect("counted");
                bn.running_var = it.next().expect("counted");
            }
            _ => {}
        }
    }
    Ok(net)
}

pub fn read_checkpoint_file(path: &Path) -> Result<Network> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(file), path)
}
