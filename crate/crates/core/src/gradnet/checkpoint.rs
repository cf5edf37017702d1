//! `MCPN` checkpoint files.
//!
//! Layout (little-endian): magic `MCPN`, `u16` version, `u32` layer count,
//! then per layer a `u8` kind tag, `u16` buffer count and for each buffer a
//! `u8` rank, `u32` dims and `f32` data. Buffers are a layer's parameters
//! followed by its non-trainable state. Loading restores values into a graph
//! of identical architecture.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

use super::{Graph, LayerKind, Real};

pub const MAGIC: &[u8; 4] = b"MCPN";
pub const VERSION: u16 = 1;

pub fn encode<T: Real>(graph: &Graph<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(graph.len() as u32).to_le_bytes());
    for layer in graph.layers() {
        out.push(layer.kind().tag());
        let bufs = layer.buffers();
        out.extend_from_slice(&(bufs.len() as u16).to_le_bytes());
        for b in bufs {
            out.push(b.shape().len() as u8);
            for &d in b.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in b.data() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Restores every buffer of `graph` from `bytes`, checking layer kinds and
/// buffer shapes. On error the graph is left unchanged.
pub fn decode_into<T: Real>(graph: &mut Graph<T>, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an MCPN checkpoint".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    if count != graph.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} layers, model has {}",
            graph.len()
        )));
    }
    let mut staged: Vec<Vec<Vec<T>>> = Vec::with_capacity(count);
    for (i, layer) in graph.layers().enumerate() {
        let tag = r.u8()?;
        let kind = LayerKind::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("layer {i}: unknown kind tag {tag}")))?;
        if kind != layer.kind() {
            return Err(Error::Format(format!(
                "layer {i}: checkpoint has {}, model has {}",
                kind.name(),
                layer.kind().name()
            )));
        }
        let bufs = layer.buffers();
        let n = r.u16()? as usize;
        if n != bufs.len() {
            return Err(Error::Format(format!(
                "layer {i}: expected {} buffers, found {n}",
                bufs.len()
            )));
        }
        let mut values = Vec::with_capacity(n);
        for b in bufs {
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != b.shape() {
                return Err(Error::Format(format!(
                    "layer {i}: buffer shape {dims:?} does not match model {:?}",
                    b.shape()
                )));
            }
            let raw = r.take(b.len() * 4)?;
            values.push(
                raw.chunks_exact(4)
                    .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
            );
        }
        staged.push(values);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    for (layer, values) in graph.layers_mut().zip(staged) {
        for (buf, v) in layer.buffers_mut().into_iter().zip(values) {
            buf.data_mut().copy_from_slice(&v);
        }
    }
    Ok(())
}

pub fn save<T: Real>(graph: &Graph<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(graph))?;
    Ok(())
}

pub fn load_into<T: Real>(graph: &mut Graph<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    decode_into(graph, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::{BatchNorm, Dense, GraphBuilder, NodeId, Relu};
    use crate::rng::stream_rng;

    fn graph(seed: u64) -> Graph<f32> {
        let mut b = GraphBuilder::new(&[3]);
        let mut d = Dense::new(3, 4);
        d.init_uniform(6.0, &mut stream_rng(seed, "ckpt", 0));
        let d = b.chain("dense", d, NodeId::Input).unwrap();
        let n = b.chain("bn", BatchNorm::new(4), d).unwrap();
        let r = b.chain("relu", Relu::new(), n).unwrap();
        b.build(r).unwrap()
    }

    #[test]
    fn round_trip_restores_buffers() {
        let a = graph(1);
        let mut b = graph(2);
        decode_into(&mut b, &encode(&a)).unwrap();
        for (x, y) in a.layers().zip(b.layers()) {
            for (p, q) in x.buffers().iter().zip(y.buffers()) {
                assert_eq!(p.data(), q.data());
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let a = graph(1);
        let bytes = encode(&a);
        let mut b = graph(2);
        assert!(decode_into(&mut b, &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_into(&mut b, &bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_into(&mut b, &extra).is_err());
        let mut other = GraphBuilder::<f32>::new(&[3]);
        let d = other
            .chain("dense", Dense::new(3, 5), NodeId::Input)
            .unwrap();
        let mut other = other.build(d).unwrap();
        assert!(decode_into(&mut other, &bytes).is_err());
    }
}
