//! Flat binary parameter container.
//!
//! ```text
//! "RRDN1"
//! u32 LE config length, config bytes (`key = value` lines, UTF-8)
//! repeated until EOF:
//!     u32 LE name length, name bytes,
//!     4 x u32 LE shape,
//!     numel x f32 LE values
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::{Element, Shape, Tensor};

use super::{Network, NetworkConfig, ParamStore};

pub const MAGIC: &[u8; 5] = b"RRDN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: String,
    pub params: ParamStore<f32>,
}

pub fn write_container(w: &mut impl Write, c: &Container) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(c.config.len() as u32).to_le_bytes())?;
    w.write_all(c.config.as_bytes())?;
    for (name, t) in c.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for d in t.shape().0 {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_container(r: &mut impl Read) -> Result<Container> {
    let mut all = Vec::new();
    r.read_to_end(&mut all).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = all.as_slice();
    if take(&mut bytes, MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an RRDN1 file".into()));
    }
    let clen = take_u32(&mut bytes, "config length")? as usize;
    let config = String::from_utf8(take(&mut bytes, clen, "config")?.to_vec())
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let mut params = ParamStore::new();
    while !bytes.is_empty() {
        let nlen = take_u32(&mut bytes, "name length")? as usize;
        let name = String::from_utf8(take(&mut bytes, nlen, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = take_u32(&mut bytes, "shape")? as usize;
        }
        let shape = Shape(dims);
        let raw = take(&mut bytes, 4 * shape.numel(), &format!("values of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params
            .insert(name, Tensor::from_vec(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(Container { config, params })
}

pub fn save_checkpoint<T: Element>(path: &Path, net: &Network<T>) -> Result<()> {
    let c = Container { config: net.config().to_kv().to_text(), params: net.params().cast() };
    let mut buf = Vec::new();
    write_container(&mut buf, &c).map_err(|e| Error::io(path, e))?;
    // write-then-rename so an interrupted save never clobbers the previous file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Network<T>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let c = read_container(&mut f)?;
    let config = NetworkConfig::from_kv(&KeyValues::parse(&c.config)?)?;
    Network::from_params(config, c.params.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    #[test]
    fn rejects_garbage() {
        assert!(read_container(&mut &b"NOPE1"[..]).is_err());
        let mut buf = Vec::new();
        let cfg = NetworkConfig::with_channels(Variant::RDispNetM, &[2, 2, 2], &[2, 2, 2]);
        let mut cfg = cfg;
        cfg.num_output_scales = 2;
        let net = Network::<f32>::build(cfg, 1).unwrap();
        let c = Container { config: net.config().to_kv().to_text(), params: net.params().clone() };
        write_container(&mut buf, &c).unwrap();
        assert_eq!(&buf[..5], b"RRDN1");
        buf.truncate(buf.len() - 3);
        assert!(read_container(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn mismatched_config_rejected() {
        let mut cfg = NetworkConfig::with_channels(Variant::RDispNetM, &[2, 3, 4], &[2, 3, 4]);
        cfg.num_output_scales = 2;
        let net = Network::<f32>::build(cfg.clone(), 1).unwrap();
        let mut other = cfg;
        other.variant = Variant::RRDispNetM;
        let err = Network::from_params(other, net.params().clone()).err().unwrap();
        assert!(err.to_string().contains("fuse.weight"), "{err}");
    }
}
