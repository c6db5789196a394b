//! Versioned binary checkpoint: named parameter blocks with little-endian
//! binary32 values. Save -> load -> save is bit-exact.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ILCP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Named parameter blocks: name -> (shape dims, values).
pub type ParamBlocks = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub fn save_checkpoint(path: &Path, blocks: &ParamBlocks) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, (shape, values)) in blocks {
            let expected: usize = shape.iter().product();
            if expected != values.len() {
                return Err(Error::Checkpoint(format!(
                    "block {name}: shape {shape:?} does not match {} values",
                    values.len()
                )));
            }
            f.write_all(&(name.len() as u16).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&[shape.len() as u8])?;
            for &d in shape {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in values {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    // Atomic publish: no partial checkpoint on interruption.
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamBlocks> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u16(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_blocks = read_u32(&mut f)? as usize;
    let mut blocks = ParamBlocks::new();
    for _ in 0..n_blocks {
        let name_len = read_u16(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("non-utf8 block name".into()))?;
        let mut rank = [0u8; 1];
        f.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut f)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            f.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        if blocks.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate block {name}")));
        }
    }
    Ok(blocks)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
