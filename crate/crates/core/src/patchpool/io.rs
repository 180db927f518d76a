//! Little-endian binary pool files.
//!
//! ```text
//! "PSPL" | u32 version | u32 patch_size | u32 n_train | u32 n_val | u32 n_test
//! per pair: u8 label | i32 sar_y | i32 sar_x | i32 opt_y | i32 opt_x
//!           | u32 scene_id | f32[d*d] sar | f32[d*d] opt
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Label, PatchPair, PatchPool, PoolError, PoolMetadata, PAPER_FRACTIONS};

pub const POOL_MAGIC: [u8; 4] = *b"PSPL";
pub const POOL_VERSION: u32 = 1;

pub fn write_pool(pool: &PatchPool, path: impl AsRef<Path>) -> Result<(), PoolError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pool_to(pool, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_pool_to<W: Write>(pool: &PatchPool, w: &mut W) -> Result<(), PoolError> {
    w.write_all(&POOL_MAGIC)?;
    w.write_all(&POOL_VERSION.to_le_bytes())?;
    w.write_all(&(pool.patch_size as u32).to_le_bytes())?;
    for c in pool.counts() {
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    for p in pool.train.iter().chain(&pool.val).chain(&pool.test) {
        assert_eq!(
            p.size, pool.patch_size,
            "pair size differs from pool patch size"
        );
        w.write_all(&[p.label.to_byte()])?;
        for v in [
            p.sar_center.0,
            p.sar_center.1,
            p.opt_center.0,
            p.opt_center.1,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&p.scene_id.to_le_bytes())?;
        for v in p.sar.iter().chain(&p.opt) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<PatchPool, PoolError> {
    read_pool_from(&mut BufReader::new(File::open(path)?))
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], PoolError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => PoolError::Truncated,
        _ => PoolError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PoolError> {
    read_array::<R, 4>(r).map(u32::from_le_bytes)
}

fn read_i32<R: Read>(r: &mut R) -> Result<i32, PoolError> {
    read_array::<R, 4>(r).map(i32::from_le_bytes)
}

fn read_patch<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, PoolError> {
    (0..n)
        .map(|_| read_array::<R, 4>(r).map(f32::from_le_bytes))
        .collect()
}

/// Reads a pool and insists on consuming the whole stream.
pub fn read_pool_from<R: Read>(r: &mut R) -> Result<PatchPool, PoolError> {
    let magic = read_array::<R, 4>(r)?;
    if magic != POOL_MAGIC {
        return Err(PoolError::BadMagic(magic));
    }
    let version = read_u32(r)?;
    if version != POOL_VERSION {
        return Err(PoolError::UnsupportedVersion(version));
    }
    let d = read_u32(r)? as usize;
    let counts = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
    let mut splits: [Vec<PatchPair>; 3] = Default::default();
    for (split, &n) in splits.iter_mut().zip(&counts) {
        for _ in 0..n {
            let label = Label::from_byte(read_array::<R, 1>(r)?[0])?;
            let sar_center = (read_i32(r)?, read_i32(r)?);
            let opt_center = (read_i32(r)?, read_i32(r)?);
            let scene_id = read_u32(r)?;
            let sar = read_patch(r, d * d)?;
            let opt = read_patch(r, d * d)?;
            split.push(PatchPair {
                size: d,
                sar,
                opt,
                label,
                sar_center,
                opt_center,
                scene_id,
            });
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(PoolError::TrailingBytes);
    }
    let [train, val, test] = splits;
    let total = (train.len() + val.len() + test.len()).max(1) as f64;
    let fractions = if train.is_empty() && val.is_empty() && test.is_empty() {
        PAPER_FRACTIONS
    } else {
        [
            train.len() as f64 / total,
            val.len() as f64 / total,
            test.len() as f64 / total,
        ]
    };
    Ok(PatchPool {
        patch_size: d,
        fractions,
        train,
        val,
        test,
        metadata: PoolMetadata::default(),
    })
}
