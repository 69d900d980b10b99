//! Model checkpoint serialization.
//!
//! Single binary blob, little-endian throughout:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `b"TSDFMAP\x01"`                  |
//! | 8      | 4    | levels (u32)                            |
//! | 12     | 4    | features_per_level (u32)                |
//! | 16     | 4    | base_resolution (u32)                   |
//! | 20     | 4    | finest_resolution (u32)                 |
//! | 24     | 4    | table_size_log2 (u32)                   |
//! | 28     | 4    | one-blob bins_per_axis (u32)            |
//! | 32     | 8    | one-blob kernel_sigma (f64)             |
//! | 40     | 4    | decoder hidden width (u32)              |
//! | 44     | 4    | reserved, zero (u32)                    |
//! | 48     | 48   | bounds min xyz, max xyz (6 x f64)       |
//! | 96     | ...  | parameters (f32 each), declared order   |
//!
//! Parameter order: grid levels ascending (entry-major, feature-minor within
//! an entry), then the SDF decoder as [w1 row-major, b1, w2 row-major, b2],
//! then the color decoder in the same layout, then beta (one f32).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SlamError};
use crate::map::{Aabb, HashGridConfig, MapModel, OneBlobConfig};
use crate::math::Real;

const MAGIC: [u8; 8] = *b"TSDFMAP\x01";

pub fn save<T: Real>(model: &MapModel<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    let g = &model.grid_cfg;
    for v in [
        g.levels as u32,
        g.features_per_level as u32,
        g.base_resolution as u32,
        g.finest_resolution as u32,
        g.table_size_log2,
        model.oneblob_cfg.bins_per_axis as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&model.oneblob_cfg.kernel_sigma.to_le_bytes())?;
    w.write_all(&(model.hidden_dim as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for a in 0..3 {
        w.write_all(&g.bounds.min[a].to_le_bytes())?;
    }
    for a in 0..3 {
        w.write_all(&g.bounds.max[a].to_le_bytes())?;
    }
    for gid in [model.gid_grid, model.gid_sdf, model.gid_color, model.gid_beta] {
        for &v in model.store.values(gid) {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<MapModel<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(SlamError::format("not a map checkpoint (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let levels = read_u32(&mut r)? as usize;
    let features = read_u32(&mut r)? as usize;
    let base = read_u32(&mut r)? as usize;
    let finest = read_u32(&mut r)? as usize;
    let table_log2 = read_u32(&mut r)?;
    let bins = read_u32(&mut r)? as usize;
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut f64buf)?;
    let kernel_sigma = f64::from_le_bytes(f64buf);
    let hidden = read_u32(&mut r)? as usize;
    let _reserved = read_u32(&mut r)?;
    let mut bounds = Aabb::new([0.0; 3], [0.0; 3]);
    for a in 0..3 {
        r.read_exact(&mut f64buf)?;
        bounds.min[a] = f64::from_le_bytes(f64buf);
    }
    for a in 0..3 {
        r.read_exact(&mut f64buf)?;
        bounds.max[a] = f64::from_le_bytes(f64buf);
    }

    let grid_cfg = HashGridConfig {
        levels,
        features_per_level: features,
        base_resolution: base,
        finest_resolution: finest,
        table_size_log2: table_log2,
        bounds,
    };
    let oneblob_cfg = OneBlobConfig {
        bins_per_axis: bins,
        kernel_sigma,
    };
    // Build with a throwaway rng, then overwrite every parameter.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = MapModel::<T>::new(grid_cfg, oneblob_cfg, hidden, 1.0, &mut rng)?;
    let mut f32buf = [0u8; 4];
    for gid in [model.gid_grid, model.gid_sdf, model.gid_color, model.gid_beta] {
        let n = model.store.values(gid).len();
        for i in 0..n {
            r.read_exact(&mut f32buf)?;
            model.store.values_mut(gid)[i] = T::of(f32::from_le_bytes(f32buf) as f64);
        }
    }
    let beta = model.beta();
    if beta.to_f64() <= 0.0 {
        return Err(SlamError::format("checkpoint has non-positive beta"));
    }
    Ok(model)
}
