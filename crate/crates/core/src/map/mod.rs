//! Learnable scene representation: multi-resolution hash grid, One-blob
//! positional encoding, and the TSDF/color decoders.
//!
//! Both decoders consume the identical encoding — grid features concatenated
//! with the One-blob encoding of the normalized position. No intermediate
//! embedding passes from the TSDF head to the color head.

pub mod checkpoint;
pub mod decoder;
pub mod encoding;

use rand::Rng;

use crate::diff::store::{GroupId, GroupKind, ParamStore};
use crate::error::{Result, SlamError};
use crate::math::Real;
use decoder::{decoder_forward, DecoderDims, OutputActivation};
pub use encoding::{grid_encode_into, hash_index, level_interp, oneblob_encode_into, LevelInterp};

/// Axis-aligned scene bounds in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn inflated(&self, margin: f64) -> Aabb {
        Aabb::new(
            [self.min[0] - margin, self.min[1] - margin, self.min[2] - margin],
            [self.max[0] + margin, self.max[1] + margin, self.max[2] + margin],
        )
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] - self.min[a]).is_finite() || self.max[a] <= self.min[a] {
                return Err(SlamError::invalid("bounds must have positive extent"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Lattice nodes per axis at the coarsest level.
    pub base_resolution: usize,
    /// Lattice nodes per axis at the finest level.
    pub finest_resolution: usize,
    /// Per-level table holds `2^table_size_log2` feature entries.
    pub table_size_log2: u32,
    pub bounds: Aabb,
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(SlamError::invalid("levels must be >= 1"));
        }
        if self.features_per_level < 1 {
            return Err(SlamError::invalid("features_per_level must be >= 1"));
        }
        if self.base_resolution < 2 {
            return Err(SlamError::invalid("base_resolution must be >= 2"));
        }
        if self.finest_resolution < self.base_resolution {
            return Err(SlamError::invalid(
                "finest_resolution must be >= base_resolution",
            ));
        }
        self.bounds.validate()
    }

    /// Geometric per-level growth of the lattice resolution.
    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            1.0
        } else {
            (((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln())
                / (self.levels as f64 - 1.0))
                .exp()
        }
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        debug_assert!(level < self.levels);
        if self.levels == 1 {
            return self.base_resolution;
        }
        let b = self.growth_factor();
        let r = (self.base_resolution as f64 * b.powi(level as i32)).round() as usize;
        r.max(2)
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    /// Dense (injective, direct-addressed) when the full lattice fits the table.
    pub fn level_is_dense(&self, level: usize) -> bool {
        let res = self.level_resolution(level) as u128;
        res * res * res <= self.table_size() as u128
    }

    /// Total feature parameter count across levels.
    pub fn param_count(&self) -> usize {
        self.levels * self.table_size() * self.features_per_level
    }

    /// Finest-level cell edge length in meters (largest axis).
    pub fn finest_cell_size(&self) -> f64 {
        let e = self.bounds.extent();
        let longest = e[0].max(e[1]).max(e[2]);
        longest / (self.finest_resolution as f64 - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OneBlobConfig {
    pub bins_per_axis: usize,
    /// Gaussian kernel width as a fraction of one bin width.
    pub kernel_sigma: f64,
}

impl OneBlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins_per_axis < 2 {
            return Err(SlamError::invalid("bins_per_axis must be >= 2"));
        }
        if self.kernel_sigma <= 0.0 {
            return Err(SlamError::invalid("kernel_sigma must be > 0"));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        3 * self.bins_per_axis
    }
}

impl Default for OneBlobConfig {
    fn default() -> Self {
        Self {
            bins_per_axis: 16,
            kernel_sigma: 0.25,
        }
    }
}

/// The entire learnable map: hash-grid features, both decoders, and the
/// density sharpness scalar, stored as parameter groups.
#[derive(Debug, Clone)]
pub struct MapModel<T: Real> {
    pub grid_cfg: HashGridConfig,
    pub oneblob_cfg: OneBlobConfig,
    pub hidden_dim: usize,
    pub store: ParamStore<T>,
    pub gid_grid: GroupId,
    pub gid_sdf: GroupId,
    pub gid_color: GroupId,
    pub gid_beta: GroupId,
}

pub const DEFAULT_HIDDEN_DIM: usize = 32;
pub const DEFAULT_BETA_INIT: f64 = 10.0;
pub const GRID_INIT_SCALE: f64 = 1e-4;

impl<T: Real> MapModel<T> {
    pub fn new(
        grid_cfg: HashGridConfig,
        oneblob_cfg: OneBlobConfig,
        hidden_dim: usize,
        beta_init: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        grid_cfg.validate()?;
        oneblob_cfg.validate()?;
        if beta_init <= 0.0 {
            return Err(SlamError::invalid("beta must be positive"));
        }

        let mut store = ParamStore::new();
        let grid: Vec<T> = (0..grid_cfg.param_count())
            .map(|_| T::of(rng.random_range(-GRID_INIT_SCALE..GRID_INIT_SCALE)))
            .collect();
        let gid_grid = store.add_group("grid", GroupKind::Grid, grid);

        let enc_dim = grid_cfg.levels * grid_cfg.features_per_level + oneblob_cfg.encoding_dim();
        let sdf_dims = DecoderDims {
            input: enc_dim,
            hidden: hidden_dim,
            output: 1,
        };
        let color_dims = DecoderDims {
            input: enc_dim,
            hidden: hidden_dim,
            output: 3,
        };
        let gid_sdf = store.add_group(
            "sdf_decoder",
            GroupKind::SdfDecoder,
            init_decoder(&sdf_dims, rng),
        );
        let gid_color = store.add_group(
            "color_decoder",
            GroupKind::ColorDecoder,
            init_decoder(&color_dims, rng),
        );
        let gid_beta = store.add_group("beta", GroupKind::Beta, vec![T::of(beta_init)]);

        Ok(Self {
            grid_cfg,
            oneblob_cfg,
            hidden_dim,
            store,
            gid_grid,
            gid_sdf,
            gid_color,
            gid_beta,
        })
    }

    pub fn encoding_dim(&self) -> usize {
        self.grid_cfg.levels * self.grid_cfg.features_per_level + self.oneblob_cfg.encoding_dim()
    }

    pub fn grid_feature_dim(&self) -> usize {
        self.grid_cfg.levels * self.grid_cfg.features_per_level
    }

    pub fn sdf_dims(&self) -> DecoderDims {
        DecoderDims {
            input: self.encoding_dim(),
            hidden: self.hidden_dim,
            output: 1,
        }
    }

    pub fn color_dims(&self) -> DecoderDims {
        DecoderDims {
            input: self.encoding_dim(),
            hidden: self.hidden_dim,
            output: 3,
        }
    }

    pub fn beta(&self) -> T {
        self.store.values(self.gid_beta)[0]
    }

    pub fn grid_values(&self) -> &[T] {
        self.store.values(self.gid_grid)
    }

    /// Normalized [0,1]^3 coordinate of a world point.
    pub fn normalized(&self, p: [T; 3]) -> [T; 3] {
        let b = &self.grid_cfg.bounds;
        let mut u = [T::zero(); 3];
        for a in 0..3 {
            u[a] = (p[a] - T::of(b.min[a])) / T::of(b.max[a] - b.min[a]);
        }
        u
    }

    /// Full encoding (grid features ++ One-blob), written into `out`.
    /// Optionally records per-level interpolation contexts.
    pub fn encode_into(
        &self,
        p: [T; 3],
        out: &mut [T],
        interps: Option<&mut Vec<LevelInterp<T>>>,
    ) -> Result<()> {
        let gdim = self.grid_feature_dim();
        grid_encode_into(&self.grid_cfg, self.grid_values(), p, &mut out[..gdim], interps)?;
        let u = self.normalized(p);
        oneblob_encode_into(&self.oneblob_cfg, u, &mut out[gdim..], None)?;
        Ok(())
    }

    pub fn encode(&self, p: [T; 3]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.encoding_dim()];
        self.encode_into(p, &mut out, None)?;
        Ok(out)
    }

    pub fn decode_sdf(&self, encoding: &[T]) -> Result<T> {
        let dims = self.sdf_dims();
        let mut hidden = vec![T::zero(); dims.hidden];
        let mut out = [T::zero()];
        decoder_forward(
            self.store.values(self.gid_sdf),
            &dims,
            encoding,
            OutputActivation::Tanh,
            &mut hidden,
            &mut out,
        )?;
        Ok(out[0])
    }

    pub fn decode_color(&self, encoding: &[T]) -> Result<[T; 3]> {
        let dims = self.color_dims();
        let mut hidden = vec![T::zero(); dims.hidden];
        let mut out = [T::zero(); 3];
        decoder_forward(
            self.store.values(self.gid_color),
            &dims,
            encoding,
            OutputActivation::Sigmoid,
            &mut hidden,
            &mut out,
        )?;
        Ok(out)
    }

    /// TSDF and color of a world point (errors outside bounds).
    pub fn query(&self, p: [T; 3]) -> Result<(T, [T; 3])> {
        let enc = self.encode(p)?;
        Ok((self.decode_sdf(&enc)?, self.decode_color(&enc)?))
    }

    /// Freezes or thaws every map parameter group (grid, decoders, beta).
    pub fn set_map_frozen(&mut self, frozen: bool) {
        self.store.set_frozen(self.gid_grid, frozen);
        self.store.set_frozen(self.gid_sdf, frozen);
        self.store.set_frozen(self.gid_color, frozen);
        self.store.set_frozen(self.gid_beta, frozen);
    }

    pub fn param_count(&self) -> usize {
        self.store.groups().map(|(_, g)| g.values.len()).sum()
    }
}

fn init_decoder<T: Real>(dims: &DecoderDims, rng: &mut impl Rng) -> Vec<T> {
    let mut params = vec![T::zero(); dims.param_count()];
    let s1 = 1.0 / (dims.input as f64).sqrt();
    for p in params[dims.w1()..dims.w2()].iter_mut() {
        *p = T::of(rng.random_range(-s1..s1));
    }
    let s2 = 1.0 / (dims.hidden as f64).sqrt();
    for p in params[dims.w2()..].iter_mut() {
        *p = T::of(rng.random_range(-s2..s2));
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_grid_cfg() -> HashGridConfig {
        HashGridConfig {
            levels: 2,
            features_per_level: 2,
            base_resolution: 4,
            finest_resolution: 8,
            table_size_log2: 9,
            bounds: Aabb::new([-1.0; 3], [1.0; 3]),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_grid_cfg();
        cfg.validate().unwrap();
        cfg.finest_resolution = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_grid_cfg();
        cfg.bounds = Aabb::new([0.0; 3], [0.0; 3]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolutions_grow_geometrically_to_finest() {
        let cfg = HashGridConfig {
            levels: 16,
            features_per_level: 2,
            base_resolution: 16,
            finest_resolution: 256,
            table_size_log2: 13,
            bounds: Aabb::new([0.0; 3], [1.0; 3]),
        };
        assert_eq!(cfg.level_resolution(0), 16);
        assert_eq!(cfg.level_resolution(15), 256);
        for l in 1..16 {
            assert!(cfg.level_resolution(l) >= cfg.level_resolution(l - 1));
        }
    }

    #[test]
    fn model_dimensions_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MapModel::<f64>::new(
            tiny_grid_cfg(),
            OneBlobConfig {
                bins_per_axis: 4,
                kernel_sigma: 0.25,
            },
            8,
            10.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(model.encoding_dim(), 2 * 2 + 12);
        assert_eq!(model.beta(), 10.0);

        for _ in 0..200 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let (s, c) = model.query(p).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            for ch in c {
                assert!((0.0..=1.0).contains(&ch));
            }
        }
    }

    #[test]
    fn query_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MapModel::<f64>::new(
            tiny_grid_cfg(),
            OneBlobConfig::default(),
            8,
            10.0,
            &mut rng,
        )
        .unwrap();
        let p = [0.3, -0.4, 0.9];
        let a = model.query(p).unwrap();
        let b = model.query(p).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        for k in 0..3 {
            assert_eq!(a.1[k].to_bits(), b.1[k].to_bits());
        }
    }

    #[test]
    fn out_of_bounds_query_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MapModel::<f64>::new(
            tiny_grid_cfg(),
            OneBlobConfig::default(),
            8,
            10.0,
            &mut rng,
        )
        .unwrap();
        assert!(model.query([2.0, 0.0, 0.0]).is_err());
    }
}
