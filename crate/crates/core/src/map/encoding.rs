//! Multi-resolution hash-grid lookup and One-blob positional encoding.

use crate::error::{Result, SlamError};
use crate::map::{HashGridConfig, OneBlobConfig};
use crate::math::Real;

/// Spatial-hash multipliers, one odd constant per axis.
const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Table index of a lattice cell at one level. Dense levels use row-major
/// direct addressing (injective); larger levels fall back to the XOR spatial
/// hash masked to the table size.
pub fn hash_index(level: usize, cell: [usize; 3], cfg: &HashGridConfig) -> Result<usize> {
    if level >= cfg.levels {
        return Err(SlamError::invalid(format!(
            "level {level} out of range (levels = {})",
            cfg.levels
        )));
    }
    let res = cfg.level_resolution(level);
    debug_assert!(cell.iter().all(|&c| c < res), "cell outside level lattice");
    if cfg.level_is_dense(level) {
        Ok(cell[0] + cell[1] * res + cell[2] * res * res)
    } else {
        let h = (cell[0] as u64).wrapping_mul(HASH_PRIMES[0])
            ^ (cell[1] as u64).wrapping_mul(HASH_PRIMES[1])
            ^ (cell[2] as u64).wrapping_mul(HASH_PRIMES[2]);
        Ok((h & (cfg.table_size() as u64 - 1)) as usize)
    }
}

/// Trilinear interpolation context of one point at one level. Weights are
/// kept; their position derivative is reconstructed from `frac` on demand.
#[derive(Debug, Clone, Copy)]
pub struct LevelInterp<T> {
    /// Flat entry indices of the 8 surrounding lattice nodes, bit c =
    /// (x                  | y<<1 | z<<2) offset order.
    pub corners: [usize; 8],
    pub weights: [T; 8],
    pub frac: [T; 3],
    /// d(scaled lattice coordinate)/d(world meter) per axis.
    pub scale: [T; 3],
}

impl<T: Real> LevelInterp<T> {
    /// d(weight of corner)/d(world position).
    pub fn weight_world_grad(&self, corner: usize) -> [T; 3] {
        let f = self.frac;
        let mut g = [T::zero(); 3];
        for a in 0..3 {
            let mut prod = T::one();
            for b in 0..3 {
                if a == b {
                    continue;
                }
                let fb = if corner >> b & 1 == 1 {
                    f[b]
                } else {
                    T::one() - f[b]
                };
                prod *= fb;
            }
            let sign = if corner >> a & 1 == 1 {
                T::one()
            } else {
                -T::one()
            };
            g[a] = sign * prod * self.scale[a];
        }
        g
    }
}

/// Builds the interpolation context for a point at one level. The point must
/// already be inside the configured bounds.
pub fn level_interp<T: Real>(
    cfg: &HashGridConfig,
    level: usize,
    point: [T; 3],
) -> Result<LevelInterp<T>> {
    let res = cfg.level_resolution(level);
    let mut cell = [0usize; 3];
    let mut frac = [T::zero(); 3];
    let mut scale = [T::zero(); 3];
    for a in 0..3 {
        let lo = T::of(cfg.bounds.min[a]);
        let hi = T::of(cfg.bounds.max[a]);
        let u = (point[a] - lo) / (hi - lo);
        if u < T::zero() || u > T::one() || !u.is_finite() {
            return Err(SlamError::OutOfBounds(
                point[0].to_f64(),
                point[1].to_f64(),
                point[2].to_f64(),
            ));
        }
        let span = T::of((res - 1) as f64);
        let scaled = u * span;
        let mut c = scaled.floor();
        // Clamp the upper boundary into the last cell.
        if c > span - T::one() {
            c = span - T::one();
        }
        cell[a] = c.to_f64() as usize;
        frac[a] = scaled - c;
        scale[a] = span / (hi - lo);
    }

    let mut corners = [0usize; 8];
    let mut weights = [T::zero(); 8];
    for corner in 0..8 {
        let off = [corner & 1, corner >> 1 & 1, corner >> 2 & 1];
        let idx = hash_index(
            level,
            [cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]],
            cfg,
        )?;
        let mut w = T::one();
        for a in 0..3 {
            w *= if off[a] == 1 {
                frac[a]
            } else {
                T::one() - frac[a]
            };
        }
        corners[corner] = idx;
        weights[corner] = w;
    }
    Ok(LevelInterp {
        corners,
        weights,
        frac,
        scale,
    })
}

/// Concatenated multi-level features of a point, written into `out`
/// (length `levels * features_per_level`). When `interps` is `Some`, the
/// per-level interpolation contexts are appended for use by the backward pass.
///
/// `grid_values` is the flat feature storage; level `l` starts at
/// `l * table_size * F`.
pub fn grid_encode_into<T: Real>(
    cfg: &HashGridConfig,
    grid_values: &[T],
    point: [T; 3],
    out: &mut [T],
    mut interps: Option<&mut Vec<LevelInterp<T>>>,
) -> Result<()> {
    let f = cfg.features_per_level;
    debug_assert_eq!(out.len(), cfg.levels * f);
    let level_stride = cfg.table_size() * f;
    for level in 0..cfg.levels {
        let interp = level_interp(cfg, level, point)?;
        let base = level * level_stride;
        let dst = &mut out[level * f..(level + 1) * f];
        dst.fill(T::zero());
        for corner in 0..8 {
            let w = interp.weights[corner];
            let src = base + interp.corners[corner] * f;
            for j in 0..f {
                dst[j] += w * grid_values[src + j];
            }
        }
        if let Some(tape) = interps.as_deref_mut() {
            tape.push(interp);
        }
    }
    Ok(())
}

/// One-blob encoding of a normalized position: per axis, the mass of a
/// Gaussian centered at the coordinate integrated over each of the
/// `bins_per_axis` equal bins of [0, 1]. Mass falling outside [0, 1] is
/// dropped, so each axis sums to at most one.
pub fn oneblob_encode_into<T: Real>(
    cfg: &OneBlobConfig,
    u: [T; 3],
    out: &mut [T],
    mut grad: Option<&mut [T]>,
) -> Result<()> {
    let bins = cfg.bins_per_axis;
    debug_assert_eq!(out.len(), 3 * bins);
    let sigma = T::of(cfg.kernel_sigma / bins as f64);
    let inv_bins = T::of(1.0 / bins as f64);
    for a in 0..3 {
        if u[a] < T::zero() || u[a] > T::one() || !u[a].is_finite() {
            return Err(SlamError::invalid(format!(
                "one-blob coordinate {} outside [0, 1]",
                u[a]
            )));
        }
        let x = u[a];
        for j in 0..bins {
            let lo = T::of(j as f64) * inv_bins;
            let hi = lo + inv_bins;
            let t_lo = (lo - x) / sigma;
            let t_hi = (hi - x) / sigma;
            out[a * bins + j] = normal_cdf(t_hi) - normal_cdf(t_lo);
            if let Some(g) = grad.as_deref_mut() {
                g[a * bins + j] = (normal_pdf(t_lo) - normal_pdf(t_hi)) / sigma;
            }
        }
    }
    Ok(())
}

#[inline]
fn normal_cdf<T: Real>(t: T) -> T {
    T::of(0.5) * (T::one() + (t / T::of(std::f64::consts::SQRT_2)).erf())
}

#[inline]
fn normal_pdf<T: Real>(t: T) -> T {
    (-t * t * T::of(0.5)).exp() / T::of((2.0 * std::f64::consts::PI).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::Aabb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HashGridConfig {
        HashGridConfig {
            levels: 2,
            features_per_level: 2,
            base_resolution: 4,
            finest_resolution: 8,
            table_size_log2: 6, // 64 entries: level 0 (4^3=64) dense, level 1 (8^3) hashed
            bounds: Aabb::new([0.0; 3], [1.0; 3]),
        }
    }

    #[test]
    fn direct_addressing_origin_and_row_major() {
        let cfg = small_cfg();
        assert_eq!(hash_index(0, [0, 0, 0], &cfg).unwrap(), 0);
        assert_eq!(hash_index(0, [1, 2, 3], &cfg).unwrap(), 1 + 2 * 4 + 3 * 16);
    }

    #[test]
    fn hashed_level_is_deterministic_and_masked() {
        let cfg = HashGridConfig {
            levels: 2,
            features_per_level: 2,
            base_resolution: 4,
            finest_resolution: 16,
            table_size_log2: 6,
            bounds: Aabb::new([0.0; 3], [1.0; 3]),
        };
        assert!(!cfg.level_is_dense(1));
        let a = hash_index(1, [5, 9, 2], &cfg).unwrap();
        let b = hash_index(1, [5, 9, 2], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a < cfg.table_size());
    }

    #[test]
    fn level_out_of_range_errors() {
        let cfg = small_cfg();
        assert!(hash_index(2, [0, 0, 0], &cfg).is_err());
    }

    fn encode(cfg: &HashGridConfig, values: &[f64], p: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; cfg.levels * cfg.features_per_level];
        grid_encode_into(cfg, values, p, &mut out, None).unwrap();
        out
    }

    #[test]
    fn lattice_vertex_returns_stored_feature() {
        let cfg = small_cfg();
        let f = cfg.features_per_level;
        let mut values = vec![0.0f64; cfg.levels * cfg.table_size() * f];
        // Vertex (1,2,3) of level 0 holds (7.5, -2.0).
        let idx = hash_index(0, [1, 2, 3], &cfg).unwrap();
        values[idx * f] = 7.5;
        values[idx * f + 1] = -2.0;
        // res 4 on [0,1]: vertex (1,2,3) sits at (1/3, 2/3, 1).
        let enc = encode(&cfg, &values, [1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!((enc[0] - 7.5).abs() < 1e-9);
        assert!((enc[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_cell_is_interpolation_invariant() {
        let cfg = small_cfg();
        let f = cfg.features_per_level;
        let mut values = vec![0.0f64; cfg.levels * cfg.table_size() * f];
        for e in 0..cfg.table_size() {
            values[e * f] = 3.25; // level 0 only
        }
        let enc = encode(&cfg, &values, [0.17, 0.52, 0.81]);
        assert!((enc[0] - 3.25).abs() < 1e-12);
    }

    /// Independent 8-corner trilinear oracle on a single level.
    #[test]
    fn matches_trilinear_oracle() {
        let cfg = HashGridConfig {
            levels: 1,
            features_per_level: 1,
            base_resolution: 5,
            finest_resolution: 5,
            table_size_log2: 7,
            bounds: Aabb::new([-1.0, 0.0, 2.0], [1.0, 3.0, 5.0]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let values: Vec<f64> = (0..cfg.table_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..3.0),
                rng.random_range(2.0..5.0),
            ];
            let enc = encode(&cfg, &values, p);

            // Oracle: explicit trilinear over the surrounding cube.
            let res = 5usize;
            let mut u = [0.0; 3];
            for a in 0..3 {
                u[a] = (p[a] - cfg.bounds.min[a]) / (cfg.bounds.max[a] - cfg.bounds.min[a])
                    * (res - 1) as f64;
            }
            let c = u.map(|x| (x.floor() as usize).min(res - 2));
            let f = [u[0] - c[0] as f64, u[1] - c[1] as f64, u[2] - c[2] as f64];
            let at = |dx: usize, dy: usize, dz: usize| {
                values[(c[0] + dx) + (c[1] + dy) * res + (c[2] + dz) * res * res]
            };
            let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
            let v00 = lerp(at(0, 0, 0), at(1, 0, 0), f[0]);
            let v10 = lerp(at(0, 1, 0), at(1, 1, 0), f[0]);
            let v01 = lerp(at(0, 0, 1), at(1, 0, 1), f[0]);
            let v11 = lerp(at(0, 1, 1), at(1, 1, 1), f[0]);
            let v0 = lerp(v00, v10, f[1]);
            let v1 = lerp(v01, v11, f[1]);
            let oracle = lerp(v0, v1, f[2]);

            let denom = oracle.abs().max(1e-9);
            assert!(
                (enc[0] - oracle).abs() / denom < 1e-6,
                "point {p:?}: {} vs oracle {oracle}",
                enc[0]
            );
        }
    }

    #[test]
    fn out_of_bounds_is_error() {
        let cfg = small_cfg();
        let values = vec![0.0f64; cfg.levels * cfg.table_size() * cfg.features_per_level];
        let mut out = vec![0.0; cfg.levels * cfg.features_per_level];
        let err = grid_encode_into(&cfg, &values, [1.5, 0.5, 0.5], &mut out, None);
        assert!(matches!(err, Err(SlamError::OutOfBounds(..))));
    }

    #[test]
    fn encode_continuity_sweep() {
        // 1-D sweep across cell boundaries: adjacent evaluations should differ
        // by no more than the local feature spread times the step fraction.
        let cfg = small_cfg();
        let f = cfg.features_per_level;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..cfg.levels * cfg.table_size() * f)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let steps = 4000;
        let mut prev = encode(&cfg, &values, [0.0, 0.4, 0.6]);
        let mut max_jump: f64 = 0.0;
        for i in 1..=steps {
            let x = i as f64 / steps as f64;
            let enc = encode(&cfg, &values, [x, 0.4, 0.6]);
            for j in 0..enc.len() {
                max_jump = max_jump.max((enc[j] - prev[j]).abs());
            }
            prev = enc;
        }
        // Feature values are in [-1,1]; finest level has 7 cells along the
        // sweep, so one step of 1/4000 moves the interpolant by at most
        // spread * 7/4000 * safety.
        assert!(max_jump < 2.0 * 7.0 / steps as f64 * 4.0, "jump {max_jump}");
    }

    #[test]
    fn oneblob_center_bin_is_max_and_symmetry() {
        let cfg = OneBlobConfig {
            bins_per_axis: 4,
            kernel_sigma: 0.25,
        };
        // x at the center of bin 2 (0.625).
        let mut out = vec![0.0f64; 12];
        oneblob_encode_into(&cfg, [0.625, 0.5, 0.5], &mut out, None).unwrap();
        let x_axis = &out[0..4];
        let maxi = x_axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(maxi, 2);
        // Coordinate 0.5 with 4 bins: bins 1 and 2 equal by symmetry.
        let y_axis = &out[4..8];
        assert!((y_axis[1] - y_axis[2]).abs() < 1e-12);
        // Nonnegative, sums to at most 1.
        for &v in &out {
            assert!(v >= 0.0);
        }
        assert!(x_axis.iter().sum::<f64>() <= 1.0 + 1e-9);
    }

    #[test]
    fn oneblob_matches_numeric_integration() {
        let cfg = OneBlobConfig {
            bins_per_axis: 4,
            kernel_sigma: 0.25,
        };
        let x = 0.125f64;
        let mut out = vec![0.0f64; 12];
        oneblob_encode_into(&cfg, [x, 0.0, 1.0], &mut out, None).unwrap();

        // Simpson's rule over each bin for the Gaussian pdf centered at x.
        let sigma = 0.25 / 4.0;
        let pdf = |t: f64| {
            (-((t - x) * (t - x)) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        for j in 0..4 {
            let lo = j as f64 * 0.25;
            let hi = lo + 0.25;
            let n = 2000;
            let h = (hi - lo) / n as f64;
            let mut acc = pdf(lo) + pdf(hi);
            for k in 1..n {
                let t = lo + k as f64 * h;
                acc += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
            }
            let oracle = acc * h / 3.0;
            assert!(
                (out[j] - oracle).abs() < 1e-6,
                "bin {j}: {} vs {oracle}",
                out[j]
            );
        }
    }

    #[test]
    fn oneblob_rejects_out_of_range() {
        let cfg = OneBlobConfig {
            bins_per_axis: 4,
            kernel_sigma: 0.25,
        };
        let mut out = vec![0.0f64; 12];
        assert!(oneblob_encode_into(&cfg, [1.2, 0.5, 0.5], &mut out, None).is_err());
    }

    #[test]
    fn oneblob_gradient_matches_fd() {
        let cfg = OneBlobConfig {
            bins_per_axis: 8,
            kernel_sigma: 0.25,
        };
        let mut out = vec![0.0f64; 24];
        let mut grad = vec![0.0f64; 24];
        let u = [0.37, 0.5, 0.5];
        oneblob_encode_into(&cfg, u, &mut out, Some(&mut grad)).unwrap();
        let h = 1e-6;
        let mut op = vec![0.0f64; 24];
        let mut om = vec![0.0f64; 24];
        oneblob_encode_into(&cfg, [u[0] + h, u[1], u[2]], &mut op, None).unwrap();
        oneblob_encode_into(&cfg, [u[0] - h, u[1], u[2]], &mut om, None).unwrap();
        for j in 0..8 {
            let fd = (op[j] - om[j]) / (2.0 * h);
            assert!(
                (grad[j] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "bin {j}: {} vs fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn weight_world_grad_matches_fd() {
        let cfg = small_cfg();
        let p = [0.33, 0.57, 0.21];
        let interp = level_interp(&cfg, 1, p).unwrap();
        let h = 1e-7;
        for corner in 0..8 {
            let g = interp.weight_world_grad(corner);
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let wp: f64 = level_interp(&cfg, 1, pp).unwrap().weights[corner];
                let wm = level_interp(&cfg, 1, pm).unwrap().weights[corner];
                let fd = (wp - wm) / (2.0 * h);
                assert!(
                    (g[a] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "corner {corner} axis {a}: {} vs {fd}",
                    g[a]
                );
            }
        }
    }
}
