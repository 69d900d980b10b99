//! Loss terms: color/depth L2 split by sampling class, free-space and
//! truncation-region TSDF penalties, grid smoothness, and the weighted total.

use rand::Rng;

use crate::error::{Result, SlamError};
use crate::map::MapModel;
use crate::math::Real;
use crate::render::{RayBatch, RenderOutput};

/// Loss weights and the truncation geometry. Color/depth weights are applied
/// inside their terms; the TSDF and smoothness weights scale the total.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub uniform_color: f64,
    pub feature_color: f64,
    pub uniform_depth: f64,
    pub feature_depth: f64,
    pub free_space: f64,
    pub trunc_mid: f64,
    pub trunc_tail: f64,
    pub smooth: f64,
    /// Truncation distance T in meters.
    pub truncation: f64,
    /// Middle-band fraction gamma in (0, 1).
    pub mid_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            uniform_color: 5.0,
            feature_color: 5.0,
            uniform_depth: 0.1,
            feature_depth: 0.1,
            free_space: 10.0,
            trunc_mid: 1000.0,
            trunc_tail: 200.0,
            smooth: 1e-6,
            truncation: 0.1,
            mid_fraction: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("uniform_color", self.uniform_color),
            ("feature_color", self.feature_color),
            ("uniform_depth", self.uniform_depth),
            ("feature_depth", self.feature_depth),
            ("free_space", self.free_space),
            ("trunc_mid", self.trunc_mid),
            ("trunc_tail", self.trunc_tail),
            ("smooth", self.smooth),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(SlamError::invalid(format!("weight {name} must be >= 0")));
            }
        }
        if self.truncation <= 0.0 {
            return Err(SlamError::invalid("truncation must be > 0"));
        }
        if !(0.0 < self.mid_fraction && self.mid_fraction < 1.0) {
            return Err(SlamError::invalid("mid_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Which TSDF penalty a sample falls under, relative to the measured surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleClass {
    /// In front of the truncation region: z < d - T.
    FreeSpace,
    /// Truncation region outside the middle band.
    TruncTail,
    /// |z - d| < gamma * T.
    TruncMid,
    /// Beyond the far side of the truncation region (occluded, unconstrained).
    Behind,
}

/// Classifies one sample on a ray with a valid depth measurement.
pub fn classify<T: Real>(z: T, depth: T, trunc: T, mid_fraction: T) -> SampleClass {
    let diff = z - depth;
    if diff < -trunc {
        SampleClass::FreeSpace
    } else if diff.abs() < mid_fraction * trunc {
        SampleClass::TruncMid
    } else if diff.abs() <= trunc {
        SampleClass::TruncTail
    } else {
        SampleClass::Behind
    }
}

/// All loss terms of one optimization step. `color` and `depth` carry their
/// lambdas already; the TSDF and smoothness terms are raw and weighted in
/// `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub color: f64,
    pub depth: f64,
    pub free_space: f64,
    pub trunc_tail: f64,
    pub trunc_mid: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Weighted total with per-term finiteness checks.
pub fn total_loss(
    color: f64,
    depth: f64,
    free_space: f64,
    trunc_tail: f64,
    trunc_mid: f64,
    smooth: f64,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("color", color),
        ("depth", depth),
        ("free_space", free_space),
        ("trunc_tail", trunc_tail),
        ("trunc_mid", trunc_mid),
        ("smooth", smooth),
    ] {
        if !v.is_finite() {
            return Err(SlamError::Numeric(format!("loss term {name}")));
        }
    }
    let total = w.free_space * free_space
        + w.trunc_mid * trunc_mid
        + w.trunc_tail * trunc_tail
        + depth
        + color
        + w.smooth * smooth;
    Ok(LossBreakdown {
        color,
        depth,
        free_space,
        trunc_tail,
        trunc_mid,
        smooth,
        total,
    })
}

/// Counts used to normalize the batch losses; fixed before rendering.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchCounts {
    pub rays: usize,
    pub uniform: usize,
    pub feature: usize,
    pub uniform_valid_depth: usize,
    pub feature_valid_depth: usize,
}

impl BatchCounts {
    pub fn of<T: Real>(batch: &RayBatch<T>) -> Self {
        let mut c = BatchCounts {
            rays: batch.len(),
            ..Default::default()
        };
        for r in &batch.rays {
            let valid = r.depth > T::zero();
            if r.is_feature {
                c.feature += 1;
                if valid {
                    c.feature_valid_depth += 1;
                }
            } else {
                c.uniform += 1;
                if valid {
                    c.uniform_valid_depth += 1;
                }
            }
        }
        c
    }
}

/// Color and depth L2 terms, each split over uniform and feature-sampled rays
/// with separate weights. Invalid-depth rays are excluded from the depth
/// means but kept in the color means. Empty partitions contribute zero.
pub fn color_depth_loss<T: Real>(
    out: &RenderOutput<T>,
    batch: &RayBatch<T>,
    w: &LossWeights,
) -> (f64, f64) {
    let counts = BatchCounts::of(batch);
    let mut color_u = 0.0;
    let mut color_f = 0.0;
    let mut depth_u = 0.0;
    let mut depth_f = 0.0;
    for (i, ray) in batch.rays.iter().enumerate() {
        let mut csq = 0.0;
        for ch in 0..3 {
            let r = (out.colors[i][ch] - ray.color[ch]).to_f64();
            csq += r * r;
        }
        let valid = ray.depth > T::zero();
        let dsq = if valid {
            let r = (out.depths[i] - ray.depth).to_f64();
            r * r
        } else {
            0.0
        };
        if ray.is_feature {
            color_f += csq;
            depth_f += dsq;
        } else {
            color_u += csq;
            depth_u += dsq;
        }
    }
    let mean = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
    let l_c = w.uniform_color * mean(color_u, counts.uniform)
        + w.feature_color * mean(color_f, counts.feature);
    let l_d = w.uniform_depth * mean(depth_u, counts.uniform_valid_depth)
        + w.feature_depth * mean(depth_f, counts.feature_valid_depth);
    (l_c, l_d)
}

/// Free-space TSDF term: mean of (s - 1)^2 over each ray's free-space samples,
/// then mean over all rays. Rays with no free-space samples (or no valid
/// depth) contribute zero.
pub fn freespace_loss<T: Real>(
    out: &RenderOutput<T>,
    batch: &RayBatch<T>,
    w: &LossWeights,
) -> f64 {
    let trunc = T::of(w.truncation);
    let gamma = T::of(w.mid_fraction);
    let mut acc = 0.0;
    for (i, ray) in batch.rays.iter().enumerate() {
        if ray.depth <= T::zero() {
            continue;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in out.sample_range(i) {
            if classify(out.z[k], ray.depth, trunc, gamma) == SampleClass::FreeSpace {
                let r = (out.sdf[k] - T::one()).to_f64();
                sum += r * r;
                n += 1;
            }
        }
        if n > 0 {
            acc += sum / n as f64;
        }
    }
    acc / batch.len().max(1) as f64
}

/// Truncation-region terms: (z + s*T - d)^2 averaged per ray over the tail
/// band and the middle band separately, then averaged over all rays.
pub fn truncation_losses<T: Real>(
    out: &RenderOutput<T>,
    batch: &RayBatch<T>,
    w: &LossWeights,
) -> (f64, f64) {
    let trunc = T::of(w.truncation);
    let gamma = T::of(w.mid_fraction);
    let mut tail_acc = 0.0;
    let mut mid_acc = 0.0;
    for (i, ray) in batch.rays.iter().enumerate() {
        if ray.depth <= T::zero() {
            continue;
        }
        let mut tail = (0.0, 0usize);
        let mut mid = (0.0, 0usize);
        for k in out.sample_range(i) {
            let class = classify(out.z[k], ray.depth, trunc, gamma);
            if class == SampleClass::TruncTail || class == SampleClass::TruncMid {
                let r = (out.z[k] + out.sdf[k] * trunc - ray.depth).to_f64();
                if class == SampleClass::TruncTail {
                    tail.0 += r * r;
                    tail.1 += 1;
                } else {
                    mid.0 += r * r;
                    mid.1 += 1;
                }
            }
        }
        if tail.1 > 0 {
            tail_acc += tail.0 / tail.1 as f64;
        }
        if mid.1 > 0 {
            mid_acc += mid.0 / mid.1 as f64;
        }
    }
    let n = batch.len().max(1) as f64;
    (tail_acc / n, mid_acc / n)
}

/// Feature-field smoothness over a random sub-volume: squared differences of
/// the concatenated grid features between lattice-adjacent probe points
/// (spacing of one finest-level cell), meaned over adjacent pairs.
///
/// When `grad` is given, d(loss)/d(grid feature) is accumulated into it.
pub fn smoothness_loss<T: Real>(
    model: &MapModel<T>,
    cells: usize,
    rng: &mut impl Rng,
    mut grad: Option<&mut [T]>,
) -> Result<f64> {
    let cfg = &model.grid_cfg;
    let bounds = &cfg.bounds;
    let fdim = model.grid_feature_dim();
    let f = cfg.features_per_level;
    let level_stride = cfg.table_size() * f;

    // Probe lattice: (cells+1)^3 points with one finest cell of spacing,
    // anchored at a random in-bounds origin.
    let mut spacing = [0.0f64; 3];
    let mut origin = [0.0f64; 3];
    let ext = bounds.extent();
    for a in 0..3 {
        spacing[a] = ext[a] / (cfg.finest_resolution as f64 - 1.0);
        let span = spacing[a] * cells as f64;
        let slack = (ext[a] - span).max(0.0);
        origin[a] = bounds.min[a] + rng.random_range(0.0..1.0) * slack;
    }

    let n = cells + 1;
    let mut feats: Vec<T> = vec![T::zero(); n * n * n * fdim];
    let grid_values = model.store.values(model.gid_grid);
    let mut interps = Vec::with_capacity(cfg.levels);
    let mut all_interps = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let p = [
                    T::of(origin[0] + spacing[0] * i as f64),
                    T::of(origin[1] + spacing[1] * j as f64),
                    T::of(origin[2] + spacing[2] * k as f64),
                ];
                let idx = (k * n + j) * n + i;
                interps.clear();
                crate::map::grid_encode_into(
                    cfg,
                    grid_values,
                    p,
                    &mut feats[idx * fdim..(idx + 1) * fdim],
                    Some(&mut interps),
                )?;
                all_interps.push(interps.clone());
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let idx = (k * n + j) * n + i;
                if i + 1 < n {
                    pairs.push((idx, (k * n + j) * n + i + 1));
                }
                if j + 1 < n {
                    pairs.push((idx, (k * n + j + 1) * n + i));
                }
                if k + 1 < n {
                    pairs.push((idx, ((k + 1) * n + j) * n + i));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }

    let mut acc = 0.0;
    let inv_pairs = 1.0 / pairs.len() as f64;
    for &(a, b) in &pairs {
        for d in 0..fdim {
            let diff = (feats[a * fdim + d] - feats[b * fdim + d]).to_f64();
            acc += diff * diff;
            if let Some(g) = grad.as_deref_mut() {
                // d/df of mean_pairs sum_d (fa - fb)^2, scattered through the
                // trilinear weights of both endpoints.
                let seed = T::of(2.0 * diff * inv_pairs);
                let level = d / f;
                let fi = d % f;
                for (point, sign) in [(a, T::one()), (b, -T::one())] {
                    let interp = &all_interps[point][level];
                    for corner in 0..8 {
                        let slot =
                            level * level_stride + interp.corners[corner] * f + fi;
                        g[slot] += sign * seed * interp.weights[corner];
                    }
                }
            }
        }
    }
    Ok(acc * inv_pairs)
}
