//! Ray-space sampling, TSDF-to-density conversion, and volume compositing.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Result, SlamError};
use crate::map::MapModel;
use crate::math::{vec, Real};

/// One sampled pixel ray with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Ray<T> {
    /// Camera center in world coordinates.
    pub origin: [T; 3],
    /// Unit direction in world coordinates.
    pub dir: [T; 3],
    /// Unit direction in the source camera frame (kept for pose gradients).
    pub cam_dir: [T; 3],
    /// Ground-truth color in [0,1]^3.
    pub color: [T; 3],
    /// Ground-truth depth in meters; 0 marks an invalid measurement.
    pub depth: T,
    /// True when the pixel came from the corner detector.
    pub is_feature: bool,
    /// Source keyframe (frame id).
    pub keyframe: usize,
}

#[derive(Debug, Clone)]
pub struct RayBatch<T> {
    pub rays: Vec<Ray<T>>,
}

impl<T> Default for RayBatch<T> {
    fn default() -> Self {
        Self { rays: Vec::new() }
    }
}

impl<T: Real> RayBatch<T> {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays.is_empty() {
            return Err(SlamError::invalid("ray batch is empty"));
        }
        for (i, r) in self.rays.iter().enumerate() {
            let n = vec::norm(r.dir);
            if (n - T::one()).abs() > T::of(1e-6) {
                return Err(SlamError::invalid(format!(
                    "ray {i} direction norm {n} is not unit"
                )));
            }
            if r.depth < T::zero() {
                return Err(SlamError::invalid(format!("ray {i} has negative depth")));
            }
        }
        Ok(())
    }
}

/// Per-ray sample counts and interval.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleConfig {
    /// Stratified samples over [near, far].
    pub n_uniform: usize,
    /// Extra samples around the measured depth.
    pub n_depth: usize,
    /// Half-width of the depth-guided interval (m).
    pub depth_radius: f64,
    pub near: f64,
    pub far: f64,
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_uniform < 1 {
            return Err(SlamError::invalid("n_uniform must be >= 1"));
        }
        if self.near < 0.0 || self.near >= self.far {
            return Err(SlamError::invalid("need 0 <= near < far"));
        }
        if self.depth_radius <= 0.0 {
            return Err(SlamError::invalid("depth_radius must be > 0"));
        }
        Ok(())
    }

    pub fn max_samples(&self) -> usize {
        self.n_uniform + self.n_depth
    }
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_uniform: 32,
            n_depth: 11,
            depth_radius: 0.1,
            near: 0.05,
            far: 8.0,
        }
    }
}

/// Sorted sample depths along one ray: stratified-uniform coverage of
/// [near, far] plus, when the ground-truth depth is valid, uniform draws in
/// the clipped interval around it. Duplicates within 1e-9 are merged.
pub fn sample_along_ray<T: Real>(
    gt_depth: T,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Vec<T> {
    let near = T::of(cfg.near);
    let far = T::of(cfg.far);
    let span = far - near;
    let mut zs: Vec<T> = Vec::with_capacity(cfg.max_samples());
    let inv = 1.0 / cfg.n_uniform as f64;
    for i in 0..cfg.n_uniform {
        let jitter = rng.random_range(0.0..1.0);
        let t = T::of((i as f64 + jitter) * inv);
        zs.push(near + span * t);
    }
    if gt_depth > T::zero() && cfg.n_depth > 0 {
        let lo = (gt_depth - T::of(cfg.depth_radius)).max(near);
        let hi = (gt_depth + T::of(cfg.depth_radius)).min(far);
        if lo < hi {
            let inv_d = 1.0 / cfg.n_depth as f64;
            for i in 0..cfg.n_depth {
                let jitter = rng.random_range(0.0..1.0);
                let u = T::of((i as f64 + jitter) * inv_d);
                zs.push(lo + (hi - lo) * u);
            }
        }
    }
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    zs.dedup_by(|a, b| (*a - *b).abs() <= T::of(1e-9));
    zs
}

/// Density of a TSDF value: `beta * sigmoid(-beta * s)`. Strictly decreasing
/// in `s` with range (0, beta).
pub fn sdf_to_density<T: Real>(s: T, beta: T) -> Result<T> {
    if beta <= T::zero() {
        return Err(SlamError::invalid("beta must be positive"));
    }
    Ok(beta * crate::render::sigmoid(-beta * s))
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Volume compositing weights and the rendered color/depth:
/// `w_n = exp(-sum_{i<n} sigma_i) * (1 - exp(-sigma_n))`, no spacing factor,
/// and the depth estimate is not renormalized by the weight sum.
pub fn composite<T: Real>(
    sigma: &[T],
    z: &[T],
    color: &[[T; 3]],
) -> Result<(Vec<T>, [T; 3], T)> {
    if sigma.len() != z.len() || sigma.len() != color.len() {
        return Err(SlamError::invalid(format!(
            "composite length mismatch: {} sigma, {} z, {} color",
            sigma.len(),
            z.len(),
            color.len()
        )));
    }
    if sigma.is_empty() {
        return Err(SlamError::invalid("composite needs at least one sample"));
    }
    let mut weights = Vec::with_capacity(sigma.len());
    let mut transmittance = T::one();
    let mut c_hat = [T::zero(); 3];
    let mut d_hat = T::zero();
    for n in 0..sigma.len() {
        let alpha = T::one() - (-sigma[n]).exp();
        let w = transmittance * alpha;
        weights.push(w);
        for ch in 0..3 {
            c_hat[ch] += w * color[n][ch];
        }
        d_hat += w * z[n];
        transmittance *= (-sigma[n]).exp();
    }
    Ok((weights, c_hat, d_hat))
}

/// A renderable TSDF+color field. `sample` returns `None` outside the field's
/// domain; such points composite as free space (sigma = 0, s = 1).
pub trait Field<T: Real>: Sync {
    type Scratch: Send;
    fn make_scratch(&self) -> Self::Scratch;
    fn sample(&self, scratch: &mut Self::Scratch, p: [T; 3]) -> Option<(T, [T; 3])>;
    fn beta(&self) -> T;
}

/// Reusable buffers for point queries against the learned map.
pub struct QueryScratch<T> {
    pub encoding: Vec<T>,
    pub hidden: Vec<T>,
}

impl<T: Real> Field<T> for MapModel<T> {
    type Scratch = QueryScratch<T>;

    fn make_scratch(&self) -> QueryScratch<T> {
        QueryScratch {
            encoding: vec![T::zero(); self.encoding_dim()],
            hidden: vec![T::zero(); self.hidden_dim],
        }
    }

    fn sample(&self, scratch: &mut QueryScratch<T>, p: [T; 3]) -> Option<(T, [T; 3])> {
        use crate::map::decoder::{decoder_forward, OutputActivation};
        if self.encode_into(p, &mut scratch.encoding, None).is_err() {
            return None;
        }
        let mut s_out = [T::zero()];
        decoder_forward(
            self.store.values(self.gid_sdf),
            &self.sdf_dims(),
            &scratch.encoding,
            OutputActivation::Tanh,
            &mut scratch.hidden,
            &mut s_out,
        )
        .ok()?;
        let mut c_out = [T::zero(); 3];
        decoder_forward(
            self.store.values(self.gid_color),
            &self.color_dims(),
            &scratch.encoding,
            OutputActivation::Sigmoid,
            &mut scratch.hidden,
            &mut c_out,
        )
        .ok()?;
        Some((s_out[0], c_out))
    }

    fn beta(&self) -> T {
        MapModel::beta(self)
    }
}

/// Rendered batch: per-ray composited color/depth plus the per-sample tables.
/// Samples of ray `i` live in `offsets[i]..offsets[i+1]`.
#[derive(Debug, Clone)]
pub struct RenderOutput<T> {
    pub colors: Vec<[T; 3]>,
    pub depths: Vec<T>,
    pub offsets: Vec<usize>,
    pub z: Vec<T>,
    pub sdf: Vec<T>,
    pub sigma: Vec<T>,
    pub weight: Vec<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn sample_range(&self, ray: usize) -> std::ops::Range<usize> {
        self.offsets[ray]..self.offsets[ray + 1]
    }

    pub fn ray_count(&self) -> usize {
        self.depths.len()
    }
}

/// Renders a batch against a field. Deterministic for a fixed rng seed: all
/// sample depths are drawn sequentially before the parallel shading pass.
pub fn render_rays<T: Real, F: Field<T>>(
    field: &F,
    batch: &RayBatch<T>,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<RenderOutput<T>> {
    batch.validate()?;
    cfg.validate()?;
    let beta = field.beta();
    if beta <= T::zero() {
        return Err(SlamError::invalid("field beta must be positive"));
    }

    let mut offsets = Vec::with_capacity(batch.len() + 1);
    offsets.push(0usize);
    let mut z_all: Vec<T> = Vec::new();
    for ray in &batch.rays {
        let zs = sample_along_ray(ray.depth, cfg, rng);
        z_all.extend_from_slice(&zs);
        offsets.push(z_all.len());
    }

    struct RayResult<T> {
        color: [T; 3],
        depth: T,
        sdf: Vec<T>,
        sigma: Vec<T>,
        weight: Vec<T>,
    }

    let per_ray: Vec<Result<RayResult<T>>> = batch
        .rays
        .par_iter()
        .enumerate()
        .map_init(
            || field.make_scratch(),
            |scratch, (i, ray)| {
                let zs = &z_all[offsets[i]..offsets[i + 1]];
                let mut sdf = Vec::with_capacity(zs.len());
                let mut sigma = Vec::with_capacity(zs.len());
                let mut colors = Vec::with_capacity(zs.len());
                for &z in zs {
                    let p = vec::add(ray.origin, vec::scale(ray.dir, z));
                    match field.sample(scratch, p) {
                        Some((s, c)) => {
                            let dens = beta * sigmoid(-beta * s);
                            if !dens.is_finite() {
                                return Err(SlamError::Numeric("density".into()));
                            }
                            sdf.push(s);
                            sigma.push(dens);
                            colors.push(c);
                        }
                        None => {
                            sdf.push(T::one());
                            sigma.push(T::zero());
                            colors.push([T::zero(); 3]);
                        }
                    }
                }
                let (weight, c_hat, d_hat) = composite(&sigma, zs, &colors)?;
                Ok(RayResult {
                    color: c_hat,
                    depth: d_hat,
                    sdf,
                    sigma,
                    weight,
                })
            },
        )
        .collect();

    let mut out = RenderOutput {
        colors: Vec::with_capacity(batch.len()),
        depths: Vec::with_capacity(batch.len()),
        offsets,
        z: z_all,
        sdf: Vec::new(),
        sigma: Vec::new(),
        weight: Vec::new(),
    };
    for r in per_ray {
        let r = r?;
        out.colors.push(r.color);
        out.depths.push(r.depth);
        out.sdf.extend_from_slice(&r.sdf);
        out.sigma.extend_from_slice(&r.sigma);
        out.weight.extend_from_slice(&r.weight);
    }
    Ok(out)
}
