//! Joint forward/backward pass over the rendering and loss graph.
//!
//! The computation graph is fixed, so gradients are hand-derived per stage:
//! loss -> composited color/depth -> weights -> densities -> TSDF -> decoders
//! -> encoding -> (grid features, One-blob position) -> sample position ->
//! pose. Sample depths along each ray are drawn once per call and treated as
//! constants with respect to the pose; pose gradients flow through the ray
//! origin and rotated direction only.
//!
//! Rays are processed in fixed-size chunks. Each chunk accumulates into its
//! own gradient buffer and the buffers are folded in chunk order, so results
//! are bit-identical regardless of the worker schedule.

use rayon::prelude::*;

use crate::diff::pose::PoseParam;
use crate::diff::store::GroupKind;
use crate::diff::PoseTable;
use crate::error::{Result, SlamError};
use crate::loss::{
    classify, smoothness_loss, total_loss, BatchCounts, LossBreakdown, LossWeights, SampleClass,
};
use crate::map::decoder::{decoder_backward, decoder_forward, OutputActivation};
use crate::map::{LevelInterp, MapModel};
use crate::math::{vec, Real};
use crate::render::{sample_along_ray, sigmoid, RayBatch, RenderOutput, SampleConfig};

/// Configuration of one optimization step.
#[derive(Debug, Clone)]
pub struct StepConfig {
    pub sample: SampleConfig,
    pub weights: LossWeights,
    /// Add the grid smoothness term (applied on the final mapped frame).
    pub include_smoothness: bool,
    /// Probe sub-volume edge length, in finest-level cells.
    pub smooth_cells: usize,
    /// Rays per deterministic reduction chunk.
    pub chunk_size: usize,
}

impl StepConfig {
    pub fn new(sample: SampleConfig, weights: LossWeights) -> Self {
        Self {
            sample,
            weights,
            include_smoothness: false,
            smooth_cells: 6,
            chunk_size: 256,
        }
    }
}

/// Per-worker scratch; reused across the rays of a chunk.
struct RayScratch<T> {
    interps: Vec<LevelInterp<T>>,  // n_samples * levels
    encodings: Vec<T>,             // n_samples * enc_dim
    oneblob_grad: Vec<T>,          // n_samples * 3 * bins
    hid_sdf: Vec<T>,               // n_samples * hidden
    hid_color: Vec<T>,             // n_samples * hidden
    inside: Vec<bool>,
    sdf: Vec<T>,
    sig: Vec<T>, // sigmoid(-beta * s)
    sigma: Vec<T>,
    colors: Vec<[T; 3]>,
    trans: Vec<T>, // transmittance before each sample
    weights: Vec<T>,
    d_enc: Vec<T>,
    d_hidden: Vec<T>,
    d_sdf_seed: Vec<T>,
    d_sigma: Vec<T>,
}

impl<T: Real> RayScratch<T> {
    fn new() -> Self {
        Self {
            interps: Vec::new(),
            encodings: Vec::new(),
            oneblob_grad: Vec::new(),
            hid_sdf: Vec::new(),
            hid_color: Vec::new(),
            inside: Vec::new(),
            sdf: Vec::new(),
            sig: Vec::new(),
            sigma: Vec::new(),
            colors: Vec::new(),
            trans: Vec::new(),
            weights: Vec::new(),
            d_enc: Vec::new(),
            d_hidden: Vec::new(),
            d_sdf_seed: Vec::new(),
            d_sigma: Vec::new(),
        }
    }

    fn reset(&mut self, n: usize, levels: usize, enc_dim: usize, ob_dim: usize, hidden: usize) {
        self.interps.clear();
        self.interps.reserve(n * levels);
        self.encodings.clear();
        self.encodings.resize(n * enc_dim, T::zero());
        self.oneblob_grad.clear();
        self.oneblob_grad.resize(n * ob_dim, T::zero());
        self.hid_sdf.clear();
        self.hid_sdf.resize(n * hidden, T::zero());
        self.hid_color.clear();
        self.hid_color.resize(n * hidden, T::zero());
        self.inside.clear();
        self.sdf.clear();
        self.sig.clear();
        self.sigma.clear();
        self.colors.clear();
        self.trans.clear();
        self.weights.clear();
        self.d_enc.resize(enc_dim, T::zero());
        self.d_hidden.resize(hidden, T::zero());
        self.d_sdf_seed.clear();
        self.d_sdf_seed.resize(n, T::zero());
        self.d_sigma.clear();
        self.d_sigma.resize(n, T::zero());
    }
}

/// Chunk-local gradient accumulation plus partial loss sums.
struct GradBuf<T> {
    map_active: bool,
    grid: Vec<T>,
    sdf: Vec<T>,
    color: Vec<T>,
    beta: T,
    poses: Vec<[T; 7]>,
    color_u: f64,
    color_f: f64,
    depth_u: f64,
    depth_f: f64,
    fs: f64,
    tail: f64,
    mid: f64,
    // render output pieces, in ray order
    out_colors: Vec<[T; 3]>,
    out_depths: Vec<T>,
    out_sdf: Vec<T>,
    out_sigma: Vec<T>,
    out_weight: Vec<T>,
}

/// Seeds of one ray's composited outputs.
struct RaySeeds<T> {
    d_color: [T; 3],
    d_depth: T,
}

/// Runs the joint forward and backward pass for one batch. The total loss is
/// returned with its per-term breakdown; gradients are accumulated into the
/// model store and the pose table, honoring frozen flags. The per-ray render
/// output is returned for logging and tests.
pub fn forward_backward<T: Real>(
    batch: &RayBatch<T>,
    model: &mut MapModel<T>,
    poses: &mut PoseTable<T>,
    cfg: &StepConfig,
    rng: &mut impl rand::Rng,
) -> Result<(LossBreakdown, RenderOutput<T>)> {
    batch.validate()?;
    cfg.sample.validate()?;
    cfg.weights.validate()?;
    let beta = model.beta();
    if beta <= T::zero() {
        return Err(SlamError::invalid("model beta must be positive"));
    }

    // Resolve every ray's pose group up front.
    let mut pose_slot = Vec::with_capacity(batch.len());
    for (i, ray) in batch.rays.iter().enumerate() {
        match poses.gid(ray.keyframe) {
            Some(gid) => pose_slot.push(gid.0),
            None => {
                return Err(SlamError::invalid(format!(
                    "ray {i}: keyframe {} has no pose entry",
                    ray.keyframe
                )))
            }
        }
    }

    // Draw all sample depths sequentially for determinism.
    let mut offsets = Vec::with_capacity(batch.len() + 1);
    offsets.push(0usize);
    let mut z_all: Vec<T> = Vec::new();
    for ray in &batch.rays {
        let zs = sample_along_ray(ray.depth, &cfg.sample, rng);
        z_all.extend_from_slice(&zs);
        offsets.push(z_all.len());
    }

    let counts = BatchCounts::of(batch);
    let map_active = !model.store.group(model.gid_grid).frozen;
    let n_pose_groups = poses.store.len();
    // Chunk size depends only on the batch, so the reduction order (and the
    // f32 result) is identical across runs and machines.
    let chunk = cfg
        .chunk_size
        .min(batch.len().div_ceil(16))
        .clamp(16, 512)
        .min(batch.len().max(1));
    let n_chunks = batch.len().div_ceil(chunk);

    let model_ref = &*model;
    let poses_ref = &*poses;
    let z_ref = &z_all;
    let offsets_ref = &offsets;
    let slots_ref = &pose_slot;

    let chunks: Vec<Result<GradBuf<T>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * chunk;
            let hi = ((ci + 1) * chunk).min(batch.len());
            process_chunk(
                batch,
                model_ref,
                poses_ref,
                cfg,
                &counts,
                z_ref,
                offsets_ref,
                slots_ref,
                lo..hi,
                map_active,
                n_pose_groups,
            )
        })
        .collect();

    // Deterministic fold in chunk order.
    let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0); // cu, cf, du, df, fs, tail, mid
    let mut out = RenderOutput {
        colors: Vec::with_capacity(batch.len()),
        depths: Vec::with_capacity(batch.len()),
        offsets,
        z: z_all,
        sdf: Vec::new(),
        sigma: Vec::new(),
        weight: Vec::new(),
    };
    let mut merged: Option<GradBuf<T>> = None;
    for c in chunks {
        let c = c?;
        sums.0 += c.color_u;
        sums.1 += c.color_f;
        sums.2 += c.depth_u;
        sums.3 += c.depth_f;
        sums.4 += c.fs;
        sums.5 += c.tail;
        sums.6 += c.mid;
        out.colors.extend_from_slice(&c.out_colors);
        out.depths.extend_from_slice(&c.out_depths);
        out.sdf.extend_from_slice(&c.out_sdf);
        out.sigma.extend_from_slice(&c.out_sigma);
        out.weight.extend_from_slice(&c.out_weight);
        merged = Some(match merged {
            None => c,
            Some(mut m) => {
                if m.map_active {
                    for (a, b) in m.grid.iter_mut().zip(&c.grid) {
                        *a += *b;
                    }
                    for (a, b) in m.sdf.iter_mut().zip(&c.sdf) {
                        *a += *b;
                    }
                    for (a, b) in m.color.iter_mut().zip(&c.color) {
                        *a += *b;
                    }
                    m.beta += c.beta;
                }
                for (a, b) in m.poses.iter_mut().zip(&c.poses) {
                    for k in 0..7 {
                        a[k] += b[k];
                    }
                }
                m
            }
        });
    }
    let acc = merged.expect("nonempty batch has at least one chunk");

    // Write accumulated gradients into the stores, honoring frozen flags.
    if acc.map_active {
        for (gid, src) in [
            (model.gid_grid, &acc.grid),
            (model.gid_sdf, &acc.sdf),
            (model.gid_color, &acc.color),
        ] {
            if !model.store.group(gid).frozen {
                let dst = model.store.grad_mut(gid);
                for (a, b) in dst.iter_mut().zip(src.iter()) {
                    *a += *b;
                }
            }
        }
        if !model.store.group(model.gid_beta).frozen {
            model.store.grad_mut(model.gid_beta)[0] += acc.beta;
        }
    }
    for slot in 0..n_pose_groups {
        let gid = crate::diff::store::GroupId(slot);
        if poses.store.group(gid).frozen {
            continue;
        }
        if !matches!(poses.store.group(gid).kind, GroupKind::Pose(_)) {
            continue;
        }
        let dst = poses.store.grad_mut(gid);
        for k in 0..7 {
            dst[k] += acc.poses[slot][k];
        }
    }

    // Assemble the breakdown exactly as the standalone loss operations do.
    let w = &cfg.weights;
    let mean = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
    let l_color = w.uniform_color * mean(sums.0, counts.uniform)
        + w.feature_color * mean(sums.1, counts.feature);
    let l_depth = w.uniform_depth * mean(sums.2, counts.uniform_valid_depth)
        + w.feature_depth * mean(sums.3, counts.feature_valid_depth);
    let n_rays = counts.rays as f64;
    let l_fs = sums.4 / n_rays;
    let l_tail = sums.5 / n_rays;
    let l_mid = sums.6 / n_rays;

    let mut l_smooth = 0.0;
    if cfg.include_smoothness {
        let frozen = model.store.group(model.gid_grid).frozen;
        if frozen {
            l_smooth = smoothness_loss(model, cfg.smooth_cells, rng, None)?;
        } else {
            // Scale the smoothness gradient by its weight while accumulating.
            let n = model.store.values(model.gid_grid).len();
            let mut sg = vec![T::zero(); n];
            l_smooth = smoothness_loss(model, cfg.smooth_cells, rng, Some(&mut sg))?;
            let lambda = T::of(w.smooth);
            let dst = model.store.grad_mut(model.gid_grid);
            for (a, b) in dst.iter_mut().zip(&sg) {
                *a += lambda * *b;
            }
        }
    }

    let breakdown = total_loss(l_color, l_depth, l_fs, l_tail, l_mid, l_smooth, w)?;
    Ok((breakdown, out))
}

#[allow(clippy::too_many_arguments)]
fn process_chunk<T: Real>(
    batch: &RayBatch<T>,
    model: &MapModel<T>,
    poses: &PoseTable<T>,
    cfg: &StepConfig,
    counts: &BatchCounts,
    z_all: &[T],
    offsets: &[usize],
    pose_slot: &[usize],
    range: std::ops::Range<usize>,
    map_active: bool,
    n_pose_groups: usize,
) -> Result<GradBuf<T>> {
    let enc_dim = model.encoding_dim();
    let grid_dim = model.grid_feature_dim();
    let ob_dim = model.oneblob_cfg.encoding_dim();
    let levels = model.grid_cfg.levels;
    let f = model.grid_cfg.features_per_level;
    let level_stride = model.grid_cfg.table_size() * f;
    let hidden = model.hidden_dim;
    let beta = model.beta();
    let sdf_dims = model.sdf_dims();
    let color_dims = model.color_dims();
    let sdf_params = model.store.values(model.gid_sdf);
    let color_params = model.store.values(model.gid_color);
    let grid_values = model.store.values(model.gid_grid);
    let w = &cfg.weights;
    let trunc = T::of(w.truncation);
    let gamma = T::of(w.mid_fraction);

    let mut buf = GradBuf {
        map_active,
        grid: if map_active {
            vec![T::zero(); grid_values.len()]
        } else {
            Vec::new()
        },
        sdf: if map_active {
            vec![T::zero(); sdf_params.len()]
        } else {
            Vec::new()
        },
        color: if map_active {
            vec![T::zero(); color_params.len()]
        } else {
            Vec::new()
        },
        beta: T::zero(),
        poses: vec![[T::zero(); 7]; n_pose_groups],
        color_u: 0.0,
        color_f: 0.0,
        depth_u: 0.0,
        depth_f: 0.0,
        fs: 0.0,
        tail: 0.0,
        mid: 0.0,
        out_colors: Vec::with_capacity(range.len()),
        out_depths: Vec::with_capacity(range.len()),
        out_sdf: Vec::new(),
        out_sigma: Vec::new(),
        out_weight: Vec::new(),
    };

    let mut scratch = RayScratch::<T>::new();

    for ri in range {
        let ray = &batch.rays[ri];
        let zs = &z_all[offsets[ri]..offsets[ri + 1]];
        let n = zs.len();
        scratch.reset(n, levels, enc_dim, ob_dim, hidden);

        // ---- forward ----
        for (k, &z) in zs.iter().enumerate() {
            let p = vec::add(ray.origin, vec::scale(ray.dir, z));
            let enc = &mut scratch.encodings[k * enc_dim..(k + 1) * enc_dim];
            let inside = {
                let mut tape_ok = true;
                match crate::map::grid_encode_into(
                    &model.grid_cfg,
                    grid_values,
                    p,
                    &mut enc[..grid_dim],
                    Some(&mut scratch.interps),
                ) {
                    Ok(()) => {}
                    Err(SlamError::OutOfBounds(..)) => tape_ok = false,
                    Err(e) => return Err(e),
                }
                if tape_ok {
                    let u = model.normalized(p);
                    crate::map::oneblob_encode_into(
                        &model.oneblob_cfg,
                        u,
                        &mut enc[grid_dim..],
                        Some(&mut scratch.oneblob_grad[k * ob_dim..(k + 1) * ob_dim]),
                    )?;
                }
                tape_ok
            };
            scratch.inside.push(inside);
            if !inside {
                // Pad the interp tape so indexing stays aligned.
                for _ in 0..levels {
                    scratch.interps.push(LevelInterp {
                        corners: [0; 8],
                        weights: [T::zero(); 8],
                        frac: [T::zero(); 3],
                        scale: [T::zero(); 3],
                    });
                }
                scratch.sdf.push(T::one());
                scratch.sig.push(T::zero());
                scratch.sigma.push(T::zero());
                scratch.colors.push([T::zero(); 3]);
                continue;
            }
            let enc = &scratch.encodings[k * enc_dim..(k + 1) * enc_dim];
            let mut s_out = [T::zero()];
            decoder_forward(
                sdf_params,
                &sdf_dims,
                enc,
                OutputActivation::Tanh,
                &mut scratch.hid_sdf[k * hidden..(k + 1) * hidden],
                &mut s_out,
            )?;
            let mut c_out = [T::zero(); 3];
            decoder_forward(
                color_params,
                &color_dims,
                enc,
                OutputActivation::Sigmoid,
                &mut scratch.hid_color[k * hidden..(k + 1) * hidden],
                &mut c_out,
            )?;
            let s = s_out[0];
            let sig = sigmoid(-beta * s);
            let dens = beta * sig;
            if !dens.is_finite() {
                return Err(SlamError::Numeric(format!("density of ray {ri}")));
            }
            scratch.sdf.push(s);
            scratch.sig.push(sig);
            scratch.sigma.push(dens);
            scratch.colors.push(c_out);
        }

        // Compositing (identical formula to render::composite).
        let mut c_hat = [T::zero(); 3];
        let mut d_hat = T::zero();
        let mut transmittance = T::one();
        for k in 0..n {
            scratch.trans.push(transmittance);
            let alpha = T::one() - (-scratch.sigma[k]).exp();
            let wk = transmittance * alpha;
            scratch.weights.push(wk);
            for ch in 0..3 {
                c_hat[ch] += wk * scratch.colors[k][ch];
            }
            d_hat += wk * zs[k];
            transmittance *= (-scratch.sigma[k]).exp();
        }

        // ---- per-ray loss sums and output seeds ----
        let valid = ray.depth > T::zero();
        let mut csq = 0.0;
        for ch in 0..3 {
            let r = (c_hat[ch] - ray.color[ch]).to_f64();
            csq += r * r;
        }
        let (lambda_c, n_c, lambda_d, n_d) = if ray.is_feature {
            (
                w.feature_color,
                counts.feature,
                w.feature_depth,
                counts.feature_valid_depth,
            )
        } else {
            (
                w.uniform_color,
                counts.uniform,
                w.uniform_depth,
                counts.uniform_valid_depth,
            )
        };
        if ray.is_feature {
            buf.color_f += csq;
        } else {
            buf.color_u += csq;
        }
        let mut seeds = RaySeeds {
            d_color: [T::zero(); 3],
            d_depth: T::zero(),
        };
        if n_c > 0 {
            let scale = T::of(2.0 * lambda_c / n_c as f64);
            for ch in 0..3 {
                seeds.d_color[ch] = scale * (c_hat[ch] - ray.color[ch]);
            }
        }
        if valid {
            let r = (d_hat - ray.depth).to_f64();
            if ray.is_feature {
                buf.depth_f += r * r;
            } else {
                buf.depth_u += r * r;
            }
            if n_d > 0 {
                seeds.d_depth = T::of(2.0 * lambda_d / n_d as f64) * (d_hat - ray.depth);
            }
        }

        // Per-sample TSDF classes, counts, then seeds.
        let mut n_fs = 0usize;
        let mut n_tail = 0usize;
        let mut n_mid = 0usize;
        if valid {
            for k in 0..n {
                match classify(zs[k], ray.depth, trunc, gamma) {
                    SampleClass::FreeSpace => n_fs += 1,
                    SampleClass::TruncTail => n_tail += 1,
                    SampleClass::TruncMid => n_mid += 1,
                    SampleClass::Behind => {}
                }
            }
            let inv_rays = 1.0 / counts.rays as f64;
            let mut fs_sum = 0.0;
            let mut tail_sum = 0.0;
            let mut mid_sum = 0.0;
            for k in 0..n {
                let s = scratch.sdf[k];
                match classify(zs[k], ray.depth, trunc, gamma) {
                    SampleClass::FreeSpace => {
                        let r = (s - T::one()).to_f64();
                        fs_sum += r * r;
                        scratch.d_sdf_seed[k] =
                            T::of(w.free_space * 2.0 * inv_rays / n_fs as f64) * (s - T::one());
                    }
                    class @ (SampleClass::TruncTail | SampleClass::TruncMid) => {
                        let resid = zs[k] + s * trunc - ray.depth;
                        let r2 = resid.to_f64() * resid.to_f64();
                        let (lambda, count) = if class == SampleClass::TruncTail {
                            tail_sum += r2;
                            (w.trunc_tail, n_tail)
                        } else {
                            mid_sum += r2;
                            (w.trunc_mid, n_mid)
                        };
                        scratch.d_sdf_seed[k] =
                            T::of(lambda * 2.0 * inv_rays / count as f64) * resid * trunc;
                    }
                    SampleClass::Behind => {}
                }
            }
            if n_fs > 0 {
                buf.fs += fs_sum / n_fs as f64;
            }
            if n_tail > 0 {
                buf.tail += tail_sum / n_tail as f64;
            }
            if n_mid > 0 {
                buf.mid += mid_sum / n_mid as f64;
            }
        }

        // ---- backward ----
        // dL/dw_k and the sigma adjoints via suffix accumulation.
        let mut suffix = T::zero(); // sum_{n > k} dL/dw_n * w_n
        for k in (0..n).rev() {
            let mut d_w = seeds.d_depth * zs[k];
            for ch in 0..3 {
                d_w += seeds.d_color[ch] * scratch.colors[k][ch];
            }
            // T_k * exp(-sigma_k) equals the transmittance after sample k.
            let trans_after = scratch.trans[k] * (-scratch.sigma[k]).exp();
            scratch.d_sigma[k] = d_w * trans_after - suffix;
            suffix += d_w * scratch.weights[k];
        }

        let mut d_origin = [T::zero(); 3];
        let mut d_dir = [T::zero(); 3];
        for k in 0..n {
            if !scratch.inside[k] {
                continue; // constants: sigma = 0, s = 1
            }
            let s = scratch.sdf[k];
            let sig = scratch.sig[k];
            // d sigma / d s = -beta^2 * sig * (1 - sig)
            let dsig_ds = -beta * beta * sig * (T::one() - sig);
            let d_s_total = scratch.d_sdf_seed[k] + scratch.d_sigma[k] * dsig_ds;
            // d sigma / d beta = sig - beta * s * sig * (1 - sig)
            if map_active {
                let dsig_dbeta = sig - beta * s * sig * (T::one() - sig);
                buf.beta += scratch.d_sigma[k] * dsig_dbeta;
            }

            // Decoder backward passes; encoding adjoint accumulates from both.
            scratch.d_enc.fill(T::zero());
            let enc = &scratch.encodings[k * enc_dim..(k + 1) * enc_dim];
            decoder_backward(
                sdf_params,
                &sdf_dims,
                enc,
                &scratch.hid_sdf[k * hidden..(k + 1) * hidden],
                &[s],
                OutputActivation::Tanh,
                &[d_s_total],
                &mut scratch.d_hidden,
                if map_active { Some(&mut buf.sdf) } else { None },
                Some(&mut scratch.d_enc),
            );
            let d_c = [
                scratch.weights[k] * seeds.d_color[0],
                scratch.weights[k] * seeds.d_color[1],
                scratch.weights[k] * seeds.d_color[2],
            ];
            decoder_backward(
                color_params,
                &color_dims,
                enc,
                &scratch.hid_color[k * hidden..(k + 1) * hidden],
                &scratch.colors[k],
                OutputActivation::Sigmoid,
                &d_c,
                &mut scratch.d_hidden,
                if map_active {
                    Some(&mut buf.color)
                } else {
                    None
                },
                Some(&mut scratch.d_enc),
            );

            // Grid part: scatter into features and collect position gradient.
            let mut d_pos = [T::zero(); 3];
            for level in 0..levels {
                let interp = &scratch.interps[k * levels + level];
                let base = level * level_stride;
                for corner in 0..8 {
                    let entry = base + interp.corners[corner] * f;
                    let wg = interp.weight_world_grad(corner);
                    for j in 0..f {
                        let d_feat = scratch.d_enc[level * f + j];
                        if map_active {
                            buf.grid[entry + j] += interp.weights[corner] * d_feat;
                        }
                        let fv = grid_values[entry + j];
                        for a in 0..3 {
                            d_pos[a] += d_feat * fv * wg[a];
                        }
                    }
                }
            }
            // One-blob part: d(bin)/du is within-axis; du/dp = 1/extent.
            let ext = model.grid_cfg.bounds.extent();
            let bins = model.oneblob_cfg.bins_per_axis;
            for a in 0..3 {
                let mut acc = T::zero();
                for j in 0..bins {
                    let idx = a * bins + j;
                    acc += scratch.d_enc[grid_dim + idx]
                        * scratch.oneblob_grad[k * ob_dim + idx];
                }
                d_pos[a] += acc / T::of(ext[a]);
            }

            for a in 0..3 {
                d_origin[a] += d_pos[a];
                d_dir[a] += d_pos[a] * zs[k];
            }
        }

        // Pose chain: origin = t, dir = R(q) cam_dir.
        let slot = pose_slot[ri];
        let pose = PoseParam::from_slice(
            poses.store.values(crate::diff::store::GroupId(slot)),
        );
        let (_, jac) = pose.rotation.rotate_with_jacobian(ray.cam_dir);
        for c in 0..4 {
            buf.poses[slot][c] += vec::dot(jac[c], d_dir);
        }
        for a in 0..3 {
            buf.poses[slot][4 + a] += d_origin[a];
        }

        buf.out_colors.push(c_hat);
        buf.out_depths.push(d_hat);
        buf.out_sdf.extend_from_slice(&scratch.sdf);
        buf.out_sigma.extend_from_slice(&scratch.sigma);
        buf.out_weight.extend_from_slice(&scratch.weights);
    }

    Ok(buf)
}
