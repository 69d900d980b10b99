//! Per-frame pixel selection: corner features plus grid-stratified uniform
//! pixels, cached once per keyframe in the camera frame and re-projected to
//! world with the current pose estimate each iteration.

use rand::Rng;

use crate::dataset::{CameraIntrinsics, Frame};
use crate::diff::PoseParam;
use crate::error::{Result, SlamError};
use crate::math::Real;
use crate::render::{Ray, RayBatch};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureDetectorConfig {
    pub max_corners: usize,
    /// Response threshold as a fraction of the image's maximum response.
    pub quality_level: f64,
    /// Greedy suppression radius in pixels.
    pub min_distance: f64,
    /// Box-window radius for the structure tensor.
    pub window_radius: usize,
}

impl Default for FeatureDetectorConfig {
    fn default() -> Self {
        Self {
            max_corners: 512,
            quality_level: 0.01,
            min_distance: 8.0,
            window_radius: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: u32,
    pub y: u32,
    pub response: f64,
}

/// Minimum-eigenvalue corner detection on a grayscale image (row-major,
/// `width * height`). Corners are local maxima of the structure tensor's
/// smaller eigenvalue above `quality_level * max_response`, thinned greedily
/// by `min_distance` in response order.
pub fn detect_features(
    gray: &[f32],
    width: usize,
    height: usize,
    cfg: &FeatureDetectorConfig,
) -> Vec<Corner> {
    if width < 3 || height < 3 {
        return Vec::new();
    }
    debug_assert_eq!(gray.len(), width * height);

    // Central-difference gradients (zero at the border).
    let mut gx = vec![0.0f64; width * height];
    let mut gy = vec![0.0f64; width * height];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let i = y * width + x;
            gx[i] = 0.5 * (gray[i + 1] as f64 - gray[i - 1] as f64);
            gy[i] = 0.5 * (gray[i + width] as f64 - gray[i - width] as f64);
        }
    }

    // Box-window structure tensor and its minimum eigenvalue.
    let r = cfg.window_radius as isize;
    let mut response = vec![0.0f64; width * height];
    let mut max_response = 0.0f64;
    for y in 0..height {
        for x in 0..width {
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            let mut syy = 0.0;
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= height as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= width as isize {
                        continue;
                    }
                    let i = yy as usize * width + xx as usize;
                    sxx += gx[i] * gx[i];
                    sxy += gx[i] * gy[i];
                    syy += gy[i] * gy[i];
                }
            }
            // Smaller eigenvalue of [[sxx, sxy], [sxy, syy]].
            let tr = sxx + syy;
            let det = sxx * syy - sxy * sxy;
            let disc = (tr * tr * 0.25 - det).max(0.0).sqrt();
            let lam = tr * 0.5 - disc;
            response[y * width + x] = lam;
            max_response = max_response.max(lam);
        }
    }
    if max_response <= 0.0 {
        return Vec::new();
    }
    let threshold = cfg.quality_level * max_response;

    // Local maxima above threshold (8-neighborhood, strict against raster
    // order so plateaus yield one corner).
    let mut candidates: Vec<Corner> = Vec::new();
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let i = y * width + x;
            let v = response[i];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nbr: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let j = (y as isize + dy) as usize * width + (x as isize + dx) as usize;
                    let u = response[j];
                    if u > v || (u == v && j < i) {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                candidates.push(Corner {
                    x: x as u32,
                    y: y as u32,
                    response: v,
                });
            }
        }
    }

    // Sort by response descending (ties by raster order for determinism), then
    // thin greedily by min_distance.
    candidates.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap()
            .then_with(|| (a.y, a.x).cmp(&(b.y, b.x)))
    });
    let min_d2 = cfg.min_distance * cfg.min_distance;
    let mut kept: Vec<Corner> = Vec::new();
    for c in candidates {
        if kept.len() >= cfg.max_corners {
            break;
        }
        let ok = kept.iter().all(|k| {
            let dx = c.x as f64 - k.x as f64;
            let dy = c.y as f64 - k.y as f64;
            dx * dx + dy * dy >= min_d2
        });
        if ok {
            kept.push(c);
        }
    }
    kept
}

/// Stratified uniform pixel sampling: the image is divided into a
/// ceil(sqrt(n)) x ceil(sqrt(n)) cell grid and cells are drawn from in
/// round-robin order, so per-cell occupancy differs by at most one.
pub fn uniform_grid_sample(
    width: usize,
    height: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(u32, u32)>> {
    if n > width * height {
        return Err(SlamError::invalid(format!(
            "requested {n} pixels from a {width}x{height} image"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cells = (n as f64).sqrt().ceil() as usize;
    let mut picks = Vec::with_capacity(n);
    let mut used = std::collections::HashSet::with_capacity(n);
    'outer: loop {
        for cy in 0..cells {
            for cx in 0..cells {
                if picks.len() >= n {
                    break 'outer;
                }
                let x0 = cx * width / cells;
                let x1 = ((cx + 1) * width / cells).max(x0 + 1).min(width);
                let y0 = cy * height / cells;
                let y1 = ((cy + 1) * height / cells).max(y0 + 1).min(height);
                // Rejection-sample an unused pixel from this cell; give up
                // after a few tries so tiny saturated cells don't spin.
                for _ in 0..16 {
                    let x = rng.random_range(x0..x1) as u32;
                    let y = rng.random_range(y0..y1) as u32;
                    if used.insert((x, y)) {
                        picks.push((x, y));
                        break;
                    }
                }
            }
        }
        if picks.len() < n {
            // Saturated cells: fill from anywhere, still unique.
            while picks.len() < n {
                let x = rng.random_range(0..width) as u32;
                let y = rng.random_range(0..height) as u32;
                if used.insert((x, y)) {
                    picks.push((x, y));
                }
            }
        }
        break;
    }
    Ok(picks)
}

/// Pixel samples of one frame, cached in the camera frame.
#[derive(Debug, Clone)]
pub struct PixelSampleSet<T> {
    pub frame_id: usize,
    pub xs: Vec<u32>,
    pub ys: Vec<u32>,
    /// Unit ray directions in the camera frame.
    pub dirs: Vec<[T; 3]>,
    pub colors: Vec<[T; 3]>,
    /// Meters; 0 marks invalid depth.
    pub depths: Vec<T>,
    pub is_feature: Vec<bool>,
}

impl<T: Real> PixelSampleSet<T> {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Fraction of the per-keyframe budget the corner detector may claim.
pub const FEATURE_BUDGET_FRACTION: f64 = 0.25;

/// Builds a keyframe's cached sample set: detected corners first (capped at
/// [`FEATURE_BUDGET_FRACTION`] of the budget), the remainder grid-stratified
/// uniform pixels, with camera-frame directions computed once. With
/// `use_features = false` (the sampling ablation), all pixels are drawn
/// uniformly at random instead.
pub fn build_keyframe_samples<T: Real>(
    frame: &Frame,
    intrinsics: &CameraIntrinsics,
    ratio: f64,
    detector: &FeatureDetectorConfig,
    use_features: bool,
    rng: &mut impl Rng,
) -> Result<PixelSampleSet<T>> {
    if !(0.0 < ratio && ratio <= 1.0) {
        return Err(SlamError::invalid("sampling ratio must be in (0, 1]"));
    }
    let w = intrinsics.width;
    let h = intrinsics.height;
    let n = (ratio * (w * h) as f64).round() as usize;
    build_samples_with_count(frame, intrinsics, n, detector, use_features, rng)
}

/// Same as [`build_keyframe_samples`] but with an explicit pixel count
/// (used for the per-frame tracking budget).
pub fn build_samples_with_count<T: Real>(
    frame: &Frame,
    intrinsics: &CameraIntrinsics,
    n: usize,
    detector: &FeatureDetectorConfig,
    use_features: bool,
    rng: &mut impl Rng,
) -> Result<PixelSampleSet<T>> {
    let w = intrinsics.width;
    let h = intrinsics.height;
    let n = n.min(w * h);

    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut feature_flags = Vec::with_capacity(n);
    let mut used = std::collections::HashSet::with_capacity(n);

    if use_features {
        let gray = frame.grayscale();
        let feature_cap = ((n as f64) * FEATURE_BUDGET_FRACTION).floor() as usize;
        let det_cfg = FeatureDetectorConfig {
            max_corners: feature_cap.min(detector.max_corners),
            ..*detector
        };
        for c in detect_features(&gray, w, h, &det_cfg) {
            if used.insert((c.x, c.y)) {
                xs.push(c.x);
                ys.push(c.y);
                feature_flags.push(true);
            }
        }
        let remaining = n - xs.len();
        // Uniform pass over the whole image, skipping already-chosen pixels.
        let mut uni = uniform_grid_sample(w, h, (remaining + xs.len()).min(w * h), rng)?;
        uni.retain(|p| !used.contains(p));
        uni.truncate(remaining);
        let mut have = xs.len() + uni.len();
        for (x, y) in &uni {
            used.insert((*x, *y));
            xs.push(*x);
            ys.push(*y);
            feature_flags.push(false);
        }
        // Top up if the overlap removal left us short.
        while have < n {
            let x = rng.random_range(0..w) as u32;
            let y = rng.random_range(0..h) as u32;
            if used.insert((x, y)) {
                xs.push(x);
                ys.push(y);
                feature_flags.push(false);
                have += 1;
            }
        }
    } else {
        // Ablation path: plain random pixels, no stratification, no features.
        while xs.len() < n {
            let x = rng.random_range(0..w) as u32;
            let y = rng.random_range(0..h) as u32;
            if used.insert((x, y)) {
                xs.push(x);
                ys.push(y);
                feature_flags.push(false);
            }
        }
    }

    let mut dirs = Vec::with_capacity(xs.len());
    let mut colors = Vec::with_capacity(xs.len());
    let mut depths = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let (x, y) = (xs[i] as usize, ys[i] as usize);
        let dir = intrinsics.pixel_dir::<T>(xs[i] as f64, ys[i] as f64);
        dirs.push(dir);
        let c = frame.color_at(x, y);
        colors.push([T::of(c[0] as f64), T::of(c[1] as f64), T::of(c[2] as f64)]);
        depths.push(T::of(frame.depth_at(x, y) as f64));
    }

    Ok(PixelSampleSet {
        frame_id: frame.id,
        xs,
        ys,
        dirs,
        colors,
        depths,
        is_feature: feature_flags,
    })
}

/// Projects cached camera-frame samples to world rays with the given pose.
/// Ground-truth payloads are copied bit-exactly.
pub fn to_world<T: Real>(set: &PixelSampleSet<T>, pose: &PoseParam<T>) -> RayBatch<T> {
    to_world_subset(set, pose, None)
}

/// `to_world` over an index subset (used to draw per-iteration allocations
/// from a keyframe's cache).
pub fn to_world_subset<T: Real>(
    set: &PixelSampleSet<T>,
    pose: &PoseParam<T>,
    indices: Option<&[usize]>,
) -> RayBatch<T> {
    let pick = |i: usize| Ray {
        origin: pose.translation,
        dir: pose.rotation.rotate(set.dirs[i]),
        cam_dir: set.dirs[i],
        color: set.colors[i],
        depth: set.depths[i],
        is_feature: set.is_feature[i],
        keyframe: set.frame_id,
    };
    let rays = match indices {
        Some(idx) => idx.iter().map(|&i| pick(i)).collect(),
        None => (0..set.len()).map(pick).collect(),
    };
    RayBatch { rays }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{vec, Quat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker(width: usize, height: usize, cell: usize) -> Vec<f32> {
        let mut img = vec![0.0f32; width * height];
        for y in 0..height {
            for x in 0..width {
                if ((x / cell) + (y / cell)) % 2 == 0 {
                    img[y * width + x] = 1.0;
                }
            }
        }
        img
    }

    #[test]
    fn constant_image_has_no_corners() {
        let img = vec![0.5f32; 32 * 32];
        let corners = detect_features(&img, 32, 32, &FeatureDetectorConfig::default());
        assert!(corners.is_empty());
    }

    #[test]
    fn white_square_yields_four_corners() {
        let mut img = vec![0.0f32; 32 * 32];
        for y in 12..20 {
            for x in 12..20 {
                img[y * 32 + x] = 1.0;
            }
        }
        let cfg = FeatureDetectorConfig {
            max_corners: 16,
            quality_level: 0.2,
            min_distance: 4.0,
            window_radius: 1,
        };
        let corners = detect_features(&img, 32, 32, &cfg);
        assert_eq!(corners.len(), 4, "{corners:?}");
        let expected = [(12, 12), (19, 12), (12, 19), (19, 19)];
        for (ex, ey) in expected {
            let near = corners.iter().any(|c| {
                (c.x as i32 - ex as i32).abs() <= 1 && (c.y as i32 - ey as i32).abs() <= 1
            });
            assert!(near, "no corner within 1 px of ({ex},{ey}): {corners:?}");
        }
    }

    /// Brute-force structure-tensor oracle: every reported corner must carry
    /// (nearly) the response the straightforward computation gives, and the
    /// interior-corner count of a checkerboard must match the oracle's.
    #[test]
    fn checkerboard_interior_corners_match_oracle() {
        let (w, h, cell) = (32, 32, 8);
        let img = checker(w, h, cell);
        let cfg = FeatureDetectorConfig {
            max_corners: 64,
            quality_level: 0.3,
            min_distance: 3.0,
            window_radius: 1,
        };
        let corners = detect_features(&img, w, h, &cfg);
        // Interior lattice crossings of a 4x4-cell board: 3x3.
        let expected: Vec<(usize, usize)> = (1..4)
            .flat_map(|j| (1..4).map(move |i| (i * cell, j * cell)))
            .collect();
        for (ex, ey) in &expected {
            let near = corners.iter().any(|c| {
                (c.x as i32 - *ex as i32).abs() <= 1 && (c.y as i32 - *ey as i32).abs() <= 1
            });
            assert!(near, "missing interior corner ({ex},{ey}): {corners:?}");
        }
        assert_eq!(corners.len(), expected.len(), "{corners:?}");
    }

    #[test]
    fn quadrant_occupancy_for_four_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks = uniform_grid_sample(10, 10, 4, &mut rng).unwrap();
        assert_eq!(picks.len(), 4);
        let mut quads = [0; 4];
        for (x, y) in picks {
            quads[((y >= 5) as usize) * 2 + (x >= 5) as usize] += 1;
        }
        assert_eq!(quads, [1, 1, 1, 1]);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let a = uniform_grid_sample(64, 48, 100, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = uniform_grid_sample(64, 48, 100, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(uniform_grid_sample(4, 4, 17, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn chi_square_uniformity_over_supercells() {
        let (w, h, n) = (640, 480, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let picks = uniform_grid_sample(w, h, n, &mut rng).unwrap();
        // 16 super-cells (4x4); expected n/16 per cell.
        let mut counts = [0.0f64; 16];
        for (x, y) in picks {
            let cx = (x as usize * 4 / w).min(3);
            let cy = (y as usize * 4 / h).min(3);
            counts[cy * 4 + cx] += 1.0;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 15 dof, p > 0.01 requires chi2 < 30.58.
        assert!(chi2 < 30.58, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn to_world_identity_and_rotation() {
        let set = PixelSampleSet::<f64> {
            frame_id: 3,
            xs: vec![0, 1],
            ys: vec![0, 0],
            dirs: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            colors: vec![[0.25, 0.5, 0.75], [1.0, 0.0, 0.5]],
            depths: vec![2.0, 0.0],
            is_feature: vec![true, false],
        };
        let id = PoseParam::identity();
        let batch = to_world(&set, &id);
        assert_eq!(batch.rays[0].dir, [1.0, 0.0, 0.0]);
        assert_eq!(batch.rays[0].origin, [0.0; 3]);
        assert_eq!(batch.rays[0].color, [0.25, 0.5, 0.75]);
        assert_eq!(batch.rays[1].depth, 0.0);
        assert!(batch.rays[0].is_feature && !batch.rays[1].is_feature);
        assert_eq!(batch.rays[0].keyframe, 3);

        let rot = PoseParam::new(
            Quat::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2),
            [1.0, 2.0, 3.0],
        );
        let batch = to_world(&set, &rot);
        assert!((batch.rays[0].dir[0]).abs() < 1e-6);
        assert!((batch.rays[0].dir[1] - 1.0).abs() < 1e-6);
        assert_eq!(batch.rays[0].origin, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn to_world_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dirs = Vec::new();
        for _ in 0..100 {
            dirs.push(vec::normalize([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..1.0),
            ]));
        }
        let n = dirs.len();
        let set = PixelSampleSet::<f64> {
            frame_id: 0,
            xs: vec![0; n],
            ys: vec![0; n],
            dirs: dirs.clone(),
            colors: vec![[0.0; 3]; n],
            depths: vec![1.0; n],
            is_feature: vec![false; n],
        };
        let pose = PoseParam::new(
            Quat::from_axis_angle([0.3, -0.5, 0.8], 1.234),
            [0.4, -0.2, 1.7],
        );
        let m = crate::diff::pose_to_matrix(&pose).unwrap();
        let batch = to_world(&set, &pose);
        for (i, ray) in batch.rays.iter().enumerate() {
            for r in 0..3 {
                let oracle: f64 = (0..3).map(|c| m[r][c] * dirs[i][c]).sum();
                assert!((ray.dir[r] - oracle).abs() < 1e-6);
                assert!((ray.origin[r] - pose.translation[r]).abs() < 1e-12);
            }
        }
    }
}
