//! The SLAM loop: keyframe database, pose-geometry-constrained global BA
//! window selection, joint map+pose mapping steps, constant-velocity
//! tracking, and run orchestration.

pub mod concurrent;

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{CameraIntrinsics, Dataset, Frame, Trajectory};
use crate::diff::{forward_backward, AdamConfig, PoseParam, PoseTable, StepConfig};
use crate::error::{Result, SlamError};
use crate::loss::{LossBreakdown, LossWeights};
use crate::map::{Aabb, HashGridConfig, MapModel, OneBlobConfig, DEFAULT_BETA_INIT, DEFAULT_HIDDEN_DIM};
use crate::math::{degrees, vec, Real};
use crate::render::SampleConfig;
use crate::sampling::{
    build_keyframe_samples, build_samples_with_count, to_world, to_world_subset,
    FeatureDetectorConfig, PixelSampleSet,
};

/// A frame whose pose and cached pixel samples persist and participate in
/// mapping. The optimizable pose lives in the run's pose table.
#[derive(Debug, Clone)]
pub struct Keyframe<T> {
    pub frame_id: usize,
    pub timestamp: f64,
    pub insertion_index: usize,
    pub samples: PixelSampleSet<T>,
}

#[derive(Debug, Clone)]
pub struct KeyframeDB<T> {
    pub keyframes: Vec<Keyframe<T>>,
}

impl<T> Default for KeyframeDB<T> {
    fn default() -> Self {
        Self {
            keyframes: Vec::new(),
        }
    }
}

impl<T: Real> KeyframeDB<T> {
    pub fn insert(&mut self, frame_id: usize, timestamp: f64, samples: PixelSampleSet<T>) {
        debug_assert!(!samples.is_empty(), "keyframe sample set must be nonempty");
        self.keyframes.push(Keyframe {
            frame_id,
            timestamp,
            insertion_index: self.keyframes.len(),
            samples,
        });
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn get(&self, frame_id: usize) -> Option<&Keyframe<T>> {
        self.keyframes.iter().find(|k| k.frame_id == frame_id)
    }
}

/// Window selection thresholds. The window size cap derives from the pixel
/// budget: `w_max = pixel_budget / min_pixels_per_kf`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    /// Rays drawn per mapping iteration, split over the window.
    pub pixel_budget: usize,
    pub min_pixels_per_kf: usize,
    /// Parallax-angle cutoff in degrees.
    pub parallax_max_deg: f64,
    /// Loop-candidate camera distance (m).
    pub loop_distance: f64,
    /// Minimum keyframe insertion-index gap for loop candidacy.
    pub loop_min_gap: usize,
    /// Most-recent keyframes always included (bypass the parallax filter).
    pub recent_count: usize,
    /// Oldest surviving keyframes always included.
    pub historical_count: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            pixel_budget: 2000,
            min_pixels_per_kf: 100,
            parallax_max_deg: 60.0,
            loop_distance: 0.64,
            loop_min_gap: 30,
            recent_count: 2,
            historical_count: 1,
        }
    }
}

impl WindowConfig {
    pub fn w_max(&self) -> usize {
        self.pixel_budget / self.min_pixels_per_kf.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_pixels_per_kf == 0 || self.pixel_budget == 0 {
            return Err(SlamError::invalid("pixel budget and floor must be positive"));
        }
        if self.w_max() < self.recent_count + self.historical_count + 1 {
            return Err(SlamError::invalid(
                "w_max must cover recent + historical + 1 keyframes",
            ));
        }
        if !(0.0 < self.parallax_max_deg && self.parallax_max_deg < 180.0) {
            return Err(SlamError::invalid("parallax cutoff must be in (0, 180)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum WindowRole {
    Recent,
    Historical,
    Loop,
    Distance,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct WindowEntry {
    pub keyframe_id: usize,
    pub allocation: usize,
    pub role: WindowRole,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct SlidingWindow {
    pub entries: Vec<WindowEntry>,
}

impl SlidingWindow {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.keyframe_id).collect()
    }

    pub fn check_invariants(&self, cfg: &WindowConfig) -> Result<()> {
        if self.entries.len() > cfg.w_max() {
            return Err(SlamError::invalid("window exceeds w_max"));
        }
        let total: usize = self.entries.iter().map(|e| e.allocation).sum();
        if total != cfg.pixel_budget {
            return Err(SlamError::invalid(format!(
                "allocations sum to {total}, budget is {}",
                cfg.pixel_budget
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.allocation < cfg.min_pixels_per_kf {
                return Err(SlamError::invalid("allocation below per-keyframe floor"));
            }
            if !seen.insert(e.keyframe_id) {
                return Err(SlamError::invalid("duplicate keyframe in window"));
            }
        }
        Ok(())
    }
}

/// Euclidean distance between two camera centers (m).
pub fn camera_distance<T: Real>(a: &PoseParam<T>, b: &PoseParam<T>) -> f64 {
    vec::dist(vec::to_f64(a.translation), vec::to_f64(b.translation))
}

/// Angle between the two cameras' optical axes, degrees in [0, 180].
pub fn parallax_angle<T: Real>(a: &PoseParam<T>, b: &PoseParam<T>) -> f64 {
    let za = vec::to_f64(a.optical_axis());
    let zb = vec::to_f64(b.optical_axis());
    let c = vec::dot(za, zb).clamp(-1.0, 1.0);
    degrees(c.acos())
}

/// Deterministic sliding-window selection from pose geometry alone:
/// parallax-filter, guaranteed recent and historical frames, loop candidates
/// (old and spatially near), then nearest-by-distance fill; pixels allocated
/// evenly with remainders to the earliest entries.
pub fn select_window<T: Real>(
    db: &KeyframeDB<T>,
    poses: &PoseTable<T>,
    current: &PoseParam<T>,
    current_index: usize,
    cfg: &WindowConfig,
) -> Result<SlidingWindow> {
    if db.is_empty() {
        return Err(SlamError::invalid("keyframe database is empty"));
    }
    cfg.validate()?;

    struct Cand {
        frame_id: usize,
        insertion: usize,
        distance: f64,
        parallax: f64,
    }
    let mut cands = Vec::with_capacity(db.len());
    for kf in &db.keyframes {
        let pose = poses
            .pose(kf.frame_id)
            .ok_or_else(|| SlamError::invalid(format!("keyframe {} has no pose", kf.frame_id)))?;
        cands.push(Cand {
            frame_id: kf.frame_id,
            insertion: kf.insertion_index,
            distance: camera_distance(&pose, current),
            parallax: parallax_angle(&pose, current),
        });
    }

    let w_max = cfg.w_max();
    let mut selected: Vec<(usize, WindowRole)> = Vec::new();
    let mut taken = std::collections::HashSet::new();

    // Most recent keyframes bypass the parallax filter.
    let mut by_recency: Vec<&Cand> = cands.iter().collect();
    by_recency.sort_by(|a, b| b.insertion.cmp(&a.insertion));
    for c in by_recency.iter().take(cfg.recent_count) {
        if selected.len() < w_max && taken.insert(c.frame_id) {
            selected.push((c.frame_id, WindowRole::Recent));
        }
    }

    let survivors: Vec<&Cand> = cands
        .iter()
        .filter(|c| c.parallax <= cfg.parallax_max_deg)
        .collect();

    // Oldest surviving keyframes.
    let mut by_age: Vec<&&Cand> = survivors.iter().collect();
    by_age.sort_by(|a, b| a.insertion.cmp(&b.insertion));
    for c in by_age.iter().take(cfg.historical_count) {
        if selected.len() < w_max && taken.insert(c.frame_id) {
            selected.push((c.frame_id, WindowRole::Historical));
        }
    }

    // Loop candidates: old enough and spatially near, nearest first.
    let mut loops: Vec<&&Cand> = survivors
        .iter()
        .filter(|c| {
            current_index.saturating_sub(c.insertion) >= cfg.loop_min_gap
                && c.distance < cfg.loop_distance
        })
        .collect();
    loops.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(a.insertion.cmp(&b.insertion))
    });
    for c in loops {
        if selected.len() >= w_max {
            break;
        }
        if taken.insert(c.frame_id) {
            selected.push((c.frame_id, WindowRole::Loop));
        }
    }

    // Fill by ascending camera distance, ties to the lower insertion index.
    let mut by_distance: Vec<&&Cand> = survivors.iter().collect();
    by_distance.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(a.insertion.cmp(&b.insertion))
    });
    for c in by_distance {
        if selected.len() >= w_max {
            break;
        }
        if taken.insert(c.frame_id) {
            selected.push((c.frame_id, WindowRole::Distance));
        }
    }

    Ok(allocate(selected, cfg))
}

/// Single-keyframe window holding the whole budget (map initialization).
pub fn full_budget_window(frame_id: usize, cfg: &WindowConfig) -> SlidingWindow {
    allocate(vec![(frame_id, WindowRole::Recent)], cfg)
}

fn allocate(selected: Vec<(usize, WindowRole)>, cfg: &WindowConfig) -> SlidingWindow {
    let n = selected.len().max(1);
    let base = cfg.pixel_budget / n;
    let remainder = cfg.pixel_budget - base * n;
    SlidingWindow {
        entries: selected
            .into_iter()
            .enumerate()
            .map(|(i, (keyframe_id, role))| WindowEntry {
                keyframe_id,
                allocation: base + usize::from(i < remainder),
                role,
            })
            .collect(),
    }
}

/// Random window of equal total budget (the BA-strategy ablation): random
/// subset, random order, random allocation with a floor of one pixel.
pub fn random_window<T: Real>(
    db: &KeyframeDB<T>,
    cfg: &WindowConfig,
    rng: &mut impl Rng,
) -> Result<SlidingWindow> {
    if db.is_empty() {
        return Err(SlamError::invalid("keyframe database is empty"));
    }
    let max_size = cfg.w_max().min(db.len());
    let size = rng.random_range(1..=max_size);
    let picks = rand::seq::index::sample(rng, db.len(), size);
    let mut entries: Vec<WindowEntry> = picks
        .iter()
        .map(|i| WindowEntry {
            keyframe_id: db.keyframes[i].frame_id,
            allocation: 1,
            role: WindowRole::Distance,
        })
        .collect();
    // Random order, then scatter the remaining budget uniformly.
    for i in (1..entries.len()).rev() {
        entries.swap(i, rng.random_range(0..=i));
    }
    let mut left = cfg.pixel_budget - entries.len();
    while left > 0 {
        let i = rng.random_range(0..entries.len());
        let add = (left / entries.len()).max(1).min(left);
        entries[i].allocation += add;
        left -= add;
    }
    Ok(SlidingWindow { entries })
}

/// Initial pose guess from a constant-velocity motion model: re-applies the
/// last inter-frame delta; with no second history entry, repeats the last
/// pose.
pub fn constant_velocity_init<T: Real>(
    prev: &PoseParam<T>,
    prev2: Option<&PoseParam<T>>,
) -> PoseParam<T> {
    match prev2 {
        Some(p2) => prev.compose(p2.inverse().compose(*prev)),
        None => *prev,
    }
}

/// One mapping event: `iters` joint optimization steps over the window.
/// All window keyframe poses move except `anchor_frame`. The smoothness term
/// is added when `is_final` marks the run's last mapping event.
#[allow(clippy::too_many_arguments)]
pub fn map_step<T: Real>(
    model: &mut MapModel<T>,
    db: &KeyframeDB<T>,
    poses: &mut PoseTable<T>,
    window: &SlidingWindow,
    iters: usize,
    sample: &SampleConfig,
    weights: &LossWeights,
    adam: &AdamConfig,
    anchor_frame: usize,
    is_final: bool,
    smooth_cells: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LossBreakdown>> {
    if window.entries.is_empty() || window.entries.iter().any(|e| e.allocation == 0) {
        return Err(SlamError::invalid("window needs entries with nonzero allocations"));
    }
    model.set_map_frozen(false);
    for f in poses.frames().collect::<Vec<_>>() {
        poses.set_frozen(f, f == anchor_frame);
    }

    let step_cfg = StepConfig {
        sample: *sample,
        weights: *weights,
        include_smoothness: is_final,
        smooth_cells,
        chunk_size: 256,
    };

    let mut trace = Vec::with_capacity(iters);
    for iter in 0..iters {
        let mut batch = crate::render::RayBatch::default();
        for entry in &window.entries {
            let kf = db
                .get(entry.keyframe_id)
                .ok_or_else(|| SlamError::invalid("window references unknown keyframe"))?;
            let pose = poses
                .pose(kf.frame_id)
                .ok_or_else(|| SlamError::invalid("window keyframe has no pose"))?;
            let n = kf.samples.len();
            let idx: Vec<usize> = if entry.allocation <= n {
                rand::seq::index::sample(rng, n, entry.allocation).into_vec()
            } else {
                // Cache smaller than the allocation: take all, repeat extras.
                let mut all: Vec<usize> = (0..n).collect();
                for _ in n..entry.allocation {
                    all.push(rng.random_range(0..n));
                }
                all
            };
            let sub = to_world_subset(&kf.samples, &pose, Some(&idx));
            batch.rays.extend(sub.rays);
        }
        let (breakdown, _) = forward_backward(&batch, model, poses, &step_cfg, rng)
            .map_err(|e| SlamError::MappingFailed {
                frame: anchor_frame,
                iteration: iter,
                reason: e.to_string(),
            })?;
        model.store.adam_step(adam)?;
        poses.store.adam_step(adam)?;
        trace.push(breakdown);
    }
    Ok(trace)
}

/// Tracking configuration subset.
#[derive(Debug, Clone, Copy)]
pub struct TrackingConfig {
    pub iterations: usize,
    pub pixels: usize,
    pub use_features: bool,
}

/// Optimizes one frame's pose against the frozen map, starting from the
/// constant-velocity guess. Returns the pose with the lowest observed loss.
#[allow(clippy::too_many_arguments)]
pub fn track_frame<T: Real>(
    model: &mut MapModel<T>,
    frame: &Frame,
    intrinsics: &CameraIntrinsics,
    init: PoseParam<T>,
    tracking: &TrackingConfig,
    detector: &FeatureDetectorConfig,
    sample: &SampleConfig,
    weights: &LossWeights,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PoseParam<T>, Vec<LossBreakdown>)> {
    if tracking.iterations == 0 {
        return Ok((init, Vec::new()));
    }
    let set = build_samples_with_count::<T>(
        frame,
        intrinsics,
        tracking.pixels,
        detector,
        tracking.use_features,
        rng,
    )?;

    model.set_map_frozen(true);
    let result = (|| {
        let mut poses = PoseTable::new();
        poses.insert(frame.id, init);
        let step_cfg = StepConfig {
            sample: *sample,
            weights: *weights,
            include_smoothness: false,
            smooth_cells: 0,
            chunk_size: 256,
        };
        let mut best = (f64::INFINITY, init);
        let mut trace = Vec::with_capacity(tracking.iterations);
        for _ in 0..tracking.iterations {
            let pose = poses.pose(frame.id).expect("tracked pose");
            let batch = to_world(&set, &pose);
            let (breakdown, _) = forward_backward(&batch, model, &mut poses, &step_cfg, rng)
                .map_err(|_| SlamError::TrackingFailed {
                    frame: frame.id,
                    fallback: init.to_f64().to_array(),
                })?;
            if breakdown.total < best.0 {
                best = (breakdown.total, pose);
            }
            poses.store.adam_step(adam).map_err(|_| SlamError::TrackingFailed {
                frame: frame.id,
                fallback: init.to_f64().to_array(),
            })?;
            trace.push(breakdown);
        }
        Ok((best.1, trace))
    })();
    model.set_map_frozen(false);
    result
}

/// Full-run configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SlamConfig {
    /// Mapping stride: every `map_every`-th frame becomes a keyframe.
    pub map_every: usize,
    pub mapping_iterations: usize,
    pub first_frame_iterations: usize,
    pub tracking_iterations: usize,
    pub tracking_pixels: usize,
    /// Fraction of pixels cached per keyframe.
    pub keyframe_ratio: f64,
    pub sample: SampleConfig,
    pub weights: LossWeights,
    pub window: WindowConfig,
    pub grid: HashGridConfig,
    pub oneblob: OneBlobConfig,
    pub hidden_dim: usize,
    pub beta_init: f64,
    pub map_lr: f64,
    pub pose_lr: f64,
    pub smooth_cells: usize,
    pub detector: FeatureDetectorConfig,
    /// Feature + stratified-uniform pixel sampling (ablation: off = random).
    pub use_feature_sampling: bool,
    /// Constrained window selection (ablation: off = random windows).
    pub use_constrained_window: bool,
    pub seed: u64,
    pub deterministic_interleave: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            map_every: 5,
            mapping_iterations: 10,
            first_frame_iterations: 200,
            tracking_iterations: 10,
            tracking_pixels: 1000,
            keyframe_ratio: 0.05,
            sample: SampleConfig::default(),
            weights: LossWeights::default(),
            window: WindowConfig::default(),
            grid: HashGridConfig {
                levels: 16,
                features_per_level: 2,
                base_resolution: 16,
                finest_resolution: 256,
                table_size_log2: 13,
                bounds: Aabb::new([-2.15, -2.15, -1.65], [2.15, 2.15, 1.65]),
            },
            oneblob: OneBlobConfig::default(),
            hidden_dim: DEFAULT_HIDDEN_DIM,
            beta_init: DEFAULT_BETA_INIT,
            map_lr: 1e-2,
            pose_lr: 1e-3,
            smooth_cells: 6,
            detector: FeatureDetectorConfig::default(),
            use_feature_sampling: true,
            use_constrained_window: true,
            seed: 1,
            deterministic_interleave: true,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.map_every == 0 || self.mapping_iterations == 0 {
            return Err(SlamError::invalid("strides/iterations must be >= 1"));
        }
        if !(0.0 < self.keyframe_ratio && self.keyframe_ratio <= 1.0) {
            return Err(SlamError::invalid("keyframe_ratio must be in (0, 1]"));
        }
        self.sample.validate()?;
        self.weights.validate()?;
        self.window.validate()?;
        self.grid.validate()?;
        self.oneblob.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            map_lr: self.map_lr,
            pose_lr: self.pose_lr,
            ..Default::default()
        }
    }
}

/// One logged optimization iteration.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub frame: usize,
    pub is_mapping: bool,
    pub color: f64,
    pub depth: f64,
    pub free_space: f64,
    pub trunc_tail: f64,
    pub trunc_mid: f64,
    pub total: f64,
}

/// One mapping event's window composition.
#[derive(Debug, Clone, serde::Serialize)]
pub struct WindowEvent {
    pub frame: usize,
    pub window: SlidingWindow,
}

#[derive(Debug, Clone, Default)]
pub struct RunDiagnostics {
    pub losses: Vec<LossRecord>,
    pub windows: Vec<WindowEvent>,
    /// build_keyframe_samples calls per keyframe (one-time-sampling proof).
    pub keyframe_build_counts: HashMap<usize, usize>,
    /// Per-frame wall time, milliseconds.
    pub frame_times_ms: Vec<f64>,
}

pub struct SlamOutput<T: Real> {
    pub trajectory: Trajectory,
    pub model: MapModel<T>,
    pub diagnostics: RunDiagnostics,
}

/// Runs the full pipeline in the deterministic sequential interleave
/// (track each frame; map on every `map_every`-th). Frame 0 seeds the map
/// with a fixed pose (ground truth when available, identity otherwise).
pub fn run_slam<T: Real>(dataset: &Dataset, cfg: &SlamConfig) -> Result<SlamOutput<T>> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.frames.len() < 2 {
        return Err(SlamError::invalid("need at least 2 frames"));
    }
    if cfg.deterministic_interleave {
        run_interleaved(dataset, cfg)
    } else {
        concurrent::run_concurrent(dataset, cfg)
    }
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn initial_pose<T: Real>(dataset: &Dataset) -> PoseParam<T> {
    dataset
        .gt_trajectory
        .as_ref()
        .and_then(|t| t.poses.first())
        .map(|p| PoseParam::of_f64(*p))
        .unwrap_or_else(PoseParam::identity)
}

pub(crate) fn last_mapping_frame(n_frames: usize, map_every: usize) -> usize {
    ((n_frames - 1) / map_every) * map_every
}

fn run_interleaved<T: Real>(dataset: &Dataset, cfg: &SlamConfig) -> Result<SlamOutput<T>> {
    let mut rng_model = derived_rng(cfg.seed, 0);
    let mut rng_kf = derived_rng(cfg.seed, 1);
    let mut rng_track = derived_rng(cfg.seed, 2);
    let mut rng_map = derived_rng(cfg.seed, 3);

    let mut model = MapModel::<T>::new(
        cfg.grid,
        cfg.oneblob,
        cfg.hidden_dim,
        cfg.beta_init,
        &mut rng_model,
    )?;
    let mut db = KeyframeDB::<T>::default();
    let mut poses = PoseTable::<T>::new();
    let mut diag = RunDiagnostics::default();
    let adam = cfg.adam();
    let tracking = TrackingConfig {
        iterations: cfg.tracking_iterations,
        pixels: cfg.tracking_pixels,
        use_features: cfg.use_feature_sampling,
    };
    let last_map_frame = last_mapping_frame(dataset.frames.len(), cfg.map_every);

    // Per-frame pose estimates (world-from-camera).
    let mut estimates: Vec<PoseParam<T>> = Vec::with_capacity(dataset.frames.len());
    let mut step_counter = 0usize;

    let record = |diag: &mut RunDiagnostics,
                      step: &mut usize,
                      frame: usize,
                      mapping: bool,
                      b: &LossBreakdown| {
        diag.losses.push(LossRecord {
            step: *step,
            frame,
            is_mapping: mapping,
            color: b.color,
            depth: b.depth,
            free_space: b.free_space,
            trunc_tail: b.trunc_tail,
            trunc_mid: b.trunc_mid,
            total: b.total,
        });
        *step += 1;
    };

    for (i, frame) in dataset.frames.iter().enumerate() {
        let t0 = Instant::now();
        if i == 0 {
            let pose0 = initial_pose::<T>(dataset);
            estimates.push(pose0);
            let samples = build_keyframe_samples::<T>(
                frame,
                &dataset.intrinsics,
                cfg.keyframe_ratio,
                &cfg.detector,
                cfg.use_feature_sampling,
                &mut rng_kf,
            )?;
            *diag.keyframe_build_counts.entry(frame.id).or_default() += 1;
            db.insert(frame.id, frame.timestamp, samples);
            poses.insert(frame.id, pose0);
            // Map initialization on the anchor keyframe alone.
            let window = full_budget_window(frame.id, &cfg.window);
            let trace = map_step(
                &mut model,
                &db,
                &mut poses,
                &window,
                cfg.first_frame_iterations,
                &cfg.sample,
                &cfg.weights,
                &adam,
                frame.id,
                last_map_frame == 0,
                cfg.smooth_cells,
                &mut rng_map,
            )?;
            for b in &trace {
                record(&mut diag, &mut step_counter, i, true, b);
            }
            diag.windows.push(WindowEvent {
                frame: i,
                window,
            });
            diag.frame_times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            continue;
        }

        // Track every frame.
        let init = if i >= 2 {
            constant_velocity_init(&estimates[i - 1], Some(&estimates[i - 2]))
        } else {
            constant_velocity_init(&estimates[i - 1], None)
        };
        let (pose, trace) = track_frame(
            &mut model,
            frame,
            &dataset.intrinsics,
            init,
            &tracking,
            &cfg.detector,
            &cfg.sample,
            &cfg.weights,
            &adam,
            &mut rng_track,
        )?;
        for b in &trace {
            record(&mut diag, &mut step_counter, i, false, b);
        }
        estimates.push(pose);

        // Map on keyframe frames.
        if i % cfg.map_every == 0 {
            let samples = build_keyframe_samples::<T>(
                frame,
                &dataset.intrinsics,
                cfg.keyframe_ratio,
                &cfg.detector,
                cfg.use_feature_sampling,
                &mut rng_kf,
            )?;
            *diag.keyframe_build_counts.entry(frame.id).or_default() += 1;
            db.insert(frame.id, frame.timestamp, samples);
            poses.insert(frame.id, pose);
            let window = if cfg.use_constrained_window {
                select_window(&db, &poses, &pose, db.len() - 1, &cfg.window)?
            } else {
                random_window(&db, &cfg.window, &mut rng_map)?
            };
            window.check_invariants(&cfg.window).or_else(|e| {
                if cfg.use_constrained_window {
                    Err(e)
                } else {
                    Ok(()) // random windows only keep the budget-sum invariant
                }
            })?;
            let trace = map_step(
                &mut model,
                &db,
                &mut poses,
                &window,
                cfg.mapping_iterations,
                &cfg.sample,
                &cfg.weights,
                &adam,
                dataset.frames[0].id,
                i == last_map_frame,
                cfg.smooth_cells,
                &mut rng_map,
            )?;
            for b in &trace {
                record(&mut diag, &mut step_counter, i, true, b);
            }
            // Mapping refined this keyframe's pose; adopt it.
            if let Some(p) = poses.pose(frame.id) {
                estimates[i] = p;
            }
            diag.windows.push(WindowEvent { frame: i, window });
        }
        diag.frame_times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }

    // Final trajectory: optimized poses for keyframes, tracked elsewhere.
    let mut trajectory = Trajectory::default();
    for (i, frame) in dataset.frames.iter().enumerate() {
        let pose = poses
            .pose(frame.id)
            .unwrap_or(estimates[i])
            .to_f64();
        trajectory.push(frame.timestamp, pose);
    }

    Ok(SlamOutput {
        trajectory,
        model,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;

    // Rotation about y swings the optical axis by the given angle.
    fn pose_at(t: [f64; 3], yaw_deg: f64) -> PoseParam<f64> {
        PoseParam::new(
            Quat::from_axis_angle([0.0, 1.0, 0.0], yaw_deg.to_radians()),
            t,
        )
    }

    #[test]
    fn camera_distance_basics() {
        let a = pose_at([0.0; 3], 0.0);
        let b = pose_at([3.0, 4.0, 0.0], 0.0);
        assert_eq!(camera_distance(&a, &a), 0.0);
        assert!((camera_distance(&a, &b) - 5.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = pose_at(
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ],
                rng.random_range(-90.0..90.0),
            );
            let q = pose_at(
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ],
                rng.random_range(-90.0..90.0),
            );
            let oracle = vec::norm(vec::sub(p.translation, q.translation));
            assert!((camera_distance(&p, &q) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn parallax_angle_cases() {
        let a = pose_at([0.0; 3], 0.0);
        assert!(parallax_angle(&a, &a) < 1e-9);
        let opposed = pose_at([1.0, 0.0, 0.0], 180.0);
        assert!((parallax_angle(&a, &opposed) - 180.0).abs() < 1e-6);
        let ninety = pose_at([0.0; 3], 90.0);
        assert!((parallax_angle(&a, &ninety) - 90.0).abs() < 1e-6);
    }

    fn dummy_samples(frame_id: usize) -> PixelSampleSet<f64> {
        PixelSampleSet {
            frame_id,
            xs: vec![0],
            ys: vec![0],
            dirs: vec![[0.0, 0.0, 1.0]],
            colors: vec![[0.5; 3]],
            depths: vec![1.0],
            is_feature: vec![false],
        }
    }

    #[test]
    fn window_selection_worked_example() {
        // A(d=0.05, r=10deg, idx 3), B(0.1, 170, idx 10), C(0.5, 20, idx 50),
        // D(2.0, 30, idx 2); current idx 52; w_max=3, r_max=90, k_recent=1,
        // n_hist=0, gap>=20, d_loop=1.0 -> {C, A, D}.
        let mut db = KeyframeDB::<f64>::default();
        let mut poses = PoseTable::<f64>::new();
        let current = pose_at([0.0; 3], 0.0);

        // Distances are along x; parallax via yaw.
        let spec = [
            (100usize, 0.05, 10.0, 3usize), // A: frame_id 100
            (101, 0.1, 170.0, 10),          // B
            (102, 0.5, 20.0, 50),           // C
            (103, 2.0, 30.0, 2),            // D
        ];
        // Insert in insertion-index order: D(2), A(3), B(10), C(50).
        let mut ordered = spec;
        ordered.sort_by_key(|s| s.3);
        for (frame_id, d, r, _) in ordered {
            db.insert(frame_id, 0.0, dummy_samples(frame_id));
            poses.insert(frame_id, pose_at([d, 0.0, 0.0], r));
        }
        // Patch insertion indices to the scenario's values.
        for kf in db.keyframes.iter_mut() {
            kf.insertion_index = spec.iter().find(|s| s.0 == kf.frame_id).unwrap().3;
        }

        let cfg = WindowConfig {
            pixel_budget: 300,
            min_pixels_per_kf: 100,
            parallax_max_deg: 90.0,
            loop_distance: 1.0,
            loop_min_gap: 20,
            recent_count: 1,
            historical_count: 0,
        };
        let w = select_window(&db, &poses, &current, 52, &cfg).unwrap();
        assert_eq!(w.ids(), vec![102, 100, 103], "{w:?}");
        assert_eq!(w.entries[0].role, WindowRole::Recent);
        assert_eq!(w.entries[1].role, WindowRole::Loop);
        assert_eq!(w.entries[2].role, WindowRole::Distance);
    }

    #[test]
    fn single_keyframe_gets_full_budget() {
        let mut db = KeyframeDB::<f64>::default();
        let mut poses = PoseTable::<f64>::new();
        db.insert(0, 0.0, dummy_samples(0));
        poses.insert(0, pose_at([0.0; 3], 0.0));
        let cfg = WindowConfig::default();
        let w = select_window(&db, &poses, &pose_at([0.0; 3], 0.0), 0, &cfg).unwrap();
        assert_eq!(w.entries.len(), 1);
        assert_eq!(w.entries[0].allocation, cfg.pixel_budget);
        w.check_invariants(&cfg).unwrap();
    }

    #[test]
    fn even_split_with_remainder() {
        let cfg = WindowConfig {
            pixel_budget: 4000,
            min_pixels_per_kf: 100,
            ..Default::default()
        };
        let w = allocate(
            vec![
                (0, WindowRole::Recent),
                (1, WindowRole::Loop),
                (2, WindowRole::Distance),
            ],
            &cfg,
        );
        let allocs: Vec<usize> = w.entries.iter().map(|e| e.allocation).collect();
        assert_eq!(allocs, vec![1334, 1333, 1333]);
        w.check_invariants(&cfg).unwrap();
    }

    #[test]
    fn empty_db_is_error() {
        let db = KeyframeDB::<f64>::default();
        let poses = PoseTable::<f64>::new();
        assert!(select_window(&db, &poses, &pose_at([0.0; 3], 0.0), 0, &WindowConfig::default())
            .is_err());
    }

    #[test]
    fn constant_velocity_composition() {
        // Zero velocity.
        let p = pose_at([1.0, 2.0, 3.0], 20.0);
        let guess = constant_velocity_init(&p, Some(&p));
        assert!(vec::dist(guess.translation, p.translation) < 1e-12);
        assert!(guess.rotation.angle_to(p.rotation) < 1e-9);

        // Pure +0.1 m x steps.
        let p2 = pose_at([0.0; 3], 0.0);
        let p1 = pose_at([0.1, 0.0, 0.0], 0.0);
        let guess = constant_velocity_init(&p1, Some(&p2));
        assert!((guess.translation[0] - 0.2).abs() < 1e-12);

        // 5 deg/frame yaw against a quaternion-composition oracle.
        let p2 = pose_at([0.0; 3], 10.0);
        let p1 = pose_at([0.0; 3], 15.0);
        let guess = constant_velocity_init(&p1, Some(&p2));
        let oracle = pose_at([0.0; 3], 20.0);
        assert!(guess.rotation.angle_to(oracle.rotation).to_degrees() < 1e-6);

        // Second frame: no history.
        let guess = constant_velocity_init(&p1, None);
        assert!(guess.rotation.angle_to(p1.rotation) < 1e-12);
    }

    #[test]
    fn random_window_keeps_budget() {
        let mut db = KeyframeDB::<f64>::default();
        for i in 0..10 {
            db.insert(i, 0.0, dummy_samples(i));
        }
        let cfg = WindowConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let w = random_window(&db, &cfg, &mut rng).unwrap();
            let total: usize = w.entries.iter().map(|e| e.allocation).sum();
            assert_eq!(total, cfg.pixel_budget);
            assert!(w.entries.len() <= cfg.w_max());
        }
    }

    #[test]
    fn last_mapping_frame_stride() {
        assert_eq!(last_mapping_frame(20, 5), 15);
        assert_eq!(last_mapping_frame(21, 5), 20);
        assert_eq!(last_mapping_frame(2, 5), 0);
    }
}
