//! Synthetic RGB-D scene generator with analytic SDF ground truth.
//!
//! A room shell plus sphere/box primitives, a deterministic position-based
//! texture (smooth tri-band color with a painted checker band on one wall so
//! the corner detector has work), and a waypoint-loop camera trajectory that
//! revisits its start. Depth is rendered by sphere tracing the analytic SDF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{CameraIntrinsics, Dataset, Frame, Trajectory};
use crate::diff::PoseParam;
use crate::error::{Result, SlamError};
use crate::map::Aabb;
use crate::math::{vec, Quat};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSceneConfig {
    pub room: Aabb,
    /// (center, radius) solids.
    pub spheres: Vec<([f64; 3], f64)>,
    /// (center, half extents) solids.
    pub boxes: Vec<([f64; 3], [f64; 3])>,
    pub color_seed: u64,
    pub frames: usize,
    /// Circuits of the camera loop over the whole sequence; > 1 revisits.
    pub loops: f64,
    /// Camera circle radius around the room center (m).
    pub orbit_radius: f64,
    /// Camera height offset from the room center (m).
    pub cam_height: f64,
    /// Downward pitch of the optical axis (degrees).
    pub pitch_deg: f64,
    pub max_depth: f64,
    /// Gaussian depth noise scale: sigma(d) = depth_noise * d^2. Zero = off.
    pub depth_noise: f64,
    /// Ground-truth mesh voxel size (m); 0 skips mesh generation.
    pub gt_mesh_voxel: f64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            room: Aabb::new([-2.0, -2.0, -1.5], [2.0, 2.0, 1.5]),
            spheres: vec![([1.35, 0.5, -0.45], 0.35), ([-0.9, -1.25, 0.1], 0.3)],
            boxes: vec![
                ([0.2, 1.45, -0.85], [0.5, 0.35, 0.6]),
                ([-1.5, 0.3, -0.3], [0.25, 0.5, 0.5]),
            ],
            color_seed: 17,
            frames: 200,
            loops: 2.0,
            orbit_radius: 1.0,
            cam_height: 0.0,
            pitch_deg: 10.0,
            max_depth: 6.4,
            depth_noise: 0.0,
            gt_mesh_voxel: 0.0,
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        if self.frames < 2 {
            return Err(SlamError::invalid("need at least 2 frames"));
        }
        if self.loops <= 0.0 {
            return Err(SlamError::invalid("loops must be positive"));
        }
        for (c, r) in &self.spheres {
            for a in 0..3 {
                if c[a] - r < self.room.min[a] || c[a] + r > self.room.max[a] {
                    return Err(SlamError::invalid("sphere outside room"));
                }
            }
        }
        for (c, h) in &self.boxes {
            for a in 0..3 {
                if c[a] - h[a] < self.room.min[a] || c[a] + h[a] > self.room.max[a] {
                    return Err(SlamError::invalid("box outside room"));
                }
            }
        }
        Ok(())
    }

    /// Frame index at which the camera first returns to its start waypoint.
    pub fn first_revisit_frame(&self) -> usize {
        ((self.frames as f64 - 1.0) / self.loops).ceil() as usize
    }

    /// Map bounds for SLAM on this scene: the room plus margin for the
    /// truncation band behind walls.
    pub fn map_bounds(&self, margin: f64) -> Aabb {
        self.room.inflated(margin)
    }

    /// Ground-truth camera pose of frame `i` (world-from-camera).
    pub fn camera_pose(&self, i: usize) -> PoseParam<f64> {
        let t = i as f64 / (self.frames as f64 - 1.0);
        let theta = std::f64::consts::TAU * self.loops * t;
        let c = self.room.center();
        let eye = [
            c[0] + self.orbit_radius * theta.cos(),
            c[1] + self.orbit_radius * theta.sin(),
            c[2] + self.cam_height,
        ];
        let pitch = self.pitch_deg.to_radians();
        // Outward-facing optical axis with a downward pitch.
        let forward = vec::normalize([
            theta.cos() * pitch.cos(),
            theta.sin() * pitch.cos(),
            -pitch.sin(),
        ]);
        look_at_pose(eye, forward)
    }
}

/// World-from-camera pose with the given optical axis; image y points toward
/// world -z (camera convention: x right, y down, z forward).
pub fn look_at_pose(eye: [f64; 3], forward: [f64; 3]) -> PoseParam<f64> {
    let z_c = vec::normalize(forward);
    let x_c = vec::normalize(vec::cross([0.0, 0.0, -1.0], z_c));
    let y_c = vec::cross(z_c, x_c);
    let m = [
        [x_c[0], y_c[0], z_c[0]],
        [x_c[1], y_c[1], z_c[1]],
        [x_c[2], y_c[2], z_c[2]],
    ];
    PoseParam::new(Quat::from_matrix(&m), eye)
}

fn sphere_sdf(p: [f64; 3], c: [f64; 3], r: f64) -> f64 {
    vec::dist(p, c) - r
}

fn box_sdf(p: [f64; 3], c: [f64; 3], h: [f64; 3]) -> f64 {
    let q = [
        (p[0] - c[0]).abs() - h[0],
        (p[1] - c[1]).abs() - h[1],
        (p[2] - c[2]).abs() - h[2],
    ];
    let outside = vec::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
    let inside = q[0].max(q[1]).max(q[2]).min(0.0);
    outside + inside
}

/// Exact signed distance to the scene surface: min over the solid primitives
/// and the room shell. Negative inside solids (walls count as solid).
pub fn analytic_sdf(p: [f64; 3], scene: &SynthSceneConfig) -> f64 {
    // The room interior is free space; beyond the walls is solid, so the
    // shell's SDF is the negated room-box SDF.
    let mut d = -box_sdf(
        p,
        scene.room.center(),
        [
            0.5 * (scene.room.max[0] - scene.room.min[0]),
            0.5 * (scene.room.max[1] - scene.room.min[1]),
            0.5 * (scene.room.max[2] - scene.room.min[2]),
        ],
    );
    for (c, r) in &scene.spheres {
        d = d.min(sphere_sdf(p, *c, *r));
    }
    for (c, h) in &scene.boxes {
        d = d.min(box_sdf(p, *c, *h));
    }
    d
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic position-based texture: smooth trigonometric color mix, plus
/// a high-contrast checker band painted on the +x wall.
pub fn scene_color(p: [f64; 3], scene: &SynthSceneConfig) -> [f32; 3] {
    if p[0] > scene.room.max[0] - 5e-3 && p[2].abs() < 0.6 {
        let cell = 0.25;
        let parity = (((p[1] / cell).floor() + (p[2] / cell).floor()) as i64).rem_euclid(2);
        return if parity == 0 {
            [0.92, 0.9, 0.85]
        } else {
            [0.08, 0.1, 0.15]
        };
    }
    let mut state = scene.color_seed;
    let mut c = [0.0f32; 3];
    for (ch, out) in c.iter_mut().enumerate() {
        let phase = (splitmix(&mut state) % 1000) as f64 / 1000.0 * std::f64::consts::TAU;
        let fx = 1.0 + (splitmix(&mut state) % 3) as f64 * 0.5;
        let fy = 1.5 + (splitmix(&mut state) % 3) as f64 * 0.5;
        let fz = 2.0 + (splitmix(&mut state) % 3) as f64 * 0.5;
        let v = 0.5
            + 0.4 * (fx * p[0] + fy * p[1] + fz * p[2] + phase + ch as f64).sin()
                * (0.7 * p[ch % 3] + phase).cos();
        *out = v.clamp(0.05, 0.95) as f32;
    }
    c
}

/// Sphere-traces the analytic SDF along a unit ray; returns the ray depth of
/// the first surface hit within `max_depth`, at 1e-4 m tolerance.
pub fn trace_ray(origin: [f64; 3], dir: [f64; 3], scene: &SynthSceneConfig) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..512 {
        let p = vec::add(origin, vec::scale(dir, t));
        let d = analytic_sdf(p, scene);
        if d < 1e-4 {
            return Some(t);
        }
        t += d;
        if t > scene.max_depth {
            return None;
        }
    }
    None
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SynthStats {
    /// Rays that did not converge to a surface (written as invalid depth).
    pub invalid_rays: usize,
}

/// Renders the full synthetic dataset: per-frame pose from the trajectory
/// spec, sphere-traced depth, position-based color, ground-truth trajectory,
/// and optionally a marching-cubes ground-truth mesh.
pub fn gen_synth(
    scene: &SynthSceneConfig,
    intrinsics: &CameraIntrinsics,
) -> Result<(Dataset, SynthStats)> {
    scene.validate()?;
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);

    // Camera-frame pixel directions, once.
    let mut dirs = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            dirs[y * w + x] = intrinsics.pixel_dir::<f64>(x as f64, y as f64);
        }
    }

    let mut gt = Trajectory::default();
    let mut frames = Vec::with_capacity(scene.frames);
    let mut stats = SynthStats::default();
    for i in 0..scene.frames {
        let pose = scene.camera_pose(i);
        let stamp = i as f64 / 30.0;
        gt.push(stamp, pose);

        let rows: Vec<(Vec<[f32; 3]>, Vec<f32>, usize)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut color_row = Vec::with_capacity(w);
                let mut depth_row = Vec::with_capacity(w);
                let mut invalid = 0usize;
                for x in 0..w {
                    let dir = pose.rotation.rotate(dirs[y * w + x]);
                    match trace_ray(pose.translation, dir, scene) {
                        Some(t) => {
                            let p = vec::add(pose.translation, vec::scale(dir, t));
                            color_row.push(scene_color(p, scene));
                            depth_row.push(t as f32);
                        }
                        None => {
                            color_row.push([0.0; 3]);
                            depth_row.push(0.0);
                            invalid += 1;
                        }
                    }
                }
                (color_row, depth_row, invalid)
            })
            .collect();

        let mut color = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        for (cr, dr, inv) in rows {
            color.extend_from_slice(&cr);
            depth.extend_from_slice(&dr);
            stats.invalid_rays += inv;
        }

        if scene.depth_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.color_seed ^ (i as u64) << 17);
            for d in depth.iter_mut() {
                if *d > 0.0 {
                    let sigma = scene.depth_noise * (*d as f64) * (*d as f64);
                    // Box-Muller from two uniforms.
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *d = (*d as f64 + sigma * g).max(0.0) as f32;
                }
            }
        }

        frames.push(Frame {
            id: i,
            timestamp: stamp,
            width: w,
            height: h,
            color,
            depth,
        });
    }

    let gt_mesh = if scene.gt_mesh_voxel > 0.0 {
        Some(crate::eval::mesh::marching_cubes_field(
            &|p| analytic_sdf(p, scene),
            &scene.room.inflated(2.0 * scene.gt_mesh_voxel),
            scene.gt_mesh_voxel,
        ))
    } else {
        None
    };

    let ds = Dataset {
        intrinsics: *intrinsics,
        frames,
        gt_trajectory: Some(gt),
        gt_mesh,
    };
    ds.validate()?;
    Ok((ds, stats))
}

/// Small default intrinsics for the synthetic scenes (60 degree HFOV).
pub fn default_synth_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    let fx = width as f64 * 0.5 / (30.0f64.to_radians().tan());
    CameraIntrinsics {
        fx,
        fy: fx,
        cx: width as f64 * 0.5,
        cy: height as f64 * 0.5,
        width,
        height,
        depth_scale: 5000.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdf_basics() {
        let scene = SynthSceneConfig {
            spheres: vec![([0.0, 0.0, 0.0], 0.5)],
            boxes: vec![],
            ..Default::default()
        };
        assert!((analytic_sdf([0.0; 3], &scene) + 0.5).abs() < 1e-12);
        assert!((analytic_sdf([1.0, 0.0, 0.0], &scene) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn box_corner_matches_dense_sampling_oracle() {
        let scene = SynthSceneConfig {
            spheres: vec![],
            boxes: vec![([0.0, 0.0, 0.0], [0.4, 0.3, 0.2])],
            ..Default::default()
        };
        // Query near a box corner; oracle = min distance over densely sampled
        // surface points of the box.
        let q = [0.55, 0.42, 0.31];
        let d = analytic_sdf(q, &scene);
        let mut best = f64::INFINITY;
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let u = -0.4 + 0.8 * i as f64 / n as f64;
                let v = -0.3 + 0.6 * j as f64 / n as f64;
                for p in [
                    [u, v, 0.2],
                    [u, v, -0.2],
                    [u, 0.3, -0.2 + 0.4 * (j as f64 / n as f64)],
                    [0.4, v, -0.2 + 0.4 * (i as f64 / n as f64)],
                ] {
                    best = best.min(vec::dist(q, p));
                }
            }
        }
        assert!((d - best).abs() < 1e-4, "sdf {d} vs oracle {best}");
    }

    #[test]
    fn wall_depth_is_distance() {
        // Camera at the center looking straight at the +x wall, 2 m away.
        let scene = SynthSceneConfig {
            spheres: vec![],
            boxes: vec![],
            ..Default::default()
        };
        let t = trace_ray([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], &scene).unwrap();
        assert!((t - 2.0).abs() < 1e-3, "depth {t}");
    }

    #[test]
    fn loop_trajectory_revisits_start() {
        let scene = SynthSceneConfig::default();
        let first = scene.camera_pose(0);
        let last = scene.camera_pose(scene.frames - 1);
        assert!(vec::dist(first.translation, last.translation) < 1e-9);
        let revisit = scene.first_revisit_frame();
        let mid = scene.camera_pose(revisit);
        assert!(vec::dist(first.translation, mid.translation) < 0.05);
    }

    #[test]
    fn generated_depth_matches_bisection_oracle() {
        let scene = SynthSceneConfig {
            frames: 2,
            ..Default::default()
        };
        let k = default_synth_intrinsics(64, 48);
        let (ds, _) = gen_synth(&scene, &k).unwrap();
        let f = &ds.frames[0];
        let pose = ds.gt_trajectory.as_ref().unwrap().poses[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0;
        while checked < 200 {
            let x = rng.random_range(0..k.width);
            let y = rng.random_range(0..k.height);
            let d = f.depth_at(x, y) as f64;
            if d <= 0.0 {
                continue;
            }
            let dir = pose.rotation.rotate(k.pixel_dir::<f64>(x as f64, y as f64));
            // Bisection on the SDF sign change around the reported depth.
            let eval = |t: f64| analytic_sdf(vec::add(pose.translation, vec::scale(dir, t)), &scene);
            let mut lo = (d - 0.05).max(0.0);
            let mut hi = d + 0.05;
            if eval(lo) <= 0.0 || eval(hi) >= 0.0 {
                // Grazing geometry; the sign test is not bracketed. Skip.
                checked += 1;
                continue;
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if eval(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            assert!(
                (root - d).abs() < 1e-3,
                "pixel ({x},{y}): depth {d} vs bisection {root}"
            );
            checked += 1;
        }
    }

    #[test]
    fn backprojection_lands_on_zero_set() {
        let scene = SynthSceneConfig {
            frames: 3,
            ..Default::default()
        };
        let k = default_synth_intrinsics(48, 36);
        let (ds, _) = gen_synth(&scene, &k).unwrap();
        for f in &ds.frames {
            let pose = ds.gt_trajectory.as_ref().unwrap().poses[f.id];
            for y in (0..k.height).step_by(7) {
                for x in (0..k.width).step_by(7) {
                    let d = f.depth_at(x, y) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let dir = pose.rotation.rotate(k.pixel_dir::<f64>(x as f64, y as f64));
                    let p = vec::add(pose.translation, vec::scale(dir, d));
                    let sdf = analytic_sdf(p, &scene);
                    assert!(sdf.abs() < 2e-3, "pixel ({x},{y}): sdf {sdf}");
                }
            }
        }
    }

    #[test]
    fn checkerboard_band_has_contrast() {
        let scene = SynthSceneConfig::default();
        // Two adjacent checker cells on the +x wall.
        let a = scene_color([2.0, 0.1, 0.1], &scene);
        let b = scene_color([2.0, 0.35, 0.1], &scene);
        assert!((a[0] - b[0]).abs() > 0.5);
    }
}
