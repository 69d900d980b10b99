//! Finite-difference verification of every analytic gradient path.
//!
//! Builds small random instances in f64 (tiny grid, 8-wide decoders, a few
//! rays over two poses), runs the joint forward/backward pass, and compares
//! every parameter-group gradient against central differences of the full
//! pipeline — including the camera-frame-to-world ray transform, so the pose
//! chain is exercised end to end.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::graph::{forward_backward, StepConfig};
use crate::diff::pose::PoseParam;
use crate::diff::PoseTable;
use crate::error::Result;
use crate::loss::LossWeights;
use crate::map::{Aabb, HashGridConfig, MapModel, OneBlobConfig};
use crate::math::{vec, Quat};
use crate::render::{Ray, RayBatch, SampleConfig};

/// Pass threshold: relative error, with an absolute floor below which a
/// deviation counts as zero.
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub evals: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub instances: usize,
    pub elapsed_secs: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < REL_TOL)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>14} {:>10}", "group", "max_rel_err", "evals")?;
        for g in &self.groups {
            writeln!(f, "{:<16} {:>14.3e} {:>10}", g.name, g.max_rel_err, g.evals)?;
        }
        writeln!(
            f,
            "instances: {}   elapsed: {:.2}s   verdict: {}",
            self.instances,
            self.elapsed_secs,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

struct Instance {
    model: MapModel<f64>,
    poses: PoseTable<f64>,
    cam_rays: Vec<(usize, [f64; 3], [f64; 3], f64, bool)>, // (frame, cam_dir, color, depth, feature)
    cfg: StepConfig,
    rng_seed: u64,
}

fn build_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid_cfg = HashGridConfig {
        levels: 2,
        features_per_level: 2,
        base_resolution: 4,
        finest_resolution: 6,
        table_size_log2: 6,
        bounds: Aabb::new([-1.5; 3], [1.5; 3]),
    };
    let oneblob = OneBlobConfig {
        bins_per_axis: 4,
        kernel_sigma: 0.25,
    };
    let mut model =
        MapModel::<f64>::new(grid_cfg, oneblob, 8, 5.0, &mut rng).expect("valid tiny config");
    model.store.values_mut(model.gid_beta)[0] = rng.random_range(2.0..6.0);
    // Give the grid features useful magnitude so position gradients are alive.
    for v in model.store.values_mut(model.gid_grid).iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }

    let mut poses = PoseTable::new();
    for frame in 0..2usize {
        let axis = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let q = Quat::from_axis_angle(axis, rng.random_range(-0.3..0.3));
        let t = [
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        ];
        poses.insert(frame, PoseParam::new(q, t));
    }

    let mut cam_rays = Vec::new();
    for i in 0..4usize {
        let frame = i % 2;
        let cam_dir = vec::normalize([
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            1.0,
        ]);
        let color = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        // One invalid-depth ray keeps that branch under test.
        let depth = if i == 3 { 0.0 } else { rng.random_range(0.5..1.0) };
        cam_rays.push((frame, cam_dir, color, depth, i % 2 == 0));
    }

    let cfg = StepConfig {
        sample: SampleConfig {
            n_uniform: 4,
            n_depth: 2,
            depth_radius: 0.15,
            near: 0.05,
            far: 1.2,
        },
        weights: LossWeights {
            smooth: 1e-3,
            ..Default::default()
        },
        include_smoothness: true,
        smooth_cells: 2,
        chunk_size: 2,
    };
    Instance {
        model,
        poses,
        cam_rays,
        cfg,
        rng_seed: seed ^ 0xD1F7_35C9,
    }
}

fn make_batch(inst: &Instance, poses: &PoseTable<f64>) -> RayBatch<f64> {
    let rays = inst
        .cam_rays
        .iter()
        .map(|&(frame, cam_dir, color, depth, feature)| {
            let pose = poses.pose(frame).expect("pose");
            Ray {
                origin: pose.translation,
                dir: pose.rotation.rotate(cam_dir),
                cam_dir,
                color,
                depth,
                is_feature: feature,
                keyframe: frame,
            }
        })
        .collect();
    RayBatch { rays }
}

fn eval_total(inst: &Instance, model: &MapModel<f64>, poses: &PoseTable<f64>) -> Result<f64> {
    let mut model = model.clone();
    let mut poses = poses.clone();
    let batch = make_batch(inst, &poses);
    let mut rng = ChaCha8Rng::seed_from_u64(inst.rng_seed);
    let (breakdown, _) = forward_backward(&batch, &mut model, &mut poses, &inst.cfg, &mut rng)?;
    Ok(breakdown.total)
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff < ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(fd.abs())
    }
}

/// Runs the verification over `instances` random instances. `scope` filters
/// the reported groups by name (`grid`, `sdf_decoder`, `color_decoder`,
/// `beta`, `poses`); `None` checks everything.
pub fn finite_diff_check(
    scope: Option<&str>,
    seed: u64,
    instances: usize,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut rows: Vec<GroupReport> = ["grid", "sdf_decoder", "color_decoder", "beta", "poses"]
        .iter()
        .filter(|n| scope.map_or(true, |s| s == **n))
        .map(|n| GroupReport {
            name: n.to_string(),
            max_rel_err: 0.0,
            evals: 0,
        })
        .collect();

    for k in 0..instances {
        let inst = build_instance(seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut model = inst.model.clone();
        let mut poses = inst.poses.clone();
        let batch = make_batch(&inst, &poses);
        let mut rng = ChaCha8Rng::seed_from_u64(inst.rng_seed);
        forward_backward(&batch, &mut model, &mut poses, &inst.cfg, &mut rng)?;

        let h = 1e-6;
        // Map groups.
        let map_groups = [
            ("grid", inst.model.gid_grid),
            ("sdf_decoder", inst.model.gid_sdf),
            ("color_decoder", inst.model.gid_color),
            ("beta", inst.model.gid_beta),
        ];
        for (name, gid) in map_groups {
            let Some(row) = rows.iter_mut().find(|r| r.name == name) else {
                continue;
            };
            if inst.model.store.group(gid).frozen {
                // Frozen contract: stored gradient is exactly zero.
                for &g in model.store.grad(gid) {
                    row.max_rel_err = row.max_rel_err.max(if g == 0.0 { 0.0 } else { 1.0 });
                }
                continue;
            }
            let n = inst.model.store.values(gid).len();
            for i in 0..n {
                let mut mp = inst.model.clone();
                mp.store.values_mut(gid)[i] += h;
                let mut mm = inst.model.clone();
                mm.store.values_mut(gid)[i] -= h;
                let fp = eval_total(&inst, &mp, &inst.poses)?;
                let fm = eval_total(&inst, &mm, &inst.poses)?;
                let fd = (fp - fm) / (2.0 * h);
                let analytic = model.store.grad(gid)[i];
                row.max_rel_err = row.max_rel_err.max(rel_err(analytic, fd));
                row.evals += 2;
            }
        }
        // Pose groups, aggregated.
        if let Some(row) = rows.iter_mut().find(|r| r.name == "poses") {
            for (slot, group) in inst.poses.store.groups() {
                if group.frozen {
                    for &g in poses.store.grad(slot) {
                        row.max_rel_err = row.max_rel_err.max(if g == 0.0 { 0.0 } else { 1.0 });
                    }
                    continue;
                }
                for i in 0..7 {
                    let mut pp = inst.poses.clone();
                    pp.store.values_mut(slot)[i] += h;
                    let mut pm = inst.poses.clone();
                    pm.store.values_mut(slot)[i] -= h;
                    let fp = eval_total(&inst, &inst.model, &pp)?;
                    let fm = eval_total(&inst, &inst.model, &pm)?;
                    let fd = (fp - fm) / (2.0 * h);
                    let analytic = poses.store.grad(slot)[i];
                    row.max_rel_err = row.max_rel_err.max(rel_err(analytic, fd));
                    row.evals += 2;
                }
            }
        }
    }

    Ok(GradCheckReport {
        groups: rows,
        instances,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
