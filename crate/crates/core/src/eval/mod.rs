//! Trajectory and reconstruction metrics, mesh extraction plumbing, and
//! exporters.

pub mod mc_tables;
pub mod mesh;
pub mod ply;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::dataset::{tum::associate, CameraIntrinsics, Dataset, Trajectory};
use crate::diff::PoseParam;
use crate::error::{Result, SlamError};
use crate::math::{degrees, vec, Quat};
use crate::render::{render_rays, Field, Ray, RayBatch, SampleConfig};
use crate::Real;

#[derive(Debug, Clone)]
pub struct TrajectoryMetrics {
    pub ate_rmse_cm: f64,
    pub ate_mean_cm: f64,
    /// Per matched frame, translation error in cm.
    pub translation_errors_cm: Vec<f64>,
    /// Per matched frame, rotation error in degrees.
    pub rotation_errors_deg: Vec<f64>,
    /// Frame indices (into the estimated trajectory) of the matched pairs.
    pub matched_frames: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct MeshMetrics {
    pub depth_l1_cm: f64,
    pub accuracy_cm: f64,
    pub completion_cm: f64,
    pub completion_ratio_pct: f64,
}

/// Rigid transform (R, t) minimizing sum ||R * est_i + t - gt_i||^2, no scale.
/// Requires at least three non-collinear correspondences.
pub fn align_umeyama(est: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<([[f64; 3]; 3], [f64; 3])> {
    if est.len() != gt.len() {
        return Err(SlamError::invalid("correspondence lists differ in length"));
    }
    if est.len() < 3 {
        return Err(SlamError::DegenerateGeometry(format!(
            "alignment needs >= 3 poses, got {}",
            est.len()
        )));
    }
    let (r, t, s1) = kabsch(est, gt);
    if s1 < 1e-12 {
        return Err(SlamError::DegenerateGeometry(
            "pose positions are collinear".into(),
        ));
    }
    Ok((r, t))
}

/// SVD-based least-squares rigid alignment; also returns the second singular
/// value of the covariance (zero when the points are collinear).
fn kabsch(est: &[[f64; 3]], gt: &[[f64; 3]]) -> ([[f64; 3]; 3], [f64; 3], f64) {
    let n = est.len() as f64;
    let mut mu_e = [0.0; 3];
    let mut mu_g = [0.0; 3];
    for i in 0..est.len() {
        for k in 0..3 {
            mu_e[k] += est[i][k] / n;
            mu_g[k] += gt[i][k] / n;
        }
    }
    let mut h = Matrix3::<f64>::zeros();
    for i in 0..est.len() {
        let e = vec::sub(est[i], mu_e);
        let g = vec::sub(gt[i], mu_g);
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += g[r] * e[c] / n;
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let d = (u * vt).determinant();
    let sign = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d.signum()));
    let r_mat = u * sign * vt;
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = r_mat[(i, j)];
        }
    }
    let rt = [
        r[0][0] * mu_e[0] + r[0][1] * mu_e[1] + r[0][2] * mu_e[2],
        r[1][0] * mu_e[0] + r[1][1] * mu_e[1] + r[1][2] * mu_e[2],
        r[2][0] * mu_e[0] + r[2][1] * mu_e[1] + r[2][2] * mu_e[2],
    ];
    let t = vec::sub(mu_g, rt);
    (r, t, svd.singular_values[1])
}

fn apply(r: &[[f64; 3]; 3], t: &[f64; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
    ]
}

/// Best rigid alignment for the cases `align_umeyama` rejects: one pose
/// (translate onto) and two poses (midpoints plus segment rotation).
fn align_small(est: &[[f64; 3]], gt: &[[f64; 3]]) -> ([[f64; 3]; 3], [f64; 3]) {
    let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    match est.len() {
        1 => (identity, vec::sub(gt[0], est[0])),
        _ => {
            let de = vec::sub(est[1], est[0]);
            let dg = vec::sub(gt[1], gt[0]);
            let (ne, ng) = (vec::norm(de), vec::norm(dg));
            let r = if ne < 1e-12 || ng < 1e-12 {
                identity
            } else {
                let a = vec::scale(de, 1.0 / ne);
                let b = vec::scale(dg, 1.0 / ng);
                let axis = vec::cross(a, b);
                let s = vec::norm(axis);
                let c = vec::dot(a, b);
                if s < 1e-12 {
                    if c > 0.0 {
                        identity
                    } else {
                        // Opposite directions: any perpendicular axis.
                        let perp = if a[0].abs() < 0.9 {
                            vec::normalize(vec::cross(a, [1.0, 0.0, 0.0]))
                        } else {
                            vec::normalize(vec::cross(a, [0.0, 1.0, 0.0]))
                        };
                        Quat::from_axis_angle(perp, std::f64::consts::PI).to_matrix()
                    }
                } else {
                    Quat::from_axis_angle(axis, s.atan2(c)).to_matrix()
                }
            };
            let me = vec::scale(vec::add(est[0], est[1]), 0.5);
            let mg = vec::scale(vec::add(gt[0], gt[1]), 0.5);
            let rme = apply(&r, &[0.0; 3], me);
            (r, vec::sub(mg, rme))
        }
    }
}

/// Absolute trajectory error after rigid alignment. Trajectories are matched
/// by nearest timestamp (0.02 s); errors are reported in cm and degrees.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<TrajectoryMetrics> {
    let pairs = associate(&est.stamps, &gt.stamps, 0.02);
    if pairs.is_empty() {
        return Err(SlamError::invalid(
            "no overlapping timestamps between trajectories",
        ));
    }
    let est_pos: Vec<[f64; 3]> = pairs.iter().map(|&(i, _)| est.poses[i].translation).collect();
    let gt_pos: Vec<[f64; 3]> = pairs.iter().map(|&(_, j)| gt.poses[j].translation).collect();
    let (r, t) = if est_pos.len() >= 3 {
        match align_umeyama(&est_pos, &gt_pos) {
            Ok(rt) => rt,
            Err(SlamError::DegenerateGeometry(_)) => align_small(&est_pos[..2], &gt_pos[..2]),
            Err(e) => return Err(e),
        }
    } else {
        align_small(&est_pos, &gt_pos)
    };

    let rq = Quat::from_matrix(&r);
    let mut trans_err = Vec::with_capacity(pairs.len());
    let mut rot_err = Vec::with_capacity(pairs.len());
    let mut matched = Vec::with_capacity(pairs.len());
    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let e = vec::dist(apply(&r, &t, est.poses[i].translation), gt.poses[j].translation);
        sq_sum += e * e;
        abs_sum += e;
        trans_err.push(e * 100.0);
        let aligned_rot = rq.mul(est.poses[i].rotation.normalized());
        rot_err.push(degrees(aligned_rot.angle_to(gt.poses[j].rotation)));
        matched.push(i);
        let _ = k;
    }
    let n = pairs.len() as f64;
    Ok(TrajectoryMetrics {
        ate_rmse_cm: (sq_sum / n).sqrt() * 100.0,
        ate_mean_cm: abs_sum / n * 100.0,
        translation_errors_cm: trans_err,
        rotation_errors_deg: rot_err,
        matched_frames: matched,
    })
}

/// Per-frame rotation discrepancy series (degrees) after rigid alignment —
/// the loop-closure diagnostic.
pub fn rotation_error_series(est: &Trajectory, gt: &Trajectory) -> Result<Vec<(usize, f64)>> {
    let m = ate(est, gt)?;
    Ok(m.matched_frames
        .iter()
        .copied()
        .zip(m.rotation_errors_deg.iter().copied())
        .collect())
}

/// Mean absolute depth error (cm) of the field rendered at the estimated
/// poses against every stride-th frame's valid ground-truth depth. Rendering
/// uses dense uniform sampling (no depth guidance).
pub fn depth_l1<T: Real, F: Field<T>>(
    field: &F,
    poses: &[PoseParam<f64>],
    dataset: &Dataset,
    stride: usize,
    n_uniform: usize,
    far: f64,
) -> Result<f64> {
    if poses.len() != dataset.frames.len() {
        return Err(SlamError::invalid(format!(
            "{} poses for {} frames",
            poses.len(),
            dataset.frames.len()
        )));
    }
    let stride = stride.max(1);
    let cfg = SampleConfig {
        n_uniform,
        n_depth: 0,
        depth_radius: 0.1,
        near: 0.05,
        far,
    };
    let k = &dataset.intrinsics;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (fi, frame) in dataset.frames.iter().enumerate().step_by(stride) {
        let pose = PoseParam::<T>::of_f64(poses[fi]);
        let mut rays = Vec::new();
        for y in 0..k.height {
            for x in 0..k.width {
                let d = frame.depth_at(x, y);
                if d <= 0.0 {
                    continue;
                }
                let cam_dir = k.pixel_dir::<T>(x as f64, y as f64);
                rays.push(Ray {
                    origin: pose.translation,
                    dir: pose.rotation.rotate(cam_dir),
                    cam_dir,
                    color: [T::zero(); 3],
                    depth: T::of(d as f64),
                    is_feature: false,
                    keyframe: fi,
                });
            }
        }
        // Chunked rendering keeps the per-sample tables bounded.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xD1CE ^ fi as u64);
        for chunk in rays.chunks(8192) {
            let batch = RayBatch {
                rays: chunk.to_vec(),
            };
            let out = render_rays(field, &batch, &cfg, &mut rng)?;
            for (i, ray) in chunk.iter().enumerate() {
                sum += (out.depths[i] - ray.depth).abs().to_f64();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(SlamError::invalid("no valid depth pixels to evaluate"));
    }
    Ok(sum / count as f64 * 100.0)
}

/// Mesh of the learned map's TSDF zero level set, with vertex colors queried
/// from the color decoder.
pub fn model_mesh<T: Real>(
    model: &crate::map::MapModel<T>,
    voxel: f64,
) -> Result<mesh::TriangleMesh> {
    let bounds = model.grid_cfg.bounds;
    let f = |p: [f64; 3]| -> f64 {
        let mut scratch = Field::<T>::make_scratch(model);
        match model.sample(&mut scratch, [T::of(p[0]), T::of(p[1]), T::of(p[2])]) {
            Some((s, _)) => s.to_f64(),
            None => 1.0,
        }
    };
    let mut m = mesh::marching_cubes_field(&f, &bounds, voxel);
    let colors: Vec<[u8; 3]> = m
        .vertices
        .par_iter()
        .map_init(
            || Field::<T>::make_scratch(model),
            |scratch, &v| {
                match model.sample(scratch, [T::of(v[0]), T::of(v[1]), T::of(v[2])]) {
                    Some((_, c)) => [
                        (c[0].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[1].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[2].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8,
                    ],
                    None => [128; 3],
                }
            },
        )
        .collect();
    m.colors = Some(colors);
    Ok(m)
}

/// Writes a `metric,value,unit` CSV report.
pub fn write_metrics_csv(path: &std::path::Path, rows: &[(&str, f64, &str)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,value,unit")?;
    for (name, value, unit) in rows {
        writeln!(f, "{name},{value:.6},{unit}")?;
    }
    Ok(())
}

/// Writes the per-frame rotation-discrepancy series CSV.
pub fn write_rotation_series_csv(path: &std::path::Path, series: &[(usize, f64)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "frame,rotation_error_deg")?;
    for (frame, err) in series {
        writeln!(f, "{frame},{err:.6}")?;
    }
    Ok(())
}

/// Intrinsics of a camera list for culling (shared by CLI paths).
pub fn cull_with_trajectory(
    m: &mesh::TriangleMesh,
    traj: &Trajectory,
    intrinsics: &CameraIntrinsics,
) -> Result<mesh::TriangleMesh> {
    mesh::cull_mesh(m, &traj.poses, intrinsics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rigid(rng: &mut ChaCha8Rng) -> ([[f64; 3]; 3], [f64; 3]) {
        let q = Quat::from_axis_angle(
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            rng.random_range(-3.0..3.0),
        );
        (
            q.to_matrix(),
            [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ],
        )
    }

    fn toy_trajectory(n: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Trajectory::default();
        for i in 0..n {
            let q = Quat::from_axis_angle(
                [rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0)],
                rng.random_range(-1.0..1.0),
            );
            t.push(
                i as f64 * 0.1,
                PoseParam::new(
                    q,
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ],
                ),
            );
        }
        t
    }

    #[test]
    fn identity_alignment() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.4, 0.9]];
        let (r, t) = align_umeyama(&pts, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j] - expect).abs() < 1e-12);
            }
            assert!(t[i].abs() < 1e-12);
        }
    }

    #[test]
    fn exact_rigid_recovery() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 0.7, 1.3]];
        let q = Quat::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let rot = q.to_matrix();
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|&p| vec::add(apply(&rot, &[0.0; 3], p), [5.0, 0.0, 0.0]))
            .collect();
        let (r, t) = align_umeyama(&moved, &pts).unwrap();
        let mut residual = 0.0;
        for (m, p) in moved.iter().zip(&pts) {
            residual += vec::dist(apply(&r, &t, *m), *p).powi(2);
        }
        assert!(residual < 1e-18, "residual {residual}");
    }

    #[test]
    fn alignment_beats_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt: Vec<[f64; 3]> = (0..20)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        // Noisy rigid copy.
        let (r0, t0) = random_rigid(&mut rng);
        let est: Vec<[f64; 3]> = gt
            .iter()
            .map(|&p| {
                let q = apply(&r0, &t0, p);
                [
                    q[0] + rng.random_range(-0.01..0.01),
                    q[1] + rng.random_range(-0.01..0.01),
                    q[2] + rng.random_range(-0.01..0.01),
                ]
            })
            .collect();
        let (r, t) = align_umeyama(&est, &gt).unwrap();
        let resid = |r: &[[f64; 3]; 3], t: &[f64; 3]| -> f64 {
            est.iter()
                .zip(&gt)
                .map(|(e, g)| vec::dist(apply(r, t, *e), *g).powi(2))
                .sum()
        };
        let best = resid(&r, &t);
        for _ in 0..1000 {
            let (rr, tt) = random_rigid(&mut rng);
            assert!(resid(&rr, &tt) >= best - 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let two = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(matches!(
            align_umeyama(&two, &two),
            Err(SlamError::DegenerateGeometry(_))
        ));
        let collinear: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(matches!(
            align_umeyama(&collinear, &collinear),
            Err(SlamError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn ate_identity_and_gauge_invariance() {
        let traj = toy_trajectory(12, 3);
        let m = ate(&traj, &traj).unwrap();
        assert!(m.ate_rmse_cm < 1e-9 && m.ate_mean_cm < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = ate(&traj, &traj).unwrap().ate_rmse_cm;
        for _ in 0..50 {
            let (r, t) = random_rigid(&mut rng);
            let mut moved = traj.clone();
            for p in moved.poses.iter_mut() {
                p.translation = apply(&r, &t, p.translation);
                p.rotation = Quat::from_matrix(&r).mul(p.rotation);
            }
            let m = ate(&moved, &traj).unwrap();
            assert!((m.ate_rmse_cm - base).abs() < 1e-9, "rmse {}", m.ate_rmse_cm);
        }
    }

    #[test]
    fn two_pose_fixture_matches_hand_computation() {
        // est segment length 2, gt segment length 4: optimal alignment leaves
        // each endpoint 1 m short, so rmse = mean = 100 cm.
        let mut est = Trajectory::default();
        est.push(0.0, PoseParam::new(Quat::identity(), [-1.0, 0.0, 0.0]));
        est.push(0.1, PoseParam::new(Quat::identity(), [1.0, 0.0, 0.0]));
        let mut gt = Trajectory::default();
        gt.push(0.0, PoseParam::new(Quat::identity(), [0.0, -2.0, 0.0]));
        gt.push(0.1, PoseParam::new(Quat::identity(), [0.0, 2.0, 0.0]));
        let m = ate(&est, &gt).unwrap();
        assert!((m.ate_rmse_cm - 100.0).abs() < 1e-9, "rmse {}", m.ate_rmse_cm);
        assert!((m.ate_mean_cm - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_series_zero_and_single_yaw() {
        let traj = toy_trajectory(6, 9);
        let series = rotation_error_series(&traj, &traj).unwrap();
        assert_eq!(series.len(), 6);
        for (_, e) in &series {
            assert!(*e < 1e-6);
        }

        // Identity positions, one pose yawed 5 degrees.
        let mut est = Trajectory::default();
        let mut gt = Trajectory::default();
        for i in 0..4 {
            let p = [i as f64, (i * i) as f64 * 0.1, 0.3 * i as f64];
            let yaw = if i == 2 { 5.0f64.to_radians() } else { 0.0 };
            est.push(
                i as f64,
                PoseParam::new(Quat::from_axis_angle([0.0, 0.0, 1.0], yaw), p),
            );
            gt.push(i as f64, PoseParam::new(Quat::identity(), p));
        }
        let series = rotation_error_series(&est, &gt).unwrap();
        assert!((series[2].1 - 5.0).abs() < 1e-6, "{:?}", series);
        assert!(series[0].1 < 1e-6);
    }
}
