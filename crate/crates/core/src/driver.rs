//! High-level run orchestration shared by the CLI and the C API: dataset
//! acquisition from a configuration, full runs with artifact export, and the
//! sampling/window ablation grid.

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::synth::gen_synth;
use crate::dataset::{tum, write_trajectory, Dataset};
use crate::error::{Result, SlamError};
use crate::eval::{self, rotation_error_series};
use crate::map::checkpoint;
use crate::render::Field;
use crate::slam::{run_slam, SlamConfig, SlamOutput};
use crate::Real;

/// Builds the dataset a configuration names: an in-memory synthetic render or
/// a TUM-layout directory.
pub fn dataset_from_config(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.get("dataset.type") {
        "synth" => {
            let scene = cfg.scene();
            let (ds, _) = gen_synth(&scene, &cfg.intrinsics())?;
            Ok(ds)
        }
        "tum" => {
            let path = cfg.get("dataset.path");
            if path.is_empty() {
                return Err(SlamError::invalid("dataset.path required for dataset.type = tum"));
            }
            tum::load_tum(Path::new(path), cfg.intrinsics())
        }
        other => Err(SlamError::invalid(format!(
            "dataset.type must be synth or tum, got '{other}'"
        ))),
    }
}

/// Metric summary of one completed run.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct RunSummary {
    pub ate_rmse_cm: Option<f64>,
    pub ate_mean_cm: Option<f64>,
    pub depth_l1_cm: Option<f64>,
    pub wall_seconds: f64,
}

/// Runs SLAM per the configuration and writes every run artifact into
/// `out_dir`: trajectory, checkpoint, run-log CSV, window diagnostics
/// JSON-lines, the loop diagnostic CSV, and a metrics CSV when ground truth
/// exists.
pub fn run_to_dir(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir)?;
    let slam_cfg = cfg.slam_config()?;
    let started = std::time::Instant::now();
    let output = run_slam::<f32>(dataset, &slam_cfg)?;
    let mut summary = RunSummary {
        wall_seconds: started.elapsed().as_secs_f64(),
        ..Default::default()
    };

    write_trajectory(&out_dir.join("trajectory.txt"), &output.trajectory)?;
    checkpoint::save(&output.model, &out_dir.join("map.ckpt"))?;
    write_run_log(&out_dir.join("run_log.csv"), &output)?;
    write_window_log(&out_dir.join("diagnostics.jsonl"), &output)?;

    if let Some(gt) = &dataset.gt_trajectory {
        let metrics = eval::ate(&output.trajectory, gt)?;
        summary.ate_rmse_cm = Some(metrics.ate_rmse_cm);
        summary.ate_mean_cm = Some(metrics.ate_mean_cm);
        let series = rotation_error_series(&output.trajectory, gt)?;
        eval::write_rotation_series_csv(&out_dir.join("loop_diagnostic.csv"), &series)?;

        let depth = eval::depth_l1(
            &output.model,
            &output.trajectory.poses,
            dataset,
            cfg.get_usize("eval.depth_stride"),
            cfg.get_usize("eval.n_uniform"),
            slam_cfg.sample.far,
        )?;
        summary.depth_l1_cm = Some(depth);
        eval::write_metrics_csv(
            &out_dir.join("metrics.csv"),
            &[
                ("ate_rmse", metrics.ate_rmse_cm, "cm"),
                ("ate_mean", metrics.ate_mean_cm, "cm"),
                ("depth_l1", depth, "cm"),
                ("wall_time", summary.wall_seconds, "s"),
            ],
        )?;
    }
    Ok(summary)
}

fn write_run_log<T: Real>(path: &Path, output: &SlamOutput<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,L_c,L_d,L_fs,L_t,L_m,total")?;
    for r in &output.diagnostics.losses {
        writeln!(
            f,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.step, r.color, r.depth, r.free_space, r.trunc_tail, r.trunc_mid, r.total
        )?;
    }
    Ok(())
}

fn write_window_log<T: Real>(path: &Path, output: &SlamOutput<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for event in &output.diagnostics.windows {
        let line = serde_json::to_string(event)
            .map_err(|e| SlamError::format(format!("diagnostics serialization: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// One ablation variant's aggregate result.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub fus: bool,
    pub eba: bool,
    pub ate_rmse_mean: f64,
    pub ate_rmse_std: f64,
    pub per_seed_cm: Vec<f64>,
}

/// Runs the 2x2 {feature+uniform sampling, constrained window} grid over
/// `seeds` seeds and reports mean/std ATE RMSE per variant.
pub fn run_ablation(cfg: &RunConfig, dataset: &Dataset, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let gt = dataset
        .gt_trajectory
        .as_ref()
        .ok_or_else(|| SlamError::invalid("ablation needs ground truth"))?;
    let base = cfg.slam_config()?;
    let mut rows = Vec::new();
    for (fus, eba) in [(true, true), (true, false), (false, true), (false, false)] {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let variant = SlamConfig {
                use_feature_sampling: fus,
                use_constrained_window: eba,
                seed,
                ..base.clone()
            };
            let out = run_slam::<f32>(dataset, &variant)?;
            per_seed.push(eval::ate(&out.trajectory, gt)?.ate_rmse_cm);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let var = per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
            / per_seed.len() as f64;
        rows.push(AblationRow {
            fus,
            eba,
            ate_rmse_mean: mean,
            ate_rmse_std: var.sqrt(),
            per_seed_cm: per_seed,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "fus,eba,ate_rmse_mean,ate_rmse_std")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.6},{:.6}",
            r.fus, r.eba, r.ate_rmse_mean, r.ate_rmse_std
        )?;
    }
    Ok(())
}

/// Extracts the model mesh at `voxel`, optionally culls it with the
/// trajectory, and writes a PLY.
pub fn mesh_to_ply(
    model: &crate::map::MapModel<f32>,
    voxel: f64,
    trajectory: Option<(&crate::dataset::Trajectory, &crate::dataset::CameraIntrinsics)>,
    out: &Path,
) -> Result<()> {
    let mut mesh = eval::model_mesh(model, voxel)?;
    if let Some((traj, k)) = trajectory {
        mesh = eval::cull_with_trajectory(&mesh, traj, k)?;
    }
    eval::ply::write_ply(&mesh, out)
}

/// Renders a short per-ray sample-table dump for debugging.
pub fn debug_ray_dump<T: Real, F: Field<T>>(
    field: &F,
    batch: &crate::render::RayBatch<T>,
    cfg: &crate::render::SampleConfig,
    seed: u64,
) -> Result<String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let out = crate::render::render_rays(field, batch, cfg, &mut rng)?;
    let mut s = String::new();
    for r in 0..out.ray_count() {
        s.push_str(&format!(
            "ray {r}: depth {:.4} color ({:.3},{:.3},{:.3})\n",
            out.depths[r].to_f64(),
            out.colors[r][0].to_f64(),
            out.colors[r][1].to_f64(),
            out.colors[r][2].to_f64()
        ));
        s.push_str("  z        sdf      sigma    weight\n");
        for k in out.sample_range(r) {
            s.push_str(&format!(
                "  {:<8.4} {:<8.4} {:<8.4} {:<8.5}\n",
                out.z[k].to_f64(),
                out.sdf[k].to_f64(),
                out.sigma[k].to_f64(),
                out.weight[k].to_f64()
            ));
        }
    }
    Ok(s)
}
