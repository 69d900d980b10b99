//! Command-line entry point: synthetic dataset generation, SLAM runs, mesh
//! extraction, evaluation, gradient verification, and the ablation grid.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tsdf_slam::config::RunConfig;
use tsdf_slam::dataset::{read_trajectory, synth, tum};
use tsdf_slam::diff::finite_diff_check;
use tsdf_slam::driver;
use tsdf_slam::error::SlamError;
use tsdf_slam::eval;
use tsdf_slam::map::checkpoint;

#[derive(Parser)]
#[command(
    name = "tsdf-slam",
    about = "Dense RGB-D SLAM over a hash-grid TSDF map",
    after_help = "Configuration keys (key = value, sectioned; also --set key=value):"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-D dataset and export it in the TUM layout.
    Synth {
        /// Configuration file; omitted = defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write the analytic ground-truth mesh (PLY, 1 cm voxels).
        #[arg(long)]
        mesh: bool,
        /// Override configuration keys (key=value, repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
        /// Print the configuration schema and exit.
        #[arg(long)]
        explain: bool,
    },
    /// Run the full SLAM pipeline and write all run artifacts.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for trajectory, checkpoint, logs, metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Extract a mesh from a checkpoint: marching cubes + frustum culling.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trajectory for culling; omit to skip culling.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Voxel size in meters.
        #[arg(long, default_value_t = 0.02)]
        voxel: f64,
        #[arg(long)]
        out: PathBuf,
        /// Intrinsics for culling come from the config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Trajectory metrics (and mesh metrics when meshes are given).
    Eval {
        /// Estimated trajectory (TUM format).
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth trajectory (TUM format).
        #[arg(long)]
        gt: PathBuf,
        /// Predicted mesh (PLY) for accuracy/completion.
        #[arg(long)]
        pred_mesh: Option<PathBuf>,
        /// Ground-truth mesh (PLY).
        #[arg(long)]
        gt_mesh: Option<PathBuf>,
        /// Distance threshold for the completion ratio (m).
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Write metrics.csv and loop_diagnostic.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Restrict to one group: grid, sdf_decoder, color_decoder, beta, poses.
        #[arg(long)]
        scope: Option<String>,
    },
    /// Run the 2x2 sampling/window ablation grid and emit the comparison CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seeds to average over.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long = "set")]
        set: Vec<String>,
    },
}

enum CliError {
    Usage(String),
    Pipeline(String),
}

impl From<SlamError> for CliError {
    fn from(e: SlamError) -> Self {
        CliError::Pipeline(e.to_string())
    }
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_synth(
    config: Option<PathBuf>,
    out: PathBuf,
    mesh: bool,
    set: Vec<String>,
    explain: bool,
) -> Result<(), CliError> {
    if explain {
        print!("{}", RunConfig::describe_schema());
        return Ok(());
    }
    let cfg = load_config(&config, &set)?;
    let mut scene = cfg.scene();
    if mesh {
        scene.gt_mesh_voxel = 0.01;
    }
    let intrinsics = cfg.intrinsics();
    let (ds, stats) = synth::gen_synth(&scene, &intrinsics)?;
    tum::save_tum(&ds, &out)?;
    if let Some(m) = &ds.gt_mesh {
        eval::ply::write_ply(m, &out.join("gt_mesh.ply"))?;
    }
    // Ship a ready-to-run configuration next to the data.
    let mut run_cfg = cfg.clone();
    run_cfg
        .set("dataset.type", "tum")
        .and_then(|_| run_cfg.set("dataset.path", out.to_str().unwrap_or(".")))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(out.join("run.cfg"), run_cfg.to_text())
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let scene_json = serde_json::to_string_pretty(&scene)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    std::fs::write(out.join("scene.json"), scene_json)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    println!(
        "wrote {} frames to {} ({} unconverged rays)",
        ds.frames.len(),
        out.display(),
        stats.invalid_rays
    );
    Ok(())
}

fn cmd_run(config: Option<PathBuf>, out: PathBuf, set: Vec<String>) -> Result<(), CliError> {
    let cfg = load_config(&config, &set)?;
    let dataset = driver::dataset_from_config(&cfg)?;
    let summary = driver::run_to_dir(&cfg, &dataset, &out)?;
    println!("run complete in {:.1}s", summary.wall_seconds);
    if let (Some(rmse), Some(mean)) = (summary.ate_rmse_cm, summary.ate_mean_cm) {
        println!("ATE RMSE {rmse:.3} cm, ATE mean {mean:.3} cm");
    }
    if let Some(d) = summary.depth_l1_cm {
        println!("Depth L1 {d:.3} cm");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_mesh(
    checkpoint_path: PathBuf,
    trajectory: Option<PathBuf>,
    voxel: f64,
    out: PathBuf,
    config: Option<PathBuf>,
    set: Vec<String>,
) -> Result<(), CliError> {
    let cfg = load_config(&config, &set)?;
    let model = checkpoint::load::<f32>(&checkpoint_path)?;
    let traj = trajectory.map(|p| read_trajectory(&p)).transpose()?;
    let intrinsics = cfg.intrinsics();
    driver::mesh_to_ply(
        &model,
        voxel,
        traj.as_ref().map(|t| (t, &intrinsics)),
        &out,
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(
    est: PathBuf,
    gt: PathBuf,
    pred_mesh: Option<PathBuf>,
    gt_mesh: Option<PathBuf>,
    threshold: f64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let est_traj = read_trajectory(&est)?;
    let gt_traj = read_trajectory(&gt)?;
    let m = eval::ate(&est_traj, &gt_traj)?;
    println!("ate_rmse  {: >10.4} cm", m.ate_rmse_cm);
    println!("ate_mean  {: >10.4} cm", m.ate_mean_cm);
    let mut rows: Vec<(&str, f64, &str)> = vec![
        ("ate_rmse", m.ate_rmse_cm, "cm"),
        ("ate_mean", m.ate_mean_cm, "cm"),
    ];
    let mesh_metrics = match (&pred_mesh, &gt_mesh) {
        (Some(p), Some(g)) => {
            let pred = eval::ply::read_ply(p)?;
            let gtm = eval::ply::read_ply(g)?;
            let (acc, comp, ratio) = eval::mesh::acc_comp(&pred, &gtm, threshold, 200_000, 0)?;
            println!("accuracy  {: >10.4} cm", acc * 100.0);
            println!("completion{: >10.4} cm", comp * 100.0);
            println!("comp_ratio{: >10.2} %", ratio);
            Some((acc * 100.0, comp * 100.0, ratio))
        }
        (None, None) => None,
        _ => {
            return Err(CliError::Usage(
                "mesh metrics need both --pred-mesh and --gt-mesh".into(),
            ))
        }
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Pipeline(e.to_string()))?;
        if let Some((acc, comp, ratio)) = mesh_metrics {
            rows.push(("accuracy", acc, "cm"));
            rows.push(("completion", comp, "cm"));
            rows.push(("completion_ratio", ratio, "%"));
        }
        eval::write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        let series = eval::rotation_error_series(&est_traj, &gt_traj)?;
        eval::write_rotation_series_csv(&dir.join("loop_diagnostic.csv"), &series)?;
        println!("wrote metrics to {}", dir.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, scope: Option<String>) -> Result<(), CliError> {
    let report = finite_diff_check(scope.as_deref(), seed, instances)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Pipeline("gradient check failed".into()))
    }
}

fn cmd_ablate(
    config: Option<PathBuf>,
    out: PathBuf,
    seeds: String,
    set: Vec<String>,
) -> Result<(), CliError> {
    let cfg = load_config(&config, &set)?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad seed '{s}'")))
        })
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("need at least one seed".into()));
    }
    let dataset = driver::dataset_from_config(&cfg)?;
    let rows = driver::run_ablation(&cfg, &dataset, &seeds)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Pipeline(e.to_string()))?;
    driver::write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    println!("fus,eba,ate_rmse_mean,ate_rmse_std");
    for r in &rows {
        println!(
            "{},{},{:.4},{:.4}",
            r.fus, r.eba, r.ate_rmse_mean, r.ate_rmse_std
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            config,
            out,
            mesh,
            set,
            explain,
        } => cmd_synth(config, out, mesh, set, explain),
        Command::Run { config, out, set } => cmd_run(config, out, set),
        Command::Mesh {
            checkpoint,
            trajectory,
            voxel,
            out,
            config,
            set,
        } => cmd_mesh(checkpoint, trajectory, voxel, out, config, set),
        Command::Eval {
            est,
            gt,
            pred_mesh,
            gt_mesh,
            threshold,
            out,
        } => cmd_eval(est, gt, pred_mesh, gt_mesh, threshold, out),
        Command::Gradcheck {
            seed,
            instances,
            scope,
        } => cmd_gradcheck(seed, instances, scope),
        Command::Ablate {
            config,
            out,
            seeds,
            set,
        } => cmd_ablate(config, out, seeds, set),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Pipeline(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
