//! Two-role pipeline: a tracking role that reads versioned map snapshots and
//! a mapping role that owns the map and keyframe poses. The map is published
//! as a complete snapshot after every mapping event; tracking always reads
//! the latest published version, so there are no torn reads. This mode is
//! not bit-reproducible; the sequential interleave is the test target.

use std::sync::mpsc;
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Trajectory};
use crate::diff::{PoseParam, PoseTable};
use crate::error::{Result, SlamError};
use crate::map::MapModel;
use crate::math::Real;
use crate::sampling::{build_keyframe_samples, PixelSampleSet};
use crate::slam::{
    constant_velocity_init, last_mapping_frame, map_step, random_window,
    select_window, track_frame, full_budget_window, KeyframeDB, RunDiagnostics, SlamConfig, SlamOutput,
    TrackingConfig, WindowEvent,
};

pub(crate) struct Snapshot<T: Real> {
    pub version: u64,
    pub model: MapModel<T>,
}

struct KeyframeMsg<T> {
    frame_id: usize,
    frame_index: usize,
    timestamp: f64,
    samples: PixelSampleSet<T>,
    pose: PoseParam<T>,
    is_final: bool,
}

pub fn run_concurrent<T: Real>(dataset: &Dataset, cfg: &SlamConfig) -> Result<SlamOutput<T>> {
    let mut rng_model = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MapModel::<T>::new(
        cfg.grid,
        cfg.oneblob,
        cfg.hidden_dim,
        cfg.beta_init,
        &mut rng_model,
    )?;
    let adam = cfg.adam();
    let last_map_frame = last_mapping_frame(dataset.frames.len(), cfg.map_every);

    // Bootstrap: keyframe 0 with a fixed pose initializes the map before the
    // threads start, so tracking always has a usable snapshot.
    let pose0 = super::initial_pose::<T>(dataset);
    let mut rng_kf = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
    let mut db = KeyframeDB::<T>::default();
    let mut poses = PoseTable::<T>::new();
    let mut diag = RunDiagnostics::default();
    {
        let frame = &dataset.frames[0];
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
        let window = full_budget_window(frame.id, &cfg.window);
        let mut rng_map = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3333);
        map_step(
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
        diag.windows.push(WindowEvent { frame: 0, window });
    }

    let shared: Arc<RwLock<Arc<Snapshot<T>>>> = Arc::new(RwLock::new(Arc::new(Snapshot {
        version: 1,
        model: model.clone(),
    })));
    let (tx, rx) = mpsc::channel::<KeyframeMsg<T>>();
    let anchor_id = dataset.frames[0].id;

    let mapper_shared = Arc::clone(&shared);
    let mapper_cfg = cfg.clone();
    let mapper = std::thread::spawn(move || -> Result<(MapModel<T>, PoseTable<T>, KeyframeDB<T>, Vec<WindowEvent>)> {
        let mut rng_map = ChaCha8Rng::seed_from_u64(mapper_cfg.seed ^ 0x7777);
        let mut windows = Vec::new();
        while let Ok(msg) = rx.recv() {
            db.insert(msg.frame_id, msg.timestamp, msg.samples);
            poses.insert(msg.frame_id, msg.pose);
            let window = if mapper_cfg.use_constrained_window {
                select_window(&db, &poses, &msg.pose, db.len() - 1, &mapper_cfg.window)?
            } else {
                random_window(&db, &mapper_cfg.window, &mut rng_map)?
            };
            map_step(
                &mut model,
                &db,
                &mut poses,
                &window,
                mapper_cfg.mapping_iterations,
                &mapper_cfg.sample,
                &mapper_cfg.weights,
                &adam,
                anchor_id,
                msg.is_final,
                mapper_cfg.smooth_cells,
                &mut rng_map,
            )?;
            windows.push(WindowEvent {
                frame: msg.frame_index,
                window,
            });
            let mut guard = mapper_shared.write().expect("snapshot lock");
            let version = guard.version + 1;
            *guard = Arc::new(Snapshot {
                version,
                model: model.clone(),
            });
        }
        Ok((model, poses, db, windows))
    });

    // Tracking role.
    let tracking = TrackingConfig {
        iterations: cfg.tracking_iterations,
        pixels: cfg.tracking_pixels,
        use_features: cfg.use_feature_sampling,
    };
    let mut rng_track = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1111);
    let mut estimates: Vec<PoseParam<T>> = vec![pose0];
    let mut local_version = 0u64;
    let mut local_model: Option<MapModel<T>> = None;
    let mut track_result: Result<()> = Ok(());

    for (i, frame) in dataset.frames.iter().enumerate().skip(1) {
        {
            let snap = shared.read().expect("snapshot lock").clone();
            if snap.version != local_version || local_model.is_none() {
                local_model = Some(snap.model.clone());
                local_version = snap.version;
            }
        }
        let model_ref = local_model.as_mut().expect("snapshot model");
        let init = if i >= 2 {
            constant_velocity_init(&estimates[i - 1], Some(&estimates[i - 2]))
        } else {
            constant_velocity_init(&estimates[i - 1], None)
        };
        let pose = match track_frame(
            model_ref,
            frame,
            &dataset.intrinsics,
            init,
            &tracking,
            &cfg.detector,
            &cfg.sample,
            &cfg.weights,
            &adam,
            &mut rng_track,
        ) {
            Ok((p, _)) => p,
            Err(e) => {
                track_result = Err(e);
                break;
            }
        };
        estimates.push(pose);

        if i % cfg.map_every == 0 {
            let samples = match build_keyframe_samples::<T>(
                frame,
                &dataset.intrinsics,
                cfg.keyframe_ratio,
                &cfg.detector,
                cfg.use_feature_sampling,
                &mut rng_kf,
            ) {
                Ok(s) => s,
                Err(e) => {
                    track_result = Err(e);
                    break;
                }
            };
            *diag.keyframe_build_counts.entry(frame.id).or_default() += 1;
            let msg = KeyframeMsg {
                frame_id: frame.id,
                frame_index: i,
                timestamp: frame.timestamp,
                samples,
                pose,
                is_final: i == last_map_frame,
            };
            if tx.send(msg).is_err() {
                track_result = Err(SlamError::invalid("mapping role exited early"));
                break;
            }
        }
    }
    drop(tx);
    let (final_model, final_poses, _db, windows) = mapper
        .join()
        .map_err(|_| SlamError::invalid("mapping role panicked"))??;
    track_result?;
    diag.windows.extend(windows);

    let mut trajectory = Trajectory::default();
    for (i, frame) in dataset.frames.iter().enumerate() {
        let pose = final_poses
            .pose(frame.id)
            .or_else(|| estimates.get(i).copied())
            .unwrap_or_else(PoseParam::identity)
            .to_f64();
        trajectory.push(frame.timestamp, pose);
    }

    Ok(SlamOutput {
        trajectory,
        model: final_model,
        diagnostics: diag,
    })
}
