//! Run configuration: a flat `key = value` text format with `[sections]`,
//! validated against a fixed schema. Unknown keys are rejected; every key has
//! a default, so an empty file is a valid full configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dataset::synth::{default_synth_intrinsics, SynthSceneConfig};
use crate::dataset::CameraIntrinsics;
use crate::error::{Result, SlamError};
use crate::loss::LossWeights;
use crate::map::{Aabb, HashGridConfig, OneBlobConfig};
use crate::render::SampleConfig;
use crate::sampling::FeatureDetectorConfig;
use crate::slam::{SlamConfig, WindowConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    /// Comma-separated triple, e.g. `-2.0,-2.0,-1.5`.
    Vec3,
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub unit: &'static str,
    pub help: &'static str,
}

/// The full configuration schema. `auto` defaults are derived from the
/// synthetic scene at build time.
pub const SCHEMA: &[KeySpec] = &[
    KeySpec { key: "dataset.type", kind: Kind::Str, default: "synth", unit: "-", help: "dataset source: synth | tum" },
    KeySpec { key: "dataset.path", kind: Kind::Str, default: "", unit: "-", help: "TUM-layout directory (dataset.type = tum)" },
    KeySpec { key: "dataset.width", kind: Kind::Int, default: "320", unit: "px", help: "image width" },
    KeySpec { key: "dataset.height", kind: Kind::Int, default: "240", unit: "px", help: "image height" },
    KeySpec { key: "dataset.fx", kind: Kind::Float, default: "0", unit: "px", help: "focal length x; 0 derives a 60 degree HFOV" },
    KeySpec { key: "dataset.fy", kind: Kind::Float, default: "0", unit: "px", help: "focal length y; 0 copies fx" },
    KeySpec { key: "dataset.cx", kind: Kind::Float, default: "0", unit: "px", help: "principal point x; 0 = width/2" },
    KeySpec { key: "dataset.cy", kind: Kind::Float, default: "0", unit: "px", help: "principal point y; 0 = height/2" },
    KeySpec { key: "dataset.depth_scale", kind: Kind::Float, default: "5000", unit: "units/m", help: "depth PNG units per meter" },

    KeySpec { key: "scene.frames", kind: Kind::Int, default: "200", unit: "-", help: "synthetic frame count" },
    KeySpec { key: "scene.loops", kind: Kind::Float, default: "2.0", unit: "-", help: "orbit circuits over the sequence (>1 revisits)" },
    KeySpec { key: "scene.orbit_radius", kind: Kind::Float, default: "1.0", unit: "m", help: "camera orbit radius" },
    KeySpec { key: "scene.cam_height", kind: Kind::Float, default: "0.0", unit: "m", help: "camera height offset" },
    KeySpec { key: "scene.pitch_deg", kind: Kind::Float, default: "10.0", unit: "deg", help: "downward camera pitch" },
    KeySpec { key: "scene.color_seed", kind: Kind::Int, default: "17", unit: "-", help: "texture seed" },
    KeySpec { key: "scene.depth_noise", kind: Kind::Float, default: "0.0", unit: "-", help: "depth noise scale: sigma(d) = v * d^2" },
    KeySpec { key: "scene.room_min", kind: Kind::Vec3, default: "-2.0,-2.0,-1.5", unit: "m", help: "room lower corner" },
    KeySpec { key: "scene.room_max", kind: Kind::Vec3, default: "2.0,2.0,1.5", unit: "m", help: "room upper corner" },

    KeySpec { key: "run.seed", kind: Kind::Int, default: "1", unit: "-", help: "master seed for every random stream" },
    KeySpec { key: "run.mode", kind: Kind::Str, default: "interleave", unit: "-", help: "interleave (deterministic) | concurrent" },
    KeySpec { key: "run.map_every", kind: Kind::Int, default: "5", unit: "frames", help: "mapping/keyframe stride" },
    KeySpec { key: "run.mapping_iterations", kind: Kind::Int, default: "10", unit: "-", help: "optimization steps per mapping event" },
    KeySpec { key: "run.first_frame_iterations", kind: Kind::Int, default: "200", unit: "-", help: "map initialization steps on frame 0" },
    KeySpec { key: "run.tracking_iterations", kind: Kind::Int, default: "10", unit: "-", help: "pose steps per tracked frame" },
    KeySpec { key: "run.tracking_pixels", kind: Kind::Int, default: "1000", unit: "px", help: "pixels sampled per tracked frame" },
    KeySpec { key: "run.keyframe_ratio", kind: Kind::Float, default: "0.05", unit: "-", help: "fraction of pixels cached per keyframe" },
    KeySpec { key: "run.use_feature_sampling", kind: Kind::Bool, default: "true", unit: "-", help: "corner + stratified sampling (false = random pixels)" },
    KeySpec { key: "run.use_constrained_window", kind: Kind::Bool, default: "true", unit: "-", help: "constrained window selection (false = random windows)" },

    KeySpec { key: "map.levels", kind: Kind::Int, default: "16", unit: "-", help: "hash grid resolution levels" },
    KeySpec { key: "map.features_per_level", kind: Kind::Int, default: "2", unit: "-", help: "feature width per level" },
    KeySpec { key: "map.base_resolution", kind: Kind::Int, default: "16", unit: "nodes", help: "coarsest lattice nodes per axis" },
    KeySpec { key: "map.finest_resolution", kind: Kind::Int, default: "256", unit: "nodes", help: "finest lattice nodes per axis" },
    KeySpec { key: "map.table_size_log2", kind: Kind::Int, default: "13", unit: "-", help: "log2 of per-level table entries" },
    KeySpec { key: "map.bounds_min", kind: Kind::Vec3, default: "auto", unit: "m", help: "map bounds lower corner; auto = room - 0.15" },
    KeySpec { key: "map.bounds_max", kind: Kind::Vec3, default: "auto", unit: "m", help: "map bounds upper corner; auto = room + 0.15" },
    KeySpec { key: "map.hidden_dim", kind: Kind::Int, default: "32", unit: "-", help: "decoder hidden width" },
    KeySpec { key: "map.beta_init", kind: Kind::Float, default: "10.0", unit: "-", help: "initial density sharpness" },
    KeySpec { key: "map.oneblob_bins", kind: Kind::Int, default: "16", unit: "-", help: "One-blob bins per axis" },
    KeySpec { key: "map.oneblob_sigma", kind: Kind::Float, default: "0.25", unit: "bins", help: "One-blob kernel width (fraction of a bin)" },

    KeySpec { key: "sampling.n_uniform", kind: Kind::Int, default: "32", unit: "-", help: "stratified samples per ray" },
    KeySpec { key: "sampling.n_depth", kind: Kind::Int, default: "11", unit: "-", help: "depth-guided samples per ray" },
    KeySpec { key: "sampling.depth_radius", kind: Kind::Float, default: "0.1", unit: "m", help: "half-width of the depth-guided interval" },
    KeySpec { key: "sampling.near", kind: Kind::Float, default: "0.05", unit: "m", help: "near plane" },
    KeySpec { key: "sampling.far", kind: Kind::Float, default: "0", unit: "m", help: "far plane; 0 = scene-box diagonal" },

    KeySpec { key: "loss.uniform_color", kind: Kind::Float, default: "5.0", unit: "-", help: "color weight, uniform rays" },
    KeySpec { key: "loss.feature_color", kind: Kind::Float, default: "5.0", unit: "-", help: "color weight, feature rays" },
    KeySpec { key: "loss.uniform_depth", kind: Kind::Float, default: "0.1", unit: "-", help: "depth weight, uniform rays" },
    KeySpec { key: "loss.feature_depth", kind: Kind::Float, default: "0.1", unit: "-", help: "depth weight, feature rays" },
    KeySpec { key: "loss.free_space", kind: Kind::Float, default: "10.0", unit: "-", help: "free-space TSDF weight" },
    KeySpec { key: "loss.trunc_mid", kind: Kind::Float, default: "1000.0", unit: "-", help: "middle-band TSDF weight" },
    KeySpec { key: "loss.trunc_tail", kind: Kind::Float, default: "200.0", unit: "-", help: "truncation-tail TSDF weight" },
    KeySpec { key: "loss.smooth", kind: Kind::Float, default: "1e-6", unit: "-", help: "grid smoothness weight (final frame)" },
    KeySpec { key: "loss.truncation", kind: Kind::Float, default: "0.1", unit: "m", help: "TSDF truncation distance" },
    KeySpec { key: "loss.mid_fraction", kind: Kind::Float, default: "0.5", unit: "-", help: "middle-band fraction of the truncation" },

    KeySpec { key: "optimizer.map_lr", kind: Kind::Float, default: "0.01", unit: "-", help: "learning rate for map groups" },
    KeySpec { key: "optimizer.pose_lr", kind: Kind::Float, default: "0.001", unit: "-", help: "learning rate for poses" },
    KeySpec { key: "optimizer.smooth_cells", kind: Kind::Int, default: "6", unit: "cells", help: "smoothness probe sub-volume edge" },

    KeySpec { key: "window.pixel_budget", kind: Kind::Int, default: "2000", unit: "px", help: "rays per mapping iteration" },
    KeySpec { key: "window.min_pixels_per_kf", kind: Kind::Int, default: "100", unit: "px", help: "per-keyframe ray floor (caps window size)" },
    KeySpec { key: "window.parallax_max_deg", kind: Kind::Float, default: "60.0", unit: "deg", help: "parallax-angle cutoff" },
    KeySpec { key: "window.loop_distance", kind: Kind::Float, default: "0", unit: "m", help: "loop-candidate distance; 0 = 0.1 * scene diagonal" },
    KeySpec { key: "window.loop_min_gap", kind: Kind::Int, default: "10", unit: "keyframes", help: "minimum insertion gap for loop candidacy" },
    KeySpec { key: "window.recent_count", kind: Kind::Int, default: "2", unit: "-", help: "guaranteed most-recent keyframes" },
    KeySpec { key: "window.historical_count", kind: Kind::Int, default: "1", unit: "-", help: "guaranteed historical keyframes" },

    KeySpec { key: "detector.max_corners", kind: Kind::Int, default: "512", unit: "-", help: "corner cap per frame" },
    KeySpec { key: "detector.quality_level", kind: Kind::Float, default: "0.01", unit: "-", help: "response threshold fraction" },
    KeySpec { key: "detector.min_distance", kind: Kind::Float, default: "8.0", unit: "px", help: "corner suppression radius" },
    KeySpec { key: "detector.window_radius", kind: Kind::Int, default: "2", unit: "px", help: "structure-tensor window radius" },

    KeySpec { key: "eval.depth_stride", kind: Kind::Int, default: "10", unit: "frames", help: "frame stride for depth L1" },
    KeySpec { key: "eval.n_uniform", kind: Kind::Int, default: "128", unit: "-", help: "uniform samples per ray at evaluation" },
    KeySpec { key: "eval.mesh_voxel", kind: Kind::Float, default: "0.02", unit: "m", help: "mesh extraction voxel size" },
    KeySpec { key: "eval.acc_samples", kind: Kind::Int, default: "200000", unit: "-", help: "surface samples per mesh metric" },
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub source_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        for spec in SCHEMA {
            values.insert(spec.key.to_string(), spec.default.to_string());
        }
        Self {
            values,
            source_path: None,
        }
    }
}

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let ok = match spec.kind {
        Kind::Int => value.parse::<i64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok(),
        Kind::Bool => matches!(value, "true" | "false"),
        Kind::Str => true,
        Kind::Vec3 => {
            value == "auto"
                || (value.split(',').count() == 3
                    && value.split(',').all(|v| v.trim().parse::<f64>().is_ok()))
        }
    };
    if ok {
        Ok(())
    } else {
        Err(SlamError::invalid(format!(
            "key '{}' expects {:?}, got '{value}'",
            spec.key, spec.kind
        )))
    }
}

impl RunConfig {
    /// Parses config text: `[section]` headers, `key = value` lines, `#`
    /// comments. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SlamError::format(format!(
                    "config line {}: expected 'key = value'",
                    lineno + 1
                )));
            };
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&key, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.source_path = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// Sets one key, validating name and value against the schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec_of(key)
            .ok_or_else(|| SlamError::invalid(format!("unknown configuration key '{key}'")))?;
        check_value(spec, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` override strings (CLI `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(SlamError::invalid(format!(
                    "override '{o}' must be key=value"
                )));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key '{key}' missing from schema defaults"))
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated int")
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated int")
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated float")
    }

    pub fn get_bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn get_vec3(&self, key: &str) -> Option<[f64; 3]> {
        let v = self.get(key);
        if v == "auto" {
            return None;
        }
        let parts: Vec<f64> = v.split(',').map(|p| p.trim().parse().unwrap()).collect();
        Some([parts[0], parts[1], parts[2]])
    }

    /// Serializes back to the sectioned text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut last_section = String::new();
        for spec in SCHEMA {
            let (section, name) = spec.key.split_once('.').unwrap();
            if section != last_section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                last_section = section.to_string();
            }
            out.push_str(&format!("{name} = {}\n", self.get(spec.key)));
        }
        out
    }

    /// One help line per key with default and unit.
    pub fn describe_schema() -> String {
        let mut out = String::new();
        for spec in SCHEMA {
            out.push_str(&format!(
                "{:<32} default {:<16} [{}] {}\n",
                spec.key, spec.default, spec.unit, spec.help
            ));
        }
        out
    }

    pub fn scene(&self) -> SynthSceneConfig {
        let mut scene = SynthSceneConfig {
            frames: self.get_usize("scene.frames"),
            loops: self.get_f64("scene.loops"),
            orbit_radius: self.get_f64("scene.orbit_radius"),
            cam_height: self.get_f64("scene.cam_height"),
            pitch_deg: self.get_f64("scene.pitch_deg"),
            color_seed: self.get_u64("scene.color_seed"),
            depth_noise: self.get_f64("scene.depth_noise"),
            ..Default::default()
        };
        if let (Some(min), Some(max)) = (
            self.get_vec3("scene.room_min"),
            self.get_vec3("scene.room_max"),
        ) {
            scene.room = Aabb::new(min, max);
        }
        scene.max_depth = scene.room.diagonal();
        scene
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let width = self.get_usize("dataset.width");
        let height = self.get_usize("dataset.height");
        let mut k = default_synth_intrinsics(width, height);
        let fx = self.get_f64("dataset.fx");
        if fx > 0.0 {
            k.fx = fx;
            k.fy = fx;
        }
        let fy = self.get_f64("dataset.fy");
        if fy > 0.0 {
            k.fy = fy;
        }
        let cx = self.get_f64("dataset.cx");
        if cx > 0.0 {
            k.cx = cx;
        }
        let cy = self.get_f64("dataset.cy");
        if cy > 0.0 {
            k.cy = cy;
        }
        k.depth_scale = self.get_f64("dataset.depth_scale");
        k
    }

    fn bounds(&self) -> Aabb {
        match (self.get_vec3("map.bounds_min"), self.get_vec3("map.bounds_max")) {
            (Some(min), Some(max)) => Aabb::new(min, max),
            _ => self.scene().map_bounds(0.15),
        }
    }

    pub fn slam_config(&self) -> Result<SlamConfig> {
        let bounds = self.bounds();
        let scene_diag = bounds.diagonal();
        let far = {
            let v = self.get_f64("sampling.far");
            if v > 0.0 {
                v
            } else {
                scene_diag
            }
        };
        let loop_distance = {
            let v = self.get_f64("window.loop_distance");
            if v > 0.0 {
                v
            } else {
                0.5 * scene_diag * 0.2
            }
        };
        let cfg = SlamConfig {
            map_every: self.get_usize("run.map_every"),
            mapping_iterations: self.get_usize("run.mapping_iterations"),
            first_frame_iterations: self.get_usize("run.first_frame_iterations"),
            tracking_iterations: self.get_usize("run.tracking_iterations"),
            tracking_pixels: self.get_usize("run.tracking_pixels"),
            keyframe_ratio: self.get_f64("run.keyframe_ratio"),
            sample: SampleConfig {
                n_uniform: self.get_usize("sampling.n_uniform"),
                n_depth: self.get_usize("sampling.n_depth"),
                depth_radius: self.get_f64("sampling.depth_radius"),
                near: self.get_f64("sampling.near"),
                far,
            },
            weights: LossWeights {
                uniform_color: self.get_f64("loss.uniform_color"),
                feature_color: self.get_f64("loss.feature_color"),
                uniform_depth: self.get_f64("loss.uniform_depth"),
                feature_depth: self.get_f64("loss.feature_depth"),
                free_space: self.get_f64("loss.free_space"),
                trunc_mid: self.get_f64("loss.trunc_mid"),
                trunc_tail: self.get_f64("loss.trunc_tail"),
                smooth: self.get_f64("loss.smooth"),
                truncation: self.get_f64("loss.truncation"),
                mid_fraction: self.get_f64("loss.mid_fraction"),
            },
            window: WindowConfig {
                pixel_budget: self.get_usize("window.pixel_budget"),
                min_pixels_per_kf: self.get_usize("window.min_pixels_per_kf"),
                parallax_max_deg: self.get_f64("window.parallax_max_deg"),
                loop_distance,
                loop_min_gap: self.get_usize("window.loop_min_gap"),
                recent_count: self.get_usize("window.recent_count"),
                historical_count: self.get_usize("window.historical_count"),
            },
            grid: HashGridConfig {
                levels: self.get_usize("map.levels"),
                features_per_level: self.get_usize("map.features_per_level"),
                base_resolution: self.get_usize("map.base_resolution"),
                finest_resolution: self.get_usize("map.finest_resolution"),
                table_size_log2: self.get_usize("map.table_size_log2") as u32,
                bounds,
            },
            oneblob: OneBlobConfig {
                bins_per_axis: self.get_usize("map.oneblob_bins"),
                kernel_sigma: self.get_f64("map.oneblob_sigma"),
            },
            hidden_dim: self.get_usize("map.hidden_dim"),
            beta_init: self.get_f64("map.beta_init"),
            map_lr: self.get_f64("optimizer.map_lr"),
            pose_lr: self.get_f64("optimizer.pose_lr"),
            smooth_cells: self.get_usize("optimizer.smooth_cells"),
            detector: FeatureDetectorConfig {
                max_corners: self.get_usize("detector.max_corners"),
                quality_level: self.get_f64("detector.quality_level"),
                min_distance: self.get_f64("detector.min_distance"),
                window_radius: self.get_usize("detector.window_radius"),
            },
            use_feature_sampling: self.get_bool("run.use_feature_sampling"),
            use_constrained_window: self.get_bool("run.use_constrained_window"),
            seed: self.get_u64("run.seed"),
            deterministic_interleave: self.get("run.mode") != "concurrent",
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
