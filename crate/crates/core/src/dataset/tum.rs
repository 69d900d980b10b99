//! TUM RGB-D directory layout: `rgb.txt`/`depth.txt` index files, PNG images,
//! optional `groundtruth.txt`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::dataset::{read_trajectory, CameraIntrinsics, Dataset, Frame};
use crate::error::{Result, SlamError};

/// Maximum timestamp difference for color/depth association, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

fn parse_index(path: &Path) -> Result<Vec<(f64, String)>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(stamp), Some(file)) = (it.next(), it.next()) else {
            return Err(SlamError::format(format!(
                "{}: line {} needs 'timestamp filename'",
                path.display(),
                lineno + 1
            )));
        };
        let stamp: f64 = stamp.parse().map_err(|_| {
            SlamError::format(format!(
                "{}: line {} has bad timestamp '{stamp}'",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push((stamp, file.to_string()));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(out)
}

/// Globally nearest-first association of two stamp lists within the
/// tolerance. Symmetric: swapping the roles yields the same pair set.
pub fn associate(a: &[f64], b: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut j0 = 0usize;
    for (i, &ta) in a.iter().enumerate() {
        while j0 < b.len() && b[j0] < ta - tol {
            j0 += 1;
        }
        let mut j = j0;
        while j < b.len() && b[j] <= ta + tol {
            candidates.push(((ta - b[j]).abs(), i, j));
            j += 1;
        }
    }
    candidates.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap()
            .then_with(|| {
                let kx = (a[x.1].min(b[x.2]), a[x.1].max(b[x.2]));
                let ky = (a[y.1].min(b[y.2]), a[y.1].max(b[y.2]));
                kx.partial_cmp(&ky).unwrap()
            })
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_by(|x, y| a[x.0].partial_cmp(&a[y.0]).unwrap());
    pairs
}

/// Loads a TUM-layout directory. Color and depth are associated by nearest
/// timestamp within 0.02 s; unmatched frames are dropped. Depth PNGs hold
/// 16-bit z-depth in `depth_scale` units per meter and are converted to ray
/// depth in memory.
pub fn load_tum(dir: &Path, intrinsics: CameraIntrinsics) -> Result<Dataset> {
    intrinsics.validate()?;
    let rgb_index = parse_index(&dir.join("rgb.txt"))?;
    let depth_index = parse_index(&dir.join("depth.txt"))?;
    let rgb_stamps: Vec<f64> = rgb_index.iter().map(|(s, _)| *s).collect();
    let depth_stamps: Vec<f64> = depth_index.iter().map(|(s, _)| *s).collect();
    let pairs = associate(&rgb_stamps, &depth_stamps, ASSOCIATION_TOLERANCE);
    if pairs.is_empty() {
        return Err(SlamError::format(
            "no color/depth pairs associate within 0.02 s",
        ));
    }

    // Per-pixel z-to-ray conversion factors, computed once.
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut ray_factor = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            ray_factor[y * w + x] = intrinsics.ray_depth_factor(x as f64, y as f64) as f32;
        }
    }

    let mut frames = Vec::with_capacity(pairs.len());
    for (id, (ri, di)) in pairs.iter().enumerate() {
        let rgb_path = dir.join(&rgb_index[*ri].1);
        let depth_path = dir.join(&depth_index[*di].1);
        let rgb = image::open(&rgb_path)
            .map_err(|e| SlamError::format(format!("{}: {e}", rgb_path.display())))?
            .to_rgb8();
        if rgb.width() as usize != w || rgb.height() as usize != h {
            return Err(SlamError::format(format!(
                "{}: image is {}x{}, intrinsics say {w}x{h}",
                rgb_path.display(),
                rgb.width(),
                rgb.height()
            )));
        }
        let depth_img = image::open(&depth_path)
            .map_err(|e| SlamError::format(format!("{}: {e}", depth_path.display())))?
            .to_luma16();
        if depth_img.width() as usize != w || depth_img.height() as usize != h {
            return Err(SlamError::format(format!(
                "{}: depth size mismatch",
                depth_path.display()
            )));
        }
        let mut color = Vec::with_capacity(w * h);
        for px in rgb.pixels() {
            color.push([
                px[0] as f32 / 255.0,
                px[1] as f32 / 255.0,
                px[2] as f32 / 255.0,
            ]);
        }
        let mut depth = Vec::with_capacity(w * h);
        for (i, px) in depth_img.pixels().enumerate() {
            let z = px[0] as f64 / intrinsics.depth_scale;
            depth.push(if px[0] == 0 {
                0.0
            } else {
                z as f32 * ray_factor[i]
            });
        }
        frames.push(Frame {
            id,
            timestamp: rgb_index[*ri].0,
            width: w,
            height: h,
            color,
            depth,
        });
    }

    let gt_path = dir.join("groundtruth.txt");
    let gt_trajectory = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };

    let ds = Dataset {
        intrinsics,
        frames,
        gt_trajectory,
        gt_mesh: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Exports a dataset to the TUM layout (rgb/, depth/, index files, optional
/// groundtruth.txt). In-memory ray depth is converted back to z-depth.
pub fn save_tum(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let (w, h) = (ds.intrinsics.width, ds.intrinsics.height);
    let mut rgb_txt = std::io::BufWriter::new(std::fs::File::create(dir.join("rgb.txt"))?);
    let mut depth_txt = std::io::BufWriter::new(std::fs::File::create(dir.join("depth.txt"))?);
    writeln!(rgb_txt, "# timestamp filename")?;
    writeln!(depth_txt, "# timestamp filename")?;
    for f in &ds.frames {
        let mut rgb = ImageBuffer::<Rgb<u8>, _>::new(w as u32, h as u32);
        let mut depth = ImageBuffer::<Luma<u16>, _>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let c = f.color_at(x, y);
                rgb.put_pixel(
                    x as u32,
                    y as u32,
                    Rgb([
                        (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]),
                );
                let d_ray = f.depth_at(x, y) as f64;
                let units = if d_ray > 0.0 {
                    let z = d_ray / ds.intrinsics.ray_depth_factor(x as f64, y as f64);
                    (z * ds.intrinsics.depth_scale).round().clamp(0.0, 65535.0) as u16
                } else {
                    0
                };
                depth.put_pixel(x as u32, y as u32, Luma([units]));
            }
        }
        let rgb_name = format!("rgb/{:06}.png", f.id);
        let depth_name = format!("depth/{:06}.png", f.id);
        rgb.save(dir.join(&rgb_name))
            .map_err(|e| SlamError::format(e.to_string()))?;
        depth
            .save(dir.join(&depth_name))
            .map_err(|e| SlamError::format(e.to_string()))?;
        writeln!(rgb_txt, "{:.6} {rgb_name}", f.timestamp)?;
        writeln!(depth_txt, "{:.6} {depth_name}", f.timestamp)?;
    }
    if let Some(gt) = &ds.gt_trajectory {
        crate::dataset::write_trajectory(&dir.join("groundtruth.txt"), gt)?;
    }
    Ok(())
}
