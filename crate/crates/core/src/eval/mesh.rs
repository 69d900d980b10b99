//! Mesh extraction (marching cubes), frustum culling, and surface-sample
//! reconstruction metrics.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::dataset::CameraIntrinsics;
use crate::diff::PoseParam;
use crate::error::{Result, SlamError};
use crate::eval::mc_tables::{EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::map::Aabb;
use crate::math::vec;

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-vertex colors (8-bit).
    pub colors: Option<Vec<[u8; 3]>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn indices_in_range(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.triangles.iter().all(|t| t.iter().all(|&i| i < n))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let e1 = vec::sub(self.vertices[b as usize], self.vertices[a as usize]);
        let e2 = vec::sub(self.vertices[c as usize], self.vertices[a as usize]);
        0.5 * vec::norm(vec::cross(e1, e2))
    }
}

const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Extracts the zero level set of a scalar field over `bounds` at the given
/// voxel size, with linear interpolation along crossing edges. Vertices on
/// shared edges are merged, so closed level sets fully inside the bounds come
/// out watertight.
pub fn marching_cubes_field(
    field: &(dyn Fn([f64; 3]) -> f64 + Sync),
    bounds: &Aabb,
    voxel: f64,
) -> TriangleMesh {
    let ext = bounds.extent();
    let nx = (ext[0] / voxel).ceil() as usize + 1;
    let ny = (ext[1] / voxel).ceil() as usize + 1;
    let nz = (ext[2] / voxel).ceil() as usize + 1;
    let grid_pos = |ix: usize, iy: usize, iz: usize| -> [f64; 3] {
        [
            bounds.min[0] + ix as f64 * voxel,
            bounds.min[1] + iy as f64 * voxel,
            bounds.min[2] + iz as f64 * voxel,
        ]
    };

    // Field values one z-slice at a time, shading in parallel.
    let sample_slice = |iz: usize| -> Vec<f64> {
        (0..ny)
            .into_par_iter()
            .flat_map_iter(|iy| (0..nx).map(move |ix| (ix, iy)))
            .map(|(ix, iy)| field(grid_pos(ix, iy, iz)))
            .collect()
    };

    let mut mesh = TriangleMesh::default();
    let mut edge_cache: HashMap<u64, u32> = HashMap::new();
    let edge_key = |c: [usize; 3], axis: usize| -> u64 {
        (((c[2] * ny + c[1]) * nx + c[0]) * 3 + axis) as u64
    };

    let mut below = sample_slice(0);
    for iz in 0..nz - 1 {
        let above = sample_slice(iz + 1);
        for iy in 0..ny - 1 {
            for ix in 0..nx - 1 {
                let mut values = [0.0f64; 8];
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    let slice = if off[2] == 0 { &below } else { &above };
                    values[c] = slice[(iy + off[1]) * nx + ix + off[0]];
                }
                let mut cube = 0usize;
                for (c, &v) in values.iter().enumerate() {
                    if v < 0.0 {
                        cube |= 1 << c;
                    }
                }
                if EDGE_TABLE[cube] == 0 {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for (e, &(a, b)) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[cube] & (1 << e) == 0 {
                        continue;
                    }
                    let ca = CORNER_OFFSETS[a];
                    let cb = CORNER_OFFSETS[b];
                    let ga = [ix + ca[0], iy + ca[1], iz + ca[2]];
                    let gb = [ix + cb[0], iy + cb[1], iz + cb[2]];
                    let (gmin, axis) = if ga <= gb {
                        (ga, (0..3).find(|&k| ga[k] != gb[k]).unwrap())
                    } else {
                        (gb, (0..3).find(|&k| ga[k] != gb[k]).unwrap())
                    };
                    let key = edge_key(gmin, axis);
                    let idx = *edge_cache.entry(key).or_insert_with(|| {
                        let (va, vb) = (values[a], values[b]);
                        let t = if (vb - va).abs() < 1e-12 {
                            0.5
                        } else {
                            (0.0 - va) / (vb - va)
                        };
                        let pa = grid_pos(ga[0], ga[1], ga[2]);
                        let pb = grid_pos(gb[0], gb[1], gb[2]);
                        let v = vec::add(pa, vec::scale(vec::sub(pb, pa), t));
                        mesh.vertices.push(v);
                        (mesh.vertices.len() - 1) as u32
                    });
                    edge_vertex[e] = idx;
                }
                let tri = &TRIANGLE_TABLE[cube];
                let mut k = 0;
                while k < 16 && tri[k] >= 0 {
                    mesh.triangles.push([
                        edge_vertex[tri[k] as usize],
                        edge_vertex[tri[k + 1] as usize],
                        edge_vertex[tri[k + 2] as usize],
                    ]);
                    k += 3;
                }
            }
        }
        below = above;
    }
    mesh
}

/// Removes vertices (and their triangles) that fall outside every camera
/// frustum of the trajectory. Zero-margin frusta: a vertex is inside when it
/// projects in front of the camera within the image rectangle.
pub fn cull_mesh(
    mesh: &TriangleMesh,
    poses: &[PoseParam<f64>],
    intrinsics: &CameraIntrinsics,
) -> Result<TriangleMesh> {
    if poses.is_empty() {
        return Err(SlamError::invalid("culling needs at least one camera pose"));
    }
    let inverses: Vec<PoseParam<f64>> = poses.iter().map(|p| p.inverse()).collect();
    let keep: Vec<bool> = mesh
        .vertices
        .par_iter()
        .map(|&v| {
            inverses.iter().any(|inv| {
                let pc = inv.apply_point(v);
                match intrinsics.project(pc) {
                    Some((u, vv, _)) => {
                        u >= 0.0
                            && u < intrinsics.width as f64
                            && vv >= 0.0
                            && vv < intrinsics.height as f64
                    }
                    None => false,
                }
            })
        })
        .collect();

    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut out = TriangleMesh {
        colors: mesh.colors.as_ref().map(|_| Vec::new()),
        ..Default::default()
    };
    for (i, &k) in keep.iter().enumerate() {
        if k {
            remap[i] = out.vertices.len() as u32;
            out.vertices.push(mesh.vertices[i]);
            if let (Some(dst), Some(src)) = (&mut out.colors, &mesh.colors) {
                dst.push(src[i]);
            }
        }
    }
    for t in &mesh.triangles {
        if t.iter().all(|&i| keep[i as usize]) {
            out.triangles
                .push([remap[t[0] as usize], remap[t[1] as usize], remap[t[2] as usize]]);
        }
    }
    Ok(out)
}

/// Closest point on a triangle to `p` (Ericson, Real-Time Collision
/// Detection 5.1.5).
pub fn closest_point_on_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = vec::sub(b, a);
    let ac = vec::sub(c, a);
    let ap = vec::sub(p, a);
    let d1 = vec::dot(ab, ap);
    let d2 = vec::dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = vec::sub(p, b);
    let d3 = vec::dot(ab, bp);
    let d4 = vec::dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return vec::add(a, vec::scale(ab, t));
    }
    let cp = vec::sub(p, c);
    let d5 = vec::dot(ab, cp);
    let d6 = vec::dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return vec::add(a, vec::scale(ac, t));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return vec::add(b, vec::scale(vec::sub(c, b), t));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    vec::add(a, vec::add(vec::scale(ab, v), vec::scale(ac, w)))
}

/// Uniform spatial hash over triangle bounding boxes for nearest-surface
/// queries.
pub struct TriGrid<'a> {
    mesh: &'a TriangleMesh,
    cell: f64,
    min: [f64; 3],
    dims: [usize; 3],
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> TriGrid<'a> {
    pub fn build(mesh: &'a TriangleMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(SlamError::invalid("mesh has no triangles"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &mesh.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let diag = vec::dist(lo, hi).max(1e-9);
        // Aim for a few triangles per cell.
        let cell = (diag / (mesh.triangles.len() as f64).cbrt().max(4.0)).max(1e-6);
        let mut dims = [0usize; 3];
        for k in 0..3 {
            dims[k] = (((hi[k] - lo[k]) / cell).ceil() as usize).max(1);
        }
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let mut tlo = [f64::INFINITY; 3];
            let mut thi = [f64::NEG_INFINITY; 3];
            for &vi in tri {
                let v = mesh.vertices[vi as usize];
                for k in 0..3 {
                    tlo[k] = tlo[k].min(v[k]);
                    thi[k] = thi[k].max(v[k]);
                }
            }
            let c0: Vec<i64> = (0..3).map(|k| ((tlo[k] - lo[k]) / cell) as i64).collect();
            let c1: Vec<i64> = (0..3).map(|k| ((thi[k] - lo[k]) / cell) as i64).collect();
            for cz in c0[2]..=c1[2] {
                for cy in c0[1]..=c1[1] {
                    for cx in c0[0]..=c1[0] {
                        cells.entry((cx, cy, cz)).or_default().push(t as u32);
                    }
                }
            }
        }
        Ok(Self {
            mesh,
            cell,
            min: lo,
            dims,
            cells,
        })
    }

    fn cell_of(&self, p: [f64; 3]) -> (i64, i64, i64) {
        (
            ((p[0] - self.min[0]) / self.cell).floor() as i64,
            ((p[1] - self.min[1]) / self.cell).floor() as i64,
            ((p[2] - self.min[2]) / self.cell).floor() as i64,
        )
    }

    /// Distance from a point to the nearest surface point of the mesh.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let (cx, cy, cz) = self.cell_of(p);
        let mut best = f64::INFINITY;
        let max_ring = self.dims.iter().max().unwrap() + 2;
        for ring in 0..=max_ring as i64 {
            // Any triangle in a farther ring is at least this far away.
            let ring_floor = (ring - 1).max(0) as f64 * self.cell;
            if best < ring_floor {
                break;
            }
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(tris) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &t in tris {
                                let [a, b, c] = self.mesh.triangles[t as usize];
                                let q = closest_point_on_triangle(
                                    p,
                                    self.mesh.vertices[a as usize],
                                    self.mesh.vertices[b as usize],
                                    self.mesh.vertices[c as usize],
                                );
                                best = best.min(vec::dist(p, q));
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Area-weighted uniform surface samples.
pub fn sample_surface(
    mesh: &TriangleMesh,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<[f64; 3]>> {
    if mesh.is_empty() {
        return Err(SlamError::invalid("cannot sample an empty mesh"));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(SlamError::invalid("mesh has zero surface area"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random_range(0.0..total);
        let t = cumulative.partition_point(|&c| c < r).min(mesh.triangles.len() - 1);
        let [a, b, c] = mesh.triangles[t];
        let (va, vb, vc) = (
            mesh.vertices[a as usize],
            mesh.vertices[b as usize],
            mesh.vertices[c as usize],
        );
        let (mut u, mut v): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        out.push(vec::add(
            va,
            vec::add(vec::scale(vec::sub(vb, va), u), vec::scale(vec::sub(vc, va), v)),
        ));
    }
    Ok(out)
}

/// Accuracy (pred -> gt), completion (gt -> pred), and completion ratio at
/// `threshold` meters, from `samples` area-weighted surface samples per mesh.
/// Distances are returned in meters.
pub fn acc_comp(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    threshold: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    use rand::SeedableRng;
    if pred.is_empty() || gt.is_empty() {
        return Err(SlamError::invalid("acc_comp needs nonempty meshes"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pred_pts = sample_surface(pred, samples, &mut rng)?;
    let gt_pts = sample_surface(gt, samples, &mut rng)?;
    let gt_grid = TriGrid::build(gt)?;
    let pred_grid = TriGrid::build(pred)?;

    let accuracy = pred_pts
        .par_iter()
        .map(|&p| gt_grid.distance(p))
        .sum::<f64>()
        / pred_pts.len() as f64;
    let comp_dists: Vec<f64> = gt_pts.par_iter().map(|&p| pred_grid.distance(p)).collect();
    let completion = comp_dists.iter().sum::<f64>() / comp_dists.len() as f64;
    let within = comp_dists.iter().filter(|&&d| d < threshold).count();
    let ratio = 100.0 * within as f64 / comp_dists.len() as f64;
    Ok((accuracy, completion, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn sphere_mesh(voxel: f64) -> TriangleMesh {
        let bounds = Aabb::new([-1.4; 3], [1.4; 3]);
        marching_cubes_field(&|p| vec::norm(p) - 1.0, &bounds, voxel)
    }

    #[test]
    fn all_positive_field_is_empty() {
        let bounds = Aabb::new([0.0; 3], [1.0; 3]);
        let mesh = marching_cubes_field(&|_| 1.0, &bounds, 0.25);
        assert!(mesh.is_empty());
    }

    #[test]
    fn unit_sphere_vertices_near_surface() {
        let mesh = sphere_mesh(0.02);
        assert!(!mesh.is_empty());
        assert!(mesh.indices_in_range());
        for v in &mesh.vertices {
            let err = (vec::norm(*v) - 1.0).abs();
            assert!(err < 0.01, "vertex {v:?} deviates {err}");
        }
    }

    #[test]
    fn closed_surface_is_watertight() {
        // Every edge of a closed level set is shared by exactly two triangles.
        let mesh = sphere_mesh(0.1);
        let mut edge_count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let a = t[k];
                let b = t[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_default() += 1;
            }
        }
        for (edge, count) in edge_count {
            assert_eq!(count, 2, "edge {edge:?} has {count} incident triangles");
        }
    }

    #[test]
    fn level_set_fidelity() {
        // For a smooth field, the field value at any vertex stays below the
        // voxel size.
        let bounds = Aabb::new([-1.2; 3], [1.5; 3]);
        let field = |p: [f64; 3]| vec::norm(vec::sub(p, [0.1, -0.05, 0.2])) - 0.8;
        let mesh = marching_cubes_field(&field, &bounds, 0.05);
        for v in &mesh.vertices {
            assert!(field(*v).abs() < 0.05);
        }
    }

    fn unit_square_pair(gap: f64) -> (TriangleMesh, TriangleMesh) {
        let square = |z: f64| TriangleMesh {
            vertices: vec![
                [0.0, 0.0, z],
                [1.0, 0.0, z],
                [1.0, 1.0, z],
                [0.0, 1.0, z],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            colors: None,
        };
        (square(0.0), square(gap))
    }

    #[test]
    fn self_comparison_is_zero() {
        let mesh = sphere_mesh(0.1);
        let (acc, comp, ratio) = acc_comp(&mesh, &mesh, 0.05, 20_000, 1).unwrap();
        assert!(acc < 1e-3, "accuracy {acc}");
        assert!(comp < 1e-3, "completion {comp}");
        assert!(ratio > 99.9, "ratio {ratio}");
    }

    #[test]
    fn parallel_squares_measure_their_gap() {
        let (a, b) = unit_square_pair(0.03);
        let (acc, comp, ratio) = acc_comp(&a, &b, 0.05, 20_000, 2).unwrap();
        assert!((acc - 0.03).abs() < 0.001, "accuracy {acc}");
        assert!((comp - 0.03).abs() < 0.001, "completion {comp}");
        assert!((ratio - 100.0).abs() < 1e-9);
        // Degenerate threshold: nothing within 0.
        let (_, _, r0) = acc_comp(&a, &b, 0.0, 5_000, 3).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn empty_mesh_is_error() {
        let empty = TriangleMesh::default();
        let full = sphere_mesh(0.2);
        assert!(acc_comp(&empty, &full, 0.05, 100, 0).is_err());
    }

    #[test]
    fn point_triangle_distance_cases() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        // Above the interior.
        let q = closest_point_on_triangle([0.2, 0.2, 1.0], a, b, c);
        assert!(vec::dist(q, [0.2, 0.2, 0.0]) < 1e-12);
        // Beyond a vertex.
        let q = closest_point_on_triangle([2.0, -1.0, 0.0], a, b, c);
        assert!(vec::dist(q, b) < 1e-12);
        // Closest to an edge.
        let q = closest_point_on_triangle([0.5, -1.0, 0.0], a, b, c);
        assert!(vec::dist(q, [0.5, 0.0, 0.0]) < 1e-12);
    }

    fn straight_ahead_pose() -> PoseParam<f64> {
        PoseParam::identity()
    }

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            depth_scale: 5000.0,
        }
    }

    #[test]
    fn culling_keeps_visible_and_drops_behind() {
        let mesh = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 2.0],   // straight ahead
                [0.1, 0.0, 2.0],   // ahead
                [0.0, 0.1, 2.0],   // ahead
                [0.0, 0.0, -2.0],  // behind
                [50.0, 0.0, 2.0],  // far outside the image
            ],
            triangles: vec![[0, 1, 2], [2, 3, 4]],
            colors: None,
        };
        let culled = cull_mesh(&mesh, &[straight_ahead_pose()], &test_intrinsics()).unwrap();
        assert_eq!(culled.vertices.len(), 3);
        assert_eq!(culled.triangles.len(), 1);
    }

    #[test]
    fn culling_matches_brute_force_and_is_idempotent() {
        let mesh = sphere_mesh(0.15);
        let pose = PoseParam::new(
            crate::math::Quat::from_axis_angle([0.0, 1.0, 0.0], 0.4),
            [0.0, 0.0, -3.0],
        );
        let k = test_intrinsics();
        let culled = cull_mesh(&mesh, &[pose], &k).unwrap();

        // Brute-force per-vertex oracle.
        let inv = pose.inverse();
        let expected: Vec<[f64; 3]> = mesh
            .vertices
            .iter()
            .copied()
            .filter(|&v| {
                let pc = inv.apply_point(v);
                pc[2] > 0.0 && {
                    let u = k.fx * pc[0] / pc[2] + k.cx;
                    let w = k.fy * pc[1] / pc[2] + k.cy;
                    (0.0..100.0).contains(&u) && (0.0..100.0).contains(&w)
                }
            })
            .collect();
        assert_eq!(culled.vertices, expected);

        let twice = cull_mesh(&culled, &[pose], &k).unwrap();
        assert_eq!(twice.vertices, culled.vertices);
        assert_eq!(twice.triangles, culled.triangles);
    }
}
