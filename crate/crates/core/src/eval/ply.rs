//! Binary little-endian PLY export/import for triangle meshes.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SlamError};
use crate::eval::mesh::TriangleMesh;

/// Writes positions (f32), vertex colors (u8, white when absent), and
/// triangle indices.
pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for k in 0..3 {
            w.write_all(&(v[k] as f32).to_le_bytes())?;
        }
        let c = mesh.colors.as_ref().map_or([255u8; 3], |cs| cs[i]);
        w.write_all(&c)?;
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads meshes written by [`write_ply`] (same property layout).
pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    let mut n_vertex = None;
    let mut n_face = None;
    loop {
        header.clear();
        if r.read_line(&mut header)? == 0 {
            return Err(SlamError::format("ply: truncated header"));
        }
        let line = header.trim();
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            n_vertex = rest.parse::<usize>().ok();
        } else if let Some(rest) = line.strip_prefix("element face ") {
            n_face = rest.parse::<usize>().ok();
        } else if line == "ply" || line.starts_with("format binary_little_endian") {
            continue;
        }
    }
    let (nv, nf) = match (n_vertex, n_face) {
        (Some(v), Some(f)) => (v, f),
        _ => return Err(SlamError::format("ply: missing element counts")),
    };
    let mut mesh = TriangleMesh {
        vertices: Vec::with_capacity(nv),
        triangles: Vec::with_capacity(nf),
        colors: Some(Vec::with_capacity(nv)),
    };
    let mut f4 = [0u8; 4];
    let mut c3 = [0u8; 3];
    for _ in 0..nv {
        let mut v = [0.0f64; 3];
        for x in v.iter_mut() {
            r.read_exact(&mut f4)?;
            *x = f32::from_le_bytes(f4) as f64;
        }
        r.read_exact(&mut c3)?;
        mesh.vertices.push(v);
        mesh.colors.as_mut().unwrap().push(c3);
    }
    let mut n1 = [0u8; 1];
    for _ in 0..nf {
        r.read_exact(&mut n1)?;
        if n1[0] != 3 {
            return Err(SlamError::format("ply: only triangle faces supported"));
        }
        let mut t = [0u32; 3];
        for x in t.iter_mut() {
            r.read_exact(&mut f4)?;
            let idx = i32::from_le_bytes(f4);
            if idx < 0 || idx as usize >= nv {
                return Err(SlamError::format("ply: face index out of range"));
            }
            *x = idx as u32;
        }
        mesh.triangles.push(t);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_mesh() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![[0.0, 0.25, -1.5], [1.0, 0.5, 2.0], [0.125, 3.0, 0.0]],
            triangles: vec![[0, 1, 2]],
            colors: Some(vec![[255, 0, 0], [0, 255, 0], [0, 0, 255]]),
        }
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        let mesh = test_mesh();
        write_ply(&mesh, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.colors, mesh.colors);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_mesh_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_ply(&TriangleMesh::default(), &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert!(back.vertices.is_empty() && back.triangles.is_empty());
    }

    #[test]
    fn header_matches_expected_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.ply");
        write_ply(&test_mesh(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(300)]);
        assert!(head.starts_with("ply\nformat binary_little_endian 1.0\n"));
        assert!(head.contains("element vertex 3"));
        assert!(head.contains("element face 1"));
        assert!(head.contains("property list uchar int vertex_indices"));
    }
}
