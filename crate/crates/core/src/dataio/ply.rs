//! ASCII PLY: colored point sets for viewing aligned clouds, and clouds with
//! normals for the preprocessing cache.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::cloudproc::PointCloud;
use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// Distinct colors for up to ten clouds, then repeating.
pub const PALETTE: [Rgb; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [128, 128, 128],
    [170, 110, 40],
];

/// Real points of every cloud, each in its own color, in one PLY text.
pub fn ply_string(clouds: &[(&PointCloud, Rgb)]) -> String {
    let n: usize = clouds.iter().map(|(c, _)| c.real_count()).sum();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment aligned point clouds\n");
    let _ = writeln!(s, "comment clouds {}", clouds.len());
    let _ = writeln!(s, "element vertex {n}");
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    s.push_str("element face 0\nproperty list uchar int vertex_indices\nend_header\n");
    for (c, [r, g, b]) in clouds {
        for i in c.real_indices() {
            let p = c.points[i];
            let _ = writeln!(s, "{:.6} {:.6} {:.6} {r} {g} {b}", p.x, p.y, p.z);
        }
    }
    s
}

pub fn write_ply(clouds: &[(&PointCloud, Rgb)], path: &Path) -> Result<()> {
    std::fs::write(path, ply_string(clouds))?;
    Ok(())
}

/// Full-precision points and normals (if any) of one cloud.
pub fn write_cloud_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let c = cloud.compact();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", c.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if c.normals.is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    s.push_str("end_header\n");
    for i in 0..c.len() {
        let p = c.points[i];
        let _ = write!(s, "{:e} {:e} {:e}", p.x, p.y, p.z);
        if let Some(ns) = &c.normals {
            let n = ns[i];
            let _ = write!(s, " {:e} {:e} {:e}", n.x, n.y, n.z);
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Reads the vertices of an ASCII PLY: `x y z` and, when present,
/// `nx ny nz`. Other vertex properties are skipped; faces are ignored.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    parse_ply(&text).map_err(|(line, reason)| Error::MalformedLine { line, reason })
}

fn parse_ply(text: &str) -> std::result::Result<PointCloud, (usize, String)> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err((1, "missing `ply` magic".into())),
    }
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut body_start = 0;
    for (no, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err((no, format!("unsupported format {fmt}"))),
            ["element", "vertex", n] => {
                vertices = Some(n.parse::<usize>().map_err(|_| (no, format!("bad vertex count `{n}`")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                body_start = no;
                break;
            }
            _ => {}
        }
    }
    let n = vertices.ok_or((body_start, "no vertex element".to_string()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err((body_start, "vertex lacks x, y, z".into())),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::new();
    for _ in 0..n {
        let (no, line) = lines.next().ok_or((body_start + points.len() + 1, "missing vertex rows".to_string()))?;
        let v = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| (no, e.to_string()))?;
        if v.len() != props.len() {
            return Err((no, format!("expected {} values, got {}", props.len(), v.len())));
        }
        points.push(Vector3::new(v[x], v[y], v[z]));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vector3::new(v[a], v[b], v[c]));
        }
    }
    Ok(match normal_cols {
        Some(_) => PointCloud::with_normals(points, normals).map_err(|e| (body_start, e.to_string()))?,
        None => PointCloud::from_points(points),
    })
}
