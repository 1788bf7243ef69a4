use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use togkit::geometry::{ControlPointSet, Point3};

/// Wireframe of the six control points: base to wrist, wrist to both finger
/// roots, the crossbar, and each finger.
const EDGES: [(usize, usize); 6] = [(0, 1), (1, 4), (1, 5), (4, 5), (4, 2), (5, 3)];
const OBJECT_GRAY: [u8; 3] = [160, 160, 160];

/// Red at score 0, green at score 1.
fn score_color(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    [(255.0 * (1.0 - s)).round() as u8, (255.0 * s).round() as u8, 0]
}

/// Writes an ASCII PLY with the object in gray and one score-colored gripper
/// wireframe per candidate.
pub fn write(path: &Path, object: &[Point3], grippers: &[(ControlPointSet, f64)]) -> Result<()> {
    let n_vertices = object.len() + 6 * grippers.len();
    let mut out = String::new();
    writeln!(out, "ply\nformat ascii 1.0\ncomment togkit grasp ranking")?;
    writeln!(out, "element vertex {n_vertices}")?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(out, "element edge {}", EDGES.len() * grippers.len())?;
    writeln!(out, "property int vertex1\nproperty int vertex2")?;
    writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(out, "end_header")?;
    let vertex = |out: &mut String, p: &Point3, c: [u8; 3]| {
        writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])
    };
    for p in object {
        vertex(&mut out, p, OBJECT_GRAY)?;
    }
    for (cps, score) in grippers {
        for p in &cps.points {
            vertex(&mut out, p, score_color(*score))?;
        }
    }
    for (k, (_, score)) in grippers.iter().enumerate() {
        let base = object.len() + 6 * k;
        let [r, g, b] = score_color(*score);
        for (a, z) in EDGES {
            writeln!(out, "{} {} {r} {g} {b}", base + a, base + z)?;
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_counts_match_body() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let cps = ControlPointSet { points: [[0.0; 3]; 6] };
        write(&path, &[[1.0, 2.0, 3.0]], &[(cps.clone(), 0.9), (cps, 0.1)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert!(text.contains("element vertex 13"));
        assert!(text.contains("element edge 12"));
        assert_eq!(body.len(), 13 + 12);
        assert_eq!(body[0], "1 2 3 160 160 160");
    }

    #[test]
    fn colors_run_red_to_green() {
        assert_eq!(score_color(0.0), [255, 0, 0]);
        assert_eq!(score_color(1.0), [0, 255, 0]);
        assert_eq!(score_color(7.0), [0, 255, 0]);
    }
}
