//! ASCII OFF and OBJ readers and writers. Quads are triangulated by the
//! fixed split (v0,v1,v2,v3) -> (v0,v1,v2) + (v0,v2,v3).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::geom::Vec3;
use crate::mesh::{MeshError, TriMesh};

/// Loads an OFF or OBJ mesh (by extension) and validates manifoldness.
pub fn load_mesh(path: &Path) -> Result<TriMesh, MeshError> {
    let text = fs::read_to_string(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let mesh = match ext.as_str() {
        "off" => parse_off(&text)?,
        "obj" => parse_obj(&text)?,
        other => return Err(MeshError::Parse(format!("unsupported extension '{}'", other))),
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn parse_off(text: &str) -> Result<TriMesh, MeshError> {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace())
        .collect();
    struct Cursor<'a> {
        tokens: Vec<&'a str>,
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, MeshError> {
            let t = self.tokens.get(self.pos).ok_or_else(|| {
                MeshError::Parse(format!("unexpected end of file reading {}", what))
            })?;
            self.pos += 1;
            t.parse()
                .map_err(|_| MeshError::Parse(format!("bad {} '{}'", what, t)))
        }
    }
    let mut cur = Cursor { tokens, pos: 0 };
    if cur.next::<String>("header")? != "OFF" {
        return Err(MeshError::Parse("expected OFF header".into()));
    }
    let nv: usize = cur.next("vertex count")?;
    let nf: usize = cur.next("face count")?;
    let _ne: usize = cur.next("edge count")?;
    let mut positions = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut coords = [0.0f64; 3];
        for c in &mut coords {
            *c = cur.next("coordinate")?;
        }
        positions.push(coords);
    }
    let mut triangles = Vec::new();
    for _ in 0..nf {
        let k: usize = cur.next("face size")?;
        let mut poly = Vec::with_capacity(k);
        for _ in 0..k {
            poly.push(cur.next::<usize>("face index")?);
        }
        push_polygon(&mut triangles, &poly)?;
    }
    Ok(TriMesh::new(positions, triangles))
}

pub fn parse_obj(text: &str) -> Result<TriMesh, MeshError> {
    let mut positions: Vec<Vec3> = Vec::new();
    let mut triangles = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    *c = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| MeshError::Parse("bad vertex line".into()))?;
                }
                positions.push(coords);
            }
            Some("f") => {
                let mut poly = Vec::new();
                for part in parts {
                    // "i", "i/t", "i/t/n", "i//n" forms; indices are 1-based,
                    // negatives count from the end.
                    let first = part.split('/').next().unwrap_or("");
                    let raw: i64 = first
                        .parse()
                        .map_err(|_| MeshError::Parse(format!("bad face index '{}'", part)))?;
                    let idx = if raw < 0 {
                        positions.len() as i64 + raw
                    } else {
                        raw - 1
                    };
                    if idx < 0 {
                        return Err(MeshError::Parse(format!("face index out of range: {}", raw)));
                    }
                    poly.push(idx as usize);
                }
                push_polygon(&mut triangles, &poly)?;
            }
            _ => {} // other records ignored
        }
    }
    Ok(TriMesh::new(positions, triangles))
}

fn push_polygon(triangles: &mut Vec<[usize; 3]>, poly: &[usize]) -> Result<(), MeshError> {
    match poly.len() {
        3 => triangles.push([poly[0], poly[1], poly[2]]),
        4 => {
            triangles.push([poly[0], poly[1], poly[2]]);
            triangles.push([poly[0], poly[2], poly[3]]);
        }
        n => return Err(MeshError::Parse(format!("unsupported face size {}", n))),
    }
    Ok(())
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> std::io::Result<()> {
    write_obj_with_colors(path, mesh, None)
}

/// Writes an OBJ; when colors are given each vertex line carries r g b after
/// the coordinates (the common vertex-color OBJ extension).
pub fn write_obj_with_colors(
    path: &Path,
    mesh: &TriMesh,
    colors: Option<&[Vec3]>,
) -> std::io::Result<()> {
    let mut out = String::new();
    for (i, p) in mesh.positions.iter().enumerate() {
        match colors {
            Some(c) => out.push_str(&format!(
                "v {} {} {} {} {} {}\n",
                p[0], p[1], p[2], c[i][0], c[i][1], c[i][2]
            )),
            None => out.push_str(&format!("v {} {} {}\n", p[0], p[1], p[2])),
        }
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())
}

pub fn write_off(path: &Path, mesh: &TriMesh) -> std::io::Result<()> {
    let mut out = format!("OFF\n{} {} 0\n", mesh.positions.len(), mesh.triangles.len());
    for p in &mesh.positions {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())
}
