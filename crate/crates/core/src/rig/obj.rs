//! Minimal Wavefront OBJ support: `v`, `vt` and triangular `f` records.
//!
//! Indices are 1-based on disk. UVs are stored per vertex, so a face corner
//! `a/t` must always pair vertex `a` with the same `vt` entry.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rig::TriMesh;

pub fn read_obj(path: &Path) -> Result<TriMesh<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, &path.display().to_string())
}

pub fn parse_obj(text: &str, origin: &str) -> Result<TriMesh<f64>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut positions = Vec::new();
    let mut texcoords: Vec<[f64; 2]> = Vec::new();
    let mut faces = Vec::new();
    let mut corner_uv: Vec<(usize, usize)> = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let rest: Vec<&str> = it.collect();
        match tag {
            "v" => {
                if rest.len() < 3 {
                    return Err(err(ln, "vertex needs 3 coordinates".into()));
                }
                let mut p = [0.0; 3];
                for (k, s) in rest[..3].iter().enumerate() {
                    p[k] = s
                        .parse()
                        .map_err(|_| err(ln, format!("bad coordinate `{s}`")))?;
                }
                positions.push(p);
            }
            "vt" => {
                if rest.len() < 2 {
                    return Err(err(ln, "texcoord needs 2 values".into()));
                }
                let mut t = [0.0; 2];
                for (k, s) in rest[..2].iter().enumerate() {
                    t[k] = s
                        .parse()
                        .map_err(|_| err(ln, format!("bad texcoord `{s}`")))?;
                }
                texcoords.push(t);
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(err(ln, format!("only triangles are supported, got {} corners", rest.len())));
                }
                let mut face = [0usize; 3];
                for (k, corner) in rest.iter().enumerate() {
                    let mut parts = corner.split('/');
                    let v = parse_index(parts.next().unwrap_or(""))
                        .ok_or_else(|| err(ln, format!("bad face corner `{corner}`")))?;
                    face[k] = v;
                    if let Some(t) = parts.next().filter(|s| !s.is_empty()) {
                        let t = parse_index(t)
                            .ok_or_else(|| err(ln, format!("bad texcoord index in `{corner}`")))?;
                        corner_uv.push((v, t));
                    }
                }
                faces.push((ln, face));
            }
            _ => {}
        }
    }

    let uvs = if corner_uv.is_empty() {
        None
    } else {
        let mut uvs: Vec<Option<usize>> = vec![None; positions.len()];
        for &(v, t) in &corner_uv {
            if v >= positions.len() || t >= texcoords.len() {
                return Err(err(0, format!("face corner {}/{} out of range", v + 1, t + 1)));
            }
            match uvs[v] {
                None => uvs[v] = Some(t),
                Some(prev) if texcoords[prev] == texcoords[t] => {}
                Some(_) => {
                    return Err(err(
                        0,
                        format!("vertex {} has several UVs (seams are not supported)", v + 1),
                    ))
                }
            }
        }
        Some(
            uvs.into_iter()
                .map(|t| t.map(|t| texcoords[t]).unwrap_or([0.0, 0.0]))
                .collect(),
        )
    };

    let faces: Vec<[usize; 3]> = faces
        .into_iter()
        .map(|(ln, f)| {
            if f.iter().any(|&v| v >= positions.len()) {
                Err(err(ln, format!("face index out of range (have {} vertices)", positions.len())))
            } else {
                Ok(f)
            }
        })
        .collect::<Result<_>>()?;
    TriMesh::new(positions, faces, uvs)
}

fn parse_index(s: &str) -> Option<usize> {
    s.parse::<usize>().ok().filter(|&i| i >= 1).map(|i| i - 1)
}

pub fn obj_string(mesh: &TriMesh<f64>) -> String {
    let mut out = String::new();
    for p in mesh.positions() {
        writeln!(out, "v {} {} {}", p[0], p[1], p[2]).unwrap();
    }
    if let Some(uvs) = mesh.uvs() {
        for t in uvs {
            writeln!(out, "vt {} {}", t[0], t[1]).unwrap();
        }
    }
    let with_uv = mesh.uvs().is_some();
    for f in mesh.faces() {
        let [a, b, c] = f.map(|i| i + 1);
        if with_uv {
            writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}").unwrap();
        } else {
            writeln!(out, "f {a} {b} {c}").unwrap();
        }
    }
    out
}

pub fn write_obj(mesh: &TriMesh<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, obj_string(mesh)).map_err(|e| Error::io(path, e))
}
