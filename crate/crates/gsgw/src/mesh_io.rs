//! Mesh and point-cloud file IO.
//!
//! Three formats cover the experimental data: ASCII OFF and OBJ for
//! triangle meshes, and NPY for raw point arrays. The grammars are
//! deliberately minimal — OBJ is reduced to `v`/`f` records with 1-based
//! indices and fan-triangulated polygons, OFF to the optional keyword line
//! plus counts, and NPY to version 1.0 little-endian float32/float64
//! C-order 2-D arrays. Anything outside that is a parse error pointing at
//! the offending line or byte, never a silent guess.

use std::fs;
use std::path::Path;

use crate::error::{GsgwError, Result};
use crate::measures::PointCloud;

/// Where a mesh came from; kept on the mesh so pipeline logs can report it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
    Npy,
}

impl MeshFormat {
    /// Infer the format from a file extension (case-insensitive).
    pub fn from_path(path: &Path) -> Result<MeshFormat> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "obj" => Ok(MeshFormat::Obj),
            "off" => Ok(MeshFormat::Off),
            "npy" => Ok(MeshFormat::Npy),
            other => Err(GsgwError::invalid(format!(
                "cannot infer mesh format from extension {other:?} of {}",
                path.display()
            ))),
        }
    }
}

/// A triangle mesh, or a bare point cloud when `faces` is empty (NPY input,
/// OBJ files with only vertex records).
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: PointCloud,
    pub faces: Vec<[usize; 3]>,
    pub source_format: MeshFormat,
}

impl Mesh {
    /// Undirected edge list of the face graph, each pair once with i < j.
    pub fn edge_set(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

fn parse_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> GsgwError {
    GsgwError::Parse {
        path: path.display().to_string(),
        location: location.into(),
        message: message.into(),
    }
}

/// Read a mesh from disk. NPY input yields a faceless cloud.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<Mesh> {
    match format {
        MeshFormat::Obj => load_obj(path),
        MeshFormat::Off => load_off(path),
        MeshFormat::Npy => {
            let cloud = read_npy(path)?;
            Ok(Mesh {
                vertices: cloud,
                faces: Vec::new(),
                source_format: MeshFormat::Npy,
            })
        }
    }
}

fn parse_f64(path: &Path, line_no: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, format!("line {line_no}"), format!("bad number {tok:?}")))
}

/// Fan-triangulate one polygon record and push the triangles.
fn push_polygon(
    path: &Path,
    line_no: usize,
    idx: &[usize],
    n_vertices: usize,
    faces: &mut Vec<[usize; 3]>,
) -> Result<()> {
    if idx.len() < 3 {
        return Err(parse_err(
            path,
            format!("line {line_no}"),
            format!("face with {} vertices", idx.len()),
        ));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= n_vertices) {
        return Err(parse_err(
            path,
            format!("line {line_no}"),
            format!("face index {bad} out of range for {n_vertices} vertices"),
        ));
    }
    for k in 1..idx.len() - 1 {
        faces.push([idx[0], idx[k], idx[k + 1]]);
    }
    Ok(())
}

fn load_obj(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    let mut coords: Vec<f64> = Vec::new();
    let mut face_records: Vec<(usize, Vec<i64>)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let xyz: Vec<&str> = toks.collect();
                if xyz.len() < 3 {
                    return Err(parse_err(
                        path,
                        format!("line {line_no}"),
                        "vertex record needs 3 coordinates",
                    ));
                }
                for tok in &xyz[..3] {
                    coords.push(parse_f64(path, line_no, tok)?);
                }
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in toks {
                    // "i", "i/t", "i/t/n" and "i//n" all start with the
                    // vertex index
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|_| {
                        parse_err(
                            path,
                            format!("line {line_no}"),
                            format!("bad face index {tok:?}"),
                        )
                    })?;
                    idx.push(i);
                }
                face_records.push((line_no, idx));
            }
            _ => {} // comments, normals, texture coords, groups
        }
    }
    if coords.is_empty() {
        return Err(parse_err(path, "end of file", "no vertex records"));
    }
    let vertices = PointCloud::new(3, coords)?;
    let mut faces = Vec::new();
    for (line_no, idx) in face_records {
        let mut zero_based = Vec::with_capacity(idx.len());
        for i in idx {
            if i < 1 {
                return Err(parse_err(
                    path,
                    format!("line {line_no}"),
                    format!("face index {i} is not 1-based positive"),
                ));
            }
            zero_based.push((i - 1) as usize);
        }
        push_polygon(path, line_no, &zero_based, vertices.len(), &mut faces)?;
    }
    Ok(Mesh {
        vertices,
        faces,
        source_format: MeshFormat::Obj,
    })
}

fn load_off(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    // (1-based line number, content) with blanks and comments dropped
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(ln, raw)| (ln + 1, raw.trim()))
        .filter(|(_, s)| !s.is_empty() && !s.starts_with('#'));
    let (first_no, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, "line 1", "empty file"))?;
    let counts_line = if first.eq_ignore_ascii_case("OFF") {
        lines
            .next()
            .ok_or_else(|| parse_err(path, format!("line {first_no}"), "missing counts line"))?
    } else {
        (first_no, first)
    };
    let (counts_no, counts) = counts_line;
    let parts: Vec<&str> = counts.split_whitespace().collect();
    if parts.len() < 2 {
        return Err(parse_err(
            path,
            format!("line {counts_no}"),
            "counts line needs at least nv and nf",
        ));
    }
    let nv: usize = parts[0].parse().map_err(|_| {
        parse_err(
            path,
            format!("line {counts_no}"),
            format!("bad vertex count {:?}", parts[0]),
        )
    })?;
    let nf: usize = parts[1].parse().map_err(|_| {
        parse_err(
            path,
            format!("line {counts_no}"),
            format!("bad face count {:?}", parts[1]),
        )
    })?;
    let mut coords = Vec::with_capacity(nv * 3);
    for _ in 0..nv {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, "end of file", "truncated vertex list"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(
                path,
                format!("line {line_no}"),
                "vertex line needs 3 coordinates",
            ));
        }
        for tok in &toks[..3] {
            coords.push(parse_f64(path, line_no, tok)?);
        }
    }
    if nv == 0 {
        return Err(parse_err(
            path,
            format!("line {counts_no}"),
            "mesh with zero vertices",
        ));
    }
    let vertices = PointCloud::new(3, coords)?;
    let mut faces = Vec::new();
    for _ in 0..nf {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, "end of file", "truncated face list"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let k: usize = toks
            .first()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(path, format!("line {line_no}"), "bad face arity"))?;
        if toks.len() < k + 1 {
            return Err(parse_err(
                path,
                format!("line {line_no}"),
                format!("face lists {} indices, header says {k}", toks.len() - 1),
            ));
        }
        let mut idx = Vec::with_capacity(k);
        for tok in &toks[1..=k] {
            let i: usize = tok.parse().map_err(|_| {
                parse_err(
                    path,
                    format!("line {line_no}"),
                    format!("bad face index {tok:?}"),
                )
            })?;
            idx.push(i);
        }
        push_polygon(path, line_no, &idx, vertices.len(), &mut faces)?;
    }
    Ok(Mesh {
        vertices,
        faces,
        source_format: MeshFormat::Off,
    })
}

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Read a version-1.0 NPY file holding a little-endian float32 or float64
/// C-order 2-D array; rows become points.
pub fn read_npy(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(parse_err(path, "byte 0", "not an NPY file (bad magic)"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(parse_err(
            path,
            "byte 6",
            format!("unsupported NPY version {}.{}", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(parse_err(path, "byte 10", "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| parse_err(path, "byte 10", "header is not ASCII"))?;

    let descr = extract_field(header, "descr")
        .ok_or_else(|| parse_err(path, "byte 10", "header missing descr"))?;
    let word = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f8" => 8,
        "<f4" => 4,
        other => {
            return Err(parse_err(
                path,
                "byte 10",
                format!("unsupported dtype {other:?}; need <f4 or <f8"),
            ))
        }
    };
    let fortran = extract_field(header, "fortran_order")
        .ok_or_else(|| parse_err(path, "byte 10", "header missing fortran_order"))?;
    if fortran != "False" {
        return Err(parse_err(
            path,
            "byte 10",
            "fortran_order arrays are not supported",
        ));
    }
    let shape = extract_field(header, "shape")
        .ok_or_else(|| parse_err(path, "byte 10", "header missing shape"))?;
    let dims: Vec<usize> = shape
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, "byte 10", format!("bad shape {shape:?}")))?;
    if dims.len() != 2 {
        return Err(parse_err(
            path,
            "byte 10",
            format!("need a 2-D array, got shape {shape}"),
        ));
    }
    let (n, d) = (dims[0], dims[1]);
    let expected = n * d * word;
    let payload = &bytes[data_start..];
    if payload.len() != expected {
        return Err(parse_err(
            path,
            format!("byte {data_start}"),
            format!("expected {expected} data bytes, found {}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    match word {
        8 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        _ => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
    }
    PointCloud::new(d, data)
}

/// Pull the value token following `'name':` out of the header dict. The
/// grammar NumPy emits is fixed enough that scanning to the next ',' or '}'
/// (with tuples kept whole) is exact.
fn extract_field<'a>(header: &'a str, name: &str) -> Option<&'a str> {
    let key = format!("'{name}':");
    let start = header.find(&key)? + key.len();
    let rest = header[start..].trim_start();
    if rest.starts_with('(') {
        let end = rest.find(')')?;
        Some(&rest[..=end])
    } else {
        let end = rest.find([',', '}'])?;
        Some(rest[..end].trim())
    }
}

/// Write a cloud as a version-1.0 NPY file, '<f8' C-order (n, d). The file
/// appears atomically: written to a sibling temp path, then renamed over.
pub fn write_npy(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        cloud.len(),
        cloud.dim()
    );
    // pad so data starts on a 64-byte boundary, newline-terminated
    let unpadded = NPY_MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.div_ceil(64) * 64 - unpadded));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + cloud.data().len() * 8);
    bytes.extend_from_slice(NPY_MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for &x in cloud.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Write an ASCII OFF mesh. Coordinates print in Rust's shortest
/// round-trip form, so reading the file back reproduces them bitwise.
pub fn write_off(path: &Path, vertices: &PointCloud, faces: &[[usize; 3]]) -> Result<()> {
    if vertices.dim() != 3 {
        return Err(GsgwError::invalid(format!(
            "OFF is a 3-D format, got dim {}",
            vertices.dim()
        )));
    }
    let mut text = format!("OFF\n{} {} 0\n", vertices.len(), faces.len());
    for p in vertices.iter() {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    for f in faces {
        text.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    write_atomic(path, text.as_bytes())
}

/// Integer labels, one per line, the sidecar format for labeled clouds.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        labels.push(s.parse::<usize>().map_err(|_| {
            parse_err(path, format!("line {}", ln + 1), format!("bad label {s:?}"))
        })?);
    }
    if labels.is_empty() {
        return Err(parse_err(path, "end of file", "no labels"));
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Temp-file-plus-rename write so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
