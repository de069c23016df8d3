//! Minimal PLY reader and writer for point clouds and triangle meshes.
//!
//! Both ASCII and binary-little-endian files are supported. Readers pick
//! out `x`, `y`, `z` (and `nx`, `ny`, `nz` when all three are present) from
//! the vertex element and skip every other property by its declared type,
//! so clouds written by other tools load as long as their headers are well
//! formed. Writers emit float32 coordinates; meshes carry a triangle face
//! element and an optional per-vertex `quality` channel.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// A loaded point cloud. `normals`, when present, is parallel to `points`.
#[derive(Clone, Debug)]
pub struct PlyCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    /// Reads one little-endian value widened to f64, or None past the end.
    fn read(self, bytes: &[u8], at: usize) -> Option<f64> {
        let chunk = bytes.get(at..at + self.size())?;
        Some(match self {
            ScalarType::I8 => chunk[0] as i8 as f64,
            ScalarType::U8 => chunk[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([chunk[0], chunk[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([chunk[0], chunk[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Clone, Debug)]
struct PropertySpec {
    name: String,
    kind: PropertyKind,
}

#[derive(Clone, Debug)]
struct ElementSpec {
    name: String,
    count: usize,
    properties: Vec<PropertySpec>,
    header_line: usize,
}

struct Header {
    binary: bool,
    elements: Vec<ElementSpec>,
    /// Byte offset of the first data byte after the end_header line.
    data_start: usize,
    /// Number of header lines, for ASCII body error reporting.
    lines: usize,
}

/// Splits off the next header line (ASCII, `\n`-terminated, optional `\r`).
fn next_line(bytes: &[u8], at: usize) -> Option<(String, usize)> {
    let rest = bytes.get(at..)?;
    let end = rest.iter().position(|b| *b == b'\n')?;
    let raw = &rest[..end];
    let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
    Some((String::from_utf8_lossy(raw).into_owned(), at + end + 1))
}

fn read_header_line(
    path: &Path,
    bytes: &[u8],
    at: &mut usize,
    lineno: &mut usize,
) -> Result<String> {
    let (line, next) = next_line(bytes, *at)
        .ok_or_else(|| Error::parse(path, *lineno + 1, "unexpected end of header"))?;
    *at = next;
    *lineno += 1;
    Ok(line)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut at = 0usize;
    let mut lineno = 0usize;

    if read_header_line(path, bytes, &mut at, &mut lineno)?.trim() != "ply" {
        return Err(Error::parse(path, 1, "not a PLY file (missing 'ply' magic)"));
    }
    let format = read_header_line(path, bytes, &mut at, &mut lineno)?;
    let binary = match format.trim() {
        "format ascii 1.0" => false,
        "format binary_little_endian 1.0" => true,
        other => {
            return Err(Error::parse(
                path,
                2,
                format!("unsupported format '{other}'"),
            ))
        }
    };

    let mut elements: Vec<ElementSpec> = Vec::new();
    loop {
        let line_at = lineno + 1;
        let line = read_header_line(path, bytes, &mut at, &mut lineno)?;
        let trimmed = line.trim();
        if trimmed == "end_header" {
            break;
        }
        let mut tokens = trimmed.split_whitespace();
        match tokens.next() {
            None | Some("comment") | Some("obj_info") => continue,
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::parse(path, line_at, "element needs a name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(path, line_at, "element needs a count"))?;
                elements.push(ElementSpec {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    header_line: line_at,
                });
            }
            Some("property") => {
                let element = elements.last_mut().ok_or_else(|| {
                    Error::parse(path, line_at, "property appears before any element")
                })?;
                let first = tokens
                    .next()
                    .ok_or_else(|| Error::parse(path, line_at, "property needs a type"))?;
                let kind = if first == "list" {
                    let count = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| Error::parse(path, line_at, "bad list count type"))?;
                    let item = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| Error::parse(path, line_at, "bad list item type"))?;
                    PropertyKind::List { count, item }
                } else {
                    PropertyKind::Scalar(ScalarType::parse(first).ok_or_else(|| {
                        Error::parse(path, line_at, format!("unknown property type '{first}'"))
                    })?)
                };
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::parse(path, line_at, "property needs a name"))?;
                element.properties.push(PropertySpec {
                    name: name.to_string(),
                    kind,
                });
            }
            Some(other) => {
                return Err(Error::parse(
                    path,
                    line_at,
                    format!("unknown header keyword '{other}'"),
                ))
            }
        }
    }
    Ok(Header {
        binary,
        elements,
        data_start: at,
        lines: lineno,
    })
}

/// Column indices of the coordinate and normal properties in an element.
struct VertexLayout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
}

fn vertex_layout(path: &Path, element: &ElementSpec) -> Result<VertexLayout> {
    let find = |name: &str| {
        element.properties.iter().position(|p| {
            p.name == name && matches!(p.kind, PropertyKind::Scalar(_))
        })
    };
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => {
            return Err(Error::parse(
                path,
                element.header_line,
                "vertex element is missing scalar x, y, z properties",
            ))
        }
    };
    let normal = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    Ok(VertexLayout { xyz, normal })
}

/// Reads a point cloud from an ASCII or binary-little-endian PLY file. The
/// `vertex` element must carry scalar `x`, `y`, `z`; `nx`, `ny`, `nz` are
/// picked up when all three exist, and every other property is skipped.
pub fn load_ply(path: &Path) -> Result<PlyCloud> {
    let bytes = fs::read(path)?;
    let header = parse_header(path, &bytes)?;
    if header.binary {
        load_binary(path, &bytes, &header)
    } else {
        load_ascii(path, &bytes, &header)
    }
}

fn load_ascii(path: &Path, bytes: &[u8], header: &Header) -> Result<PlyCloud> {
    let body = &bytes[header.data_start..];
    let text = String::from_utf8_lossy(body);
    let mut lines = text.lines();
    let mut lineno = header.lines;
    let mut cloud = PlyCloud {
        points: Vec::new(),
        normals: None,
    };

    for element in &header.elements {
        if element.name != "vertex" {
            for _ in 0..element.count {
                lineno += 1;
                lines
                    .next()
                    .ok_or_else(|| Error::parse(path, lineno, "unexpected end of file"))?;
            }
            continue;
        }
        let layout = vertex_layout(path, element)?;
        cloud.points.reserve(element.count);
        let mut normals = layout.normal.map(|_| Vec::with_capacity(element.count));
        for _ in 0..element.count {
            lineno += 1;
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(path, lineno, "unexpected end of file"))?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let mut values = vec![0.0f64; element.properties.len()];
            let mut cursor = 0usize;
            for (slot, prop) in values.iter_mut().zip(&element.properties) {
                match prop.kind {
                    PropertyKind::Scalar(ty) => {
                        let tok = tokens.get(cursor).ok_or_else(|| {
                            Error::parse(path, lineno, "row has too few values")
                        })?;
                        let parsed: f64 = tok.parse().map_err(|_| {
                            Error::parse(path, lineno, format!("bad number '{tok}'"))
                        })?;
                        // Honor the declared type so ASCII and binary files
                        // of the same header load identically.
                        *slot = if ty == ScalarType::F32 {
                            parsed as f32 as f64
                        } else {
                            parsed
                        };
                        cursor += 1;
                    }
                    PropertyKind::List { .. } => {
                        let tok = tokens.get(cursor).ok_or_else(|| {
                            Error::parse(path, lineno, "row has too few values")
                        })?;
                        let n: usize = tok.parse().map_err(|_| {
                            Error::parse(path, lineno, format!("bad list count '{tok}'"))
                        })?;
                        cursor += 1 + n;
                        if cursor > tokens.len() {
                            return Err(Error::parse(path, lineno, "row has too few values"));
                        }
                    }
                }
            }
            cloud
                .points
                .push(Vector3::new(values[layout.xyz[0]], values[layout.xyz[1]], values[layout.xyz[2]]));
            if let (Some(ns), Some(ni)) = (normals.as_mut(), layout.normal) {
                ns.push(Vector3::new(values[ni[0]], values[ni[1]], values[ni[2]]));
            }
        }
        cloud.normals = normals;
    }
    Ok(cloud)
}

fn load_binary(path: &Path, bytes: &[u8], header: &Header) -> Result<PlyCloud> {
    let mut at = header.data_start;
    let eof = || Error::parse(path, header.lines, "unexpected end of file");
    let mut cloud = PlyCloud {
        points: Vec::new(),
        normals: None,
    };

    for element in &header.elements {
        let wanted = if element.name == "vertex" {
            Some(vertex_layout(path, element)?)
        } else {
            None
        };
        if let Some(layout) = &wanted {
            cloud.points.reserve(element.count);
            if layout.normal.is_some() {
                cloud.normals = Some(Vec::with_capacity(element.count));
            }
        }
        for _ in 0..element.count {
            let mut values = vec![0.0f64; element.properties.len()];
            for (slot, prop) in values.iter_mut().zip(&element.properties) {
                match prop.kind {
                    PropertyKind::Scalar(ty) => {
                        *slot = ty.read(bytes, at).ok_or_else(eof)?;
                        at += ty.size();
                    }
                    PropertyKind::List { count, item } => {
                        let n = count.read(bytes, at).ok_or_else(eof)?;
                        at += count.size();
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(Error::parse(path, header.lines, "bad list count"));
                        }
                        let skip = n as usize * item.size();
                        if at + skip > bytes.len() {
                            return Err(eof());
                        }
                        at += skip;
                    }
                }
            }
            if let Some(layout) = &wanted {
                cloud.points.push(Vector3::new(
                    values[layout.xyz[0]],
                    values[layout.xyz[1]],
                    values[layout.xyz[2]],
                ));
                if let (Some(ns), Some(ni)) = (cloud.normals.as_mut(), layout.normal) {
                    ns.push(Vector3::new(values[ni[0]], values[ni[1]], values[ni[2]]));
                }
            }
        }
    }
    Ok(cloud)
}

fn point_header(count: usize, normals: bool, quality: bool, binary: bool) -> String {
    let mut h = String::from("ply\n");
    h.push_str(if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    });
    h.push_str(&format!("element vertex {count}\n"));
    h.push_str("property float x\nproperty float y\nproperty float z\n");
    if normals {
        h.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if quality {
        h.push_str("property float quality\n");
    }
    h
}

fn write_row(out: &mut Vec<u8>, values: &[f64], binary: bool) {
    if binary {
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    } else {
        let text: Vec<String> = values.iter().map(|v| (*v as f32).to_string()).collect();
        out.extend_from_slice(text.join(" ").as_bytes());
        out.push(b'\n');
    }
}

/// Writes a point cloud with optional normals as float32 properties.
pub fn save_ply_points(
    path: &Path,
    points: &[Vector3<f64>],
    normals: Option<&[Vector3<f64>]>,
    binary: bool,
) -> Result<()> {
    if let Some(ns) = normals {
        if ns.len() != points.len() {
            return Err(Error::invalid("normals must be parallel to points"));
        }
    }
    let mut out = point_header(points.len(), normals.is_some(), false, binary).into_bytes();
    out.extend_from_slice(b"end_header\n");
    let mut row = Vec::with_capacity(6);
    for (i, p) in points.iter().enumerate() {
        row.clear();
        row.extend_from_slice(&[p.x, p.y, p.z]);
        if let Some(ns) = normals {
            row.extend_from_slice(&[ns[i].x, ns[i].y, ns[i].z]);
        }
        write_row(&mut out, &row, binary);
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

/// Writes a triangle mesh; `quality` adds a per-vertex scalar channel
/// (used for posterior variance).
pub fn save_ply_mesh(
    path: &Path,
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    quality: Option<&[f64]>,
    binary: bool,
) -> Result<()> {
    if let Some(q) = quality {
        if q.len() != vertices.len() {
            return Err(Error::invalid("quality must be parallel to vertices"));
        }
    }
    for f in faces {
        if f.iter().any(|i| *i >= vertices.len()) {
            return Err(Error::invalid("face index out of range"));
        }
    }
    let mut header = point_header(vertices.len(), false, quality.is_some(), binary);
    header.push_str(&format!("element face {}\n", faces.len()));
    header.push_str("property list uchar int vertex_indices\n");
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    let mut row = Vec::with_capacity(4);
    for (i, v) in vertices.iter().enumerate() {
        row.clear();
        row.extend_from_slice(&[v.x, v.y, v.z]);
        if let Some(q) = quality {
            row.push(q[i]);
        }
        write_row(&mut out, &row, binary);
    }
    for f in faces {
        if binary {
            out.push(3u8);
            for i in f {
                out.extend_from_slice(&(*i as i32).to_le_bytes());
            }
        } else {
            out.extend_from_slice(format!("3 {} {} {}\n", f[0], f[1], f[2]).as_bytes());
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("loggpis-ply-{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn random_cloud(n: usize) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points = (0..n)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * 10.0)
            .collect();
        let normals = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                )
                .normalize()
            })
            .collect();
        (points, normals)
    }

    fn as_f32(v: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64)
    }

    #[test]
    fn clouds_round_trip_in_both_encodings() {
        let dir = temp_dir("roundtrip");
        let (points, normals) = random_cloud(10);
        for binary in [false, true] {
            let path = dir.join(format!("cloud-{binary}.ply"));
            save_ply_points(&path, &points, Some(&normals), binary).unwrap();
            let cloud = load_ply(&path).unwrap();
            assert_eq!(cloud.points.len(), 10);
            let loaded_normals = cloud.normals.as_ref().expect("normals present");
            for i in 0..10 {
                assert_eq!(cloud.points[i], as_f32(&points[i]));
                assert_eq!(loaded_normals[i], as_f32(&normals[i]));
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn clouds_without_normals_load_as_absent() {
        let dir = temp_dir("nonormals");
        let (points, _) = random_cloud(5);
        let path = dir.join("plain.ply");
        save_ply_points(&path, &points, None, true).unwrap();
        let cloud = load_ply(&path).unwrap();
        assert_eq!(cloud.points.len(), 5);
        assert!(cloud.normals.is_none());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_properties_are_skipped() {
        let dir = temp_dir("skip");
        let path = dir.join("extra.ply");
        // Coordinates surrounded by properties another tool might write,
        // including a double-typed coordinate and a list.
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment from another tool\n\
             element vertex 2\n\
             property float confidence\n\
             property double x\nproperty float y\nproperty float z\n\
             property uchar red\n\
             property list uchar float history\n\
             end_header\n\
             0.5 1 2 3 255 2 9.0 9.5\n\
             0.25 4 5 6 128 0\n",
        )
        .unwrap();
        let cloud = load_ply(&path).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)]);
        assert!(cloud.normals.is_none());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn meshes_write_vertex_and_face_elements() {
        let dir = temp_dir("mesh");
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        let quality = vec![0.1, 0.2, 0.3, 0.4];

        let ascii = dir.join("mesh.ply");
        save_ply_mesh(&ascii, &vertices, &faces, Some(&quality), false).unwrap();
        let text = std::fs::read_to_string(&ascii).unwrap();
        assert!(text.contains("element vertex 4"));
        assert!(text.contains("element face 2"));
        assert!(text.contains("property float quality"));
        assert!(text.contains("property list uchar int vertex_indices"));
        assert!(text.contains("3 0 1 2"));

        // The binary variant still loads as a cloud (faces are skipped).
        let bin = dir.join("mesh-bin.ply");
        save_ply_mesh(&bin, &vertices, &faces, Some(&quality), true).unwrap();
        let cloud = load_ply(&bin).unwrap();
        assert_eq!(cloud.points.len(), 4);
        assert_eq!(cloud.points[3], Vector3::new(0.0, 0.0, 1.0));

        // Out-of-range face indices are rejected.
        assert!(save_ply_mesh(&bin, &vertices, &[[0, 1, 9]], None, true).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_headers_report_line_numbers() {
        let dir = temp_dir("badheader");
        let path = dir.join("bad.ply");

        std::fs::write(&path, "plyx\nformat ascii 1.0\nend_header\n").unwrap();
        match load_ply(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nproperty float x\nend_header\n",
        )
        .unwrap();
        match load_ply(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "ply\nformat big_endian 2.0\nend_header\n").unwrap();
        match load_ply(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_files_parse_error_instead_of_crashing() {
        let dir = temp_dir("truncated");
        let (points, normals) = random_cloud(10);
        for binary in [false, true] {
            let path = dir.join(format!("full-{binary}.ply"));
            save_ply_points(&path, &points, Some(&normals), binary).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            let cut = dir.join(format!("cut-{binary}.ply"));
            std::fs::write(&cut, &bytes[..bytes.len() - 30]).unwrap();
            match load_ply(&cut) {
                Err(Error::Parse { .. }) => {}
                other => panic!("expected parse error, got {other:?}"),
            }
        }
        // A file that ends inside the header also reports cleanly.
        let headerless = dir.join("header-only.ply");
        std::fs::write(&headerless, "ply\nformat ascii 1.0\nelement vertex 3\n").unwrap();
        assert!(matches!(load_ply(&headerless), Err(Error::Parse { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}
