//! ASCII point-cloud files: whitespace-separated XYZ and ASCII PLY.
//!
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so `read(write(cloud))` reproduces every coordinate exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    /// Format implied by a file extension (`.ply`, otherwise XYZ).
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => CloudFormat::Ply,
            _ => CloudFormat::Xyz,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            other => Err(Error::InvalidParameter(format!("unknown cloud format `{other}`"))),
        }
    }
}

/// Reads a cloud, detecting PLY by its magic line and XYZ otherwise.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    if text.starts_with(b"ply") {
        let header_end = find_header_end(&text).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "PLY header has no end_header line".into(),
        })?;
        let header = std::str::from_utf8(&text[..header_end]).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            message: "PLY header is not valid UTF-8".into(),
        })?;
        if header.lines().any(|l| l.trim_start().starts_with("format") && !l.contains("ascii")) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "binary PLY is not supported; convert to ASCII PLY".into(),
            });
        }
    }
    let text = String::from_utf8(text).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: "file is not valid UTF-8 text".into(),
    })?;
    if text.starts_with("ply") {
        parse_ply(&text, path)
    } else {
        parse_xyz(&text, path)
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header";
    bytes.windows(needle.len()).position(|w| w == needle).map(|p| p + needle.len())
}

fn parse_coord(field: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("`{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("non-finite value `{field}`"),
        });
    }
    Ok(v)
}

/// One point per line, three whitespace-separated numbers. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut c = [0.0; 3];
        for (slot, f) in c.iter_mut().zip(&fields) {
            *slot = parse_coord(f, path, i + 1)?;
        }
        points.push(Point::from(c));
    }
    PointCloud::new(points)
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// ASCII PLY: reads the `vertex` element's `x`, `y`, `z`; other properties
/// and elements are skipped.
pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let (i, raw) = lines.next().ok_or_else(|| fail(0, "unterminated PLY header".into()))?;
        let mut tok = raw.split_whitespace();
        match tok.next() {
            Some("ply") | Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        message: "binary PLY is not supported; convert to ASCII PLY".into(),
                    });
                }
                saw_format = true;
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| fail(i + 1, "element without a name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| fail(i + 1, "element without a valid count".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| fail(i + 1, "property before any element".into()))?;
                let rest: Vec<&str> = tok.collect();
                if rest.first() == Some(&"list") {
                    if el.name == "vertex" {
                        return Err(fail(i + 1, "list properties on vertices are not supported".into()));
                    }
                    el.properties.push("<list>".into());
                } else {
                    let name = rest.get(1).ok_or_else(|| fail(i + 1, "property without a name".into()))?;
                    el.properties.push(name.to_string());
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(fail(i + 1, format!("unexpected header keyword `{other}`"))),
        }
    }
    if !saw_format {
        return Err(fail(1, "PLY header has no format line".into()));
    }

    let mut points = Vec::new();
    for el in &elements {
        if el.name != "vertex" {
            // Elements after the vertices are never reached.
            for _ in 0..el.count {
                lines.next();
            }
            continue;
        }
        let col = |axis: &str| {
            el.properties
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| fail(0, format!("vertex element has no `{axis}` property")))
        };
        let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
        for _ in 0..el.count {
            let (i, raw) = lines
                .next()
                .ok_or_else(|| fail(0, format!("expected {} vertices, file ended early", el.count)))?;
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() < el.properties.len() {
                return Err(fail(
                    i + 1,
                    format!("expected {} fields, found {}", el.properties.len(), fields.len()),
                ));
            }
            points.push(Point::new(
                parse_coord(fields[cx], path, i + 1)?,
                parse_coord(fields[cy], path, i + 1)?,
                parse_coord(fields[cz], path, i + 1)?,
            ));
        }
        break;
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("writing to a String");
    }
    out
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48 + 128);
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).expect("writing to a String");
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    out.push_str(&format_xyz(cloud));
    out
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::Ply => format_ply(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_field_line_names_line_one() {
        let err = parse_xyz("1.0 2.0\n", Path::new("a.xyz")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let c = parse_xyz("# header\n\n1 2 3\n  # indented comment\n4 5 6\n", Path::new("a.xyz")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1], Point::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn non_finite_rejected() {
        let err = parse_xyz("1 2 3\n1 nan 3\n", Path::new("a.xyz")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_xyz("inf 0 0\n", Path::new("a.xyz")).is_err());
    }

    #[test]
    fn ply_with_normals_reads_positions() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 1 2 0 0 1\n3 4 5 1 0 0\n3 0 1 2\n";
        let c = parse_ply(text, Path::new("a.ply")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], Point::new(0.0, 1.0, 2.0));
        assert_eq!(c[1], Point::new(3.0, 4.0, 5.0));
    }

    #[test]
    fn ply_property_order_is_respected() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float z\nproperty float x\nproperty float y\nend_header\n3 1 2\n";
        assert_eq!(parse_ply(text, Path::new("a.ply")).unwrap()[0], Point::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn binary_ply_rejected() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        let err = parse_ply(text, Path::new("b.ply")).unwrap_err();
        assert!(err.to_string().contains("binary PLY"));
    }

    #[test]
    fn truncated_ply_is_an_error() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(parse_ply(text, Path::new("t.ply")).is_err());
    }

    #[test]
    fn format_from_path() {
        assert_eq!(CloudFormat::from_path(Path::new("a.PLY")), CloudFormat::Ply);
        assert_eq!(CloudFormat::from_path(Path::new("a.xyz")), CloudFormat::Xyz);
        assert_eq!(CloudFormat::from_path(Path::new("a")), CloudFormat::Xyz);
    }
}
