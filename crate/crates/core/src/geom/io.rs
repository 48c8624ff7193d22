//! Point-cloud files: plain `x y z` text and ASCII PLY.
//!
//! Writers print floats in shortest round-trip form, so a write/read cycle
//! reproduces every coordinate exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

/// Reads a cloud, choosing the format by extension (`.ply` or anything else
/// as plain text).
pub fn read_points(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let points = if is_ply { parse_ply(&text) } else { parse_xyz(&text) };
    points
        .and_then(|pts| PointCloud::new(pts).map_err(|e| e.to_string()))
        .map_err(|msg| Error::parse(path, msg))
}

pub fn write_points(path: &Path, pc: &PointCloud) -> Result<()> {
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let text = if is_ply { format_ply(pc) } else { format_xyz(pc) };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_coord(tok: &str, line: usize) -> std::result::Result<f64, String> {
    let v: f64 = tok
        .parse()
        .map_err(|_| format!("line {line}: `{tok}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("line {line}: non-finite coordinate `{tok}`"));
    }
    Ok(v)
}

pub fn parse_xyz(text: &str) -> std::result::Result<Vec<Vec3>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(format!("line {}: expected 3 values, found {}", n + 1, toks.len()));
        }
        out.push(Vec3::new(
            parse_coord(toks[0], n + 1)?,
            parse_coord(toks[1], n + 1)?,
            parse_coord(toks[2], n + 1)?,
        ));
    }
    Ok(out)
}

pub fn format_xyz(pc: &PointCloud) -> String {
    let mut s = String::with_capacity(pc.len() * 48);
    for p in pc.iter() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

/// ASCII PLY reader. Only the `vertex` element is interpreted; its `x`, `y`
/// and `z` properties may appear anywhere among other scalar properties.
pub fn parse_ply(text: &str) -> std::result::Result<Vec<Vec3>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err("missing `ply` magic".into()),
    }
    let mut vertex_count = None;
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(format!("unsupported PLY format `{fmt}`"));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| format!("line {}: bad element count", n + 1))?;
                if *name == "vertex" {
                    vertex_count = Some(count);
                }
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or("property before element")?;
                if el.0 == "vertex" {
                    return Err("list properties on vertex are not supported".into());
                }
                el.2.push("<list>".into());
            }
            ["property", _ty, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                el.2.push(name.to_string());
            }
            ["end_header"] => {
                header_end = Some(n);
                break;
            }
            _ => return Err(format!("line {}: unrecognized header line `{line}`", n + 1)),
        }
    }
    header_end.ok_or("missing end_header")?;
    let vertex_count = vertex_count.ok_or("no vertex element")?;
    let mut out = Vec::with_capacity(vertex_count);
    for (name, count, props) in &elements {
        if name != "vertex" {
            // skip rows of elements we do not interpret
            for _ in 0..*count {
                lines.next().ok_or("unexpected end of file")?;
            }
            continue;
        }
        let col = |axis: &str| {
            props
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| format!("vertex element lacks `{axis}`"))
        };
        let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
        for _ in 0..*count {
            let (n, line) = lines.next().ok_or("unexpected end of vertex data")?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != props.len() {
                return Err(format!(
                    "line {}: expected {} values, found {}",
                    n + 1,
                    props.len(),
                    toks.len()
                ));
            }
            out.push(Vec3::new(
                parse_coord(toks[cx], n + 1)?,
                parse_coord(toks[cy], n + 1)?,
                parse_coord(toks[cz], n + 1)?,
            ));
        }
    }
    Ok(out)
}

pub fn format_ply(pc: &PointCloud) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        pc.len()
    );
    s.push_str(&format_xyz(pc));
    s
}
