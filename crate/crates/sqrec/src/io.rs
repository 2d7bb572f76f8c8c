//! Point-cloud file formats and result-document serialization.
//!
//! Clouds are read and written as XYZ-ASCII (one whitespace-separated point
//! per line, extra columns ignored, `#` comments allowed) or a small
//! ASCII-PLY subset (float/double `x y z` vertex properties). Fit results
//! round-trip through a JSON document at full precision.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ems::FitResult;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Superquadric};
use crate::hier::StructureGraph;
use crate::math::{Point3, Pose, Quat, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudFormat {
    XyzAscii,
    PlyAscii,
}

impl CloudFormat {
    /// Guess from a file extension; `.ply` is PLY, everything else XYZ.
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::XyzAscii,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "xyz" => Ok(CloudFormat::XyzAscii),
            "ply" => Ok(CloudFormat::PlyAscii),
            other => Err(format!("unknown cloud format '{other}' (expected xyz or ply)")),
        }
    }
}

impl fmt::Display for CloudFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CloudFormat::XyzAscii => "xyz",
            CloudFormat::PlyAscii => "ply",
        })
    }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("invalid number '{tok}'") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite coordinate '{tok}'") });
    }
    Ok(v)
}

/// Parse XYZ-ASCII: blank lines and `#` comments are skipped; each data
/// line needs at least three finite numbers, extra columns are ignored.
pub fn parse_xyz<R: Read>(reader: R) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut coords = [0.0f64; 3];
        for c in &mut coords {
            let tok = it.next().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "expected 3 coordinates".into(),
            })?;
            *c = parse_coord(tok, lineno)?;
        }
        points.push(Point3::new(coords[0], coords[1], coords[2]));
    }
    Ok(points)
}

/// Parse the ASCII-PLY subset: a `vertex` element with float or double
/// `x`, `y`, `z` properties (any order, other properties ignored).
pub fn parse_ply<R: Read>(reader: R) -> Result<Vec<Point3>> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let mut lineno = 0usize;
    let next_line = |lines: &mut dyn Iterator<Item = (usize, std::io::Result<String>)>,
                         lineno: &mut usize|
     -> Result<Option<String>> {
        match lines.next() {
            Some((idx, l)) => {
                *lineno = idx + 1;
                Ok(Some(l?))
            }
            None => Ok(None),
        }
    };

    let magic = next_line(&mut lines, &mut lineno)?
        .ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    if magic.trim() != "ply" {
        return Err(Error::Parse { line: lineno, msg: "missing 'ply' magic".into() });
    }

    let mut vertex_count: Option<usize> = None;
    let mut in_vertex_element = false;
    // column index within a vertex row for x, y, z
    let mut cols: [Option<usize>; 3] = [None; 3];
    let mut ncols = 0usize;
    loop {
        let line = next_line(&mut lines, &mut lineno)?.ok_or(Error::Parse {
            line: lineno,
            msg: "unexpected end of header".into(),
        })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | [] => {}
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unsupported format '{fmt}' (ascii only)"),
                    });
                }
            }
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("invalid vertex count '{n}'"),
                })?);
                in_vertex_element = true;
                ncols = 0;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", ty, name] if in_vertex_element => {
                if !matches!(*ty, "float" | "float32" | "double" | "float64") {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unsupported vertex property type '{ty}'"),
                    });
                }
                match *name {
                    "x" => cols[0] = Some(ncols),
                    "y" => cols[1] = Some(ncols),
                    "z" => cols[2] = Some(ncols),
                    _ => {}
                }
                ncols += 1;
            }
            ["property", ..] => {}
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unrecognized header line '{}'", line.trim()),
                })
            }
        }
    }
    let count = vertex_count
        .ok_or(Error::Parse { line: lineno, msg: "no vertex element declared".into() })?;
    let [cx, cy, cz] = cols;
    let (cx, cy, cz) = match (cx, cy, cz) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Parse {
                line: lineno,
                msg: "vertex element lacks x/y/z properties".into(),
            })
        }
    };

    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&mut lines, &mut lineno)?.ok_or(Error::Parse {
            line: lineno,
            msg: "unexpected end of vertex data".into(),
        })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < ncols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} columns, found {}", ncols, toks.len()),
            });
        }
        points.push(Point3::new(
            parse_coord(toks[cx], lineno)?,
            parse_coord(toks[cy], lineno)?,
            parse_coord(toks[cz], lineno)?,
        ));
    }
    Ok(points)
}

pub fn read_cloud<R: Read>(reader: R, format: CloudFormat) -> Result<PointCloud> {
    let points = match format {
        CloudFormat::XyzAscii => parse_xyz(reader)?,
        CloudFormat::PlyAscii => parse_ply(reader)?,
    };
    PointCloud::new(points)
}

pub fn read_cloud_path(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    read_cloud(file, CloudFormat::from_path(path))
}

pub fn write_cloud<W: Write>(w: &mut W, points: &[Point3], format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::XyzAscii => {
            for p in points {
                writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
        CloudFormat::PlyAscii => {
            writeln!(w, "ply")?;
            writeln!(w, "format ascii 1.0")?;
            writeln!(w, "element vertex {}", points.len())?;
            writeln!(w, "property double x")?;
            writeln!(w, "property double y")?;
            writeln!(w, "property double z")?;
            writeln!(w, "end_header")?;
            for p in points {
                writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Result documents

pub const SCHEMA_VERSION: u32 = 1;

/// Serialized superquadric parameters; rotation is a unit quaternion
/// `[w, x, y, z]` to keep round-trips representation-unambiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqParams {
    pub eps1: f64,
    pub eps2: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl SqParams {
    pub fn from_superquadric(sq: &Superquadric) -> SqParams {
        let q = sq.pose.rotation;
        let t = sq.pose.translation;
        SqParams {
            eps1: sq.eps1,
            eps2: sq.eps2,
            ax: sq.ax,
            ay: sq.ay,
            az: sq.az,
            rotation: [q.w, q.x, q.y, q.z],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn to_superquadric(&self) -> Result<Superquadric> {
        let [w, x, y, z] = self.rotation;
        let [tx, ty, tz] = self.translation;
        let q = Quat { w, x, y, z };
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParam(format!(
                "rotation quaternion norm {} is not 1",
                q.norm()
            )));
        }
        Superquadric::new(
            self.eps1,
            self.eps2,
            self.ax,
            self.ay,
            self.az,
            Pose::new(q.renormalize(), Vec3::new(tx, ty, tz)),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNodeDoc {
    pub superquadric: SqParams,
    pub layer: usize,
    pub source_cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyDoc {
    pub nodes: Vec<HierarchyNodeDoc>,
    pub edges: Vec<(usize, usize)>,
    /// Per-point node labels from `segment_points`.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema: u32,
    pub superquadric: SqParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nll: Option<f64>,
    pub iterations: usize,
    pub switches: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inlier_probabilities: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hierarchy: Option<HierarchyDoc>,
}

impl ResultDocument {
    pub fn from_fit(fit: &FitResult, with_weights: bool) -> ResultDocument {
        ResultDocument {
            schema: SCHEMA_VERSION,
            superquadric: SqParams::from_superquadric(&fit.superquadric),
            sigma2: Some(fit.sigma2),
            nll: Some(fit.final_nll),
            iterations: fit.iterations,
            switches: fit.switch_log.iter().filter(|s| s.accepted).count(),
            inlier_probabilities: if with_weights { Some(fit.z_hat.clone()) } else { None },
            hierarchy: None,
        }
    }

    pub fn from_hierarchy(graph: &StructureGraph, labels: Vec<usize>) -> ResultDocument {
        let nodes: Vec<HierarchyNodeDoc> = graph
            .nodes
            .iter()
            .map(|n| HierarchyNodeDoc {
                superquadric: SqParams::from_superquadric(&n.superquadric),
                layer: n.layer,
                source_cluster: n.source_cluster,
            })
            .collect();
        let root = nodes.first().expect("hierarchy has at least one node");
        ResultDocument {
            schema: SCHEMA_VERSION,
            superquadric: root.superquadric.clone(),
            sigma2: None,
            nll: None,
            iterations: 0,
            switches: 0,
            inlier_probabilities: None,
            hierarchy: Some(HierarchyDoc { nodes, edges: graph.edges.clone(), labels }),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result document serializes")
    }

    pub fn from_json(s: &str) -> Result<ResultDocument> {
        serde_json::from_str(s)
            .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
    }
}
