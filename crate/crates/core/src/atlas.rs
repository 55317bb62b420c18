//! Universal electrode-location mapping.
//!
//! The bundled mesh holds 348 labels of the 10-05 system (10-20 and 10-10
//! names included, plus the legacy aliases T3/T4/T5/T6 and O9/O10) projected
//! from standard 3-D template positions onto the plane with an
//! azimuthal-equidistant projection about the vertex. Coordinates are
//! normalized so the farthest point sits on the unit circle.
//!
//! Some aliases share coordinates with their modern names (T3 = T7, T5 = P7,
//! O9 = I1, ...), so several names can map to the same point.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BUNDLED_MESH: &str = include_str!("../data/scalp_mesh_348.csv");
const BUNDLED_3D: &str = include_str!("../data/standard_1005_3d.csv");

/// Largest scaled coordinate allowed by the channel embedding.
pub const SCALED_RANGE: f64 = 999.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodePosition {
    pub name: String,
    pub u: f64,
    pub v: f64,
}

impl ElectrodePosition {
    pub fn new(name: impl Into<String>, u: f64, v: f64) -> Self {
        Self {
            name: name.into(),
            u,
            v,
        }
    }

    pub fn distance(&self, other: &ElectrodePosition) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    positions: Vec<ElectrodePosition>,
    coordinate_scale: f64,
    origin: (f64, f64),
}

impl Atlas {
    /// Builds an atlas, rejecting duplicate (case-insensitive) names.
    pub fn new(positions: Vec<ElectrodePosition>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &positions {
            if !seen.insert(p.name.to_uppercase()) {
                return Err(Error::Validation(format!("duplicate electrode name {:?}", p.name)));
            }
            if !(p.u.is_finite() && p.v.is_finite()) {
                return Err(Error::Validation(format!("non-finite coordinates for {:?}", p.name)));
            }
        }
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &positions {
            umin = umin.min(p.u);
            umax = umax.max(p.u);
            vmin = vmin.min(p.v);
            vmax = vmax.max(p.v);
        }
        let extent = (umax - umin).max(vmax - vmin);
        let coordinate_scale = if extent > 0.0 { SCALED_RANGE / extent } else { 1.0 };
        let origin = if positions.is_empty() { (0.0, 0.0) } else { (umin, vmin) };
        Ok(Self {
            positions,
            coordinate_scale,
            origin,
        })
    }

    /// The bundled 348-point mesh.
    pub fn bundled() -> Self {
        Self::from_csv_str(BUNDLED_MESH).expect("bundled mesh is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }

    /// Parses the `name,u,v` CSV format.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| csv_error(&e, 1))?.clone();
        if header.is_empty() || header.len() == 1 && header[0].is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header `name,u,v`".into(),
            });
        }
        if header.iter().collect::<Vec<_>>() != ["name", "u", "v"] {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `name,u,v`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut positions = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(&e, 0))?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != 3 || record[0].is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: "expected `name,u,v`".into(),
                });
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("invalid coordinate {:?}", s),
                })
            };
            positions.push(ElectrodePosition::new(&record[0], num(&record[1])?, num(&record[2])?));
        }
        if positions.is_empty() {
            return Err(Error::Parse {
                line: 2,
                msg: "atlas has no rows".into(),
            });
        }
        Self::new(positions)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("name,u,v\n");
        for p in &self.positions {
            out.push_str(&format!("{},{:.12},{:.12}\n", p.name, p.u, p.v));
        }
        out
    }

    pub fn positions(&self) -> &[ElectrodePosition] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn coordinate_scale(&self) -> f64 {
        self.coordinate_scale
    }

    /// Coordinates mapped into `[0, 1000)` for the channel embedding.
    pub fn scaled(&self, p: &ElectrodePosition) -> (f64, f64) {
        (
            (p.u - self.origin.0) * self.coordinate_scale,
            (p.v - self.origin.1) * self.coordinate_scale,
        )
    }

    /// Case-insensitive exact match.
    pub fn lookup(&self, name: &str) -> Result<&ElectrodePosition> {
        self.positions
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::NotFound(format!("electrode {:?}", name)))
    }

    /// Index of a name in atlas order.
    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.positions
            .iter()
            .position(|p| p.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::NotFound(format!("electrode {:?}", name)))
    }

    /// Closest position by Euclidean distance; ties go to the lexicographically
    /// smallest name.
    pub fn nearest(&self, u: f64, v: f64) -> Result<&ElectrodePosition> {
        let mut best: Option<(&ElectrodePosition, f64)> = None;
        for p in &self.positions {
            let d = (p.u - u).hypot(p.v - v);
            best = match best {
                Some((b, bd)) if bd < d || (bd == d && b.name <= p.name) => Some((b, bd)),
                _ => Some((p, d)),
            };
        }
        best.map(|(p, _)| p)
            .ok_or_else(|| Error::Validation("nearest() on an empty atlas".into()))
    }
}

fn csv_error(e: &csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Template 3-D electrode positions (millimetres) that the bundled mesh is
/// projected from.
pub fn bundled_3d() -> Vec<(String, [f64; 3])> {
    let mut reader = csv::Reader::from_reader(BUNDLED_3D.as_bytes());
    reader
        .records()
        .map(|r| {
            let r = r.expect("bundled 3-D positions are valid");
            let f = |i: usize| r[i].parse::<f64>().expect("bundled coordinate");
            (r[0].to_string(), [f(1), f(2), f(3)])
        })
        .collect()
}

/// Least-squares sphere center through the points.
pub fn fit_sphere_center(points: &[[f64; 3]]) -> Result<[f64; 3]> {
    if points.len() < 4 {
        return Err(Error::Validation("sphere fit needs at least 4 points".into()));
    }
    let n = points.len();
    let a = DMatrix::from_fn(n, 4, |i, j| if j < 3 { 2.0 * points[i][j] } else { 1.0 });
    let b = DVector::from_fn(n, |i, _| points[i].iter().map(|x| x * x).sum());
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Validation(format!("sphere fit failed: {}", e)))?;
    Ok([sol[0], sol[1], sol[2]])
}

/// Azimuthal-equidistant projection about the top of the fitted sphere
/// (`+z` axis), normalized so the farthest point has radius 1.
///
/// `x` points right, `y` toward the nose and `z` up; the projected `u` grows
/// to the right and `v` toward the front.
pub fn project_azimuthal(points: &[(String, [f64; 3])]) -> Result<Vec<ElectrodePosition>> {
    let coords: Vec<[f64; 3]> = points.iter().map(|(_, p)| *p).collect();
    let c = fit_sphere_center(&coords)?;
    let planar: Vec<(f64, f64)> = coords
        .iter()
        .map(|p| {
            let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            let theta = (q[2] / r).clamp(-1.0, 1.0).acos();
            let phi = q[1].atan2(q[0]);
            (theta * phi.cos(), theta * phi.sin())
        })
        .collect();
    let radius = planar.iter().map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max);
    Ok(points
        .iter()
        .zip(planar)
        .map(|((name, _), (x, y))| ElectrodePosition::new(name.clone(), x / radius, y / radius))
        .collect())
}
