//! Intersection geometry: four convex crossing polygons in the map frame;
//! every other point is the vehicle area.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Containment tolerance in meters; points exactly on a polygon edge count
/// as inside (closed polygons).
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AreaError {
    #[error("invalid polygon for {area}: {reason}")]
    InvalidPolygon { area: Area, reason: String },
    #[error("crossing areas {a} and {b} overlap")]
    OverlappingAreaConfig { a: Area, b: Area },
}

/// Which part of the intersection a point lies in.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Area {
    Crossing1,
    Crossing2,
    Crossing3,
    Crossing4,
    VehicleArea,
}

impl Area {
    pub const CROSSINGS: [Area; 4] = [
        Area::Crossing1,
        Area::Crossing2,
        Area::Crossing3,
        Area::Crossing4,
    ];

    pub fn is_crossing(self) -> bool {
        !matches!(self, Area::VehicleArea)
    }

    /// Index into the crossing list; `None` for the vehicle area.
    pub fn crossing_index(self) -> Option<usize> {
        match self {
            Area::Crossing1 => Some(0),
            Area::Crossing2 => Some(1),
            Area::Crossing3 => Some(2),
            Area::Crossing4 => Some(3),
            Area::VehicleArea => None,
        }
    }

    pub fn from_crossing_index(i: usize) -> Option<Area> {
        Area::CROSSINGS.get(i).copied()
    }
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Area::Crossing1 => "crossing_1",
            Area::Crossing2 => "crossing_2",
            Area::Crossing3 => "crossing_3",
            Area::Crossing4 => "crossing_4",
            Area::VehicleArea => "vehicle_area",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Area {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crossing_1" => Ok(Area::Crossing1),
            "crossing_2" => Ok(Area::Crossing2),
            "crossing_3" => Ok(Area::Crossing3),
            "crossing_4" => Ok(Area::Crossing4),
            "vehicle_area" => Ok(Area::VehicleArea),
            _ => Err(format!("unknown area {s:?}")),
        }
    }
}

/// Convex polygon in map-frame meters, stored counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<(f64, f64)>,
}

impl ConvexPolygon {
    /// Validates convexity and non-zero area, normalizing winding to CCW.
    pub fn new(mut vertices: Vec<(f64, f64)>) -> Result<Self, String> {
        if vertices.len() < 3 {
            return Err(format!("need at least 3 vertices, got {}", vertices.len()));
        }
        let area2 = signed_area2(&vertices);
        if area2.abs() < 1e-12 {
            return Err("polygon has zero area".into());
        }
        if area2 < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if cross(a, b, c) < -1e-12 {
                return Err("polygon is not convex".into());
            }
        }
        Ok(ConvexPolygon { vertices })
    }

    pub fn axis_aligned_rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        ConvexPolygon::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
            .expect("rectangle is convex")
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    /// Closed containment: boundary points are inside.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            cross(a, b, p) >= -EDGE_EPS
        })
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
        (sx / n, sy / n)
    }

    /// Positive-area intersection test via separating axes; shared edges or
    /// corners do not count as overlap.
    pub fn overlaps(&self, other: &ConvexPolygon) -> bool {
        !has_separating_axis(self, other) && !has_separating_axis(other, self)
    }
}

fn cross(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn signed_area2(vertices: &[(f64, f64)]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            a.0 * b.1 - b.0 * a.1
        })
        .sum()
}

fn has_separating_axis(poly: &ConvexPolygon, other: &ConvexPolygon) -> bool {
    let n = poly.vertices.len();
    for i in 0..n {
        let a = poly.vertices[i];
        let b = poly.vertices[(i + 1) % n];
        let axis = (b.1 - a.1, a.0 - b.0); // outward normal of a CCW edge, negated is fine for projections
        let project = |v: &[(f64, f64)]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(x, y) in v {
                let d = x * axis.0 + y * axis.1;
                lo = lo.min(d);
                hi = hi.max(d);
            }
            (lo, hi)
        };
        let (alo, ahi) = project(&poly.vertices);
        let (blo, bhi) = project(&other.vertices);
        if ahi <= blo + 1e-12 || bhi <= alo + 1e-12 {
            return true;
        }
    }
    false
}

/// The four crossing polygons, indexed crossing_1..crossing_4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaConfig {
    pub crossings: [ConvexPolygon; 4],
}

impl AreaConfig {
    pub fn validate(&self) -> Result<(), AreaError> {
        for i in 0..4 {
            for j in (i + 1)..4 {
                if self.crossings[i].overlaps(&self.crossings[j]) {
                    return Err(AreaError::OverlappingAreaConfig {
                        a: Area::CROSSINGS[i],
                        b: Area::CROSSINGS[j],
                    });
                }
            }
        }
        Ok(())
    }

    pub fn polygon(&self, area: Area) -> Option<&ConvexPolygon> {
        area.crossing_index().map(|i| &self.crossings[i])
    }

    /// The single area containing `p`; errors when two crossing polygons
    /// both claim it.
    pub fn classify(&self, p: (f64, f64)) -> Result<Area, AreaError> {
        let mut found: Option<Area> = None;
        for (i, poly) in self.crossings.iter().enumerate() {
            if poly.contains(p) {
                if let Some(prev) = found {
                    return Err(AreaError::OverlappingAreaConfig {
                        a: prev,
                        b: Area::CROSSINGS[i],
                    });
                }
                found = Some(Area::CROSSINGS[i]);
            }
        }
        Ok(found.unwrap_or(Area::VehicleArea))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_point_is_inside() {
        let poly = ConvexPolygon::axis_aligned_rect(0.0, 0.0, 4.0, 2.0);
        assert!(poly.contains((2.0, 0.0)));
        assert!(poly.contains((4.0, 2.0)));
        assert!(poly.contains((2.0, 1.0)));
        assert!(!poly.contains((2.0, -0.001)));
    }

    #[test]
    fn winding_is_normalized() {
        let cw = ConvexPolygon::new(vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]).unwrap();
        assert!(cw.contains((0.5, 0.5)));
    }

    #[test]
    fn non_convex_rejected() {
        let res = ConvexPolygon::new(vec![
            (0.0, 0.0),
            (2.0, 0.0),
            (1.0, 0.5),
            (2.0, 2.0),
            (0.0, 2.0),
        ]);
        assert!(res.is_err());
    }

    #[test]
    fn overlap_detection() {
        let a = ConvexPolygon::axis_aligned_rect(0.0, 0.0, 2.0, 2.0);
        let b = ConvexPolygon::axis_aligned_rect(1.0, 1.0, 3.0, 3.0);
        let c = ConvexPolygon::axis_aligned_rect(2.0, 0.0, 4.0, 2.0);
        let d = ConvexPolygon::axis_aligned_rect(5.0, 5.0, 6.0, 6.0);
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c), "shared edge is not an overlap");
        assert!(!a.overlaps(&d));
    }

    #[test]
    fn classify_errors_on_double_containment() {
        let cfg = AreaConfig {
            crossings: [
                ConvexPolygon::axis_aligned_rect(0.0, 0.0, 2.0, 2.0),
                ConvexPolygon::axis_aligned_rect(1.0, 1.0, 3.0, 3.0),
                ConvexPolygon::axis_aligned_rect(10.0, 0.0, 12.0, 2.0),
                ConvexPolygon::axis_aligned_rect(20.0, 0.0, 22.0, 2.0),
            ],
        };
        assert!(cfg.validate().is_err());
        assert!(matches!(
            cfg.classify((1.5, 1.5)),
            Err(AreaError::OverlappingAreaConfig { .. })
        ));
        assert_eq!(cfg.classify((11.0, 1.0)).unwrap(), Area::Crossing3);
        assert_eq!(cfg.classify((50.0, 50.0)).unwrap(), Area::VehicleArea);
    }
}
