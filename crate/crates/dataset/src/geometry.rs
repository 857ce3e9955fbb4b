//! Planar polygons in a projected (metric) coordinate system.

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

pub type Coord = [f64; 2];

/// Axis-aligned rectangle `[min_x, max_x] x [min_y, max_y]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bbox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self { min_x, min_y, max_x, max_y }
    }

    /// Square of side `side` centred on `(cx, cy)`.
    pub fn square(cx: f64, cy: f64, side: f64) -> Self {
        let h = side / 2.0;
        Self::new(cx - h, cy - h, cx + h, cy + h)
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Coord {
        [(self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0]
    }

    /// True when the interiors overlap.
    pub fn intersects(&self, other: &Bbox) -> bool {
        self.min_x < other.max_x && other.min_x < self.max_x && self.min_y < other.max_y && other.min_y < self.max_y
    }

    fn extend(&mut self, p: Coord) {
        self.min_x = self.min_x.min(p[0]);
        self.min_y = self.min_y.min(p[1]);
        self.max_x = self.max_x.max(p[0]);
        self.max_y = self.max_y.max(p[1]);
    }
}

/// A polygon with one exterior ring and any number of holes. Rings are
/// stored open (the closing vertex is not repeated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<Coord>,
    #[serde(default)]
    pub holes: Vec<Vec<Coord>>,
}

/// Twice the signed area of a ring; positive for counter-clockwise.
fn ring_area2(ring: &[Coord]) -> f64 {
    let n = ring.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    s
}

fn orient(a: Coord, b: Coord, c: Coord) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Coord, b: Coord, p: Coord) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test, touching and collinear overlap included.
pub fn segments_intersect(p1: Coord, p2: Coord, q1: Coord, q2: Coord) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Drops a repeated closing vertex and consecutive duplicates.
fn clean_ring(ring: &[Coord]) -> Vec<Coord> {
    let mut out: Vec<Coord> = Vec::with_capacity(ring.len());
    for &p in ring {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    // Remove vertices where the boundary doubles back on itself.
    let mut changed = true;
    while changed && out.len() >= 3 {
        changed = false;
        let n = out.len();
        for i in 0..n {
            let (a, b, c) = (out[(i + n - 1) % n], out[i], out[(i + 1) % n]);
            let backtrack = orient(a, b, c) == 0.0 && (b[0] - a[0]) * (c[0] - b[0]) + (b[1] - a[1]) * (c[1] - b[1]) <= 0.0;
            if backtrack {
                out.remove(i);
                changed = true;
                break;
            }
        }
    }
    out
}

impl Polygon {
    pub fn new(exterior: Vec<Coord>, holes: Vec<Vec<Coord>>) -> Self {
        Self { exterior, holes }
    }

    /// Axis-aligned rectangle with counter-clockwise exterior.
    pub fn rect(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self::new(vec![[min_x, min_y], [max_x, min_y], [max_x, max_y], [min_x, max_y]], vec![])
    }

    fn rings(&self) -> impl Iterator<Item = &Vec<Coord>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    /// Exterior area minus hole areas.
    pub fn area(&self) -> f64 {
        let ext = ring_area2(&self.exterior).abs();
        let holes: f64 = self.holes.iter().map(|h| ring_area2(h).abs()).sum();
        (ext - holes) / 2.0
    }

    /// Area-weighted centroid, holes subtracted.
    pub fn centroid(&self) -> Option<Coord> {
        let mut a_sum = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for (k, ring) in self.rings().enumerate() {
            let a2 = ring_area2(ring);
            let sign = if k == 0 { a2.signum() } else { -a2.signum() };
            let n = ring.len();
            for i in 0..n {
                let (p, q) = (ring[i], ring[(i + 1) % n]);
                let cross = (p[0] * q[1] - q[0] * p[1]) * sign;
                cx += (p[0] + q[0]) * cross;
                cy += (p[1] + q[1]) * cross;
            }
            a_sum += a2.abs() * if k == 0 { 1.0 } else { -1.0 };
        }
        if a_sum <= 0.0 {
            return None;
        }
        Some([cx / (3.0 * a_sum), cy / (3.0 * a_sum)])
    }

    pub fn bbox(&self) -> Bbox {
        let first = self.exterior.first().copied().unwrap_or([0.0, 0.0]);
        let mut b = Bbox::new(first[0], first[1], first[0], first[1]);
        for &p in &self.exterior {
            b.extend(p);
        }
        b
    }

    /// Even-odd point-in-polygon over all rings. Points on a left or bottom
    /// edge count as inside, on a right or top edge as outside, so
    /// abutting polygons never share a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in self.rings() {
            let n = ring.len();
            let mut j = n.wrapping_sub(1);
            for i in 0..n {
                let (a, b) = (ring[i], ring[j]);
                if (a[1] > y) != (b[1] > y) {
                    let xi = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                    if x < xi {
                        inside = !inside;
                    }
                }
                j = i;
            }
        }
        inside
    }

    fn edges(&self) -> Vec<(usize, usize, Coord, Coord)> {
        let mut out = Vec::new();
        for (r, ring) in self.rings().enumerate() {
            let n = ring.len();
            for i in 0..n {
                out.push((r, i, ring[i], ring[(i + 1) % n]));
            }
        }
        out
    }

    /// No ring crosses or touches itself or another ring, except for the
    /// shared vertex between consecutive edges.
    pub fn is_simple(&self) -> bool {
        let edges = self.edges();
        let ring_len = |r: usize| if r == 0 { self.exterior.len() } else { self.holes[r - 1].len() };
        for (i, &(ri, ei, a, b)) in edges.iter().enumerate() {
            for &(rj, ej, c, d) in &edges[i + 1..] {
                if ri == rj {
                    let n = ring_len(ri);
                    if (ei + 1) % n == ej || (ej + 1) % n == ei {
                        // Adjacent edges: only collinear overlap beyond the shared vertex is invalid.
                        let (shared, p, q) = if (ei + 1) % n == ej { (b, a, d) } else { (a, b, c) };
                        let dot = (p[0] - shared[0]) * (q[0] - shared[0]) + (p[1] - shared[1]) * (q[1] - shared[1]);
                        if orient(p, shared, q) == 0.0 && dot > 0.0 {
                            return false;
                        }
                        continue;
                    }
                }
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Light repair: drops closing and duplicate vertices and zero-width
    /// spikes, orients the exterior counter-clockwise and holes clockwise,
    /// then requires a simple polygon with positive area.
    pub fn repaired(&self) -> Result<Polygon> {
        let all_finite = self.rings().flatten().all(|p| p[0].is_finite() && p[1].is_finite());
        if !all_finite {
            return Err(DataError::Geometry("non-finite coordinate".into()));
        }
        let mut exterior = clean_ring(&self.exterior);
        if exterior.len() < 3 || ring_area2(&exterior) == 0.0 {
            return Err(DataError::Geometry("degenerate exterior ring".into()));
        }
        if ring_area2(&exterior) < 0.0 {
            exterior.reverse();
        }
        let mut holes = Vec::new();
        for h in &self.holes {
            let mut h = clean_ring(h);
            if h.len() < 3 || ring_area2(&h) == 0.0 {
                continue;
            }
            if ring_area2(&h) > 0.0 {
                h.reverse();
            }
            holes.push(h);
        }
        let p = Polygon { exterior, holes };
        if !p.is_simple() {
            return Err(DataError::Geometry("self-intersecting ring".into()));
        }
        if p.area() <= 0.0 {
            return Err(DataError::Geometry("non-positive area".into()));
        }
        Ok(p)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        let mv = |r: &Vec<Coord>| r.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        Polygon {
            exterior: mv(&self.exterior),
            holes: self.holes.iter().map(mv).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_area_and_centroid() {
        let p = Polygon::rect(0.0, 0.0, 4.0, 2.0);
        assert_eq!(p.area(), 8.0);
        assert_eq!(p.centroid(), Some([2.0, 1.0]));
        let cw = Polygon::new(p.exterior.iter().rev().copied().collect(), vec![]);
        assert_eq!(cw.area(), 8.0);
        assert_eq!(cw.centroid(), Some([2.0, 1.0]));
    }

    #[test]
    fn hole_reduces_area_and_containment() {
        let p = Polygon::new(
            Polygon::rect(0.0, 0.0, 10.0, 10.0).exterior,
            vec![Polygon::rect(4.0, 4.0, 6.0, 6.0).exterior],
        );
        assert_eq!(p.area(), 96.0);
        assert!(p.contains(1.0, 1.0));
        assert!(!p.contains(5.0, 5.0));
        let c = p.centroid().unwrap();
        assert!((c[0] - 5.0).abs() < 1e-12 && (c[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn half_open_boundaries() {
        let p = Polygon::rect(0.0, 0.0, 2.0, 2.0);
        assert!(p.contains(0.0, 0.0));
        assert!(!p.contains(2.0, 1.0));
        assert!(!p.contains(1.0, 2.0));
    }

    #[test]
    fn bowtie_is_not_simple() {
        let bowtie = Polygon::new(vec![[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0]], vec![]);
        assert!(!bowtie.is_simple());
        assert!(bowtie.repaired().is_err());
    }

    #[test]
    fn repair_drops_closing_vertex_and_spikes() {
        let ring = vec![[0.0, 0.0], [3.0, 0.0], [3.0, 0.0], [5.0, 0.0], [3.0, 0.0], [3.0, 3.0], [0.0, 3.0], [0.0, 0.0]];
        let p = Polygon::new(ring, vec![]).repaired().unwrap();
        assert_eq!(p.area(), 9.0);
        assert_eq!(p.exterior.len(), 4);
    }

    #[test]
    fn segment_cases() {
        assert!(segments_intersect([0., 0.], [2., 2.], [0., 2.], [2., 0.]));
        assert!(segments_intersect([0., 0.], [2., 0.], [1., 0.], [3., 0.]));
        assert!(!segments_intersect([0., 0.], [1., 0.], [2., 0.], [3., 0.]));
        assert!(segments_intersect([0., 0.], [2., 0.], [2., 0.], [2., 5.]));
    }
}
