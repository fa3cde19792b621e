//! Smooth hole boundaries with trapezoidal quadrature data.
//!
//! Curves are parametrized counterclockwise over `[0, 2π)` on equispaced
//! nodes; the normal points out of the enclosed region. All model holes live
//! at unit-cell scale inside the ball of radius 1/3.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Radius of the ball that must contain the closure of a model hole.
pub const CONTAINMENT_RADIUS: f64 = 1.0 / 3.0;

/// Practical cap on the number of components of a model hole.
pub const MAX_COMPONENTS: usize = 8;

/// Analytic description of a closed curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CurveKind {
    Circle { center: Point, radius: f64 },
    Ellipse { center: Point, a: f64, b: f64, rotation: f64 },
}

impl CurveKind {
    pub fn center(&self) -> Point {
        match *self {
            CurveKind::Circle { center, .. } | CurveKind::Ellipse { center, .. } => center,
        }
    }

    /// Position, first and second parameter derivatives at `t`.
    fn eval(&self, t: f64) -> (Point, Point, Point) {
        let (c, a, b, rot) = match *self {
            CurveKind::Circle { center, radius } => (center, radius, radius, 0.0),
            CurveKind::Ellipse { center, a, b, rotation } => (center, a, b, rotation),
        };
        let (s, co) = t.sin_cos();
        let (sr, cr) = rot.sin_cos();
        let rotate = |v: Point| [cr * v[0] - sr * v[1], sr * v[0] + cr * v[1]];
        let p = rotate([a * co, b * s]);
        let d1 = rotate([-a * s, b * co]);
        let d2 = rotate([-a * co, -b * s]);
        ([c[0] + p[0], c[1] + p[1]], d1, d2)
    }

    /// Image under `x -> scale * x + shift`.
    pub fn transformed(&self, scale: f64, shift: Point) -> CurveKind {
        let map = |c: Point| [scale * c[0] + shift[0], scale * c[1] + shift[1]];
        match *self {
            CurveKind::Circle { center, radius } => CurveKind::Circle {
                center: map(center),
                radius: scale * radius,
            },
            CurveKind::Ellipse { center, a, b, rotation } => CurveKind::Ellipse {
                center: map(center),
                a: scale * a,
                b: scale * b,
                rotation,
            },
        }
    }

    /// Largest distance from the origin over the curve.
    fn max_radius(&self) -> f64 {
        match *self {
            CurveKind::Circle { center, radius } => norm(center) + radius,
            CurveKind::Ellipse { .. } => (0..4096)
                .map(|i| norm(self.eval(2.0 * PI * i as f64 / 4096.0).0))
                .fold(0.0, f64::max),
        }
    }
}

/// A parametrized smooth closed curve carrying Nyström quadrature data.
#[derive(Clone, Debug)]
pub struct ClosedCurve {
    kind: CurveKind,
    pub params: Vec<f64>,
    pub points: Vec<Point>,
    pub tangents: Vec<Point>,
    pub normals: Vec<Point>,
    pub speeds: Vec<f64>,
    pub weights: Vec<f64>,
    /// Signed curvature, positive for convex counterclockwise curves.
    pub curvature: Vec<f64>,
}

impl ClosedCurve {
    /// Discretize `kind` on `n_nodes` equispaced parameters. No containment check.
    pub fn from_kind(kind: CurveKind, n_nodes: usize) -> Result<Self> {
        if n_nodes < 8 || n_nodes % 2 != 0 {
            return Err(Error::Invalid(format!(
                "n_nodes must be an even integer >= 8, got {n_nodes}"
            )));
        }
        match kind {
            CurveKind::Circle { radius, .. } if !(radius > 0.0) => {
                return Err(Error::Geometry(format!("radius must be positive, got {radius}")))
            }
            CurveKind::Ellipse { a, b, .. } if !(a > 0.0 && b > 0.0) => {
                return Err(Error::Geometry(format!("semi-axes must be positive, got {a}, {b}")))
            }
            _ => {}
        }
        let h = 2.0 * PI / n_nodes as f64;
        let mut curve = ClosedCurve {
            kind,
            params: Vec::with_capacity(n_nodes),
            points: Vec::with_capacity(n_nodes),
            tangents: Vec::with_capacity(n_nodes),
            normals: Vec::with_capacity(n_nodes),
            speeds: Vec::with_capacity(n_nodes),
            weights: Vec::with_capacity(n_nodes),
            curvature: Vec::with_capacity(n_nodes),
        };
        for i in 0..n_nodes {
            let t = h * i as f64;
            let (p, d1, d2) = kind.eval(t);
            let speed = norm(d1);
            let tangent = [d1[0] / speed, d1[1] / speed];
            curve.params.push(t);
            curve.points.push(p);
            curve.tangents.push(tangent);
            curve.normals.push([tangent[1], -tangent[0]]);
            curve.speeds.push(speed);
            curve.weights.push(h * speed);
            curve.curvature.push((d1[0] * d2[1] - d1[1] * d2[0]) / speed.powi(3));
        }
        Ok(curve)
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn n_nodes(&self) -> usize {
        self.points.len()
    }

    /// Largest arclength spacing between consecutive nodes.
    pub fn spacing(&self) -> f64 {
        let h = 2.0 * PI / self.n_nodes() as f64;
        self.speeds.iter().fold(0.0_f64, |m, &s| m.max(s * h))
    }

    pub fn perimeter(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Enclosed area by the divergence theorem, `½∮ x·N ds`.
    pub fn area(&self) -> f64 {
        0.5 * self
            .points
            .iter()
            .zip(&self.normals)
            .zip(&self.weights)
            .map(|((p, n), w)| (p[0] * n[0] + p[1] * n[1]) * w)
            .sum::<f64>()
    }

    /// Same curve on `factor` times as many nodes.
    pub fn refined(&self, factor: usize) -> ClosedCurve {
        ClosedCurve::from_kind(self.kind, self.n_nodes() * factor.max(1))
            .expect("refinement of a valid curve")
    }

    pub fn transformed(&self, scale: f64, shift: Point) -> ClosedCurve {
        ClosedCurve::from_kind(self.kind.transformed(scale, shift), self.n_nodes())
            .expect("affine image of a valid curve")
    }

    /// Point at an arbitrary parameter value.
    pub fn point_at(&self, t: f64) -> Point {
        self.kind.eval(t).0
    }

    /// Point, unit tangent, outward normal and speed at parameter `t`.
    pub fn frame_at(&self, t: f64) -> (Point, Point, Point, f64) {
        let (p, d1, _) = self.kind.eval(t);
        let speed = norm(d1);
        let tangent = [d1[0] / speed, d1[1] / speed];
        (p, tangent, [tangent[1], -tangent[0]], speed)
    }

    /// Winding number of the curve around `x`, rounded.
    pub fn winding_number(&self, x: Point) -> i64 {
        let n = self.n_nodes();
        let mut total = 0.0;
        for i in 0..n {
            let a = sub(self.points[i], x);
            let b = sub(self.points[(i + 1) % n], x);
            total += (a[0] * b[1] - a[1] * b[0]).atan2(a[0] * b[0] + a[1] * b[1]);
        }
        (total / (2.0 * PI)).round() as i64
    }

    /// Debug hook: scale one quadrature weight by `1 + rel`.
    pub fn perturb_weight(&mut self, index: usize, rel: f64) {
        self.weights[index] *= 1.0 + rel;
    }
}

/// Weighted trapezoidal rule `Σ wᵢ vᵢ ≈ ∫ v ds`.
pub fn boundary_integral(curve: &ClosedCurve, values: &[f64]) -> Result<f64> {
    if values.len() != curve.n_nodes() {
        return Err(Error::Invalid(format!(
            "expected {} nodal values, got {}",
            curve.n_nodes(),
            values.len()
        )));
    }
    Ok(curve.weights.iter().zip(values).map(|(w, v)| w * v).sum())
}

fn check_containment(kind: &CurveKind) -> Result<()> {
    let r = kind.max_radius();
    if r >= CONTAINMENT_RADIUS {
        return Err(Error::Geometry(format!(
            "assumption (A1) violated: curve reaches radius {r:.6}, violates T ⊂ B_{{1/3}}"
        )));
    }
    Ok(())
}

/// Circle of the given radius and center, checked against `T ⊂ B_{1/3}`.
pub fn make_circle(radius: f64, center: Point, n_nodes: usize) -> Result<ClosedCurve> {
    let kind = CurveKind::Circle { center, radius };
    let curve = ClosedCurve::from_kind(kind, n_nodes)?;
    check_containment(&kind)?;
    Ok(curve)
}

/// Rotated ellipse with semi-axes `a`, `b`, checked against `T ⊂ B_{1/3}`.
pub fn make_ellipse(a: f64, b: f64, center: Point, rotation: f64, n_nodes: usize) -> Result<ClosedCurve> {
    let kind = CurveKind::Ellipse { center, a, b, rotation };
    let curve = ClosedCurve::from_kind(kind, n_nodes)?;
    check_containment(&kind)?;
    Ok(curve)
}

/// Model hole: a union of disjoint smooth closed curves, or the analytic
/// sphere of radius `sphere_radius` in three dimensions.
#[derive(Clone, Debug)]
pub struct HoleShape {
    pub components: Vec<ClosedCurve>,
    pub area: f64,
    pub dim: usize,
    sphere_radius: Option<f64>,
    offsets: Vec<usize>,
}

impl HoleShape {
    pub fn new(components: Vec<ClosedCurve>) -> Result<Self> {
        Self::build(components, true)
    }

    /// Scaled copies used as physical holes; containment is not rechecked.
    pub(crate) fn new_unchecked(components: Vec<ClosedCurve>) -> Self {
        Self::build(components, false).expect("disjointness is preserved by affine maps")
    }

    fn build(components: Vec<ClosedCurve>, check: bool) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Geometry("a hole needs at least one component".into()));
        }
        if components.len() > MAX_COMPONENTS {
            return Err(Error::Geometry(format!(
                "at most {MAX_COMPONENTS} components per cell, got {}",
                components.len()
            )));
        }
        if check {
            for (i, a) in components.iter().enumerate() {
                for b in &components[i + 1..] {
                    let dmin = a
                        .points
                        .iter()
                        .flat_map(|p| b.points.iter().map(move |q| norm(sub(*p, *q))))
                        .fold(f64::INFINITY, f64::min);
                    let nested = a.winding_number(b.points[0]) != 0 || b.winding_number(a.points[0]) != 0;
                    if dmin <= 0.0 || nested {
                        return Err(Error::Geometry("hole components must have disjoint interiors".into()));
                    }
                }
            }
        }
        let mut offsets = vec![0];
        for c in &components {
            offsets.push(offsets.last().unwrap() + c.n_nodes());
        }
        let area = components.iter().map(ClosedCurve::area).sum();
        Ok(HoleShape { components, area, dim: 2, sphere_radius: None, offsets })
    }

    /// Analytic sphere tag for three-dimensional cross-checks.
    pub fn sphere(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || radius >= CONTAINMENT_RADIUS {
            return Err(Error::Geometry(format!(
                "sphere radius {radius} violates T ⊂ B_{{1/3}}"
            )));
        }
        Ok(HoleShape {
            components: Vec::new(),
            area: 4.0 * PI * radius.powi(3) / 3.0,
            dim: 3,
            sphere_radius: Some(radius),
            offsets: vec![0],
        })
    }

    pub fn sphere_radius(&self) -> Option<f64> {
        self.sphere_radius
    }

    pub fn n_total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Node range of component `c` in the flattened ordering.
    pub fn range(&self, c: usize) -> std::ops::Range<usize> {
        self.offsets[c]..self.offsets[c + 1]
    }

    /// Component index and local index of flattened node `i`.
    pub fn locate(&self, i: usize) -> (usize, usize) {
        let c = self.offsets.partition_point(|&o| o <= i) - 1;
        (c, i - self.offsets[c])
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> + '_ {
        self.components.iter().flat_map(|c| c.points.iter())
    }

    pub fn normals(&self) -> impl Iterator<Item = &Point> + '_ {
        self.components.iter().flat_map(|c| c.normals.iter())
    }

    pub fn weights(&self) -> impl Iterator<Item = &f64> + '_ {
        self.components.iter().flat_map(|c| c.weights.iter())
    }

    pub fn perimeter(&self) -> f64 {
        self.components.iter().map(ClosedCurve::perimeter).sum()
    }

    /// `∫_{∂T} v ds` over all components.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Component `k` of the outward normal field, flattened.
    pub fn normal_component(&self, k: usize) -> Vec<f64> {
        self.normals().map(|n| n[k]).collect()
    }

    pub fn refined(&self, factor: usize) -> HoleShape {
        let mut s = HoleShape::new_unchecked(self.components.iter().map(|c| c.refined(factor)).collect());
        s.area = self.area;
        s
    }

    pub fn transformed(&self, scale: f64, shift: Point) -> HoleShape {
        HoleShape::new_unchecked(self.components.iter().map(|c| c.transformed(scale, shift)).collect())
    }

    /// Largest distance from the origin to the boundary.
    pub fn max_radius(&self) -> f64 {
        if let Some(r) = self.sphere_radius {
            return r;
        }
        self.points().map(|p| norm(*p)).fold(0.0, f64::max)
    }

    /// Minimum distance from `x` to a boundary node and the spacing of that component.
    pub fn nearest_node(&self, x: Point) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for c in &self.components {
            let d = c.points.iter().map(|p| norm(sub(*p, x))).fold(f64::INFINITY, f64::min);
            if d < best.0 {
                best = (d, c.spacing());
            }
        }
        best
    }

    /// True when `x` lies inside one of the components.
    pub fn contains(&self, x: Point) -> bool {
        self.components.iter().any(|c| c.winding_number(x) != 0)
    }

    /// Canonical text form of the shape (`sphere:R` for the analytic sphere).
    pub fn label(&self) -> String {
        if let Some(r) = self.sphere_radius {
            return format!("sphere:{r}");
        }
        let spec = |c: &ClosedCurve| match c.kind() {
            CurveKind::Circle { center, radius } => ShapeSpec::Circle { radius, center },
            CurveKind::Ellipse { center, a, b, rotation } => ShapeSpec::Ellipse { a, b, rotation, center },
        };
        match self.components.as_slice() {
            [one] => spec(one).to_string(),
            many => ShapeSpec::Multi(many.iter().map(spec).collect()).to_string(),
        }
    }

    /// Every component shares the square symmetry of the lattice.
    pub fn is_square_symmetric(&self) -> bool {
        self.components.len() == 1
            && matches!(self.components[0].kind(), CurveKind::Circle { center, .. } if norm(center) < 1e-14)
    }
}

/// Textual shape description accepted on the command line.
///
/// `circle:R[@X,Y]`, `ellipse:A,B[,ROT][@X,Y]`, and `multi:SPEC|SPEC|...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeSpec {
    Circle { radius: f64, center: Point },
    Ellipse { a: f64, b: f64, rotation: f64, center: Point },
    Multi(Vec<ShapeSpec>),
}

impl ShapeSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (kind, rest) = text
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("shape spec '{text}' lacks a kind prefix")))?;
        if kind == "multi" {
            let parts = rest.split('|').map(ShapeSpec::parse).collect::<Result<Vec<_>>>()?;
            if parts.iter().any(|p| matches!(p, ShapeSpec::Multi(_))) {
                return Err(Error::Invalid("nested multi shapes are not allowed".into()));
            }
            return Ok(ShapeSpec::Multi(parts));
        }
        let (nums, center) = match rest.split_once('@') {
            Some((n, c)) => {
                let c = parse_list(c)?;
                if c.len() != 2 {
                    return Err(Error::Invalid(format!("center '{rest}' needs two coordinates")));
                }
                (n, [c[0], c[1]])
            }
            None => (rest, [0.0, 0.0]),
        };
        let v = parse_list(nums)?;
        match (kind, v.len()) {
            ("circle", 1) => Ok(ShapeSpec::Circle { radius: v[0], center }),
            ("ellipse", 2) => Ok(ShapeSpec::Ellipse { a: v[0], b: v[1], rotation: 0.0, center }),
            ("ellipse", 3) => Ok(ShapeSpec::Ellipse { a: v[0], b: v[1], rotation: v[2], center }),
            _ => Err(Error::Invalid(format!("unrecognized shape spec '{text}'"))),
        }
    }

    pub fn build(&self, n_nodes: usize) -> Result<HoleShape> {
        let curve = |s: &ShapeSpec| match *s {
            ShapeSpec::Circle { radius, center } => make_circle(radius, center, n_nodes),
            ShapeSpec::Ellipse { a, b, rotation, center } => make_ellipse(a, b, center, rotation, n_nodes),
            ShapeSpec::Multi(_) => unreachable!("nesting rejected at parse time"),
        };
        match self {
            ShapeSpec::Multi(parts) => HoleShape::new(parts.iter().map(curve).collect::<Result<_>>()?),
            single => HoleShape::new(vec![curve(single)?]),
        }
    }
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = |c: &Point| {
            if c[0] == 0.0 && c[1] == 0.0 {
                String::new()
            } else {
                format!("@{},{}", c[0], c[1])
            }
        };
        match self {
            ShapeSpec::Circle { radius, center } => write!(f, "circle:{radius}{}", at(center)),
            ShapeSpec::Ellipse { a, b, rotation, center } => {
                write!(f, "ellipse:{a},{b},{rotation}{}", at(center))
            }
            ShapeSpec::Multi(parts) => {
                let joined: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                write!(f, "multi:{}", joined.join("|"))
            }
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Invalid(format!("cannot parse number '{x}'")))
        })
        .collect()
}

#[inline]
pub fn norm(p: Point) -> f64 {
    p[0].hypot(p[1])
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
