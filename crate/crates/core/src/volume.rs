//! Composite area quadratures around holes.
//!
//! Near a component the region is parametrized by the star map
//! `x = c + s(γ(t) − c)`, trapezoidal in `t` and Gauss–Legendre panels in
//! `log s`. Away from the holes a periodic tensor grid takes over through a
//! smooth radial partition of unity, so every piece integrates a smooth
//! integrand.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{norm, sub, ClosedCurve, HoleShape, Point};
use crate::layer::{GUARD_FACTOR, MAX_UPSAMPLE};

const GL8_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Width of a log-radial panel.
const PANEL_WIDTH: f64 = 0.4;

/// Panels spent on the partition-of-unity transition.
const TRANSITION_PANELS: usize = 16;

/// Radial GL8 panel width of the background grid, in units of its spacing.
pub const BACKGROUND_PANEL: f64 = 4.0;

/// A list of weighted points.
#[derive(Clone, Debug, Default)]
pub struct VolumeRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl VolumeRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Point, w: f64) {
        if w != 0.0 {
            self.points.push(p);
            self.weights.push(w);
        }
    }

    pub fn extend(&mut self, other: VolumeRule) {
        self.points.extend(other.points);
        self.weights.extend(other.weights);
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ wᵢ f(xᵢ)` evaluated in parallel and reduced in a fixed order.
    pub fn integrate<const M: usize, F>(&self, f: F) -> Result<[f64; M]>
    where
        F: Fn(Point) -> Result<[f64; M]> + Sync,
    {
        let values: Vec<Result<[f64; M]>> = self.points.par_iter().map(|&p| f(p)).collect();
        let mut acc = [0.0; M];
        for (v, w) in values.into_iter().zip(&self.weights) {
            let v = v?;
            for k in 0..M {
                acc[k] += w * v[k];
            }
        }
        Ok(acc)
    }
}

/// Smooth step: 1 for `r ≤ r_in`, 0 for `r ≥ r_out`.
pub fn bump(r: f64, r_in: f64, r_out: f64) -> f64 {
    if r <= r_in {
        return 1.0;
    }
    if r >= r_out {
        return 0.0;
    }
    let u = (r_out - r) / (r_out - r_in);
    let f = |x: f64| if x <= 0.0 { 0.0 } else { (-1.0 / x).exp() };
    f(u) / (f(u) + f(1.0 - u))
}

fn gl_panels(edges: &[f64], out: &mut Vec<(f64, f64)>) {
    for pair in edges.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi <= lo {
            continue;
        }
        let half = 0.5 * (hi - lo);
        for (xi, wi) in GL8_NODES.iter().zip(&GL8_WEIGHTS) {
            out.push((lo + half * (xi + 1.0), half * wi));
        }
    }
}

/// Panel edges on `[0, umax]`: a short first panel, uniform panels up to
/// `u_transition`, then a fixed number of panels across the transition.
fn radial_edges(umax: f64, first: f64, u_transition: f64, transition_panels: usize) -> Vec<f64> {
    let mut edges = vec![0.0];
    let first = first.min(umax);
    edges.push(first);
    let ut = u_transition.clamp(first, umax);
    if ut > first {
        let count = ((ut - first) / PANEL_WIDTH).ceil() as usize;
        for i in 1..=count {
            edges.push(first + (ut - first) * i as f64 / count as f64);
        }
    }
    if umax > ut {
        let count = if u_transition < umax { transition_panels } else { 1 };
        for i in 1..=count {
            edges.push(ut + (umax - ut) * i as f64 / count as f64);
        }
    }
    edges
}

/// Center used for the star map of a component.
pub fn component_center(curve: &ClosedCurve) -> Point {
    curve.kind().center()
}

fn reach(curve: &ClosedCurve, c: Point) -> (f64, f64) {
    let d: Vec<f64> = curve.points.iter().map(|p| norm(sub(*p, c))).collect();
    (d.iter().cloned().fold(f64::INFINITY, f64::min), d.iter().cloned().fold(0.0, f64::max))
}

/// Smallest log-radial offset keeping the first node outside the evaluation guard.
fn first_panel(curve: &ClosedCurve, rmin: f64) -> f64 {
    let guard = GUARD_FACTOR * curve.spacing() / MAX_UPSAMPLE as f64;
    let offset = 0.5 * (1.0 + GL8_NODES[0]);
    (4.0 * guard / (offset * rmin)).max(0.05).min(PANEL_WIDTH)
}

/// Star-map rule for `{c + s(γ(t) − c) : 1 ≤ s ≤ s_max(t)}` where `s_max(t)` puts
/// the outer edge on the circle `|x − c| = r_outer`, with weights multiplied by
/// `weight(x)`.
fn star_exterior(
    curve: &ClosedCurve,
    r_transition: f64,
    r_outer: f64,
    n_t: usize,
    transition_panels: usize,
    weight: &dyn Fn(Point) -> f64,
) -> VolumeRule {
    let c = component_center(curve);
    let (rmin, _) = reach(curve, c);
    let first = first_panel(curve, rmin);
    let mut rule = VolumeRule::default();
    let ht = 2.0 * PI / n_t as f64;
    for i in 0..n_t {
        let t = ht * i as f64;
        let (p, tangent, _, speed) = curve.frame_at(t);
        let rel = sub(p, c);
        let cross = (rel[0] * tangent[1] - rel[1] * tangent[0]) * speed;
        let umax = (r_outer / norm(rel)).ln();
        let ut = (r_transition / norm(rel)).ln();
        let mut nodes = Vec::new();
        if ut < umax {
            gl_panels(&radial_edges(umax, first, ut, transition_panels), &mut nodes);
        } else {
            let count = ((umax - first).max(0.0) / PANEL_WIDTH).ceil() as usize;
            let mut edges = vec![0.0, first.min(umax)];
            for i in 1..=count {
                edges.push(first + (umax - first) * i as f64 / count as f64);
            }
            gl_panels(&edges, &mut nodes);
        }
        for (u, wu) in nodes {
            let s = u.exp();
            let x = [c[0] + s * rel[0], c[1] + s * rel[1]];
            // dx = J ds dt with J = s|(γ − c) × γ'| and ds = s du
            rule.push(x, ht * wu * s * s * cross * weight(x));
        }
    }
    rule
}

/// Rule for the interior of one component.
pub fn component_interior(curve: &ClosedCurve, n_t: usize) -> VolumeRule {
    let c = component_center(curve);
    let (rmin, _) = reach(curve, c);
    let guard = GUARD_FACTOR * curve.spacing() / MAX_UPSAMPLE as f64;
    let offset = 0.5 * (1.0 + GL8_NODES[0]);
    let last = (4.0 * guard / (offset * rmin)).max(0.05).min(0.3);
    let mut nodes = Vec::new();
    // panels graded toward the boundary s = 1
    let edges = [0.0, 0.4, 0.7, 1.0 - last, 1.0];
    for pair in edges.windows(2) {
        let half = 0.5 * (pair[1] - pair[0]);
        for (xi, wi) in GL8_NODES.iter().zip(&GL8_WEIGHTS) {
            nodes.push((pair[0] + half * (xi + 1.0), half * wi));
        }
    }
    let mut rule = VolumeRule::default();
    let ht = 2.0 * PI / n_t as f64;
    for i in 0..n_t {
        let t = ht * i as f64;
        let (p, tangent, _, speed) = curve.frame_at(t);
        let rel = sub(p, c);
        let cross = (rel[0] * tangent[1] - rel[1] * tangent[0]) * speed;
        for &(s, ws) in &nodes {
            rule.push([c[0] + s * rel[0], c[1] + s * rel[1]], ht * ws * s * cross);
        }
    }
    rule
}

/// Rule for the interior of every component of the hole.
pub fn hole_interior(shape: &HoleShape) -> VolumeRule {
    let mut rule = VolumeRule::default();
    for c in &shape.components {
        rule.extend(component_interior(c, 2 * c.n_nodes()));
    }
    rule
}

/// Truncated free-space exterior `{x ∉ T : |x − c| ≤ radius}` for a single component.
pub fn free_exterior(shape: &HoleShape, radius: f64) -> Result<VolumeRule> {
    if shape.components.len() != 1 {
        return Err(Error::Unsupported("free-space exterior rule needs a single component".into()));
    }
    let curve = &shape.components[0];
    let (_, rmax) = reach(curve, component_center(curve));
    if radius <= rmax {
        return Err(Error::Domain(format!("truncation radius {radius} does not enclose the hole")));
    }
    Ok(star_exterior(curve, f64::INFINITY, radius, 2 * curve.n_nodes(), TRANSITION_PANELS, &|_| 1.0))
}

/// Exterior of the hole inside the periodicity cell `[−L/2, L/2)²`.
///
/// The integrand must be `L`-periodic for spectral accuracy of the grid part.
pub fn cell_exterior(shape: &HoleShape, cell_width: f64) -> Result<VolumeRule> {
    let half = 0.5 * cell_width;
    let centers: Vec<Point> = shape.components.iter().map(component_center).collect();
    let mut radii = Vec::new();
    for (k, curve) in shape.components.iter().enumerate() {
        let c = centers[k];
        let (_, rmax) = reach(curve, c);
        let r_in = 1.1 * rmax;
        let mut r_out = 0.95 * (half - c[0].abs().max(c[1].abs()));
        for (m, other) in centers.iter().enumerate() {
            if m != k {
                let (_, om) = reach(&shape.components[m], *other);
                r_out = r_out.min(norm(sub(c, *other)) - 1.05 * om);
            }
        }
        if r_out <= 1.2 * r_in {
            return Err(Error::Geometry(format!(
                "hole component {k} leaves no room for the quadrature transition in a cell of width {cell_width}"
            )));
        }
        radii.push((r_in, r_out));
    }
    let pou = |x: Point| -> f64 {
        centers
            .iter()
            .zip(&radii)
            .map(|(c, (ri, ro))| bump(norm(sub(x, *c)), *ri, *ro))
            .sum()
    };
    let mut rule = VolumeRule::default();
    for (k, curve) in shape.components.iter().enumerate() {
        let (ri, ro) = radii[k];
        let c = centers[k];
        let near = move |x: Point| bump(norm(sub(x, c)), ri, ro);
        rule.extend(star_exterior(curve, ri, ro, 2 * curve.n_nodes(), TRANSITION_PANELS, &near));
    }
    let width = radii.iter().map(|(ri, ro)| ro - ri).fold(f64::INFINITY, f64::min);
    let mut n = ((cell_width / (width / 48.0)).ceil() as usize).max(32);
    n += n % 2;
    let h = cell_width / n as f64;
    for i in 0..n {
        for j in 0..n {
            let x = [-half + (i as f64 + 0.5) * h, -half + (j as f64 + 0.5) * h];
            let w = 1.0 - pou(x);
            if w > 0.0 {
                rule.push(x, h * h * w);
            }
        }
    }
    Ok(rule)
}

/// Rule for `{|x| < radius}` minus the holes: star-map rules on the disks of
/// radius `local_radius` around each hole, blended over `[blend_radius, local_radius]`
/// into a polar background grid of the given average spacing. Local points
/// beyond `radius` are dropped.
pub fn perforated_disk(
    holes: &[ClosedCurve],
    radius: f64,
    blend_radius: f64,
    local_radius: f64,
    spacing: f64,
) -> Result<VolumeRule> {
    if !(radius > 0.0 && spacing > 0.0) {
        return Err(Error::Domain("sampling region is empty".into()));
    }
    let centers: Vec<Point> = holes.iter().map(component_center).collect();
    let mut radii = Vec::with_capacity(holes.len());
    for (k, curve) in holes.iter().enumerate() {
        let (_, rmax) = reach(curve, centers[k]);
        let r_in = blend_radius.max(1.1 * rmax);
        if local_radius <= 1.2 * r_in {
            return Err(Error::Geometry(format!("local sampling radius {local_radius} too small for hole {k}")));
        }
        radii.push(r_in);
    }
    // bumps may only overlap when the caller's spacing is too small; the buckets keep the sum cheap
    let cell = 2.0 * local_radius;
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
    for (k, c) in centers.iter().enumerate() {
        buckets.entry(((c[0] / cell).floor() as i64, (c[1] / cell).floor() as i64)).or_default().push(k);
    }
    let pou = |x: Point| -> f64 {
        let (bi, bj) = ((x[0] / cell).floor() as i64, (x[1] / cell).floor() as i64);
        let mut s = 0.0;
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(list) = buckets.get(&(bi + di, bj + dj)) {
                    for &k in list {
                        s += bump(norm(sub(x, centers[k])), radii[k], local_radius);
                    }
                }
            }
        }
        s
    };
    let mut rule = VolumeRule::default();
    for (k, curve) in holes.iter().enumerate() {
        let (c, ri) = (centers[k], radii[k]);
        let near = move |x: Point| bump(norm(sub(x, c)), ri, local_radius);
        let local = star_exterior(curve, ri, local_radius, curve.n_nodes(), 4, &near);
        for (p, w) in local.points.into_iter().zip(local.weights) {
            if norm(p) < radius {
                rule.push(p, w);
            }
        }
    }
    let panels = ((radius / (BACKGROUND_PANEL * spacing)).ceil() as usize).max(1);
    let mut edges: Vec<f64> = (0..=panels).map(|i| radius * i as f64 / panels as f64).collect();
    edges.dedup();
    let mut radial = Vec::new();
    gl_panels(&edges, &mut radial);
    for (p, pair) in edges.windows(2).enumerate() {
        let mut n_theta = ((2.0 * PI * pair[1] / spacing).ceil() as usize).max(16);
        n_theta += n_theta % 2;
        let ht = 2.0 * PI / n_theta as f64;
        for &(r, wr) in &radial[8 * p..8 * (p + 1)] {
            for i in 0..n_theta {
                let t = ht * (i as f64 + 0.5);
                let x = [r * t.cos(), r * t.sin()];
                let w = 1.0 - pou(x);
                if w > 0.0 {
                    rule.push(x, wr * r * ht * w);
                }
            }
        }
    }
    Ok(rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_circle, make_ellipse, CurveKind};

    #[test]
    fn areas_are_exact() {
        let shape = HoleShape::new(vec![make_ellipse(0.25, 0.15, [0.0, 0.0], 0.3, 64).unwrap()]).unwrap();
        let inside = hole_interior(&shape);
        assert!((inside.total_weight() - shape.area).abs() < 1e-12);
        let cell = cell_exterior(&shape, 2.5).unwrap();
        assert!((cell.total_weight() - (6.25 - shape.area)).abs() < 1e-10, "{}", cell.total_weight() - (6.25 - shape.area));
        let free = free_exterior(&shape, 3.0).unwrap();
        assert!((free.total_weight() - (9.0 * PI - shape.area)).abs() < 1e-10);
    }

    #[test]
    fn perforated_disk_area() {
        let holes: Vec<ClosedCurve> = [[0.0, 0.0], [0.25, 0.0], [0.0, -0.5], [0.7, 0.7]]
            .iter()
            .map(|&c| ClosedCurve::from_kind(CurveKind::Circle { center: c, radius: 0.01 }, 32).unwrap())
            .collect();
        let rule = perforated_disk(&holes, 1.0, 0.04, 0.1, 0.01).unwrap();
        // the hole at (0.7, 0.7) straddles the sampled radius; clipping its local rule is first order
        let expected = PI - 3.5 * PI * 1e-4;
        let err = (rule.total_weight() - expected).abs();
        assert!(err < 1e-3, "{}", rule.total_weight() - expected);
        let inner = perforated_disk(&holes[..3], 1.0, 0.04, 0.1, 0.01).unwrap();
        let inner_expected = PI - 3.0 * PI * 1e-4;
        assert!((inner.total_weight() - inner_expected).abs() < 1e-6, "{}", inner.total_weight() - inner_expected);
    }

    #[test]
    fn integrates_decaying_field() {
        // ∫_{r>a}^{R} r^{-4} dx = π(a^{-2} − R^{-2})
        let shape = HoleShape::new(vec![make_circle(0.2, [0.0, 0.0], 64).unwrap()]).unwrap();
        let rule = free_exterior(&shape, 10.0).unwrap();
        let [v] = rule.integrate(|x| Ok([(x[0] * x[0] + x[1] * x[1]).powi(-2)])).unwrap();
        assert!((v - PI * (25.0 - 0.01)).abs() < 1e-9 * v);
    }
}
