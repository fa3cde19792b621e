//! Periodic Green's function of the unit torus by Ewald splitting.
//!
//! `G` solves `ΔG = δ₀ − 1` with zero mean. `R = G − Γ` is smooth in the
//! open cell; `Γ = (1/2π) log|x|` in two dimensions and `−1/(4π|x|)` in three.
//! With heat-kernel split time `τ`, the two-dimensional regular part is
//!
//! ```text
//! R(x) = τ + (γ − ln 4τ)/4π − Ein(|x|²/4τ)/4π − Σ_{n≠0} E₁(|x−n|²/4τ)/4π
//!        − Σ_{k≠0} e^{−4π²|k|²τ} cos(2πk·x) / (4π²|k|²)
//! ```

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit;
use crate::geometry::Point;
use crate::special::{e1, ein, one_minus_exp_over, EULER_GAMMA};

/// Smallest retained reciprocal-space coefficient.
const FOURIER_FLOOR: f64 = 1e-18;

/// Real-space images with `|x − n|²/4τ` above this contribute below 1e−19.
const REAL_SPACE_SKIP: f64 = 40.0;

#[derive(Clone, Debug)]
pub struct TorusGreen {
    pub dim: usize,
    pub splitting_parameter: f64,
    pub real_space_cutoff: usize,
    pub fourier_cutoff: usize,
    r0: f64,
    tau: f64,
    shells: Vec<[f64; 3]>,
    /// Half-lattice modes with doubled coefficients.
    modes: Vec<([i32; 3], f64)>,
    kmax: usize,
}

impl TorusGreen {
    /// Defaults: width 1, three real-space shells, 20 Fourier modes per axis.
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_parameters(dim, 1.0, 3, 20)
    }

    pub fn with_parameters(dim: usize, splitting_parameter: f64, real_space_cutoff: usize, fourier_cutoff: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Unsupported(format!("torus dimension {dim}; only 2 and 3 are implemented")));
        }
        if !(splitting_parameter > 0.0) || real_space_cutoff == 0 || fourier_cutoff == 0 {
            return Err(Error::Invalid("Ewald parameters must be positive".into()));
        }
        let tau = splitting_parameter * splitting_parameter / (4.0 * PI);
        let s = real_space_cutoff as i32;
        let k = fourier_cutoff as i32;
        let mut shells = Vec::new();
        let mut modes = Vec::new();
        let zr = if dim == 3 { -s..=s } else { 0..=0 };
        let zk = if dim == 3 { -k..=k } else { 0..=0 };
        for n0 in -s..=s {
            for n1 in -s..=s {
                for n2 in zr.clone() {
                    if (n0, n1, n2) != (0, 0, 0) {
                        shells.push([n0 as f64, n1 as f64, n2 as f64]);
                    }
                }
            }
        }
        let mut kmax = 0;
        for k0 in -k..=k {
            for k1 in -k..=k {
                for k2 in zk.clone() {
                    // keep one representative of each ±k pair
                    let positive = (k0, k1, k2) > (0, 0, 0);
                    if !positive {
                        continue;
                    }
                    let ksq = (k0 * k0 + k1 * k1 + k2 * k2) as f64;
                    let coef = 2.0 * (-4.0 * PI * PI * ksq * tau).exp() / (4.0 * PI * PI * ksq);
                    if coef > FOURIER_FLOOR {
                        kmax = kmax.max(k0.unsigned_abs().max(k1.unsigned_abs()).max(k2.unsigned_abs()) as usize);
                        modes.push(([k0, k1, k2], coef));
                    }
                }
            }
        }
        let mut g = TorusGreen {
            dim,
            splitting_parameter,
            real_space_cutoff,
            fourier_cutoff,
            r0: 0.0,
            tau,
            shells,
            modes,
            kmax,
        };
        g.r0 = g.smooth_part(&vec![0.0; dim]);
        Ok(g)
    }

    /// Cached `R(0)`.
    pub fn r0(&self) -> f64 {
        self.r0
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Invalid(format!("expected a {}-vector, got length {}", self.dim, x.len())));
        }
        Ok(())
    }

    /// Free-space fundamental solution.
    pub fn gamma(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if self.dim == 2 {
            r.ln() / (2.0 * PI)
        } else {
            -1.0 / (4.0 * PI * r)
        }
    }

    /// `R(x)` on the closed unit cube `|x_i| ≤ 1/2`.
    pub fn eval_r(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        if x.iter().any(|v| !(v.abs() <= 0.5 + 1e-12)) {
            return Err(Error::Domain(format!(
                "R is smooth only on the closed cell |x_i| <= 1/2, got {x:?}"
            )));
        }
        Ok(self.smooth_part(x))
    }

    /// `G(x)` for `x` off the lattice.
    pub fn eval_g(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let w = self.wrap_checked(x)?;
        Ok(self.gamma(&w) + self.smooth_part(&w))
    }

    /// `∇G(x)` for `x` off the lattice (two dimensions).
    pub fn eval_grad_g(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        if self.dim != 2 {
            return Err(Error::Unsupported("gradient of the three-dimensional torus Green's function".into()));
        }
        let w = self.wrap_checked(x)?;
        let p = [w[0], w[1]];
        let r2 = p[0] * p[0] + p[1] * p[1];
        let gr = self.smooth_grad2(p);
        Ok(vec![p[0] / (2.0 * PI * r2) + gr[0], p[1] / (2.0 * PI * r2) + gr[1]])
    }

    fn wrap_checked(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w: Vec<f64> = x.iter().map(|v| v - v.round()).collect();
        if w.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-14 {
            return Err(Error::Singularity(format!("G is singular at the lattice point {x:?}")));
        }
        Ok(w)
    }

    /// Analytic continuation of `G − Γ` off the nonzero lattice points, no domain check.
    pub fn smooth_part(&self, x: &[f64]) -> f64 {
        if self.dim == 2 {
            self.smooth_part2([x[0], x[1]])
        } else {
            self.smooth_part3([x[0], x[1], x[2]])
        }
    }

    pub fn smooth_part2(&self, x: Point) -> f64 {
        let tau = self.tau;
        let four_tau = 4.0 * tau;
        let r2 = x[0] * x[0] + x[1] * x[1];
        let mut real = 0.0;
        for n in &self.shells {
            let d0 = x[0] - n[0];
            let d1 = x[1] - n[1];
            let z = (d0 * d0 + d1 * d1) / four_tau;
            if z <= REAL_SPACE_SKIP {
                real += e1(z);
            }
        }
        let near = tau + (EULER_GAMMA - four_tau.ln()) / (4.0 * PI) - ein(r2 / four_tau) / (4.0 * PI);
        near - real / (4.0 * PI) - self.fourier_sum(&[x[0], x[1], 0.0]).0
    }

    fn smooth_part3(&self, x: [f64; 3]) -> f64 {
        let tau = self.tau;
        let scale = 2.0 * tau.sqrt();
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let self_term = if r < 1e-8 {
            1.0 / (4.0 * PI * (PI * tau).sqrt())
        } else {
            libm::erf(r / scale) / (4.0 * PI * r)
        };
        let mut real = 0.0;
        for n in &self.shells {
            let d = [x[0] - n[0], x[1] - n[1], x[2] - n[2]];
            let rn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            real += libm::erfc(rn / scale) / (4.0 * PI * rn);
        }
        tau + self_term - real - self.fourier_sum(&x).0
    }

    /// `∇(G − Γ)` in two dimensions, no domain check.
    pub fn smooth_grad2(&self, x: Point) -> Point {
        self.smooth_value_grad2(x, false).1
    }

    /// `(G − Γ)` and its gradient in two dimensions in one pass.
    pub fn smooth_value_grad2(&self, x: Point, with_value: bool) -> (f64, Point) {
        let tau = self.tau;
        let four_tau = 4.0 * tau;
        let r2 = x[0] * x[0] + x[1] * x[1];
        let c0 = -one_minus_exp_over(r2 / four_tau) / (4.0 * PI * 2.0 * tau);
        let mut g = [c0 * x[0], c0 * x[1]];
        let mut real = 0.0;
        for n in &self.shells {
            let d0 = x[0] - n[0];
            let d1 = x[1] - n[1];
            let z = (d0 * d0 + d1 * d1) / four_tau;
            if z > REAL_SPACE_SKIP {
                continue;
            }
            let c = (-z).exp() / (2.0 * PI * z * four_tau);
            g[0] += c * d0;
            g[1] += c * d1;
            if with_value {
                real += e1(z);
            }
        }
        let (fv, fs) = self.fourier_sum(&[x[0], x[1], 0.0]);
        let value = if with_value {
            tau + (EULER_GAMMA - four_tau.ln()) / (4.0 * PI) - ein(r2 / four_tau) / (4.0 * PI) - real / (4.0 * PI) - fv
        } else {
            0.0
        };
        (value, [g[0] + fs[0], g[1] + fs[1]])
    }

    /// Returns `(Σ c_k cos 2πk·x, Σ c_k 2πk sin 2πk·x)` over the retained modes.
    fn fourier_sum(&self, x: &[f64; 3]) -> (f64, [f64; 2]) {
        let km = self.kmax as i32;
        let len = (2 * km + 1) as usize;
        let mut tables = [[(0.0, 0.0); 64], [(0.0, 0.0); 64], [(0.0, 0.0); 64]];
        debug_assert!(len <= 64);
        for axis in 0..self.dim {
            let (s, c) = (2.0 * PI * x[axis]).sin_cos();
            let t = &mut tables[axis];
            t[km as usize] = (1.0, 0.0);
            for j in 1..=km as usize {
                let (pr, pi) = t[km as usize + j - 1];
                t[km as usize + j] = (pr * c - pi * s, pr * s + pi * c);
                t[km as usize - j] = (pr * c - pi * s, -(pr * s + pi * c));
            }
        }
        let mut value = 0.0;
        let mut grad = [0.0; 2];
        for (k, coef) in &self.modes {
            let a = tables[0][(k[0] + km) as usize];
            let b = tables[1][(k[1] + km) as usize];
            let mut re = a.0 * b.0 - a.1 * b.1;
            let mut im = a.0 * b.1 + a.1 * b.0;
            if self.dim == 3 {
                let c = tables[2][(k[2] + km) as usize];
                let (r2, i2) = (re * c.0 - im * c.1, re * c.1 + im * c.0);
                re = r2;
                im = i2;
            }
            value += coef * re;
            grad[0] += coef * 2.0 * PI * k[0] as f64 * im;
            grad[1] += coef * 2.0 * PI * k[1] as f64 * im;
        }
        (value, grad)
    }
}

/// The `η`-rescaled Green's function `G^η` on `(1/η)T^d`.
#[derive(Clone, Copy, Debug)]
pub struct GreenEta<'a> {
    pub eta: f64,
    pub base: &'a TorusGreen,
}

impl<'a> GreenEta<'a> {
    pub fn new(base: &'a TorusGreen, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::Domain("eta must be in (0,1]".into()));
        }
        Ok(GreenEta { eta, base })
    }

    /// `G^η(x) − Γ(x)`: `(1/2π) log η + R(ηx)` for d = 2, `η^{d−2} R(ηx)` otherwise.
    pub fn perturbation(&self, x: &[f64]) -> f64 {
        let y: Vec<f64> = x.iter().map(|v| self.eta * v).collect();
        let r = self.base.smooth_part(&y);
        if self.base.dim == 2 {
            self.eta.ln() / (2.0 * PI) + r
        } else {
            self.eta.powi(self.base.dim as i32 - 2) * r
        }
    }

    pub fn perturbation2(&self, x: Point) -> f64 {
        self.eta.ln() / (2.0 * PI) + self.base.smooth_part2([self.eta * x[0], self.eta * x[1]])
    }

    /// Value and gradient of `G^η − Γ` in two dimensions.
    pub fn perturbation_and_grad2(&self, x: Point) -> (f64, Point) {
        let (v, g) = self.base.smooth_value_grad2([self.eta * x[0], self.eta * x[1]], true);
        (self.eta.ln() / (2.0 * PI) + v, [self.eta * g[0], self.eta * g[1]])
    }

    /// `∇(G^η − Γ)(x) = η ∇R(ηx)` in two dimensions.
    pub fn grad_perturbation2(&self, x: Point) -> Point {
        let g = self.base.smooth_grad2([self.eta * x[0], self.eta * x[1]]);
        [self.eta * g[0], self.eta * g[1]]
    }

    /// `G^η(x)` with `x` inside the fundamental cell of `(1/η)T^d`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.base.gamma(x) + self.perturbation(x)
    }
}

/// One sample of the quartic remainder `R(x) − R(0) + |x|²/(2d)`.
#[derive(Clone, Debug, Serialize)]
pub struct ExpansionSample {
    pub radius: f64,
    pub direction: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionFit {
    pub slope: f64,
    pub quadratic_coefficient: f64,
    pub table: Vec<ExpansionSample>,
}

/// Number of directions sampled per radius.
pub const EXPANSION_DIRECTIONS: usize = 16;

/// Fits the remainder order and the `|x|²` coefficient of `R` near the origin.
pub fn check_r_expansion(g: &TorusGreen, radii: &[f64]) -> Result<ExpansionFit> {
    if radii.len() < 2 {
        return Err(Error::Fit("need ≥ 2 radii".into()));
    }
    if g.dim != 2 {
        return Err(Error::Unsupported("expansion check is implemented for d = 2".into()));
    }
    let d = g.dim as f64;
    let mut table = Vec::new();
    let mut rms = Vec::new();
    let mut means = Vec::new();
    for &r in radii {
        if !(r > 0.0 && r <= 0.2) {
            return Err(Error::Domain(format!("radius {r} outside (0, 0.2]")));
        }
        let mut sq = 0.0;
        let mut mean = 0.0;
        for j in 0..EXPANSION_DIRECTIONS {
            let theta = 2.0 * PI * j as f64 / EXPANSION_DIRECTIONS as f64;
            let x = [r * theta.cos(), r * theta.sin()];
            let dr = g.eval_r(&x)? - g.r0();
            let residual = dr + r * r / (2.0 * d);
            sq += residual * residual;
            mean += dr;
            table.push(ExpansionSample { radius: r, direction: theta, residual });
        }
        rms.push((sq / EXPANSION_DIRECTIONS as f64).sqrt());
        means.push(mean / EXPANSION_DIRECTIONS as f64);
    }
    let slope = fit::loglog_slope(radii, &rms)?;
    // least squares for mean(R − R0) ≈ c₂ r² + c₄ r⁴
    let (mut s22, mut s24, mut s44, mut b2, mut b4) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&r, &m) in radii.iter().zip(&means) {
        let (p2, p4) = (r * r, r.powi(4));
        s22 += p2 * p2;
        s24 += p2 * p4;
        s44 += p4 * p4;
        b2 += p2 * m;
        b4 += p4 * m;
    }
    let det = s22 * s44 - s24 * s24;
    let quadratic_coefficient = if radii.len() >= 2 && det.abs() > 0.0 {
        (b2 * s44 - b4 * s24) / det
    } else {
        b2 / s22
    };
    Ok(ExpansionFit { slope, quadratic_coefficient, table })
}

/// Radii `0.2, 0.1, …, 0.0125` used by the default expansion check.
pub fn default_expansion_radii() -> Vec<f64> {
    (0..5).map(|i| 0.2 / 2f64.powi(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_is_even_and_finite() {
        let g = TorusGreen::new(2).unwrap();
        assert!(g.r0().is_finite());
        for x in [[0.1, 0.07], [0.3, -0.2], [0.5, 0.5]] {
            let a = g.eval_r(&x).unwrap();
            let b = g.eval_r(&[-x[0], -x[1]]).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_cube_is_domain_error() {
        let g = TorusGreen::new(2).unwrap();
        assert!(matches!(g.eval_r(&[0.6, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(g.eval_g(&[1.0, 0.0]), Err(Error::Singularity(_))));
    }

    #[test]
    fn fit_arity() {
        let g = TorusGreen::new(2).unwrap();
        let err = check_r_expansion(&g, &[0.1]).unwrap_err();
        assert!(err.to_string().contains("need ≥ 2 radii"));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = TorusGreen::new(2).unwrap();
        let x = [0.21, -0.13];
        let h = 1e-5;
        let grad = g.eval_grad_g(&x).unwrap();
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (g.eval_g(&xp).unwrap() - g.eval_g(&xm).unwrap()) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-8);
        }
    }
}
