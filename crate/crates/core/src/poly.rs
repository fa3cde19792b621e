//! Bivariate polynomials for source and boundary data.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Highest total degree accepted for user data.
pub const MAX_DATA_DEGREE: usize = 4;

/// `Σ c[a][b] x^a y^b`.
#[derive(Clone, Debug, Serialize)]
pub struct Poly2 {
    pub coeffs: Vec<Vec<f64>>,
}

impl PartialEq for Poly2 {
    fn eq(&self, other: &Self) -> bool {
        let mut a: Vec<_> = self.terms().collect();
        let mut b: Vec<_> = other.terms().collect();
        a.sort_by_key(|t| (t.0, t.1));
        b.sort_by_key(|t| (t.0, t.1));
        a == b
    }
}

impl Poly2 {
    pub fn zero() -> Self {
        Poly2 { coeffs: vec![vec![0.0]] }
    }

    pub fn constant(c: f64) -> Self {
        Poly2 { coeffs: vec![vec![c]] }
    }

    pub fn monomial(c: f64, a: usize, b: usize) -> Self {
        let mut p = Poly2 { coeffs: vec![vec![0.0; b + 1]; a + 1] };
        p.coeffs[a][b] = c;
        p
    }

    fn add_term(&mut self, a: usize, b: usize, c: f64) {
        if self.coeffs.len() <= a {
            self.coeffs.resize(a + 1, Vec::new());
        }
        let width = self.coeffs.iter().map(Vec::len).max().unwrap_or(0).max(b + 1);
        for row in &mut self.coeffs {
            row.resize(width, 0.0);
        }
        self.coeffs[a][b] += c;
    }

    fn terms(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.coeffs
            .iter()
            .enumerate()
            .flat_map(|(a, row)| row.iter().enumerate().map(move |(b, &c)| (a, b, c)))
            .filter(|t| t.2 != 0.0)
    }

    pub fn degree(&self) -> usize {
        self.terms().map(|(a, b, _)| a + b).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms().next().is_none()
    }

    pub fn scaled(&self, s: f64) -> Poly2 {
        Poly2 { coeffs: self.coeffs.iter().map(|r| r.iter().map(|c| c * s).collect()).collect() }
    }

    pub fn add(&self, other: &Poly2) -> Poly2 {
        let mut out = self.clone();
        for (a, b, c) in other.terms() {
            out.add_term(a, b, c);
        }
        out
    }

    pub fn eval(&self, x: Point) -> f64 {
        // Horner in y inside Horner in x
        self.coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, row| acc * x[0] + row.iter().rev().fold(0.0, |r, c| r * x[1] + c))
    }

    pub fn dx(&self) -> Poly2 {
        let mut out = Poly2::zero();
        for (a, b, c) in self.terms() {
            if a > 0 {
                out.add_term(a - 1, b, c * a as f64);
            }
        }
        out
    }

    pub fn dy(&self) -> Poly2 {
        let mut out = Poly2::zero();
        for (a, b, c) in self.terms() {
            if b > 0 {
                out.add_term(a, b - 1, c * b as f64);
            }
        }
        out
    }

    /// Twice-integrated in `x` with zero integration constants.
    fn integrate_x2(&self) -> Poly2 {
        let mut out = Poly2::zero();
        for (a, b, c) in self.terms() {
            out.add_term(a + 2, b, c / ((a + 1) * (a + 2)) as f64);
        }
        out
    }

    pub fn laplacian(&self) -> Poly2 {
        self.dx().dx().add(&self.dy().dy())
    }

    /// A polynomial `p` with `−Δp = self`:
    /// `p = Σ_j (−1)^j I_x² (∂_y² I_x²)^j (−f)`, which terminates because `∂_y²` lowers the `y`-degree.
    pub fn particular_solution(&self) -> Poly2 {
        let mut term = self.scaled(-1.0);
        let mut out = Poly2::zero();
        let mut sign = 1.0;
        while !term.is_zero() {
            out = out.add(&term.integrate_x2().scaled(sign));
            term = term.integrate_x2().dy().dy();
            sign = -sign;
        }
        out
    }

    /// Gradient polynomials `(∂_x p, ∂_y p)`.
    pub fn gradient(&self) -> PolyGradient {
        let dx = self.dx();
        let dy = self.dy();
        PolyGradient { hxx: dx.dx(), hxy: dx.dy(), hyy: dy.dy(), dx, dy }
    }

    /// Parses `c`, `c*x^a*y^b` terms joined by `+`/`−`, e.g. `1 - x^2 + 0.5*x*y^3`.
    pub fn parse(text: &str) -> Result<Poly2> {
        let bad = |msg: &str| Error::Invalid(format!("polynomial '{text}': {msg}"));
        let mut p = Poly2::zero();
        let s: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        if s.is_empty() {
            return Err(bad("empty"));
        }
        let mut i = 0;
        while i < s.len() {
            let mut sign = 1.0;
            if s[i] == '+' || s[i] == '-' {
                if s[i] == '-' {
                    sign = -1.0;
                }
                i += 1;
            } else if i > 0 {
                return Err(bad("expected + or -"));
            }
            let start = i;
            while i < s.len() && (s[i].is_ascii_digit() || s[i] == '.' || s[i] == 'e' || s[i] == 'E'
                || ((s[i] == '-' || s[i] == '+') && i > start && (s[i - 1] == 'e' || s[i - 1] == 'E')))
            {
                i += 1;
            }
            let coef = if i > start {
                let n: String = s[start..i].iter().collect();
                n.parse::<f64>().map_err(|_| bad(&format!("bad number '{n}'")))?
            } else {
                1.0
            };
            let (mut a, mut b) = (0, 0);
            let mut first = true;
            while i < s.len() && s[i] != '+' && s[i] != '-' {
                if s[i] == '*' {
                    i += 1;
                } else if !first {
                    return Err(bad("expected *"));
                }
                first = false;
                let var = *s.get(i).ok_or_else(|| bad("dangling *"))?;
                if var != 'x' && var != 'y' {
                    return Err(bad(&format!("unknown symbol '{var}'")));
                }
                i += 1;
                let mut pw = 1;
                if i < s.len() && s[i] == '^' {
                    i += 1;
                    let st = i;
                    while i < s.len() && s[i].is_ascii_digit() {
                        i += 1;
                    }
                    let e: String = s[st..i].iter().collect();
                    pw = e.parse().map_err(|_| bad("bad exponent"))?;
                }
                if var == 'x' {
                    a += pw;
                } else {
                    b += pw;
                }
            }
            p.add_term(a, b, sign * coef);
        }
        if p.degree() > MAX_DATA_DEGREE {
            return Err(bad(&format!("degree above {MAX_DATA_DEGREE}")));
        }
        Ok(p)
    }
}

impl fmt::Display for Poly2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        // ordered by total degree, then by the x power
        let mut terms: Vec<_> = self.terms().collect();
        terms.sort_by_key(|&(a, b, _)| (a + b, std::cmp::Reverse(a)));
        for (a, b, c) in terms {
            let mut body = String::new();
            if a > 0 {
                body.push_str(&if a == 1 { "x".into() } else { format!("x^{a}") });
            }
            if b > 0 {
                if !body.is_empty() {
                    body.push('*');
                }
                body.push_str(&if b == 1 { "y".into() } else { format!("y^{b}") });
            }
            let mag = c.abs();
            let term = if body.is_empty() {
                format!("{mag}")
            } else if mag == 1.0 {
                body
            } else {
                format!("{mag}*{body}")
            };
            if first {
                write!(f, "{}{term}", if c < 0.0 { "-" } else { "" })?;
            } else {
                write!(f, " {} {term}", if c < 0.0 { "-" } else { "+" })?;
            }
            first = false;
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

/// First and second derivatives of a polynomial.
#[derive(Clone, Debug)]
pub struct PolyGradient {
    pub dx: Poly2,
    pub dy: Poly2,
    pub hxx: Poly2,
    pub hxy: Poly2,
    pub hyy: Poly2,
}

impl PolyGradient {
    pub fn grad(&self, x: Point) -> Point {
        [self.dx.eval(x), self.dy.eval(x)]
    }

    pub fn hessian(&self, x: Point) -> [[f64; 2]; 2] {
        let xy = self.hxy.eval(x);
        [[self.hxx.eval(x), xy], [xy, self.hyy.eval(x)]]
    }
}
