//! Ewald evaluation of the torus Green's function against an independent
//! one-direction Fourier representation.

use std::f64::consts::PI;

use dilute_hom::green::{check_r_expansion, default_expansion_radii, GreenEta, TorusGreen};
use proptest::prelude::*;

/// `R(0)` in two dimensions, frozen from the row-sum oracle below.
const R0_2D: f64 = 0.208_577_793_243_501_38;

/// `G` on the unit torus summed in closed form along `x₂` and as a fast
/// Fourier series along `x₁`.
fn row_sum_g(x: [f64; 2]) -> f64 {
    let x1 = x[0] - x[0].round();
    let s = {
        let w = x[1] - x[1].round();
        w.abs()
    };
    let mut g = -(s * s - s + 1.0 / 6.0) / 2.0;
    // (1/2π) log|1 − e^{2πi(x₁ + i s)}|
    let q_mod = (-2.0 * PI * s).exp();
    let (sn, cs) = (2.0 * PI * x1).sin_cos();
    let re = 1.0 - q_mod * cs;
    let im = -q_mod * sn;
    g += 0.5 * (re * re + im * im).ln() / (2.0 * PI);
    for k in 1..200 {
        let kf = k as f64;
        let e = (-2.0 * PI * kf).exp();
        let bracket = ((-2.0 * PI * kf * s).exp() + (-2.0 * PI * kf * (1.0 - s)).exp()) / (1.0 - e)
            - (-2.0 * PI * kf * s).exp();
        let term = (2.0 * PI * kf * x1).cos() / kf * bracket;
        g -= term / (2.0 * PI);
        if bracket < 1e-20 {
            break;
        }
    }
    g
}

fn row_sum_r(x: [f64; 2]) -> f64 {
    row_sum_g(x) - x[0].hypot(x[1]).ln() / (2.0 * PI)
}

fn row_sum_r0() -> f64 {
    let mut sum = 0.0;
    for k in 1..100 {
        let e = (-2.0 * PI * k as f64).exp();
        sum += e / (k as f64 * (1.0 - e));
    }
    (2.0 * PI).ln() / (2.0 * PI) - 1.0 / 12.0 - sum / PI
}

fn grid_point(i: usize, j: usize) -> [f64; 2] {
    // deterministic scatter inside the open cell
    let a = ((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0 - 0.5;
    let b = ((i * 15_485_863 + j * 32_452_843 + 17) % 1000) as f64 / 1000.0 - 0.5;
    [0.98 * a, 0.98 * b]
}

#[test]
fn r0_matches_frozen_constant_and_oracle() {
    let g = TorusGreen::new(2).unwrap();
    assert!((row_sum_r0() - R0_2D).abs() < 1e-14);
    assert!((g.r0() - R0_2D).abs() < 1e-12, "R(0) = {}", g.r0());
    assert!((g.eval_r(&[0.0, 0.0]).unwrap() - R0_2D).abs() < 1e-12);
}

#[test]
fn r0_independent_of_fourier_cutoff() {
    let a = TorusGreen::with_parameters(2, 1.0, 3, 8).unwrap();
    let b = TorusGreen::with_parameters(2, 1.0, 3, 20).unwrap();
    assert!((a.r0() - b.r0()).abs() < 1e-14);
}

#[test]
fn ewald_matches_row_sum_oracle() {
    let g = TorusGreen::new(2).unwrap();
    for i in 0..10 {
        let x = grid_point(i, i + 3);
        if x[0].hypot(x[1]) < 1e-3 {
            continue;
        }
        let ewald = g.eval_r(&x).unwrap();
        let oracle = row_sum_r(x);
        assert!((ewald - oracle).abs() < 1e-8, "x = {x:?}: {ewald} vs {oracle}");
    }
}

#[test]
fn splitting_width_independence() {
    let a = TorusGreen::with_parameters(2, 1.0, 3, 20).unwrap();
    let b = TorusGreen::with_parameters(2, 0.5, 3, 20).unwrap();
    for i in 0..20 {
        let x = grid_point(i, 2 * i + 1);
        assert!((a.eval_r(&x).unwrap() - b.eval_r(&x).unwrap()).abs() < 1e-10);
    }
    let a3 = TorusGreen::with_parameters(3, 1.0, 3, 20).unwrap();
    let b3 = TorusGreen::with_parameters(3, 0.5, 3, 20).unwrap();
    assert!((a3.r0() - b3.r0()).abs() < 1e-10);
    let x = [0.12, -0.21, 0.3];
    assert!((a3.eval_r(&x).unwrap() - b3.eval_r(&x).unwrap()).abs() < 1e-10);
}

#[test]
fn laplacian_of_r_is_minus_one() {
    let g = TorusGreen::new(2).unwrap();
    let x = [0.1, 0.07];
    let h = 1e-3;
    let c = g.eval_r(&x).unwrap();
    let lap = (g.eval_r(&[x[0] + h, x[1]]).unwrap()
        + g.eval_r(&[x[0] - h, x[1]]).unwrap()
        + g.eval_r(&[x[0], x[1] + h]).unwrap()
        + g.eval_r(&[x[0], x[1] - h]).unwrap()
        - 4.0 * c)
        / (h * h);
    assert!((lap + 1.0).abs() < 1e-5, "ΔR = {lap}");

    let g3 = TorusGreen::new(3).unwrap();
    let y = [0.1, 0.07, -0.05];
    let mut lap3 = -6.0 * g3.eval_r(&y).unwrap();
    for k in 0..3 {
        for s in [-h, h] {
            let mut z = y;
            z[k] += s;
            lap3 += g3.eval_r(&z).unwrap();
        }
    }
    assert!((lap3 / (h * h) + 1.0).abs() < 1e-5);
}

#[test]
fn definition_consistency_and_gradient_parity() {
    let g = TorusGreen::new(2).unwrap();
    let x = [0.25, 0.0];
    let lhs = g.eval_g(&x).unwrap() - g.gamma(&x) - g.eval_r(&x).unwrap();
    assert!(lhs.abs() < 1e-12);
    for x in [[0.25, 0.0], [0.1, -0.33], [0.45, 0.4]] {
        let a = g.eval_grad_g(&x).unwrap();
        let b = g.eval_grad_g(&[-x[0], -x[1]]).unwrap();
        assert!((a[0] + b[0]).abs() < 1e-10 && (a[1] + b[1]).abs() < 1e-10);
    }
}

#[test]
fn flux_through_small_circle() {
    let g = TorusGreen::new(2).unwrap();
    let r = 0.1;
    let n = 256;
    let mut flux = 0.0;
    for i in 0..n {
        let t = 2.0 * PI * i as f64 / n as f64;
        let grad = g.eval_grad_g(&[r * t.cos(), r * t.sin()]).unwrap();
        flux += (grad[0] * t.cos() + grad[1] * t.sin()) * r * 2.0 * PI / n as f64;
    }
    // flux = 1 from δ₀ minus the background over the disk
    assert!((flux + PI * r * r - 1.0).abs() < 1e-8, "flux {flux}");
}

#[test]
fn torus_mean_of_g_vanishes() {
    let g = TorusGreen::new(2).unwrap();
    let m = 64;
    let h = 1.0 / m as f64;
    let rho = 0.05;
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let x = [-0.5 + (i as f64 + 0.5) * h, -0.5 + (j as f64 + 0.5) * h];
            if x[0].hypot(x[1]) < rho {
                continue;
            }
            total += g.eval_g(&x).unwrap() * h * h;
        }
    }
    // ∫_{B_ρ} Γ = ρ²(2 log ρ − 1)/4, plus the smooth part over the ball
    let ball = rho * rho * (2.0 * rho.ln() - 1.0) / 4.0 + PI * rho * rho * g.r0();
    assert!((total + ball).abs() < 2e-3, "∫G = {}", total + ball);
}

#[test]
fn green_eta_perturbation_identity() {
    let g = TorusGreen::new(2).unwrap();
    for eta in [1.0, 0.3, 0.05] {
        let ge = GreenEta::new(&g, eta).unwrap();
        let x = [0.2, -0.15];
        let expect = eta.ln() / (2.0 * PI) + g.eval_r(&[eta * x[0], eta * x[1]]).unwrap();
        assert!((ge.perturbation(&x) - expect).abs() < 1e-10);
        assert!((ge.eval(&x) - g.gamma(&x) - expect).abs() < 1e-10);
    }
    let g3 = TorusGreen::new(3).unwrap();
    let ge3 = GreenEta::new(&g3, 0.5).unwrap();
    let x = [0.2, 0.1, -0.3];
    let expect = 0.5 * g3.eval_r(&[0.1, 0.05, -0.15]).unwrap();
    assert!((ge3.perturbation(&x) - expect).abs() < 1e-10);
    assert!(GreenEta::new(&g, 0.0).is_err());
}

#[test]
fn regular_part_expansion() {
    let g = TorusGreen::new(2).unwrap();
    let fit = check_r_expansion(&g, &default_expansion_radii()).unwrap();
    assert!((3.8..=4.2).contains(&fit.slope), "slope {}", fit.slope);
    assert!((fit.quadratic_coefficient + 0.25).abs() < 1e-3);
    assert_eq!(fit.table.len(), 5 * 16);
}

proptest! {
    #[test]
    fn periodic_and_even(x0 in -0.49f64..0.49, x1 in -0.49f64..0.49) {
        prop_assume!(x0.hypot(x1) > 1e-3);
        let g = TorusGreen::new(2).unwrap();
        let a = g.eval_g(&[x0, x1]).unwrap();
        prop_assert!((a - g.eval_g(&[x0 + 1.0, x1]).unwrap()).abs() < 1e-10);
        prop_assert!((a - g.eval_g(&[x0, x1 - 1.0]).unwrap()).abs() < 1e-10);
        prop_assert!((a - g.eval_g(&[-x0, -x1]).unwrap()).abs() < 1e-10);
    }
}
