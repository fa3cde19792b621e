use dilute_hom::cell::{
    chi_diagnostics, chi_expansion_gap, chi_expansion_gap_from, solve_cell, solve_exterior, CellMethod,
};
use dilute_hom::fit::loglog_slope;
use dilute_hom::geometry::{make_circle, make_ellipse, HoleShape};

fn circle(n: usize) -> HoleShape {
    HoleShape::new(vec![make_circle(0.25, [0.0, 0.0], n).unwrap()]).unwrap()
}

fn ellipse(n: usize) -> HoleShape {
    HoleShape::new(vec![make_ellipse(0.25, 0.15, [0.0, 0.0], 0.4, n).unwrap()]).unwrap()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn exterior_circle_oracle() {
    // w = a² z_k / |z|² has ∂w/∂N = −N^k and jump −2N^k in the normal derivative
    let shape = circle(64);
    let ext = solve_exterior(&shape).unwrap();
    for k in 0..2 {
        let n = shape.normal_component(k);
        let expected: Vec<f64> = n.iter().map(|v| -2.0 * v).collect();
        assert!(sup_diff(&ext.densities[k].values, &expected) <= 1e-9);
        let z: Vec<f64> = shape.points().map(|p| p[k]).collect();
        assert!(sup_diff(&ext.boundary_values(k), &z) <= 1e-9);
        assert!(ext.densities[k].integral(&shape).abs() <= 1e-9);
        let ev = ext.evaluator(k).unwrap();
        let x = [0.3, -0.5];
        let r2 = x[0] * x[0] + x[1] * x[1];
        assert!((ev.value(x).unwrap() - 0.0625 * x[k] / r2).abs() <= 1e-9);
    }
}

#[test]
fn exterior_far_field_and_two_circles() {
    let shape = HoleShape::new(vec![
        make_circle(0.1, [-0.15, 0.02], 64).unwrap(),
        make_circle(0.08, [0.14, -0.03], 64).unwrap(),
    ])
    .unwrap();
    let ext = solve_exterior(&shape).unwrap();
    assert!(ext.residual <= 1e-9);
    for k in 0..2 {
        assert!(ext.densities[k].integral(&shape).abs() <= 1e-9);
        let bmax = ext.boundary_values(k).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let ev = ext.evaluator(k).unwrap();
        for theta in [0.3_f64, 2.0, 4.0] {
            let v = ev.value([50.0 * theta.cos(), 50.0 * theta.sin()]).unwrap();
            assert!(v.abs() < 1e-2 * bmax);
        }
    }
}

#[test]
fn cell_solution_invariants() {
    let shape = ellipse(64);
    for eta in [0.5, 0.2, 0.05] {
        let sol = solve_cell(&shape, eta, CellMethod::Direct).unwrap();
        assert!(sol.residual <= 1e-9, "eta {eta}: residual {}", sol.residual);
        for d in &sol.densities {
            assert!(d.integral(&shape).abs() <= 1e-9);
        }
    }
    let err = solve_cell(&shape, 0.0, CellMethod::Direct).err().unwrap();
    assert!(err.to_string().contains("eta must be in (0,1]"));
}

#[test]
fn density_approaches_exterior_density() {
    let shape = ellipse(64);
    let ext = solve_exterior(&shape).unwrap();
    let gap = |eta: f64| {
        let sol = solve_cell(&shape, eta, CellMethod::Direct).unwrap();
        (0..2)
            .map(|k| sup_diff(&sol.densities[k].values, &ext.densities[k].values))
            .fold(0.0, f64::max)
    };
    let etas = [0.2, 0.1, 0.05, 0.025];
    let gaps: Vec<f64> = etas.iter().map(|&e| gap(e)).collect();
    // the first correction is η R₃φ⁰ with R₃ = O(η), so halving η quarters the gap
    for w in gaps.windows(2) {
        let ratio = w[1] / w[0];
        assert!((ratio / 0.25 - 1.0).abs() < 0.2, "ratio {ratio} gaps {gaps:?}");
    }
}

#[test]
fn series_matches_direct() {
    let shape = ellipse(64);
    let eta = 0.1;
    let direct = solve_cell(&shape, eta, CellMethod::Direct).unwrap();
    let series = solve_cell(&shape, eta, CellMethod::Series(3)).unwrap();
    for k in 0..2 {
        let d = sup_diff(&direct.densities[k].values, &series.densities[k].values);
        assert!(d <= 10.0 * eta.powi(4), "{d}");
    }
    let err = solve_cell(&shape, 0.7, CellMethod::Series(3)).err().unwrap();
    assert!(err.is_numerical());
}

#[test]
fn neumann_condition_holds_off_nodes() {
    let shape = ellipse(64);
    let sol = solve_cell(&shape, 0.2, CellMethod::Direct).unwrap();
    let curve = &shape.components[0];
    let h = curve.spacing();
    for k in 0..2 {
        let ev = sol.chi_tilde(k).unwrap();
        for i in 0..8 {
            let t = (i as f64 + 0.37) * std::f64::consts::PI / 4.0;
            let (p, _, n, _) = curve.frame_at(t);
            // cubic extrapolation of the normal flux from four offset points
            let flux = |s: f64| {
                let g = ev.gradient([p[0] + s * n[0], p[1] + s * n[1]]).unwrap();
                g[0] * n[0] + g[1] * n[1] + n[k]
            };
            let d = 0.02 * h;
            let f = 4.0 * flux(d) - 6.0 * flux(2.0 * d) + 4.0 * flux(3.0 * d) - flux(4.0 * d);
            assert!(f.abs() <= 1e-6, "k {k} t {t}: {f}");
        }
    }
}

#[test]
fn square_symmetric_rotation() {
    let shape = circle(64);
    let sol = solve_cell(&shape, 0.3, CellMethod::Direct).unwrap();
    let c1 = sol.chi_tilde(0).unwrap();
    let c2 = sol.chi_tilde(1).unwrap();
    let mut worst = 0.0_f64;
    for z in [[0.4, 0.1], [-0.7, 0.9], [1.2, -0.3], [0.05, 0.02]] {
        // χ̃₂(z) = χ̃₁(R⁻¹z) for the quarter turn R
        let rz = [z[1], -z[0]];
        worst = worst.max((c2.value(z).unwrap() - c1.value(rz).unwrap()).abs());
    }
    assert!(worst <= 1e-8, "{worst}");
}

#[test]
fn expansion_gap_orders() {
    let shape = ellipse(64);
    let ext = solve_exterior(&shape).unwrap();
    let etas = [0.2, 0.1, 0.05, 0.025];
    let gaps: Vec<_> = etas
        .iter()
        .map(|&e| chi_expansion_gap_from(&ext, &solve_cell(&shape, e, CellMethod::Direct).unwrap()).unwrap())
        .collect();
    let lead: Vec<f64> = gaps.iter().map(|g| g.leading).collect();
    let corr: Vec<f64> = gaps.iter().map(|g| g.corrected).collect();
    let s_lead = loglog_slope(&etas, &lead).unwrap();
    let s_corr = loglog_slope(&etas, &corr).unwrap();
    assert!((s_lead - 2.0).abs() <= 0.4, "leading slope {s_lead}");
    // both R₁ − η²Q₁ and the second Neumann term are O(η⁴) in two dimensions
    assert!((s_corr - 4.0).abs() <= 0.4, "corrected slope {s_corr}");
    assert!(chi_expansion_gap(&shape, 0.0).unwrap_err().to_string().contains("η must be positive"));
}

#[test]
fn energy_identity_and_mean() {
    let shape = ellipse(64);
    let t0 = std::time::Instant::now();
    let sol = solve_cell(&shape, 0.2, CellMethod::Direct).unwrap();
    let diag = chi_diagnostics(&sol).unwrap();
    eprintln!("chi_diagnostics at eta 0.2: {:?}", t0.elapsed());
    for d in &diag.directions {
        let rel = (d.energy_volume - d.energy_boundary).abs() / d.energy_boundary;
        assert!(rel <= 1e-2, "{d:?}");
        assert!(d.mean_chi_tilde.abs() <= 1e-3 * d.sup_chi / sol.eta, "{d:?}");
    }
}
