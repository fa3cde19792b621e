use dilute_hom::cell::{solve_cell, CellMethod};
use dilute_hom::fit::spread;
use dilute_hom::full::{
    build_domain, corrector_field, discrepancy_norms, h1_discrepancy, interior_centers, rate_sweep, regime_classify,
    sampling_rule, solve_full, solve_homogenized, solve_homogenized_scalar, RateConfig, RegimeTag,
};
use dilute_hom::geometry::{make_circle, make_ellipse, HoleShape};
use dilute_hom::poly::Poly2;
use dilute_hom::tensor::effective;

fn circle(n: usize) -> HoleShape {
    HoleShape::new(vec![make_circle(0.25, [0.0, 0.0], n).unwrap()]).unwrap()
}

fn poly(s: &str) -> Poly2 {
    Poly2::parse(s).unwrap()
}

fn probes(r: f64) -> Vec<[f64; 2]> {
    (0..12).map(|i| {
        let t = 0.7 + i as f64 * 0.53;
        let s = r * (0.2 + 0.7 * ((i * 7) % 12) as f64 / 12.0);
        [s * t.cos(), s * t.sin()]
    })
    .collect()
}

#[test]
fn interior_rule_matches_brute_force() {
    let (r, eps, eta) = (1.0, 0.25, 0.2);
    let centers = interior_centers(r, eps, eta);
    let mut count = 0;
    for i in -8i32..=8 {
        for j in -8i32..=8 {
            let (x, y) = (eps * i as f64, eps * j as f64);
            if (x * x + y * y).sqrt() + 2.0 * eps * eta < r {
                count += 1;
            }
        }
    }
    assert_eq!(centers.len(), count);
    assert_eq!(count, 37);
    // quarter turn (x, y) -> (−y, x) maps the set to itself
    for c in &centers {
        let rc = [-c[1], c[0]];
        assert!(centers.iter().any(|d| (d[0] - rc[0]).abs() + (d[1] - rc[1]).abs() < 1e-12));
    }
    assert_eq!(interior_centers(1.0, 2.0, 0.2), vec![[0.0, 0.0]]);
    assert!(interior_centers(0.1, 2.0, 0.05).is_empty());
    let p = build_domain(0.1, 2.0, 0.05, &circle(32)).unwrap();
    assert!(!p.warnings.is_empty());
}

#[test]
fn zero_hole_oracles() {
    // ε larger than the disk leaves no interior hole
    let shape = circle(32);
    let p = build_domain(1.0, 3.0, 0.5, &shape).unwrap().with_data(Poly2::zero(), poly("x"));
    assert_eq!(p.n_holes(), 0);
    let sol = solve_full(&p).unwrap();
    let field = sol.field().unwrap();
    for x in probes(0.95) {
        assert!((field.value(x).unwrap() - x[0]).abs() <= 1e-9);
    }
    let p = build_domain(1.0, 3.0, 0.5, &shape).unwrap().with_data(poly("4"), Poly2::zero());
    let sol = solve_full(&p).unwrap();
    let field = sol.field().unwrap();
    let hom = solve_homogenized(&p, None).unwrap();
    let hom2 = solve_homogenized_scalar(&p, 1.6).unwrap();
    for x in probes(0.95) {
        let exact = 1.0 - x[0] * x[0] - x[1] * x[1];
        let u = field.value(x).unwrap();
        assert!((u - exact).abs() <= 1e-8);
        assert!((hom.value(x).unwrap() - u).abs() <= 1e-10);
        assert!((hom2.value(x).unwrap() - exact / 1.6).abs() <= 1e-8);
    }
    let (zeta, plain) = h1_discrepancy(&sol, &hom, None, 16).unwrap();
    assert!(zeta <= 1e-8 && plain <= 1e-8, "{zeta} {plain}");
}

#[test]
fn homogenized_reciprocity_and_isotropy() {
    let shape = circle(32);
    let p = build_domain(1.0, 0.25, 0.2, &shape).unwrap().with_data(poly("1 + x*y"), poly("x^2 - y"));
    let q = p.clone().with_data(poly("1 + x*y"), poly("x^2 - y + 0.75"));
    let a = solve_homogenized_scalar(&p, 0.9).unwrap();
    let b = solve_homogenized_scalar(&q, 0.9).unwrap();
    for x in probes(0.9) {
        assert!((b.value(x).unwrap() - a.value(x).unwrap() - 0.75).abs() <= 1e-10);
    }
    let ell = HoleShape::new(vec![make_ellipse(0.25, 0.1, [0.0, 0.0], 0.0, 32).unwrap()]).unwrap();
    let t = effective(&solve_cell(&ell, 0.3, CellMethod::Direct).unwrap()).unwrap();
    let err = solve_homogenized(&p, Some(&t)).unwrap_err();
    assert!(matches!(err, dilute_hom::Error::Unsupported(_)));
}

#[test]
fn perforated_solution_residuals_and_maximum_principle() {
    let shape = circle(32);
    let p = build_domain(1.0, 0.25, 0.2, &shape).unwrap().with_data(Poly2::zero(), poly("x^2 - y + x*y"));
    let sol = solve_full(&p).unwrap();
    assert!(sol.residuals_ok(), "{} {}", sol.dirichlet_residual, sol.neumann_residual);
    let field = sol.field().unwrap();
    let g = |t: f64| {
        let (x, y) = (t.cos(), t.sin());
        x * x - y + x * y
    };
    let gs: Vec<f64> = (0..2000).map(|i| g(i as f64 * std::f64::consts::TAU / 2000.0)).collect();
    let (lo, hi) = gs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let rule = sampling_rule(&p, 8).unwrap();
    for x in rule.points.iter().step_by(97) {
        let u = field.value(*x).unwrap();
        assert!(u >= lo - 1e-9 && u <= hi + 1e-9, "{x:?}: {u}");
    }
}

#[test]
fn self_convergence_under_node_doubling() {
    let shape = circle(32);
    let p = build_domain(1.0, 0.25, 0.2, &shape).unwrap().with_data(poly("4"), poly("x"));
    assert!(p.n_holes() <= 37);
    let coarse = solve_full(&p).unwrap();
    let fine = solve_full(&p.refined(2)).unwrap();
    let (fc, ff) = (coarse.field().unwrap(), fine.field().unwrap());
    // probes at cell corners, far from every hole
    let mut worst = 0.0_f64;
    let mut count = 0;
    for i in -3i32..3 {
        for j in -3i32..3 {
            let x = [0.25 * (i as f64 + 0.5), 0.25 * (j as f64 + 0.5)];
            if (x[0] * x[0] + x[1] * x[1]).sqrt() < 0.85 && count < 20 {
                worst = worst.max((fc.value(x).unwrap() - ff.value(x).unwrap()).abs());
                count += 1;
            }
        }
    }
    assert_eq!(count, 20);
    assert!(worst <= 1e-7, "{worst}");
}

#[test]
fn corrector_properties() {
    let shape = circle(32);
    let eps = 0.25;
    let eta = 0.2;
    let cell = solve_cell(&shape, eta, CellMethod::Direct).unwrap();
    let t = effective(&cell).unwrap();
    // constant data: ∇ū = 0
    let p = build_domain(1.0, eps, eta, &shape).unwrap().with_data(Poly2::zero(), poly("2.5"));
    let hom = solve_homogenized(&p, Some(&t)).unwrap();
    let corr = corrector_field(&cell, &hom, eps).unwrap();
    for x in probes(0.9) {
        let (v, g) = corr.value_and_gradient(x).unwrap();
        assert!(v.abs() <= 1e-12 && g[0].abs() + g[1].abs() <= 1e-12);
    }
    // affine ū: ε-periodic corrector
    let p = build_domain(1.0, eps, eta, &shape).unwrap().with_data(Poly2::zero(), poly("x - 0.5*y"));
    let hom = solve_homogenized(&p, Some(&t)).unwrap();
    let corr = corrector_field(&cell, &hom, eps).unwrap();
    for x in [[0.11, 0.07], [-0.3, 0.2], [0.02, -0.41]] {
        let a = corr.value_and_gradient(x).unwrap();
        let b = corr.value_and_gradient([x[0] + eps, x[1]]).unwrap();
        assert!((a.0 - b.0).abs() <= 1e-9);
        assert!((a.1[0] - b.1[0]).abs() + (a.1[1] - b.1[1]).abs() <= 1e-9);
    }
    let wrong = solve_cell(&shape, 0.3, CellMethod::Direct).unwrap();
    assert!(corrector_field(&wrong, &hom, eps).is_err());
}

#[test]
fn constant_shift_of_chi_moves_only_the_value_part() {
    let shape = circle(32);
    let (eps, eta) = (0.25, 0.2);
    let cell = solve_cell(&shape, eta, CellMethod::Direct).unwrap();
    let t = effective(&cell).unwrap();
    let p = build_domain(1.0, eps, eta, &shape).unwrap().with_data(Poly2::zero(), poly("x - 0.5*y"));
    let full = solve_full(&p).unwrap();
    let hom = solve_homogenized(&p, Some(&t)).unwrap();
    let rule = sampling_rule(&p, 8).unwrap();
    let c0 = corrector_field(&cell, &hom, eps).unwrap();
    let c1 = corrector_field(&cell, &hom, eps).unwrap().with_shift(1.0);
    let d0 = discrepancy_norms(&full, &hom, None, Some(&c0), &rule).unwrap();
    let d1 = discrepancy_norms(&full, &hom, None, Some(&c1), &rule).unwrap();
    assert!((d0.zeta.grad_l2 - d1.zeta.grad_l2).abs() <= 1e-12 * d0.zeta.grad_l2.max(1.0));
    // ∇ū is the constant (1, −1/2) plus the small boundary response, so the shift is ε(∂₁ū + ∂₂ū)
    let grad = rule.integrate(|x| {
        let (_, g) = hom.value_and_gradient(x)?;
        Ok([g[0] + g[1]])
    })
    .unwrap()[0];
    let shift = eps * grad.abs();
    let change = (d1.zeta.l2 - d0.zeta.l2).abs();
    assert!(change <= shift * (1.0 + 1e-9), "{change} {shift}");
}

#[test]
fn regime_examples() {
    let r = regime_classify(0.1, 0.1, 2).unwrap();
    assert!((r.sigma * r.sigma - 0.01 * 10f64.ln()).abs() < 1e-15);
    assert!((r.rho - 1.0 / (0.01 * 10f64.ln())).abs() < 1e-10);
    assert_eq!(r.tag, RegimeTag::Saturated);
    // d = 3: ρ = (η/ε)², equal to one at η = ε
    let eps: f64 = 0.05;
    let r = regime_classify(eps, eps, 3).unwrap();
    assert!((r.rho - 1.0).abs() < 1e-12);
    assert_eq!(r.tag, RegimeTag::Crossover);
    let r = regime_classify(eps, eps * eps, 3).unwrap();
    assert!((r.rho - eps * eps).abs() < 1e-15);
    assert_eq!(r.tag, RegimeTag::DiluteCritical);
    let hi = regime_classify(0.1, 0.3, 2).unwrap();
    let lo = regime_classify(0.1, 0.1, 2).unwrap();
    assert!(hi.kappa >= lo.kappa);
    assert!((hi.kappa - (0.3f64 / 0.1).sqrt()).abs() < 1e-12);
}

#[test]
fn sweep_validation() {
    let cfg = RateConfig {
        outer_radius: 1.0,
        shape: circle(32),
        f: poly("4"),
        g: Poly2::zero(),
        pairs: vec![],
        outer_nodes: 1024,
        points_per_period: 16,
    };
    assert!(rate_sweep(&cfg).is_err());
    let ell = HoleShape::new(vec![make_ellipse(0.25, 0.1, [0.0, 0.0], 0.0, 32).unwrap()]).unwrap();
    let cfg = RateConfig { shape: ell, pairs: vec![(0.25, 0.2)], ..cfg };
    assert!(matches!(rate_sweep(&cfg), Err(dilute_hom::Error::Unsupported(_))));
}

#[test]
fn small_rate_sweep() {
    let cfg = RateConfig {
        outer_radius: 1.0,
        shape: circle(32),
        f: poly("4"),
        g: Poly2::zero(),
        pairs: vec![(0.25, 0.3), (0.25, 0.2), (0.25, 0.1)],
        outer_nodes: 1024,
        points_per_period: 16,
    };
    let t = std::time::Instant::now();
    let report = rate_sweep(&cfg).unwrap();
    eprintln!("sweep at eps 1/4: {:?}", t.elapsed());
    for r in &report.rows {
        eprintln!(
            "eta {} zeta {:.4e} plain {:.4e} unperf {:.4e} gap {:.4e} corr {:.4e} ratio {:.4} res {:.1e}/{:.1e} pts {}",
            r.eta,
            r.zeta_h1,
            r.plain_h1,
            r.unperforated_h1,
            r.hom_gap_grad,
            r.corrector_l2,
            r.ratio,
            r.dirichlet_residual,
            r.neumann_residual,
            r.sample_points
        );
        assert!(r.dirichlet_residual <= 1e-7 && r.neumann_residual <= 1e-7);
        assert_eq!(r.tag, regime_classify(r.epsilon, r.eta, 2).unwrap().tag);
    }
    // the corrector L² norm stays below its coarsest-row scaling
    let c: Vec<f64> = report.rows.iter().map(|r| r.corrector_l2 / r.eta).collect();
    assert!(c.iter().all(|v| *v <= 1.5 * c[0]), "{c:?}");
    let u: Vec<f64> = report.rows.iter().map(|r| r.unperforated_h1 / r.eta).collect();
    assert!(spread(&u) <= 3.0, "{u:?}");
}
