//! Python bindings: tensors, regime tags, the self-test and the CLI entry point.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dilute_hom::cell::{chi_diagnostics, solve_cell, solve_exterior, CellMethod};
use dilute_hom::cli;
use dilute_hom::full::regime_classify;
use dilute_hom::geometry::{HoleShape, ShapeSpec};
use dilute_hom::green::{check_r_expansion, default_expansion_radii, TorusGreen};
use dilute_hom::tensor::{effective, polarization};
use dilute_hom::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn shape(spec: &str, nodes: usize) -> Result<HoleShape, Error> {
    ShapeSpec::parse(spec)?.build(nodes)
}

/// `R(0)`, the regular part of the torus Green's function at the origin.
#[pyfunction]
fn torus_r0() -> PyResult<f64> {
    Ok(TorusGreen::new(2).map_err(to_py)?.r0())
}

/// Remainder slope and quadratic coefficient of `R` near the origin.
#[pyfunction]
#[pyo3(signature = (radii=None))]
fn expansion_fit(radii: Option<Vec<f64>>) -> PyResult<(f64, f64)> {
    let g = TorusGreen::new(2).map_err(to_py)?;
    let fit = check_r_expansion(&g, &radii.unwrap_or_else(default_expansion_radii)).map_err(to_py)?;
    Ok((fit.slope, fit.quadratic_coefficient))
}

/// Effective tensor `Ā(η)` as a 2×2 nested list.
#[pyfunction]
#[pyo3(signature = (shape_spec, eta, nodes=64, method="direct"))]
fn effective_tensor(shape_spec: &str, eta: f64, nodes: usize, method: &str) -> PyResult<[[f64; 2]; 2]> {
    let m: CellMethod = method.parse().map_err(to_py)?;
    let s = shape(shape_spec, nodes).map_err(to_py)?;
    let sol = solve_cell(&s, eta, m).map_err(to_py)?;
    Ok(effective(&sol).map_err(to_py)?.matrix)
}

/// Polarization tensor `M` of the hole shape.
#[pyfunction]
#[pyo3(signature = (shape_spec, nodes=64))]
fn polarization_tensor(shape_spec: &str, nodes: usize) -> PyResult<[[f64; 2]; 2]> {
    let s = shape(shape_spec, nodes).map_err(to_py)?;
    let ext = solve_exterior(&s).map_err(to_py)?;
    Ok(polarization(&ext).as_matrix2().expect("planar shape"))
}

/// Corrector norms at one η, keyed like the `cell` CSV columns, one dict per direction.
#[pyfunction]
#[pyo3(signature = (shape_spec, eta, nodes=64))]
fn cell_norms<'py>(py: Python<'py>, shape_spec: &str, eta: f64, nodes: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let s = shape(shape_spec, nodes).map_err(to_py)?;
    let sol = solve_cell(&s, eta, CellMethod::Direct).map_err(to_py)?;
    let diag = chi_diagnostics(&sol).map_err(to_py)?;
    diag.directions
        .iter()
        .map(|n| {
            let d = PyDict::new(py);
            d.set_item("k", n.k + 1)?;
            d.set_item("sup_chi", n.sup_chi)?;
            d.set_item("sup_grad_chi", n.sup_grad_chi)?;
            d.set_item("l2_chi_torus", n.l2_chi_torus)?;
            d.set_item("l2_grad_chi_torus", n.l2_grad_chi_torus)?;
            d.set_item("l2_grad_chi_tilde", n.l2_grad_chi_tilde)?;
            d.set_item("energy_volume", n.energy_volume)?;
            d.set_item("energy_boundary", n.energy_boundary)?;
            Ok(d)
        })
        .collect()
}

/// Regime parameters `(σ, κ, ρ)` and the tag for `(ε, η)`.
#[pyfunction]
#[pyo3(signature = (epsilon, eta, dim=2))]
fn regime<'py>(py: Python<'py>, epsilon: f64, eta: f64, dim: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = regime_classify(epsilon, eta, dim).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("sigma", r.sigma)?;
    d.set_item("kappa", r.kappa)?;
    d.set_item("rho", r.rho)?;
    d.set_item("tag", r.tag.to_string())?;
    d.set_item("bound", r.bound())?;
    Ok(d)
}

/// Self-test table as `(name, value, tolerance, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (perturb_weight=0.0))]
fn selftest(perturb_weight: f64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let checks = cli::selftest_checks(perturb_weight).map_err(to_py)?;
    Ok(checks.into_iter().map(|c| (c.name.to_string(), c.value, c.tolerance, c.pass)).collect())
}

/// Runs the command line (without the program name) and returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::run(std::iter::once("dilute-hom".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "dilute_hom")]
fn dilute_hom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(torus_r0, m)?)?;
    m.add_function(wrap_pyfunction!(expansion_fit, m)?)?;
    m.add_function(wrap_pyfunction!(effective_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(polarization_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(cell_norms, m)?)?;
    m.add_function(wrap_pyfunction!(regime, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
