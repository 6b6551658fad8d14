//! Browser bindings: RSA geometry, a corrector field and the effective
//! coefficients of one small 2D periodic cell.
//!
//! The plain functions return `Result<_, String>` so they run natively in
//! tests; the `#[wasm_bindgen]` wrappers only convert the error.

use stokes_rve::effective::solve_cell;
use stokes_rve::geometry::{rsa_generate, InclusionSet, RsaParams};
use stokes_rve::grid::Grid;
use stokes_rve::raster::{rasterize, FLUID};
use stokes_rve::stokes::{solve_corrector, SolverOptions};
use stokes_rve::strain::StrainBasis;
use wasm_bindgen::prelude::*;

/// Largest grid the page may request.
pub const MAX_N: usize = 128;

fn cell(cell_length: f64, lambda: f64, gap: f64, seed: u32) -> Result<InclusionSet, String> {
    rsa_generate(&RsaParams::new(2, cell_length, lambda, gap, seed as u64)).map_err(|e| e.to_string())
}

fn check_n(n: usize) -> Result<(), String> {
    if (8..=MAX_N).contains(&n) {
        Ok(())
    } else {
        Err(format!("grid size must lie in [8, {MAX_N}], got {n}"))
    }
}

/// Ball centers as `x0, y0, x1, y1, ...`; unit radius.
pub fn centers(cell_length: f64, lambda: f64, gap: f64, seed: u32) -> Result<Vec<f64>, String> {
    let set = cell(cell_length, lambda, gap, seed)?;
    Ok(set.centers.iter().flat_map(|c| [c[0], c[1]]).collect())
}

/// Speed `|psi + E x - <E x>|` of the corrector for basis strain `strain`
/// (0: `diag(1,-1)/sqrt 2`, 1: shear) at the cell centers, `x` fastest.
/// Inclusion cells hold `NaN`.
pub fn corrector_speed(
    cell_length: f64,
    lambda: f64,
    gap: f64,
    seed: u32,
    n: usize,
    strain: usize,
) -> Result<Vec<f64>, String> {
    check_n(n)?;
    let e = *StrainBasis::new(2)
        .elements
        .get(strain)
        .ok_or_else(|| format!("strain index {strain} out of range"))?;
    let set = cell(cell_length, lambda, gap, seed)?;
    let grid = Grid::periodic(2, n, cell_length).map_err(|e| e.to_string())?;
    let labels = rasterize(&set, &grid).map_err(|e| e.to_string())?;
    let sol = solve_corrector(&labels, &e, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let fx = grid.faces(0);
    let fy = grid.faces(1);
    let mid = 0.5 * cell_length;
    let mut out = vec![f64::NAN; n * n];
    grid.cells().for_each(|c, i| {
        if labels.cells[c] != FLUID {
            return;
        }
        let mut j = i;
        j[0] = (i[0] + 1) % n;
        let ux = 0.5 * (sol.psi.comps[0][fx.index(i)] + sol.psi.comps[0][fx.index(j)]);
        let mut j = i;
        j[1] = (i[1] + 1) % n;
        let uy = 0.5 * (sol.psi.comps[1][fy.index(i)] + sol.psi.comps[1][fy.index(j)]);
        let x = grid.cell_center(i);
        let (rx, ry) = (x[0] - mid, x[1] - mid);
        let vx = ux + e[(0, 0)] * rx + e[(0, 1)] * ry;
        let vy = uy + e[(1, 0)] * rx + e[(1, 1)] * ry;
        out[c] = (vx * vx + vy * vy).sqrt();
    });
    Ok(out)
}

/// Effective coefficients as JSON: `B` (row-major, canonical basis), its
/// eigenvalues, `b`, the realized volume fraction and iteration count.
pub fn effective(cell_length: f64, lambda: f64, gap: f64, seed: u32, n: usize) -> Result<String, String> {
    check_n(n)?;
    let set = cell(cell_length, lambda, gap, seed)?;
    let cs = solve_cell(&set, n, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let c = &cs.coefficients;
    let b: Vec<f64> = c.b_matrix.iter().copied().collect();
    let v = serde_json::json!({
        "B": b,
        "eigenvalues": c.eigenvalues(),
        "b": c.b_vector,
        "lambda": c.lambda,
        "inclusions": set.len(),
        "iterations": c.iterations,
    });
    Ok(v.to_string())
}

#[wasm_bindgen(js_name = rsaCenters)]
pub fn rsa_centers_js(cell_length: f64, lambda: f64, gap: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    centers(cell_length, lambda, gap, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = correctorSpeed)]
pub fn corrector_speed_js(
    cell_length: f64,
    lambda: f64,
    gap: f64,
    seed: u32,
    n: usize,
    strain: usize,
) -> Result<Vec<f64>, JsError> {
    corrector_speed(cell_length, lambda, gap, seed, n, strain).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = effectiveCoefficients)]
pub fn effective_js(cell_length: f64, lambda: f64, gap: f64, seed: u32, n: usize) -> Result<String, JsError> {
    effective(cell_length, lambda, gap, seed, n).map_err(|e| JsError::new(&e))
}
