//! Two-scale check of the homogenized limit on the unit box.
//!
//! A periodic cell realization (period `L`) is tiled, shrunk by
//! `eps = eta / L` and trimmed to `U = [0, 1]^d`, so the microstructure has
//! period `eta` in `U`. The corrector of the cell then gives the two-scale
//! expansion `u_eps ~ u + eps psi_E(x / eps) E:D(u)` directly.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::effective::CellSolve;
use crate::error::{Error, Result};
use crate::geometry::{restrict_to_box, Aabb, InclusionSet, Point};
use crate::grid::{FaceField, Grid};
use crate::raster::{rasterize, LabelField, FLUID};
use crate::stokes::{solve_eps_problem, solve_flow, solve_weak_sedimentation, FlowSolution, SolverOptions, Viscosity};
use crate::strain::StrainBasis;

/// Body forces used on the box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Forcing {
    /// `f = (sin pi x sin pi y, cos pi x cos pi y, 0)` on the fluid.
    Smooth,
    /// `f = 0` and a constant load `g` per unit inclusion volume.
    Sedimentation { g: [f64; 3] },
}

impl Forcing {
    pub fn describe(&self) -> String {
        match self {
            Forcing::Smooth => "f=(sin(pi x)sin(pi y),cos(pi x)cos(pi y),0)".into(),
            Forcing::Sedimentation { g } => format!("f=0,g=({},{},{})", g[0], g[1], g[2]),
        }
    }
}

pub fn smooth_force(x: &Point) -> [f64; 3] {
    [
        (PI * x[0]).sin() * (PI * x[1]).sin(),
        (PI * x[0]).cos() * (PI * x[1]).cos(),
        0.0,
    ]
}

/// Right-hand side of the homogenized equation: `(1 - lambda_k) f_k`
/// per component, where `lambda_k` is the rigid face fraction of the
/// `eps`-problem, plus `lambda g` for sedimentation.
pub fn homogenized_rhs(eps_labels: &LabelField, f: &FaceField, g: Option<[f64; 3]>) -> FaceField {
    let grid = &eps_labels.grid;
    let lambda = eps_labels.labeled_fraction();
    let mut out = FaceField::zeros(grid);
    for k in 0..grid.dim {
        let scale = 1.0 - eps_labels.rigid_face_fraction(k);
        let extra = g.map_or(0.0, |g| lambda * g[k]);
        grid.faces(k).for_each(|fi, i| {
            if !grid.is_wall_face(k, i) {
                out.comps[k][fi] = scale * f.comps[k][fi] + extra;
            }
        });
    }
    out
}

/// Constant-coefficient Stokes problem `-div 2B D(u) + grad P = rhs` on a
/// Dirichlet grid, `u = 0` on the walls, zero-mean `P`.
pub fn solve_homogenized(grid: &Grid, b_matrix: &DMatrix<f64>, rhs: &FaceField, opts: &SolverOptions) -> Result<FlowSolution> {
    let basis = StrainBasis::new(grid.dim);
    if b_matrix.nrows() != basis.len() || b_matrix.ncols() != basis.len() {
        return Err(Error::ShapeMismatch("effective tensor does not match the strain basis".into()));
    }
    let sym = (b_matrix + b_matrix.transpose()) * 0.5;
    let min = SymmetricEigen::new(sym).eigenvalues.min();
    if min < 1.0 - 1e-6 {
        return Err(Error::InvalidParams(format!("effective tensor not coercive: smallest eigenvalue {min}")));
    }
    let labels = LabelField::empty(grid);
    let viscosity = Viscosity::Anisotropic {
        basis,
        tensor: b_matrix.clone(),
    };
    solve_flow(&labels, viscosity, rhs, None, opts)
}

/// Multilinear interpolation of a periodic grid function. `node[j]` says
/// whether samples sit at `i h` (true) or `(i + 1/2) h` along axis `j`.
fn sample_periodic(grid: &Grid, shape: &[usize; 3], values: &[f64], node: [bool; 3], y: &Point) -> f64 {
    let d = grid.dim;
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for j in 0..d {
        let mut t = (y[j] - grid.origin[j]) / grid.h;
        if !node[j] {
            t -= 0.5;
        }
        let fl = t.floor();
        base[j] = fl as i64;
        frac[j] = t - fl;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = 0;
        let mut stride = 1;
        for j in 0..d {
            let up = (corner >> j) & 1 == 1;
            w *= if up { frac[j] } else { 1.0 - frac[j] };
            let i = (base[j] + up as i64).rem_euclid(shape[j] as i64) as usize;
            idx += i * stride;
            stride *= shape[j];
        }
        if w != 0.0 {
            acc += w * values[idx];
        }
    }
    acc
}

/// One rung of the ladder.
#[derive(Clone, Debug, Serialize)]
pub struct TwoScaleRow {
    /// Period of the microstructure in `U`.
    pub eps: f64,
    pub lambda_eps: f64,
    pub h1_err_vel: f64,
    /// `|u_eps - u|_{L^2}`, which vanishes with the period (strong `L^2`
    /// limit of a weakly converging sequence).
    pub l2_err_vel: f64,
    pub l2_err_press: f64,
    /// Same pressure error without the optimal constant.
    pub l2_err_press_unshifted: f64,
    /// Largest block average of `|u_eps - u|` over a `4^d` partition.
    pub weak_avg_err: f64,
    pub n: usize,
    pub inclusions: usize,
    pub iterations_eps: usize,
    pub iterations_hom: usize,
    /// Worse energy-identity mismatch of the two solves.
    pub energy_identity: f64,
    /// Largest force or torque residual of the `eps`-problem.
    pub balance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TwoScaleReport {
    pub eps_ladder: Vec<f64>,
    pub rows: Vec<TwoScaleRow>,
    pub forcing: String,
    pub seed: u64,
}

impl TwoScaleReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,lambda_eps,h1_err_vel,l2_err_press,weak_avg_err\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.eps, r.lambda_eps, r.h1_err_vel, r.l2_err_press, r.weak_avg_err
            ));
        }
        s
    }
}

/// Basis coordinates `E_j : D(u)` at every cell.
fn strain_coords(grid: &Grid, u: &FaceField, basis: &StrainBasis) -> Vec<Vec<f64>> {
    let s = grid.sym_grad(u).expect("field matches grid");
    let mut out = vec![vec![0.0; basis.len()]; grid.cells().len()];
    grid.cells().for_each(|c, i| {
        let m = grid.cell_strain(&s, c, i);
        out[c] = basis.coords(&m);
    });
    out
}

/// Error measures of the two-scale expansion for one `eps`-problem.
///
/// `eps` is the scale factor between the cell and `U` (period / `L`);
/// the reported `eps` of the row is the period itself.
pub fn two_scale_errors(
    eps_labels: &LabelField,
    u_eps: &FlowSolution,
    hom: &FlowSolution,
    cell: &CellSolve,
    eps: f64,
) -> Result<TwoScaleRow> {
    let g = &eps_labels.grid;
    let cg = &cell.labels.grid;
    let d = g.dim;
    if cg.dim != d || !cg.is_periodic() || g.is_periodic() {
        return Err(Error::GridMismatch("need a periodic cell grid and a Dirichlet box grid".into()));
    }
    for sol in [u_eps, hom] {
        if (0..d).any(|k| sol.u.comps[k].len() != g.faces(k).len()) || sol.p.len() != g.cells().len() {
            return Err(Error::GridMismatch("flow field lives on another grid".into()));
        }
    }
    let basis = StrainBasis::new(d);
    if cell.correctors.len() != basis.len() {
        return Err(Error::InconsistentInputs("need one corrector per basis strain".into()));
    }
    let ccells = cg.cells();
    let cshape = ccells.ext;
    let cell_of = |x: &Point| {
        let mut i = [0usize; 3];
        for j in 0..d {
            let t = ((x[j] / eps - cg.origin[j]) / cg.h).floor() as i64;
            i[j] = t.rem_euclid(cg.n as i64) as usize;
        }
        ccells.index(i)
    };
    let cells = g.cells();
    let mut mismatch = 0usize;
    cells.for_each(|c, i| {
        if eps_labels.cells[c] != FLUID && cell.labels.cells[cell_of(&g.cell_center(i))] == FLUID {
            mismatch += 1;
        }
    });
    if mismatch > 0 {
        return Err(Error::GridMismatch(format!(
            "{mismatch} inclusion cells of the box problem are fluid in the rescaled cell"
        )));
    }

    let coords = strain_coords(g, &hom.u, &basis);
    let mut w = FaceField::zeros(g);
    let mut diff = FaceField::zeros(g);
    for k in 0..d {
        let fs = g.faces(k);
        let shape = cg.faces(k).ext;
        let mut node = [false; 3];
        node[k] = true;
        fs.for_each(|f, i| {
            let x = g.face_center(k, i);
            let y = [x[0] / eps, x[1] / eps, x[2] / eps];
            let mut a = vec![0.0; basis.len()];
            let mut cnt = 0.0;
            let mut lo = i;
            if i[k] > 0 {
                lo[k] -= 1;
                for (aj, v) in a.iter_mut().zip(&coords[cells.index(lo)]) {
                    *aj += v;
                }
                cnt += 1.0;
            }
            if i[k] < g.n {
                for (aj, v) in a.iter_mut().zip(&coords[cells.index(i)]) {
                    *aj += v;
                }
                cnt += 1.0;
            }
            let mut corr = 0.0;
            for (j, sol) in cell.correctors.iter().enumerate() {
                corr += a[j] / cnt * sample_periodic(cg, &shape, &sol.psi.comps[k], node, &y);
            }
            let dv = u_eps.u.comps[k][f] - hom.u.comps[k][f];
            diff.comps[k][f] = dv;
            w.comps[k][f] = dv - eps * corr;
        });
    }
    let h1_err_vel = (g.l2_sq(&w) + g.dirichlet_energy(&w)?).sqrt();
    let l2_err_vel = g.l2_sq(&diff).sqrt();

    let b_vec = &cell.coefficients.b_vector;
    let mut perr = Vec::new();
    cells.for_each(|c, i| {
        if eps_labels.cells[c] != FLUID {
            return;
        }
        let x = g.cell_center(i);
        let y = [x[0] / eps, x[1] / eps, x[2] / eps];
        let mut e = u_eps.p[c] - hom.p[c];
        for (j, sol) in cell.correctors.iter().enumerate() {
            let a = coords[c][j];
            e -= b_vec[j] * a + a * sample_periodic(cg, &cshape, &sol.sigma, [false; 3], &y);
        }
        perr.push(e);
    });
    let hd = g.cell_volume();
    let kappa = perr.iter().sum::<f64>() / perr.len().max(1) as f64;
    let l2_err_press = (perr.iter().map(|e| (e - kappa).powi(2)).sum::<f64>() * hd).sqrt();
    let l2_err_press_unshifted = (perr.iter().map(|e| e * e).sum::<f64>() * hd).sqrt();

    Ok(TwoScaleRow {
        eps: eps * cg.extent(),
        lambda_eps: eps_labels.labeled_fraction(),
        h1_err_vel,
        l2_err_vel,
        l2_err_press,
        l2_err_press_unshifted,
        weak_avg_err: block_average_error(g, &diff, 4),
        n: g.n,
        inclusions: eps_labels.n_inclusions(),
        iterations_eps: u_eps.iterations,
        iterations_hom: hom.iterations,
        energy_identity: u_eps.residuals.energy_identity.max(hom.residuals.energy_identity),
        balance: u_eps.residuals.force.max(u_eps.residuals.torque),
    })
}

/// Largest vector norm of the per-block face averages of `v` over a
/// `parts^d` partition of the grid.
fn block_average_error(g: &Grid, v: &FaceField, parts: usize) -> f64 {
    let d = g.dim;
    let nb = parts.pow(d as u32);
    let mut sums = vec![[0.0; 3]; nb];
    let mut counts = vec![[0.0; 3]; nb];
    let lo = g.origin;
    let side = g.extent();
    for k in 0..d {
        g.faces(k).for_each(|f, i| {
            let x = g.face_center(k, i);
            let mut b = 0;
            let mut stride = 1;
            for j in 0..d {
                let t = (((x[j] - lo[j]) / side * parts as f64).floor() as usize).min(parts - 1);
                b += t * stride;
                stride *= parts;
            }
            sums[b][k] += v.comps[k][f];
            counts[b][k] += 1.0;
        });
    }
    (0..nb)
        .map(|b| (0..d).map(|k| (sums[b][k] / counts[b][k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct LadderParams {
    /// Microstructure periods in `U`, coarse to fine.
    pub etas: Vec<f64>,
    pub forcing: Forcing,
    pub opts: SolverOptions,
}

/// Box grid resolution that makes the rescaled cell grid line up with the
/// box grid.
pub fn aligned_resolution(cell_grid: &Grid, eta: f64) -> Result<usize> {
    let n = cell_grid.n as f64 / eta;
    let r = n.round();
    if r < 1.0 || (n - r).abs() > 1e-9 * n {
        return Err(Error::GridMismatch(format!(
            "period {eta} does not align {} cell layers with the unit box",
            cell_grid.n
        )));
    }
    Ok(r as usize)
}

/// Solves one rung: `eps`-problem, homogenized problem and errors.
pub fn run_rung(set: &InclusionSet, cell: &CellSolve, eta: f64, forcing: Forcing, opts: &SolverOptions) -> Result<TwoScaleRow> {
    let cg = &cell.labels.grid;
    let eps = eta / cg.extent();
    let n = aligned_resolution(cg, eta)?;
    let bx = Aabb::unit();
    let grid = Grid::dirichlet(set.dim, n, &bx)?;
    let eps_set = restrict_to_box(set, eps, &bx)?;
    let labels = rasterize(&eps_set, &grid)?;
    let (u_eps, f, g) = match forcing {
        Forcing::Smooth => {
            let f = grid.sample_faces(smooth_force);
            (solve_eps_problem(&labels, &f, opts)?, f, None)
        }
        Forcing::Sedimentation { g } => {
            let f = FaceField::zeros(&grid);
            let gf = grid.sample_faces(|_| g);
            (solve_weak_sedimentation(&labels, &f, &gf, opts)?, f, Some(g))
        }
    };
    let rhs = homogenized_rhs(&labels, &f, g);
    let hom = solve_homogenized(&grid, &cell.coefficients.b_matrix, &rhs, opts)?;
    log::info!(
        "rung eta={eta}: N={n}, {} inclusions, {} + {} iterations",
        labels.n_inclusions(),
        u_eps.iterations,
        hom.iterations
    );
    two_scale_errors(&labels, &u_eps, &hom, cell, eps)
}

/// Runs every rung of the ladder in parallel; rows come back in ladder
/// order.
pub fn two_scale_ladder(set: &InclusionSet, cell: &CellSolve, p: &LadderParams) -> Result<TwoScaleReport> {
    if p.etas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParams("the ladder must be strictly decreasing".into()));
    }
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = p
            .etas
            .iter()
            .map(|&eta| s.spawn(move || run_rung(set, cell, eta, p.forcing, &p.opts)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rung thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(TwoScaleReport {
        eps_ladder: p.etas.clone(),
        rows,
        forcing: p.forcing.describe(),
        seed: set.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective::solve_cell;

    #[test]
    fn periodic_sampling_is_exact_at_nodes_and_linear_between() {
        let g = Grid::periodic(2, 4, 4.0).unwrap();
        let shape = [4, 4, 1];
        let vals: Vec<f64> = (0..16).map(|i| (i % 4) as f64).collect();
        assert_eq!(sample_periodic(&g, &shape, &vals, [true, true, false], &[2.0, 1.0, 0.0]), 2.0);
        assert!((sample_periodic(&g, &shape, &vals, [true, true, false], &[2.5, 1.0, 0.0]) - 2.5).abs() < 1e-15);
        // wraps from the last column to the first
        assert!((sample_periodic(&g, &shape, &vals, [true, true, false], &[3.5, 0.0, 0.0]) - 1.5).abs() < 1e-15);
        assert!((sample_periodic(&g, &shape, &vals, [false, false, false], &[1.5, 0.5, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn homogenized_with_zero_force_is_zero() {
        let g = Grid::dirichlet(2, 16, &Aabb::unit()).unwrap();
        let b = DMatrix::identity(2, 2) * 1.3;
        let sol = solve_homogenized(&g, &b, &FaceField::zeros(&g), &SolverOptions::default()).unwrap();
        assert!(sol.u.comps.iter().flatten().all(|&x| x == 0.0));
        assert!(sol.p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn homogenized_identity_matches_plain_stokes() {
        let g = Grid::dirichlet(2, 32, &Aabb::unit()).unwrap();
        let f = g.sample_faces(smooth_force);
        let opts = SolverOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let hom = solve_homogenized(&g, &DMatrix::identity(2, 2), &f, &opts).unwrap();
        let plain = solve_eps_problem(&LabelField::empty(&g), &f, &opts).unwrap();
        let mut diff = hom.u.clone();
        diff.axpy(-1.0, &plain.u);
        assert!(g.l2_sq(&diff).sqrt() < 1e-8 * g.l2_sq(&plain.u).sqrt());
    }

    #[test]
    fn homogenized_energy_identity() {
        let g = Grid::dirichlet(2, 32, &Aabb::unit()).unwrap();
        let f = g.sample_faces(smooth_force);
        let b = DMatrix::from_row_slice(2, 2, &[1.4, 0.1, 0.1, 1.2]);
        let sol = solve_homogenized(&g, &b, &f, &SolverOptions::default()).unwrap();
        assert!(sol.residuals.energy_identity < 1e-8, "{}", sol.residuals.energy_identity);
    }

    #[test]
    fn gradient_forcing_keeps_the_energy_identity() {
        let g = Grid::dirichlet(2, 32, &Aabb::unit()).unwrap();
        let rhs = g.sample_faces(|_| [0.0, -0.1, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.4, 0.1, 0.1, 1.2]);
        let sol = solve_homogenized(&g, &b, &rhs, &SolverOptions::default()).unwrap();
        assert!(g.l2_sq(&sol.u).sqrt() < 1e-8);
        assert!(sol.residuals.energy_identity < 1e-8, "{}", sol.residuals.energy_identity);
    }

    #[test]
    fn non_coercive_tensor_is_rejected() {
        let g = Grid::dirichlet(2, 8, &Aabb::unit()).unwrap();
        let b = DMatrix::identity(2, 2) * 0.5;
        let err = solve_homogenized(&g, &b, &FaceField::zeros(&g), &SolverOptions::default());
        assert!(matches!(err, Err(Error::InvalidParams(_))));
    }

    #[test]
    fn empty_cell_gives_zero_errors() {
        let set = InclusionSet::manual(2, 8.0, 0.5, vec![]).unwrap();
        let cell = solve_cell(&set, 16, &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let row = run_rung(&set, &cell, 0.5, Forcing::Smooth, &opts).unwrap();
        assert_eq!(row.lambda_eps, 0.0);
        assert!(row.h1_err_vel < 1e-9, "{}", row.h1_err_vel);
        assert!(row.l2_err_press < 1e-9, "{}", row.l2_err_press);
    }

    #[test]
    fn misaligned_period_is_a_grid_mismatch() {
        let g = Grid::periodic(2, 32, 8.0).unwrap();
        assert_eq!(aligned_resolution(&g, 0.25).unwrap(), 128);
        assert!(matches!(aligned_resolution(&g, 0.3), Err(Error::GridMismatch(_))));
    }
}
