//! Effective viscosity `B` and pressure coefficient `b` from cell
//! correctors.
//!
//! `b` is assembled twice. The volume form tests the discrete momentum
//! equation against `E'(x - x_n)` on the rigid faces of each inclusion,
//! which gives the traction moments `Z` exactly in the discrete sense.
//! The surface form samples finite-difference tractions on a cell surface
//! half a radius away from each inclusion and corrects with the fluid
//! stress in between. The volume form is the reported `b`; the surface
//! form is kept for cross-checks.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{InclusionSet, Point};
use crate::grid::{pairs, FaceField, Grid};
use crate::raster::{rasterize, LabelField, FLUID};
use crate::stokes::{solve_corrector, CorrectorSolution, SolverOptions, StokesSystem, Viscosity};
use crate::strain::StrainBasis;

#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub seed: u64,
    pub cell_length: f64,
    pub n: usize,
    pub tol: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZFieldSummary {
    /// Per-inclusion surface traction moments.
    pub per_inclusion: Vec<Matrix3<f64>>,
    pub mean_surface: Matrix3<f64>,
    pub mean_volume: Matrix3<f64>,
    /// `max |E':Z|` over unit skew `E'`, relative to `|Z|`, per path.
    pub skew_surface: f64,
    pub skew_volume: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EffectiveCoefficients {
    pub dim: usize,
    /// `E_i : B E_j` in the canonical basis.
    pub b_matrix: DMatrix<f64>,
    /// `b : E_i`, volume form.
    pub b_vector: Vec<f64>,
    /// `b : E_i`, surface form.
    pub b_surface: Vec<f64>,
    pub lambda: f64,
    pub meta: Meta,
    pub res_force: f64,
    pub res_torque: f64,
    pub iterations: usize,
    pub z: Vec<ZFieldSummary>,
}

impl EffectiveCoefficients {
    pub fn basis(&self) -> StrainBasis {
        StrainBasis::new(self.dim)
    }

    /// `b` as a trace-free symmetric matrix.
    pub fn b_matrix_form(&self) -> Matrix3<f64> {
        self.basis().matrix(&self.b_vector)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let sym = (&self.b_matrix + self.b_matrix.transpose()) * 0.5;
        let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Isotropic fit: mean eigenvalue.
    pub fn shear_modulus(&self) -> f64 {
        self.b_matrix.trace() / self.b_matrix.nrows() as f64
    }

    pub fn anisotropy(&self) -> f64 {
        let m = self.b_matrix.nrows();
        let iso = DMatrix::identity(m, m) * self.shear_modulus();
        (&self.b_matrix - iso).norm() / self.b_matrix.norm()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.b_matrix - self.b_matrix.transpose()).norm() / self.b_matrix.norm()
    }

    /// `2 (Id - B) E_j - (b:E_j) Id`, the expected mean of `Z_{E_j}`.
    pub fn z_target(&self, j: usize) -> Matrix3<f64> {
        let basis = self.basis();
        let mut be = Matrix3::zeros();
        for (i, e) in basis.elements.iter().enumerate() {
            be += e * self.b_matrix[(i, j)];
        }
        let mut id = Matrix3::zeros();
        for k in 0..self.dim {
            id[(k, k)] = 1.0;
        }
        (basis.elements[j] - be) * 2.0 - id * self.b_vector[j]
    }

    /// Relative Frobenius mismatch between the surface-assembled mean
    /// traction moments and [`Self::z_target`], over all basis strains.
    pub fn z_identity_error(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..self.b_vector.len() {
            let t = self.z_target(j);
            num += (self.z[j].mean_surface - t).norm_squared();
            den += t.norm_squared();
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

fn check_inputs(labels: &LabelField, solutions: &[CorrectorSolution]) -> Result<StrainBasis> {
    let g = &labels.grid;
    let basis = StrainBasis::new(g.dim);
    if solutions.len() != basis.len() {
        return Err(Error::InconsistentInputs(format!(
            "need {} corrector solutions, got {}",
            basis.len(),
            solutions.len()
        )));
    }
    for (s, e) in solutions.iter().zip(&basis.elements) {
        if s.psi.comps.len() != g.dim
            || (0..g.dim).any(|k| s.psi.comps[k].len() != g.faces(k).len())
            || s.sigma.len() != g.cells().len()
        {
            return Err(Error::InconsistentInputs("corrector lives on another grid".into()));
        }
        if (s.e - e).norm() > 1e-12 {
            return Err(Error::InconsistentInputs(
                "correctors must be ordered by the canonical strain basis".into(),
            ));
        }
    }
    Ok(basis)
}

/// `E_i : B E_j = <(D psi_i + E_i) : (D psi_j + E_j)>`, cell average.
pub fn effective_tensor(labels: &LabelField, solutions: &[CorrectorSolution]) -> Result<DMatrix<f64>> {
    let basis = check_inputs(labels, solutions)?;
    let g = &labels.grid;
    let m = basis.len();
    let vol = g.domain_volume();
    let strains: Vec<_> = solutions
        .iter()
        .map(|s| {
            let mut t = g.sym_grad(&s.psi).expect("checked shape");
            t.add_constant(&s.e);
            t
        })
        .collect();
    let mut b = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = strains[i].inner(&strains[j], g) / vol;
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    Ok(b)
}

/// `R(v) = a(psi + E x, v) - h^d (Sigma, div v)_fluid`.
fn momentum_functional(sys: &StokesSystem, labels: &LabelField, sol: &CorrectorSolution, v: &FaceField) -> f64 {
    let g = &labels.grid;
    let dv = g.div(v).expect("field matches grid");
    let press: f64 = (0..dv.len())
        .filter(|&c| labels.cells[c] == FLUID)
        .map(|c| sol.sigma[c] * dv[c])
        .sum();
    sys.energy(&sol.psi, v, Some(&sol.e)) - g.cell_volume() * press
}

/// Mean traction moment from the discrete momentum equation: component
/// `(a, b)` tests it with `e_a (x - x_n)_b` on rigid faces.
fn z_volume(sys: &StokesSystem, labels: &LabelField, sol: &CorrectorSolution) -> Matrix3<f64> {
    let g = &labels.grid;
    let d = g.dim;
    let vol = g.domain_volume();
    let mut z = Matrix3::zeros();
    for a in 0..d {
        for b in 0..d {
            let mut v = FaceField::zeros(g);
            for (k, f, _, r) in sys.rigid_faces() {
                if k == a {
                    v.comps[k][f] = r[b];
                }
            }
            z[(a, b)] = momentum_functional(sys, labels, sol, &v) / vol;
        }
    }
    z
}

/// Cells within `radius / 2` of an inclusion surface, each given to the
/// nearest inclusion. Labeled cells keep their own label.
fn owner_cells(labels: &LabelField) -> Vec<u32> {
    let g = &labels.grid;
    let d = g.dim;
    let cells = g.cells();
    let mut owner = labels.cells.clone();
    let mut best = vec![f64::INFINITY; owner.len()];
    let reach = 1.5 * labels.radius;
    let w = (reach / g.h).ceil() as i64 + 1;
    for (n, c) in labels.centers.iter().enumerate() {
        let mut base = [0i64; 3];
        for j in 0..d {
            base[j] = ((c[j] - g.origin[j]) / g.h).floor() as i64;
        }
        let span = 2 * w + 1;
        let total = span.pow(d as u32);
        for t in 0..total {
            let mut i = [0usize; 3];
            let mut rem = t;
            let mut inside = true;
            for j in 0..d {
                let mut x = base[j] - w + rem % span;
                rem /= span;
                if g.is_periodic() {
                    x = x.rem_euclid(g.n as i64);
                } else if x < 0 || x >= g.n as i64 {
                    inside = false;
                }
                i[j] = x as usize;
            }
            if !inside {
                continue;
            }
            let ci = cells.index(i);
            if labels.cells[ci] != FLUID {
                continue;
            }
            let r = labels.offset(n, &g.cell_center(i));
            let dist = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if dist < reach && dist < best[ci] {
                best[ci] = dist;
                owner[ci] = n as u32;
            }
        }
    }
    owner
}

/// Per-inclusion traction moments `Z_n`, moved off the staircase: tractions
/// are summed over the boundary of the owned cell set `C_n` and the fluid
/// stress over `C_n` is added back,
/// `Z_n = -sum_{dC_n} (sigma nu) (x - x_n)^T h^{d-1} + sum_{C_n fluid} sigma h^d`.
fn z_surface(labels: &LabelField, sol: &CorrectorSolution) -> Vec<Matrix3<f64>> {
    let g = &labels.grid;
    let d = g.dim;
    let cells = g.cells();
    let mut s = g.sym_grad(&sol.psi).expect("field matches grid");
    s.add_constant(&sol.e);
    let owner = owner_cells(labels);
    let area = g.h.powi(d as i32 - 1);
    let vol = g.cell_volume();
    let mut z = vec![Matrix3::zeros(); labels.n_inclusions()];
    let diag = |k: usize, c: usize| 2.0 * s.diag[k][c] - sol.sigma[c];
    for k in 0..d {
        g.faces(k).for_each(|_, i| {
            if g.is_wall_face(k, i) {
                return;
            }
            let mut lo = i;
            lo[k] = if i[k] == 0 { g.n - 1 } else { i[k] - 1 };
            let (cl, ch) = (cells.index(lo), cells.index(i));
            let (a, b) = (owner[cl], owner[ch]);
            if a == b {
                return;
            }
            let mut tk = 0.0;
            let mut cnt = 0.0;
            for c in [cl, ch] {
                if labels.cells[c] == FLUID {
                    tk += diag(k, c);
                    cnt += 1.0;
                }
            }
            let mut t = Vector3::zeros();
            t[k] = tk / cnt;
            for (p, &(pk, pl)) in pairs(d).iter().enumerate() {
                if pk != k && pl != k {
                    continue;
                }
                let other = if pk == k { pl } else { pk };
                let es = g.edges(pk, pl);
                let mut e1 = i;
                e1[other] = g.up(i[other]);
                t[other] = s.off[p][es.index(i)] + s.off[p][es.index(e1)];
            }
            let x = g.face_center(k, i);
            for (n, sign) in [(a, 1.0), (b, -1.0)] {
                if n == FLUID {
                    continue;
                }
                let r = labels.offset(n as usize, &x);
                let rv = Vector3::new(r[0], r[1], r[2]);
                z[n as usize] -= t * rv.transpose() * (sign * area);
            }
        });
    }
    cells.for_each(|c, i| {
        let n = owner[c];
        if n == FLUID || labels.cells[c] != FLUID {
            return;
        }
        let mut sig = g.cell_strain(&s, c, i) * 2.0;
        for k in 0..d {
            sig[(k, k)] -= sol.sigma[c];
        }
        z[n as usize] += sig * vol;
    });
    z
}

fn skew_part(z: &Matrix3<f64>) -> f64 {
    let skew = (z - z.transpose()) * 0.5;
    let n = z.norm();
    if n == 0.0 {
        0.0
    } else {
        skew.norm() / n
    }
}

/// Volume- and surface-form pressure coefficients and the traction
/// moment summaries, one per basis strain.
pub fn effective_pressure_coefficient(
    labels: &LabelField,
    solutions: &[CorrectorSolution],
) -> Result<(Vec<f64>, Vec<f64>, Vec<ZFieldSummary>)> {
    check_inputs(labels, solutions)?;
    let g = &labels.grid;
    let d = g.dim as f64;
    let vol = g.domain_volume();
    let sys = StokesSystem::new(labels, Viscosity::Newtonian)?;
    let mut b_vol = Vec::new();
    let mut b_surf = Vec::new();
    let mut summaries = Vec::new();
    for sol in solutions {
        let zv = z_volume(&sys, labels, sol);
        let per = z_surface(labels, sol);
        let zs = per.iter().fold(Matrix3::zeros(), |a, z| a + z) / vol;
        b_vol.push(-zv.trace() / d);
        b_surf.push(-zs.trace() / d);
        summaries.push(ZFieldSummary {
            per_inclusion: per,
            mean_surface: zs,
            mean_volume: zv,
            skew_surface: skew_part(&zs),
            skew_volume: skew_part(&zv),
        });
    }
    Ok((b_vol, b_surf, summaries))
}

/// Correctors and coefficients of one realization.
#[derive(Clone, Debug)]
pub struct CellSolve {
    pub labels: LabelField,
    pub correctors: Vec<CorrectorSolution>,
    pub coefficients: EffectiveCoefficients,
}

/// Rasterizes `set` on an `n`-cell periodic grid and solves one corrector
/// per basis strain.
pub fn solve_cell(set: &InclusionSet, n: usize, opts: &SolverOptions) -> Result<CellSolve> {
    let l = set
        .torus_length()
        .ok_or_else(|| Error::InvalidParams("cell problems need a periodic set".into()))?;
    let grid = Grid::periodic(set.dim, n, l)?;
    let labels = rasterize(set, &grid)?;
    let basis = StrainBasis::new(set.dim);
    let correctors = basis
        .elements
        .iter()
        .map(|e| solve_corrector(&labels, e, opts))
        .collect::<Result<Vec<_>>>()?;
    let coefficients = coefficients_from(set, &labels, &correctors, opts)?;
    Ok(CellSolve {
        labels,
        correctors,
        coefficients,
    })
}

pub fn coefficients_from(
    set: &InclusionSet,
    labels: &LabelField,
    correctors: &[CorrectorSolution],
    opts: &SolverOptions,
) -> Result<EffectiveCoefficients> {
    let b_matrix = effective_tensor(labels, correctors)?;
    let (b_vector, b_surface, z) = effective_pressure_coefficient(labels, correctors)?;
    Ok(EffectiveCoefficients {
        dim: set.dim,
        b_matrix,
        b_vector,
        b_surface,
        lambda: set.volume_fraction(),
        meta: Meta {
            seed: set.seed,
            cell_length: labels.grid.extent(),
            n: labels.grid.n,
            tol: opts.tol,
        },
        res_force: correctors.iter().map(|c| c.residuals.force).fold(0.0, f64::max),
        res_torque: correctors.iter().map(|c| c.residuals.torque).fold(0.0, f64::max),
        iterations: correctors.iter().map(|c| c.iterations).sum(),
        z,
    })
}

/// Mean and sample standard deviation (`n - 1`); zero spread for a single
/// sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleRow {
    pub cell_length: f64,
    pub seeds: usize,
    pub mean_b: Vec<f64>,
    pub std_b: Vec<f64>,
    pub mean_bvec: Vec<f64>,
    pub std_bvec: Vec<f64>,
    pub mean_shear: f64,
    pub std_shear: f64,
    pub mean_b_norm: f64,
    pub std_b_norm: f64,
    /// Largest mean-gradient residual over the correctors.
    pub max_mean_grad: f64,
}

/// Statistics over realizations of one cell size. Matrix entries are
/// listed row-major.
pub fn ensemble_row(samples: &[EffectiveCoefficients], max_mean_grad: f64) -> Result<EnsembleRow> {
    if samples.len() < 2 {
        return Err(Error::InvalidParams("ensemble statistics need at least 2 seeds".into()));
    }
    let m = samples[0].b_matrix.nrows();
    let entry = |f: &dyn Fn(&EffectiveCoefficients) -> f64| {
        mean_std(&samples.iter().map(f).collect::<Vec<_>>())
    };
    let mut mean_b = Vec::new();
    let mut std_b = Vec::new();
    for i in 0..m {
        for j in 0..m {
            let (a, s) = entry(&|c| c.b_matrix[(i, j)]);
            mean_b.push(a);
            std_b.push(s);
        }
    }
    let mut mean_bvec = Vec::new();
    let mut std_bvec = Vec::new();
    for i in 0..m {
        let (a, s) = entry(&|c| c.b_vector[i]);
        mean_bvec.push(a);
        std_bvec.push(s);
    }
    let (mean_shear, std_shear) = entry(&|c| c.shear_modulus());
    let norms: Vec<f64> = samples.iter().map(|c| c.b_vector.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let (mean_b_norm, std_b_norm) = mean_std(&norms);
    Ok(EnsembleRow {
        cell_length: samples[0].meta.cell_length,
        seeds: samples.len(),
        mean_b,
        std_b,
        mean_bvec,
        std_bvec,
        mean_shear,
        std_shear,
        mean_b_norm,
        std_b_norm,
        max_mean_grad,
    })
}

/// Norm of the ensemble mean of `b` and the total sample standard
/// deviation of the per-seed vectors, `sqrt(sum_j var(b_j))`.
pub fn mean_vector_norm(samples: &[EffectiveCoefficients]) -> (f64, f64) {
    let m = samples[0].b_vector.len();
    let mut norm = 0.0;
    let mut var = 0.0;
    for j in 0..m {
        let (mean, sd) = mean_std(&samples.iter().map(|s| s.b_vector[j]).collect::<Vec<_>>());
        norm += mean * mean;
        var += sd * sd;
    }
    (norm.sqrt(), var.sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct DiluteFit {
    /// Slope of `mu - 1` against `lambda` through the origin, per seed.
    pub per_seed: Vec<f64>,
    pub slope: f64,
    pub stderr: f64,
    /// Normal-approximation 95% interval.
    pub ci: (f64, f64),
    /// Points `(lambda, mu - 1)` per seed.
    pub points: Vec<Vec<(f64, f64)>>,
}

/// Least-squares slope through the origin of `(lambda, excess)` points.
pub fn slope_through_origin(points: &[(f64, f64)]) -> f64 {
    let num: f64 = points.iter().map(|(l, y)| l * y).sum();
    let den: f64 = points.iter().map(|(l, _)| l * l).sum();
    num / den
}

/// Fits the first-order coefficient from shear moduli `points[seed]`.
pub fn dilute_fit(points: Vec<Vec<(f64, f64)>>) -> DiluteFit {
    let per_seed: Vec<f64> = points.iter().map(|p| slope_through_origin(p)).collect();
    let (slope, sd) = mean_std(&per_seed);
    let stderr = sd / (per_seed.len() as f64).sqrt();
    DiluteFit {
        per_seed,
        slope,
        stderr,
        ci: (slope - 1.96 * stderr, slope + 1.96 * stderr),
        points,
    }
}

/// Single-ball cell of volume fraction `lambda`: side `(|B_1| / lambda)^{1/d}`.
pub fn single_inclusion_cell(dim: usize, lambda: f64, center: Point, seed: u64) -> Result<InclusionSet> {
    if !(lambda > 0.0 && lambda < 0.5) {
        return Err(Error::InvalidParams(format!("dilute fraction {lambda} out of range")));
    }
    let l = (crate::geometry::ball_volume(dim, 1.0) / lambda).powf(1.0 / dim as f64);
    let mut c = center;
    for x in c.iter_mut().take(dim) {
        *x = x.rem_euclid(1.0) * l;
    }
    let mut set = InclusionSet::manual(dim, l, 0.5, vec![c])?;
    set.seed = seed;
    Ok(set)
}
