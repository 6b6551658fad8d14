//! Stokes flow around rigid inclusions on a MAC grid.
//!
//! Unknowns are ordered as: free face velocities (component 0 first), then
//! the rigid dofs of every inclusion in label order (translation `V`, then
//! the angular part), then pressures on fluid cells. Velocities on rigid
//! faces are not unknowns: they are expanded from the rigid dofs, so the
//! constraint holds exactly.
//!
//! The velocity block is the strain energy `a(u, v) = 2 sum w D(u):D(v)`
//! restricted to the admissible fields; the coupling block is `-h^d div`
//! on fluid cells.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::grid::{pairs, FaceField, Grid, TensorField};
use crate::krylov::{dot, minres, KrylovOptions, LinearOperator, NullSpace};
use crate::poisson::LaplaceInverse;
use crate::raster::{FaceKind, LabelField, FLUID};
use crate::strain::StrainBasis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    BlockDiag,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    /// `None` means `20 N^{d/2}`.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
    pub project_rhs: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: None,
            preconditioner: Preconditioner::BlockDiag,
            project_rhs: false,
        }
    }
}

impl SolverOptions {
    pub fn max_iter_for(&self, grid: &Grid) -> usize {
        self.max_iter
            .unwrap_or_else(|| (20.0 * (grid.n as f64).powf(grid.dim as f64 / 2.0)).ceil() as usize)
    }
}

/// `V + Θ (x - x_n)` with `Θ` skew.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RigidMotion {
    pub v: Vector3<f64>,
    pub theta: Matrix3<f64>,
}

impl RigidMotion {
    pub fn zero() -> Self {
        Self {
            v: Vector3::zeros(),
            theta: Matrix3::zeros(),
        }
    }

    fn from_dofs(dim: usize, x: &[f64]) -> Self {
        let mut v = Vector3::zeros();
        v.as_mut_slice()[..dim].copy_from_slice(&x[..dim]);
        let mut theta = Matrix3::zeros();
        if dim == 2 {
            theta[(0, 1)] = -x[2];
            theta[(1, 0)] = x[2];
        } else {
            let w = &x[3..6];
            theta[(0, 1)] = -w[2];
            theta[(1, 0)] = w[2];
            theta[(0, 2)] = w[1];
            theta[(2, 0)] = -w[1];
            theta[(1, 2)] = -w[0];
            theta[(2, 1)] = w[0];
        }
        Self { v, theta }
    }

    pub fn velocity_at(&self, r: &Point) -> Vector3<f64> {
        self.v + self.theta * Vector3::from_column_slice(r)
    }
}

/// Value of a corrector on a rigid face: `V + Θ r - E r`, component `k`.
pub fn rigid_face_value(motion: &RigidMotion, e: &Matrix3<f64>, r: &Point, k: usize) -> f64 {
    let rv = Vector3::from_column_slice(r);
    motion.velocity_at(r)[k] - (e * rv)[k]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Residuals {
    /// Velocity rows of the true residual, relative to `|b|`.
    pub momentum: f64,
    /// Divergence rows, relative to `|b|`.
    pub divergence: f64,
    /// Largest per-inclusion translation row residual, relative to `|b|`.
    pub force: f64,
    /// Largest per-inclusion rotation row residual, relative to `|b|`.
    pub torque: f64,
    /// Largest entry of the cell average of the velocity gradient.
    pub mean_grad: f64,
    /// Relative mismatch of the discrete energy identity.
    pub energy_identity: f64,
}

#[derive(Clone, Debug)]
pub struct CorrectorSolution {
    pub e: Matrix3<f64>,
    pub psi: FaceField,
    /// Pressure on cells; zero inside inclusions.
    pub sigma: Vec<f64>,
    pub rigid: Vec<RigidMotion>,
    pub residuals: Residuals,
    pub iterations: usize,
    pub history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowSolution {
    pub u: FaceField,
    pub p: Vec<f64>,
    pub rigid: Vec<RigidMotion>,
    pub residuals: Residuals,
    pub iterations: usize,
    pub history: Vec<f64>,
}

/// Viscous part of the operator.
#[derive(Clone, Debug)]
pub enum Viscosity {
    Newtonian,
    /// Constant fourth-order viscosity acting on trace-free strains,
    /// given as the matrix of `E:B E'` in `basis`.
    Anisotropic { basis: StrainBasis, tensor: DMatrix<f64> },
}

struct Aniso {
    basis: Vec<Matrix3<f64>>,
    /// `tensor - beta I`
    excess: DMatrix<f64>,
}

struct RigidFace {
    k: usize,
    f: usize,
    n: usize,
    r: Point,
    coef: [f64; 6],
}

pub struct StokesSystem {
    pub grid: Grid,
    free: Vec<Vec<usize>>,
    free_off: Vec<usize>,
    rigid_faces: Vec<RigidFace>,
    n_incl: usize,
    nr: usize,
    rigid_off: usize,
    fluid: Vec<usize>,
    p_off: usize,
    n: usize,
    beta: f64,
    aniso: Option<Aniso>,
    edge_w: Vec<Vec<f64>>,
}

fn rigid_coef(dim: usize, k: usize, r: &Point) -> [f64; 6] {
    let mut c = [0.0; 6];
    c[k] = 1.0;
    if dim == 2 {
        c[2] = if k == 0 { -r[1] } else { r[0] };
    } else {
        // (w x r)_k
        match k {
            0 => {
                c[4] = r[2];
                c[5] = -r[1];
            }
            1 => {
                c[5] = r[0];
                c[3] = -r[2];
            }
            _ => {
                c[3] = r[1];
                c[4] = -r[0];
            }
        }
    }
    c
}

impl StokesSystem {
    pub fn new(labels: &LabelField, viscosity: Viscosity) -> Result<Self> {
        let grid = labels.grid;
        let d = grid.dim;
        let nr = if d == 2 { 3 } else { 6 };
        let mut free = vec![Vec::new(); d];
        let mut rigid_faces = Vec::new();
        for k in 0..d {
            let fs = grid.faces(k);
            fs.for_each(|f, i| match labels.faces[k][f] {
                FaceKind::Free => free[k].push(f),
                FaceKind::Rigid(n) => {
                    let r = labels.offset(n as usize, &grid.face_center(k, i));
                    rigid_faces.push(RigidFace {
                        k,
                        f,
                        n: n as usize,
                        r,
                        coef: rigid_coef(d, k, &r),
                    });
                }
                FaceKind::Wall => {}
            });
        }
        let fluid: Vec<usize> = (0..labels.cells.len()).filter(|&c| labels.cells[c] == FLUID).collect();
        if fluid.is_empty() {
            return Err(Error::SingularSystem("inclusions cover the whole cell".into()));
        }
        let mut free_off = vec![0];
        for k in 0..d {
            free_off.push(free_off[k] + free[k].len());
        }
        let n_incl = labels.n_inclusions();
        let rigid_off = free_off[d];
        let p_off = rigid_off + nr * n_incl;
        let n = p_off + fluid.len();
        let (beta, aniso) = match viscosity {
            Viscosity::Newtonian => (1.0, None),
            Viscosity::Anisotropic { basis, tensor } => {
                if basis.dim != d || tensor.nrows() != basis.len() || tensor.ncols() != basis.len() {
                    return Err(Error::ShapeMismatch("viscosity tensor does not match the basis".into()));
                }
                let sym = (&tensor + tensor.transpose()) * 0.5;
                let beta = SymmetricEigen::new(sym.clone()).eigenvalues.min();
                if !(beta > 0.0) {
                    return Err(Error::InvalidParams("viscosity tensor must be positive definite".into()));
                }
                let excess = sym - DMatrix::identity(basis.len(), basis.len()) * beta;
                (
                    beta,
                    Some(Aniso {
                        basis: basis.elements,
                        excess,
                    }),
                )
            }
        };
        let edge_w = pairs(d).iter().map(|&(k, l)| grid.edge_weights(k, l)).collect();
        Ok(Self {
            grid,
            free,
            free_off,
            rigid_faces,
            n_incl,
            nr,
            rigid_off,
            fluid,
            p_off,
            n,
            beta,
            aniso,
            edge_w,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn pressure_offset(&self) -> usize {
        self.p_off
    }

    pub fn rigid_offset(&self) -> usize {
        self.rigid_off
    }

    pub fn rigid_dofs_per_inclusion(&self) -> usize {
        self.nr
    }

    pub fn fluid_cells(&self) -> &[usize] {
        &self.fluid
    }

    /// `T x`: full face field from the velocity part of `x`.
    pub fn expand(&self, x: &[f64]) -> FaceField {
        let mut u = FaceField::zeros(&self.grid);
        for k in 0..self.grid.dim {
            let base = self.free_off[k];
            for (i, &f) in self.free[k].iter().enumerate() {
                u.comps[k][f] = x[base + i];
            }
        }
        for rf in &self.rigid_faces {
            let base = self.rigid_off + rf.n * self.nr;
            u.comps[rf.k][rf.f] = dot(&rf.coef[..self.nr], &x[base..base + self.nr]);
        }
        u
    }

    /// `T^T u`, written to the velocity part of `out`.
    pub fn restrict(&self, u: &FaceField, out: &mut [f64]) {
        for k in 0..self.grid.dim {
            let base = self.free_off[k];
            for (i, &f) in self.free[k].iter().enumerate() {
                out[base + i] = u.comps[k][f];
            }
        }
        out[self.rigid_off..self.p_off].iter_mut().for_each(|x| *x = 0.0);
        for rf in &self.rigid_faces {
            let base = self.rigid_off + rf.n * self.nr;
            let v = u.comps[rf.k][rf.f];
            for j in 0..self.nr {
                out[base + j] += rf.coef[j] * v;
            }
        }
    }

    /// Stress-like tensor `t` with `a(u, v) = <t, D(v)>` (plain pairing),
    /// for a symmetric strain field `s`.
    fn stress(&self, s: &TensorField) -> TensorField {
        let g = &self.grid;
        let d = g.dim;
        let wc = g.cell_volume();
        let mut t = TensorField::zeros(g);
        for k in 0..d {
            for (o, x) in t.diag[k].iter_mut().zip(&s.diag[k]) {
                *o = 2.0 * self.beta * wc * x;
            }
        }
        for p in 0..pairs(d).len() {
            for ((o, x), w) in t.off[p].iter_mut().zip(&s.off[p]).zip(&self.edge_w[p]) {
                *o = 4.0 * self.beta * w * x;
            }
        }
        if let Some(an) = &self.aniso {
            let cells = g.cells();
            let m = an.basis.len();
            let mut a = vec![0.0; m];
            cells.for_each(|c, i| {
                let avg = g.cell_strain(s, c, i);
                for (j, e) in an.basis.iter().enumerate() {
                    a[j] = e.dot(&avg);
                }
                let mut mm = Matrix3::zeros();
                for (ii, e) in an.basis.iter().enumerate() {
                    let coef: f64 = (0..m).map(|j| an.excess[(ii, j)] * a[j]).sum();
                    mm += e * coef;
                }
                for k in 0..d {
                    t.diag[k][c] += 2.0 * wc * mm[(k, k)];
                }
                for (p, &(k, l)) in pairs(d).iter().enumerate() {
                    let es = g.edges(k, l);
                    for idx in g.cell_edges(i, k, l) {
                        t.off[p][es.index(idx)] += wc * mm[(k, l)];
                    }
                }
            });
        }
        t
    }

    /// `A u` on full face fields, with an optional constant background
    /// strain added to `D(u)`.
    pub fn energy_apply(&self, u: &FaceField, background: Option<&Matrix3<f64>>) -> FaceField {
        let mut s = self.grid.sym_grad(u).expect("field matches grid");
        if let Some(e) = background {
            s.add_constant(e);
        }
        let t = self.stress(&s);
        self.grid.sym_grad_transpose(&t)
    }

    /// `a(u, v)`, optionally with a background strain added to `u`.
    pub fn energy(&self, u: &FaceField, v: &FaceField, background: Option<&Matrix3<f64>>) -> f64 {
        let mut s = self.grid.sym_grad(u).expect("field matches grid");
        if let Some(e) = background {
            s.add_constant(e);
        }
        let t = self.stress(&s);
        let sv = self.grid.sym_grad(v).expect("field matches grid");
        let mut acc = 0.0;
        for k in 0..self.grid.dim {
            acc += dot(&t.diag[k], &sv.diag[k]);
        }
        for p in 0..t.off.len() {
            acc += dot(&t.off[p], &sv.off[p]);
        }
        acc
    }

    fn scatter_pressure(&self, p: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.grid.cells().len()];
        for (i, &c) in self.fluid.iter().enumerate() {
            full[c] = p[i];
        }
        full
    }

    /// Velocity and pressure null vectors of the assembled system.
    pub fn null_space(&self) -> NullSpace {
        NullSpace::new(self.null_space_vectors())
    }

    /// Unnormalized kernel vectors: one constant velocity per component on
    /// periodic grids, and the constant fluid pressure.
    pub fn null_space_vectors(&self) -> Vec<Vec<f64>> {
        let mut vecs = Vec::new();
        if self.grid.is_periodic() {
            for k in 0..self.grid.dim {
                let mut z = vec![0.0; self.n];
                z[self.free_off[k]..self.free_off[k + 1]].iter_mut().for_each(|x| *x = 1.0);
                for n in 0..self.n_incl {
                    z[self.rigid_off + n * self.nr + k] = 1.0;
                }
                vecs.push(z);
            }
        }
        let mut z = vec![0.0; self.n];
        z[self.p_off..].iter_mut().for_each(|x| *x = 1.0);
        vecs.push(z);
        vecs
    }

    /// Right-hand side for a velocity load `l` (already integrated, on
    /// faces), prescribed values `g` on rigid faces, background strain
    /// and per-inclusion rigid loads (`d` translation entries each).
    fn rhs(
        &self,
        load: Option<&FaceField>,
        g: Option<&FaceField>,
        background: Option<&Matrix3<f64>>,
        rigid_load: Option<&[Vector3<f64>]>,
    ) -> Vec<f64> {
        let grid = &self.grid;
        let mut b = vec![0.0; self.n];
        let mut r = FaceField::zeros(grid);
        if let Some(l) = load {
            r.axpy(1.0, l);
        }
        if g.is_some() || background.is_some() {
            let zero = FaceField::zeros(grid);
            let gg = g.unwrap_or(&zero);
            r.axpy(-1.0, &self.energy_apply(gg, background));
        }
        self.restrict(&r, &mut b);
        if let Some(rl) = rigid_load {
            for (n, f) in rl.iter().enumerate() {
                for k in 0..grid.dim {
                    b[self.rigid_off + n * self.nr + k] += f[k];
                }
            }
        }
        if let Some(gg) = g {
            let dv = grid.div(gg).expect("field matches grid");
            let hd = grid.cell_volume();
            for (i, &c) in self.fluid.iter().enumerate() {
                b[self.p_off + i] = hd * dv[c];
            }
        }
        b
    }

    fn solve_raw(&self, b: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, usize, Vec<f64>)> {
        let kopts = KrylovOptions {
            tol: opts.tol,
            max_iter: opts.max_iter_for(&self.grid),
            project_rhs: opts.project_rhs,
        };
        let null = self.null_space();
        let out = match opts.preconditioner {
            Preconditioner::None => minres(self, None, b, &null, &kopts)?,
            Preconditioner::BlockDiag => {
                let pre = BlockDiag::new(self);
                minres(self, Some(&pre), b, &null, &kopts)?
            }
        };
        log::debug!(
            "minres: {} unknowns, {} iterations, residual {:.3e}",
            self.n,
            out.iterations,
            out.residual
        );
        Ok((out.x, out.iterations, out.history))
    }

    fn rigid_motions(&self, x: &[f64]) -> Vec<RigidMotion> {
        (0..self.n_incl)
            .map(|n| {
                let base = self.rigid_off + n * self.nr;
                RigidMotion::from_dofs(self.grid.dim, &x[base..base + self.nr])
            })
            .collect()
    }

    /// Residual diagnostics of `x` for `b` (before any post-shift).
    fn residuals(&self, x: &[f64], b: &[f64]) -> Residuals {
        let mut r = vec![0.0; self.n];
        self.apply(x, &mut r);
        r.iter_mut().zip(b).for_each(|(r, b)| *r = b - *r);
        self.null_space().project(&mut r);
        let bn = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
        let norm = |s: &[f64]| dot(s, s).sqrt() / bn;
        let d = self.grid.dim;
        let mut force: f64 = 0.0;
        let mut torque: f64 = 0.0;
        for n in 0..self.n_incl {
            let base = self.rigid_off + n * self.nr;
            force = force.max(norm(&r[base..base + d]));
            torque = torque.max(norm(&r[base + d..base + self.nr]));
        }
        Residuals {
            momentum: norm(&r[..self.p_off]),
            divergence: norm(&r[self.p_off..]),
            force,
            torque,
            ..Default::default()
        }
    }

    /// Largest entry of the cell average of the velocity gradient.
    pub fn mean_gradient(&self, u: &FaceField) -> f64 {
        let g = &self.grid;
        let grad = g.velocity_gradient(u).expect("field matches grid");
        let vol = g.domain_volume();
        let wc = g.cell_volume();
        let d = g.dim;
        let mut worst: f64 = 0.0;
        for k in 0..d {
            worst = worst.max((grad.diag[k].iter().sum::<f64>() * wc / vol).abs());
        }
        for (p, &(k, l)) in pairs(d).iter().enumerate() {
            for idx in [k * d + l, l * d + k] {
                worst = worst.max((dot(&grad.off[idx], &self.edge_w[p]) / vol).abs());
            }
        }
        worst
    }

    /// Dense matrix of the system, for small oracle problems.
    pub fn assemble_dense(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n, self.n);
        let mut e = vec![0.0; self.n];
        let mut col = vec![0.0; self.n];
        for j in 0..self.n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            k.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        k
    }

    /// Right-hand side of the corrector problem for strain `e`.
    pub fn corrector_rhs(&self, e: &Matrix3<f64>) -> Vec<f64> {
        let g = self.corrector_data(e);
        self.rhs(None, Some(&g), Some(e), None)
    }

    /// Prescribed corrector values `-E (x - x_n)` on rigid faces.
    pub fn corrector_data(&self, e: &Matrix3<f64>) -> FaceField {
        let mut g = FaceField::zeros(&self.grid);
        for rf in &self.rigid_faces {
            let rv = Vector3::from_column_slice(&rf.r);
            g.comps[rf.k][rf.f] = -(e * rv)[rf.k];
        }
        g
    }

    /// Field equal to `E (x - x_n)` on rigid faces and zero elsewhere.
    pub fn rigid_strain_field(&self, e: &Matrix3<f64>) -> FaceField {
        let mut g = self.corrector_data(e);
        g.scale(-1.0);
        g
    }

    /// Reduced vector from a full velocity field (free faces), rigid
    /// motions and a cell pressure.
    pub fn pack(&self, u: &FaceField, rigid: &[RigidMotion], p: &[f64]) -> Vec<f64> {
        let d = self.grid.dim;
        let mut x = vec![0.0; self.n];
        for k in 0..d {
            for (i, &f) in self.free[k].iter().enumerate() {
                x[self.free_off[k] + i] = u.comps[k][f];
            }
        }
        for (n, m) in rigid.iter().enumerate() {
            let base = self.rigid_off + n * self.nr;
            x[base..base + d].copy_from_slice(&m.v.as_slice()[..d]);
            if d == 2 {
                x[base + 2] = m.theta[(1, 0)];
            } else {
                x[base + 3] = m.theta[(2, 1)];
                x[base + 4] = m.theta[(0, 2)];
                x[base + 5] = m.theta[(1, 0)];
            }
        }
        for (i, &c) in self.fluid.iter().enumerate() {
            x[self.p_off + i] = p[c];
        }
        x
    }

    /// Rigid faces as `(component, face, inclusion, x - x_n)`.
    pub fn rigid_faces(&self) -> impl Iterator<Item = (usize, usize, usize, Point)> + '_ {
        self.rigid_faces.iter().map(|rf| (rf.k, rf.f, rf.n, rf.r))
    }

    /// Reduced right-hand side for an integrated load on free faces.
    pub fn load_rhs(&self, load: &FaceField, rigid_load: Option<&[Vector3<f64>]>) -> Vec<f64> {
        self.rhs(Some(load), None, None, rigid_load)
    }

    pub fn solve_vector(&self, b: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, usize, Vec<f64>)> {
        self.solve_raw(b, opts)
    }

    /// Splits a reduced solution into the full velocity field, the
    /// pressure on cells and the rigid motions.
    pub fn unpack(&self, x: &[f64]) -> (FaceField, Vec<f64>, Vec<RigidMotion>) {
        (
            self.expand(x),
            self.scatter_pressure(&x[self.p_off..]),
            self.rigid_motions(x),
        )
    }
}

impl LinearOperator for StokesSystem {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let g = &self.grid;
        let hd = g.cell_volume();
        let u = self.expand(x);
        let mut au = self.energy_apply(&u, None);
        let p = self.scatter_pressure(&x[self.p_off..]);
        let dt = g.div_transpose(&p).expect("cell field matches grid");
        au.axpy(-hd, &dt);
        self.restrict(&au, y);
        let dv = g.div(&u).expect("field matches grid");
        for (i, &c) in self.fluid.iter().enumerate() {
            y[self.p_off + i] = -hd * dv[c];
        }
    }
}

/// Block-diagonal preconditioner: a fast Laplacian inverse for the
/// velocity block, pulled back to the reduced unknowns through a
/// least-squares rigid fit on every inclusion, and a scaled identity for
/// the pressure.
struct BlockDiag<'a> {
    sys: &'a StokesSystem,
    lap: LaplaceInverse,
    gram_inv: Vec<DMatrix<f64>>,
}

impl<'a> BlockDiag<'a> {
    fn new(sys: &'a StokesSystem) -> Self {
        let nr = sys.nr;
        let mut gram = vec![DMatrix::<f64>::zeros(nr, nr); sys.n_incl];
        for rf in &sys.rigid_faces {
            let c = &rf.coef[..nr];
            let m = &mut gram[rf.n];
            for i in 0..nr {
                for j in 0..nr {
                    m[(i, j)] += c[i] * c[j];
                }
            }
        }
        let gram_inv = gram
            .into_iter()
            .map(|m| m.try_inverse().unwrap_or_else(|| DMatrix::zeros(nr, nr)))
            .collect();
        Self {
            sys,
            lap: LaplaceInverse::new(&sys.grid),
            gram_inv,
        }
    }
}

impl LinearOperator for BlockDiag<'_> {
    fn dim(&self) -> usize {
        self.sys.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = self.sys;
        let nr = s.nr;
        let hd = s.grid.cell_volume();
        // fitted rigid dofs
        let mut xr = x[..s.p_off].to_vec();
        for n in 0..s.n_incl {
            let base = s.rigid_off + n * nr;
            let v = &self.gram_inv[n] * DVector::from_column_slice(&x[base..base + nr]);
            xr[base..base + nr].copy_from_slice(v.as_slice());
        }
        let u = s.expand(&xr);
        let mut z = self.lap.solve(&u);
        z.scale(1.0 / (hd * s.beta));
        s.restrict(&z, y);
        for n in 0..s.n_incl {
            let base = s.rigid_off + n * nr;
            let v = &self.gram_inv[n] * DVector::from_column_slice(&y[base..base + nr]);
            y[base..base + nr].copy_from_slice(v.as_slice());
        }
        for i in s.p_off..s.n {
            y[i] = x[i] / hd;
        }
    }
}

fn fluid_mean(sys: &StokesSystem, p: &mut [f64]) {
    let m = sys.fluid.iter().map(|&c| p[c]).sum::<f64>() / sys.fluid.len() as f64;
    for &c in &sys.fluid {
        p[c] -= m;
    }
}

/// Periodic corrector for the trace-free symmetric strain `e`.
pub fn solve_corrector(labels: &LabelField, e: &Matrix3<f64>, opts: &SolverOptions) -> Result<CorrectorSolution> {
    let grid = labels.grid;
    if !grid.is_periodic() {
        return Err(Error::InvalidParams("the corrector problem needs a periodic grid".into()));
    }
    let d = grid.dim;
    let mut e = *e;
    for i in d..3 {
        for j in 0..3 {
            e[(i, j)] = 0.0;
            e[(j, i)] = 0.0;
        }
    }
    let en = e.norm();
    if (e - e.transpose()).norm() > 1e-12 * en || e.trace().abs() > 1e-12 * en {
        return Err(Error::InvalidParams("strain must be symmetric and trace free".into()));
    }
    let sys = StokesSystem::new(labels, Viscosity::Newtonian)?;
    let g = sys.corrector_data(&e);
    let b = sys.rhs(None, Some(&g), Some(&e), None);
    let (mut x, iterations, history) = sys.solve_raw(&b, opts)?;
    let mut residuals = sys.residuals(&x, &b);

    // zero cell mean of psi, per component
    let total = sys.expand(&x);
    for k in 0..d {
        let all = &total.comps[k];
        let gk = &g.comps[k];
        let m = all.iter().zip(gk).map(|(a, b)| a + b).sum::<f64>() / all.len() as f64;
        for v in &mut x[sys.free_off[k]..sys.free_off[k + 1]] {
            *v -= m;
        }
        for n in 0..sys.n_incl {
            x[sys.rigid_off + n * sys.nr + k] -= m;
        }
    }
    let rigid = sys.rigid_motions(&x);
    let mut psi = FaceField::zeros(&grid);
    for k in 0..d {
        for (i, &f) in sys.free[k].iter().enumerate() {
            psi.comps[k][f] = x[sys.free_off[k] + i];
        }
    }
    for rf in &sys.rigid_faces {
        psi.comps[rf.k][rf.f] = rigid_face_value(&rigid[rf.n], &e, &rf.r, rf.k);
    }
    let mut sigma = sys.scatter_pressure(&x[sys.p_off..]);
    fluid_mean(&sys, &mut sigma);

    residuals.mean_grad = sys.mean_gradient(&psi);
    residuals.energy_identity = corrector_energy_mismatch(&sys, &psi, &sigma, &e);
    Ok(CorrectorSolution {
        e,
        psi,
        sigma,
        rigid,
        residuals,
        iterations,
        history,
    })
}

/// Relative mismatch of `a(ψ+Ex, ψ) = -a(ψ+Ex, w) + h^d (Σ, div w)_fluid`
/// where `w = E (x - x_n)` on rigid faces and zero elsewhere.
fn corrector_energy_mismatch(sys: &StokesSystem, psi: &FaceField, sigma: &[f64], e: &Matrix3<f64>) -> f64 {
    let w = sys.rigid_strain_field(e);
    let lhs = sys.energy(psi, psi, Some(e));
    let dw = sys.grid.div(&w).expect("field matches grid");
    let hd = sys.grid.cell_volume();
    let press: f64 = sys.fluid.iter().map(|&c| sigma[c] * dw[c]).sum::<f64>() * hd;
    let rhs = -sys.energy(psi, &w, Some(e)) + press;
    let zero = FaceField::zeros(&sys.grid);
    let scale = sys.energy(psi, psi, Some(e)).abs() + sys.energy(&zero, &zero, Some(e)).abs();
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

fn check_dirichlet(labels: &LabelField, f: &FaceField) -> Result<()> {
    if labels.grid.is_periodic() {
        return Err(Error::InvalidParams("this problem needs a Dirichlet grid".into()));
    }
    if f.comps.len() != labels.grid.dim
        || (0..labels.grid.dim).any(|k| f.comps[k].len() != labels.grid.faces(k).len())
    {
        return Err(Error::ShapeMismatch("force field does not match grid".into()));
    }
    Ok(())
}

/// Load `h^d f` on free faces; zero elsewhere.
fn fluid_load(sys: &StokesSystem, f: &FaceField) -> FaceField {
    let hd = sys.grid.cell_volume();
    let mut l = FaceField::zeros(&sys.grid);
    for k in 0..sys.grid.dim {
        for &i in &sys.free[k] {
            l.comps[k][i] = hd * f.comps[k][i];
        }
    }
    l
}

/// Stokes flow in a box with no-slip walls for viscosity `viscosity`,
/// body force `f` on the fluid faces and optional translation loads on the
/// inclusions.
pub fn solve_flow(
    labels: &LabelField,
    viscosity: Viscosity,
    f: &FaceField,
    rigid_load: Option<&[Vector3<f64>]>,
    opts: &SolverOptions,
) -> Result<FlowSolution> {
    check_dirichlet(labels, f)?;
    if let Some(rl) = rigid_load {
        if rl.len() != labels.n_inclusions() {
            return Err(Error::ShapeMismatch("one rigid load per inclusion".into()));
        }
    }
    let sys = StokesSystem::new(labels, viscosity)?;
    let load = fluid_load(&sys, f);
    let b = sys.rhs(Some(&load), None, None, rigid_load);
    let (x, iterations, history) = sys.solve_raw(&b, opts)?;
    let mut residuals = sys.residuals(&x, &b);
    let (u, mut p, rigid) = sys.unpack(&x);
    fluid_mean(&sys, &mut p);
    let lhs = sys.energy(&u, &u, None);
    let mut rhs = load.dot(&u);
    if let Some(rl) = rigid_load {
        rhs += rl.iter().zip(&rigid).map(|(g, m)| g.dot(&m.v)).sum::<f64>();
    }
    let floor = b.iter().map(|v| v * v).sum::<f64>().sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = lhs.abs().max(rhs.abs()).max(floor);
    residuals.energy_identity = if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale };
    residuals.mean_grad = sys.mean_gradient(&u);
    Ok(FlowSolution {
        u,
        p,
        rigid,
        residuals,
        iterations,
        history,
    })
}

/// Stokes flow in a box with no-slip walls, rigid force- and torque-free
/// inclusions and body force `f` acting on the fluid.
pub fn solve_eps_problem(labels: &LabelField, f: &FaceField, opts: &SolverOptions) -> Result<FlowSolution> {
    solve_flow(labels, Viscosity::Newtonian, f, None, opts)
}

/// As [`solve_eps_problem`], with the extra load `sum_{cells of I_n} g h^d`
/// on the translation of every inclusion. `g` is sampled on faces; a
/// cell takes the average of its two faces per component.
pub fn solve_weak_sedimentation(
    labels: &LabelField,
    f: &FaceField,
    g: &FaceField,
    opts: &SolverOptions,
) -> Result<FlowSolution> {
    check_dirichlet(labels, g)?;
    let grid = labels.grid;
    let hd = grid.cell_volume();
    let mut loads = vec![Vector3::zeros(); labels.n_inclusions()];
    let cells = grid.cells();
    cells.for_each(|c, i| {
        let n = labels.cells[c];
        if n == FLUID {
            return;
        }
        for k in 0..grid.dim {
            let fs = grid.faces(k);
            let mut j = i;
            j[k] += 1;
            let gk = 0.5 * (g.comps[k][fs.index(i)] + g.comps[k][fs.index(j)]);
            loads[n as usize][k] += hd * gk;
        }
    });
    solve_flow(labels, Viscosity::Newtonian, f, Some(&loads), opts)
}
