//! Regular staggered (MAC) grid and its discrete differential operators.
//!
//! Layout, for a grid of `n` cells per side and spacing `h`:
//!
//! * scalars live at cell centers `origin + (i + 1/2) h`;
//! * velocity component `k` lives on faces normal to `e_k`, at
//!   `x_k = origin_k + i_k h` and cell-centered in the other axes;
//! * the off-diagonal velocity-gradient entries for the pair `(k, l)` live
//!   on edges at `x_k = i_k h`, `x_l = i_l h` (nodes in 2D).
//!
//! Periodic grids store `n` faces per axis and wrap. Dirichlet grids store
//! `n + 1` faces along the normal axis; the two end faces are walls and
//! stay zero. Tangential derivatives at a wall use the reflected ghost
//! value `-u`, and wall edges carry half the volume weight.
//!
//! All arrays are flat with axis 0 fastest.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fmt17, Aabb, Point};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Periodic,
    DirichletZero,
}

impl Boundary {
    pub fn as_str(&self) -> &'static str {
        match self {
            Boundary::Periodic => "periodic",
            Boundary::DirichletZero => "dirichlet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub dim: usize,
    pub ext: [usize; 3],
}

impl Shape {
    #[inline]
    pub fn len(&self) -> usize {
        self.ext[0] * self.ext[1] * self.ext[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: [usize; 3]) -> usize {
        i[0] + self.ext[0] * (i[1] + self.ext[1] * i[2])
    }

    #[inline]
    pub fn multi(&self, flat: usize) -> [usize; 3] {
        let i0 = flat % self.ext[0];
        let r = flat / self.ext[0];
        [i0, r % self.ext[1], r / self.ext[1]]
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.ext[0],
            _ => self.ext[0] * self.ext[1],
        }
    }

    /// Visits every multi-index in flat order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, [usize; 3])) {
        let mut flat = 0;
        for i2 in 0..self.ext[2] {
            for i1 in 0..self.ext[1] {
                for i0 in 0..self.ext[0] {
                    f(flat, [i0, i1, i2]);
                    flat += 1;
                }
            }
        }
    }
}

/// Index pairs `(k, l)` with `k < l`, in the fixed order used for edge
/// arrays.
pub fn pairs(dim: usize) -> &'static [(usize, usize)] {
    match dim {
        2 => &[(0, 1)],
        3 => &[(0, 1), (0, 2), (1, 2)],
        _ => panic!("unsupported dimension {dim}"),
    }
}

pub fn pair_index(dim: usize, k: usize, l: usize) -> usize {
    let (a, b) = if k < l { (k, l) } else { (l, k) };
    pairs(dim).iter().position(|&p| p == (a, b)).expect("k != l")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub n: usize,
    pub h: f64,
    pub boundary: Boundary,
    pub origin: Point,
}

/// Velocity samples on faces, one flat array per component.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceField {
    pub comps: Vec<Vec<f64>>,
}

/// Velocity gradient `G[k][l] = d_l u_k`: diagonal entries at cell
/// centers, off-diagonal ones on the edges of the pair `(k, l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradField {
    pub dim: usize,
    pub diag: Vec<Vec<f64>>,
    /// Indexed by `k * dim + l`; diagonal slots are empty.
    pub off: Vec<Vec<f64>>,
}

/// Symmetric tensor on the staggered layout: diagonal at cell centers,
/// one edge array per pair from [`pairs`].
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub dim: usize,
    pub diag: Vec<Vec<f64>>,
    pub off: Vec<Vec<f64>>,
}

impl FaceField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            comps: (0..grid.dim).map(|k| vec![0.0; grid.faces(k).len()]).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for c in &mut self.comps {
            c.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        if self.comps.len() != grid.dim
            || (0..grid.dim).any(|k| self.comps[k].len() != grid.faces(k).len())
        {
            return Err(Error::ShapeMismatch("face field does not match grid".into()));
        }
        Ok(())
    }
}

impl TensorField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            dim: grid.dim,
            diag: (0..grid.dim).map(|_| vec![0.0; grid.cells().len()]).collect(),
            off: pairs(grid.dim)
                .iter()
                .map(|&(k, l)| vec![0.0; grid.edges(k, l).len()])
                .collect(),
        }
    }

    /// Weighted Frobenius inner product `sum w A:B` over the grid, with the
    /// off-diagonal entries counted twice.
    pub fn inner(&self, other: &Self, grid: &Grid) -> f64 {
        let wc = grid.cell_volume();
        let mut s = 0.0;
        for k in 0..self.dim {
            s += wc * self.diag[k].iter().zip(&other.diag[k]).map(|(a, b)| a * b).sum::<f64>();
        }
        for (p, &(k, l)) in pairs(self.dim).iter().enumerate() {
            let w = grid.edge_weights(k, l);
            s += 2.0
                * self.off[p]
                    .iter()
                    .zip(&other.off[p])
                    .zip(&w)
                    .map(|((a, b), w)| w * a * b)
                    .sum::<f64>();
        }
        s
    }

    /// Adds the constant symmetric matrix `m` at every sample.
    pub fn add_constant(&mut self, m: &Matrix3<f64>) {
        for k in 0..self.dim {
            self.diag[k].iter_mut().for_each(|x| *x += m[(k, k)]);
        }
        for (p, &(k, l)) in pairs(self.dim).iter().enumerate() {
            self.off[p].iter_mut().for_each(|x| *x += m[(k, l)]);
        }
    }
}

impl GradField {
    pub fn zeros(grid: &Grid) -> Self {
        let d = grid.dim;
        let mut off = vec![Vec::new(); d * d];
        for k in 0..d {
            for l in 0..d {
                if k != l {
                    let (a, b) = (k.min(l), k.max(l));
                    off[k * d + l] = vec![0.0; grid.edges(a, b).len()];
                }
            }
        }
        Self {
            dim: d,
            diag: (0..d).map(|_| vec![0.0; grid.cells().len()]).collect(),
            off,
        }
    }

    pub fn sym(&self) -> TensorField {
        let d = self.dim;
        TensorField {
            dim: d,
            diag: self.diag.clone(),
            off: pairs(d)
                .iter()
                .map(|&(k, l)| {
                    self.off[k * d + l]
                        .iter()
                        .zip(&self.off[l * d + k])
                        .map(|(a, b)| 0.5 * (a + b))
                        .collect()
                })
                .collect(),
        }
    }

    /// `sum w |G|^2` with the grid's cell and edge weights.
    pub fn norm_sq(&self, grid: &Grid) -> f64 {
        let wc = grid.cell_volume();
        let d = self.dim;
        let mut s: f64 = self
            .diag
            .iter()
            .map(|a| wc * a.iter().map(|x| x * x).sum::<f64>())
            .sum();
        for &(k, l) in pairs(d) {
            let w = grid.edge_weights(k, l);
            for a in [&self.off[k * d + l], &self.off[l * d + k]] {
                s += a.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>();
            }
        }
        s
    }
}

impl Grid {
    pub fn periodic(dim: usize, n: usize, length: f64) -> Result<Self> {
        Self::new(dim, n, length / n as f64, Boundary::Periodic, [0.0; 3])
    }

    /// Dirichlet grid on a cube `bx`.
    pub fn dirichlet(dim: usize, n: usize, bx: &Aabb) -> Result<Self> {
        let side = bx.hi[0] - bx.lo[0];
        if (1..dim).any(|j| ((bx.hi[j] - bx.lo[j]) - side).abs() > 1e-12 * side) {
            return Err(Error::InvalidParams("Dirichlet box must be a cube".into()));
        }
        Self::new(dim, n, side / n as f64, Boundary::DirichletZero, bx.lo)
    }

    fn new(dim: usize, n: usize, h: f64, boundary: Boundary, origin: Point) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidParams(format!("dimension must be 2 or 3, got {dim}")));
        }
        if n < 4 {
            return Err(Error::InvalidParams(format!("need at least 4 cells per side, got {n}")));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidParams("grid spacing must be positive".into()));
        }
        Ok(Self {
            dim,
            n,
            h,
            boundary,
            origin,
        })
    }

    pub fn extent(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn domain_volume(&self) -> f64 {
        self.extent().powi(self.dim as i32)
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary == Boundary::Periodic
    }

    fn shape_with(&self, staggered: &[usize]) -> Shape {
        let extra = usize::from(!self.is_periodic());
        let mut ext = [1; 3];
        for (j, e) in ext.iter_mut().enumerate().take(self.dim) {
            *e = self.n + if staggered.contains(&j) { extra } else { 0 };
        }
        Shape { dim: self.dim, ext }
    }

    pub fn cells(&self) -> Shape {
        self.shape_with(&[])
    }

    pub fn faces(&self, k: usize) -> Shape {
        self.shape_with(&[k])
    }

    pub fn edges(&self, k: usize, l: usize) -> Shape {
        self.shape_with(&[k, l])
    }

    pub fn cell_center(&self, i: [usize; 3]) -> Point {
        let mut x = [0.0; 3];
        for j in 0..self.dim {
            x[j] = self.origin[j] + (i[j] as f64 + 0.5) * self.h;
        }
        x
    }

    pub fn face_center(&self, k: usize, i: [usize; 3]) -> Point {
        let mut x = self.cell_center(i);
        x[k] -= 0.5 * self.h;
        x
    }

    pub fn edge_center(&self, k: usize, l: usize, i: [usize; 3]) -> Point {
        let mut x = self.cell_center(i);
        x[k] -= 0.5 * self.h;
        x[l] -= 0.5 * self.h;
        x
    }

    /// Whether face `i` of component `k` is a wall face (Dirichlet only).
    #[inline]
    pub fn is_wall_face(&self, k: usize, i: [usize; 3]) -> bool {
        !self.is_periodic() && (i[k] == 0 || i[k] == self.n)
    }

    /// Volume weights of the edges of pair `(k, l)`: `h^d`, halved once
    /// for each wall the edge lies on.
    pub fn edge_weights(&self, k: usize, l: usize) -> Vec<f64> {
        let shape = self.edges(k, l);
        let wc = self.cell_volume();
        let mut w = vec![wc; shape.len()];
        if !self.is_periodic() {
            shape.for_each(|f, i| {
                for a in [k, l] {
                    if i[a] == 0 || i[a] == self.n {
                        w[f] *= 0.5;
                    }
                }
            });
        }
        w
    }

    /// The four edges of pair `(k, l)` around cell `i`.
    pub fn cell_edges(&self, i: [usize; 3], k: usize, l: usize) -> [[usize; 3]; 4] {
        let mut a = i;
        a[k] = self.up(i[k]);
        let mut b = i;
        b[l] = self.up(i[l]);
        let mut c = a;
        c[l] = self.up(i[l]);
        [i, a, b, c]
    }

    /// Strain averaged onto cell `c` (index `i`): diagonal as stored,
    /// off-diagonal entries from the four surrounding edges.
    pub fn cell_strain(&self, s: &TensorField, c: usize, i: [usize; 3]) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for k in 0..self.dim {
            m[(k, k)] = s.diag[k][c];
        }
        for (p, &(k, l)) in pairs(self.dim).iter().enumerate() {
            let es = self.edges(k, l);
            let v: f64 = self
                .cell_edges(i, k, l)
                .iter()
                .map(|&e| s.off[p][es.index(e)])
                .sum::<f64>()
                * 0.25;
            m[(k, l)] = v;
            m[(l, k)] = v;
        }
        m
    }

    #[inline]
    pub(crate) fn up(&self, i: usize) -> usize {
        if i + 1 == self.n && self.is_periodic() {
            0
        } else {
            i + 1
        }
    }

    /// Cell-centered divergence.
    pub fn div(&self, u: &FaceField) -> Result<Vec<f64>> {
        u.check(self)?;
        let cells = self.cells();
        let mut out = vec![0.0; cells.len()];
        let ih = 1.0 / self.h;
        for k in 0..self.dim {
            let fs = self.faces(k);
            let uk = &u.comps[k];
            cells.for_each(|c, i| {
                let mut j = i;
                j[k] = self.up(i[k]);
                out[c] += (uk[fs.index(j)] - uk[fs.index(i)]) * ih;
            });
        }
        Ok(out)
    }

    /// Exact transpose of [`Grid::div`]. Wall faces receive values too;
    /// callers restrict as needed.
    pub fn div_transpose(&self, p: &[f64]) -> Result<FaceField> {
        let cells = self.cells();
        if p.len() != cells.len() {
            return Err(Error::ShapeMismatch("cell field does not match grid".into()));
        }
        let mut out = FaceField::zeros(self);
        let ih = 1.0 / self.h;
        for k in 0..self.dim {
            let fs = self.faces(k);
            let ok = &mut out.comps[k];
            cells.for_each(|c, i| {
                let mut j = i;
                j[k] = self.up(i[k]);
                ok[fs.index(j)] += p[c] * ih;
                ok[fs.index(i)] -= p[c] * ih;
            });
        }
        Ok(out)
    }

    /// Face-centered pressure gradient; zero on walls.
    pub fn grad(&self, p: &[f64]) -> Result<FaceField> {
        let mut g = self.div_transpose(p)?;
        g.scale(-1.0);
        self.zero_walls(&mut g);
        Ok(g)
    }

    pub fn zero_walls(&self, u: &mut FaceField) {
        if self.is_periodic() {
            return;
        }
        for k in 0..self.dim {
            let fs = self.faces(k);
            let uk = &mut u.comps[k];
            fs.for_each(|f, i| {
                if i[k] == 0 || i[k] == self.n {
                    uk[f] = 0.0;
                }
            });
        }
    }

    /// Full velocity gradient on the staggered layout.
    pub fn velocity_gradient(&self, u: &FaceField) -> Result<GradField> {
        u.check(self)?;
        let d = self.dim;
        let ih = 1.0 / self.h;
        let mut g = GradField::zeros(self);
        let cells = self.cells();
        for k in 0..d {
            let fs = self.faces(k);
            let uk = &u.comps[k];
            let gk = &mut g.diag[k];
            cells.for_each(|c, i| {
                let mut j = i;
                j[k] = self.up(i[k]);
                gk[c] = (uk[fs.index(j)] - uk[fs.index(i)]) * ih;
            });
        }
        for k in 0..d {
            for l in 0..d {
                if k == l {
                    continue;
                }
                let es = self.edges(k.min(l), k.max(l));
                let fs = self.faces(k);
                let uk = &u.comps[k];
                let out = &mut g.off[k * d + l];
                es.for_each(|e, i| {
                    out[e] = self.tangential_diff(uk, &fs, i, l) * ih;
                });
            }
        }
        Ok(g)
    }

    /// `u_k[i] - u_k[i - e_l]` with periodic wrap or reflected ghosts, for
    /// an edge index `i` whose `l` coordinate is a node.
    #[inline]
    fn tangential_diff(&self, uk: &[f64], fs: &Shape, i: [usize; 3], l: usize) -> f64 {
        if self.is_periodic() {
            let mut lo = i;
            lo[l] = if i[l] == 0 { self.n - 1 } else { i[l] - 1 };
            uk[fs.index(i)] - uk[fs.index(lo)]
        } else if i[l] == 0 {
            2.0 * uk[fs.index(i)]
        } else if i[l] == self.n {
            let mut lo = i;
            lo[l] -= 1;
            -2.0 * uk[fs.index(lo)]
        } else {
            let mut lo = i;
            lo[l] -= 1;
            uk[fs.index(i)] - uk[fs.index(lo)]
        }
    }

    /// Exact transpose of [`Grid::velocity_gradient`].
    pub fn velocity_gradient_transpose(&self, g: &GradField) -> FaceField {
        let d = self.dim;
        let ih = 1.0 / self.h;
        let mut out = FaceField::zeros(self);
        let cells = self.cells();
        for k in 0..d {
            let fs = self.faces(k);
            let gk = &g.diag[k];
            let ok = &mut out.comps[k];
            cells.for_each(|c, i| {
                let mut j = i;
                j[k] = self.up(i[k]);
                ok[fs.index(j)] += gk[c] * ih;
                ok[fs.index(i)] -= gk[c] * ih;
            });
        }
        for k in 0..d {
            for l in 0..d {
                if k == l {
                    continue;
                }
                let es = self.edges(k.min(l), k.max(l));
                let fs = self.faces(k);
                let src = &g.off[k * d + l];
                let ok = &mut out.comps[k];
                es.for_each(|e, i| {
                    let v = src[e] * ih;
                    if self.is_periodic() {
                        let mut lo = i;
                        lo[l] = if i[l] == 0 { self.n - 1 } else { i[l] - 1 };
                        ok[fs.index(i)] += v;
                        ok[fs.index(lo)] -= v;
                    } else if i[l] == 0 {
                        ok[fs.index(i)] += 2.0 * v;
                    } else if i[l] == self.n {
                        let mut lo = i;
                        lo[l] -= 1;
                        ok[fs.index(lo)] -= 2.0 * v;
                    } else {
                        let mut lo = i;
                        lo[l] -= 1;
                        ok[fs.index(i)] += v;
                        ok[fs.index(lo)] -= v;
                    }
                });
            }
        }
        out
    }

    /// Symmetric gradient `D(u)`.
    pub fn sym_grad(&self, u: &FaceField) -> Result<TensorField> {
        Ok(self.velocity_gradient(u)?.sym())
    }

    /// Transpose of [`Grid::sym_grad`] with respect to the plain
    /// (unweighted) entry-wise pairing.
    pub fn sym_grad_transpose(&self, t: &TensorField) -> FaceField {
        let d = self.dim;
        let mut g = GradField::zeros(self);
        g.diag.clone_from(&t.diag);
        for (p, &(k, l)) in pairs(d).iter().enumerate() {
            let half: Vec<f64> = t.off[p].iter().map(|x| 0.5 * x).collect();
            g.off[k * d + l].clone_from(&half);
            g.off[l * d + k] = half;
        }
        self.velocity_gradient_transpose(&g)
    }

    /// Componentwise vector Laplacian; `(2d+1)`-point stencil with the
    /// wall conventions above. Wall faces are returned as zero.
    pub fn laplace(&self, u: &FaceField) -> Result<FaceField> {
        let mut g = self.velocity_gradient(u)?;
        self.apply_weights(&mut g);
        let mut out = self.velocity_gradient_transpose(&g);
        out.scale(-1.0 / self.cell_volume());
        self.zero_walls(&mut out);
        Ok(out)
    }

    /// Multiplies every sample of a gradient field by its volume weight.
    pub fn apply_weights(&self, g: &mut GradField) {
        let wc = self.cell_volume();
        for a in &mut g.diag {
            a.iter_mut().for_each(|x| *x *= wc);
        }
        let d = self.dim;
        for &(k, l) in pairs(d) {
            let w = self.edge_weights(k, l);
            for idx in [k * d + l, l * d + k] {
                g.off[idx].iter_mut().zip(&w).for_each(|(x, w)| *x *= w);
            }
        }
    }

    /// Discrete `H^1` seminorm squared, `sum w |grad u|^2`.
    pub fn dirichlet_energy(&self, u: &FaceField) -> Result<f64> {
        Ok(self.velocity_gradient(u)?.norm_sq(self))
    }

    /// Discrete `L^2` norm squared of a face field (each component weighted
    /// by `h^d`, wall faces by half).
    pub fn l2_sq(&self, u: &FaceField) -> f64 {
        let wc = self.cell_volume();
        let mut s = 0.0;
        for k in 0..self.dim {
            let fs = self.faces(k);
            fs.for_each(|f, i| {
                let w = if self.is_wall_face(k, i) { 0.5 * wc } else { wc };
                s += w * u.comps[k][f] * u.comps[k][f];
            });
        }
        s
    }

    /// Samples a vector function at the face centers. Wall faces are zero.
    pub fn sample_faces(&self, f: impl Fn(&Point) -> [f64; 3]) -> FaceField {
        let mut out = FaceField::zeros(self);
        for k in 0..self.dim {
            let fs = self.faces(k);
            fs.for_each(|idx, i| {
                if !self.is_wall_face(k, i) {
                    out.comps[k][idx] = f(&self.face_center(k, i))[k];
                }
            });
        }
        out
    }
}

/// ASCII dump of one scalar array: header `d N boundary role`, then the
/// values in storage order (axis 0 fastest), one per line with 17
/// significant digits.
pub fn write_dump(grid: &Grid, role: &str, values: &[f64]) -> String {
    let mut s = format!("{} {} {} {}\n", grid.dim, grid.n, grid.boundary.as_str(), role);
    for v in values {
        s.push_str(&fmt17(*v));
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dump {
    pub dim: usize,
    pub n: usize,
    pub boundary: String,
    pub role: String,
    pub values: Vec<f64>,
}

pub fn read_dump(text: &str) -> Result<Dump> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty dump".into(),
    })?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 4 {
        return Err(Error::Parse {
            line: 1,
            message: "dump header must be `d N boundary role`".into(),
        });
    }
    let bad = |line: usize| Error::Parse {
        line,
        message: "not a number".into(),
    };
    let dim = f[0].parse().map_err(|_| bad(1))?;
    let n = f[1].parse().map_err(|_| bad(1))?;
    let mut values = Vec::new();
    for (ln, l) in lines.enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        values.push(l.trim().parse().map_err(|_| bad(ln + 2))?);
    }
    Ok(Dump {
        dim,
        n,
        boundary: f[2].to_string(),
        role: f[3].to_string(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_faces(grid: &Grid, rng: &mut ChaCha8Rng) -> FaceField {
        let mut u = FaceField::zeros(grid);
        for c in &mut u.comps {
            c.iter_mut().for_each(|x| *x = rng.gen::<f64>() - 0.5);
        }
        grid.zero_walls(&mut u);
        u
    }

    fn grids() -> Vec<Grid> {
        vec![
            Grid::periodic(2, 8, 3.0).unwrap(),
            Grid::dirichlet(2, 8, &Aabb::unit()).unwrap(),
            Grid::periodic(3, 5, 2.0).unwrap(),
            Grid::dirichlet(3, 5, &Aabb::unit()).unwrap(),
        ]
    }

    #[test]
    fn constant_velocity_has_no_divergence_or_strain() {
        let g = Grid::periodic(2, 8, 1.0).unwrap();
        let mut u = FaceField::zeros(&g);
        u.comps[0].iter_mut().for_each(|x| *x = 1.3);
        u.comps[1].iter_mut().for_each(|x| *x = -0.7);
        assert!(g.div(&u).unwrap().iter().all(|&x| x == 0.0));
        let s = g.sym_grad(&u).unwrap();
        assert!(s.diag.iter().chain(&s.off).flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_field_has_exact_strain() {
        // u = E x with E trace-free symmetric, checked away from the wrap
        let g = Grid::periodic(2, 16, 16.0).unwrap();
        let e = [[0.3, 0.8], [0.8, -0.3]];
        let u = g.sample_faces(|x| {
            [
                e[0][0] * x[0] + e[0][1] * x[1],
                e[1][0] * x[0] + e[1][1] * x[1],
                0.0,
            ]
        });
        let s = g.sym_grad(&u).unwrap();
        let cells = g.cells();
        cells.for_each(|c, i| {
            if i[0] + 1 < g.n && i[1] + 1 < g.n {
                assert!((s.diag[0][c] - 0.3).abs() < 1e-12);
                assert!((s.diag[1][c] + 0.3).abs() < 1e-12);
            }
        });
        g.edges(0, 1).for_each(|f, i| {
            if i[0] > 0 && i[1] > 0 {
                assert!((s.off[0][f] - 0.8).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn div_and_grad_are_negative_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for g in grids() {
            for _ in 0..100 {
                let u = random_faces(&g, &mut rng);
                let p: Vec<f64> = (0..g.cells().len()).map(|_| rng.gen::<f64>() - 0.5).collect();
                let lhs: f64 = g.div(&u).unwrap().iter().zip(&p).map(|(a, b)| a * b).sum();
                let rhs = u.dot(&g.grad(&p).unwrap());
                let scale = lhs.abs().max(1.0) * g.cells().len() as f64;
                assert!((lhs + rhs).abs() < 1e-13 * scale, "{lhs} {rhs}");
            }
        }
    }

    #[test]
    fn gradient_transpose_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for g in grids() {
            let u = random_faces(&g, &mut rng);
            let mut t = GradField::zeros(&g);
            for a in t.diag.iter_mut().chain(t.off.iter_mut()) {
                a.iter_mut().for_each(|x| *x = rng.gen::<f64>() - 0.5);
            }
            let gu = g.velocity_gradient(&u).unwrap();
            let lhs: f64 = gu
                .diag
                .iter()
                .chain(&gu.off)
                .zip(t.diag.iter().chain(&t.off))
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            let rhs = u.dot(&g.velocity_gradient_transpose(&t));
            assert!((lhs - rhs).abs() < 1e-11 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn div_grad_is_five_point_laplacian() {
        let g = Grid::periodic(2, 6, 6.0).unwrap();
        let cells = g.cells();
        for c0 in 0..cells.len() {
            let mut p = vec![0.0; cells.len()];
            p[c0] = 1.0;
            let lap = g.div(&g.grad(&p).unwrap()).unwrap();
            let i0 = cells.multi(c0);
            cells.for_each(|c, i| {
                let dx = (i[0] as i64 - i0[0] as i64).rem_euclid(6);
                let dy = (i[1] as i64 - i0[1] as i64).rem_euclid(6);
                let expect = match (dx, dy) {
                    (0, 0) => -4.0,
                    (1, 0) | (5, 0) | (0, 1) | (0, 5) => 1.0,
                    _ => 0.0,
                };
                assert!((lap[c] - expect).abs() < 1e-14);
            });
        }
    }

    #[test]
    fn laplace_matches_ghost_stencil_near_walls() {
        let g = Grid::dirichlet(2, 6, &Aabb::unit()).unwrap();
        let mut u = FaceField::zeros(&g);
        let fs = g.faces(0);
        // u_x at the first tangential row (i1 = 0) and an interior face
        let f = fs.index([3, 0, 0]);
        u.comps[0][f] = 1.0;
        let lap = g.laplace(&u).unwrap();
        let h2 = g.h * g.h;
        // ghost reflection: -(3u - neighbours)/h^2 along y, -(2u - ...)/h^2 along x
        assert!((lap.comps[0][f] + 5.0 / h2).abs() < 1e-9);
        assert!((lap.comps[0][fs.index([3, 1, 0])] - 1.0 / h2).abs() < 1e-9);
        assert!((lap.comps[0][fs.index([2, 0, 0])] - 1.0 / h2).abs() < 1e-9);
    }

    #[test]
    fn divergence_free_fields_have_twice_strain_energy() {
        // sum |grad u|^2 == 2 sum |D u|^2 for discretely divergence-free u
        for g in grids() {
            let cells = g.cells();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let phi: Vec<f64> = (0..cells.len()).map(|_| rng.gen::<f64>()).collect();
            let u = if g.dim == 2 {
                stream_function_field(&g, &phi)
            } else {
                continue;
            };
            let div = g.div(&u).unwrap();
            assert!(div.iter().all(|x| x.abs() < 1e-10));
            let s = g.sym_grad(&u).unwrap();
            let lhs = g.dirichlet_energy(&u).unwrap();
            let rhs = 2.0 * s.inner(&s, &g);
            assert!((lhs - rhs).abs() < 1e-10 * lhs, "{:?}: {lhs} vs {rhs}", g.boundary);
        }
    }

    /// Curl of a node-based stream function, zero on Dirichlet walls.
    fn stream_function_field(g: &Grid, phi_cells: &[f64]) -> FaceField {
        let nodes = g.edges(0, 1);
        let mut psi = vec![0.0; nodes.len()];
        nodes.for_each(|e, i| {
            let interior = g.is_periodic() || (i[0] > 0 && i[0] < g.n && i[1] > 0 && i[1] < g.n);
            if interior {
                psi[e] = phi_cells[g.cells().index([i[0] % g.n, i[1] % g.n, 0])];
            }
        });
        let mut u = FaceField::zeros(g);
        let up = |i: usize| if g.is_periodic() { (i + 1) % g.n } else { i + 1 };
        for k in 0..2 {
            let fs = g.faces(k);
            fs.for_each(|f, i| {
                if g.is_wall_face(k, i) {
                    return;
                }
                let mut j = i;
                if k == 0 {
                    j[1] = up(i[1]);
                    u.comps[0][f] = (psi[nodes.index(j)] - psi[nodes.index(i)]) / g.h;
                } else {
                    j[0] = up(i[0]);
                    u.comps[1][f] = -(psi[nodes.index(j)] - psi[nodes.index(i)]) / g.h;
                }
            });
        }
        u
    }

    #[test]
    fn dump_round_trip() {
        let g = Grid::periodic(2, 4, 1.0).unwrap();
        let vals: Vec<f64> = (0..16).map(|i| (i as f64).sqrt() / 3.0).collect();
        let d = read_dump(&write_dump(&g, "pressure", &vals)).unwrap();
        assert_eq!(d.role, "pressure");
        assert_eq!(d.boundary, "periodic");
        assert!(d.values.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
