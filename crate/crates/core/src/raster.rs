//! Rasterization of an [`InclusionSet`] onto a [`Grid`].
//!
//! A cell belongs to inclusion `n` when its center lies in the closed ball
//! around `x_n`. A velocity face is rigid (owned by `n`) as soon as one of
//! its two cells is labeled `n`; every other non-wall face is free.

use crate::error::{Error, Result};
use crate::geometry::{min_image, norm, Domain, InclusionSet, Point};
use crate::grid::{Boundary, Grid};

pub const FLUID: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceKind {
    Free,
    Rigid(u32),
    Wall,
}

#[derive(Clone, Debug)]
pub struct LabelField {
    pub grid: Grid,
    /// Inclusion index per cell, [`FLUID`] for fluid cells.
    pub cells: Vec<u32>,
    pub faces: Vec<Vec<FaceKind>>,
    pub centers: Vec<Point>,
    pub radius: f64,
}

impl LabelField {
    pub fn n_inclusions(&self) -> usize {
        self.centers.len()
    }

    pub fn is_fluid(&self, c: usize) -> bool {
        self.cells[c] == FLUID
    }

    pub fn fluid_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == FLUID).count()
    }

    pub fn labeled_count(&self, n: u32) -> usize {
        self.cells.iter().filter(|&&c| c == n).count()
    }

    /// Offset `x - x_n`, minimum image on periodic grids.
    pub fn offset(&self, n: usize, x: &Point) -> Point {
        let period = self.grid.is_periodic().then(|| self.grid.extent());
        min_image(&self.centers[n], x, self.grid.dim, period)
    }

    /// Fraction of faces of component `k` owned by inclusions.
    pub fn rigid_face_fraction(&self, k: usize) -> f64 {
        let f = &self.faces[k];
        let rigid = f.iter().filter(|x| matches!(x, FaceKind::Rigid(_))).count();
        let walls = f.iter().filter(|x| matches!(x, FaceKind::Wall)).count();
        rigid as f64 / (f.len() - walls) as f64
    }

    /// Cell-volume fraction covered by labeled cells.
    pub fn labeled_fraction(&self) -> f64 {
        1.0 - self.fluid_count() as f64 / self.cells.len() as f64
    }

    /// An empty (all-fluid) label field.
    pub fn empty(grid: &Grid) -> Self {
        let cells = vec![FLUID; grid.cells().len()];
        let faces = face_kinds(grid, &cells);
        Self {
            grid: *grid,
            cells,
            faces,
            centers: Vec::new(),
            radius: 0.0,
        }
    }
}

/// Releases cells to the fluid until no two inclusions own face-adjacent
/// cells. Of each touching pair the cell farther from its own center goes.
fn separate(grid: &Grid, cells: &mut [u32], centers: &[Point], period: Option<f64>) {
    let cs = grid.cells();
    let d = grid.dim;
    let depth = |c: usize, n: u32| {
        let x = grid.cell_center(cs.multi(c));
        norm(&min_image(&centers[n as usize], &x, d, period))
    };
    loop {
        let mut release = Vec::new();
        for k in 0..d {
            cs.for_each(|c, i| {
                let mut j = i;
                if i[k] + 1 == grid.n {
                    if period.is_none() {
                        return;
                    }
                    j[k] = 0;
                } else {
                    j[k] += 1;
                }
                let o = cs.index(j);
                let (a, b) = (cells[c], cells[o]);
                if a != FLUID && b != FLUID && a != b {
                    release.push(if depth(o, b) > depth(c, a) { o } else { c });
                }
            });
        }
        if release.is_empty() {
            return;
        }
        for c in release {
            cells[c] = FLUID;
        }
    }
}

fn face_kinds(grid: &Grid, cells: &[u32]) -> Vec<Vec<FaceKind>> {
    let cs = grid.cells();
    (0..grid.dim)
        .map(|k| {
            let fs = grid.faces(k);
            let mut out = vec![FaceKind::Free; fs.len()];
            fs.for_each(|f, i| {
                if grid.is_wall_face(k, i) {
                    out[f] = FaceKind::Wall;
                    return;
                }
                let mut lo = i;
                lo[k] = if i[k] == 0 { grid.n - 1 } else { i[k] - 1 };
                let a = cells[cs.index(lo)];
                let b = cells[cs.index(i)];
                if a != FLUID {
                    out[f] = FaceKind::Rigid(a);
                } else if b != FLUID {
                    out[f] = FaceKind::Rigid(b);
                }
            });
            out
        })
        .collect()
}

/// Labels cells and faces of `grid` by the balls of `set`.
pub fn rasterize(set: &InclusionSet, grid: &Grid) -> Result<LabelField> {
    if set.dim != grid.dim {
        return Err(Error::GridMismatch(format!(
            "set is {}-dimensional, grid is {}-dimensional",
            set.dim, grid.dim
        )));
    }
    let d = grid.dim;
    let period = match (set.domain, grid.boundary) {
        (Domain::Torus { length }, Boundary::Periodic) => {
            if (length - grid.extent()).abs() > 1e-9 * length {
                return Err(Error::GridMismatch(format!(
                    "torus length {length} differs from grid extent {}",
                    grid.extent()
                )));
            }
            Some(length)
        }
        (Domain::Box { lo, hi }, Boundary::DirichletZero) => {
            for j in 0..d {
                let tol = 1e-9 * (hi[j] - lo[j]);
                if (lo[j] - grid.origin[j]).abs() > tol
                    || (hi[j] - grid.origin[j] - grid.extent()).abs() > tol
                {
                    return Err(Error::GridMismatch("box does not match the grid".into()));
                }
            }
            None
        }
        _ => {
            return Err(Error::GridMismatch(
                "periodic sets need periodic grids and boxed sets Dirichlet grids".into(),
            ))
        }
    };
    if !set.is_empty() {
        let r = set.radius;
        if grid.h > r / 4.0 {
            return Err(Error::ResolutionTooCoarse {
                h: grid.h,
                limit: r / 4.0,
                reason: "radius / 4",
            });
        }
    }

    let cs = grid.cells();
    let mut cells = vec![FLUID; cs.len()];
    let n = grid.n as i64;
    let h = grid.h;
    let r = set.radius;
    for (idx, c) in set.centers.iter().enumerate() {
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for j in 0..d {
            let t = (c[j] - grid.origin[j]) / h - 0.5;
            lo[j] = (t - r / h).floor() as i64 - 1;
            hi[j] = (t + r / h).ceil() as i64 + 1;
        }
        for i2 in lo[2]..=hi[2] {
            for i1 in lo[1]..=hi[1] {
                for i0 in lo[0]..=hi[0] {
                    let raw = [i0, i1, i2];
                    let mut i = [0usize; 3];
                    let mut inside = true;
                    for j in 0..d {
                        if period.is_some() {
                            i[j] = raw[j].rem_euclid(n) as usize;
                        } else if (0..n).contains(&raw[j]) {
                            i[j] = raw[j] as usize;
                        } else {
                            inside = false;
                        }
                    }
                    if !inside {
                        continue;
                    }
                    let x = grid.cell_center(i);
                    let dx = min_image(c, &x, d, period);
                    let dist2: f64 = dx.iter().map(|v| v * v).sum();
                    if dist2 <= r * r {
                        let f = cs.index(i);
                        if cells[f] != FLUID && cells[f] != idx as u32 {
                            return Err(Error::ResolutionTooCoarse {
                                h,
                                limit: set.gap,
                                reason: "two inclusions share a cell",
                            });
                        }
                        cells[f] = idx as u32;
                    }
                }
            }
        }
    }

    if period.is_none() {
        let mut touching = false;
        cs.for_each(|f, i| {
            if cells[f] != FLUID && (0..d).any(|j| i[j] == 0 || i[j] + 1 == grid.n) {
                touching = true;
            }
        });
        if touching {
            return Err(Error::ResolutionTooCoarse {
                h,
                limit: set.gap,
                reason: "inclusion touches the wall",
            });
        }
    }
    separate(grid, &mut cells, &set.centers, period);
    for idx in 0..set.len() {
        if !cells.contains(&(idx as u32)) {
            return Err(Error::ResolutionTooCoarse {
                h,
                limit: r / 4.0,
                reason: "inclusion covers no cell center",
            });
        }
    }

    let faces = face_kinds(grid, &cells);
    Ok(LabelField {
        grid: *grid,
        cells,
        faces,
        centers: set.centers.clone(),
        radius: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::InclusionSet;

    #[test]
    fn empty_set_is_all_fluid() {
        let g = Grid::periodic(2, 16, 4.0).unwrap();
        let set = InclusionSet::manual(2, 4.0, 0.5, vec![]).unwrap();
        let lab = rasterize(&set, &g).unwrap();
        assert!(lab.cells.iter().all(|&c| c == FLUID));
        assert!(lab.faces.iter().flatten().all(|&f| f == FaceKind::Free));
    }

    #[test]
    fn single_disk_cell_count_matches_brute_force() {
        let g = Grid::periodic(2, 32, 8.0).unwrap();
        // center on a cell center
        let c = g.cell_center([13, 17, 0]);
        let set = InclusionSet::manual(2, 8.0, 0.5, vec![c]).unwrap();
        let lab = rasterize(&set, &g).unwrap();
        let mut brute = 0;
        for j in 0..32 {
            for i in 0..32 {
                let x = g.cell_center([i, j, 0]);
                if (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) <= 1.0 {
                    brute += 1;
                }
            }
        }
        assert_eq!(lab.labeled_count(0), brute);
        let area = std::f64::consts::PI / (g.h * g.h);
        let perim = 2.0 * std::f64::consts::PI / g.h;
        assert!((brute as f64 - area).abs() <= perim);
    }

    #[test]
    fn close_balls_are_never_face_adjacent() {
        let g = Grid::periodic(2, 60, 12.0).unwrap();
        let set = InclusionSet::manual(2, 12.0, 0.4, vec![[4.03, 5.11, 0.0], [6.53, 5.11, 0.0]]).unwrap();
        assert!((set.min_surface_gap() - 0.5).abs() < 1e-12);
        let lab = rasterize(&set, &g).unwrap();
        let cs = g.cells();
        cs.for_each(|f, i| {
            let a = lab.cells[f];
            if a == FLUID {
                return;
            }
            for k in 0..2 {
                let mut j = i;
                j[k] = (i[k] + 1) % g.n;
                let b = lab.cells[cs.index(j)];
                assert!(b == FLUID || b == a);
            }
        });
        assert!(lab.labeled_count(0) > 0 && lab.labeled_count(1) > 0);
    }

    #[test]
    fn wrapped_ball_is_labeled_across_the_seam() {
        let g = Grid::periodic(2, 32, 8.0).unwrap();
        let set = InclusionSet::manual(2, 8.0, 0.5, vec![[0.1, 7.9, 0.0]]).unwrap();
        let lab = rasterize(&set, &g).unwrap();
        let cs = g.cells();
        assert_eq!(lab.cells[cs.index([0, 31, 0])], 0);
        assert_eq!(lab.cells[cs.index([31, 0, 0])], 0);
        assert_eq!(lab.cells[cs.index([31, 31, 0])], 0);
    }

    #[test]
    fn count_converges_under_refinement() {
        let mut errs = vec![];
        for n in [32usize, 64, 128, 256] {
            let g = Grid::periodic(2, n, 8.0).unwrap();
            let set = InclusionSet::manual(2, 8.0, 0.5, vec![[3.9137, 4.0711, 0.0]]).unwrap();
            let lab = rasterize(&set, &g).unwrap();
            let area = lab.labeled_count(0) as f64 * g.h * g.h;
            let err = (area - std::f64::consts::PI).abs();
            assert!(err <= 2.0 * std::f64::consts::PI * g.h);
            errs.push(err);
        }
        assert!(errs[3] < errs[0]);
    }

    #[test]
    fn resolution_guards() {
        let g = Grid::periodic(2, 16, 8.0).unwrap();
        let set = InclusionSet::manual(2, 8.0, 0.5, vec![[4.0, 4.0, 0.0]]).unwrap();
        assert!(matches!(rasterize(&set, &g), Err(Error::ResolutionTooCoarse { .. })));
    }

    #[test]
    fn touching_cells_are_released_to_the_fluid() {
        // gap 0.1 with h = 0.25: the two balls land on neighbouring cells
        let g = Grid::periodic(2, 32, 8.0).unwrap();
        let set = InclusionSet::manual(2, 8.0, 0.05, vec![[2.875, 4.125, 0.0], [4.975, 4.125, 0.0]]).unwrap();
        let lab = rasterize(&set, &g).unwrap();
        let cs = g.cells();
        cs.for_each(|c, i| {
            for k in 0..2 {
                let mut j = i;
                j[k] = (i[k] + 1) % 32;
                let (a, b) = (lab.cells[c], lab.cells[cs.index(j)]);
                assert!(a == FLUID || b == FLUID || a == b, "{i:?}");
            }
        });
        let full = rasterize(&InclusionSet::manual(2, 8.0, 0.05, vec![[2.875, 4.125, 0.0]]).unwrap(), &g).unwrap();
        assert_eq!(lab.labeled_count(0) + 1, full.labeled_count(0));
        assert!(lab.labeled_count(1) > 0);
    }

    #[test]
    fn rigid_faces_surround_labeled_cells() {
        let g = Grid::periodic(2, 32, 8.0).unwrap();
        let set = InclusionSet::manual(2, 8.0, 0.5, vec![[4.0, 4.0, 0.0]]).unwrap();
        let lab = rasterize(&set, &g).unwrap();
        let cs = g.cells();
        cs.for_each(|c, i| {
            if lab.cells[c] != 0 {
                return;
            }
            for k in 0..2 {
                let fs = g.faces(k);
                let mut j = i;
                j[k] = (i[k] + 1) % g.n;
                assert_eq!(lab.faces[k][fs.index(i)], FaceKind::Rigid(0));
                assert_eq!(lab.faces[k][fs.index(j)], FaceKind::Rigid(0));
            }
        });
    }
}
