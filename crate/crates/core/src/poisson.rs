//! Fast inverse of the componentwise face Laplacian `-Δ_h`.
//!
//! Every component is diagonalized by a tensor product of 1D transforms:
//! the complex FFT on periodic axes, the type-I sine transform along the
//! normal axis of a Dirichlet component (interior faces only), and the
//! type-II sine transform along its tangential axes (cell-centered with
//! reflected ghosts). The sine transforms are computed through zero-padded
//! complex FFTs.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{FaceField, Grid, Shape};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Periodic,
    /// Interior nodes `1..n`, `n - 1` unknowns.
    SineI,
    /// Cell centers `0..n`.
    SineII,
}

struct Axis {
    kind: Kind,
    /// Number of unknowns along the axis.
    m: usize,
    /// Offset of the first unknown in the stored array.
    first: usize,
    eig: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Option<Arc<dyn Fft<f64>>>,
}

impl Axis {
    fn new(kind: Kind, n: usize, h: f64, planner: &mut FftPlanner<f64>) -> Self {
        let ih2 = 1.0 / (h * h);
        let (m, first, eig, len) = match kind {
            Kind::Periodic => {
                let eig = (0..n)
                    .map(|k| (2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()) * ih2)
                    .collect();
                (n, 0, eig, n)
            }
            Kind::SineI => {
                let eig = (1..n)
                    .map(|k| (2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos()) * ih2)
                    .collect();
                (n - 1, 1, eig, 2 * n)
            }
            Kind::SineII => {
                let eig = (1..=n)
                    .map(|k| (2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos()) * ih2)
                    .collect();
                (n, 0, eig, 4 * n)
            }
        };
        let ifft = (kind == Kind::Periodic).then(|| planner.plan_fft_inverse(len));
        Self {
            kind,
            m,
            first,
            eig,
            fft: planner.plan_fft_forward(len),
            ifft,
        }
    }
}

/// Orthonormal DST-I of `x` in place (its own inverse).
fn dst1(x: &mut [f64], fft: &dyn Fft<f64>, buf: &mut Vec<Complex64>) {
    let n = x.len();
    let len = 2 * (n + 1);
    buf.clear();
    buf.resize(len, Complex64::default());
    for (j, &v) in x.iter().enumerate() {
        buf[j + 1].re = v;
        buf[len - 1 - j].re = -v;
    }
    fft.process(buf);
    let s = (2.0 / (n + 1) as f64).sqrt();
    for (k, v) in x.iter_mut().enumerate() {
        *v = -0.5 * buf[k + 1].im * s;
    }
}

fn dst2_scale(k: usize, n: usize) -> f64 {
    if k == n {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Orthonormal DST-II: `X_k = c_k sum_j x_j sin(pi (j + 1/2) k / n)`, `k = 1..=n`.
fn dst2(x: &mut [f64], fft: &dyn Fft<f64>, buf: &mut Vec<Complex64>) {
    let n = x.len();
    buf.clear();
    buf.resize(4 * n, Complex64::default());
    for (j, &v) in x.iter().enumerate() {
        buf[2 * j + 1].re = v;
        buf[4 * n - 2 * j - 1].re = -v;
    }
    fft.process(buf);
    for (i, v) in x.iter_mut().enumerate() {
        let k = i + 1;
        *v = -0.5 * buf[k].im * dst2_scale(k, n);
    }
}

/// Transpose (= inverse) of [`dst2`].
fn dst3(y: &mut [f64], fft: &dyn Fft<f64>, buf: &mut Vec<Complex64>) {
    let n = y.len();
    buf.clear();
    buf.resize(4 * n, Complex64::default());
    for (i, &v) in y.iter().enumerate() {
        let k = i + 1;
        let a = v * dst2_scale(k, n);
        buf[k].re += a;
        buf[4 * n - k].re -= a;
    }
    fft.process(buf);
    for (j, v) in y.iter_mut().enumerate() {
        *v = -0.5 * buf[2 * j + 1].im;
    }
}

/// Calls `f(start, stride)` once per grid line along `axis`.
fn for_lines(shape: &Shape, axis: usize, mut f: impl FnMut(usize, usize)) {
    let stride = shape.stride(axis);
    let mut ext = shape.ext;
    ext[axis] = 1;
    let sub = Shape { dim: shape.dim, ext };
    sub.for_each(|_, i| f(shape.index(i), stride));
}

struct Component {
    shape: Shape,
    axes: Vec<Axis>,
}

pub struct LaplaceInverse {
    grid: Grid,
    comps: Vec<Component>,
}

impl LaplaceInverse {
    pub fn new(grid: &Grid) -> Self {
        let mut planner = FftPlanner::new();
        let comps = (0..grid.dim)
            .map(|k| {
                let axes = (0..grid.dim)
                    .map(|a| {
                        let kind = match (grid.is_periodic(), a == k) {
                            (true, _) => Kind::Periodic,
                            (false, true) => Kind::SineI,
                            (false, false) => Kind::SineII,
                        };
                        Axis::new(kind, grid.n, grid.h, &mut planner)
                    })
                    .collect();
                Component {
                    shape: grid.faces(k),
                    axes,
                }
            })
            .collect();
        Self { grid: *grid, comps }
    }

    /// Solves `-Δ_h u = f` componentwise. Wall faces of `f` are ignored and
    /// stay zero in `u`; on periodic grids the mean of `f` is dropped and
    /// `u` has zero mean.
    pub fn solve(&self, f: &FaceField) -> FaceField {
        let mut out = FaceField::zeros(&self.grid);
        for (k, comp) in self.comps.iter().enumerate() {
            out.comps[k] = if self.grid.is_periodic() {
                self.solve_periodic(comp, &f.comps[k])
            } else {
                self.solve_sine(comp, &f.comps[k])
            };
        }
        out
    }

    fn solve_periodic(&self, comp: &Component, f: &[f64]) -> Vec<f64> {
        let shape = &comp.shape;
        let mut data: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut line = Vec::new();
        let mut transform = |data: &mut Vec<Complex64>, forward: bool| {
            for (a, axis) in comp.axes.iter().enumerate() {
                let plan = if forward { &axis.fft } else { axis.ifft.as_ref().unwrap() };
                for_lines(shape, a, |start, stride| {
                    line.clear();
                    line.extend((0..axis.m).map(|j| data[start + j * stride]));
                    plan.process(&mut line);
                    for (j, v) in line.iter().enumerate() {
                        data[start + j * stride] = *v;
                    }
                });
            }
        };
        transform(&mut data, true);
        let total = shape.len() as f64;
        shape.for_each(|idx, i| {
            let lam: f64 = (0..shape.dim).map(|a| comp.axes[a].eig[i[a]]).sum();
            data[idx] = if lam > 0.0 {
                data[idx] / (lam * total)
            } else {
                Complex64::default()
            };
        });
        transform(&mut data, false);
        data.iter().map(|z| z.re).collect()
    }

    fn solve_sine(&self, comp: &Component, f: &[f64]) -> Vec<f64> {
        let shape = &comp.shape;
        let mut data = f.to_vec();
        let mut line = Vec::new();
        let mut buf = Vec::new();
        for (a, axis) in comp.axes.iter().enumerate() {
            if axis.kind == Kind::SineI {
                for_lines(shape, a, |start, stride| {
                    data[start] = 0.0;
                    data[start + (axis.m + 1) * stride] = 0.0;
                });
            }
        }
        let mut transform = |data: &mut Vec<f64>, forward: bool| {
            for (a, axis) in comp.axes.iter().enumerate() {
                for_lines(shape, a, |start, stride| {
                    let base = start + axis.first * stride;
                    line.clear();
                    line.extend((0..axis.m).map(|j| data[base + j * stride]));
                    match (axis.kind, forward) {
                        (Kind::SineI, _) => dst1(&mut line, axis.fft.as_ref(), &mut buf),
                        (Kind::SineII, true) => dst2(&mut line, axis.fft.as_ref(), &mut buf),
                        (Kind::SineII, false) => dst3(&mut line, axis.fft.as_ref(), &mut buf),
                        (Kind::Periodic, _) => unreachable!(),
                    }
                    for (j, v) in line.iter().enumerate() {
                        data[base + j * stride] = *v;
                    }
                });
            }
        };
        transform(&mut data, true);
        shape.for_each(|idx, i| {
            let mut lam = 0.0;
            for (a, axis) in comp.axes.iter().enumerate() {
                let j = i[a] as isize - axis.first as isize;
                if j < 0 || j as usize >= axis.m {
                    lam = f64::NAN;
                    break;
                }
                lam += axis.eig[j as usize];
            }
            data[idx] = if lam.is_nan() { 0.0 } else { data[idx] / lam };
        });
        transform(&mut data, false);
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dst2(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (1..=n)
            .map(|k| {
                dst2_scale(k, n)
                    * x.iter()
                        .enumerate()
                        .map(|(j, v)| v * (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / n as f64).sin())
                        .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn sine_transforms_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut planner = FftPlanner::new();
        let mut buf = Vec::new();
        for n in [1usize, 2, 5, 8, 13] {
            let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let mut y = x.clone();
            dst2(&mut y, planner.plan_fft_forward(4 * n).as_ref(), &mut buf);
            let want = naive_dst2(&x);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-13);
            }
            dst3(&mut y, planner.plan_fft_forward(4 * n).as_ref(), &mut buf);
            for (a, b) in y.iter().zip(&x) {
                assert!((a - b).abs() < 1e-13);
            }
            let mut z = x.clone();
            let plan = planner.plan_fft_forward(2 * (n + 1));
            dst1(&mut z, plan.as_ref(), &mut buf);
            for k in 0..n {
                let s: f64 = (0..n)
                    .map(|j| {
                        x[j] * (std::f64::consts::PI * ((j + 1) * (k + 1)) as f64 / (n + 1) as f64).sin()
                    })
                    .sum();
                assert!((z[k] - s * (2.0 / (n + 1) as f64).sqrt()).abs() < 1e-13);
            }
            dst1(&mut z, plan.as_ref(), &mut buf);
            for (a, b) in z.iter().zip(&x) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    fn roundtrip(grid: &Grid) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut u = FaceField::zeros(grid);
        for c in &mut u.comps {
            c.iter_mut().for_each(|x| *x = rng.gen::<f64>() - 0.5);
        }
        grid.zero_walls(&mut u);
        if grid.is_periodic() {
            for c in &mut u.comps {
                let m = c.iter().sum::<f64>() / c.len() as f64;
                c.iter_mut().for_each(|x| *x -= m);
            }
        }
        let mut f = grid.laplace(&u).unwrap();
        f.scale(-1.0);
        let v = LaplaceInverse::new(grid).solve(&f);
        for (a, b) in u.comps.iter().flatten().zip(v.comps.iter().flatten()) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn inverts_the_grid_laplacian() {
        roundtrip(&Grid::periodic(2, 8, 2.0).unwrap());
        roundtrip(&Grid::periodic(3, 6, 1.5).unwrap());
        roundtrip(&Grid::dirichlet(2, 8, &Aabb::unit()).unwrap());
        roundtrip(&Grid::dirichlet(3, 5, &Aabb::unit()).unwrap());
        roundtrip(&Grid::dirichlet(2, 12, &Aabb { lo: [-1.0, 2.0, 0.0], hi: [2.0, 5.0, 0.0] }).unwrap());
    }
}
