//! Preconditioned MINRES for symmetric (possibly singular) systems.

use crate::error::{Error, Result};

pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Dense symmetric matrix as an operator (tests and small oracles).
pub struct DenseOperator {
    pub n: usize,
    /// Row-major.
    pub a: Vec<f64>,
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(&self.a[i * self.n..(i + 1) * self.n], x);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Orthonormal basis of the kernel of a symmetric operator.
#[derive(Clone, Debug, Default)]
pub struct NullSpace {
    basis: Vec<Vec<f64>>,
}

impl NullSpace {
    /// Orthonormalizes `vectors` (modified Gram-Schmidt); zero vectors are
    /// dropped.
    pub fn new(vectors: Vec<Vec<f64>>) -> Self {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
        for mut v in vectors {
            for q in &basis {
                let c = dot(q, &v);
                axpy(-c, q, &mut v);
            }
            let nrm = dot(&v, &v).sqrt();
            if nrm > 0.0 {
                v.iter_mut().for_each(|x| *x /= nrm);
                basis.push(v);
            }
        }
        Self { basis }
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// Removes the kernel component of `x` in place.
    pub fn project(&self, x: &mut [f64]) {
        for q in &self.basis {
            let c = dot(q, x);
            axpy(-c, q, x);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KrylovOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Project a right-hand side with a kernel component instead of
    /// failing.
    pub project_rhs: bool,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 10_000,
            project_rhs: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KrylovOutput {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// True relative residual `|b - A x| / |b|`.
    pub residual: f64,
    /// Preconditioned residual estimate, relative, per iteration.
    pub history: Vec<f64>,
}

/// Solves `A x = b` by MINRES with symmetric positive definite
/// preconditioner `m` (applied as `m ≈ A^{-1}`), keeping iterates
/// orthogonal to `null`.
pub fn minres(
    a: &dyn LinearOperator,
    m: Option<&dyn LinearOperator>,
    b: &[f64],
    null: &NullSpace,
    opts: &KrylovOptions,
) -> Result<KrylovOutput> {
    let n = a.dim();
    assert_eq!(b.len(), n);
    let mut rhs = b.to_vec();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(KrylovOutput {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            history: vec![],
        });
    }
    null.project(&mut rhs);
    let off = {
        let mut d = b.to_vec();
        axpy(-1.0, &rhs, &mut d);
        dot(&d, &d).sqrt() / bnorm
    };
    if off > 1e-12 && !opts.project_rhs {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: off,
        });
    }
    let rnorm0 = dot(&rhs, &rhs).sqrt();

    let precond = |r: &[f64], out: &mut Vec<f64>| {
        out.clear();
        match m {
            Some(m) => {
                let mut t = r.to_vec();
                null.project(&mut t);
                out.resize(n, 0.0);
                m.apply(&t, out);
            }
            None => out.extend_from_slice(r),
        }
        null.project(out);
    };

    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut target = opts.tol;
    loop {
        // one MINRES cycle started from the current x
        let mut r1 = rhs.clone();
        let mut ax = vec![0.0; n];
        a.apply(&x, &mut ax);
        axpy(-1.0, &ax, &mut r1);
        null.project(&mut r1);
        let mut y = Vec::with_capacity(n);
        precond(&r1, &mut y);
        let beta1 = dot(&r1, &y);
        if beta1 < 0.0 {
            return Err(Error::SingularSystem("preconditioner is not positive definite".into()));
        }
        let beta1 = beta1.sqrt();
        if beta1 == 0.0 {
            break;
        }
        let mut r2 = r1.clone();
        let (mut oldb, mut beta) = (0.0, beta1);
        let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
        let (mut cs, mut sn) = (-1.0f64, 0.0f64);
        let mut w = vec![0.0; n];
        let mut w1 = vec![0.0; n];
        let mut w2 = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut first = true;
        let scale0 = rnorm0 / beta1;
        while iterations < opts.max_iter {
            iterations += 1;
            let s = 1.0 / beta;
            v.iter_mut().zip(&y).for_each(|(v, y)| *v = s * y);
            a.apply(&v, &mut y);
            if !first {
                axpy(-beta / oldb, &r1, &mut y);
            }
            first = false;
            let alfa = dot(&v, &y);
            axpy(-alfa / beta, &r2, &mut y);
            std::mem::swap(&mut r1, &mut r2);
            r2.copy_from_slice(&y);
            precond(&r2, &mut y);
            oldb = beta;
            let bb = dot(&r2, &y);
            if bb < 0.0 {
                return Err(Error::SingularSystem("preconditioner is not positive definite".into()));
            }
            beta = bb.sqrt();
            let oldeps = epsln;
            let delta = cs * dbar + sn * alfa;
            let gbar = sn * dbar - cs * alfa;
            epsln = sn * beta;
            dbar = -cs * beta;
            let gamma = gbar.hypot(beta).max(f64::EPSILON);
            cs = gbar / gamma;
            sn = beta / gamma;
            let phi = cs * phibar;
            phibar *= sn;
            let denom = 1.0 / gamma;
            std::mem::swap(&mut w1, &mut w2);
            std::mem::swap(&mut w2, &mut w);
            for i in 0..n {
                w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) * denom;
            }
            axpy(phi, &w, &mut x);
            // phibar is measured in the preconditioned norm; scale0 maps it
            // back to the size of the Euclidean residual at restart
            let est = phibar * scale0 / bnorm;
            history.push(est);
            if est < 0.5 * target || beta == 0.0 {
                break;
            }
        }
        let mut r = rhs.clone();
        a.apply(&x, &mut ax);
        axpy(-1.0, &ax, &mut r);
        let res = dot(&r, &r).sqrt() / bnorm;
        if res < opts.tol {
            return Ok(KrylovOutput {
                x,
                iterations,
                residual: res,
                history,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: res,
            });
        }
        target *= 0.1;
        if target < 1e-3 * opts.tol {
            return Err(Error::NoConvergence {
                iterations,
                residual: res,
            });
        }
    }
    let mut r = rhs.clone();
    let mut ax = vec![0.0; n];
    a.apply(&x, &mut ax);
    axpy(-1.0, &ax, &mut r);
    let res = dot(&r, &r).sqrt() / bnorm;
    Ok(KrylovOutput {
        x,
        iterations,
        residual: res,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Diag(Vec<f64>);

    impl LinearOperator for Diag {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            for i in 0..x.len() {
                y[i] = self.0[i] * x[i];
            }
        }
    }

    #[test]
    fn toy_saddle_terminates_in_two_steps() {
        let a = DenseOperator {
            n: 2,
            a: vec![2.0, 1.0, 1.0, 0.0],
        };
        let out = minres(&a, None, &[3.0, 1.0], &NullSpace::default(), &KrylovOptions::default()).unwrap();
        assert!(out.iterations <= 2);
        assert!((out.x[0] - 1.0).abs() < 1e-14 && (out.x[1] - 1.0).abs() < 1e-14);
    }

    fn random_saddle(rng: &mut ChaCha8Rng, nv: usize, np: usize) -> DMatrix<f64> {
        let n = nv + np;
        let g = DMatrix::from_fn(nv, nv, |_, _| rng.gen::<f64>() - 0.5);
        let a = &g * g.transpose() + DMatrix::identity(nv, nv) * 0.5;
        let b = DMatrix::from_fn(np, nv, |_, _| rng.gen::<f64>() - 0.5);
        let mut k = DMatrix::zeros(n, n);
        k.view_mut((0, 0), (nv, nv)).copy_from(&a);
        k.view_mut((nv, 0), (np, nv)).copy_from(&b);
        k.view_mut((0, nv), (nv, np)).copy_from(&b.transpose());
        k
    }

    fn to_op(k: &DMatrix<f64>) -> DenseOperator {
        let n = k.nrows();
        DenseOperator {
            n,
            a: (0..n * n).map(|i| k[(i / n, i % n)]).collect(),
        }
    }

    #[test]
    fn matches_dense_solve_on_random_saddle_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = random_saddle(&mut rng, 150, 50);
        let b: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() - 0.5).collect();
        let want = k.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        let op = to_op(&k);
        let opts = KrylovOptions {
            tol: 1e-13,
            max_iter: 5000,
            project_rhs: false,
        };
        let pre = Diag((0..200).map(|i| if i < 150 { 0.1 } else { 1.0 }).collect());
        for m in [None, Some(&pre as &dyn LinearOperator)] {
            let out = minres(&op, m, &b, &NullSpace::default(), &opts).unwrap();
            let err = (DVector::from_vec(out.x) - &want).norm() / want.norm();
            assert!(err < 1e-10, "{err}");
            assert!(out.residual < 1e-13);
        }
    }

    fn singular_system() -> (DenseOperator, Vec<f64>) {
        // kernel spanned by the all-ones vector
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        let s = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
            - DMatrix::from_element(n, n, 1.0 / n as f64);
        let d = DMatrix::from_fn(n, n, |i, j| if i == j { if i % 2 == 0 { 1.0 } else { -2.0 } } else { 0.0 });
        let k = &s * (&g * &d * g.transpose()) * &s;
        (to_op(&k), vec![1.0; n])
    }

    #[test]
    fn consistent_singular_system_is_solved_in_the_complement() {
        let (op, ones) = singular_system();
        let null = NullSpace::new(vec![ones.clone()]);
        let mut b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin()).collect();
        null.project(&mut b);
        let out = minres(&op, None, &b, &null, &KrylovOptions::default()).unwrap();
        assert!(out.residual < 1e-9);
        assert!(dot(&out.x, &ones).abs() < 1e-10);
    }

    #[test]
    fn inconsistent_rhs_fails_or_is_projected() {
        let (op, ones) = singular_system();
        let null = NullSpace::new(vec![ones.clone()]);
        let b: Vec<f64> = (0..30).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
        let err = minres(&op, None, &b, &null, &KrylovOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 0, .. }));
        let opts = KrylovOptions {
            project_rhs: true,
            ..Default::default()
        };
        let out = minres(&op, None, &b, &null, &opts).unwrap();
        let mut pb = b.clone();
        null.project(&mut pb);
        let mut r = vec![0.0; 30];
        op.apply(&out.x, &mut r);
        let res: f64 = r.iter().zip(&pb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(res / dot(&b, &b).sqrt() < 1e-9);
    }

    #[test]
    fn iteration_cap_reports_no_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = random_saddle(&mut rng, 60, 20);
        let b = vec![1.0; 80];
        let opts = KrylovOptions {
            tol: 1e-12,
            max_iter: 3,
            project_rhs: false,
        };
        let err = minres(&to_op(&k), None, &b, &NullSpace::default(), &opts).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 3, .. }));
    }
}
