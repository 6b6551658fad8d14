//! Config-driven runs: generate, solve, estimate, write artifacts.
//!
//! Every run writes its artifacts plus `manifest.json`, which echoes the
//! resolved configuration and the SHA-256 of each artifact. Artifacts do
//! not depend on timing or thread scheduling, so the same configuration
//! reproduces them byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, Mode, RunConfig};
use crate::effective::{dilute_fit, ensemble_row, single_inclusion_cell, solve_cell, CellSolve, EffectiveCoefficients};
use crate::error::Error;
use crate::geometry::validate;
use crate::twoscale::{two_scale_ladder, LadderParams};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Module { context: String, source: Error },
    #[error("{} invariant check(s) failed: {}", .0.len(), .0.join("; "))]
    Invariant(Vec<String>),
    #[error("cannot write artifacts: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for configuration problems, 3 for solver and other module
    /// failures, 4 for failed invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Module { source, .. } => match source {
                Error::InvalidParams(_) | Error::ResolutionTooCoarse { .. } | Error::Parse { .. } => 2,
                _ => 3,
            },
            RunError::Invariant(_) => 4,
            RunError::Io(_) => 3,
        }
    }
}

fn ctx<T>(r: crate::Result<T>, context: impl FnOnce() -> String) -> Result<T, RunError> {
    r.map_err(|source| RunError::Module {
        context: context(),
        source,
    })
}

/// One line of the invariant suite.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub artifacts: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

/// Runs `f` over `items` on a fixed pool of threads. Results come back
/// in input order whatever the completion order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every task ran"))
        .collect()
}

struct Writer {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, content: String) -> Result<(), RunError> {
        std::fs::write(self.dir.join(name), &content)?;
        self.files.push((name.to_string(), hex(&Sha256::digest(content.as_bytes()))));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable summary");
        s.push('\n');
        self.put(name, s)
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<Vec<PathBuf>, RunError> {
        #[derive(Serialize)]
        struct Entry<'a> {
            file: &'a str,
            sha256: &'a str,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            version: &'a str,
            config: &'a RunConfig,
            artifacts: Vec<Entry<'a>>,
        }
        let files = std::mem::take(&mut self.files);
        let m = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            artifacts: files
                .iter()
                .map(|(f, h)| Entry {
                    file: f,
                    sha256: h,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&m).expect("serializable manifest");
        s.push('\n');
        std::fs::write(self.dir.join("manifest.json"), s)?;
        let mut out: Vec<PathBuf> = files.iter().map(|(f, _)| self.dir.join(f)).collect();
        out.push(self.dir.join("manifest.json"));
        Ok(out)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Header of the coefficient table.
pub fn coefficient_header(m: usize) -> String {
    let mut s = String::from("seed,L,N,lambda");
    for i in 1..=m {
        for j in 1..=m {
            let _ = write!(s, ",B_{i}{j}");
        }
    }
    for i in 1..=m {
        let _ = write!(s, ",b_{i}");
    }
    s.push_str(",res_force,res_torque,iters\n");
    s
}

pub fn coefficient_row(c: &EffectiveCoefficients) -> String {
    let m = c.b_matrix.nrows();
    let mut s = format!("{},{},{},{}", c.meta.seed, c.meta.cell_length, c.meta.n, c.lambda);
    for i in 0..m {
        for j in 0..m {
            let _ = write!(s, ",{}", c.b_matrix[(i, j)]);
        }
    }
    for b in &c.b_vector {
        let _ = write!(s, ",{b}");
    }
    let _ = writeln!(s, ",{},{},{}", c.res_force, c.res_torque, c.iterations);
    s
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    cell_length: f64,
    n: usize,
    lambda: f64,
    inclusions: usize,
    eigenvalues: Vec<f64>,
    shear_modulus: f64,
    anisotropy: f64,
    asymmetry: f64,
    b: Vec<f64>,
    b_surface: Vec<f64>,
    z_identity_error: f64,
    energy_identity: f64,
    mean_grad: f64,
}

fn summary(cs: &CellSolve) -> SeedSummary {
    let c = &cs.coefficients;
    SeedSummary {
        seed: c.meta.seed,
        cell_length: c.meta.cell_length,
        n: c.meta.n,
        lambda: c.lambda,
        inclusions: cs.labels.n_inclusions(),
        eigenvalues: c.eigenvalues(),
        shear_modulus: c.shear_modulus(),
        anisotropy: c.anisotropy(),
        asymmetry: c.asymmetry(),
        b: c.b_vector.clone(),
        b_surface: c.b_surface.clone(),
        z_identity_error: c.z_identity_error(),
        energy_identity: max_of(cs, |r| r.energy_identity),
        mean_grad: max_of(cs, |r| r.mean_grad),
    }
}

fn max_of(cs: &CellSolve, f: impl Fn(&crate::stokes::Residuals) -> f64) -> f64 {
    cs.correctors.iter().map(|c| f(&c.residuals)).fold(0.0, f64::max)
}

/// Generates and solves every seed of a cell size, in parallel.
fn solve_seeds(cfg: &RunConfig, cell_length: f64) -> Result<Vec<CellSolve>, RunError> {
    let opts = cfg.solver_options();
    let n = cfg.resolution_for(cell_length);
    par_map(&cfg.geometry.seeds, |&seed| {
        let set = ctx(cfg.generate(cell_length, seed), || format!("generating seed {seed}"))?;
        log::info!("seed {seed}: {} inclusions, L = {cell_length}, N = {n}", set.len());
        ctx(solve_cell(&set, n, &opts), || format!("solving seed {seed}"))
    })
    .into_iter()
    .collect()
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    cfg.check()?;
    let mut w = Writer::new(&cfg.output.dir)?;
    let mut checks = Vec::new();
    match cfg.mode {
        Mode::Effective => run_effective(cfg, &mut w)?,
        Mode::Ensemble => run_ensemble(cfg, &mut w)?,
        Mode::Dilute => run_dilute(cfg, &mut w)?,
        Mode::Twoscale => run_twoscale(cfg, &mut w)?,
        Mode::Validate => checks = run_validate(cfg, &mut w)?,
    }
    let artifacts = w.finish(cfg)?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    if !failed.is_empty() {
        return Err(RunError::Invariant(failed));
    }
    Ok(RunOutcome { artifacts, checks })
}

fn cell_length(cfg: &RunConfig) -> f64 {
    cfg.geometry.cell_length.expect("checked by RunConfig::check")
}

fn run_effective(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let solves = solve_seeds(cfg, cell_length(cfg))?;
    let m = solves[0].coefficients.b_matrix.nrows();
    let mut csv = coefficient_header(m);
    for s in &solves {
        csv.push_str(&coefficient_row(&s.coefficients));
    }
    w.put("effective.csv", csv)?;
    w.json("effective.json", &solves.iter().map(summary).collect::<Vec<_>>())
}

fn run_ensemble(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let lengths = if cfg.ensemble.cell_lengths.is_empty() {
        vec![cell_length(cfg)]
    } else {
        cfg.ensemble.cell_lengths.clone()
    };
    let mut rows = Vec::new();
    let mut all = String::new();
    let mut table = String::new();
    for &l in &lengths {
        let solves = solve_seeds(cfg, l)?;
        let m = solves[0].coefficients.b_matrix.nrows();
        if all.is_empty() {
            all = coefficient_header(m);
            table.push_str("L,seeds,mean_shear,std_shear,mean_b_norm,std_b_norm");
            for i in 1..=m {
                for j in 1..=m {
                    let _ = write!(table, ",mean_B_{i}{j},std_B_{i}{j}");
                }
            }
            for i in 1..=m {
                let _ = write!(table, ",mean_b_{i},std_b_{i}");
            }
            table.push('\n');
        }
        for s in &solves {
            all.push_str(&coefficient_row(&s.coefficients));
        }
        let samples: Vec<EffectiveCoefficients> = solves.iter().map(|s| s.coefficients.clone()).collect();
        let worst = solves.iter().map(|s| max_of(s, |r| r.mean_grad)).fold(0.0, f64::max);
        let row = ctx(ensemble_row(&samples, worst), || format!("ensemble statistics at L = {l}"))?;
        let _ = write!(
            table,
            "{},{},{},{},{},{}",
            row.cell_length, row.seeds, row.mean_shear, row.std_shear, row.mean_b_norm, row.std_b_norm
        );
        for (a, s) in row.mean_b.iter().zip(&row.std_b) {
            let _ = write!(table, ",{a},{s}");
        }
        for (a, s) in row.mean_bvec.iter().zip(&row.std_bvec) {
            let _ = write!(table, ",{a},{s}");
        }
        table.push('\n');
        rows.push(row);
    }
    w.put("effective.csv", all)?;
    w.put("ensemble.csv", table)?;
    w.json("ensemble.json", &rows)
}

/// Oracle value of the first-order coefficient: 2 in 2D, 5/2 in 3D.
pub fn einstein_coefficient(dim: usize) -> f64 {
    if dim == 2 {
        2.0
    } else {
        2.5
    }
}

/// Center of the single ball of a dilute cell, as a fraction of the
/// side, drawn from `seed`.
pub fn dilute_center(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.gen(), rng.gen(), rng.gen()]
}

fn run_dilute(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let dim = cfg.geometry.dim;
    let opts = cfg.solver_options();
    let tasks: Vec<(u64, f64)> = cfg
        .geometry
        .seeds
        .iter()
        .flat_map(|&s| cfg.dilute.lambdas.iter().map(move |&l| (s, l)))
        .collect();
    let results = par_map(&tasks, |&(seed, lambda)| {
        let set = ctx(single_inclusion_cell(dim, lambda, dilute_center(seed), seed), || {
            format!("dilute cell lambda = {lambda}")
        })?;
        let cs = ctx(solve_cell(&set, cfg.grid.n, &opts), || {
            format!("dilute solve seed {seed}, lambda = {lambda}")
        })?;
        Ok::<_, RunError>(cs.coefficients)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("seed,lambda,L,N,mu,excess\n");
    let mut points = Vec::new();
    for (chunk, &seed) in results.chunks(cfg.dilute.lambdas.len()).zip(&cfg.geometry.seeds) {
        let mut pts = Vec::new();
        for c in chunk {
            let mu = c.shear_modulus();
            let _ = writeln!(csv, "{seed},{},{},{},{mu},{}", c.lambda, c.meta.cell_length, c.meta.n, mu - 1.0);
            pts.push((c.lambda, mu - 1.0));
        }
        points.push(pts);
    }
    let fit = dilute_fit(points);
    #[derive(Serialize)]
    struct Out<'a> {
        fit: &'a crate::effective::DiluteFit,
        oracle: f64,
        relative_deviation: f64,
    }
    let oracle = einstein_coefficient(dim);
    w.put("dilute.csv", csv)?;
    w.json(
        "dilute.json",
        &Out {
            fit: &fit,
            oracle,
            relative_deviation: (fit.slope - oracle).abs() / oracle,
        },
    )
}

fn run_twoscale(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let seed = cfg.geometry.seeds[0];
    let opts = cfg.solver_options();
    let set = ctx(cfg.generate(cell_length(cfg), seed), || format!("generating seed {seed}"))?;
    let cell = ctx(solve_cell(&set, cfg.grid.n, &opts), || format!("solving cell seed {seed}"))?;
    let params = LadderParams {
        etas: cfg.twoscale.etas.clone(),
        forcing: cfg.twoscale.forcing,
        opts,
    };
    let report = ctx(two_scale_ladder(&set, &cell, &params), || "two-scale ladder".into())?;
    w.put("twoscale.csv", report.to_csv())?;
    #[derive(Serialize)]
    struct Out<'a> {
        cell: SeedSummary,
        report: &'a crate::twoscale::TwoScaleReport,
    }
    w.json(
        "twoscale.json",
        &Out {
            cell: summary(&cell),
            report: &report,
        },
    )
}

fn check(checks: &mut Vec<Check>, name: String, passed: bool, detail: String) {
    checks.push(Check { name, passed, detail });
}

/// The invariant suite of one solved cell.
pub fn cell_checks(cs: &CellSolve, tol: f64) -> Vec<Check> {
    let c = &cs.coefficients;
    let seed = c.meta.seed;
    let mut out = Vec::new();
    let ev = c.eigenvalues();
    check(
        &mut out,
        format!("seed {seed}: coercivity"),
        ev[0] >= 1.0 - 1e-6,
        format!("smallest eigenvalue {:.12}", ev[0]),
    );
    check(
        &mut out,
        format!("seed {seed}: symmetry"),
        c.asymmetry() < 1e-7,
        format!("relative asymmetry {:.3e}", c.asymmetry()),
    );
    let energy = max_of(cs, |r| r.energy_identity);
    check(
        &mut out,
        format!("seed {seed}: energy identity"),
        energy < 1e-8,
        format!("relative mismatch {energy:.3e}"),
    );
    let balance = c.res_force.max(c.res_torque);
    check(
        &mut out,
        format!("seed {seed}: force/torque balance"),
        balance < 10.0 * tol,
        format!("largest relative residual {balance:.3e}"),
    );
    if cs.labels.n_inclusions() == 0 {
        let m = c.b_matrix.nrows();
        let err = (&c.b_matrix - nalgebra::DMatrix::identity(m, m)).amax();
        check(
            &mut out,
            format!("seed {seed}: B = Id without inclusions"),
            err < 1e-9,
            format!("max entry error {err:.3e}"),
        );
        check(
            &mut out,
            format!("seed {seed}: b = 0 without inclusions"),
            c.b_vector.iter().all(|&x| x == 0.0),
            format!("{:?}", c.b_vector),
        );
    } else {
        let h = cs.labels.grid.h;
        let z = c.z_identity_error();
        check(
            &mut out,
            format!("seed {seed}: Z identity"),
            z < 5.0 * h,
            format!("relative error {z:.3e} vs 5h = {:.3e}", 5.0 * h),
        );
    }
    out
}

fn run_validate(cfg: &RunConfig, w: &mut Writer) -> Result<Vec<Check>, RunError> {
    let l = cell_length(cfg);
    let mut checks = Vec::new();
    for &seed in &cfg.geometry.seeds {
        let set = ctx(cfg.generate(l, seed), || format!("generating seed {seed}"))?;
        let rep = validate(&set);
        check(
            &mut checks,
            format!("seed {seed}: geometry"),
            rep.passed(),
            format!("min gap {:.6}", set.min_surface_gap()),
        );
    }
    for cs in solve_seeds(cfg, l)? {
        checks.extend(cell_checks(&cs, cfg.solver.tol));
    }
    let mut txt = String::new();
    for c in &checks {
        let _ = writeln!(txt, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    w.put("validate.txt", txt)?;
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..50).collect();
        let ys = par_map(&xs, |x| {
            std::thread::sleep(std::time::Duration::from_micros((50 - x) * 20));
            x * x
        });
        assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn header_lists_all_entries() {
        assert_eq!(
            coefficient_header(2),
            "seed,L,N,lambda,B_11,B_12,B_21,B_22,b_1,b_2,res_force,res_torque,iters\n"
        );
    }

    #[test]
    fn exit_codes() {
        let cfg_err = RunError::Config(ConfigError {
            key: Some("grid.n".into()),
            line: None,
            message: "missing".into(),
        });
        assert_eq!(cfg_err.exit_code(), 2);
        let solver = RunError::Module {
            context: "x".into(),
            source: Error::NoConvergence {
                iterations: 3,
                residual: 1.0,
            },
        };
        assert_eq!(solver.exit_code(), 3);
        assert_eq!(RunError::Invariant(vec!["a".into()]).exit_code(), 4);
    }

    #[test]
    fn dilute_centers_are_seeded() {
        assert_eq!(dilute_center(3), dilute_center(3));
        assert_ne!(dilute_center(3), dilute_center(4));
        assert!(dilute_center(5).iter().all(|x| (0.0..1.0).contains(x)));
    }
}
