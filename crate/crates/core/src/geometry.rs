//! Hardcore suspensions of balls on a periodic cell.
//!
//! An [`InclusionSet`] is the discrete stand-in for a stationary hardcore
//! point process: centers live on the torus `[0, L)^d`, every ball has the
//! same radius, and distinct balls keep a surface gap strictly larger than
//! `gap`. Sets restricted to a bounded box (see [`restrict_to_box`]) carry a
//! [`Domain::Box`] instead and are no longer periodic.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Torus { length: f64 },
    Box { lo: Point, hi: Point },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorTag {
    Rsa,
    PerturbedLattice,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionSet {
    pub dim: usize,
    pub domain: Domain,
    pub radius: f64,
    pub gap: f64,
    pub centers: Vec<Point>,
    pub seed: u64,
    pub generator: GeneratorTag,
}

/// Volume of the `dim`-dimensional ball of radius `r`.
pub fn ball_volume(dim: usize, r: f64) -> f64 {
    match dim {
        2 => PI * r * r,
        3 => 4.0 / 3.0 * PI * r * r * r,
        _ => panic!("unsupported dimension {dim}"),
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("dimension must be 2 or 3, got {dim}")))
    }
}

/// Minimum-image displacement `b - a` on a torus of side `length`.
pub fn min_image(a: &Point, b: &Point, dim: usize, length: Option<f64>) -> Point {
    let mut d = [0.0; 3];
    for j in 0..dim {
        let mut x = b[j] - a[j];
        if let Some(l) = length {
            x -= l * (x / l).round();
        }
        d[j] = x;
    }
    d
}

pub fn norm(v: &Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl InclusionSet {
    /// A hand-placed periodic configuration of unit balls. No invariant is
    /// checked here; use [`validate`] for that.
    pub fn manual(dim: usize, cell_length: f64, gap: f64, centers: Vec<Point>) -> Result<Self> {
        check_dim(dim)?;
        if !(cell_length > 0.0) {
            return Err(Error::InvalidParams("cell length must be positive".into()));
        }
        Ok(Self {
            dim,
            domain: Domain::Torus { length: cell_length },
            radius: 1.0,
            gap,
            centers,
            seed: 0,
            generator: GeneratorTag::Manual,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn torus_length(&self) -> Option<f64> {
        match self.domain {
            Domain::Torus { length } => Some(length),
            Domain::Box { .. } => None,
        }
    }

    /// Side length of the periodic cell, or of the first axis of the box.
    pub fn cell_length(&self) -> f64 {
        match self.domain {
            Domain::Torus { length } => length,
            Domain::Box { lo, hi } => hi[0] - lo[0],
        }
    }

    pub fn domain_volume(&self) -> f64 {
        match self.domain {
            Domain::Torus { length } => length.powi(self.dim as i32),
            Domain::Box { lo, hi } => (0..self.dim).map(|j| hi[j] - lo[j]).product(),
        }
    }

    pub fn volume_fraction(&self) -> f64 {
        self.len() as f64 * ball_volume(self.dim, self.radius) / self.domain_volume()
    }

    pub fn displacement(&self, from: &Point, to: &Point) -> Point {
        min_image(from, to, self.dim, self.torus_length())
    }

    /// Smallest surface-to-surface distance over all distinct pairs, by a
    /// direct O(n^2) scan. `+inf` for fewer than two balls.
    pub fn min_surface_gap(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.len() {
            for b in a + 1..self.len() {
                let d = norm(&self.displacement(&self.centers[a], &self.centers[b]));
                best = best.min(d - 2.0 * self.radius);
            }
        }
        best
    }

    /// Plain-text form: header `d L delta n_centers seed`, then one center
    /// per line. Floats carry 17 significant digits, so parsing the output
    /// reproduces every value bit for bit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{} {} {} {} {}",
            self.dim,
            fmt17(self.cell_length()),
            fmt17(self.gap),
            self.len(),
            self.seed
        )
        .unwrap();
        for c in &self.centers {
            let line: Vec<String> = c[..self.dim].iter().map(|&x| fmt17(x)).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty input".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: hl + 1,
                message: format!("header needs 5 fields `d L delta n_centers seed`, got {}", fields.len()),
            });
        }
        let perr = |line: usize, what: &str| Error::Parse {
            line: line + 1,
            message: format!("cannot parse {what}"),
        };
        let dim: usize = fields[0].parse().map_err(|_| perr(hl, "d"))?;
        let length: f64 = fields[1].parse().map_err(|_| perr(hl, "L"))?;
        let gap: f64 = fields[2].parse().map_err(|_| perr(hl, "delta"))?;
        let n: usize = fields[3].parse().map_err(|_| perr(hl, "n_centers"))?;
        let seed: u64 = fields[4].parse().map_err(|_| perr(hl, "seed"))?;
        check_dim(dim).map_err(|e| Error::Parse {
            line: hl + 1,
            message: e.to_string(),
        })?;
        let mut centers = Vec::with_capacity(n);
        for (ln, line) in lines {
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != dim {
                return Err(Error::Parse {
                    line: ln + 1,
                    message: format!("expected {dim} coordinates, got {}", vals.len()),
                });
            }
            let mut c = [0.0; 3];
            for (j, v) in vals.iter().enumerate() {
                c[j] = v.parse().map_err(|_| perr(ln, "coordinate"))?;
            }
            centers.push(c);
        }
        if centers.len() != n {
            return Err(Error::Parse {
                line: hl + 1,
                message: format!("header announces {n} centers, found {}", centers.len()),
            });
        }
        let mut set = Self::manual(dim, length, gap, centers)?;
        set.seed = seed;
        Ok(set)
    }
}

pub(crate) fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Debug)]
pub struct RsaParams {
    pub dim: usize,
    pub cell_length: f64,
    pub target_fraction: f64,
    pub gap: f64,
    pub seed: u64,
    pub max_attempts: usize,
    /// Upper bound on `target_fraction`; `None` picks 0.30 in 2D and 0.25 in 3D.
    pub fraction_cap: Option<f64>,
}

impl RsaParams {
    pub fn new(dim: usize, cell_length: f64, target_fraction: f64, gap: f64, seed: u64) -> Self {
        Self {
            dim,
            cell_length,
            target_fraction,
            gap,
            seed,
            max_attempts: 100_000,
            fraction_cap: None,
        }
    }
}

/// Random sequential addition of unit balls on the torus until the ball
/// count `round(lambda L^d / |B_1|)` is reached.
pub fn rsa_generate(p: &RsaParams) -> Result<InclusionSet> {
    check_dim(p.dim)?;
    let cap = p.fraction_cap.unwrap_or(if p.dim == 2 { 0.30 } else { 0.25 });
    if !(p.cell_length > 0.0) {
        return Err(Error::InvalidParams("cell length must be positive".into()));
    }
    if !(0.0..1.0).contains(&p.target_fraction) || p.target_fraction > cap {
        return Err(Error::InvalidParams(format!(
            "target fraction {} outside [0, {cap}]",
            p.target_fraction
        )));
    }
    if !(p.gap > 0.0) {
        return Err(Error::InvalidParams(format!("gap {} must be positive", p.gap)));
    }
    let l = p.cell_length;
    let target = (p.target_fraction * l.powi(p.dim as i32) / ball_volume(p.dim, 1.0)).round() as usize;
    let min_dist = 2.0 + p.gap;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut centers: Vec<Point> = Vec::with_capacity(target);
    let mut rejections = 0usize;
    while centers.len() < target {
        let mut c = [0.0; 3];
        for x in c.iter_mut().take(p.dim) {
            *x = rng.gen::<f64>() * l;
        }
        let ok = centers
            .iter()
            .all(|o| norm(&min_image(o, &c, p.dim, Some(l))) > min_dist);
        if ok {
            centers.push(c);
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= p.max_attempts {
                return Err(Error::JammingFailure {
                    attempts: rejections,
                    placed: centers.len(),
                    target,
                });
            }
        }
    }
    Ok(InclusionSet {
        dim: p.dim,
        domain: Domain::Torus { length: l },
        radius: 1.0,
        gap: p.gap,
        centers,
        seed: p.seed,
        generator: GeneratorTag::Rsa,
    })
}

#[derive(Clone, Debug)]
pub struct LatticeParams {
    pub dim: usize,
    pub cell_length: f64,
    /// Lattice spacing per axis; only the first `dim` entries are used.
    pub spacing: [f64; 3],
    pub jitter: f64,
    pub gap: f64,
    pub seed: u64,
}

impl LatticeParams {
    pub fn square(dim: usize, cell_length: f64, spacing: f64, jitter: f64, gap: f64, seed: u64) -> Self {
        Self {
            dim,
            cell_length,
            spacing: [spacing; 3],
            jitter,
            gap,
            seed,
        }
    }
}

/// One ball per lattice cell, displaced uniformly in `[-jitter, jitter]^d`.
/// Each spacing has to divide the cell length.
pub fn perturbed_lattice_generate(p: &LatticeParams) -> Result<InclusionSet> {
    check_dim(p.dim)?;
    if !(p.jitter >= 0.0) || !(p.gap > 0.0) {
        return Err(Error::InvalidParams("jitter must be >= 0 and gap positive".into()));
    }
    let mut counts = [1usize; 3];
    for j in 0..p.dim {
        let s = p.spacing[j];
        let need = 2.0 + p.gap + 2.0 * p.jitter;
        if !(s >= need) {
            return Err(Error::InvalidParams(format!(
                "spacing {s} < 2 + gap + 2 jitter = {need}"
            )));
        }
        let m = (p.cell_length / s).round();
        if m < 1.0 || (m * s - p.cell_length).abs() > 1e-9 * p.cell_length {
            return Err(Error::InvalidParams(format!(
                "spacing {s} does not divide cell length {}",
                p.cell_length
            )));
        }
        counts[j] = m as usize;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut centers = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let idx = [i, j, k];
                let mut c = [0.0; 3];
                for a in 0..p.dim {
                    let offset = if p.jitter > 0.0 {
                        p.jitter * (2.0 * rng.gen::<f64>() - 1.0)
                    } else {
                        0.0
                    };
                    c[a] = (idx[a] as f64 + 0.5) * p.spacing[a] + offset;
                }
                centers.push(c);
            }
        }
    }
    Ok(InclusionSet {
        dim: p.dim,
        domain: Domain::Torus { length: p.cell_length },
        radius: 1.0,
        gap: p.gap,
        centers,
        seed: p.seed,
        generator: GeneratorTag::PerturbedLattice,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub min_gap: f64,
    pub volume_fraction: f64,
    pub gap_ok: bool,
    pub fraction_ok: bool,
    pub centers_in_domain: bool,
    /// Boxed sets only: every ball keeps `gap` away from the box boundary.
    pub boundary_clearance_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.gap_ok && self.fraction_ok && self.centers_in_domain && self.boundary_clearance_ok
    }
}

pub fn validate(set: &InclusionSet) -> ValidationReport {
    let min_gap = set.min_surface_gap();
    let volume_fraction = set.volume_fraction();
    let (centers_in_domain, boundary_clearance_ok) = match set.domain {
        Domain::Torus { length } => (
            set.centers
                .iter()
                .all(|c| c[..set.dim].iter().all(|&x| (0.0..length).contains(&x))),
            true,
        ),
        Domain::Box { lo, hi } => {
            let inside = set
                .centers
                .iter()
                .all(|c| (0..set.dim).all(|j| c[j] >= lo[j] && c[j] <= hi[j]));
            let reach = set.radius + set.gap;
            let clear = set
                .centers
                .iter()
                .all(|c| (0..set.dim).all(|j| c[j] - reach >= lo[j] && c[j] + reach <= hi[j]));
            (inside, clear)
        }
    };
    ValidationReport {
        min_gap,
        volume_fraction,
        gap_ok: min_gap > set.gap,
        fraction_ok: (0.0..1.0).contains(&volume_fraction),
        centers_in_domain,
        boundary_clearance_ok,
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Point,
    pub hi: Point,
}

impl Aabb {
    pub fn unit() -> Self {
        Self {
            lo: [0.0; 3],
            hi: [1.0; 3],
        }
    }
}

/// The `eps`-rescaled copy of the periodically tiled set, keeping exactly
/// the balls whose `eps(1 + gap)`-neighbourhood lies inside `bx`.
///
/// The result has radius `eps`, gap `eps * gap` and a [`Domain::Box`].
/// Balls are listed by periodic image (lexicographic, last axis slowest),
/// then by index in the source set.
pub fn restrict_to_box(set: &InclusionSet, eps: f64, bx: &Aabb) -> Result<InclusionSet> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParams("eps must be positive".into()));
    }
    let dim = set.dim;
    let reach = eps * set.radius * (1.0 + set.gap / set.radius);
    let fits = |c: &Point| (0..dim).all(|j| c[j] - reach >= bx.lo[j] && c[j] + reach <= bx.hi[j]);
    let mut centers = Vec::new();
    match set.domain {
        Domain::Torus { length } => {
            let period = eps * length;
            let mut lo_m = [0i64; 3];
            let mut hi_m = [0i64; 3];
            for j in 0..dim {
                lo_m[j] = ((bx.lo[j] - period) / period).floor() as i64;
                hi_m[j] = (bx.hi[j] / period).ceil() as i64;
            }
            for m2 in lo_m[2]..=hi_m[2] {
                for m1 in lo_m[1]..=hi_m[1] {
                    for m0 in lo_m[0]..=hi_m[0] {
                        let m = [m0, m1, m2];
                        for x in &set.centers {
                            let mut c = [0.0; 3];
                            for j in 0..dim {
                                c[j] = eps * (x[j] + length * m[j] as f64);
                            }
                            if fits(&c) {
                                centers.push(c);
                            }
                        }
                    }
                }
            }
        }
        Domain::Box { .. } => {
            for x in &set.centers {
                let mut c = [0.0; 3];
                for j in 0..dim {
                    c[j] = eps * x[j];
                }
                if fits(&c) {
                    centers.push(c);
                }
            }
        }
    }
    Ok(InclusionSet {
        dim,
        domain: Domain::Box {
            lo: bx.lo,
            hi: bx.hi,
        },
        radius: eps * set.radius,
        gap: eps * set.gap,
        centers,
        seed: set.seed,
        generator: set.generator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_min_gap(set: &InclusionSet) -> f64 {
        let l = set.cell_length();
        let mut best = f64::INFINITY;
        for a in 0..set.len() {
            for b in 0..set.len() {
                if a == b {
                    continue;
                }
                // all 3^d images, independent of the minimum-image helper
                for s0 in -1..=1 {
                    for s1 in -1..=1 {
                        for s2 in -1..=1 {
                            if set.dim == 2 && s2 != 0 {
                                continue;
                            }
                            let s = [s0, s1, s2];
                            let mut d2 = 0.0;
                            for j in 0..set.dim {
                                let x = set.centers[b][j] + s[j] as f64 * l - set.centers[a][j];
                                d2 += x * x;
                            }
                            best = best.min(d2.sqrt() - 2.0);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn rsa_zero_fraction_is_empty() {
        let set = rsa_generate(&RsaParams::new(2, 32.0, 0.0, 0.1, 7)).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.volume_fraction(), 0.0);
    }

    #[test]
    fn rsa_count_and_gap() {
        let set = rsa_generate(&RsaParams::new(2, 32.0, 0.10, 0.1, 7)).unwrap();
        assert_eq!(set.len(), 33);
        assert!(brute_min_gap(&set) > 2.1 - 2.0);
        assert!((set.volume_fraction() - 0.10).abs() <= ball_volume(2, 1.0) / 1024.0);
        assert!(validate(&set).passed());
    }

    #[test]
    fn rsa_small_torus_large_gap() {
        // 4x4 torus with gap 1.5: at most a couple of balls fit
        match rsa_generate(&RsaParams::new(2, 4.0, 0.25, 1.5, 1)) {
            Ok(set) => {
                assert!((1..=2).contains(&set.len()));
                assert!(brute_min_gap(&set) > 1.5);
            }
            Err(Error::JammingFailure { .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn rsa_rejects_bad_params() {
        assert!(matches!(
            rsa_generate(&RsaParams::new(2, 4.0, 0.25, -0.1, 1)),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            rsa_generate(&RsaParams::new(2, 32.0, 0.31, 0.1, 1)),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn rsa_jams() {
        let mut p = RsaParams::new(2, 8.0, 0.30, 0.9, 3);
        p.max_attempts = 50;
        assert!(matches!(rsa_generate(&p), Err(Error::JammingFailure { .. })));
    }

    #[test]
    fn rsa_is_reproducible() {
        let p = RsaParams::new(3, 12.0, 0.15, 0.2, 99);
        assert_eq!(rsa_generate(&p).unwrap(), rsa_generate(&p).unwrap());
    }

    #[test]
    fn lattice_examples() {
        let exact = perturbed_lattice_generate(&LatticeParams::square(2, 32.0, 4.0, 0.0, 0.1, 0)).unwrap();
        assert_eq!(exact.len(), 64);
        assert_eq!(exact.centers[0], [2.0, 2.0, 0.0]);
        assert_eq!(exact.centers[9], [6.0, 6.0, 0.0]);

        let jit = perturbed_lattice_generate(&LatticeParams::square(2, 32.0, 4.0, 0.4, 0.1, 3)).unwrap();
        assert_eq!(jit.len(), 64);
        assert!(brute_min_gap(&jit) >= 2.1 - 2.0);

        let bad = perturbed_lattice_generate(&LatticeParams::square(2, 32.0, 3.0, 0.5, 0.2, 0));
        assert!(matches!(bad, Err(Error::InvalidParams(_))));
    }

    #[test]
    fn validate_examples() {
        let empty = InclusionSet::manual(2, 32.0, 0.5, vec![]).unwrap();
        let r = validate(&empty);
        assert!(r.passed());
        assert_eq!(r.volume_fraction, 0.0);
        assert_eq!(r.min_gap, f64::INFINITY);

        let ok = InclusionSet::manual(2, 32.0, 0.5, vec![[0.0; 3], [3.0, 0.0, 0.0]]).unwrap();
        let r = validate(&ok);
        assert!(r.passed());
        assert!((r.min_gap - 1.0).abs() < 1e-15);

        let close = InclusionSet::manual(2, 32.0, 0.5, vec![[0.0; 3], [2.3, 0.0, 0.0]]).unwrap();
        let r = validate(&close);
        assert!(!r.passed());
        assert!(!r.gap_ok);
        assert!((r.min_gap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn validate_uses_minimum_image() {
        let set = InclusionSet::manual(2, 10.0, 0.5, vec![[0.5, 5.0, 0.0], [9.0, 5.0, 0.0]]).unwrap();
        assert!((validate(&set).min_gap - (1.5 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn restrict_examples() {
        let one = InclusionSet::manual(2, 100.0, 0.1, vec![[5.0, 5.0, 0.0]]).unwrap();
        let kept = restrict_to_box(&one, 0.1, &Aabb::unit()).unwrap();
        assert_eq!(kept.len(), 1);
        assert!((kept.centers[0][0] - 0.5).abs() < 1e-15);
        assert!((kept.radius - 0.1).abs() < 1e-15);

        let edge = InclusionSet::manual(2, 100.0, 0.1, vec![[0.5, 5.0, 0.0]]).unwrap();
        assert!(restrict_to_box(&edge, 0.1, &Aabb::unit()).unwrap().is_empty());

        // eps so large that no ball fits
        assert!(restrict_to_box(&one, 2.0, &Aabb::unit()).unwrap().is_empty());
    }

    #[test]
    fn restrict_tiles_periodic_images() {
        let set = InclusionSet::manual(2, 4.0, 0.2, vec![[2.0, 2.0, 0.0]]).unwrap();
        // period eps*L = 0.25 -> 4x4 tiles in the unit box
        let r = restrict_to_box(&set, 1.0 / 16.0, &Aabb::unit()).unwrap();
        assert_eq!(r.len(), 16);
        assert!(validate(&r).passed());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let set = rsa_generate(&RsaParams::new(2, 17.3, 0.12, 0.25, 42)).unwrap();
        let back = InclusionSet::from_text(&set.to_text()).unwrap();
        assert_eq!(back.dim, set.dim);
        assert_eq!(back.cell_length().to_bits(), set.cell_length().to_bits());
        assert_eq!(back.gap.to_bits(), set.gap.to_bits());
        assert_eq!(back.seed, set.seed);
        for (a, b) in back.centers.iter().zip(&set.centers) {
            for j in 0..2 {
                assert_eq!(a[j].to_bits(), b[j].to_bits());
            }
        }
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = InclusionSet::from_text("2 10 0.1 2 5\n1 1\n3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = InclusionSet::from_text("2 10 0.1 5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
