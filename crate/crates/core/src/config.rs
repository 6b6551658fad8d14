//! Run configuration, read from TOML.
//!
//! ```toml
//! mode = "effective"          # effective | dilute | ensemble | twoscale | validate
//!
//! [geometry]
//! dim = 2
//! cell_length = 32.0
//! lambda = 0.15
//! gap = 0.2
//! generator = "rsa"           # rsa | lattice
//! seeds = [0, 1, 2, 3]
//! # lattice only
//! spacing = [4.0, 2.5]
//! jitter = 0.1
//!
//! [grid]
//! n = 128
//!
//! [solver]                    # optional
//! tol = 1e-8
//! max_iter = 20000
//! preconditioner = "blockdiag"
//!
//! [output]                    # optional
//! dir = "out"
//!
//! [dilute]                    # optional
//! lambdas = [0.005, 0.01, 0.02]
//!
//! [ensemble]                  # optional; defaults to geometry.cell_length
//! cell_lengths = [16.0, 32.0, 64.0]   # same h = cell_length / n for all
//!
//! [twoscale]                  # optional
//! etas = [0.25, 0.125, 0.0625]
//! forcing = { kind = "smooth" }   # or { kind = "sedimentation", g = [0.0, -1.0, 0.0] }
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::geometry::{perturbed_lattice_generate, rsa_generate, InclusionSet, LatticeParams, RsaParams};
use crate::stokes::{Preconditioner, SolverOptions};
use crate::twoscale::Forcing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Effective,
    Dilute,
    Ensemble,
    Twoscale,
    Validate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Rsa,
    Lattice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub dim: usize,
    #[serde(default)]
    pub cell_length: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    pub gap: f64,
    #[serde(default = "default_generator")]
    pub generator: Generator,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub spacing: Option<Vec<f64>>,
    #[serde(default)]
    pub jitter: Option<f64>,
}

fn default_generator() -> Generator {
    Generator::Rsa
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default = "default_pre")]
    pub preconditioner: Preconditioner,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_pre() -> Preconditioner {
    Preconditioner::BlockDiag
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: None,
            preconditioner: default_pre(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiluteConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.005, 0.01, 0.02]
}

impl Default for DiluteConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub cell_lengths: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoScaleConfig {
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    #[serde(default = "default_forcing")]
    pub forcing: Forcing,
}

fn default_etas() -> Vec<f64> {
    vec![0.25, 0.125, 0.0625]
}

fn default_forcing() -> Forcing {
    Forcing::Smooth
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        Self {
            etas: default_etas(),
            forcing: default_forcing(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub geometry: GeometryConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub dilute: DiluteConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub twoscale: TwoScaleConfig,
}

/// A configuration problem, with the offending key and line when known.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("config error{}{}: {message}", key.as_ref().map(|k| format!(" at `{k}`")).unwrap_or_default(), line.map(|l| format!(" (line {l})")).unwrap_or_default())]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: Some(key.into()),
        line: None,
        message: message.into(),
    }
}

/// Pulls the field name out of serde's "missing field `x`" and "unknown
/// field `x`" messages.
fn field_in(message: &str) -> Option<String> {
    for pat in ["missing field `", "unknown field `"] {
        if let Some(pos) = message.find(pat) {
            let rest = &message[pos + pat.len()..];
            return rest.find('`').map(|end| rest[..end].to_string());
        }
    }
    None
}

/// Dotted path of the table whose header or body holds byte `offset`.
fn table_at(text: &str, offset: usize) -> Option<String> {
    let offset = offset.min(text.len());
    let end = text[offset..].find('\n').map_or(text.len(), |i| offset + i);
    let mut table = None;
    for line in text[..end].lines() {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            table = Some(t.trim_matches(|c| c == '[' || c == ']').trim().to_string());
        }
    }
    table
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let message = e.message().to_string();
            let table = e.span().and_then(|s| table_at(text, s.start));
            let key = field_in(&message).map(|f| match table {
                Some(t) => format!("{t}.{f}"),
                None => f,
            });
            ConfigError { key, line, message }
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            key: None,
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// Parameter bounds of every stage, checked before anything runs.
    pub fn check(&self) -> Result<(), ConfigError> {
        let g = &self.geometry;
        if g.dim != 2 && g.dim != 3 {
            return Err(bad("geometry.dim", format!("must be 2 or 3, got {}", g.dim)));
        }
        if !(g.gap > 0.0) {
            return Err(bad("geometry.gap", "must be positive"));
        }
        if g.seeds.is_empty() {
            return Err(bad("geometry.seeds", "need at least one seed"));
        }
        let mut sorted = g.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != g.seeds.len() {
            return Err(bad("geometry.seeds", "seeds must be distinct"));
        }
        if let Some(l) = g.cell_length {
            if !(l > 0.0) {
                return Err(bad("geometry.cell_length", "must be positive"));
            }
        }
        if let Some(l) = g.lambda {
            let cap = if g.dim == 2 { 0.30 } else { 0.25 };
            if !(0.0..=cap).contains(&l) {
                return Err(bad("geometry.lambda", format!("must lie in [0, {cap}]")));
            }
        }
        if self.mode != Mode::Dilute {
            if g.cell_length.is_none() && !(self.mode == Mode::Ensemble && !self.ensemble.cell_lengths.is_empty()) {
                return Err(bad("geometry.cell_length", "missing"));
            }
            match g.generator {
                Generator::Rsa => {
                    if g.lambda.is_none() {
                        return Err(bad("geometry.lambda", "missing (needed by the rsa generator)"));
                    }
                }
                Generator::Lattice => {
                    match &g.spacing {
                        None => return Err(bad("geometry.spacing", "missing (needed by the lattice generator)")),
                        Some(s) if s.len() != g.dim || s.iter().any(|x| !(*x > 0.0)) => {
                            return Err(bad("geometry.spacing", format!("need {} positive entries", g.dim)));
                        }
                        _ => {}
                    }
                    if !g.jitter.is_some_and(|j| j >= 0.0) {
                        return Err(bad("geometry.jitter", "missing or negative"));
                    }
                }
            }
        }
        if self.grid.n < 4 {
            return Err(bad("grid.n", "need at least 4 cells per axis"));
        }
        if !(self.solver.tol > 0.0 && self.solver.tol < 1.0) {
            return Err(bad("solver.tol", "must lie in (0, 1)"));
        }
        if self.solver.max_iter == Some(0) {
            return Err(bad("solver.max_iter", "must be positive"));
        }
        match self.mode {
            Mode::Dilute => {
                if self.dilute.lambdas.is_empty() || self.dilute.lambdas.iter().any(|l| !(*l > 0.0 && *l < 0.5)) {
                    return Err(bad("dilute.lambdas", "need fractions in (0, 0.5)"));
                }
            }
            Mode::Ensemble => {
                if g.seeds.len() < 2 {
                    return Err(bad("geometry.seeds", "ensembles need at least 2 seeds"));
                }
                if self.ensemble.cell_lengths.iter().any(|l| !(*l > 0.0)) {
                    return Err(bad("ensemble.cell_lengths", "must be positive"));
                }
                for &l in &self.ensemble.cell_lengths {
                    let n = self.grid.n as f64 * l / self.reference_length();
                    if (n - n.round()).abs() > 1e-9 * n {
                        return Err(bad(
                            "ensemble.cell_lengths",
                            format!("L = {l} is not a whole number of cells of the reference grid"),
                        ));
                    }
                }
            }
            Mode::Twoscale => {
                let e = &self.twoscale.etas;
                if e.is_empty() || e.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
                    return Err(bad("twoscale.etas", "need periods in (0, 1]"));
                }
                if e.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(bad("twoscale.etas", "must be strictly decreasing"));
                }
                if g.dim != 2 {
                    return Err(bad("geometry.dim", "twoscale mode runs in 2D"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// `geometry.cell_length`, else the first ensemble length.
    pub fn reference_length(&self) -> f64 {
        self.geometry
            .cell_length
            .or_else(|| self.ensemble.cell_lengths.first().copied())
            .unwrap_or(1.0)
    }

    /// Cells per axis for a cell of side `cell_length` at the spacing of
    /// the reference grid.
    pub fn resolution_for(&self, cell_length: f64) -> usize {
        (self.grid.n as f64 * cell_length / self.reference_length()).round() as usize
    }

    /// Replaces the seed list by a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.geometry.seeds = vec![seed];
        self
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            preconditioner: self.solver.preconditioner,
            project_rhs: false,
        }
    }

    /// The inclusion set of `seed` on a cell of side `cell_length`.
    pub fn generate(&self, cell_length: f64, seed: u64) -> crate::Result<InclusionSet> {
        let g = &self.geometry;
        match g.generator {
            Generator::Rsa => rsa_generate(&RsaParams::new(
                g.dim,
                cell_length,
                g.lambda.unwrap_or(0.0),
                g.gap,
                seed,
            )),
            Generator::Lattice => {
                let s = g.spacing.as_deref().unwrap_or(&[]);
                let mut spacing = [1.0; 3];
                spacing[..s.len()].copy_from_slice(s);
                perturbed_lattice_generate(&LatticeParams {
                    dim: g.dim,
                    cell_length,
                    spacing,
                    jitter: g.jitter.unwrap_or(0.0),
                    gap: g.gap,
                    seed,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
mode = "effective"

[geometry]
dim = 2
cell_length = 8.0
lambda = 0.1
gap = 0.5
seeds = [0, 1]

[grid]
n = 32
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.mode, Mode::Effective);
        assert_eq!(c.grid.n, 32);
        assert_eq!(c.solver.tol, 1e-8);
        assert_eq!(c.solver.preconditioner, Preconditioner::BlockDiag);
        assert_eq!(c.twoscale.etas, vec![0.25, 0.125, 0.0625]);
        assert_eq!(c.output.dir, PathBuf::from("out"));
    }

    #[test]
    fn missing_n_names_the_key() {
        let text = BASE.replace("n = 32", "");
        let e = RunConfig::parse(&text).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("grid.n"), "{e}");
        assert!(e.to_string().contains("grid.n"));
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = BASE.replace("n = 32", "n = 32\nsize = 4");
        let e = RunConfig::parse(&text).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("grid.size"), "{e}");
        assert_eq!(e.line, Some(13));
    }

    #[test]
    fn ensemble_lengths_share_the_spacing() {
        let text = BASE.replace("effective", "ensemble") + "\n[ensemble]\ncell_lengths = [8.0, 16.0]\n";
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.resolution_for(8.0), 32);
        assert_eq!(c.resolution_for(16.0), 64);
        let e = RunConfig::parse(&text.replace("16.0]", "16.1]")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("ensemble.cell_lengths"));
    }

    #[test]
    fn bounds_are_checked() {
        let e = RunConfig::parse(&BASE.replace("gap = 0.5", "gap = -1.0")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("geometry.gap"));
        let e = RunConfig::parse(&BASE.replace("n = 32", "n = 2")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("grid.n"));
        let e = RunConfig::parse(&BASE.replace("lambda = 0.1", "lambda = 0.9")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("geometry.lambda"));
        let e = RunConfig::parse(&BASE.replace("seeds = [0, 1]", "seeds = [3, 3]")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("geometry.seeds"));
    }

    #[test]
    fn missing_root_key_is_unqualified() {
        let e = RunConfig::parse(&BASE.replace("mode = \"effective\"", "")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("mode"), "{e}");
    }

    #[test]
    fn bad_mode_is_reported() {
        let e = RunConfig::parse(&BASE.replace("\"effective\"", "\"fast\"")).unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
    }

    #[test]
    fn sedimentation_forcing_parses() {
        let text = format!("{BASE}\n[twoscale]\nforcing = {{ kind = \"sedimentation\", g = [0.0, -1.0, 0.0] }}\n");
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.twoscale.forcing, Forcing::Sedimentation { g: [0.0, -1.0, 0.0] });
    }

    #[test]
    fn seed_override_replaces_the_list() {
        let c = RunConfig::parse(BASE).unwrap().with_seed(7);
        assert_eq!(c.geometry.seeds, vec![7]);
    }
}
