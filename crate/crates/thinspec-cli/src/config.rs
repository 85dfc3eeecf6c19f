//! Run configuration: TOML file, command-line overrides and catalog expansion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thinspec::model::{catalog, CoefficientSet, CoefficientSource, CATALOG};

use crate::error::CliError;

pub const EXPERIMENTS: [&str; 7] = [
    "validate",
    "limiting",
    "spectrum",
    "asymptotics",
    "sweep-eig",
    "sweep-res",
    "residual",
];

const COEFF_KEYS: [&str; 8] = ["a11", "a12", "a21", "a22", "a1", "a2", "a0", "alpha"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// Catalog name, or `inline` for a problem given entirely by `coefficients`.
    pub name: String,
    pub coefficients: BTreeMap<String, String>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            name: "shear".into(),
            coefficients: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_half: f64,
    pub nx: usize,
    pub nt: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x_half: 10.0,
            nx: 201,
            nt: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    pub jobs: usize,
    /// Mesh extrapolation of eigenvalue sweeps.
    pub extrapolate: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            eps: thinspec::converge::DEFAULT_EPS.to_vec(),
            jobs: 1,
            extrapolate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadConfig {
    pub order: usize,
    pub panels: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig { order: 8, panels: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub k: usize,
    pub tol: f64,
    pub max_restarts: usize,
    /// Shift `[re, im]`; absent means the lowest limiting eigenvalue.
    pub shift: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            k: 6,
            tol: 1e-10,
            max_restarts: 40,
            shift: None,
            seed: thinspec::spectral::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventConfig {
    /// `[re, im]`; absent means `λ_min(limiting) - 1`.
    pub lambda: Option<[f64; 2]>,
    /// Right-hand side, an expression in `x`.
    pub f: String,
}

impl Default for ResolventConfig {
    fn default() -> Self {
        ResolventConfig {
            lambda: None,
            f: "sech(x)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsymptoticsConfig {
    pub cluster_tol: f64,
    pub degeneracy_tol: f64,
    /// Truncation order `N` of the residual experiment.
    pub order: usize,
}

impl Default for AsymptoticsConfig {
    fn default() -> Self {
        AsymptoticsConfig {
            cluster_tol: 1e-6,
            degeneracy_tol: 1e-8,
            order: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub probe_nx: usize,
    pub probe_nxi: usize,
    pub tol: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            probe_nx: 41,
            probe_nxi: 21,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: String,
    pub output: PathBuf,
    pub problem: ProblemConfig,
    pub params: BTreeMap<String, f64>,
    pub grid: GridConfig,
    pub sweep: SweepConfig,
    pub quad: QuadConfig,
    pub solver: SolverConfig,
    pub resolvent: ResolventConfig,
    pub asymptotics: AsymptoticsConfig,
    pub validate: ValidateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: String::new(),
            output: PathBuf::from("out"),
            problem: ProblemConfig::default(),
            params: BTreeMap::new(),
            grid: GridConfig::default(),
            sweep: SweepConfig::default(),
            quad: QuadConfig::default(),
            solver: SolverConfig::default(),
            resolvent: ResolventConfig::default(),
            asymptotics: AsymptoticsConfig::default(),
            validate: ValidateConfig::default(),
        }
    }
}

fn usage(op: &str, detail: impl Into<String>) -> CliError {
    CliError::Usage(format!("cli::{op}: {}", detail.into()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| usage("load_config", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage("load_config", format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Fills in the catalog coefficients and default parameters so the configuration
    /// alone determines the run.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        for k in self.problem.coefficients.keys() {
            if !COEFF_KEYS.contains(&k.as_str()) {
                return Err(usage("resolve", format!("unknown coefficient `{k}` (expected one of {COEFF_KEYS:?})")));
            }
        }
        let (mut src, mut params) = if self.problem.name == "inline" {
            let s = |v: &str| v.to_string();
            (
                CoefficientSource {
                    a11: s("1"),
                    a12: s("0"),
                    a21: s("0"),
                    a22: s("1"),
                    a1: s("0"),
                    a2: s("0"),
                    a0: s("0"),
                    alpha: s("0"),
                },
                BTreeMap::new(),
            )
        } else if CATALOG.contains(&self.problem.name.as_str()) {
            let cs = catalog(&self.problem.name, &Default::default()).map_err(|e| usage("resolve", e.to_string()))?;
            (cs.source(), cs.params.clone())
        } else {
            return Err(usage(
                "resolve",
                format!("unknown problem `{}` (known: {}, inline)", self.problem.name, CATALOG.join(", ")),
            ));
        };
        for (k, v) in &self.problem.coefficients {
            let slot = match k.as_str() {
                "a11" => &mut src.a11,
                "a12" => &mut src.a12,
                "a21" => &mut src.a21,
                "a22" => &mut src.a22,
                "a1" => &mut src.a1,
                "a2" => &mut src.a2,
                "a0" => &mut src.a0,
                _ => &mut src.alpha,
            };
            *slot = v.clone();
        }
        for (k, v) in &self.params {
            params.insert(k.clone(), *v);
        }
        self.params = params;
        self.problem.coefficients = COEFF_KEYS
            .iter()
            .zip([&src.a11, &src.a12, &src.a21, &src.a22, &src.a1, &src.a2, &src.a0, &src.alpha])
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        self.check()
    }

    fn check(&self) -> Result<(), CliError> {
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(usage("check", format!("unknown experiment `{}`", self.experiment)));
        }
        let g = &self.grid;
        if !(g.x_half > 0.0 && g.x_half.is_finite()) {
            return Err(usage("check", format!("grid.x_half must be positive (got {})", g.x_half)));
        }
        if g.nx < 5 || g.nt < 3 {
            return Err(usage("check", format!("grid needs nx >= 5 and nt >= 3 (got {}, {})", g.nx, g.nt)));
        }
        let e = &self.sweep.eps;
        if e.is_empty() || e.iter().any(|v| !(*v > 0.0)) || e.windows(2).any(|w| w[1] >= w[0]) {
            return Err(usage("check", format!("eps must be positive and strictly decreasing (got {e:?})")));
        }
        if self.sweep.jobs == 0 {
            return Err(usage("check", "jobs must be at least 1"));
        }
        if self.quad.order < 2 || self.quad.panels == 0 {
            return Err(usage("check", "quad needs order >= 2 and panels >= 1"));
        }
        if self.solver.k == 0 || !(self.solver.tol > 0.0) {
            return Err(usage("check", "solver needs k >= 1 and tol > 0"));
        }
        if !(1..=3).contains(&self.asymptotics.order) {
            return Err(usage("check", format!("asymptotics.order must be 1, 2 or 3 (got {})", self.asymptotics.order)));
        }
        Ok(())
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet, CliError> {
        let c = |k: &str| self.problem.coefficients.get(k).cloned().unwrap_or_default();
        let src = CoefficientSource {
            a11: c("a11"),
            a12: c("a12"),
            a21: c("a21"),
            a22: c("a22"),
            a1: c("a1"),
            a2: c("a2"),
            a0: c("a0"),
            alpha: c("alpha"),
        };
        CoefficientSet::from_source(&self.problem.name, &src, self.params.clone()).map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// `key=value` pair.
pub fn split_pair(s: &str) -> Result<(String, String), CliError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(usage("parse_args", format!("expected key=value, got `{s}`"))),
    }
}

pub fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| usage("parse_args", format!("{what}: `{t}`: {e}"))))
        .collect()
}

pub fn parse_seed(s: &str) -> Result<u64, CliError> {
    let t = s.trim();
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => t.parse::<u64>(),
    };
    r.map_err(|e| usage("seed", format!("THINSPEC_SEED = `{s}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_expansion_fills_everything() {
        let mut c = RunConfig {
            experiment: "validate".into(),
            ..Default::default()
        };
        c.params.insert("c12".into(), 0.5);
        c.resolve().unwrap();
        assert_eq!(c.problem.coefficients.len(), 8);
        assert_eq!(c.problem.coefficients["a12"], "(c12 * xi)");
        assert_eq!(c.params["c12"], 0.5);
        assert_eq!(c.params["alpha0"], 1.0);
        let again = toml::from_str::<RunConfig>(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_values() {
        for edit in [
            (|c: &mut RunConfig| c.grid.nx = 3) as fn(&mut RunConfig),
            |c| c.sweep.eps = vec![0.1, 0.2],
            |c| c.problem.name = "nope".into(),
            |c| c.experiment = "plot".into(),
            |c| {
                c.problem.coefficients.insert("b7".into(), "1".into());
            },
        ] {
            let mut c = RunConfig {
                experiment: "spectrum".into(),
                ..Default::default()
            };
            edit(&mut c);
            assert!(matches!(c.resolve(), Err(CliError::Usage(_))));
        }
    }

    #[test]
    fn small_parsers() {
        assert_eq!(split_pair("c12 = 2").unwrap(), ("c12".into(), "2".into()));
        assert!(split_pair("c12").is_err());
        assert_eq!(parse_floats("0.2, 0.1", "eps").unwrap(), vec![0.2, 0.1]);
        assert_eq!(parse_seed("0x10").unwrap(), 16);
        assert_eq!(parse_seed("42").unwrap(), 42);
        assert!(parse_seed("x").is_err());
    }
}
