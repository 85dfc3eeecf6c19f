//! Coefficient sets for the layer operator, hypothesis checks and the built-in catalog.
//!
//! The operator on the strip `|x_2| < ε/2` is
//!
//! ```text
//! H u = -∂_i A_ij ∂_j u + A_j ∂_j u - ∂_j (conj(A_j) u) + A_0 u,
//! (A_21 ∂_1 + A_22 ∂_2 + conj(A_2) + iα) u = 0 on both faces,
//! ```
//!
//! with coefficients given as expressions in `x` (tangential) and `xi = x_2/ε`.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::coeffexpr::{parse_with_params, Env, Expr, ExprError, Params, C64};

/// Probe window used when none is given.
pub const DEFAULT_PROBE_X: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model::catalog: unknown problem `{0}` (known: free, pt_well, shear, fullmix)")]
    UnknownProblem(String),
    #[error("model::catalog: override of undeclared parameter `{name}` (declared: {declared:?})")]
    UndeclaredParameter { name: String, declared: Vec<String> },
    #[error("model::new: {0}")]
    Expr(#[from] ExprError),
    #[error("model::new: alpha must not depend on xi")]
    AlphaDependsOnXi,
    #[error("model::new: only n = 2 is supported (got {0})")]
    Dimension(usize),
    #[error("model::{op}: evaluation failed at (x, xi) = ({x}, {xi}): {source}")]
    Eval {
        op: &'static str,
        x: f64,
        xi: f64,
        #[source]
        source: ExprError,
    },
    #[error("model::estimate_constants: ellipticity fails at (x, xi) = ({x}, {xi}): smallest eigenvalue {value}")]
    Ellipticity { x: f64, xi: f64, value: f64 },
}

/// All coefficient values at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffPoint {
    pub a11: C64,
    pub a12: C64,
    pub a21: C64,
    pub a22: C64,
    pub a1: C64,
    pub a2: C64,
    pub a0: C64,
}

/// Symbolic coefficients `A_ij`, `A_j`, `A_0`, `α` for `n = 2`, plus real parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub name: String,
    pub n: usize,
    pub aij: [[Expr; 2]; 2],
    pub aj: [Expr; 2],
    pub a0: Expr,
    pub alpha: Expr,
    pub params: Params,
}

/// Coefficient expressions as source text; used for inline problems in the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSource {
    pub a11: String,
    pub a12: String,
    pub a21: String,
    pub a22: String,
    pub a1: String,
    pub a2: String,
    pub a0: String,
    pub alpha: String,
}

impl CoefficientSet {
    /// Builds a set from expression text; every identifier must be a declared parameter.
    pub fn from_source(name: &str, src: &CoefficientSource, params: Params) -> Result<Self, ModelError> {
        let declared: BTreeSet<String> = params.keys().cloned().collect();
        let p = |s: &str| parse_with_params(s, &declared);
        let cs = CoefficientSet {
            name: name.to_string(),
            n: 2,
            aij: [[p(&src.a11)?, p(&src.a12)?], [p(&src.a21)?, p(&src.a22)?]],
            aj: [p(&src.a1)?, p(&src.a2)?],
            a0: p(&src.a0)?,
            alpha: p(&src.alpha)?,
            params,
        };
        if cs.alpha.uses_xi() {
            return Err(ModelError::AlphaDependsOnXi);
        }
        Ok(cs)
    }

    /// Source text of every coefficient (printed form of the trees).
    pub fn source(&self) -> CoefficientSource {
        CoefficientSource {
            a11: self.aij[0][0].to_string(),
            a12: self.aij[0][1].to_string(),
            a21: self.aij[1][0].to_string(),
            a22: self.aij[1][1].to_string(),
            a1: self.aj[0].to_string(),
            a2: self.aj[1].to_string(),
            a0: self.a0.to_string(),
            alpha: self.alpha.to_string(),
        }
    }

    fn env(&self, x: f64, xi: f64) -> Env<'_> {
        Env {
            x,
            xi,
            params: &self.params,
        }
    }

    /// Evaluates every coefficient at `(x, xi)`.
    pub fn at(&self, x: f64, xi: f64) -> Result<CoeffPoint, ModelError> {
        let env = self.env(x, xi);
        let wrap = |e: ExprError| ModelError::Eval {
            op: "eval",
            x,
            xi,
            source: e,
        };
        Ok(CoeffPoint {
            a11: self.aij[0][0].eval(&env).map_err(wrap)?,
            a12: self.aij[0][1].eval(&env).map_err(wrap)?,
            a21: self.aij[1][0].eval(&env).map_err(wrap)?,
            a22: self.aij[1][1].eval(&env).map_err(wrap)?,
            a1: self.aj[0].eval(&env).map_err(wrap)?,
            a2: self.aj[1].eval(&env).map_err(wrap)?,
            a0: self.a0.eval(&env).map_err(wrap)?,
        })
    }

    /// Real boundary coefficient α(x).
    pub fn alpha_at(&self, x: f64) -> Result<f64, ModelError> {
        self.alpha
            .eval(&self.env(x, 0.0))
            .map(|z| z.re)
            .map_err(|e| ModelError::Eval {
                op: "alpha",
                x,
                xi: 0.0,
                source: e,
            })
    }

    /// Same set with α replaced by −α.
    pub fn negated_alpha(&self) -> Self {
        let mut out = self.clone();
        out.alpha = Expr::Neg(Box::new(self.alpha.clone()));
        out
    }
}

fn problem_source(name: &str) -> Option<(CoefficientSource, Vec<(&'static str, f64)>)> {
    let s = |v: &str| v.to_string();
    let base = CoefficientSource {
        a11: s("1"),
        a12: s("0"),
        a21: s("0"),
        a22: s("1"),
        a1: s("0"),
        a2: s("0"),
        a0: s("0"),
        alpha: s("alpha0"),
    };
    Some(match name {
        "free" => (base, vec![("alpha0", 1.0)]),
        "pt_well" => (
            CoefficientSource {
                a0: s("-2*sech(x)^2"),
                ..base
            },
            vec![("alpha0", 1.0)],
        ),
        "shear" => (
            CoefficientSource {
                a12: s("c12*xi"),
                a21: s("c12*xi"),
                a0: s("-2*sech(x)^2"),
                ..base
            },
            vec![("alpha0", 1.0), ("c12", 1.0)],
        ),
        "fullmix" => (
            CoefficientSource {
                a12: s("c12*xi"),
                a21: s("c12*xi"),
                a22: s("1 + c22*xi^2"),
                a1: s("i*a1*xi"),
                a2: s("a2*xi"),
                a0: s("-2*sech(x)^2 + i*a0*xi"),
                ..base
            },
            vec![
                ("alpha0", 1.0),
                ("c12", 0.5),
                ("c22", 0.5),
                ("a1", 0.5),
                ("a2", 0.5),
                ("a0", 0.5),
            ],
        ),
        _ => return None,
    })
}

/// Names of the built-in problems.
pub const CATALOG: [&str; 4] = ["free", "pt_well", "shear", "fullmix"];

/// Built-in coefficient set `name` with parameter overrides applied.
pub fn catalog(name: &str, overrides: &Params) -> Result<CoefficientSet, ModelError> {
    let (src, defaults) = problem_source(name).ok_or_else(|| ModelError::UnknownProblem(name.to_string()))?;
    let mut params: Params = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        match params.get_mut(k) {
            Some(slot) => *slot = *v,
            None => {
                return Err(ModelError::UndeclaredParameter {
                    name: k.clone(),
                    declared: params.keys().cloned().collect(),
                })
            }
        }
    }
    CoefficientSet::from_source(name, &src, params)
}

/// Outcome of one parity / symmetry identity on the probe grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryCheck {
    pub identity: &'static str,
    pub max_violation: f64,
    pub ok: bool,
}

/// Constants `c0..c3` of the spectral enclosure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub checks: Vec<SymmetryCheck>,
    pub symmetry_ok: bool,
    pub constants: Option<Constants>,
    pub sample_grid: String,
}

/// Uniform probe grid over a window in `x` and the closed unit cell in `xi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub nx: usize,
    pub nxi: usize,
    pub x_range: (f64, f64),
}

impl Probe {
    pub fn new(nx: usize, nxi: usize) -> Self {
        Probe {
            nx: nx.max(3),
            nxi: nxi.max(3),
            x_range: DEFAULT_PROBE_X,
        }
    }

    fn xs(&self) -> Vec<f64> {
        linspace(self.x_range.0, self.x_range.1, self.nx)
    }

    fn xis(&self) -> Vec<f64> {
        linspace(-0.5, 0.5, self.nxi)
    }

    fn describe(&self) -> String {
        format!(
            "x in [{}, {}] x {} points, xi in [-0.5, 0.5] x {} points",
            self.x_range.0, self.x_range.1, self.nx, self.nxi
        )
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { b } else { a + h * k as f64 })
        .collect()
}

/// Checks the parity conditions of the coefficients, `A_12 = A_21` and reality of `A_ij`.
pub fn validate_symmetry(cs: &CoefficientSet, probe: &Probe, tol: f64) -> Result<HypothesisReport, ModelError> {
    const NAMES: [&str; 8] = [
        "A_11(-xi) = A_11(xi)",
        "A_12(-xi) = -A_12(xi)",
        "A_22(-xi) = A_22(xi)",
        "conj(A_1)(-xi) = A_1(xi)",
        "A_2(-xi) = -conj(A_2)(xi)",
        "A_0(-xi) = conj(A_0)(xi)",
        "A_21 = A_12",
        "Im A_ij = 0",
    ];
    let mut worst = [0.0f64; 8];
    for &x in &probe.xs() {
        for &xi in &probe.xis() {
            let p = cs.at(x, xi)?;
            let m = cs.at(x, -xi)?;
            let v = [
                (m.a11 - p.a11).norm(),
                (m.a12 + p.a12).norm().max((m.a21 + p.a21).norm()),
                (m.a22 - p.a22).norm(),
                (m.a1.conj() - p.a1).norm(),
                (m.a2 + p.a2.conj()).norm(),
                (m.a0 - p.a0.conj()).norm(),
                (p.a21 - p.a12).norm(),
                [p.a11, p.a12, p.a21, p.a22]
                    .iter()
                    .map(|z| z.im.abs())
                    .fold(0.0, f64::max),
            ];
            for (w, vi) in worst.iter_mut().zip(v) {
                *w = w.max(vi);
            }
        }
    }
    let checks: Vec<SymmetryCheck> = NAMES
        .iter()
        .zip(worst)
        .map(|(name, w)| SymmetryCheck {
            identity: name,
            max_violation: w,
            ok: w <= tol,
        })
        .collect();
    Ok(HypothesisReport {
        symmetry_ok: checks.iter().all(|c| c.ok),
        checks,
        constants: None,
        sample_grid: probe.describe(),
    })
}

/// Smallest eigenvalue of the real symmetric 2×2 matrix `[[a, b], [b, d]]`.
fn min_eig_2x2(a: f64, b: f64, d: f64) -> f64 {
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    mean - rad
}

/// Symmetry report plus the enclosure constants estimated on the probe grid.
///
/// The suprema are maxima over the probe points, so they bound the true
/// suprema from below.
pub fn estimate_constants(cs: &CoefficientSet, probe: &Probe) -> Result<HypothesisReport, ModelError> {
    let mut report = validate_symmetry(cs, probe, 1e-12)?;
    let mut c0 = f64::INFINITY;
    let (mut s1, mut s2, mut s0, mut sa) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &x in &probe.xs() {
        sa = sa.max(cs.alpha_at(x)?.abs());
        for &xi in &probe.xis() {
            let p = cs.at(x, xi)?;
            let off = 0.5 * (p.a12.re + p.a21.re);
            let e = min_eig_2x2(p.a11.re, off, p.a22.re);
            if e <= 0.0 {
                return Err(ModelError::Ellipticity { x, xi, value: e });
            }
            c0 = c0.min(e);
            s1 = s1.max(p.a1.norm());
            s2 = s2.max(p.a2.norm());
            s0 = s0.max(p.a0.norm());
        }
    }
    report.constants = Some(Constants {
        c0,
        c1: (s1 * s1 + s2 * s2).sqrt(),
        c2: s0,
        c3: 2.0 * sa,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn mutant() -> CoefficientSet {
        let mut cs = catalog("shear", &Params::new()).unwrap();
        let e = crate::coeffexpr::parse("xi^2").unwrap();
        cs.aij[0][1] = e.clone();
        cs.aij[1][0] = e;
        cs
    }

    #[test]
    fn catalog_free_is_identity() {
        let cs = catalog("free", &params(&[("alpha0", 1.0)])).unwrap();
        let p = cs.at(0.3, 0.2).unwrap();
        assert_eq!(p.a11, C64::new(1.0, 0.0));
        assert_eq!(p.a12, C64::new(0.0, 0.0));
        assert_eq!(p.a0, C64::new(0.0, 0.0));
        assert_eq!(cs.alpha_at(4.0).unwrap(), 1.0);
    }

    #[test]
    fn catalog_errors() {
        assert!(matches!(catalog("nope", &Params::new()), Err(ModelError::UnknownProblem(_))));
        assert!(matches!(
            catalog("free", &params(&[("c12", 1.0)])),
            Err(ModelError::UndeclaredParameter { .. })
        ));
    }

    #[test]
    fn alpha_must_not_use_xi() {
        let (mut src, _) = problem_source("free").unwrap();
        src.alpha = "xi".into();
        assert!(matches!(
            CoefficientSet::from_source("bad", &src, params(&[("alpha0", 1.0)])),
            Err(ModelError::AlphaDependsOnXi)
        ));
    }

    #[test]
    fn every_catalog_problem_is_symmetric() {
        for name in CATALOG {
            let cs = catalog(name, &Params::new()).unwrap();
            let r = validate_symmetry(&cs, &Probe::new(21, 11), 1e-12).unwrap();
            assert!(r.symmetry_ok, "{name}: {:?}", r.checks);
            let worst = r.checks.iter().map(|c| c.max_violation).fold(0.0, f64::max);
            assert!(worst <= 1e-14, "{name}: {worst}");
        }
    }

    #[test]
    fn shear_parity_holds() {
        let cs = catalog("shear", &params(&[("c12", 1.0), ("alpha0", 0.0)])).unwrap();
        let r = validate_symmetry(&cs, &Probe::new(5, 5), 1e-12).unwrap();
        assert_eq!(r.checks[1].max_violation, 0.0);
    }

    #[test]
    fn even_mixed_coefficient_is_flagged() {
        let r = validate_symmetry(&mutant(), &Probe::new(5, 5), 1e-12).unwrap();
        assert!(!r.symmetry_ok);
        assert!((r.checks[1].max_violation - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constants_examples() {
        let free = catalog("free", &params(&[("alpha0", 1.0)])).unwrap();
        let c = estimate_constants(&free, &Probe::new(21, 11)).unwrap().constants.unwrap();
        assert_eq!((c.c0, c.c1, c.c2, c.c3), (1.0, 0.0, 0.0, 2.0));

        let well = catalog("pt_well", &params(&[("alpha0", 1.0)])).unwrap();
        let c = estimate_constants(&well, &Probe::new(21, 11)).unwrap().constants.unwrap();
        assert!((c.c2 - 2.0).abs() < 1e-15);
        assert_eq!(c.c3, 2.0);

        let shear = catalog("shear", &params(&[("c12", 1.0)])).unwrap();
        let c = estimate_constants(&shear, &Probe::new(21, 11)).unwrap().constants.unwrap();
        assert!((c.c0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn c0_is_a_running_minimum() {
        let cs = catalog("fullmix", &Params::new()).unwrap();
        let mut last = f64::INFINITY;
        for nxi in [3, 5, 9, 17, 33] {
            let c0 = estimate_constants(&cs, &Probe::new(9, nxi)).unwrap().constants.unwrap().c0;
            assert!(c0 <= last + 1e-15);
            last = c0;
        }
    }

    #[test]
    fn ellipticity_failure_names_point() {
        let mut cs = catalog("shear", &params(&[("c12", 3.0)])).unwrap();
        cs.name = "too sheared".into();
        match estimate_constants(&cs, &Probe::new(3, 3)) {
            Err(ModelError::Ellipticity { xi, .. }) => assert_eq!(xi.abs(), 0.5),
            other => panic!("{other:?}"),
        }
    }
}
