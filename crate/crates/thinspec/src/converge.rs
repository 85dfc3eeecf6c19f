//! ε-sweeps: eigenvalue and resolvent convergence tables, rate fits and Richardson extrapolation.
//!
//! Eigenvalue sweeps can remove the leading `O(h²)` grid error by extrapolating in the
//! mesh: every value is computed on a pair of grids `(Nx, Nt)` and `(2Nx - 1, 2Nt - 1)`
//! and combined as `(4λ_fine - λ_coarse) / 3`. The spatial floor guard repeats the
//! largest-ε computation one refinement level up and compares.

use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::asymptote::{expand, homogenized_operator, AsymptoteError, ExpansionParams, LayerOps};
use crate::cell::{w_profile, CellError, QuadRule};
use crate::coeffexpr::{Expr, ExprError, C64};
use crate::disc::{assemble_limiting_from, assemble_perturbed, build_grid, embed, line_grid, DiscError, DiscreteOperator, Grid};
use crate::model::CoefficientSet;
use crate::spectral::{eigs_near, solve_linear, EigenPair, SolverParams, SpectralError};

#[derive(Debug, Error)]
pub enum ConvergeError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Asymptote(#[from] AsymptoteError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("converge::{op}: right-hand side: {source}")]
    Expr {
        op: &'static str,
        #[source]
        source: ExprError,
    },
    #[error("converge::fit_rate: need at least 3 rows with positive error (got {usable})")]
    TooFewRows { usable: usize },
    #[error("converge::richardson: eps list is not geometric (ratios {ratios:?})")]
    NonGeometric { ratios: Vec<f64> },
    #[error("converge::sweep_eigenvalue: tracking collision at eps = {eps}: {a} and {b} are equidistant from the prediction; refine the grid")]
    Collision { eps: f64, a: C64, b: C64 },
    #[error("converge::{op}: lambda = {lambda} is within {distance:.3e} of the limiting spectrum")]
    NearSpectrum { op: &'static str, lambda: C64, distance: f64 },
    #[error("converge::{op}: {detail}")]
    Argument { op: &'static str, detail: String },
}

type Result<T> = std::result::Result<T, ConvergeError>;

/// Default ε list.
pub const DEFAULT_EPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Eigenvalue,
    EigenvalueRemainder,
    ResolventL2,
    ResolventH1,
    ResolventH1Uncorrected,
    Residual(usize),
}

impl Quantity {
    pub fn tag(&self) -> String {
        match self {
            Quantity::Eigenvalue => "eigenvalue".into(),
            Quantity::EigenvalueRemainder => "eigenvalue_remainder".into(),
            Quantity::ResolventL2 => "resolvent_L2".into(),
            Quantity::ResolventH1 => "resolvent_H1".into(),
            Quantity::ResolventH1Uncorrected => "resolvent_H1_uncorrected".into(),
            Quantity::Residual(n) => format!("residual_{n}"),
        }
    }
}

/// Outcome of the spatial floor guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FloorGuard {
    NotChecked,
    /// Spatial estimate below 10% of the ε-error.
    Passed { spatial: f64, eps_error: f64 },
    FloorLimited { spatial: f64, eps_error: f64 },
}

impl FloorGuard {
    fn from_estimate(spatial: f64, eps_error: f64) -> Self {
        if spatial < 0.1 * eps_error {
            FloorGuard::Passed { spatial, eps_error }
        } else {
            FloorGuard::FloorLimited { spatial, eps_error }
        }
    }

    pub fn status(&self) -> &'static str {
        match self {
            FloorGuard::NotChecked => "not_checked",
            FloorGuard::Passed { .. } => "passed",
            FloorGuard::FloorLimited { .. } => "floor-limited",
        }
    }

    pub fn passed(&self) -> bool {
        matches!(self, FloorGuard::Passed { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub eps: f64,
    pub value: C64,
    pub error: f64,
    pub meta: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub quantity: Quantity,
    pub rows: Vec<Row>,
    pub fitted_rate: Option<f64>,
    pub fit_r2: Option<f64>,
    pub floor_guard: FloorGuard,
}

impl ConvergenceTable {
    pub fn new(quantity: Quantity, rows: Vec<Row>) -> Self {
        ConvergenceTable {
            quantity,
            rows,
            fitted_rate: None,
            fit_r2: None,
            floor_guard: FloorGuard::NotChecked,
        }
    }

    pub fn eps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.eps).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error).collect()
    }

    /// Fits the rate unless the guard reported a floor-limited sweep.
    fn finish(mut self, guard: FloorGuard) -> Self {
        self.floor_guard = guard;
        if !matches!(guard, FloorGuard::FloorLimited { .. }) {
            if let Ok((rate, r2)) = fit_rate(&self.eps(), &self.errors()) {
                self.fitted_rate = Some(rate);
                self.fit_r2 = Some(r2);
            }
        }
        self
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "eps,re_value,im_value,error,meta")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.eps, r.value.re, r.value.im, r.error, r.meta
            )?;
        }
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        writeln!(w, "fitted_rate,{},,,", opt(self.fitted_rate))?;
        writeln!(w, "r2,{},,,", opt(self.fit_r2))?;
        writeln!(w, "floor_guard_status,{},,,", self.floor_guard.status())
    }
}

/// Least-squares slope of `log(error)` against `log(ε)` and the `r²` of the fit.
pub fn fit_rate(eps: &[f64], errors: &[f64]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(errors)
        .filter(|(e, r)| **e > 0.0 && **r > 0.0 && r.is_finite())
        .map(|(e, r)| (e.ln(), r.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(ConvergeError::TooFewRows { usable: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
    Ok((slope, r2))
}

/// Richardson extrapolation to `ε → 0` of values with an expansion in powers `order, order+1, ...`.
///
/// Builds the full tableau; the estimate is the difference between the last two
/// diagonal entries.
pub fn richardson(eps: &[f64], values: &[f64], order: u32) -> Result<(f64, f64)> {
    if eps.len() != values.len() {
        return Err(ConvergeError::Argument {
            op: "richardson",
            detail: format!("{} eps values for {} samples", eps.len(), values.len()),
        });
    }
    if eps.len() < 3 {
        return Err(ConvergeError::TooFewRows { usable: eps.len() });
    }
    let ratios: Vec<f64> = eps.windows(2).map(|w| w[0] / w[1]).collect();
    let r = ratios[0];
    if !(r > 1.0) || ratios.iter().any(|q| (q - r).abs() > 1e-9 * r) {
        return Err(ConvergeError::NonGeometric { ratios });
    }
    let mut col = values.to_vec();
    let mut diag = vec![col[col.len() - 1]];
    for level in 0..values.len() - 1 {
        let f = r.powi((order + level as u32) as i32);
        col = col.windows(2).map(|w| (f * w[1] - w[0]) / (f - 1.0)).collect();
        diag.push(col[col.len() - 1]);
    }
    let limit = diag[diag.len() - 1];
    Ok((limit, (limit - diag[diag.len() - 2]).abs()))
}

/// Grid refinement step `(N - 1) · 2 + 1`.
pub fn refine(n: usize) -> usize {
    2 * (n - 1) + 1
}

/// `(4 fine - coarse) / 3`.
pub fn h_extrapolate(coarse: C64, fine: C64) -> C64 {
    (fine * 4.0 - coarse) / 3.0
}

/// Runs `f` on every item with up to `jobs` threads, results in input order.
pub fn run_tasks<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("result sink")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("result sink")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EigSweepParams {
    pub x_half: f64,
    pub nx: usize,
    pub nt: usize,
    pub eps: Vec<f64>,
    pub quad: QuadRule,
    pub solver: SolverParams,
    /// Shift selecting the limiting eigenvalue.
    pub target: f64,
    pub cluster_tol: f64,
    /// Extrapolate every value in the mesh width (two grids per value).
    pub extrapolate: bool,
    pub jobs: usize,
}

impl Default for EigSweepParams {
    fn default() -> Self {
        EigSweepParams {
            x_half: 10.0,
            nx: 201,
            nt: 9,
            eps: DEFAULT_EPS.to_vec(),
            quad: QuadRule::new(8, 16),
            solver: SolverParams::with_k(3),
            target: -1.0,
            cluster_tol: 1e-6,
            extrapolate: true,
            jobs: 1,
        }
    }
}

/// One tracked perturbed eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tracked {
    pub eps: f64,
    pub lambda: C64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct EigenSweep {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: Option<f64>,
    /// `|λ^ε - λ^0|`.
    pub first: ConvergenceTable,
    /// `|λ^ε - λ^0 - εΛ^(1)|`.
    pub remainder: ConvergenceTable,
    /// Raw tracked eigenvalues per ε and grid level.
    pub raw: Vec<(usize, Tracked)>,
    /// Richardson limit of `(λ^ε - λ^0)/ε` and its error estimate.
    pub oracle_lambda1: Option<(f64, f64)>,
}

impl EigenSweep {
    /// Largest `|Im λ^ε| / residual` over every raw solve.
    pub fn reality_ratio(&self) -> f64 {
        self.raw
            .iter()
            .map(|(_, t)| t.lambda.im.abs() / t.residual.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

fn level(nx: usize, nt: usize, l: usize) -> (usize, usize) {
    let (mut a, mut b) = (nx, nt);
    for _ in 0..l {
        a = refine(a);
        b = refine(b);
    }
    (a, b)
}

/// Perturbed eigenvalue nearest `sigma`, with a collision check.
pub fn track(op: &DiscreteOperator, sigma: C64, solver: &SolverParams) -> Result<EigenPair> {
    let eps = op.grid.map(|g| g.eps).unwrap_or(0.0);
    let params = SolverParams {
        k: solver.k.max(2),
        ..*solver
    };
    let rep = eigs_near(op, sigma, &params)?;
    let d0 = (rep.pairs[0].lambda - sigma).norm();
    if let Some(p1) = rep.pairs.get(1) {
        let d1 = (p1.lambda - sigma).norm();
        let distinct = (p1.lambda - rep.pairs[0].lambda).norm() > 1e-9 * (1.0 + sigma.norm());
        if distinct && (d1 - d0).abs() <= 1e-12 * (1.0 + sigma.norm()) {
            return Err(ConvergeError::Collision {
                eps,
                a: rep.pairs[0].lambda,
                b: p1.lambda,
            });
        }
    }
    Ok(rep.pairs[0].clone())
}

/// Limiting eigenvalue nearest `target` on `nx` nodes, with `Λ^(1)` and `Λ^(2)`.
fn limiting_data(cs: &CoefficientSet, p: &EigSweepParams, nx: usize) -> Result<(f64, f64, Option<f64>)> {
    let exp = expand(
        cs,
        p.x_half,
        nx,
        &p.quad,
        &ExpansionParams {
            target: p.target,
            cluster_tol: p.cluster_tol,
            seed: p.solver.seed,
            ..Default::default()
        },
    )?;
    let b = &exp.branches[0];
    Ok((b.lambda0, b.lambda1, b.lambda2))
}

/// Eigenvalue sweep around the limiting eigenvalue nearest `p.target`.
pub fn sweep_eigenvalue(cs: &CoefficientSet, p: &EigSweepParams) -> Result<EigenSweep> {
    if p.eps.is_empty() || p.eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ConvergeError::Argument {
            op: "sweep_eigenvalue",
            detail: format!("eps list must be strictly decreasing (got {:?})", p.eps),
        });
    }
    let n_levels = if p.extrapolate { 2 } else { 1 };
    let guard_level = n_levels;
    let level_data: Vec<(f64, f64, Option<f64>)> = (0..=guard_level)
        .map(|l| limiting_data(cs, p, level(p.nx, p.nt, l).0))
        .collect::<Result<_>>()?;
    let combine = |l: usize, f: &dyn Fn(&(f64, f64, Option<f64>)) -> f64| -> f64 {
        if p.extrapolate {
            h_extrapolate(C64::new(f(&level_data[l]), 0.0), C64::new(f(&level_data[l + 1]), 0.0)).re
        } else {
            f(&level_data[l])
        }
    };
    let lambda0 = combine(0, &|d| d.0);
    let lambda1 = combine(0, &|d| d.1);
    let lambda2 = level_data[0].2.map(|_| combine(0, &|d| d.2.unwrap_or(0.0)));

    let mut tasks: Vec<(f64, usize)> = Vec::new();
    for &e in &p.eps {
        for l in 0..n_levels {
            tasks.push((e, l));
        }
    }
    tasks.push((p.eps[0], guard_level));
    let results = run_tasks(&tasks, p.jobs, |&(e, l)| -> Result<Tracked> {
        let (nx, nt) = level(p.nx, p.nt, l);
        let g = build_grid(p.x_half, nx, e, nt)?;
        let m = assemble_perturbed(cs, &g)?;
        let (l0, l1, _) = level_data[l];
        let pair = track(&m, C64::new(l0 + e * l1, 0.0), &p.solver)?;
        Ok(Tracked {
            eps: e,
            lambda: pair.lambda,
            residual: pair.residual,
        })
    });
    let raw: Vec<(usize, Tracked)> = tasks
        .iter()
        .zip(results)
        .map(|(&(_, l), r)| r.map(|t| (l, t)))
        .collect::<Result<_>>()?;
    let value_at = |i: usize, base: usize| -> C64 {
        let coarse = raw[i * n_levels + base - base].1.lambda;
        if p.extrapolate {
            h_extrapolate(coarse, raw[i * n_levels + 1].1.lambda)
        } else {
            coarse
        }
    };
    let mut rows1 = Vec::with_capacity(p.eps.len());
    let mut rows2 = Vec::with_capacity(p.eps.len());
    let mut g = Vec::with_capacity(p.eps.len());
    for (i, &e) in p.eps.iter().enumerate() {
        let lam = value_at(i, 0);
        let (nx, nt) = level(p.nx, p.nt, 0);
        let res = (0..n_levels).map(|l| raw[i * n_levels + l].1.residual).fold(0.0, f64::max);
        let meta = format!("nx={nx};nt={nt};extrapolated={};residual={res:.3e}", p.extrapolate);
        rows1.push(Row {
            eps: e,
            value: lam,
            error: (lam - lambda0).norm(),
            meta: meta.clone(),
        });
        rows2.push(Row {
            eps: e,
            value: lam,
            error: (lam - lambda0 - e * lambda1).norm(),
            meta,
        });
        g.push((lam.re - lambda0) / e);
    }
    // Floor guard: the same largest-ε value one grid level up.
    let e0 = p.eps[0];
    let coarse = value_at(0, 0);
    let guard_raw = raw[raw.len() - 1].1.lambda;
    let (fine, fine_l0, fine_l1) = if p.extrapolate {
        (
            h_extrapolate(raw[1].1.lambda, guard_raw),
            combine(1, &|d| d.0),
            combine(1, &|d| d.1),
        )
    } else {
        (guard_raw, level_data[1].0, level_data[1].1)
    };
    let spatial1 = ((fine - fine_l0) - (coarse - lambda0)).norm();
    let spatial2 = ((fine - fine_l0 - e0 * fine_l1) - (coarse - lambda0 - e0 * lambda1)).norm();
    let first = ConvergenceTable::new(Quantity::Eigenvalue, rows1);
    let remainder = ConvergenceTable::new(Quantity::EigenvalueRemainder, rows2);
    let guard1 = FloorGuard::from_estimate(spatial1, first.rows[0].error);
    let guard2 = FloorGuard::from_estimate(spatial2, remainder.rows[0].error);
    let oracle = if p.eps.len() >= 3 {
        richardson(&p.eps, &g, 1).ok()
    } else {
        None
    };
    Ok(EigenSweep {
        lambda0,
        lambda1,
        lambda2,
        first: first.finish(guard1),
        remainder: remainder.finish(guard2),
        raw,
        oracle_lambda1: oracle,
    })
}

#[derive(Debug, Clone)]
pub struct ResSweepParams {
    pub x_half: f64,
    pub nx: usize,
    pub nt: usize,
    pub eps: Vec<f64>,
    pub quad: QuadRule,
    /// Spectral parameter; `None` selects `λ_min(limiting) - 1`.
    pub lambda: Option<C64>,
    pub jobs: usize,
}

impl Default for ResSweepParams {
    fn default() -> Self {
        ResSweepParams {
            x_half: 10.0,
            nx: 201,
            nt: 33,
            eps: DEFAULT_EPS.to_vec(),
            quad: QuadRule::default(),
            lambda: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResolventSweep {
    pub lambda: C64,
    /// Relative `L_2` error of `u^ε - u^0`.
    pub table_a: ConvergenceTable,
    /// Relative `H^1` error of `u^ε - (u^0 + εw)`.
    pub table_b: ConvergenceTable,
    /// Relative `H^1` error of `u^ε - u^0`.
    pub h1_uncorrected: ConvergenceTable,
}

/// Smallest eigenvalue of a Hermitian limiting operator.
pub fn lowest_eigenvalue(op: &DiscreteOperator, solver: &SolverParams) -> Result<f64> {
    let gersh = (0..op.dim)
        .map(|i| {
            let mut d = 0.0;
            let mut off = 0.0;
            for (j, v) in op.matrix.row(i) {
                if j == i {
                    d = v.re;
                } else {
                    off += v.norm();
                }
            }
            d - off
        })
        .fold(f64::INFINITY, f64::min);
    let rep = eigs_near(op, C64::new(gersh - 1.0, 0.0), &SolverParams { k: 1, ..*solver })?;
    Ok(rep.pairs[0].lambda.re)
}

fn weighted_sq(u: &[C64], g: &Grid) -> f64 {
    let mut s = 0.0;
    for a in 0..g.nx {
        for m in 0..g.nt {
            s += g.face_weight(m) * u[g.index(a, m)].norm_sqr();
        }
    }
    s * g.hx * g.ht
}

/// Discrete `H^1` norm on the strip: values plus forward difference quotients, the
/// transverse one over the physical spacing (`g.ht = ε / (Nt - 1)`).
pub fn strip_h1_norm(u: &[C64], g: &Grid) -> f64 {
    let mut s = weighted_sq(u, g);
    for a in 0..g.nx - 1 {
        for m in 0..g.nt {
            s += g.face_weight(m) * ((u[g.index(a + 1, m)] - u[g.index(a, m)]) / g.hx).norm_sqr() * g.hx * g.ht;
        }
    }
    for a in 0..g.nx {
        for m in 0..g.nt - 1 {
            s += ((u[g.index(a, m + 1)] - u[g.index(a, m)]) / g.ht).norm_sqr() * g.hx * g.ht;
        }
    }
    s.sqrt()
}

struct ResolventPoint {
    l2: f64,
    h1_corrected: f64,
    h1_plain: f64,
    mean: C64,
}

fn resolvent_point(cs: &CoefficientSet, p: &ResSweepParams, lambda: C64, f: &[C64], u0: &[C64], eps: f64, nx: usize, nt: usize) -> Result<ResolventPoint> {
    let g = build_grid(p.x_half, nx, eps, nt)?;
    let m = assemble_perturbed(cs, &g)?;
    let mut fe = embed(f, &g)?;
    for r in m.dirichlet_rows() {
        fe[r] = C64::new(0.0, 0.0);
    }
    let ue = m.from_scaled(&solve_linear(&m, lambda, &m.to_scaled(&fe))?);
    let u0e = embed(u0, &g)?;
    let fnorm = weighted_sq(&fe, &g).sqrt();
    let diff: Vec<C64> = ue.iter().zip(&u0e).map(|(a, b)| a - b).collect();
    let xs = g.xs();
    let mut corr = diff.clone();
    for a in 1..nx - 1 {
        let du = (u0[a + 1] - u0[a - 1]) / (2.0 * g.hx);
        let w = w_profile(cs, u0[a], du, xs[a], &p.quad)?;
        for mm in 0..nt {
            corr[g.index(a, mm)] -= p.quad.value_at(&w, g.xi(mm)) * eps;
        }
    }
    Ok(ResolventPoint {
        l2: weighted_sq(&diff, &g).sqrt() / fnorm,
        h1_corrected: strip_h1_norm(&corr, &g) / fnorm,
        h1_plain: strip_h1_norm(&diff, &g) / fnorm,
        mean: ue.iter().sum::<C64>() / ue.len() as f64,
    })
}

/// Resolvent sweep with right-hand side `f(x)` (an expression in `x`).
pub fn sweep_resolvent(cs: &CoefficientSet, f_expr: &Expr, p: &ResSweepParams) -> Result<ResolventSweep> {
    if p.eps.is_empty() || p.eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ConvergeError::Argument {
            op: "sweep_resolvent",
            detail: format!("eps list must be strictly decreasing (got {:?})", p.eps),
        });
    }
    let levels = [(p.nx, p.nt), level(p.nx, p.nt, 1)];
    let limiting: Vec<DiscreteOperator> = levels
        .iter()
        .map(|&(nx, _)| assemble_limiting_from(cs, p.x_half, nx, &p.quad))
        .collect::<std::result::Result<_, _>>()?;
    let lmin = lowest_eigenvalue(&limiting[0], &SolverParams::default())?;
    let lambda = p.lambda.unwrap_or(C64::new(lmin - 1.0, 0.0));
    if p.lambda.is_some() {
        let near = eigs_near(&limiting[0], lambda, &SolverParams::with_k(1))?;
        let d = (near.pairs[0].lambda - lambda).norm();
        if d < 1e-6 * (1.0 + lambda.norm()) {
            return Err(ConvergeError::NearSpectrum {
                op: "sweep_resolvent",
                lambda,
                distance: d,
            });
        }
    }
    let mut rhs = Vec::new();
    let mut u0s = Vec::new();
    for (l, &(nx, _)) in levels.iter().enumerate() {
        let xs = line_grid(p.x_half, nx);
        let vals = f_expr
            .eval_grid(&xs, &[0.0], &cs.params)
            .map_err(|source| ConvergeError::Expr { op: "sweep_resolvent", source })?;
        let mut f: Vec<C64> = (0..nx).map(|a| vals[(a, 0)]).collect();
        f[0] = C64::new(0.0, 0.0);
        f[nx - 1] = C64::new(0.0, 0.0);
        u0s.push(solve_linear(&limiting[l], lambda, &f)?);
        rhs.push(f);
    }
    let mut tasks: Vec<(f64, usize)> = p.eps.iter().map(|&e| (e, 0)).collect();
    tasks.push((p.eps[0], 1));
    let pts = run_tasks(&tasks, p.jobs, |&(e, l)| {
        resolvent_point(cs, p, lambda, &rhs[l], &u0s[l], e, levels[l].0, levels[l].1)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let meta = format!("nx={};nt={};lambda={:.16e}{:+.16e}i", p.nx, p.nt, lambda.re, lambda.im);
    let mk = |q: Quantity, pick: &dyn Fn(&ResolventPoint) -> f64| -> ConvergenceTable {
        let rows = p
            .eps
            .iter()
            .zip(&pts)
            .map(|(&e, pt)| Row {
                eps: e,
                value: pt.mean,
                error: pick(pt),
                meta: meta.clone(),
            })
            .collect();
        let guard_pt = &pts[pts.len() - 1];
        let spatial = (pick(guard_pt) - pick(&pts[0])).abs();
        ConvergenceTable::new(q, rows).finish(FloorGuard::from_estimate(spatial, pick(&pts[0])))
    };
    Ok(ResolventSweep {
        lambda,
        table_a: mk(Quantity::ResolventL2, &|pt| pt.l2),
        table_b: mk(Quantity::ResolventH1, &|pt| pt.h1_corrected),
        h1_uncorrected: mk(Quantity::ResolventH1Uncorrected, &|pt| pt.h1_plain),
    })
}

#[derive(Debug, Clone)]
pub struct ResidualSweepParams {
    pub x_half: f64,
    pub nx: usize,
    pub nt: usize,
    pub eps: Vec<f64>,
    pub quad: QuadRule,
    pub target: f64,
    pub order: usize,
    pub jobs: usize,
}

impl Default for ResidualSweepParams {
    fn default() -> Self {
        ResidualSweepParams {
            x_half: 10.0,
            nx: 201,
            nt: 513,
            eps: DEFAULT_EPS.to_vec(),
            quad: QuadRule::new(8, 16),
            target: -1.0,
            order: 3,
            jobs: 1,
        }
    }
}

/// Residual `r(ε, N)` of the truncated expansion of the branch nearest `target`.
///
/// The floor guard repeats the sweep with `2Nt - 1` transverse nodes and compares
/// the two fitted slopes; it passes when they agree to within 0.1.
pub fn sweep_residual(cs: &CoefficientSet, p: &ResidualSweepParams) -> Result<ConvergenceTable> {
    let exp = expand(
        cs,
        p.x_half,
        p.nx,
        &p.quad,
        &ExpansionParams {
            target: p.target,
            ..Default::default()
        },
    )?;
    let nts = [p.nt, refine(p.nt)];
    let tasks: Vec<(f64, usize)> = nts.iter().flat_map(|&nt| p.eps.iter().map(move |&e| (e, nt))).collect();
    let vals = run_tasks(&tasks, p.jobs, |&(e, nt)| -> Result<f64> {
        let g = build_grid(p.x_half, p.nx, e, nt)?;
        let m = assemble_perturbed(cs, &g)?;
        Ok(crate::asymptote::residual_check(&exp, 0, &m, p.order)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = p.eps.len();
    let b = &exp.branches[0];
    let rows: Vec<Row> = p
        .eps
        .iter()
        .enumerate()
        .map(|(i, &e)| Row {
            eps: e,
            value: C64::new(b.lambda0 + e * b.lambda1 + e * e * b.lambda2.unwrap_or(0.0), 0.0),
            error: vals[i],
            meta: format!("nx={};nt={};order={}", p.nx, p.nt, p.order),
        })
        .collect();
    let guard = match (fit_rate(&p.eps, &vals[..n]), fit_rate(&p.eps, &vals[n..])) {
        (Ok((s0, _)), Ok((s1, _))) => {
            let d = (s1 - s0).abs();
            if d < 0.1 {
                FloorGuard::Passed { spatial: d, eps_error: s0 }
            } else {
                FloorGuard::FloorLimited { spatial: d, eps_error: s0 }
            }
        }
        _ => FloorGuard::NotChecked,
    };
    Ok(ConvergenceTable::new(Quantity::Residual(p.order), rows).finish(guard))
}

/// Discrete homogenized operator (shared by sweeps and the expansion).
pub fn homogenized(cs: &CoefficientSet, x_half: f64, nx: usize, quad: &QuadRule) -> Result<DiscreteOperator> {
    Ok(homogenized_operator(&LayerOps::new(cs, x_half, nx, quad)?))
}
