//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line on stdout.

use std::io::Write;
use std::sync::OnceLock;

use thinspec::asymptote::{assemble_l, expand, ExpansionParams};
use thinspec::cell::{b_coefficients, cell_solve, limiting_at, CellError, QuadRule};
use thinspec::coeffexpr::{parse, Params, C64};
use thinspec::converge::{
    lowest_eigenvalue, sweep_eigenvalue, sweep_residual, sweep_resolvent, EigSweepParams, EigenSweep, ResSweepParams,
    ResidualSweepParams, DEFAULT_EPS,
};
use thinspec::disc::{assemble_limiting_from, assemble_perturbed, build_grid, DiscreteOperator};
use thinspec::model::{catalog, estimate_constants, CoefficientSet, CoefficientSource, Probe, CATALOG};
use thinspec::spectral::{dense_eigs_near, eigs_near, enclosure_check, symmetry_residuals, SolverParams};

fn report(n: u32, title: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {n:>2} {}: {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // Written past the test harness capture so the line shows for passing tests too.
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn problem(name: &str) -> CoefficientSet {
    catalog(name, &Params::new()).unwrap()
}

fn mutant() -> CoefficientSet {
    let src = CoefficientSource {
        a12: "xi^2".into(),
        a21: "xi^2".into(),
        ..problem("shear").source()
    };
    CoefficientSet::from_source("mutant", &src, problem("shear").params).unwrap()
}

/// Composite Simpson rule on `[-1/2, 1/2]`, independent of the library quadrature.
fn simpson(f: impl Fn(f64) -> C64) -> C64 {
    let n = 4000;
    let h = 1.0 / n as f64;
    let mut s = f(-0.5) + f(0.5);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += f(-0.5 + i as f64 * h) * w;
    }
    s * (h / 3.0)
}

fn sweep_params(target: f64) -> EigSweepParams {
    EigSweepParams {
        target,
        ..Default::default()
    }
}

fn ground_state(cs: &CoefficientSet) -> f64 {
    let lim = assemble_limiting_from(cs, 10.0, 201, &QuadRule::default()).unwrap();
    lowest_eigenvalue(&lim, &SolverParams::default()).unwrap()
}

fn shear_sweep() -> &'static EigenSweep {
    static S: OnceLock<EigenSweep> = OnceLock::new();
    S.get_or_init(|| {
        let cs = problem("shear");
        sweep_eigenvalue(&cs, &sweep_params(ground_state(&cs))).unwrap()
    })
}

fn fullmix_sweep() -> &'static EigenSweep {
    static S: OnceLock<EigenSweep> = OnceLock::new();
    S.get_or_init(|| {
        let cs = problem("fullmix");
        sweep_eigenvalue(&cs, &sweep_params(ground_state(&cs))).unwrap()
    })
}

#[test]
fn criterion_01_hypothesis_validation() {
    let probe = Probe::new(41, 21);
    let mut worst = 0.0f64;
    let mut min_c0 = f64::INFINITY;
    let mut all_ok = true;
    for name in CATALOG {
        let rep = estimate_constants(&problem(name), &probe).unwrap();
        all_ok &= rep.symmetry_ok;
        worst = rep.checks.iter().map(|c| c.max_violation).fold(worst, f64::max);
        min_c0 = min_c0.min(rep.constants.unwrap().c0);
    }
    let mutant_rep = estimate_constants(&mutant(), &probe).unwrap();
    let pass = all_ok && worst <= 1e-12 && min_c0 > 0.0 && !mutant_rep.symmetry_ok;
    report(
        1,
        "hypothesis validation",
        pass,
        format!(
            "max violation {worst:.2e}, min c0 {min_c0:.4}, mutant rejected {}",
            !mutant_rep.symmetry_ok
        ),
    );
}

#[test]
fn criterion_02_homogenization_quadrature() {
    let quad = QuadRule::default();
    let cs = problem("shear");
    let (c12, a0) = (cs.params["c12"], cs.params["alpha0"]);
    let (a11, _, a00) = limiting_at(&cs, 0.0, &quad).unwrap();
    let e_shear = (a11 - (1.0 - c12 * c12 / 12.0)).abs().max((a00 - C64::new(-2.0 + a0 * a0, 0.0)).norm());
    // Limiting coefficients from the cell averages, evaluated with an independent rule.
    let mut e_formula = 0.0f64;
    let mut e_b = 0.0f64;
    for name in CATALOG {
        let cs = problem(name);
        for &x in &[-3.0, -0.7, 0.0, 1.3, 4.0] {
            let alpha = cs.alpha_at(x).unwrap();
            let ia = C64::new(0.0, alpha);
            let at = |xi: f64| cs.at(x, xi).unwrap();
            let w11 = simpson(|xi| {
                let p = at(xi);
                p.a11 - p.a12 * p.a21 / p.a22
            });
            let w1 = simpson(|xi| {
                let p = at(xi);
                p.a1 - (p.a2 + ia) * p.a21 / p.a22
            });
            let w00 = simpson(|xi| {
                let p = at(xi);
                p.a0 - (p.a2 + ia) * (p.a2.conj() + ia) / p.a22
            });
            let (l11, l1, l00) = limiting_at(&cs, x, &quad).unwrap();
            e_formula = e_formula.max((w11 - l11).norm()).max((w1 - l1).norm()).max((w00 - l00).norm());
            let b11 = simpson(|xi| b_coefficients(&cs, x, xi).unwrap().b11);
            let b1 = simpson(|xi| b_coefficients(&cs, x, xi).unwrap().b1);
            let b0 = simpson(|xi| b_coefficients(&cs, x, xi).unwrap().b0);
            e_b = e_b.max((b11 - l11).norm()).max((b1 - l1).norm()).max((b0 - l00).norm());
        }
    }
    let pass = e_shear <= 1e-10 && e_formula <= 1e-12 && e_b <= 1e-12;
    report(
        2,
        "homogenization quadrature",
        pass,
        format!("shear analytic {e_shear:.2e}, averaged formulas {e_formula:.2e}, integrated B {e_b:.2e}"),
    );
}

#[test]
fn criterion_03_cell_solver() {
    let quad = QuadRule::default();
    let pi2 = 2.0 * std::f64::consts::PI;
    let f: Vec<C64> = quad.nodes.iter().map(|&t| C64::new((pi2 * t).cos(), 0.0)).collect();
    let ones = vec![1.0; quad.len()];
    let zero = C64::new(0.0, 0.0);
    let sol = cell_solve(&ones, &f, zero, zero, &quad, 1e-10).unwrap();
    let err = quad
        .nodes
        .iter()
        .zip(&sol.phi)
        .map(|(&t, v)| (v - C64::new(-(pi2 * t).cos() / (pi2 * pi2), 0.0)).norm())
        .fold(0.0, f64::max);
    let mean = quad.integrate(&sol.phi).norm();
    let shifted: Vec<C64> = f.iter().map(|v| v + 2e-10).collect();
    let detected = matches!(
        cell_solve(&ones, &shifted, zero, zero, &quad, 1e-10),
        Err(CellError::Solvability { .. })
    );
    let pass = err <= 1e-10 && mean <= 1e-12 && detected;
    report(
        3,
        "cell solver",
        pass,
        format!("max error {err:.2e}, mean {mean:.2e}, violation of 2e-10 detected {detected}"),
    );
}

fn pt_residuals(cs: &CoefficientSet) -> [f64; 3] {
    let g = build_grid(10.0, 201, 0.1, 17).unwrap();
    let m = assemble_perturbed(cs, &g).unwrap();
    let mm = assemble_perturbed(&cs.negated_alpha(), &g).unwrap();
    symmetry_residuals(&m, &mm).unwrap()
}

#[test]
fn criterion_04_discrete_pt_structure() {
    let mut pass = true;
    let mut detail = Vec::new();
    for name in CATALOG {
        let r = pt_residuals(&problem(name));
        pass &= r.iter().all(|v| *v <= 1e-12);
        detail.push(format!("{name} [{:.1e}, {:.1e}, {:.1e}]", r[0], r[1], r[2]));
    }
    let rm = pt_residuals(&mutant());
    let fired = rm.iter().cloned().fold(0.0, f64::max) >= 1e-3;
    pass &= fired;
    detail.push(format!("mutant max {:.1e}", rm.iter().cloned().fold(0.0, f64::max)));
    report(4, "discrete PT structure", pass, detail.join("; "));
}

#[test]
fn criterion_05_poschl_teller_ground_state() {
    let cs = problem("pt_well");
    let a0 = cs.params["alpha0"];
    let lim = assemble_limiting_from(&cs, 12.0, 2001, &QuadRule::default()).unwrap();
    let l = lowest_eigenvalue(&lim, &SolverParams::default()).unwrap();
    let err = (l - (-1.0 + a0 * a0)).abs();
    report(
        5,
        "Poschl-Teller ground state",
        err <= 1e-4,
        format!("lambda0 = {l:.10}, error {err:.2e}"),
    );
}

#[test]
fn criterion_06_separable_case() {
    let cs = problem("free");
    let s = sweep_eigenvalue(&cs, &sweep_params(ground_state(&cs))).unwrap();
    let floor = match s.first.floor_guard {
        thinspec::converge::FloorGuard::FloorLimited { spatial, .. } | thinspec::converge::FloorGuard::Passed { spatial, .. } => spatial,
        thinspec::converge::FloorGuard::NotChecked => f64::NAN,
    };
    let errs = s.first.errors();
    let at_floor = errs.iter().all(|e| *e <= 2.0 * floor);
    let exp = expand(
        &cs,
        10.0,
        401,
        &QuadRule::default(),
        &ExpansionParams {
            target: s.lambda0,
            ..Default::default()
        },
    )
    .unwrap();
    let b = &exp.branches[0];
    let l2 = b.lambda2.unwrap_or(f64::NAN);
    let pass = at_floor && b.lambda1.abs() <= 1e-6 && l2.abs() <= 1e-6;
    report(
        6,
        "separable case",
        pass,
        format!(
            "errors {:?} vs spatial floor {floor:.2e}; Lambda1 {:.1e}, Lambda2 {l2:.1e}",
            errs.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>(),
            b.lambda1
        ),
    );
}

#[test]
fn criterion_07_reality() {
    let ratios = [shear_sweep().reality_ratio(), fullmix_sweep().reality_ratio()];
    let eps_ok = shear_sweep().first.eps() == DEFAULT_EPS.to_vec();
    report(
        7,
        "reality of perturbed eigenvalues",
        ratios.iter().all(|r| *r <= 10.0) && eps_ok,
        format!("max |Im lambda|/residual: shear {:.2e}, fullmix {:.2e}", ratios[0], ratios[1]),
    );
}

#[test]
fn criterion_08_eigenvalue_rates() {
    let s = shear_sweep();
    let r1 = s.first.fitted_rate.unwrap_or(f64::NAN);
    let r2 = s.remainder.fitted_rate.unwrap_or(f64::NAN);
    let pass = r1 >= 0.9 && r2 >= 1.7 && s.first.floor_guard.passed() && s.remainder.floor_guard.passed();
    report(
        8,
        "eigenvalue convergence rates",
        pass,
        format!(
            "shear |l-l0| rate {r1:.3}, |l-l0-eps L1| rate {r2:.3}, guards {} / {}",
            s.first.floor_guard.status(),
            s.remainder.floor_guard.status()
        ),
    );
}

#[test]
fn criterion_09_lambda1_oracle() {
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, s) in [("shear", shear_sweep()), ("fullmix", fullmix_sweep())] {
        let cs = problem(name);
        let exp = assemble_l(
            &cs,
            10.0,
            401,
            &QuadRule::new(8, 16),
            &ExpansionParams {
                target: s.lambda0,
                ..Default::default()
            },
        )
        .unwrap();
        let l1 = exp.branches[0].lambda1;
        let (oracle, est) = s.oracle_lambda1.unwrap();
        let diff = (l1 - oracle).abs();
        pass &= diff <= est.max(1e-4);
        detail.push(format!("{name}: Lambda1 {l1:.6e}, Richardson {oracle:.6e} (est {est:.1e}), diff {diff:.1e}"));
    }
    report(9, "Lambda1 against Richardson oracle", pass, detail.join("; "));
}

/// Symmetric double well on the real-coefficient part of the mixed problem.
fn double_well() -> CoefficientSet {
    let base = problem("fullmix");
    let mut params = base.params.clone();
    params.insert("a1".into(), 0.0);
    params.insert("a0".into(), 0.0);
    let src = CoefficientSource {
        a0: "-2*sech(x-5)^2 - 2*sech(x+5)^2 + i*a0*xi".into(),
        ..base.source()
    };
    CoefficientSet::from_source("double_well", &src, params).unwrap()
}

#[test]
fn criterion_10_l_hermitian() {
    let cs = double_well();
    let exp = assemble_l(
        &cs,
        12.0,
        401,
        &QuadRule::new(8, 16),
        &ExpansionParams {
            target: 0.0,
            cluster_tol: 1e-3,
            ..Default::default()
        },
    )
    .unwrap();
    let norm = exp.l.norm();
    let pass = exp.m == 2 && norm > 1e-3 && exp.l_hermiticity <= 1e-8;
    report(
        10,
        "matrix L Hermitian",
        pass,
        format!("m = {}, |L|_F = {norm:.3e}, |L - L^H|_F/|L|_F = {:.2e}", exp.m, exp.l_hermiticity),
    );
}

#[test]
fn criterion_11_resolvent() {
    let cs = problem("free");
    let r = sweep_resolvent(&cs, &parse("sech(x)").unwrap(), &ResSweepParams::default()).unwrap();
    let ra = r.table_a.fitted_rate.unwrap_or(f64::NAN);
    let rb = r.table_b.fitted_rate.unwrap_or(f64::NAN);
    let smaller = r
        .table_b
        .errors()
        .iter()
        .zip(r.h1_uncorrected.errors())
        .all(|(c, u)| *c < u);
    let pass = ra >= 0.9 && rb >= 0.9 && smaller && r.table_a.floor_guard.passed() && r.table_b.floor_guard.passed();
    report(
        11,
        "resolvent convergence",
        pass,
        format!("Table A rate {ra:.3}, Table B rate {rb:.3}, corrected < uncorrected at every eps {smaller}"),
    );
}

#[test]
fn criterion_12_residual_estimate() {
    let cs = problem("shear");
    let target = ground_state(&cs);
    let mut pass = true;
    let mut detail = Vec::new();
    for n in [2usize, 3] {
        let t = sweep_residual(
            &cs,
            &ResidualSweepParams {
                order: n,
                target,
                ..Default::default()
            },
        )
        .unwrap();
        let rate = t.fitted_rate.unwrap_or(f64::NAN);
        pass &= rate >= n as f64 - 1.2 && t.floor_guard.passed();
        detail.push(format!("N={n}: rate {rate:.3} (guard {})", t.floor_guard.status()));
    }
    report(12, "residual of the truncated expansion", pass, detail.join("; "));
}

#[test]
fn criterion_13_enclosure() {
    let probe = Probe::new(41, 21);
    let mut count = 0;
    let mut bad = 0;
    for name in CATALOG {
        let cs = problem(name);
        let c = estimate_constants(&cs, &probe).unwrap().constants.unwrap();
        let shift = C64::new(ground_state(&cs), 0.0);
        for &e in &DEFAULT_EPS {
            let g = build_grid(10.0, 201, e, 17).unwrap();
            let m = assemble_perturbed(&cs, &g).unwrap();
            let rep = eigs_near(&m, shift, &SolverParams::with_k(6)).unwrap();
            let ok = enclosure_check(&rep, &c, None);
            count += ok.len();
            bad += ok.iter().filter(|b| !**b).count();
        }
    }
    report(
        13,
        "spectral enclosure",
        bad == 0,
        format!("{} of {count} eigenvalues inside the enclosure", count - bad),
    );
}

fn compare_solvers(op: &DiscreteOperator, sigma: C64) -> f64 {
    let k = 6;
    let rep = eigs_near(op, sigma, &SolverParams::with_k(k)).unwrap();
    let dense = dense_eigs_near(op, sigma, k).unwrap();
    rep.pairs
        .iter()
        .map(|p| dense.iter().map(|d| (d - p.lambda).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_14_solver_equivalence() {
    let mut worst = 0.0f64;
    let mut count = 0;
    for name in CATALOG {
        let cs = problem(name);
        let sigma = C64::new(ground_state(&cs) + 0.01, 0.0);
        let lim = assemble_limiting_from(&cs, 10.0, 301, &QuadRule::default()).unwrap();
        worst = worst.max(compare_solvers(&lim, sigma));
        count += 1;
        for (nx, nt, e) in [(41, 9, 0.1), (61, 9, 0.2)] {
            let g = build_grid(10.0, nx, e, nt).unwrap();
            let m = assemble_perturbed(&cs, &g).unwrap();
            assert!(m.dim <= 600);
            worst = worst.max(compare_solvers(&m, sigma));
            count += 1;
        }
    }
    report(
        14,
        "Arnoldi against dense QR",
        worst <= 1e-8,
        format!("{count} matrices, max eigenvalue difference {worst:.2e}"),
    );
}
