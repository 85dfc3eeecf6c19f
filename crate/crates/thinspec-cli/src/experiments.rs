//! One function per experiment; each returns the files to write and a JSON summary.

use serde_json::{json, Value};
use thinspec::asymptote::{expand, ExpansionParams};
use thinspec::cell::QuadRule;
use thinspec::coeffexpr::{parse_with_params, C64};
use thinspec::converge::{
    lowest_eigenvalue, sweep_eigenvalue, sweep_residual, sweep_resolvent, ConvergenceTable, EigSweepParams, ResSweepParams,
    ResidualSweepParams,
};
use thinspec::disc::{assemble_limiting_from, assemble_perturbed, build_grid, limiting_table, line_grid};
use thinspec::model::{estimate_constants, validate_symmetry, CoefficientSet, ModelError, Probe};
use thinspec::spectral::{eigs_near, enclosure_check, pt_normalize, symmetry_residuals, SolverParams};

use crate::config::RunConfig;
use crate::error::CliError;

pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Value,
    /// Set when the run produced artifacts but must still exit non-zero.
    pub failure: Option<CliError>,
}

impl Outcome {
    fn ok(files: Vec<(String, Vec<u8>)>, summary: Value) -> Self {
        Outcome {
            files,
            summary,
            failure: None,
        }
    }
}

fn csv<F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>>(f: F) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn quad(cfg: &RunConfig) -> QuadRule {
    QuadRule::new(cfg.quad.order, cfg.quad.panels)
}

fn solver(cfg: &RunConfig) -> SolverParams {
    SolverParams {
        k: cfg.solver.k,
        tol: cfg.solver.tol,
        max_restarts: cfg.solver.max_restarts,
        subspace: None,
        seed: cfg.solver.seed,
    }
}

/// Configured shift, or the lowest limiting eigenvalue.
fn target(cfg: &RunConfig, cs: &CoefficientSet) -> Result<C64, CliError> {
    if let Some([re, im]) = cfg.solver.shift {
        return Ok(C64::new(re, im));
    }
    let lim = assemble_limiting_from(cs, cfg.grid.x_half, cfg.grid.nx, &quad(cfg))?;
    Ok(C64::new(lowest_eigenvalue(&lim, &solver(cfg))?, 0.0))
}

fn table_json(t: &ConvergenceTable) -> Value {
    json!({
        "quantity": t.quantity.tag(),
        "eps": t.eps(),
        "error": t.errors(),
        "fitted_rate": t.fitted_rate,
        "r2": t.fit_r2,
        "floor_guard_status": t.floor_guard.status(),
    })
}

fn table_csv(t: &ConvergenceTable) -> Vec<u8> {
    csv(|w| t.write_csv(w))
}

pub fn run(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let cs = cfg.coefficient_set()?;
    match cfg.experiment.as_str() {
        "validate" => validate(cfg, &cs),
        "limiting" => limiting(cfg, &cs),
        "spectrum" => spectrum(cfg, &cs),
        "asymptotics" => asymptotics(cfg, &cs),
        "sweep-eig" => sweep_eig(cfg, &cs),
        "sweep-res" => sweep_res(cfg, &cs),
        "residual" => residual(cfg, &cs),
        other => Err(CliError::Usage(format!("cli::run: unknown experiment `{other}`"))),
    }
}

fn validate(cfg: &RunConfig, cs: &CoefficientSet) -> Result<Outcome, CliError> {
    let probe = Probe::new(cfg.validate.probe_nx, cfg.validate.probe_nxi);
    let report = validate_symmetry(cs, &probe, cfg.validate.tol)?;
    let (constants, ellipticity) = match estimate_constants(cs, &probe) {
        Ok(r) => (r.constants, None),
        Err(e @ ModelError::Ellipticity { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut out = String::from("check,value,ok\n");
    for c in &report.checks {
        out += &format!("{},{:.16e},{}\n", c.identity, c.max_violation, c.ok);
    }
    match constants {
        Some(c) => {
            out += &format!("c0,{:.16e},{}\n", c.c0, c.c0 > 0.0);
            out += &format!("c1,{:.16e},\nc2,{:.16e},\nc3,{:.16e},\n", c.c1, c.c2, c.c3);
        }
        None => out += "c0,,false\n",
    }
    let failed: Vec<String> = report.checks.iter().filter(|c| !c.ok).map(|c| c.identity.to_string()).collect();
    let summary = json!({
        "experiment": "validate",
        "problem": cs.name,
        "sample_grid": report.sample_grid,
        "symmetry_ok": report.symmetry_ok,
        "failed_identities": failed,
        "ellipticity_error": ellipticity,
        "constants": constants.map(|c| json!({"c0": c.c0, "c1": c.c1, "c2": c.c2, "c3": c.c3})),
    });
    let failure = if !report.symmetry_ok {
        Some(CliError::Hypothesis(format!(
            "model::validate_symmetry: problem `{}` violates {}",
            cs.name,
            failed.join("; ")
        )))
    } else {
        ellipticity.map(CliError::Hypothesis)
    };
    Ok(Outcome {
        files: vec![("hypothesis.csv".into(), out.into_bytes())],
        summary,
        failure,
    })
}

fn limiting(cfg: &RunConfig, cs: &CoefficientSet) -> Result<Outcome, CliError> {
    let xs = line_grid(cfg.grid.x_half, cfg.grid.nx);
    let t = limiting_table(cs, &xs, &quad(cfg))?;
    let n = &t.nodes;
    let mut out = String::from("x,A0_11,re_A0_1,im_A0_1,re_A00,im_A00\n");
    for a in 0..xs.len() {
        out += &format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            n.xs[a], n.a11[a], n.a1[a].re, n.a1[a].im, n.a00[a].re, n.a00[a].im
        );
    }
    let lim = assemble_limiting_from(cs, cfg.grid.x_half, cfg.grid.nx, &quad(cfg))?;
    let lowest = lowest_eigenvalue(&lim, &solver(cfg))?;
    let summary = json!({
        "experiment": "limiting",
        "problem": cs.name,
        "nx": cfg.grid.nx,
        "lowest_eigenvalue": lowest,
    });
    Ok(Outcome::ok(vec![("limiting.csv".into(), out.into_bytes())], summary))
}

fn spectrum(cfg: &RunConfig, cs: &CoefficientSet) -> Result<Outcome, CliError> {
    let eps = cfg.sweep.eps[0];
    let g = build_grid(cfg.grid.x_half, cfg.grid.nx, eps, cfg.grid.nt)?;
    let m = assemble_perturbed(cs, &g)?;
    let shift = target(cfg, cs)?;
    let mut report = eigs_near(&m, shift, &solver(cfg))?;
    report.pairs = pt_normalize(&m, &report.pairs)?;
    let probe = Probe::new(cfg.validate.probe_nx, cfg.validate.probe_nxi);
    if let Some(c) = estimate_constants(cs, &probe)?.constants {
        report.enclosure = enclosure_check(&report, &c, None).into_iter().map(Some).collect();
    }
    let mm = assemble_perturbed(&cs.negated_alpha(), &g)?;
    let sym = symmetry_residuals(&m, &mm)?;
    report.symmetry_residuals = Some(sym);
    let summary = json!({
        "experiment": "spectrum",
        "problem": cs.name,
        "eps": eps,
        "shift": [shift.re, shift.im],
        "eigenvalues": report.pairs.iter().map(|p| [p.lambda.re, p.lambda.im]).collect::<Vec<_>>(),
        "residuals": report.pairs.iter().map(|p| p.residual).collect::<Vec<_>>(),
        "enclosure_ok": report.enclosure,
        "symmetry_residuals": sym,
    });
    Ok(Outcome::ok(vec![("spectrum.csv".into(), csv(|w| report.write_csv(w)))], summary))
}

fn expansion_params(cfg: &RunConfig, cs: &CoefficientSet) -> Result<ExpansionParams, CliError> {
    Ok(ExpansionParams {
        target: target(cfg, cs)?.re,
        cluster_tol: cfg.asymptotics.cluster_tol,
        degeneracy_tol: cfg.asymptotics.degeneracy_tol,
        seed: cfg.solver.seed,
    })
}

fn asymptotics(cfg: &RunConfig, cs: &CoefficientSet) -> Result<Outcome, CliError> {
    let exp = expand(cs, cfg.grid.x_half, cfg.grid.nx, &quad(cfg), &expansion_params(cfg, cs)?)?;
    let summary = json!({
        "experiment": "asymptotics",
        "problem": cs.name,
        "multiplicity": exp.m,
        "lambda0": exp.branches[0].lambda0,
        "Lambda1": exp.branches.iter().map(|b| b.lambda1).collect::<Vec<_>>(),
        "Lambda2": exp.branches.iter().map(|b| b.lambda2).collect::<Vec<_>>(),
        "L_hermiticity_residual": exp.l_hermiticity,
        "degenerate": exp.degenerate,
        "solvability_defect": exp.solvability_defect,
    });
    let failure = exp.degenerate.then(|| {
        let l1: Vec<f64> = exp.branches.iter().map(|b| b.lambda1).collect();
        CliError::Numerical(format!(
            "asymptote::assemble_l: eigenvalues of L coincide within {:e} ({l1:?}); Lambda2 not computed",
            cfg.asymptotics.degeneracy_tol
        ))
    });
    Ok(Outcome {
        files: vec![("expansion.csv".into(), csv(|w| exp.write_csv(w)))],
        summary,
        failure,
    })
}

fn sweep_eig(cfg: &RunConfig, cs: &CoefficientSet) -> Result<Outcome, CliError> {
    let p = EigSweepParams {
        x_half: cfg.grid.x_half,
        nx: cfg.grid.nx,
        nt: cfg.grid.nt,
        eps: cfg.sweep.eps.clone(),
        quad: quad(cfg),
        solver: SolverParams {
            k: cfg.solver.k.clamp(2, 3),
            ..solver(cfg)
        },
        target: target(cfg, cs)?.re,
        cluster_tol: cfg.asymptotics.cluster_tol,
        extrapolate: cfg.sweep.extrapolate,
        jobs: cfg.sweep.jobs,
    };
    let s = sweep_eigenvalue(cs, &p)?;
    let summary = json!({
        "experiment": "sweep-eig",
        "problem": cs.name,
        "lambda0": s.lambda0,
        "Lambda1": s.lambda1,
        "Lambda2": s.lambda2,
        "richardson_Lambda1": s.oracle_lambda1.map(|(v, e)| json!({"limit": v, "error_estimate": e})),
        "max_im_over_residual": s.reality_ratio(),
        "first_order": table_json(&s.first),
        "remainder": table_json(&s.remainder),
    });
    Ok(Outcome::ok(
        vec![
            ("sweep_eig.csv".into(), table_csv(&s.first)),
            ("sweep_eig_remainder.csv".into(), table_csv(&s.remainder)),
        ],
        summary,
    ))
}

fn sweep_res(cfg: &RunConfig, cs: &CoefficientSet) -> Result<Outcome, CliError> {
    let f = parse_with_params(&cfg.resolvent.f, &cs.params.keys().cloned().collect())?;
    let p = ResSweepParams {
        x_half: cfg.grid.x_half,
        nx: cfg.grid.nx,
        nt: cfg.grid.nt,
        eps: cfg.sweep.eps.clone(),
        quad: quad(cfg),
        lambda: cfg.resolvent.lambda.map(|[re, im]| C64::new(re, im)),
        jobs: cfg.sweep.jobs,
    };
    let r = sweep_resolvent(cs, &f, &p)?;
    let summary = json!({
        "experiment": "sweep-res",
        "problem": cs.name,
        "lambda": [r.lambda.re, r.lambda.im],
        "table_a": table_json(&r.table_a),
        "table_b": table_json(&r.table_b),
        "h1_uncorrected": table_json(&r.h1_uncorrected),
    });
    Ok(Outcome::ok(
        vec![
            ("resolvent_L2.csv".into(), table_csv(&r.table_a)),
            ("resolvent_H1.csv".into(), table_csv(&r.table_b)),
            ("resolvent_H1_uncorrected.csv".into(), table_csv(&r.h1_uncorrected)),
        ],
        summary,
    ))
}

fn residual(cfg: &RunConfig, cs: &CoefficientSet) -> Result<Outcome, CliError> {
    let p = ResidualSweepParams {
        x_half: cfg.grid.x_half,
        nx: cfg.grid.nx,
        nt: cfg.grid.nt,
        eps: cfg.sweep.eps.clone(),
        quad: quad(cfg),
        target: target(cfg, cs)?.re,
        order: cfg.asymptotics.order,
        jobs: cfg.sweep.jobs,
    };
    let t = sweep_residual(cs, &p)?;
    let summary = json!({
        "experiment": "residual",
        "problem": cs.name,
        "order": p.order,
        "table": table_json(&t),
    });
    Ok(Outcome::ok(vec![(format!("residual_{}.csv", p.order), table_csv(&t))], summary))
}
