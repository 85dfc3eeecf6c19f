//! Two-scale asymptotics of the eigenvalues near an isolated limiting eigenvalue.
//!
//! With `x_n = εξ` the strip operator splits as `ε^{-2} H_{-2} + ε^{-1} H_{-1} + H_0`,
//! where `H_{-2} = -∂_ξ A_22 ∂_ξ`, `H_{-1} = ν*∂_ξ - ∂_ξ ν` with
//!
//! ```text
//! ν u  = A_21 ∂_1 u + (conj(A_2) + iα) u,
//! ν* w = -∂_1(A_12 w) + (A_2 + iα) w,
//! ```
//!
//! and `H_0` is the tangential part. The face condition reads `A_22 ∂_ξ u + ε ν u = 0`.
//! The ansatz `u = Σ ε^p φ^(p)`, `λ = Σ ε^p Λ^(p)` leads to one transverse cell
//! problem per order:
//!
//! ```text
//! -∂_ξ(A_22 ∂_ξ φ^(p)) + F^(p) = 0,   A_22 ∂_ξ φ^(p) + ν φ^(p-1) = 0 at ξ = ±1/2,
//! F^(p) = ν*∂_ξ φ^(p-1) - ∂_ξ ν φ^(p-1) + H_0 φ^(p-2) - Σ_{q ≤ p-2} Λ^(q) φ^(p-2-q),
//! ```
//!
//! whose solvability conditions fix the mean parts `Φ^(p-2)` and `Λ^(p-2)`.
//!
//! All tangential derivatives use the same finite-difference operators as the
//! strip matrix (centered `D`, compact flux for `A_11`, zero Dirichlet padding),
//! so the construction is an exact algebraic identity in `x` and the only
//! discretization left in [`residual_check`] is the transverse one. The
//! transverse direction is resolved on composite Gauss nodes.

use std::io::{self, Write};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::cell::{cell_profiles, cell_solve, CellError, CellProfiles, QuadRule, SOLVABILITY_TOL};
use crate::coeffexpr::C64;
use crate::disc::{line_grid, CsrMatrix, DiscError, DiscreteOperator, Grid, OperatorKind};
use crate::model::{CoeffPoint, CoefficientSet, ModelError};
use crate::spectral::{eigs_near, BandedLu, SolverParams, SpectralError};

#[derive(Debug, Error)]
pub enum AsymptoteError {
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("asymptote::{op}: eigenvalues {a} and {b} of L coincide within {tol:e}; higher orders need the nested splitting")]
    Degenerate { op: &'static str, a: f64, b: f64, tol: f64 },
    #[error("asymptote::solve_reduced: right-hand side is not orthogonal to the kernel (relative projection {projection:.3e})")]
    Solvability { projection: f64 },
    #[error("asymptote::{op}: {detail}")]
    Mismatch { op: &'static str, detail: String },
    #[error("asymptote::{op}: {detail}")]
    Argument { op: &'static str, detail: String },
}

type Result<T> = std::result::Result<T, AsymptoteError>;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// Function of `(x_a, ξ_q)` on the tangential grid times the Gauss nodes, row-major in `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nx: usize,
    pub nq: usize,
    pub data: Vec<C64>,
}

impl Field {
    pub fn zeros(nx: usize, nq: usize) -> Self {
        Field {
            nx,
            nq,
            data: vec![zero(); nx * nq],
        }
    }

    pub fn row(&self, a: usize) -> &[C64] {
        &self.data[a * self.nq..(a + 1) * self.nq]
    }

    fn row_mut(&mut self, a: usize) -> &mut [C64] {
        &mut self.data[a * self.nq..(a + 1) * self.nq]
    }

    fn zip(&self, other: &Field, f: impl Fn(C64, C64) -> C64) -> Field {
        Field {
            nx: self.nx,
            nq: self.nq,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: C64) -> Field {
        Field {
            nx: self.nx,
            nq: self.nq,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Tabulated coefficients and the tangential/transverse operators acting on fields.
#[derive(Debug, Clone)]
pub struct LayerOps {
    pub quad: QuadRule,
    pub xs: Vec<f64>,
    pub hx: f64,
    pts: Vec<CoeffPoint>,
    a11_mid: Vec<C64>,
    alpha: Vec<f64>,
    g1: Vec<C64>,
    g0: Vec<C64>,
}

impl LayerOps {
    pub fn new(cs: &CoefficientSet, x_half: f64, nx: usize, quad: &QuadRule) -> Result<Self> {
        if nx < 5 {
            return Err(AsymptoteError::Argument {
                op: "LayerOps::new",
                detail: format!("Nx must be at least 5 (got {nx})"),
            });
        }
        let xs = line_grid(x_half, nx);
        let hx = xs[1] - xs[0];
        let nq = quad.len();
        let mut pts = Vec::with_capacity(nx * nq);
        let mut a11_mid = Vec::with_capacity((nx - 1) * nq);
        let mut alpha = Vec::with_capacity(nx);
        let mut g1 = Vec::with_capacity(nx * nq);
        let mut g0 = Vec::with_capacity(nx * nq);
        for (a, &x) in xs.iter().enumerate() {
            alpha.push(cs.alpha_at(x)?);
            for &xi in &quad.nodes {
                pts.push(cs.at(x, xi)?);
            }
            let prof = cell_profiles(cs, x, quad)?;
            g1.extend(prof.g1);
            g0.extend(prof.g0);
            if a + 1 < nx {
                let xm = 0.5 * (x + xs[a + 1]);
                for &xi in &quad.nodes {
                    a11_mid.push(cs.at(xm, xi)?.a11);
                }
            }
        }
        Ok(LayerOps {
            quad: quad.clone(),
            xs,
            hx,
            pts,
            a11_mid,
            alpha,
            g1,
            g0,
        })
    }

    pub fn nx(&self) -> usize {
        self.xs.len()
    }

    pub fn nq(&self) -> usize {
        self.quad.len()
    }

    fn pt(&self, a: usize, q: usize) -> &CoeffPoint {
        &self.pts[a * self.nq() + q]
    }

    fn map(&self, f: impl Fn(usize, usize) -> C64) -> Field {
        let (nx, nq) = (self.nx(), self.nq());
        let mut out = Field::zeros(nx, nq);
        for a in 1..nx - 1 {
            for q in 0..nq {
                out.data[a * nq + q] = f(a, q);
            }
        }
        out
    }

    /// Centered difference in `x` with zero values beyond the Dirichlet nodes.
    pub fn dx(&self, u: &Field) -> Field {
        let (nq, h2) = (self.nq(), 2.0 * self.hx);
        let nx = self.nx();
        let at = |a: usize, q: usize| if a == 0 || a + 1 == nx { zero() } else { u.data[a * nq + q] };
        self.map(|a, q| (at(a + 1, q) - at(a - 1, q)) / h2)
    }

    pub fn nu(&self, u: &Field) -> Field {
        let d = self.dx(u);
        let nq = self.nq();
        self.map(|a, q| {
            let p = self.pt(a, q);
            p.a21 * d.data[a * nq + q] + (p.a2.conj() + C64::new(0.0, self.alpha[a])) * u.data[a * nq + q]
        })
    }

    pub fn nu_star(&self, w: &Field) -> Field {
        let nq = self.nq();
        let prod = self.map(|a, q| self.pt(a, q).a12 * w.data[a * nq + q]);
        let d = self.dx(&prod);
        self.map(|a, q| {
            let p = self.pt(a, q);
            -d.data[a * nq + q] + (p.a2 + C64::new(0.0, self.alpha[a])) * w.data[a * nq + q]
        })
    }

    /// Tangential operator `-∂_1 A_11 ∂_1 + A_1 ∂_1 - ∂_1(conj(A_1) ·) + A_0`.
    pub fn h0(&self, u: &Field) -> Field {
        let (nx, nq) = (self.nx(), self.nq());
        let h2 = self.hx * self.hx;
        let at = |a: usize, q: usize| if a == 0 || a + 1 == nx { zero() } else { u.data[a * nq + q] };
        let conj_a1 = self.map(|a, q| self.pt(a, q).a1.conj() * u.data[a * nq + q]);
        let d_conj = self.dx(&conj_a1);
        let du = self.dx(u);
        self.map(|a, q| {
            let p = self.pt(a, q);
            let right = self.a11_mid[a * nq + q] * (at(a + 1, q) - at(a, q));
            let left = self.a11_mid[(a - 1) * nq + q] * (at(a, q) - at(a - 1, q));
            -(right - left) / h2 + p.a1 * du.data[a * nq + q] - d_conj.data[a * nq + q] + p.a0 * u.data[a * nq + q]
        })
    }

    /// Spectral derivative in `ξ`.
    pub fn dxi(&self, u: &Field) -> Field {
        let mut out = Field::zeros(self.nx(), self.nq());
        for a in 1..self.nx() - 1 {
            out.row_mut(a).copy_from_slice(&self.quad.derivative(u.row(a)));
        }
        out
    }

    /// `∫ u dξ` at every tangential node.
    pub fn integrate(&self, u: &Field) -> Vec<C64> {
        (0..self.nx()).map(|a| self.quad.integrate(u.row(a))).collect()
    }

    pub fn face(&self, u: &Field, xi: f64) -> Vec<C64> {
        (0..self.nx()).map(|a| self.quad.value_at(u.row(a), xi)).collect()
    }

    /// `ξ`-independent extension of a line vector (Dirichlet nodes zeroed).
    pub fn lift(&self, v: &[C64]) -> Field {
        self.map(|a, _| v[a])
    }

    /// `T_6 φ = G_1 Dφ + G_0 φ`.
    pub fn t6(&self, phi: &[C64]) -> Field {
        let f = self.lift(phi);
        let d = self.dx(&f);
        let nq = self.nq();
        self.map(|a, q| self.g1[a * nq + q] * d.data[a * nq + q] + self.g0[a * nq + q] * f.data[a * nq + q])
    }

    /// Mean-zero solution of the order-`p` cell problem built from `φ^(p-1)`, `φ^(p-2)`
    /// and the eigenvalue term `r = Σ Λ^(q) φ^(p-2-q)`.
    ///
    /// The `ξ`-mean defect of the solvability condition is removed from `F` before the
    /// solve; its largest magnitude is returned next to the field.
    pub fn cell_step(&self, prev1: &Field, prev2: &Field, r: &Field) -> Result<(Field, f64)> {
        let nu_prev = self.nu(prev1);
        let f = self.nu_star(&self.dxi(prev1)).sub(&self.dxi(&nu_prev)).add(&self.h0(prev2)).sub(r);
        let gm = self.face(&nu_prev, -0.5);
        let gp = self.face(&nu_prev, 0.5);
        let nq = self.nq();
        let mut out = Field::zeros(self.nx(), nq);
        let mut defect = 0.0f64;
        let mut ann = vec![0.0; nq];
        for a in 1..self.nx() - 1 {
            let mut row = f.row(a).to_vec();
            let d = self.quad.integrate(&row) - (gm[a] - gp[a]);
            defect = defect.max(d.norm());
            row.iter_mut().for_each(|z| *z -= d);
            for (q, v) in ann.iter_mut().enumerate() {
                *v = self.pt(a, q).a22.re;
            }
            let sol = cell_solve(&ann, &row, gm[a], gp[a], &self.quad, SOLVABILITY_TOL)?;
            out.row_mut(a).copy_from_slice(&sol.phi);
        }
        Ok((out, defect))
    }

    /// Homogenized operator `∫ (ν*∂_ξ T_6 + H_0) dξ` applied to a line vector.
    pub fn h_hom_apply(&self, phi: &[C64]) -> Vec<C64> {
        let t6 = self.t6(phi);
        let field = self.nu_star(&self.dxi(&t6)).add(&self.h0(&self.lift(phi)));
        self.integrate(&field)
    }

    /// `h^(1) = ∫ (ν*∂_ξ T_7 φ + H_0 T_6 φ) dξ`, with `T_7 φ` from the order-2 cell problem.
    fn h1(&self, phi: &[C64], lambda0: f64) -> Result<(Vec<C64>, Field, f64)> {
        let t6 = self.t6(phi);
        let base = self.lift(phi);
        let (t7, defect) = self.cell_step(&t6, &base, &base.scale(C64::new(lambda0, 0.0)))?;
        let h = self.integrate(&self.nu_star(&self.dxi(&t7)).add(&self.h0(&t6)));
        Ok((h, t7, defect))
    }

    /// Values of a field at the strip nodes `ξ_m` of `g`, `a`-major.
    pub fn sample(&self, u: &Field, g: &Grid) -> Vec<C64> {
        let rows: Vec<(usize, Vec<f64>)> = (0..g.nt).map(|m| self.quad.interpolation_row(g.xi(m))).collect();
        let order = self.quad.order;
        let mut out = vec![zero(); g.len()];
        for a in 0..g.nx {
            let r = u.row(a);
            for (m, (p, w)) in rows.iter().enumerate() {
                out[g.index(a, m)] = r[p * order..(p + 1) * order].iter().zip(w).map(|(v, c)| v * c).sum();
            }
        }
        out
    }
}

/// Spec-level form of `T_6`: `Σ G_1 ∂φ + G_0 φ` tabulated per `x` node on the profile nodes.
pub fn t6_apply(phi: &[C64], dphi: &[C64], profiles: &[CellProfiles]) -> Result<Vec<Vec<C64>>> {
    if phi.len() != profiles.len() || dphi.len() != profiles.len() {
        return Err(AsymptoteError::Mismatch {
            op: "t6_apply",
            detail: format!("{} values, {} derivatives, {} profiles", phi.len(), dphi.len(), profiles.len()),
        });
    }
    Ok(profiles
        .iter()
        .zip(phi.iter().zip(dphi))
        .map(|(p, (f, df))| p.g1.iter().zip(&p.g0).map(|(g1, g0)| g1 * df + g0 * f).collect())
        .collect())
}

/// Discrete homogenized operator of `ops` as a (Hermitian, pentadiagonal) matrix.
pub fn homogenized_operator(ops: &LayerOps) -> DiscreteOperator {
    let nx = ops.nx();
    let mut trips = Vec::with_capacity(5 * nx);
    let mut max_diag = 0.0f64;
    for r in 0..5 {
        let probe: Vec<C64> = (0..nx).map(|j| if j % 5 == r { C64::new(1.0, 0.0) } else { zero() }).collect();
        let col = ops.h_hom_apply(&probe);
        for a in 1..nx - 1 {
            let lo = a.saturating_sub(2);
            if let Some(j) = (lo..=(a + 2).min(nx - 1)).find(|j| j % 5 == r) {
                if j == 0 || j + 1 == nx {
                    continue;
                }
                trips.push((a, j, col[a]));
                if j == a {
                    max_diag = max_diag.max(col[a].norm());
                }
            }
        }
    }
    let dirichlet_value = max_diag.max(1.0);
    trips.push((0, 0, C64::new(dirichlet_value, 0.0)));
    trips.push((nx - 1, nx - 1, C64::new(dirichlet_value, 0.0)));
    DiscreteOperator {
        dim: nx,
        kind: OperatorKind::Limiting,
        matrix: CsrMatrix::from_triplets(nx, trips),
        grid: None,
        xs: ops.xs.clone(),
        reflection: (0..nx).collect(),
        scale: vec![1.0; nx],
        dirichlet_value,
    }
}

fn line_inner(hx: f64, x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a * b.conj()).sum::<C64>() * hx
}

/// Solves `(M0 - λ0) Ψ = rhs` on the orthogonal complement of `span{φ_s}`.
pub fn solve_reduced(m0: &DiscreteOperator, lambda0: f64, phik: &[Vec<C64>], rhs: &[C64]) -> Result<Vec<C64>> {
    let h = m0.cell_volume();
    let n = m0.dim;
    if rhs.len() != n || phik.iter().any(|p| p.len() != n) {
        return Err(AsymptoteError::Mismatch {
            op: "solve_reduced",
            detail: format!("operator order {n}"),
        });
    }
    let rnorm = line_inner(h, rhs, rhs).re.sqrt();
    if rnorm == 0.0 {
        return Ok(vec![zero(); n]);
    }
    let project = |v: &mut Vec<C64>| {
        for _ in 0..2 {
            for p in phik {
                let c = line_inner(h, v, p) / line_inner(h, p, p);
                v.iter_mut().zip(p).for_each(|(x, y)| *x -= c * y);
            }
        }
    };
    let proj = phik
        .iter()
        .map(|p| line_inner(h, rhs, p).norm() / line_inner(h, p, p).re.sqrt())
        .fold(0.0, f64::max)
        / rnorm;
    if proj > 1e-8 {
        return Err(AsymptoteError::Solvability { projection: proj });
    }
    let delta = 1e-8 * (1.0 + lambda0.abs());
    let lu = BandedLu::new(&m0.matrix, C64::new(lambda0 + delta, 0.0))?;
    let mut r = rhs.to_vec();
    project(&mut r);
    let mut psi = vec![zero(); n];
    for _ in 0..4 {
        let mut d = lu.solve(&r);
        project(&mut d);
        psi.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
        let mp = m0.matrix.matvec(&psi);
        r = rhs.iter().zip(mp.iter().zip(&psi)).map(|(f, (a, b))| f - (a - lambda0 * b)).collect();
        project(&mut r);
        if line_inner(h, &r, &r).re.sqrt() <= 1e-13 * rnorm {
            break;
        }
    }
    Ok(psi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionParams {
    /// Shift near the limiting eigenvalue of interest.
    pub target: f64,
    /// Eigenvalues within this distance of the nearest one form the cluster.
    pub cluster_tol: f64,
    /// Eigenvalues of `L` closer than this are treated as coinciding.
    pub degeneracy_tol: f64,
    pub seed: u64,
}

impl Default for ExpansionParams {
    fn default() -> Self {
        ExpansionParams {
            target: 0.0,
            cluster_tol: 1e-6,
            degeneracy_tol: 1e-8,
            seed: crate::spectral::DEFAULT_SEED,
        }
    }
}

/// Per-eigenvalue data of the expansion.
#[derive(Debug, Clone)]
pub struct Branch {
    pub lambda0: f64,
    /// Limiting eigenvector (`L`-diagonalizing), unit norm on the line grid.
    pub phi: Vec<C64>,
    pub lambda1: f64,
    pub lambda2: Option<f64>,
    /// `Ψ^(1)`, orthogonal to every `φ_s`.
    pub psi1: Vec<C64>,
    /// `φ^(1) = T_6 φ + Φ^(1)`.
    pub phi1: Field,
    /// Mean-zero `φ^(2)` and `φ^(3)` (with `Φ^(2) = Φ^(3) = 0`).
    pub phi2: Option<Field>,
    pub phi3: Option<Field>,
}

#[derive(Debug, Clone)]
pub struct AsymptoticExpansion {
    pub ops: LayerOps,
    pub limiting: DiscreteOperator,
    pub x_half: f64,
    pub m: usize,
    pub l: DMatrix<C64>,
    pub l_hermiticity: f64,
    pub degenerate: bool,
    pub branches: Vec<Branch>,
    /// Largest solvability defect removed before the cell solves.
    pub solvability_defect: f64,
    /// `‖Π(h^(1)_k - Λ^(1)_k φ_k)‖` after the rotation.
    pub projection_residual: f64,
}

impl AsymptoticExpansion {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "k,lambda0,Lambda1,Lambda2,L_hermiticity_residual,degenerate_flag")?;
        for (k, b) in self.branches.iter().enumerate() {
            let l2 = b.lambda2.map(|v| format!("{v:.16e}")).unwrap_or_default();
            writeln!(
                w,
                "{k},{:.16e},{:.16e},{l2},{:.16e},{}",
                b.lambda0, b.lambda1, self.l_hermiticity, self.degenerate
            )?;
        }
        Ok(())
    }
}

/// Limiting eigenpairs nearest the target and the matrix `L` of first corrections.
///
/// Returns the expansion through `Λ^(1)` and `Ψ^(1)`; call [`lambda2`] for the next order.
pub fn assemble_l(cs: &CoefficientSet, x_half: f64, nx: usize, quad: &QuadRule, params: &ExpansionParams) -> Result<AsymptoticExpansion> {
    let ops = LayerOps::new(cs, x_half, nx, quad)?;
    let limiting = homogenized_operator(&ops);
    let hx = ops.hx;
    let k_probe = 4.min(nx - 3);
    let sp = SolverParams {
        k: k_probe,
        seed: params.seed,
        ..Default::default()
    };
    let rep = eigs_near(&limiting, C64::new(params.target, 0.0), &sp)?;
    let nearest = rep.pairs[0].lambda.re;
    let cluster: Vec<_> = rep
        .pairs
        .iter()
        .filter(|p| (p.lambda.re - nearest).abs() <= params.cluster_tol)
        .collect();
    let m = cluster.len();
    if m == k_probe {
        return Err(AsymptoteError::Argument {
            op: "assemble_l",
            detail: format!("cluster around {nearest} fills all {k_probe} computed eigenvalues; tighten cluster_tol"),
        });
    }
    // Limiting eigenvectors: unit norm, phase fixed so the largest entry is real positive.
    let mut phis: Vec<Vec<C64>> = cluster
        .iter()
        .map(|p| {
            let mut v = p.vector.clone();
            let big = v.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap_or(C64::new(1.0, 0.0));
            let ph = big.conj() / big.norm();
            let s = line_inner(hx, &v, &v).re.sqrt();
            v.iter_mut().for_each(|z| *z *= ph / s);
            v
        })
        .collect();
    // Orthonormalize inside the cluster.
    for i in 0..m {
        for j in 0..i {
            let c = line_inner(hx, &phis[i], &phis[j]);
            let pj = phis[j].clone();
            phis[i].iter_mut().zip(&pj).for_each(|(x, y)| *x -= c * y);
        }
        let s = line_inner(hx, &phis[i], &phis[i]).re.sqrt();
        phis[i].iter_mut().for_each(|z| *z /= s);
    }
    let lambdas: Vec<f64> = cluster.iter().map(|p| p.lambda.re).collect();
    let lambda_bar = lambdas.iter().sum::<f64>() / m as f64;

    let mut defect = 0.0f64;
    let mut h1s = Vec::with_capacity(m);
    for phi in &phis {
        let (h, _, d) = ops.h1(phi, lambda_bar)?;
        defect = defect.max(d);
        h1s.push(h);
    }
    // L_{sk} = (h^(1)_k, φ_s): the matrix of the projected map in the basis φ.
    let l = DMatrix::from_fn(m, m, |s, k| line_inner(hx, &h1s[k], &phis[s]));
    let l_hermiticity = (&l - l.adjoint()).norm() / l.norm().max(f64::MIN_POSITIVE);
    let eig = ((&l + l.adjoint()) * C64::new(0.5, 0.0)).symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut degenerate = false;
    for w in order.windows(2) {
        if (eig.eigenvalues[w[1]] - eig.eigenvalues[w[0]]).abs() <= params.degeneracy_tol {
            degenerate = true;
        }
    }
    let rotate = |vs: &[Vec<C64>], c: usize| -> Vec<C64> {
        let mut out = vec![zero(); vs[0].len()];
        for (k, v) in vs.iter().enumerate() {
            let coef = eig.eigenvectors[(k, c)];
            out.iter_mut().zip(v).for_each(|(o, x)| *o += coef * x);
        }
        out
    };
    let rphis: Vec<Vec<C64>> = order.iter().map(|&c| rotate(&phis, c)).collect();
    let rh1: Vec<Vec<C64>> = order.iter().map(|&c| rotate(&h1s, c)).collect();
    let lambda1: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c]).collect();

    let mut projection_residual = 0.0f64;
    let mut branches = Vec::with_capacity(m);
    for k in 0..m {
        let rhs: Vec<C64> = rphis[k].iter().zip(&rh1[k]).map(|(p, h)| p * lambda1[k] - h).collect();
        for s in 0..m {
            projection_residual = projection_residual.max(line_inner(hx, &rhs, &rphis[s]).norm());
        }
        let mut clean = rhs.clone();
        for s in 0..m {
            let c = line_inner(hx, &clean, &rphis[s]);
            clean.iter_mut().zip(&rphis[s]).for_each(|(x, y)| *x -= c * y);
        }
        let psi = solve_reduced(&limiting, lambda_bar, &rphis, &clean)?;
        let phi1 = ops.t6(&rphis[k]).add(&ops.lift(&psi));
        branches.push(Branch {
            lambda0: lambda_bar,
            phi: rphis[k].clone(),
            lambda1: lambda1[k],
            lambda2: None,
            psi1: psi,
            phi1,
            phi2: None,
            phi3: None,
        });
    }
    let _ = lambdas;
    Ok(AsymptoticExpansion {
        ops,
        limiting,
        x_half,
        m,
        l,
        l_hermiticity,
        degenerate,
        branches,
        solvability_defect: defect,
        projection_residual,
    })
}

/// Second corrections `Λ^(2)` and the profiles `φ^(2)`, `φ^(3)` used by [`residual_check`].
pub fn lambda2(exp: &mut AsymptoticExpansion, degeneracy_tol: f64) -> Result<Vec<f64>> {
    if exp.degenerate {
        let l1: Vec<f64> = exp.branches.iter().map(|b| b.lambda1).collect();
        return Err(AsymptoteError::Degenerate {
            op: "lambda2",
            a: l1[0],
            b: *l1.last().unwrap_or(&l1[0]),
            tol: degeneracy_tol,
        });
    }
    let ops = &exp.ops;
    let hx = ops.hx;
    let m = exp.m;
    let l0 = C64::new(exp.branches[0].lambda0, 0.0);
    let phis: Vec<Vec<C64>> = exp.branches.iter().map(|b| b.phi.clone()).collect();
    let l1s: Vec<f64> = exp.branches.iter().map(|b| b.lambda1).collect();
    let mut defect = exp.solvability_defect;

    // Order-2 and order-3 cell problems for a given Φ^(1).
    let orders = |k: usize, phi1: &Field| -> Result<(Field, Field, f64)> {
        let base = ops.lift(&phis[k]);
        let (p2, d2) = ops.cell_step(phi1, &base, &base.scale(l0))?;
        let r3 = phi1.scale(l0).add(&base.scale(C64::new(l1s[k], 0.0)));
        let (p3, d3) = ops.cell_step(&p2, phi1, &r3)?;
        Ok((p2, p3, d2.max(d3)))
    };
    let mut rhs0 = Vec::with_capacity(m);
    for k in 0..m {
        let b = &exp.branches[k];
        let (p2, p3, d) = orders(k, &b.phi1)?;
        defect = defect.max(d);
        let r = ops.integrate(&ops.nu_star(&ops.dxi(&p3)).add(&ops.h0(&p2)));
        let r: Vec<C64> = r.iter().zip(&b.psi1).map(|(v, p)| v - p * b.lambda1).collect();
        rhs0.push(r);
    }
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let l2 = line_inner(hx, &rhs0[k], &phis[k]).re;
        out.push(l2);
    }
    // Coupling coefficients b_ks and the final Φ^(1).
    for k in 0..m {
        let mut phi1 = exp.branches[k].phi1.clone();
        for s in 0..m {
            if s == k {
                continue;
            }
            let gap = exp.branches[k].lambda1 - exp.branches[s].lambda1;
            if gap.abs() <= degeneracy_tol {
                return Err(AsymptoteError::Degenerate {
                    op: "lambda2",
                    a: exp.branches[k].lambda1,
                    b: exp.branches[s].lambda1,
                    tol: degeneracy_tol,
                });
            }
            let bks = line_inner(hx, &rhs0[k], &phis[s]) / gap;
            phi1 = phi1.add(&ops.lift(&phis[s]).scale(bks));
        }
        let (p2, p3, d) = orders(k, &phi1)?;
        defect = defect.max(d);
        let b = &mut exp.branches[k];
        b.phi1 = phi1;
        b.phi2 = Some(p2);
        b.phi3 = Some(p3);
        b.lambda2 = Some(out[k]);
    }
    exp.solvability_defect = defect;
    Ok(out)
}

/// Relative residual `‖(M - λ^(ε,N)) φ^(ε,N)‖ / ‖φ^(ε,N)‖` of the truncated expansion
/// of branch `k` on the strip grid `g`; `m_strip` must be assembled on `g`.
pub fn residual_check(exp: &AsymptoticExpansion, k: usize, m_strip: &DiscreteOperator, n: usize) -> Result<f64> {
    let g = m_strip.grid.ok_or(AsymptoteError::Mismatch {
        op: "residual_check",
        detail: "operator has no strip grid".into(),
    })?;
    let ops = &exp.ops;
    if g.nx != ops.nx() || (g.x_half - exp.x_half).abs() > 1e-12 * exp.x_half {
        return Err(AsymptoteError::Mismatch {
            op: "residual_check",
            detail: format!("strip grid (X = {}, Nx = {}) vs expansion (X = {}, Nx = {})", g.x_half, g.nx, exp.x_half, ops.nx()),
        });
    }
    if !(1..=3).contains(&n) {
        return Err(AsymptoteError::Argument {
            op: "residual_check",
            detail: format!("N must be 1, 2 or 3 (got {n})"),
        });
    }
    let b = exp.branches.get(k).ok_or(AsymptoteError::Argument {
        op: "residual_check",
        detail: format!("branch {k} of {}", exp.branches.len()),
    })?;
    let eps = g.eps;
    let mut field = ops.lift(&b.phi).add(&b.phi1.scale(C64::new(eps, 0.0)));
    let mut lambda = b.lambda0 + eps * b.lambda1;
    if n >= 2 {
        let (p2, l2) = match (&b.phi2, b.lambda2) {
            (Some(p), Some(l)) => (p, l),
            _ => {
                return Err(AsymptoteError::Argument {
                    op: "residual_check",
                    detail: "N >= 2 needs lambda2() first".into(),
                })
            }
        };
        field = field.add(&p2.scale(C64::new(eps * eps, 0.0)));
        lambda += eps * eps * l2;
    }
    if n >= 3 {
        let p3 = b.phi3.as_ref().expect("set together with phi2");
        field = field.add(&p3.scale(C64::new(eps.powi(3), 0.0)));
    }
    let u = m_strip.to_scaled(&ops.sample(&field, &g));
    let mu = m_strip.matrix.matvec(&u);
    let num: f64 = mu.iter().zip(&u).map(|(a, b)| (a - b * lambda).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Full expansion through `Λ^(2)` around the limiting eigenvalue nearest `params.target`.
pub fn expand(cs: &CoefficientSet, x_half: f64, nx: usize, quad: &QuadRule, params: &ExpansionParams) -> Result<AsymptoticExpansion> {
    let mut exp = assemble_l(cs, x_half, nx, quad, params)?;
    if !exp.degenerate {
        lambda2(&mut exp, params.degeneracy_tol)?;
    }
    Ok(exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffexpr::Params;
    use crate::disc::assemble_perturbed;
    use crate::model::catalog;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn t6_of_free_problem() {
        let cs = catalog("free", &params(&[("alpha0", 0.7)])).unwrap();
        let q = QuadRule::default();
        let ops = LayerOps::new(&cs, 3.0, 31, &q).unwrap();
        let phi: Vec<C64> = ops.xs.iter().map(|x| c((x * 0.5).cos())).collect();
        let f = ops.t6(&phi);
        for a in 1..30 {
            for (qi, xi) in q.nodes.iter().enumerate() {
                let want = C64::new(0.0, -0.7 * xi) * phi[a];
                assert!((f.row(a)[qi] - want).norm() < 1e-13);
            }
        }
        let mean = ops.integrate(&f);
        assert!(mean.iter().all(|z| z.norm() < 1e-14));
        assert!(ops.t6(&vec![c(0.0); 31]).data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn t6_apply_matches_profiles() {
        let cs = catalog("shear", &params(&[("c12", 2.0)])).unwrap();
        let q = QuadRule::default();
        let profs: Vec<CellProfiles> = [0.0, 1.0].iter().map(|&x| cell_profiles(&cs, x, &q).unwrap()).collect();
        let out = t6_apply(&[c(1.0), c(2.0)], &[c(3.0), c(0.0)], &profs).unwrap();
        for (qi, xi) in q.nodes.iter().enumerate() {
            assert!((out[0][qi] - (c(3.0) * (-xi * xi + 1.0 / 12.0)) - profs[0].g0[qi]).norm() < 1e-13);
        }
        assert!(t6_apply(&[c(1.0)], &[c(3.0), c(0.0)], &profs).is_err());
    }

    #[test]
    fn homogenized_operator_is_hermitian() {
        for name in crate::model::CATALOG {
            let cs = catalog(name, &Params::new()).unwrap();
            let ops = LayerOps::new(&cs, 6.0, 61, &QuadRule::default()).unwrap();
            let m = homogenized_operator(&ops).matrix;
            let r = m.diff_frobenius(&m.adjoint()) / m.frobenius();
            assert!(r < 1e-13, "{name}: {r}");
            assert!(m.max_row_nnz() <= 5);
        }
    }

    #[test]
    fn reduced_solve_examples() {
        let m0 = DiscreteOperator {
            dim: 2,
            kind: OperatorKind::Limiting,
            matrix: CsrMatrix::from_triplets(2, vec![(0, 0, c(0.0)), (1, 1, c(2.0))]),
            grid: None,
            xs: vec![0.0, 1.0],
            reflection: vec![0, 1],
            scale: vec![1.0; 2],
            dirichlet_value: 0.0,
        };
        let e1 = vec![c(1.0), c(0.0)];
        let psi = solve_reduced(&m0, 0.0, &[e1.clone()], &[c(0.0), c(1.0)]).unwrap();
        assert!((psi[0]).norm() < 1e-14 && (psi[1] - c(0.5)).norm() < 1e-12);
        assert_eq!(solve_reduced(&m0, 0.0, &[e1.clone()], &[c(0.0), c(0.0)]).unwrap(), vec![c(0.0); 2]);
        assert!(matches!(
            solve_reduced(&m0, 0.0, &[e1.clone()], &e1),
            Err(AsymptoteError::Solvability { .. })
        ));
    }

    #[test]
    fn free_problem_has_no_corrections() {
        let cs = catalog("free", &params(&[("alpha0", 1.0)])).unwrap();
        let exp = expand(
            &cs,
            6.0,
            121,
            &QuadRule::default(),
            &ExpansionParams {
                target: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(exp.m, 1);
        let b = &exp.branches[0];
        assert!(b.lambda1.abs() < 1e-10, "{}", b.lambda1);
        assert!(b.lambda2.unwrap().abs() < 1e-10, "{:?}", b.lambda2);
    }

    #[test]
    fn residual_decreases_with_order() {
        let cs = catalog("shear", &Params::new()).unwrap();
        let exp = expand(
            &cs,
            8.0,
            161,
            &QuadRule::default(),
            &ExpansionParams {
                target: -0.1,
                ..Default::default()
            },
        )
        .unwrap();
        let g = crate::disc::build_grid(8.0, 161, 0.05, 65).unwrap();
        let m = assemble_perturbed(&cs, &g).unwrap();
        let r: Vec<f64> = (1..=3).map(|n| residual_check(&exp, 0, &m, n).unwrap()).collect();
        assert!(r[1] < r[0], "{r:?}");
    }
}
