//! Eigenvalues, resolvents and symmetry diagnostics of assembled operators.
//!
//! Eigenpairs nearest a shift come from a Krylov-Schur restarted Arnoldi
//! iteration on `(M - σ)^{-1}`, applied through a banded LU factorization with
//! partial pivoting. A dense Schur decomposition serves as the reference for
//! small matrices.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coeffexpr::C64;
use crate::disc::{CsrMatrix, DiscreteOperator};
use crate::model::Constants;

pub const DEFAULT_SEED: u64 = 0x7468_696e;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("spectral::{op}: matrix is singular at shift {shift} (zero pivot in column {column}); perturb the shift")]
    Singular { op: &'static str, shift: C64, column: usize },
    #[error("spectral::{op}: ill-conditioned system at {shift} (pivot ratio estimate {estimate:.3e}, residual {residual:.3e})")]
    IllConditioned {
        op: &'static str,
        shift: C64,
        estimate: f64,
        residual: f64,
    },
    #[error("spectral::eigs_near: {converged} of {wanted} Ritz pairs converged after {restarts} restarts")]
    NoConvergence {
        restarts: usize,
        converged: usize,
        wanted: usize,
    },
    #[error("spectral::eigs_near: {0}")]
    Argument(String),
    #[error("spectral::dense_eigs: Schur iteration did not converge")]
    Schur,
    #[error("spectral::pt_normalize: P-pairing of vector {index} is {value:.3e}; the eigenvector is self-orthogonal")]
    Degenerate { index: usize, value: f64 },
    #[error("spectral::{op}: dimension mismatch ({a} vs {b})")]
    Mismatch { op: &'static str, a: usize, b: usize },
}

/// LU factorization `P A = L U` of a banded matrix, row-window storage.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<C64>,
    piv: Vec<usize>,
    min_pivot: f64,
    max_pivot: f64,
}

impl BandedLu {
    /// Factors `A - shift·I`.
    pub fn new(a: &CsrMatrix, shift: C64) -> Result<Self, SpectralError> {
        let n = a.n;
        let (kl, ku) = a.bandwidths();
        let up = kl + ku;
        let width = kl + up + 1;
        let mut data = vec![C64::new(0.0, 0.0); n * width];
        let at = |i: usize, j: usize| i * width + j + kl - i;
        for i in 0..n {
            for (j, v) in a.row(i) {
                data[at(i, j)] += v;
            }
            data[at(i, i)] -= shift;
        }
        let mut piv = vec![0usize; n];
        let (mut min_pivot, mut max_pivot) = (f64::INFINITY, 0.0f64);
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = data[at(k, k)].norm();
            for i in k + 1..=last {
                let v = data[at(i, k)].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            piv[k] = p;
            if best == 0.0 {
                return Err(SpectralError::Singular {
                    op: "factor",
                    shift,
                    column: k,
                });
            }
            min_pivot = min_pivot.min(best);
            max_pivot = max_pivot.max(best);
            let jend = (k + up).min(n - 1);
            if p != k {
                for j in k..=jend {
                    data.swap(at(k, j), at(p, j));
                }
            }
            let pivot = data[at(k, k)];
            let (head, tail) = data.split_at_mut((k + 1) * width);
            let krow = &head[at(k, k + 1).min(head.len())..];
            for i in k + 1..=last {
                let base = (i - k - 1) * width;
                let off = |j: usize| base + j + kl - i;
                let l = tail[off(k)] / pivot;
                tail[off(k)] = l;
                if l == C64::new(0.0, 0.0) {
                    continue;
                }
                let cnt = jend - k;
                let dst = &mut tail[off(k + 1)..off(k + 1) + cnt];
                for (d, s) in dst.iter_mut().zip(&krow[..cnt]) {
                    *d -= l * s;
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            width,
            data,
            piv,
            min_pivot,
            max_pivot,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Ratio of the largest to the smallest pivot: a cheap conditioning indicator.
    pub fn pivot_ratio(&self) -> f64 {
        self.max_pivot / self.min_pivot
    }

    pub fn solve_in_place(&self, b: &mut [C64]) {
        let (n, kl, w) = (self.n, self.kl, self.width);
        let up = self.kl + self.ku;
        let at = |i: usize, j: usize| i * w + j + kl - i;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk == C64::new(0.0, 0.0) {
                continue;
            }
            for i in k + 1..=(k + kl).min(n - 1) {
                b[i] -= self.data[at(i, k)] * bk;
            }
        }
        for i in (0..n).rev() {
            let jend = (i + up).min(n - 1);
            let row = &self.data[at(i, i)..=at(i, jend)];
            let mut s = b[i];
            for (a, x) in row[1..].iter().zip(&b[i + 1..=jend]) {
                s -= a * x;
            }
            b[i] = s / row[0];
        }
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Hermitian inner product `Σ x_i conj(y_i)`.
fn dot(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a * b.conj()).sum()
}

/// Solves `(M - λ) u = f` with one step of iterative refinement.
pub fn solve_linear(m: &DiscreteOperator, lambda: C64, f: &[C64]) -> Result<Vec<C64>, SpectralError> {
    if f.len() != m.dim {
        return Err(SpectralError::Mismatch {
            op: "solve_linear",
            a: f.len(),
            b: m.dim,
        });
    }
    let lu = BandedLu::new(&m.matrix, lambda)?;
    solve_with(&lu, &m.matrix, lambda, f)
}

/// Refined solve with an existing factorization of `M - λ`.
///
/// Fails when the normwise backward error `‖r‖ / (‖M - λ‖_∞ ‖u‖ + ‖f‖)` exceeds `1e-10`.
pub fn solve_with(lu: &BandedLu, a: &CsrMatrix, lambda: C64, f: &[C64]) -> Result<Vec<C64>, SpectralError> {
    let residual = |u: &[C64]| -> Vec<C64> {
        let mu = a.matvec(u);
        f.iter().zip(mu.iter().zip(u)).map(|(fi, (mi, ui))| fi - (mi - lambda * ui)).collect()
    };
    let mut u = lu.solve(f);
    let r = residual(&u);
    let du = lu.solve(&r);
    for (x, d) in u.iter_mut().zip(&du) {
        *x += d;
    }
    let fnorm = norm(f);
    let rnorm = norm(&residual(&u));
    let anorm = (0..a.n)
        .map(|i| a.row(i).map(|(j, v)| if i == j { (v - lambda).norm() } else { v.norm() }).sum::<f64>())
        .fold(0.0, f64::max);
    if rnorm > 1e-10 * (anorm * norm(&u) + fnorm).max(f64::MIN_POSITIVE) {
        return Err(SpectralError::IllConditioned {
            op: "solve_linear",
            shift: lambda,
            estimate: lu.pivot_ratio(),
            residual: rnorm / fnorm,
        });
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub lambda: C64,
    /// Eigenvector in scaled coordinates, unit norm in the discrete `L_2` product.
    pub vector: Vec<C64>,
    /// `‖M v - λ v‖ / ‖v‖`.
    pub residual: f64,
    /// The P-pairing `(v, P v)`.
    pub pt_norm: C64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub pairs: Vec<EigenPair>,
    pub shift: C64,
    pub enclosure: Vec<Option<bool>>,
    pub symmetry_residuals: Option<[f64; 3]>,
}

impl SpectrumReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "k,re_lambda,im_lambda,residual,re_pt_norm,im_pt_norm,enclosure_ok")?;
        for (k, p) in self.pairs.iter().enumerate() {
            let enc = match self.enclosure.get(k).copied().flatten() {
                Some(true) => "true",
                Some(false) => "false",
                None => "",
            };
            writeln!(
                w,
                "{k},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{enc}",
                p.lambda.re, p.lambda.im, p.residual, p.pt_norm.re, p.pt_norm.im
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub k: usize,
    pub tol: f64,
    pub max_restarts: usize,
    /// Krylov subspace size; `None` means `4k + 10`.
    pub subspace: Option<usize>,
    pub seed: u64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            k: 1,
            tol: 1e-10,
            max_restarts: 40,
            subspace: None,
            seed: DEFAULT_SEED,
        }
    }
}

impl SolverParams {
    pub fn with_k(k: usize) -> Self {
        SolverParams {
            k,
            ..Default::default()
        }
    }
}

/// Eigenvectors of an upper-triangular matrix, one column per diagonal entry.
fn triangular_eigenvectors(t: &DMatrix<C64>) -> DMatrix<C64> {
    let n = t.nrows();
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let small = scale * f64::EPSILON;
    let mut y = DMatrix::zeros(n, n);
    for i in 0..n {
        let lam = t[(i, i)];
        y[(i, i)] = C64::new(1.0, 0.0);
        for j in (0..i).rev() {
            let mut s = C64::new(0.0, 0.0);
            for l in j + 1..=i {
                s += t[(j, l)] * y[(l, i)];
            }
            let mut d = t[(j, j)] - lam;
            if d.norm() < small {
                d = C64::new(small, 0.0);
            }
            y[(j, i)] = -s / d;
        }
        let nrm = y.column(i).norm();
        y.column_mut(i).unscale_mut(nrm);
    }
    y
}

fn schur(m: DMatrix<C64>) -> Result<(DMatrix<C64>, DMatrix<C64>), SpectralError> {
    let n = m.nrows();
    Schur::try_new(m, f64::EPSILON, 1000 * n.max(10))
        .map(|s| s.unpack())
        .ok_or(SpectralError::Schur)
}

/// Eigenvalues and unit eigenvectors of a small dense matrix.
fn dense_eig(m: &DMatrix<C64>) -> Result<(Vec<C64>, DMatrix<C64>), SpectralError> {
    let (q, t) = schur(m.clone())?;
    let y = triangular_eigenvectors(&t);
    let vals = (0..t.nrows()).map(|i| t[(i, i)]).collect();
    Ok((vals, q * y))
}

/// All eigenvalues of a dense matrix (Hessenberg reduction and shifted QR).
pub fn dense_eigenvalues(m: &DMatrix<C64>) -> Result<Vec<C64>, SpectralError> {
    let (_, t) = schur(m.clone())?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// The `k` eigenvalues of `op` nearest `sigma` from a dense decomposition.
pub fn dense_eigs_near(op: &DiscreteOperator, sigma: C64, k: usize) -> Result<Vec<C64>, SpectralError> {
    let mut vals = dense_eigenvalues(&op.matrix.to_dense())?;
    vals.sort_by(|a, b| (a - sigma).norm().total_cmp(&(b - sigma).norm()));
    vals.truncate(k);
    Ok(vals)
}

/// Orthonormalizes `w` against `basis` with one reorthogonalization pass.
fn orthogonalize(basis: &[Vec<C64>], w: &mut [C64]) -> Vec<C64> {
    let mut h = vec![C64::new(0.0, 0.0); basis.len()];
    for _ in 0..2 {
        for (hj, v) in h.iter_mut().zip(basis) {
            let c = dot(w, v);
            *hj += c;
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi -= c * vi;
            }
        }
    }
    h
}

struct RitzPair {
    theta: C64,
    x: Vec<C64>,
}

/// Krylov-Schur iteration for the `k` eigenvalues of largest modulus of `apply`.
fn krylov_schur<F>(mut apply: F, n: usize, params: &SolverParams) -> Result<Vec<RitzPair>, SpectralError>
where
    F: FnMut(&[C64]) -> Vec<C64>,
{
    let k = params.k;
    let m = params.subspace.unwrap_or(4 * k + 10).min(n).max(k + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut v0: Vec<C64> = (0..n).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
    let s = norm(&v0);
    v0.iter_mut().for_each(|z| *z /= s);

    let mut basis: Vec<Vec<C64>> = vec![v0];
    let mut hbar = DMatrix::<C64>::zeros(m + 1, m);
    let mut start = 0usize;
    let mut restarts = 0usize;
    loop {
        for j in start..m {
            let mut w = apply(&basis[j]);
            let h = orthogonalize(&basis, &mut w);
            for (i, hi) in h.iter().enumerate() {
                hbar[(i, j)] = *hi;
            }
            let beta = norm(&w);
            hbar[(j + 1, j)] = C64::new(beta, 0.0);
            if beta <= 1e-14 * h.iter().map(|z| z.norm()).fold(0.0, f64::max) || beta == 0.0 {
                // Invariant subspace: continue with a fresh random direction.
                let mut r: Vec<C64> = (0..n).map(|_| C64::new(rng.gen::<f64>() - 0.5, 0.0)).collect();
                orthogonalize(&basis, &mut r);
                let rn = norm(&r);
                r.iter_mut().for_each(|z| *z /= rn);
                hbar[(j + 1, j)] = C64::new(0.0, 0.0);
                basis.push(r);
            } else {
                w.iter_mut().for_each(|z| *z /= beta);
                basis.push(w);
            }
        }
        let hm = hbar.rows(0, m).into_owned();
        let (vals, y) = dense_eig(&hm)?;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| vals[b].norm().total_cmp(&vals[a].norm()));
        let last_row = hbar.row(m).into_owned();
        let est = |c: usize| (&last_row * y.column(c))[(0, 0)].norm();
        let converged = order[..k].iter().filter(|&&c| est(c) <= params.tol * vals[c].norm()).count();
        if converged == k {
            return Ok(order[..k]
                .iter()
                .map(|&c| {
                    let mut x = vec![C64::new(0.0, 0.0); n];
                    for (i, v) in basis[..m].iter().enumerate() {
                        let yi = y[(i, c)];
                        for (xj, vj) in x.iter_mut().zip(v) {
                            *xj += yi * vj;
                        }
                    }
                    RitzPair { theta: vals[c], x }
                })
                .collect());
        }
        if restarts == params.max_restarts {
            return Err(SpectralError::NoConvergence {
                restarts,
                converged,
                wanted: k,
            });
        }
        restarts += 1;

        // Keep the wanted Ritz space: orthonormal basis Q_p of span{y_c}.
        let p = (k + (m - k) / 2).min(m - 1);
        let mut q: Vec<DVector<C64>> = Vec::with_capacity(p);
        for &c in order.iter() {
            if q.len() == p {
                break;
            }
            let mut col = y.column(c).into_owned();
            for _ in 0..2 {
                for qi in &q {
                    let proj = qi.dotc(&col);
                    col -= qi * proj;
                }
            }
            let nrm = col.norm();
            if nrm > 1e-8 {
                q.push(col / C64::new(nrm, 0.0));
            }
        }
        let p = q.len();
        let qm = DMatrix::from_columns(&q);
        let s = qm.adjoint() * &hm * &qm;
        let b = &last_row * &qm;
        let new_basis: Vec<Vec<C64>> = (0..p)
            .map(|c| {
                let mut x = vec![C64::new(0.0, 0.0); n];
                for (i, v) in basis[..m].iter().enumerate() {
                    let qi = qm[(i, c)];
                    for (xj, vj) in x.iter_mut().zip(v) {
                        *xj += qi * vj;
                    }
                }
                x
            })
            .collect();
        let next = basis.pop().expect("basis holds m + 1 vectors");
        basis = new_basis;
        basis.push(next);
        hbar.fill(C64::new(0.0, 0.0));
        hbar.view_mut((0, 0), (p, p)).copy_from(&s);
        hbar.view_mut((p, 0), (1, p)).copy_from(&b);
        start = p;
    }
}

/// Discrete `L_2` product of scaled vectors.
pub fn inner(op: &DiscreteOperator, x: &[C64], y: &[C64]) -> C64 {
    dot(x, y) * op.cell_volume()
}

/// The P-pairing `(x, P y)`.
pub fn p_pairing(op: &DiscreteOperator, x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(&op.reflection).map(|(a, &j)| a * y[j].conj()).sum::<C64>() * op.cell_volume()
}

/// Chooses the phase so that `PT v = v` when `v` spans a PT-invariant line.
fn pt_phase(op: &DiscreteOperator, v: &mut [C64]) {
    let ptv: Vec<C64> = op.reflection.iter().map(|&j| v[j].conj()).collect();
    let c = dot(&ptv, v) / dot(v, v);
    if (c.norm() - 1.0).abs() > 1e-6 {
        return;
    }
    let a = c.sqrt();
    v.iter_mut().for_each(|z| *z *= a);
}

/// `k` eigenpairs of `op` nearest `sigma`, sorted by distance to `sigma`.
///
/// Convergence is declared when the Ritz residual of the inverted operator is
/// below `tol` relative to the Ritz value, which bounds `‖Mv - λv‖` by
/// `tol·‖M - σ‖`.
pub fn eigs_near(op: &DiscreteOperator, sigma: C64, params: &SolverParams) -> Result<SpectrumReport, SpectralError> {
    if params.k == 0 || params.k >= op.dim {
        return Err(SpectralError::Argument(format!(
            "k must be in 1..{} (got {})",
            op.dim, params.k
        )));
    }
    let lu = BandedLu::new(&op.matrix, sigma)?;
    let ritz = krylov_schur(|x| lu.solve(x), op.dim, params)?;
    let vol = op.cell_volume();
    let mut pairs: Vec<EigenPair> = ritz
        .into_iter()
        .map(|r| {
            let lambda = sigma + C64::new(1.0, 0.0) / r.theta;
            let mut v = r.x;
            let s = norm(&v) * vol.sqrt();
            v.iter_mut().for_each(|z| *z /= s);
            pt_phase(op, &mut v);
            let mv = op.matrix.matvec(&v);
            let res: Vec<C64> = mv.iter().zip(&v).map(|(a, b)| a - lambda * b).collect();
            EigenPair {
                lambda,
                residual: norm(&res) / norm(&v),
                pt_norm: p_pairing(op, &v, &v),
                vector: v,
            }
        })
        .collect();
    pairs.sort_by(|a, b| (a.lambda - sigma).norm().total_cmp(&(b.lambda - sigma).norm()));
    let n = pairs.len();
    Ok(SpectrumReport {
        pairs,
        shift: sigma,
        enclosure: vec![None; n],
        symmetry_residuals: None,
    })
}

/// Rescales (and, inside clusters of equal eigenvalues, recombines) eigenvectors
/// so that `(v_k, P v_j) = ±δ_kj`; the sign is the one carried by the pairing.
pub fn pt_normalize(op: &DiscreteOperator, pairs: &[EigenPair]) -> Result<Vec<EigenPair>, SpectralError> {
    let mut out = pairs.to_vec();
    let mut done = vec![false; pairs.len()];
    for a in 0..pairs.len() {
        if done[a] {
            continue;
        }
        let la = pairs[a].lambda;
        let group: Vec<usize> = (a..pairs.len())
            .filter(|&b| !done[b] && (pairs[b].lambda - la).norm() <= 1e-8 * (1.0 + la.norm()))
            .collect();
        let g = group.len();
        let gram = DMatrix::from_fn(g, g, |i, j| p_pairing(op, &pairs[group[i]].vector, &pairs[group[j]].vector));
        let scale = group.iter().map(|&i| inner(op, &pairs[i].vector, &pairs[i].vector).re).fold(0.0, f64::max);
        let is_signature = (0..g).all(|i| {
            (0..g).all(|j| {
                let want = if i == j { gram[(i, i)].re.signum() } else { 0.0 };
                (gram[(i, j)] - want).norm() <= 1e-12
            })
        });
        if !is_signature {
            // G is Hermitian; with G = U D U^H, the vectors V conj(U) |D|^{-1/2} are P-orthonormal.
            let herm = (&gram + gram.adjoint()) * C64::new(0.5, 0.0);
            let eig = herm.symmetric_eigen();
            for (c, &d) in eig.eigenvalues.iter().enumerate() {
                if d.abs() <= 1e-10 * scale {
                    return Err(SpectralError::Degenerate {
                        index: group[c.min(g - 1)],
                        value: d,
                    });
                }
            }
            let combos: Vec<Vec<C64>> = (0..g)
                .map(|c| {
                    let f = 1.0 / eig.eigenvalues[c].abs().sqrt();
                    let mut v = vec![C64::new(0.0, 0.0); op.dim];
                    for (i, &gi) in group.iter().enumerate() {
                        let coef = eig.eigenvectors[(i, c)].conj() * f;
                        for (vj, xj) in v.iter_mut().zip(&pairs[gi].vector) {
                            *vj += coef * xj;
                        }
                    }
                    v
                })
                .collect();
            for (c, &gi) in group.iter().enumerate() {
                let mut v = combos[c].clone();
                if g == 1 {
                    // Scalar rescale keeps the phase chosen by the eigensolver.
                    let f = 1.0 / gram[(0, 0)].re.abs().sqrt();
                    v = pairs[gi].vector.iter().map(|z| z * f).collect();
                }
                out[gi].pt_norm = p_pairing(op, &v, &v);
                out[gi].vector = v;
            }
        }
        for &i in &group {
            done[i] = true;
        }
    }
    Ok(out)
}

/// Relative residuals of P-pseudo-Hermiticity, PT-symmetry and the `α → -α` adjoint identity.
pub fn symmetry_residuals(m: &DiscreteOperator, m_minus_alpha: &DiscreteOperator) -> Result<[f64; 3], SpectralError> {
    if m.dim != m_minus_alpha.dim || m.grid != m_minus_alpha.grid {
        return Err(SpectralError::Mismatch {
            op: "symmetry_residuals",
            a: m.dim,
            b: m_minus_alpha.dim,
        });
    }
    let a = &m.matrix;
    let nrm = a.frobenius();
    let adj = a.adjoint();
    let r1 = adj.diff_frobenius(&a.permuted(&m.reflection)) / nrm;
    let pt = |v: &[C64]| -> Vec<C64> { m.reflection.iter().map(|&j| v[j].conj()).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
    let mut r2 = 0.0f64;
    for _ in 0..4 {
        let v: Vec<C64> = (0..m.dim).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let mv = a.matvec(&v);
        let lhs = pt(&mv);
        let rhs = a.matvec(&pt(&v));
        let d: Vec<C64> = lhs.iter().zip(&rhs).map(|(x, y)| x - y).collect();
        r2 = r2.max(norm(&d) / norm(&mv));
    }
    let r3 = adj.diff_frobenius(&m_minus_alpha.matrix) / nrm;
    Ok([r1, r2, r3])
}

/// Imaginary-part bound of the enclosure at real part `re`.
pub fn enclosure_bound(c: &Constants, re: f64) -> f64 {
    (c.c3 / c.c0.sqrt()) * re.abs().sqrt() + (c.c1 + (c.c1 * c.c1 + c.c0 * c.c2).sqrt()) * c.c3 / c.c0 + c.c2
}

/// Whether each eigenvalue of `report` lies in the enclosure; `margin = None` uses `1e-6·(1 + |λ|)`.
pub fn enclosure_check(report: &SpectrumReport, c: &Constants, margin: Option<f64>) -> Vec<bool> {
    report
        .pairs
        .iter()
        .map(|p| {
            let mg = margin.unwrap_or(1e-6 * (1.0 + p.lambda.norm()));
            p.lambda.im.abs() <= enclosure_bound(c, p.lambda.re) + mg
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::QuadRule;
    use crate::coeffexpr::Params;
    use crate::disc::{assemble_limiting_from, assemble_perturbed, build_grid, OperatorKind};
    use crate::model::catalog;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn wrap(m: &DMatrix<C64>) -> DiscreteOperator {
        let n = m.nrows();
        let mut trips = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if m[(i, j)] != c(0.0, 0.0) {
                    trips.push((i, j, m[(i, j)]));
                }
            }
        }
        DiscreteOperator {
            dim: n,
            kind: OperatorKind::Limiting,
            matrix: CsrMatrix::from_triplets(n, trips),
            grid: None,
            xs: (0..n).map(|i| i as f64).collect(),
            reflection: (0..n).collect(),
            scale: vec![1.0; n],
            dirichlet_value: 0.0,
        }
    }

    fn random_matrix(n: usize, seed: u64, band: usize) -> DMatrix<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) <= band {
                c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            } else {
                c(0.0, 0.0)
            }
        })
    }

    #[test]
    fn diagonal_example() {
        let op = wrap(&DMatrix::from_diagonal(&DVector::from_vec(vec![c(1.0, 0.0), c(3.0, 0.0)])));
        let rep = eigs_near(&op, c(0.9, 0.0), &SolverParams::default()).unwrap();
        assert!((rep.pairs[0].lambda - c(1.0, 0.0)).norm() < 1e-12);
        assert!(rep.pairs[0].vector[1].norm() < 1e-12);
    }

    #[test]
    fn banded_lu_matches_dense_solve() {
        for (seed, band) in [(1u64, 1usize), (2, 3), (3, 7)] {
            let a = random_matrix(40, seed, band);
            let op = wrap(&a);
            let f: Vec<C64> = (0..40).map(|i| c(i as f64, 1.0)).collect();
            let u = solve_linear(&op, c(0.3, -0.2), &f).unwrap();
            let shifted = &a - DMatrix::identity(40, 40) * c(0.3, -0.2);
            let r = &shifted * DVector::from_vec(u) - DVector::from_vec(f.clone());
            assert!(r.norm() <= 1e-10 * DVector::from_vec(f).norm());
        }
    }

    #[test]
    fn trivial_solves() {
        let id = wrap(&DMatrix::identity(3, 3));
        let f = vec![c(1.0, 2.0), c(-1.0, 0.5), c(0.0, 3.0)];
        assert_eq!(solve_linear(&id, c(0.0, 0.0), &f).unwrap(), f);
        let two = wrap(&(DMatrix::identity(2, 2) * c(2.0, 0.0)));
        let u = solve_linear(&two, c(1.0, 0.0), &[c(1.0, 0.0), c(1.0, 0.0)]).unwrap();
        assert!(u.iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-15));
        assert!(matches!(
            solve_linear(&id, c(1.0, 0.0), &f),
            Err(SpectralError::Singular { .. })
        ));
    }

    #[test]
    fn gershgorin_shift_solve() {
        let a = random_matrix(30, 9, 29);
        let radius: f64 = (0..30).map(|i| (0..30).map(|j| a[(i, j)].norm()).sum::<f64>()).fold(0.0, f64::max);
        let op = wrap(&a);
        let f: Vec<C64> = (0..30).map(|i| c(1.0, i as f64)).collect();
        let u = solve_linear(&op, c(radius + 1.0, 0.0), &f).unwrap();
        let mu = op.matrix.matvec(&u);
        let r: Vec<C64> = (0..30).map(|i| mu[i] - c(radius + 1.0, 0.0) * u[i] - f[i]).collect();
        assert!(norm(&r) <= 1e-10 * norm(&f));
    }

    #[test]
    fn arnoldi_agrees_with_dense_on_random_matrices() {
        for (seed, n, k) in [(11u64, 60usize, 3usize), (12, 120, 5), (13, 200, 2)] {
            let op = wrap(&random_matrix(n, seed, 4));
            let sigma = c(0.1, 0.05);
            let rep = eigs_near(&op, sigma, &SolverParams::with_k(k)).unwrap();
            let dense = dense_eigs_near(&op, sigma, k).unwrap();
            for (p, d) in rep.pairs.iter().zip(&dense) {
                assert!((p.lambda - d).norm() < 1e-8, "{seed}: {} vs {}", p.lambda, d);
                assert!(p.residual < 1e-8);
            }
        }
    }

    #[test]
    fn pt_well_limiting_ground_state() {
        let cs = catalog("pt_well", &Params::new()).unwrap();
        let op = assemble_limiting_from(&cs, 12.0, 801, &QuadRule::default()).unwrap();
        let rep = eigs_near(&op, c(-0.05, 0.0), &SolverParams::default()).unwrap();
        let lam = rep.pairs[0].lambda;
        assert!((lam.re - 0.0).abs() < 1e-3, "{lam}");
        assert!(lam.im.abs() < 1e-10);
    }

    #[test]
    fn free_perturbed_is_real_and_normalizable() {
        let cs = catalog("free", &Params::new()).unwrap();
        let g = build_grid(4.0, 81, 0.1, 9).unwrap();
        let op = assemble_perturbed(&cs, &g).unwrap();
        let exact = (std::f64::consts::PI / 8.0).powi(2) + 1.0;
        let rep = eigs_near(&op, c(exact, 0.0), &SolverParams::default()).unwrap();
        let p = &rep.pairs[0];
        assert!(p.lambda.im.abs() < 1e-9, "{}", p.lambda);
        assert!((p.lambda.re - exact).abs() < g.hx * g.hx, "{}", p.lambda);
        let norm = pt_normalize(&op, &rep.pairs).unwrap();
        assert!((norm[0].pt_norm - c(1.0, 0.0)).norm() < 1e-10);
        let again = pt_normalize(&op, &norm).unwrap();
        assert!(norm[0].vector.iter().zip(&again[0].vector).all(|(a, b)| (a - b).norm() <= 1e-10));
    }

    #[test]
    fn pt_normalize_identity_reflection() {
        let a = DMatrix::from_row_slice(3, 3, &[c(2.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0), c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(5.0, 0.0)]);
        let op = wrap(&a);
        let rep = eigs_near(&op, c(0.9, 0.0), &SolverParams::with_k(2)).unwrap();
        let n = pt_normalize(&op, &rep.pairs).unwrap();
        for p in &n {
            assert!((norm(&p.vector) - 1.0).abs() < 1e-10);
        }
        assert!(p_pairing(&op, &n[0].vector, &n[1].vector).norm() < 1e-10);
    }

    #[test]
    fn enclosure_examples() {
        let cst = Constants {
            c0: 1.0,
            c1: 0.0,
            c2: 0.0,
            c3: 2.0,
        };
        let mk = |l: C64| SpectrumReport {
            pairs: vec![EigenPair {
                lambda: l,
                vector: vec![],
                residual: 0.0,
                pt_norm: c(1.0, 0.0),
            }],
            shift: c(0.0, 0.0),
            enclosure: vec![None],
            symmetry_residuals: None,
        };
        assert_eq!(enclosure_check(&mk(c(4.0, 10.0)), &cst, None), vec![false]);
        assert_eq!(enclosure_check(&mk(c(4.0, 3.0)), &cst, None), vec![true]);
    }

    #[test]
    fn triangular_eigenvectors_are_eigenvectors() {
        let t = DMatrix::from_row_slice(3, 3, &[c(1.0, 0.0), c(2.0, 1.0), c(0.5, 0.0), c(0.0, 0.0), c(3.0, 0.0), c(1.0, -1.0), c(0.0, 0.0), c(0.0, 0.0), c(-2.0, 0.5)]);
        let y = triangular_eigenvectors(&t);
        for i in 0..3 {
            let r = &t * y.column(i) - y.column(i) * t[(i, i)];
            assert!(r.norm() < 1e-14);
        }
    }
}
