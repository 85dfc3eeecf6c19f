//! Finite-difference discretization of the layer operator and of the limiting operator.
//!
//! The strip operator is built from a discrete sesquilinear form
//!
//! ```text
//! k(u, v) = Σ A_ij (∂_j u)(conj ∂_i v) + (A_j ∂_j u) conj v + u conj(A_j ∂_j v) + A_0 u conj v
//!           + iα (u conj v)|_top − iα (u conj v)|_bottom
//! ```
//!
//! with trapezoid node weights `W` (half weight on the faces), flux differences
//! on cell edges for the diagonal diffusion, centered differences for the mixed
//! and first-order terms, and a summation-by-parts transverse difference whose
//! face rows are one-sided. The Robin condition `(∂_ν + iα) u = 0` is the natural
//! condition of this form on both faces, with the co-normal taken upward on both.
//! The stored matrix is `W^{-1/2} K W^{-1/2}`: it has the spectrum of the nodal
//! operator `W^{-1} K`, and the Euclidean inner product on its vectors is the
//! discrete `L_2` product, so adjoints and reflections act as plain matrix
//! operations. Dirichlet nodes at `x = ±X` are decoupled rows with a real diagonal
//! placed above the spectrum of interest.

use std::io::{self, Write};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::cell::{limiting_at, CellError, LimitingCoefficients, QuadRule};
use crate::coeffexpr::C64;
use crate::model::{CoefficientSet, ModelError};

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("disc::build_grid: {0}")]
    Grid(String),
    #[error("disc::{op}: ellipticity fails at (x, xi) = ({x}, {xi}): {detail}")]
    Ellipticity {
        op: &'static str,
        x: f64,
        xi: f64,
        detail: String,
    },
    #[error("disc::{op}: length {got}, expected {want}")]
    Length {
        op: &'static str,
        got: usize,
        want: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cell(#[from] CellError),
}

/// Tensor grid on `[-X, X] × [-ε/2, ε/2]`; node `(a, m)` has flat index `a·Nt + m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub x_half: f64,
    pub nx: usize,
    pub eps: f64,
    pub nt: usize,
    pub hx: f64,
    pub ht: f64,
}

pub fn build_grid(x_half: f64, nx: usize, eps: f64, nt: usize) -> Result<Grid, DiscError> {
    if !(x_half > 0.0) {
        return Err(DiscError::Grid(format!("X must be positive (got {x_half})")));
    }
    if nx < 5 {
        return Err(DiscError::Grid(format!("Nx must be at least 5 (got {nx})")));
    }
    if !(eps > 0.0) {
        return Err(DiscError::Grid(format!("eps must be positive (got {eps})")));
    }
    if nt < 3 {
        return Err(DiscError::Grid(format!("Nt must be at least 3 (got {nt})")));
    }
    Ok(Grid {
        x_half,
        nx,
        eps,
        nt,
        hx: 2.0 * x_half / (nx - 1) as f64,
        ht: eps / (nt - 1) as f64,
    })
}

impl Grid {
    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, a: usize, m: usize) -> usize {
        a * self.nt + m
    }

    pub fn x(&self, a: usize) -> f64 {
        if a + 1 == self.nx {
            self.x_half
        } else {
            -self.x_half + self.hx * a as f64
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|a| self.x(a)).collect()
    }

    /// Unit-cell coordinate of transverse node `m`.
    pub fn xi(&self, m: usize) -> f64 {
        -0.5 + m as f64 / (self.nt - 1) as f64
    }

    /// Physical coordinate `x_n = ε ξ_m`.
    pub fn xn(&self, m: usize) -> f64 {
        self.eps * self.xi(m)
    }

    /// Relative transverse trapezoid weight (1/2 on faces, 1 inside).
    pub fn face_weight(&self, m: usize) -> f64 {
        if m == 0 || m + 1 == self.nt {
            0.5
        } else {
            1.0
        }
    }

    fn interior_x(&self, a: usize) -> bool {
        a > 0 && a + 1 < self.nx
    }
}

/// Uniform 1D grid `x_a = -X + a·h`, `a = 0..Nx-1`.
pub fn line_grid(x_half: f64, nx: usize) -> Vec<f64> {
    crate::model::linspace(-x_half, x_half, nx)
}

/// Compressed sparse row complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<C64>,
}

impl CsrMatrix {
    /// Sums duplicate triplets; explicit zeros are kept so the pattern is data independent.
    pub fn from_triplets(n: usize, mut trips: Vec<(usize, usize, C64)>) -> Self {
        trips.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trips.len());
        let mut vals: Vec<C64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in trips {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.n).map(|i| self.row_ptr[i + 1] - self.row_ptr[i]).max().unwrap_or(0)
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.row(i).find(|(c, _)| *c == j).map(|(_, v)| v).unwrap_or_default()
    }

    pub fn frobenius(&self) -> f64 {
        self.vals.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[(i, j)] += v;
            }
        }
        d
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CsrMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                trips.push((j, i, v.conj()));
            }
        }
        CsrMatrix::from_triplets(self.n, trips)
    }

    /// `P A P` for an index permutation `p` (an involution here).
    pub fn permuted(&self, p: &[usize]) -> CsrMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                trips.push((p[i], p[j], v));
            }
        }
        CsrMatrix::from_triplets(self.n, trips)
    }

    /// Frobenius norm of `self - other`.
    pub fn diff_frobenius(&self, other: &CsrMatrix) -> f64 {
        let mut trips: Vec<(usize, usize, C64)> = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n {
            trips.extend(self.row(i).map(|(j, v)| (i, j, v)));
            trips.extend(other.row(i).map(|(j, v)| (i, j, -v)));
        }
        CsrMatrix::from_triplets(self.n, trips).frobenius()
    }

    /// `(lower, upper)` bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let (mut lo, mut up) = (0, 0);
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                if j < i {
                    lo = lo.max(i - j);
                } else {
                    up = up.max(j - i);
                }
            }
        }
        (lo, up)
    }

    /// Coordinate dump: one `row col re im` line per stored entry, 0-based.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "row,col,re,im")?;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{i},{j},{:.17e},{:.17e}", v.re, v.im)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Perturbed,
    Limiting,
}

/// Assembled matrix with its geometry and the reflection `x_n → −x_n`.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub dim: usize,
    pub kind: OperatorKind,
    pub matrix: CsrMatrix,
    /// Strip grid (perturbed operators only).
    pub grid: Option<Grid>,
    /// Tangential nodes.
    pub xs: Vec<f64>,
    /// Index permutation implementing the reflection.
    pub reflection: Vec<usize>,
    /// Square roots of the relative node weights: scaled vector = `scale ⊙ nodal`.
    pub scale: Vec<f64>,
    /// Diagonal value of the decoupled Dirichlet rows.
    pub dirichlet_value: f64,
}

impl DiscreteOperator {
    /// Nodal values to the coordinates the matrix acts on.
    pub fn to_scaled(&self, u: &[C64]) -> Vec<C64> {
        u.iter().zip(&self.scale).map(|(v, s)| v * *s).collect()
    }

    pub fn from_scaled(&self, v: &[C64]) -> Vec<C64> {
        v.iter().zip(&self.scale).map(|(v, s)| v / *s).collect()
    }

    /// Indices of the decoupled Dirichlet rows.
    pub fn dirichlet_rows(&self) -> Vec<usize> {
        let nt = self.grid.map(|g| g.nt).unwrap_or(1);
        let n = self.xs.len();
        (0..nt).chain((n - 1) * nt..n * nt).collect()
    }

    /// Volume element of the discrete `L_2` product in scaled coordinates.
    pub fn cell_volume(&self) -> f64 {
        match self.grid {
            Some(g) => g.hx * g.ht,
            None => self.xs[1] - self.xs[0],
        }
    }

    pub fn reflect(&self, v: &[C64]) -> Vec<C64> {
        self.reflection.iter().map(|&k| v[k]).collect()
    }
}

/// Accumulates `Σ ω c (s_b · u) conj(s_a · v)` into a triplet list.
struct Form {
    trips: Vec<(usize, usize, C64)>,
}

impl Form {
    fn add(&mut self, test: &[(usize, f64)], trial: &[(usize, f64)], wc: C64) {
        for &(i, sa) in test {
            for &(j, sb) in trial {
                self.trips.push((i, j, wc * (sa * sb)));
            }
        }
    }
}

fn ellipticity(op: &'static str, x: f64, xi: f64, detail: String) -> DiscError {
    DiscError::Ellipticity { op, x, xi, detail }
}

/// Strip operator with the Robin condition on both faces and Dirichlet ends.
pub fn assemble_perturbed(cs: &CoefficientSet, g: &Grid) -> Result<DiscreteOperator, DiscError> {
    const OP: &str = "assemble_perturbed";
    let (nx, nt) = (g.nx, g.nt);
    let n = g.len();
    let (hx, ht) = (g.hx, g.ht);
    let keep = |a: usize| g.interior_x(a);
    let node_w = |m: usize| hx * ht * g.face_weight(m);
    let mut form = Form {
        trips: Vec::with_capacity(16 * n),
    };

    let dx = |a: usize, m: usize| -> Vec<(usize, f64)> {
        let mut s = Vec::with_capacity(2);
        if keep(a + 1) {
            s.push((g.index(a + 1, m), 0.5 / hx));
        }
        if keep(a - 1) {
            s.push((g.index(a - 1, m), -0.5 / hx));
        }
        s
    };
    let dt = |a: usize, m: usize| -> Vec<(usize, f64)> {
        if m == 0 {
            vec![(g.index(a, 1), 1.0 / ht), (g.index(a, 0), -1.0 / ht)]
        } else if m + 1 == nt {
            vec![(g.index(a, m), 1.0 / ht), (g.index(a, m - 1), -1.0 / ht)]
        } else {
            vec![(g.index(a, m + 1), 0.5 / ht), (g.index(a, m - 1), -0.5 / ht)]
        }
    };

    // Tangential diffusion on horizontal edges.
    for a in 0..nx - 1 {
        let xm = 0.5 * (g.x(a) + g.x(a + 1));
        for m in 0..nt {
            let p = cs.at(xm, g.xi(m))?;
            let mut s = Vec::with_capacity(2);
            if keep(a + 1) {
                s.push((g.index(a + 1, m), 1.0 / hx));
            }
            if keep(a) {
                s.push((g.index(a, m), -1.0 / hx));
            }
            form.add(&s, &s, p.a11 * node_w(m));
        }
    }
    // Transverse diffusion on vertical edges.
    for a in 1..nx - 1 {
        for m in 0..nt - 1 {
            let xi = 0.5 * (g.xi(m) + g.xi(m + 1));
            let p = cs.at(g.x(a), xi)?;
            if p.a22.re <= 0.0 {
                return Err(ellipticity(OP, g.x(a), xi, format!("A_22 = {}", p.a22.re)));
            }
            let s = [(g.index(a, m + 1), 1.0 / ht), (g.index(a, m), -1.0 / ht)];
            form.add(&s, &s, p.a22 * (hx * ht));
        }
    }
    let mut max_diag = 0.0f64;
    for a in 1..nx - 1 {
        let x = g.x(a);
        let alpha = cs.alpha_at(x)?;
        for m in 0..nt {
            let p = cs.at(x, g.xi(m))?;
            let w = node_w(m);
            let id = [(g.index(a, m), 1.0)];
            let sx = dx(a, m);
            let st = dt(a, m);
            form.add(&sx, &st, p.a12 * w);
            form.add(&st, &sx, p.a21 * w);
            form.add(&id, &sx, p.a1 * w);
            form.add(&sx, &id, p.a1.conj() * w);
            form.add(&id, &st, p.a2 * w);
            form.add(&st, &id, p.a2.conj() * w);
            form.add(&id, &id, p.a0 * w);
            if m + 1 == nt {
                form.add(&id, &id, C64::new(0.0, alpha * hx));
            }
            if m == 0 {
                form.add(&id, &id, C64::new(0.0, -alpha * hx));
            }
            let scale = p.a11.re / (hx * hx) + p.a22.re / (ht * ht);
            max_diag = max_diag.max(2.0 * scale + p.a0.norm());
        }
    }
    let scale: Vec<f64> = (0..n).map(|k| g.face_weight(k % nt).sqrt()).collect();
    let mut trips: Vec<(usize, usize, C64)> = form
        .trips
        .into_iter()
        .map(|(i, j, v)| {
            let wi = node_w(i % nt);
            let wj = node_w(j % nt);
            (i, j, v / (wi * wj).sqrt())
        })
        .collect();
    let dirichlet_value = max_diag.max(1.0);
    for m in 0..nt {
        trips.push((g.index(0, m), g.index(0, m), C64::new(dirichlet_value, 0.0)));
        trips.push((g.index(nx - 1, m), g.index(nx - 1, m), C64::new(dirichlet_value, 0.0)));
    }
    let matrix = CsrMatrix::from_triplets(n, trips);
    let reflection = (0..n).map(|k| g.index(k / nt, nt - 1 - k % nt)).collect();
    Ok(DiscreteOperator {
        dim: n,
        kind: OperatorKind::Perturbed,
        matrix,
        grid: Some(*g),
        xs: g.xs(),
        reflection,
        scale,
        dirichlet_value,
    })
}

/// Limiting coefficients on `xs` together with `A^0_11` at the edge midpoints.
#[derive(Debug, Clone)]
pub struct LimitingTable {
    pub nodes: LimitingCoefficients,
    pub a11_mid: Vec<f64>,
}

pub fn limiting_table(cs: &CoefficientSet, xs: &[f64], quad: &QuadRule) -> Result<LimitingTable, DiscError> {
    let nodes = crate::cell::limiting_coefficients(cs, xs, quad)?;
    let mut a11_mid = Vec::with_capacity(xs.len().saturating_sub(1));
    for w in xs.windows(2) {
        a11_mid.push(limiting_at(cs, 0.5 * (w[0] + w[1]), quad)?.0);
    }
    Ok(LimitingTable { nodes, a11_mid })
}

/// Limiting operator on the line with Dirichlet ends.
///
/// `A^0_11` is taken at edge midpoints; when only node values are supplied
/// (`a11_mid = None`) the midpoint values are node averages.
pub fn assemble_limiting(lc: &LimitingCoefficients, a11_mid: Option<&[f64]>) -> Result<DiscreteOperator, DiscError> {
    const OP: &str = "assemble_limiting";
    let xs = &lc.xs;
    let nx = xs.len();
    if nx < 5 {
        return Err(DiscError::Grid(format!("Nx must be at least 5 (got {nx})")));
    }
    for len in [lc.a11.len(), lc.a1.len(), lc.a00.len()] {
        if len != nx {
            return Err(DiscError::Length {
                op: OP,
                got: len,
                want: nx,
            });
        }
    }
    let mid: Vec<f64> = match a11_mid {
        Some(m) => {
            if m.len() != nx - 1 {
                return Err(DiscError::Length {
                    op: OP,
                    got: m.len(),
                    want: nx - 1,
                });
            }
            m.to_vec()
        }
        None => lc.a11.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
    };
    let h = xs[1] - xs[0];
    let keep = |a: usize| a > 0 && a + 1 < nx;
    let mut form = Form {
        trips: Vec::with_capacity(9 * nx),
    };
    for a in 0..nx - 1 {
        if !(mid[a] > 0.0) {
            return Err(ellipticity(OP, 0.5 * (xs[a] + xs[a + 1]), 0.0, format!("A0_11 = {}", mid[a])));
        }
        let mut s = Vec::with_capacity(2);
        if keep(a + 1) {
            s.push((a + 1, 1.0 / h));
        }
        if keep(a) {
            s.push((a, -1.0 / h));
        }
        form.add(&s, &s, C64::new(mid[a] * h, 0.0));
    }
    let mut max_diag = 0.0f64;
    for a in 1..nx - 1 {
        let id = [(a, 1.0)];
        let mut sx = Vec::with_capacity(2);
        if keep(a + 1) {
            sx.push((a + 1, 0.5 / h));
        }
        if keep(a - 1) {
            sx.push((a - 1, -0.5 / h));
        }
        form.add(&id, &sx, lc.a1[a] * h);
        form.add(&sx, &id, lc.a1[a].conj() * h);
        form.add(&id, &id, lc.a00[a] * h);
        max_diag = max_diag.max(2.0 * lc.a11[a] / (h * h) + lc.a00[a].norm());
    }
    let dirichlet_value = max_diag.max(1.0);
    let mut trips: Vec<(usize, usize, C64)> = form.trips.into_iter().map(|(i, j, v)| (i, j, v / h)).collect();
    trips.push((0, 0, C64::new(dirichlet_value, 0.0)));
    trips.push((nx - 1, nx - 1, C64::new(dirichlet_value, 0.0)));
    Ok(DiscreteOperator {
        dim: nx,
        kind: OperatorKind::Limiting,
        matrix: CsrMatrix::from_triplets(nx, trips),
        grid: None,
        xs: xs.clone(),
        reflection: (0..nx).collect(),
        scale: vec![1.0; nx],
        dirichlet_value,
    })
}

/// Limiting operator of `cs` on `nx` nodes of `[-X, X]` with exact midpoint coefficients.
pub fn assemble_limiting_from(cs: &CoefficientSet, x_half: f64, nx: usize, quad: &QuadRule) -> Result<DiscreteOperator, DiscError> {
    let xs = line_grid(x_half, nx);
    let t = limiting_table(cs, &xs, quad)?;
    assemble_limiting(&t.nodes, Some(&t.a11_mid))
}

/// Trapezoid average over the transverse nodes (nodal values in, nodal values out).
pub fn transverse_average(u: &[C64], g: &Grid) -> Result<Vec<C64>, DiscError> {
    if u.len() != g.len() {
        return Err(DiscError::Length {
            op: "transverse_average",
            got: u.len(),
            want: g.len(),
        });
    }
    let norm = (g.nt - 1) as f64;
    Ok((0..g.nx)
        .map(|a| {
            (0..g.nt)
                .map(|m| u[g.index(a, m)] * g.face_weight(m))
                .sum::<C64>()
                / norm
        })
        .collect())
}

/// Constant extension across the layer.
pub fn embed(v: &[C64], g: &Grid) -> Result<Vec<C64>, DiscError> {
    if v.len() != g.nx {
        return Err(DiscError::Length {
            op: "embed",
            got: v.len(),
            want: g.nx,
        });
    }
    Ok((0..g.len()).map(|k| v[k / g.nt]).collect())
}

/// Discrete `L_2(Ω^ε)` norm of nodal values.
pub fn strip_norm(u: &[C64], g: &Grid) -> f64 {
    let mut s = 0.0;
    for a in 0..g.nx {
        for m in 0..g.nt {
            s += g.face_weight(m) * u[g.index(a, m)].norm_sqr();
        }
    }
    (s * g.hx * g.ht).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffexpr::Params;
    use crate::model::{catalog, CATALOG};

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn grid_examples() {
        let g = build_grid(10.0, 11, 0.1, 3).unwrap();
        assert_eq!((g.hx, g.ht), (2.0, 0.05));
        assert_eq!((g.x(0), g.xn(0)), (-10.0, -0.05));
        assert_eq!(g.index(2, 1), 7);
        assert!(build_grid(10.0, 11, 0.1, 2).is_err());
        assert!(build_grid(10.0, 4, 0.1, 3).is_err());
        assert!(build_grid(-1.0, 11, 0.1, 3).is_err());
    }

    #[test]
    fn reflection_is_an_involution() {
        let cs = catalog("shear", &Params::new()).unwrap();
        let g = build_grid(4.0, 9, 0.1, 6).unwrap();
        let op = assemble_perturbed(&cs, &g).unwrap();
        for k in 0..op.dim {
            assert_eq!(op.reflection[op.reflection[k]], k);
        }
        assert_eq!(op.reflection[g.index(3, 0)], g.index(3, 5));
    }

    #[test]
    fn stencil_sparsity() {
        for name in CATALOG {
            let cs = catalog(name, &Params::new()).unwrap();
            let g = build_grid(5.0, 21, 0.1, 7).unwrap();
            let op = assemble_perturbed(&cs, &g).unwrap();
            assert!(op.matrix.max_row_nnz() <= 9, "{name}: {}", op.matrix.max_row_nnz());
            let lim = assemble_limiting_from(&cs, 5.0, 21, &QuadRule::default()).unwrap();
            assert!(lim.matrix.max_row_nnz() <= 3);
        }
    }

    #[test]
    fn free_without_alpha_is_real_symmetric() {
        let cs = catalog("free", &params(&[("alpha0", 0.0)])).unwrap();
        let g = build_grid(3.0, 11, 0.2, 5).unwrap();
        let m = assemble_perturbed(&cs, &g).unwrap().matrix;
        assert!(m.vals.iter().all(|v| v.im == 0.0));
        let d = m.to_dense();
        assert!((&d - d.transpose()).norm() <= 1e-14 * d.norm());
    }

    #[test]
    fn transverse_constant_mode_of_free_problem() {
        // For α = 0 the x_n-constant extension of a line eigenvector is an exact eigenvector.
        let cs = catalog("free", &params(&[("alpha0", 0.0)])).unwrap();
        let g = build_grid(2.0, 9, 0.1, 5).unwrap();
        let op = assemble_perturbed(&cs, &g).unwrap();
        let lam = (std::f64::consts::PI * g.hx / 8.0).sin().powi(2) * 4.0 / (g.hx * g.hx);
        let v: Vec<C64> = (0..g.nx)
            .map(|a| C64::new((std::f64::consts::PI * (g.x(a) + 2.0) / 4.0).sin(), 0.0))
            .collect();
        let u = op.to_scaled(&embed(&v, &g).unwrap());
        let r = op.matrix.matvec(&u);
        for k in 0..g.len() {
            if op.dirichlet_rows().contains(&k) {
                continue;
            }
            assert!((r[k] - u[k] * lam).norm() < 1e-10, "{k}");
        }
    }

    #[test]
    fn limiting_matrices_are_hermitian() {
        for name in CATALOG {
            let cs = catalog(name, &Params::new()).unwrap();
            let lim = assemble_limiting_from(&cs, 6.0, 41, &QuadRule::default()).unwrap();
            let r = lim.matrix.diff_frobenius(&lim.matrix.adjoint()) / lim.matrix.frobenius();
            assert!(r <= 1e-12, "{name}: {r}");
        }
    }

    #[test]
    fn free_limiting_is_shifted_laplacian() {
        let cs = catalog("free", &params(&[("alpha0", 1.0)])).unwrap();
        let lim = assemble_limiting_from(&cs, 2.0, 9, &QuadRule::default()).unwrap();
        let h: f64 = 0.5;
        assert!((lim.matrix.get(3, 3) - C64::new(2.0 / (h * h) + 1.0, 0.0)).norm() < 1e-13);
        assert!((lim.matrix.get(3, 4) - C64::new(-1.0 / (h * h), 0.0)).norm() < 1e-13);
        assert_eq!(lim.matrix.get(3, 5), C64::new(0.0, 0.0));
    }

    #[test]
    fn average_and_embed() {
        let g = build_grid(2.0, 5, 0.1, 9).unwrap();
        let ones = vec![C64::new(1.0, 0.0); g.len()];
        assert!(transverse_average(&ones, &g).unwrap().iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-15));
        let odd: Vec<C64> = (0..g.len()).map(|k| C64::new(g.xi(k % g.nt), 0.0)).collect();
        assert!(transverse_average(&odd, &g).unwrap().iter().all(|v| v.norm() < 1e-16));
        let mut last = f64::INFINITY;
        for nt in [9, 17, 33, 65] {
            let g = build_grid(2.0, 5, 0.1, nt).unwrap();
            let sq: Vec<C64> = (0..g.len()).map(|k| C64::new(g.xi(k % g.nt).powi(2), 0.0)).collect();
            let err = (transverse_average(&sq, &g).unwrap()[0].re - 1.0 / 12.0).abs();
            assert!(err < last / 3.9);
            last = err;
        }
        let v: Vec<C64> = (0..5).map(|a| C64::new(a as f64, -(a as f64))).collect();
        assert_eq!(transverse_average(&embed(&v, &g).unwrap(), &g).unwrap(), v);
        assert!(embed(&[C64::new(0.0, 0.0); 5], &g).unwrap().iter().all(|z| z.norm() == 0.0));
        assert!(transverse_average(&ones[1..], &g).is_err());
        assert!(embed(&v[1..], &g).is_err());
    }

    #[test]
    fn dump_format() {
        let cs = catalog("free", &Params::new()).unwrap();
        let lim = assemble_limiting_from(&cs, 2.0, 5, &QuadRule::default()).unwrap();
        let mut buf = Vec::new();
        lim.matrix.write_triplets(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("row,col,re,im"));
        assert_eq!(lines.count(), lim.matrix.nnz());
    }
}
