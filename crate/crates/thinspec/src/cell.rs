//! Transverse (ξ) machinery on the unit cell `[-1/2, 1/2]`.
//!
//! Profiles are tabulated at the nodes of a composite Gauss–Legendre rule.
//! Inside each panel a tabulated profile is identified with its Legendre
//! expansion of degree `order - 1`, which gives spectral antiderivatives,
//! derivatives and point values (including the cell faces, which are not nodes).

use thiserror::Error;

use crate::coeffexpr::C64;
use crate::model::{CoefficientSet, ModelError};

#[derive(Debug, Error)]
pub enum CellError {
    #[error("cell::{op}: ellipticity fails, A_22 = {value} at (x, xi) = ({x}, {xi})")]
    Ellipticity {
        op: &'static str,
        x: f64,
        xi: f64,
        value: f64,
    },
    #[error("cell::cell_solve: solvability violated, |int F - (g- - g+)| = {residual:e} > {tol:e}")]
    Solvability { residual: f64, tol: f64 },
    #[error("cell::cell_solve: A_22 = {value} <= 0 at node {node}")]
    NonPositive { node: usize, value: f64 },
    #[error("cell::{op}: profile length {got} does not match the rule ({want} nodes)")]
    Length {
        op: &'static str,
        got: usize,
        want: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Default solvability tolerance of [`cell_solve`].
pub const SOLVABILITY_TOL: f64 = 1e-10;

/// Values and derivatives of `P_0..P_{n}` at `t`.
fn legendre_all(n: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut dp = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = t;
        dp[1] = 1.0;
    }
    for k in 1..n {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * t * p[k] - kf * p[k - 1]) / (kf + 1.0);
        dp[k + 1] = dp[k - 1] + (2.0 * kf + 1.0) * p[k];
    }
    (p, dp)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_all(n, t);
            let dt = p[n] / dp[n];
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_all(n, t);
        let w = 2.0 / ((1.0 - t * t) * dp[n] * dp[n]);
        nodes[k] = -t;
        nodes[n - 1 - k] = t;
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Neumaier-compensated sum.
pub(crate) fn neumaier(terms: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

/// Composite Gauss–Legendre rule on `[-1/2, 1/2]`.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub order: usize,
    pub panels: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    ref_nodes: Vec<f64>,
    ref_weights: Vec<f64>,
    /// `cum[i * order + j]`: `∫_{-1}^{t_i} l_j` on the reference panel.
    cum: Vec<f64>,
    /// `diff[i * order + j]`: `l_j'(t_i)` on the reference panel.
    diff: Vec<f64>,
}

impl Default for QuadRule {
    fn default() -> Self {
        QuadRule::new(8, 8)
    }
}

impl QuadRule {
    pub fn new(order: usize, panels: usize) -> Self {
        assert!(order >= 2 && panels >= 1, "quadrature needs order >= 2 and panels >= 1");
        let (t, w) = gauss_legendre(order);
        let h = 1.0 / panels as f64;
        let mut nodes = Vec::with_capacity(order * panels);
        let mut weights = Vec::with_capacity(order * panels);
        for p in 0..panels {
            let mid = -0.5 + h * (p as f64 + 0.5);
            for k in 0..order {
                nodes.push(mid + 0.5 * h * t[k]);
                weights.push(0.5 * h * w[k]);
            }
        }
        let mut rule = QuadRule {
            order,
            panels,
            nodes,
            weights,
            ref_nodes: t,
            ref_weights: w,
            cum: vec![0.0; order * order],
            diff: vec![0.0; order * order],
        };
        for i in 0..order {
            let ti = rule.ref_nodes[i];
            let (p, dp) = legendre_all(order, ti);
            let anti: Vec<f64> = (0..order)
                .map(|m| if m == 0 { ti + 1.0 } else { (p[m + 1] - p[m - 1]) / (2 * m + 1) as f64 })
                .collect();
            for j in 0..order {
                let c = rule.projection(j);
                rule.cum[i * order + j] = (0..order).map(|m| anti[m] * c[m]).sum();
                rule.diff[i * order + j] = (0..order).map(|m| dp[m] * c[m]).sum();
            }
        }
        rule
    }

    /// Legendre coefficients of the `j`-th Lagrange basis function of a panel.
    fn projection(&self, j: usize) -> Vec<f64> {
        let (p, _) = legendre_all(self.order, self.ref_nodes[j]);
        (0..self.order)
            .map(|m| 0.5 * (2 * m + 1) as f64 * self.ref_weights[j] * p[m])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn half_width(&self) -> f64 {
        0.5 / self.panels as f64
    }

    fn check(&self, op: &'static str, f: &[C64]) -> Result<(), CellError> {
        if f.len() != self.len() {
            return Err(CellError::Length {
                op,
                got: f.len(),
                want: self.len(),
            });
        }
        Ok(())
    }

    /// `∫_{-1/2}^{1/2} f`, with compensated summation.
    pub fn integrate(&self, f: &[C64]) -> C64 {
        let re = neumaier(f.iter().zip(&self.weights).map(|(v, w)| v.re * w));
        let im = neumaier(f.iter().zip(&self.weights).map(|(v, w)| v.im * w));
        C64::new(re, im)
    }

    pub fn integrate_real(&self, f: &[f64]) -> f64 {
        neumaier(f.iter().zip(&self.weights).map(|(v, w)| v * w))
    }

    /// `∫_{-1/2}^{ξ_q} f` at every node.
    pub fn cumulative(&self, f: &[C64]) -> Vec<C64> {
        let n = self.order;
        let hw = self.half_width();
        let mut out = vec![C64::new(0.0, 0.0); f.len()];
        let mut base = C64::new(0.0, 0.0);
        for p in 0..self.panels {
            let seg = &f[p * n..(p + 1) * n];
            for i in 0..n {
                let s: C64 = (0..n).map(|j| seg[j] * self.cum[i * n + j]).sum();
                out[p * n + i] = base + s * hw;
            }
            let total: C64 = (0..n).map(|j| seg[j] * self.ref_weights[j]).sum();
            base += total * hw;
        }
        out
    }

    /// Spectral derivative within each panel.
    pub fn derivative(&self, f: &[C64]) -> Vec<C64> {
        let n = self.order;
        let hw = self.half_width();
        let mut out = vec![C64::new(0.0, 0.0); f.len()];
        for p in 0..self.panels {
            let seg = &f[p * n..(p + 1) * n];
            for i in 0..n {
                let s: C64 = (0..n).map(|j| seg[j] * self.diff[i * n + j]).sum();
                out[p * n + i] = s / hw;
            }
        }
        out
    }

    /// Interpolation weights of the panel containing `xi` (closed at both ends).
    pub fn interpolation_row(&self, xi: f64) -> (usize, Vec<f64>) {
        let h = 1.0 / self.panels as f64;
        let p = (((xi + 0.5) / h).floor().max(0.0) as usize).min(self.panels - 1);
        let mid = -0.5 + h * (p as f64 + 0.5);
        let t = (xi - mid) / (0.5 * h);
        let (pt, _) = legendre_all(self.order, t);
        let row = (0..self.order)
            .map(|j| {
                let c = self.projection(j);
                (0..self.order).map(|m| c[m] * pt[m]).sum()
            })
            .collect();
        (p, row)
    }

    /// Value of the panel expansion of `f` at `xi ∈ [-1/2, 1/2]`.
    pub fn value_at(&self, f: &[C64], xi: f64) -> C64 {
        let (p, row) = self.interpolation_row(xi);
        let seg = &f[p * self.order..(p + 1) * self.order];
        seg.iter().zip(&row).map(|(v, w)| v * w).sum()
    }
}

/// Homogenized coefficients tabulated on an `x`-grid.
#[derive(Debug, Clone)]
pub struct LimitingCoefficients {
    pub xs: Vec<f64>,
    /// `A^0_11`.
    pub a11: Vec<f64>,
    /// `A^0_1`.
    pub a1: Vec<C64>,
    /// `A^0_0`.
    pub a00: Vec<C64>,
}

/// Pointwise integrands `B_11`, `B_1`, `B_0` whose cell averages are the limiting coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BCoefficients {
    pub b11: C64,
    pub b1: C64,
    pub b0: C64,
}

fn positive_a22(op: &'static str, x: f64, xi: f64, a22: C64) -> Result<f64, CellError> {
    if a22.re <= 0.0 {
        return Err(CellError::Ellipticity {
            op,
            x,
            xi,
            value: a22.re,
        });
    }
    Ok(a22.re)
}

pub fn b_coefficients(cs: &CoefficientSet, x: f64, xi: f64) -> Result<BCoefficients, CellError> {
    let p = cs.at(x, xi)?;
    let alpha = cs.alpha_at(x)?;
    let ann = positive_a22("b_coefficients", x, xi, p.a22)?;
    let ia = C64::new(0.0, alpha);
    Ok(BCoefficients {
        b11: p.a11 - p.a12 * p.a21 / ann,
        b1: p.a1 - p.a2 * p.a21 / ann,
        b0: p.a0 + alpha * alpha / ann - ia * (p.a2 + p.a2.conj()) / ann - p.a2.norm_sqr() / ann,
    })
}

/// `(A^0_11, A^0_1, A^0_0)` at one point `x`.
pub fn limiting_at(cs: &CoefficientSet, x: f64, quad: &QuadRule) -> Result<(f64, C64, C64), CellError> {
    let alpha = cs.alpha_at(x)?;
    let ia = C64::new(0.0, alpha);
    let (mut a11, mut a1, mut a00) = (0.0, C64::new(0.0, 0.0), C64::new(0.0, 0.0));
    for (&xi, &w) in quad.nodes.iter().zip(&quad.weights) {
        let p = cs.at(x, xi)?;
        let ann = positive_a22("limiting_coefficients", x, xi, p.a22)?;
        a11 += w * (p.a11.re - p.a12.re * p.a21.re / ann);
        a1 += w * (p.a1 - p.a2 * p.a21 / ann);
        a00 += w * (p.a0 + alpha * alpha / ann - 2.0 * ia * p.a2.re / ann - p.a2.norm_sqr() / ann);
    }
    Ok((a11, a1, a00))
}

pub fn limiting_coefficients(cs: &CoefficientSet, xs: &[f64], quad: &QuadRule) -> Result<LimitingCoefficients, CellError> {
    let mut lc = LimitingCoefficients {
        xs: xs.to_vec(),
        a11: Vec::with_capacity(xs.len()),
        a1: Vec::with_capacity(xs.len()),
        a00: Vec::with_capacity(xs.len()),
    };
    for &x in xs {
        let (a11, a1, a00) = limiting_at(cs, x, quad)?;
        lc.a11.push(a11);
        lc.a1.push(a1);
        lc.a00.push(a00);
    }
    Ok(lc)
}

/// Result of [`cell_solve`].
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub phi: Vec<C64>,
    /// `|∫F - (g- - g+)|`.
    pub solvability_residual: f64,
}

/// Mean-zero solution of `-(A φ')' + F = 0` on the cell with `A φ' + g∓ = 0` at `ξ = ∓1/2`.
///
/// The problem is solvable iff `∫F = g- - g+`; then
/// `φ(ξ) = C + ∫_{-1/2}^{ξ} h`, `h = (-g- + ∫_{-1/2}^{t} F) / A`, `C = ∫ (t - 1/2) h(t) dt`.
pub fn cell_solve(
    ann: &[f64],
    f: &[C64],
    gm: C64,
    gp: C64,
    quad: &QuadRule,
    tol: f64,
) -> Result<CellSolution, CellError> {
    quad.check("cell_solve", f)?;
    if ann.len() != quad.len() {
        return Err(CellError::Length {
            op: "cell_solve",
            got: ann.len(),
            want: quad.len(),
        });
    }
    if let Some((node, &value)) = ann.iter().enumerate().find(|(_, a)| **a <= 0.0) {
        return Err(CellError::NonPositive { node, value });
    }
    let residual = (quad.integrate(f) - (gm - gp)).norm();
    if !(residual <= tol) {
        return Err(CellError::Solvability { residual, tol });
    }
    let inner = quad.cumulative(f);
    let h: Vec<C64> = inner.iter().zip(ann).map(|(s, a)| (s - gm) / *a).collect();
    let c: C64 = quad
        .nodes
        .iter()
        .zip(&quad.weights)
        .zip(&h)
        .map(|((t, w), hv)| hv * (w * (t - 0.5)))
        .sum();
    let phi = quad.cumulative(&h).into_iter().map(|v| v + c).collect();
    Ok(CellSolution {
        phi,
        solvability_residual: residual,
    })
}

/// Transverse profiles at a fixed `x`.
#[derive(Debug, Clone)]
pub struct CellProfiles {
    pub x: f64,
    pub xig: Vec<f64>,
    /// `G_1`: multiplies `∂φ/∂x`.
    pub g1: Vec<C64>,
    /// `G_0`: multiplies `φ`.
    pub g0: Vec<C64>,
    /// Cell solutions attached by the asymptotic construction, one per input function.
    pub t7phi: Vec<Vec<C64>>,
    /// Corrector profile for `u0 = 1`, `∂u0 = 0` (integrals from 0).
    pub w: Vec<C64>,
}

fn mean_zero(quad: &QuadRule, mut v: Vec<C64>) -> Vec<C64> {
    let m = quad.integrate(&v);
    for z in &mut v {
        *z -= m;
    }
    v
}

/// Node values of `A_21 / A_22` and `(conj(A_2) + iα) / A_22` at `x`.
fn flux_ratios(cs: &CoefficientSet, x: f64, quad: &QuadRule, op: &'static str) -> Result<(Vec<C64>, Vec<C64>), CellError> {
    let alpha = cs.alpha_at(x)?;
    let mut r1 = Vec::with_capacity(quad.len());
    let mut r0 = Vec::with_capacity(quad.len());
    for &xi in &quad.nodes {
        let p = cs.at(x, xi)?;
        let ann = positive_a22(op, x, xi, p.a22)?;
        r1.push(p.a21 / ann);
        r0.push((p.a2.conj() + C64::new(0.0, alpha)) / ann);
    }
    Ok((r1, r0))
}

/// `G_1`, `G_0`: mean-zero primitives of `-A_21/A_22` and `-(conj(A_2) + iα)/A_22`.
pub fn cell_profiles(cs: &CoefficientSet, x: f64, quad: &QuadRule) -> Result<CellProfiles, CellError> {
    let (r1, r0) = flux_ratios(cs, x, quad, "cell_profiles")?;
    let neg = |v: Vec<C64>| v.into_iter().map(|z| -z).collect::<Vec<_>>();
    let g1 = mean_zero(quad, quad.cumulative(&neg(r1)));
    let g0 = mean_zero(quad, quad.cumulative(&neg(r0.clone())));
    let w = anchored_at_zero(quad, quad.cumulative(&neg(r0)));
    Ok(CellProfiles {
        x,
        xig: quad.nodes.clone(),
        g1,
        g0,
        t7phi: Vec::new(),
        w,
    })
}

fn anchored_at_zero(quad: &QuadRule, v: Vec<C64>) -> Vec<C64> {
    let at0 = quad.value_at(&v, 0.0);
    v.into_iter().map(|z| z - at0).collect()
}

/// Corrector profile `w(ξ) = -∫_0^ξ (A_21 ∂u0 + (conj(A_2) + iα) u0) / A_22 dt`.
pub fn w_profile(cs: &CoefficientSet, u0: C64, grad_u0: C64, x: f64, quad: &QuadRule) -> Result<Vec<C64>, CellError> {
    let (r1, r0) = flux_ratios(cs, x, quad, "w_profile")?;
    let integrand: Vec<C64> = r1.iter().zip(&r0).map(|(a, b)| -(a * grad_u0 + b * u0)).collect();
    Ok(anchored_at_zero(quad, quad.cumulative(&integrand)))
}
