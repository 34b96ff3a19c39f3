//! Neural tangent kernel evaluation: the recursive population NTK for ReLU
//! networks in arc-cosine closed form, the empirical NTK from Jacobians, and
//! Gram-matrix assembly with a factorization that survives near-singular
//! kernels via one-time jitter escalation and an LU fallback.

use crate::error::{Error, Result};
use crate::network::{WideNet, C_SIGMA};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;
use std::io::Write;
use std::sync::Arc;

const RHO_TOL: f64 = 1e-9;

/// c_sigma * E[relu(u) relu(v)] for (u, v) ~ N(0, [[a, c], [c, b]]).
///
/// Arc-cosine closed form: (sqrt(ab) / pi) * (sqrt(1 - rho^2) + rho * (pi - arccos rho))
/// with rho = c / sqrt(ab). Degenerate marginals (ab = 0) give 0.
pub fn relu_sigma(a: f64, b: f64, c: f64) -> Result<f64> {
    let ab = a * b;
    if ab <= 0.0 {
        if c * c > RHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "covariance [[{a},{c}],[{c},{b}]] is not PSD"
            )));
        }
        return Ok(0.0);
    }
    if c * c > ab * (1.0 + RHO_TOL) {
        return Err(Error::InvalidArgument(format!(
            "covariance [[{a},{c}],[{c},{b}]] is not PSD"
        )));
    }
    let rho = (c / ab.sqrt()).clamp(-1.0, 1.0);
    Ok(C_SIGMA * ab.sqrt() / (2.0 * std::f64::consts::PI)
        * ((1.0 - rho * rho).sqrt() + rho * (std::f64::consts::PI - rho.acos())))
}

/// c_sigma * E[relu'(u) relu'(v)] for the same Gaussian; equals
/// (pi - arccos rho) / pi for ReLU.
pub fn relu_sigma_prime(a: f64, b: f64, c: f64) -> Result<f64> {
    let ab = a * b;
    if ab <= 0.0 {
        if c * c > RHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "covariance [[{a},{c}],[{c},{b}]] is not PSD"
            )));
        }
        return Ok(0.0);
    }
    if c * c > ab * (1.0 + RHO_TOL) {
        return Err(Error::InvalidArgument(format!(
            "covariance [[{a},{c}],[{c},{b}]] is not PSD"
        )));
    }
    let rho = (c / ab.sqrt()).clamp(-1.0, 1.0);
    Ok(C_SIGMA * (std::f64::consts::PI - rho.acos()) / (2.0 * std::f64::consts::PI))
}

/// Kernel evaluator: the analytic infinite-width NTK recursion, or the
/// empirical NTK tied to one network's current parameters.
#[derive(Debug, Clone)]
pub enum NtkKernel {
    Analytic { depth: usize },
    Empirical { net: Arc<WideNet> },
}

impl NtkKernel {
    pub fn analytic(depth: usize) -> Self {
        NtkKernel::Analytic { depth }
    }

    pub fn empirical(net: Arc<WideNet>) -> Self {
        NtkKernel::Empirical { net }
    }

    /// K(x, x').
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: x2.len(),
            });
        }
        match self {
            NtkKernel::Analytic { depth } => analytic_ntk(*depth, x, x2),
            NtkKernel::Empirical { net } => {
                let d = x.len();
                let mut xs = DMatrix::zeros(2, d);
                for j in 0..d {
                    xs[(0, j)] = x[j];
                    xs[(1, j)] = x2[j];
                }
                let jac = net.jacobian(&xs)?;
                Ok(jac.row(0).dot(&jac.row(1)))
            }
        }
    }

    /// K(x, x_i) for every row x_i of `xs`.
    pub fn kernel_vector(&self, x: &[f64], xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        if xs.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        match self {
            NtkKernel::Analytic { depth } => {
                let depth = *depth;
                let vals: Result<Vec<f64>> = (0..xs.nrows())
                    .map(|i| {
                        let xi: Vec<f64> = xs.row(i).iter().copied().collect();
                        if xi.len() != x.len() {
                            return Err(Error::DimensionMismatch {
                                expected: x.len(),
                                got: xi.len(),
                            });
                        }
                        analytic_ntk(depth, x, &xi)
                    })
                    .collect();
                Ok(DVector::from_vec(vals?))
            }
            NtkKernel::Empirical { net } => {
                let jx = net.jacobian(&DMatrix::from_row_slice(1, x.len(), x))?;
                let jxs = net.jacobian(xs)?;
                Ok(&jxs * jx.row(0).transpose())
            }
        }
    }
}

/// The Appendix-style layer recursion, summed over layers:
/// K(x, x') = sum_{l=1}^{L+1} Sigma^(l-1)(x, x') prod_{s=l}^{L+1} Sigma'^(s)(x, x').
fn analytic_ntk(depth: usize, x: &[f64], x2: &[f64]) -> Result<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut s_xx = dot(x, x);
    let mut s_yy = dot(x2, x2);
    let mut s_xy = dot(x, x2);

    // sigma[l] = Sigma^(l)(x, x'), sigma_prime[l-1] = Sigma'^(l)(x, x')
    let mut sigma = vec![s_xy];
    let mut sigma_prime = Vec::with_capacity(depth + 1);
    for _ in 1..=depth {
        sigma_prime.push(relu_sigma_prime(s_xx, s_yy, s_xy)?);
        let next_xy = relu_sigma(s_xx, s_yy, s_xy)?;
        let next_xx = relu_sigma(s_xx, s_xx, s_xx)?;
        let next_yy = relu_sigma(s_yy, s_yy, s_yy)?;
        s_xy = next_xy;
        s_xx = next_xx;
        s_yy = next_yy;
        sigma.push(s_xy);
    }
    sigma_prime.push(1.0); // Sigma'^(L+1)

    let mut k = 0.0;
    let mut tail_product = 1.0;
    for l in (1..=depth + 1).rev() {
        tail_product *= sigma_prime[l - 1];
        k += sigma[l - 1] * tail_product;
    }
    Ok(k)
}

/// Symmetric kernel Gram matrix, optionally ridge-shifted on the diagonal by
/// lambda * n.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    values: DMatrix<f64>,
    ridge: f64,
}

pub enum GramFactor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl GramFactor {
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            GramFactor::Cholesky(c) => Ok(c.solve(rhs)),
            GramFactor::Lu(lu) => lu
                .solve(rhs)
                .ok_or_else(|| Error::Factorization("LU solve failed on singular matrix".into())),
        }
    }
}

impl GramMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Symmetric positive-definite factorization with one-time jitter
    /// escalation (1e-12 * trace / n on the diagonal) and a pivoted LU
    /// fallback, both logged.
    pub fn factorize(&self) -> Result<GramFactor> {
        if let Some(chol) = Cholesky::new(self.values.clone()) {
            return Ok(GramFactor::Cholesky(chol));
        }
        let jitter = 1e-12 * self.values.trace() / self.n() as f64;
        log::warn!("gram factorization failed; retrying with jitter {jitter:.3e}");
        let mut shifted = self.values.clone();
        for i in 0..self.n() {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(GramFactor::Cholesky(chol));
        }
        log::warn!("jittered factorization failed; falling back to pivoted LU");
        let lu = LU::new(self.values.clone());
        if lu.is_invertible() {
            Ok(GramFactor::Lu(lu))
        } else {
            Err(Error::Factorization(
                "gram matrix is singular even after jitter escalation".into(),
            ))
        }
    }

    /// Dense row-major 64-bit dump for debugging.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.values.nrows() {
            for j in 0..self.values.ncols() {
                w.write_all(&self.values[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Assemble the Gram matrix K(x_i, x_j) + lambda * n on the diagonal.
pub fn gram(kernel: &NtkKernel, xs: &DMatrix<f64>, ridge: f64) -> Result<GramMatrix> {
    let n = xs.nrows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be >= 0".into()));
    }
    let mut values = match kernel {
        NtkKernel::Analytic { depth } => {
            let depth = *depth;
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let xi: Vec<f64> = xs.row(i).iter().copied().collect();
                    (i..n)
                        .map(|j| {
                            let xj: Vec<f64> = xs.row(j).iter().copied().collect();
                            analytic_ntk(depth, &xi, &xj)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let mut m = DMatrix::zeros(n, n);
            for (i, row) in rows.iter().enumerate() {
                for (off, &v) in row.iter().enumerate() {
                    m[(i, i + off)] = v;
                    m[(i + off, i)] = v;
                }
            }
            m
        }
        NtkKernel::Empirical { net } => {
            let jac = net.jacobian(xs)?;
            // Symmetrize to absorb floating-point asymmetry from gemm.
            let m = &jac * jac.transpose();
            (&m + m.transpose()) * 0.5
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel value in gram assembly".into()));
    }
    for i in 0..n {
        values[(i, i)] += ridge * n as f64;
    }
    Ok(GramMatrix { values, ridge })
}
