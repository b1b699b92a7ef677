//! TC kernel `K[k,j] = λ·β^max(k,j)` (1-based lags), its Cholesky factor
//! and its hyper-parameter derivatives, plus the feasible box for the
//! hyper-parameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel scale and decay, plus the forgetting factor when it is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: Option<f64>,
}

impl HyperParams {
    pub fn new(lambda: f64, beta: f64) -> Self {
        Self { lambda, beta, gamma: None }
    }

    pub fn with_gamma(lambda: f64, beta: f64, gamma: f64) -> Self {
        Self { lambda, beta, gamma: Some(gamma) }
    }

    pub fn dim(&self) -> usize {
        if self.gamma.is_some() {
            3
        } else {
            2
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.lambda, self.beta];
        v.extend(self.gamma);
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec); a third coordinate is the
    /// forgetting factor.
    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            lambda: x[0],
            beta: x[1],
            gamma: x.get(2).copied(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Box-shaped feasible set for `(λ, β, γ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleBox {
    pub lambda: (f64, f64),
    pub beta: (f64, f64),
    pub gamma: (f64, f64),
}

impl Default for FeasibleBox {
    fn default() -> Self {
        Self {
            lambda: (1e-8, 1e8),
            beta: (1e-4, 1.0 - 1e-4),
            gamma: (0.9, 1.0),
        }
    }
}

impl FeasibleBox {
    pub fn lower(&self, dim: usize) -> Vec<f64> {
        [self.lambda.0, self.beta.0, self.gamma.0][..dim].to_vec()
    }

    pub fn upper(&self, dim: usize) -> Vec<f64> {
        [self.lambda.1, self.beta.1, self.gamma.1][..dim].to_vec()
    }

    pub fn contains(&self, p: &HyperParams) -> bool {
        let x = p.to_vec();
        let lo = self.lower(x.len());
        let hi = self.upper(x.len());
        x.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| v >= l && v <= h)
    }
}

/// Componentwise clamp into `[lower, upper]`.
///
/// For a diagonal positive-definite metric `D`, this is the metric projection
/// `argmin_{x in box} (x - z)ᵀ D⁻¹ (x - z)`, since the objective separates
/// across coordinates.
pub fn clamp_into(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(l, h);
    }
}

pub fn project_box(p: &HyperParams, omega: &FeasibleBox) -> HyperParams {
    let mut x = p.to_vec();
    let d = x.len();
    clamp_into(&mut x, &omega.lower(d), &omega.upper(d));
    HyperParams::from_slice(&x)
}

/// Kernel matrix with its factor and derivatives.
#[derive(Clone, Debug)]
pub struct KernelFactor {
    pub k: DMatrix<f64>,
    /// Lower-triangular, `LLᵀ = K + jitter·I`.
    pub l: DMatrix<f64>,
    pub dk_dlambda: DMatrix<f64>,
    pub dk_dbeta: DMatrix<f64>,
    /// Diagonal loading that was needed for the factorization (usually 0).
    pub jitter: f64,
}

impl KernelFactor {
    pub fn dim(&self) -> usize {
        self.k.nrows()
    }
}

/// `λ·β^max(k,j)` without factorization; any finite `λ` is accepted.
pub fn tc_matrix(lambda: f64, beta: f64, n: usize) -> DMatrix<f64> {
    let powers: Vec<f64> = (1..=n).map(|m| beta.powi(m as i32)).collect();
    DMatrix::from_fn(n, n, |i, j| lambda * powers[i.max(j)])
}

const JITTER_RETRIES: usize = 3;

/// Cholesky factor with escalating diagonal loading on failure.
pub(crate) fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Some((c.unpack(), 0.0));
    }
    let n = m.nrows();
    let mut jitter = 1e-12 * m.trace().abs() / n as f64;
    if jitter == 0.0 {
        jitter = f64::MIN_POSITIVE;
    }
    for _ in 0..JITTER_RETRIES {
        let mut loaded = m.clone();
        for i in 0..n {
            loaded[(i, i)] += jitter;
        }
        if let Some(c) = loaded.cholesky() {
            return Some((c.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    None
}

pub fn tc_kernel(eta: &HyperParams, n: usize) -> Result<KernelFactor> {
    let (lambda, beta) = (eta.lambda, eta.beta);
    if !lambda.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite kernel parameters λ={lambda}, β={beta}"
        )));
    }
    if lambda <= 0.0 || !(beta > 0.0 && beta < 1.0) || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "TC kernel needs λ > 0, 0 < β < 1, n ≥ 1 (got λ={lambda}, β={beta}, n={n})"
        )));
    }
    let k = tc_matrix(lambda, beta, n);
    let (l, jitter) = cholesky_with_jitter(&k).ok_or_else(|| {
        Error::NumericalFailure(format!("TC kernel not factorizable at λ={lambda}, β={beta}"))
    })?;
    let dk_dlambda = tc_matrix(1.0, beta, n);
    let dk_dbeta = DMatrix::from_fn(n, n, |i, j| {
        let m = i.max(j) + 1;
        lambda * m as f64 * beta.powi(m as i32 - 1)
    });
    Ok(KernelFactor {
        k,
        l,
        dk_dlambda,
        dk_dbeta,
        jitter,
    })
}
