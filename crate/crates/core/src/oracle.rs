//! Dense reference computations.
//!
//! Everything here works directly on full `N`-sample matrices, with no
//! recursion, no Woodbury identities and no Cholesky-of-kernel tricks. These
//! routines are slow and exist only to check the fast paths in
//! [`stats`](crate::stats), [`likelihood`](crate::likelihood) and
//! [`estimators`](crate::estimators).

use nalgebra::{DMatrix, DVector};

/// Full regressor matrix for times `1..=u.len()` by direct indexing.
pub fn dense_regressor(u: &[f64], n: usize) -> DMatrix<f64> {
    let len = u.len();
    let mut phi = DMatrix::zeros(len, n);
    for t in 0..len {
        for lag in 0..n {
            if t >= lag {
                phi[(t, lag)] = u[t - lag];
            }
        }
    }
    phi
}

/// Forgetting weights `γ^(k-1), ..., γ^0` for `k` samples.
pub fn forgetting_weights(k: usize, gamma: f64) -> DVector<f64> {
    DVector::from_fn(k, |t, _| gamma.powi((k - 1 - t) as i32))
}

/// `(ΦᵀΓΦ, ΦᵀΓY, YᵀΓY)` over the whole record.
pub fn dense_weighted_stats(
    u: &[f64],
    y: &[f64],
    n: usize,
    gamma: f64,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let phi = dense_regressor(&u[..y.len()], n);
    let w = forgetting_weights(y.len(), gamma);
    let gamma_m = DMatrix::from_diagonal(&w);
    let yv = DVector::from_column_slice(y);
    let r = phi.transpose() * &gamma_m * &phi;
    let yt = phi.transpose() * &gamma_m * &yv;
    let yb = (yv.transpose() * &gamma_m * &yv)[(0, 0)];
    (r, yt, yb)
}

/// TC kernel written with `min(β^k, β^j)` over 1-based indices.
pub fn tc_min_form(lambda: f64, beta: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        lambda * beta.powi(i as i32 + 1).min(beta.powi(j as i32 + 1))
    })
}

/// `YᵀGΣ⁻¹GY + ln det Σ` with `Σ = GΦKΦᵀG + σ²I` built explicitly in `N`
/// dimensions; `G = diag(sqrt(w))`.
pub fn dense_neg_log_ml(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    sigma2: f64,
    weights: &DVector<f64>,
) -> f64 {
    let g = weights.map(f64::sqrt);
    let gphi = DMatrix::from_diagonal(&g) * phi;
    let gy = y.component_mul(&g);
    let n_obs = y.len();
    let sigma = &gphi * k * gphi.transpose() + DMatrix::identity(n_obs, n_obs) * sigma2;
    let lu = sigma.clone().lu();
    let alpha = lu.solve(&gy).expect("dense covariance is nonsingular");
    let logdet = sigma
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>();
    gy.dot(&alpha) + logdet
}

/// Posterior mean through the `N`-dimensional representer form
/// `K ΦᵀG (GΦKΦᵀG + σ²I)⁻¹ GY`, which needs no inverse of `K`.
pub fn dense_posterior_mean(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    sigma2: f64,
    weights: &DVector<f64>,
) -> DVector<f64> {
    let g = weights.map(f64::sqrt);
    let gphi = DMatrix::from_diagonal(&g) * phi;
    let gy = y.component_mul(&g);
    let n_obs = y.len();
    let sigma = &gphi * k * gphi.transpose() + DMatrix::identity(n_obs, n_obs) * sigma2;
    let alpha = sigma.lu().solve(&gy).expect("dense covariance is nonsingular");
    k * gphi.transpose() * alpha
}

/// Weighted least squares `argmin Σ w_t (y_t - φ_tᵀθ)²` via QR of `GΦ`.
pub fn dense_weighted_ls(phi: &DMatrix<f64>, y: &DVector<f64>, weights: &DVector<f64>) -> DVector<f64> {
    let g = weights.map(f64::sqrt);
    let gphi = DMatrix::from_diagonal(&g) * phi;
    let gy = y.component_mul(&g);
    let qr = gphi.qr();
    let qty = qr.q().transpose() * gy;
    qr.r()
        .solve_upper_triangular(&qty)
        .expect("regressor has full column rank")
}

/// Central difference of `f` along coordinate `j`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], j: usize, h: f64) -> f64 {
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[j] += h;
    lo[j] -= h;
    (f(&hi) - f(&lo)) / (2.0 * h)
}

/// Periodogram `|X(f)|²` at the `len/2 + 1` non-negative DFT frequencies,
/// by direct summation. Frequencies are normalized so that 1 is Nyquist.
pub fn periodogram(x: &[f64]) -> Vec<(f64, f64)> {
    let len = x.len();
    (0..=len / 2)
        .map(|bin| {
            let omega = 2.0 * std::f64::consts::PI * bin as f64 / len as f64;
            let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                let a = omega * t as f64;
                (re + v * a.cos(), im - v * a.sin())
            });
            (2.0 * bin as f64 / len as f64, re * re + im * im)
        })
        .collect()
}

/// Power series of `num(z⁻¹) / den(z⁻¹)` by polynomial long division.
/// Coefficients are in ascending powers of `z⁻¹`; `den[0]` must be nonzero.
pub fn long_division(num: &[f64], den: &[f64], len: usize) -> Vec<f64> {
    let mut rem: Vec<f64> = num.to_vec();
    rem.resize(len + den.len(), 0.0);
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let q = rem[t] / den[0];
        for (j, &d) in den.iter().enumerate() {
            rem[t + j] -= q * d;
        }
        out.push(q);
    }
    out
}
