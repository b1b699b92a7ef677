//! Negative log marginal likelihood of the FIR data under the TC prior,
//! evaluated from the sufficient statistics only.
//!
//! With `K = LLᵀ` and `σ²I + LᵀRL = SSᵀ`,
//!
//! ```text
//! f = (k - n) ln σ² + 2 ln|S| + σ⁻² (Ȳ - ‖S⁻¹LᵀỸ‖²)
//! ```
//!
//! which equals `YᵀΣ⁻¹Y + ln det Σ` with `Σ = ΦKΦᵀ + σ²I` but costs O(n³)
//! regardless of the number of samples `k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::KernelFactor;
use crate::stats::{RegressorBlock, SufficientStats};

#[derive(Clone, Debug)]
pub struct MlEvaluation {
    pub value: f64,
    /// Gradient over the active hyper-parameters, `(λ, β)` or `(λ, β, γ)`.
    /// Empty for value-only evaluations.
    pub grad: Vec<f64>,
    /// `grad = split_v - split_u` on the `(λ, β)` coordinates.
    pub split_v: Vec<f64>,
    pub split_u: Vec<f64>,
    /// Lower Cholesky factor of `σ²I + LᵀRL`.
    pub s: DMatrix<f64>,
    /// Posterior mean at the evaluated point; two triangular solves on top
    /// of the factorization.
    pub posterior_mean: DVector<f64>,
    /// Set when fewer samples than taps were absorbed; `(k - n) ln σ²` then
    /// has a negative count.
    pub underdetermined: bool,
}

/// Factorization shared by value, gradient and posterior computations.
pub(crate) struct Factored<'a> {
    pub kf: &'a KernelFactor,
    pub sigma2: f64,
    /// `LᵀR`
    pub lt_r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// `S⁻¹LᵀỸ`
    pub c: DVector<f64>,
}

impl<'a> Factored<'a> {
    pub fn new(stats: &SufficientStats, kf: &'a KernelFactor, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Domain(format!("noise variance {sigma2} must be positive")));
        }
        let n = kf.dim();
        if stats.dim() != n {
            return Err(Error::InvalidArgument(format!(
                "statistics dimension {} does not match kernel dimension {n}",
                stats.dim()
            )));
        }
        let lt = kf.l.transpose();
        let lt_r = &lt * &stats.r;
        let mut m = &lt_r * &kf.l;
        for i in 0..n {
            m[(i, i)] += sigma2;
        }
        // LᵀRL is only symmetric up to rounding.
        let m = (&m + m.transpose()) * 0.5;
        let s = m
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("σ²I + LᵀRL is not positive definite".into()))?
            .unpack();
        let c = s
            .solve_lower_triangular(&(&lt * &stats.yt))
            .ok_or_else(|| Error::NumericalFailure("singular Cholesky factor".into()))?;
        Ok(Self { kf, sigma2, lt_r, s, c })
    }

    pub fn log_det_s(&self) -> f64 {
        self.s.diagonal().iter().map(|d| d.ln()).sum()
    }

    pub fn value(&self, stats: &SufficientStats, k_total: usize) -> f64 {
        let n = self.kf.dim() as f64;
        (k_total as f64 - n) * self.sigma2.ln()
            + 2.0 * self.log_det_s()
            + (stats.yb - self.c.norm_squared()) / self.sigma2
    }

    /// Posterior mean `L S⁻ᵀ S⁻¹ LᵀỸ = (R + σ²K⁻¹)⁻¹Ỹ`.
    pub fn posterior_mean(&self) -> Result<DVector<f64>> {
        let v = self
            .s
            .tr_solve_lower_triangular(&self.c)
            .ok_or_else(|| Error::NumericalFailure("singular Cholesky factor".into()))?;
        Ok(&self.kf.l * v)
    }
}

fn check_count(stats: &SufficientStats, k_total: usize) -> bool {
    k_total < stats.dim()
}

pub fn eval_f(
    stats: &SufficientStats,
    kf: &KernelFactor,
    sigma2: f64,
    k_total: usize,
) -> Result<MlEvaluation> {
    let fac = Factored::new(stats, kf, sigma2)?;
    let posterior_mean = fac.posterior_mean()?;
    Ok(MlEvaluation {
        value: fac.value(stats, k_total),
        posterior_mean,
        grad: Vec::new(),
        split_v: Vec::new(),
        split_u: Vec::new(),
        underdetermined: check_count(stats, k_total),
        s: fac.s,
    })
}

/// Trace and quadratic-form parts of the `(λ, β)` gradient,
/// `tr(ΦᵀΣ⁻¹Φ K_j)` and `(ΦᵀΣ⁻¹Y)ᵀ K_j (ΦᵀΣ⁻¹Y)`.
fn eta_gradient_parts(
    stats: &SufficientStats,
    fac: &Factored<'_>,
    h: &DVector<f64>,
) -> Result<([f64; 2], [f64; 2])> {
    let w = fac
        .s
        .solve_lower_triangular(&fac.lt_r)
        .ok_or_else(|| Error::NumericalFailure("singular Cholesky factor".into()))?;
    // ΦᵀΣ⁻¹Φ = σ⁻²(R - RL(SSᵀ)⁻¹LᵀR)
    let a = (&stats.r - w.tr_mul(&w)) / fac.sigma2;
    // ΦᵀΣ⁻¹Y = σ⁻²(Ỹ - R ĥ)
    let b = (&stats.yt - &stats.r * h) / fac.sigma2;
    let mut traces = [0.0; 2];
    let mut quads = [0.0; 2];
    for (j, kj) in [&fac.kf.dk_dlambda, &fac.kf.dk_dbeta].into_iter().enumerate() {
        traces[j] = a.component_mul(kj).sum();
        quads[j] = (kj * &b).dot(&b);
    }
    Ok((traces, quads))
}

/// Splits `trace - quad` into two nonnegative parts. The trace and the
/// quadratic form are each nonnegative whenever `∂K/∂η_j` is PSD; when a part
/// comes out negative it is moved to the other side.
fn split_gradient(traces: [f64; 2], quads: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
    let mut v = Vec::with_capacity(2);
    let mut u = Vec::with_capacity(2);
    for j in 0..2 {
        v.push(traces[j].max(0.0) + (-quads[j]).max(0.0));
        u.push(quads[j].max(0.0) + (-traces[j]).max(0.0));
    }
    (v, u)
}

pub fn eval_grad_eta(
    stats: &SufficientStats,
    kf: &KernelFactor,
    sigma2: f64,
    k_total: usize,
) -> Result<MlEvaluation> {
    let fac = Factored::new(stats, kf, sigma2)?;
    let h = fac.posterior_mean()?;
    let (traces, quads) = eta_gradient_parts(stats, &fac, &h)?;
    let (split_v, split_u) = split_gradient(traces, quads);
    Ok(MlEvaluation {
        value: fac.value(stats, k_total),
        grad: vec![traces[0] - quads[0], traces[1] - quads[1]],
        posterior_mean: h,
        split_v,
        split_u,
        underdetermined: check_count(stats, k_total),
        s: fac.s,
    })
}

/// `∂f/∂γ` through `(R_γ, Ỹ_γ, Ȳ_γ)`, given the factorization at the
/// candidate statistics and the statistics derivative.
fn gamma_derivative(
    fac: &Factored<'_>,
    h: &DVector<f64>,
    d: &crate::stats::StatsDerivative,
) -> Result<f64> {
    let z = fac
        .s
        .solve_lower_triangular(&fac.kf.l.transpose())
        .ok_or_else(|| Error::NumericalFailure("singular Cholesky factor".into()))?;
    let trace = (&z * &d.dr).component_mul(&z).sum();
    let quad = d.dyb - 2.0 * h.dot(&d.dyt) + (&d.dr * h).dot(h);
    Ok(trace + quad / fac.sigma2)
}

/// Joint evaluation at `(η, γ)` where the statistics are the stored ones
/// updated with `block` under candidate forgetting factor `γ`. The gradient
/// is `(∂f/∂λ, ∂f/∂β, ∂f/∂γ)`.
pub fn eval_joint(
    stats_prev: &SufficientStats,
    block: &RegressorBlock,
    kf: &KernelFactor,
    sigma2: f64,
    gamma: f64,
    k_total: usize,
) -> Result<MlEvaluation> {
    let stats = stats_prev.with_block_weighted(block, gamma)?;
    let d = stats_prev.weighted_stats_derivative(block, gamma)?;
    let fac = Factored::new(&stats, kf, sigma2)?;
    let h = fac.posterior_mean()?;
    let (traces, quads) = eta_gradient_parts(&stats, &fac, &h)?;
    let (split_v, split_u) = split_gradient(traces, quads);
    let dg = gamma_derivative(&fac, &h, &d)?;
    Ok(MlEvaluation {
        value: fac.value(&stats, k_total),
        grad: vec![traces[0] - quads[0], traces[1] - quads[1], dg],
        posterior_mean: h,
        split_v,
        split_u,
        underdetermined: check_count(&stats, k_total),
        s: fac.s,
    })
}

/// Value-only counterpart of [`eval_joint`].
pub fn eval_joint_f(
    stats_prev: &SufficientStats,
    block: &RegressorBlock,
    kf: &KernelFactor,
    sigma2: f64,
    gamma: f64,
    k_total: usize,
) -> Result<MlEvaluation> {
    let stats = stats_prev.with_block_weighted(block, gamma)?;
    eval_f(&stats, kf, sigma2, k_total)
}

pub fn eval_grad_gamma(
    stats_prev: &SufficientStats,
    block: &RegressorBlock,
    kf: &KernelFactor,
    sigma2: f64,
    gamma: f64,
) -> Result<f64> {
    let stats = stats_prev.with_block_weighted(block, gamma)?;
    let d = stats_prev.weighted_stats_derivative(block, gamma)?;
    let fac = Factored::new(&stats, kf, sigma2)?;
    let h = fac.posterior_mean()?;
    gamma_derivative(&fac, &h, &d)
}

/// `∂f/∂σ²` at fixed statistics:
/// `(k - n)/σ² + tr(M⁻¹) - (Ȳ - ‖c‖²)/σ⁴ + ‖M⁻¹LᵀỸ‖²/σ²` with
/// `M = σ²I + LᵀRL` and `c = S⁻¹LᵀỸ`.
pub fn eval_grad_sigma2(stats: &SufficientStats, kf: &KernelFactor, sigma2: f64, k_total: usize) -> Result<f64> {
    let fac = Factored::new(stats, kf, sigma2)?;
    let n = kf.dim();
    let s_inv = fac
        .s
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::NumericalFailure("singular Cholesky factor".into()))?;
    let m_inv_y = fac
        .s
        .tr_solve_lower_triangular(&fac.c)
        .ok_or_else(|| Error::NumericalFailure("singular Cholesky factor".into()))?;
    Ok((k_total as f64 - n as f64) / sigma2 + s_inv.norm_squared()
        - (stats.yb - fac.c.norm_squared()) / (sigma2 * sigma2)
        + m_inv_y.norm_squared() / sigma2)
}

/// Least-squares impulse response and the residual noise variance.
#[derive(Clone, Debug)]
pub struct LsNoise {
    pub h_ls: DVector<f64>,
    pub sigma2: f64,
    /// Before the `sigma2_min` floor is applied.
    pub raw_sigma2: f64,
}

pub fn sigma2_floor(stats: &SufficientStats, k_total: usize) -> f64 {
    1e-12 * (stats.yb / k_total.max(1) as f64).max(1.0)
}

/// Solves `R h = Ỹ`, adding a ridge of `1e-10·tr(R)/n` (escalating tenfold)
/// when `R` is not positive definite.
fn solve_normal_equations(stats: &SufficientStats) -> Result<DVector<f64>> {
    if let Some(c) = stats.r.clone().cholesky() {
        return Ok(c.solve(&stats.yt));
    }
    let n = stats.dim();
    let tr = stats.r.trace();
    if tr <= 0.0 {
        return Ok(DVector::zeros(n));
    }
    let mut ridge = 1e-10 * tr / n as f64;
    for _ in 0..4 {
        let mut loaded = stats.r.clone();
        for i in 0..n {
            loaded[(i, i)] += ridge;
        }
        if let Some(c) = loaded.cholesky() {
            return Ok(c.solve(&stats.yt));
        }
        ridge *= 10.0;
    }
    Err(Error::NumericalFailure("normal equations not solvable".into()))
}

pub fn ls_sigma2(stats: &SufficientStats, k_total: usize) -> Result<LsNoise> {
    let n = stats.dim();
    if k_total <= n {
        return Err(Error::InsufficientData(format!(
            "{k_total} samples cannot estimate noise with {n} taps"
        )));
    }
    let h_ls = solve_normal_equations(stats)?;
    let rss = stats.yb - 2.0 * stats.yt.dot(&h_ls) + (&stats.r * &h_ls).dot(&h_ls);
    let raw_sigma2 = rss / (k_total - n) as f64;
    let sigma2 = raw_sigma2.max(sigma2_floor(stats, k_total));
    Ok(LsNoise { h_ls, sigma2, raw_sigma2 })
}

/// Derivative of the LS noise variance along a statistics derivative. By
/// stationarity of the LS fit only the explicit dependence remains:
/// `(dȲ - 2ĥᵀdỸ + ĥᵀdR ĥ)/(k - n)`. Zero when the floor is active.
pub fn ls_sigma2_derivative(ls: &LsNoise, d: &crate::stats::StatsDerivative, k_total: usize) -> f64 {
    if ls.sigma2 > ls.raw_sigma2 {
        return 0.0;
    }
    let n = ls.h_ls.len();
    let h = &ls.h_ls;
    (d.dyb - 2.0 * h.dot(&d.dyt) + (&d.dr * h).dot(h)) / (k_total - n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{tc_kernel, HyperParams};
    use crate::oracle;
    use crate::stats::GammaMode;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_stats(r: f64, yt: f64, yb: f64, count: usize) -> SufficientStats {
        let mut s = SufficientStats::new(1, GammaMode::Unweighted);
        s.r[(0, 0)] = r;
        s.yt[0] = yt;
        s.yb = yb;
        s.count = count;
        s
    }

    struct Instance {
        u: Vec<f64>,
        y: Vec<f64>,
        n: usize,
        eta: HyperParams,
        sigma2: f64,
    }

    fn instance(seed: u64, len: usize, n: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: f64 = rng.random_range(0.5..0.95);
        let h: Vec<f64> = (0..n).map(|j| beta.powi(j as i32) * rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..len).map(|_| rng.random_range(-1.7..1.7)).collect();
        let sigma2: f64 = rng.random_range(0.05..0.5);
        let y: Vec<f64> = (0..len)
            .map(|t| {
                let clean: f64 = (0..n.min(t + 1)).map(|j| h[j] * u[t - j]).sum();
                clean + sigma2.sqrt() * rng.random_range(-1.7..1.7)
            })
            .collect();
        Instance {
            u,
            y,
            n,
            eta: HyperParams::new(rng.random_range(0.2..3.0), rng.random_range(0.5..0.95)),
            sigma2,
        }
    }

    fn weighted_stats(inst: &Instance, gamma: f64) -> SufficientStats {
        let block = RegressorBlock::from_series(&inst.u, &inst.y, 1, inst.y.len(), inst.n).unwrap();
        SufficientStats::from_block(&block, GammaMode::Fixed(gamma)).unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let y: f64 = 1.3;
        let kf = tc_kernel(&HyperParams::new(2.0, 0.5), 1).unwrap(); // K = [1]
        let s = scalar_stats(1.0, y, y * y, 1);
        let ev = eval_f(&s, &kf, 1.0, 1).unwrap();
        assert_relative_eq!(ev.value, 2f64.ln() + y * y / 2.0, max_relative = 1e-14);
        assert_relative_eq!(ev.s[(0, 0)], 2f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn zero_data_reduces_to_log_terms() {
        let kf = tc_kernel(&HyperParams::new(1.5, 0.8), 6).unwrap();
        let mut s = SufficientStats::new(6, GammaMode::Unweighted);
        s.r = DMatrix::identity(6, 6) * 3.0;
        s.count = 20;
        let sigma2 = 0.4;
        let ev = eval_grad_eta(&s, &kf, sigma2, 20).unwrap();
        let expected = 14.0 * sigma2.ln() + 2.0 * ev.s.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert_relative_eq!(ev.value, expected, max_relative = 1e-14);
        assert!(ev.split_u.iter().all(|&u| u == 0.0));
        assert_relative_eq!(ev.grad[0], ev.split_v[0], max_relative = 1e-14);
        assert!(ev.grad[0] >= 0.0);
    }

    #[test]
    fn matches_dense_likelihood() {
        for seed in 0..5 {
            let inst = instance(seed, 200, 20);
            let gamma = if seed % 2 == 0 { 1.0 } else { 0.99 };
            let s = weighted_stats(&inst, gamma);
            let kf = tc_kernel(&inst.eta, inst.n).unwrap();
            let fast = eval_f(&s, &kf, inst.sigma2, 200).unwrap().value;
            let phi = oracle::dense_regressor(&inst.u, inst.n);
            let dense = oracle::dense_neg_log_ml(
                &phi,
                &DVector::from_vec(inst.y.clone()),
                &kf.k,
                inst.sigma2,
                &oracle::forgetting_weights(200, gamma),
            );
            assert!((fast - dense).abs() / dense.abs() <= 1e-8, "{fast} vs {dense}");
        }
    }

    #[test]
    fn eta_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let inst = instance(100 + seed, 150, 12);
            let s = weighted_stats(&inst, 0.995);
            let ev = eval_grad_eta(&s, &tc_kernel(&inst.eta, inst.n).unwrap(), inst.sigma2, 150).unwrap();
            let x = inst.eta.to_vec();
            for j in 0..2 {
                let h = 1e-5 * (1.0 + x[j].abs());
                let fd = oracle::central_difference(
                    |p| {
                        let kf = tc_kernel(&HyperParams::from_slice(p), inst.n).unwrap();
                        eval_f(&s, &kf, inst.sigma2, 150).unwrap().value
                    },
                    &x,
                    j,
                    h,
                );
                let rel = (fd - ev.grad[j]).abs() / ev.grad[j].abs().max(1e-8);
                assert!(rel <= 1e-5, "seed {seed} coord {j}: {} vs {fd}", ev.grad[j]);
            }
            for j in 0..2 {
                assert!(ev.split_v[j] >= 0.0 && ev.split_u[j] >= 0.0);
                assert!((ev.split_v[j] - ev.split_u[j] - ev.grad[j]).abs() <= 1e-12 * ev.split_v[j].max(1.0));
            }
        }
    }

    #[test]
    fn small_scale_gradient_is_negative_with_data() {
        for seed in 0..5 {
            let inst = instance(200 + seed, 120, 10);
            let s = weighted_stats(&inst, 1.0);
            let eta = HyperParams::new(1e-8, inst.eta.beta);
            let ev = eval_grad_eta(&s, &tc_kernel(&eta, inst.n).unwrap(), inst.sigma2, 120).unwrap();
            assert!(ev.grad[0] < 0.0);
            let f0 = ev.value;
            let f1 = eval_f(&s, &tc_kernel(&HyperParams::new(1e-2, inst.eta.beta), inst.n).unwrap(), inst.sigma2, 120)
                .unwrap()
                .value;
            assert!(f1 < f0);
        }
    }

    #[test]
    fn gamma_gradient_matches_finite_difference() {
        for seed in 0..10 {
            let inst = instance(300 + seed, 160, 8);
            let mut prev = SufficientStats::new(inst.n, GammaMode::Adaptive);
            prev.update_weighted(&RegressorBlock::from_series(&inst.u, &inst.y, 1, 150, inst.n).unwrap(), 0.97)
                .unwrap();
            let block = RegressorBlock::from_series(&inst.u, &inst.y, 151, 10, inst.n).unwrap();
            let kf = tc_kernel(&inst.eta, inst.n).unwrap();
            let gamma = 0.96;
            let g = eval_grad_gamma(&prev, &block, &kf, inst.sigma2, gamma).unwrap();
            let joint = eval_joint(&prev, &block, &kf, inst.sigma2, gamma, 160).unwrap();
            assert_relative_eq!(joint.grad[2], g, max_relative = 1e-14);
            let h = 1e-5;
            let fd = oracle::central_difference(
                |p| eval_joint_f(&prev, &block, &kf, inst.sigma2, p[0], 160).unwrap().value,
                &[gamma],
                0,
                h,
            );
            assert!((fd - g).abs() / g.abs() <= 1e-5, "{g} vs {fd}");
        }
    }

    #[test]
    fn noise_variance_gradient_matches_finite_difference() {
        for seed in 0..8 {
            let inst = instance(700 + seed, 140, 7);
            let stats = weighted_stats(&inst, 0.98);
            let kf = tc_kernel(&inst.eta, inst.n).unwrap();
            let g = eval_grad_sigma2(&stats, &kf, inst.sigma2, 140).unwrap();
            let fd = oracle::central_difference(
                |p| eval_f(&stats, &kf, p[0], 140).unwrap().value,
                &[inst.sigma2],
                0,
                1e-6 * inst.sigma2,
            );
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(1.0), "{g} vs {fd}");
        }
    }

    #[test]
    fn ls_noise_derivative_matches_finite_difference() {
        for seed in 0..8 {
            let inst = instance(800 + seed, 160, 6);
            let mut prev = SufficientStats::new(inst.n, GammaMode::Adaptive);
            prev.update_weighted(&RegressorBlock::from_series(&inst.u, &inst.y, 1, 150, inst.n).unwrap(), 0.97)
                .unwrap();
            let block = RegressorBlock::from_series(&inst.u, &inst.y, 151, 10, inst.n).unwrap();
            let gamma = 0.95;
            let ls = ls_sigma2(&prev.with_block_weighted(&block, gamma).unwrap(), 160).unwrap();
            let d = prev.weighted_stats_derivative(&block, gamma).unwrap();
            let an = ls_sigma2_derivative(&ls, &d, 160);
            let fd = oracle::central_difference(
                |p| ls_sigma2(&prev.with_block_weighted(&block, p[0]).unwrap(), 160).unwrap().sigma2,
                &[gamma],
                0,
                1e-6,
            );
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{an} vs {fd}");
        }
    }

    #[test]
    fn gamma_gradient_scalar_expansion() {
        // n = 1, T = 1: R_γ = γ r0 + φ², Ỹ_γ = γ y0 + φ y, Ȳ_γ = γ b0 + y².
        let (r0, y0, b0, phi, y, k, sigma2, gamma) = (2.0, 0.7, 1.1, 0.6, -0.4, 0.8, 0.3, 0.95);
        let kf = tc_kernel(&HyperParams::new(k / 0.5, 0.5), 1).unwrap();
        let prev = {
            let mut s = scalar_stats(r0, y0, b0, 5);
            s.gamma_mode = GammaMode::Adaptive;
            s
        };
        let block = build(phi, y);
        let g = eval_grad_gamma(&prev, &block, &kf, sigma2, gamma).unwrap();
        // f(γ) = ln(σ² + kR) + (Ȳ - k Ỹ²/(σ² + kR))/σ² + const
        let r = gamma * r0 + phi * phi;
        let yt = gamma * y0 + phi * y;
        let m = sigma2 + k * r;
        let expected = k * r0 / m + (b0 - k * (2.0 * yt * y0 * m - yt * yt * k * r0) / (m * m)) / sigma2;
        assert_relative_eq!(g, expected, max_relative = 1e-12);
    }

    fn build(phi: f64, y: f64) -> RegressorBlock {
        crate::stats::build_block(&[phi], &[y], 1, 1).unwrap()
    }

    #[test]
    fn gamma_gradient_vanishes_without_data() {
        let prev = SufficientStats::new(4, GammaMode::Adaptive);
        let block = crate::stats::build_block(&[0.0; 10], &[0.0; 10], 1, 4).unwrap();
        let kf = tc_kernel(&HyperParams::new(1.0, 0.8), 4).unwrap();
        assert_eq!(eval_grad_gamma(&prev, &block, &kf, 0.3, 0.97).unwrap(), 0.0);
        assert!(matches!(
            eval_grad_gamma(&prev, &block, &kf, 0.3, 1.2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ls_noise_on_exact_fir() {
        let h_true = [0.9, -0.4, 0.25, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..400)
            .map(|t| (0..4.min(t + 1)).map(|j| h_true[j] * u[t - j]).sum())
            .collect();
        let block = RegressorBlock::from_series(&u, &y, 1, 400, 4).unwrap();
        let s = SufficientStats::from_block(&block, GammaMode::Unweighted).unwrap();
        let ls = ls_sigma2(&s, 400).unwrap();
        assert!(ls.raw_sigma2 <= 1e-16, "{}", ls.raw_sigma2);
        for j in 0..4 {
            assert!((ls.h_ls[j] - h_true[j]).abs() <= 1e-8);
        }
    }

    #[test]
    fn ls_noise_without_correlation() {
        let mut s = SufficientStats::new(3, GammaMode::Unweighted);
        s.r = DMatrix::identity(3, 3);
        s.yb = 5.0;
        let ls = ls_sigma2(&s, 13).unwrap();
        assert!(ls.h_ls.iter().all(|&v| v == 0.0));
        assert_relative_eq!(ls.sigma2, 0.5, max_relative = 1e-15);
        assert!(matches!(ls_sigma2(&s, 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn ls_noise_gamma_one_equals_unweighted() {
        let inst = instance(9, 80, 5);
        let block = RegressorBlock::from_series(&inst.u, &inst.y, 1, 80, 5).unwrap();
        let a = ls_sigma2(&SufficientStats::from_block(&block, GammaMode::Fixed(1.0)).unwrap(), 80).unwrap();
        let b = ls_sigma2(&SufficientStats::from_block(&block, GammaMode::Unweighted).unwrap(), 80).unwrap();
        assert_relative_eq!(a.sigma2, b.sigma2, max_relative = 1e-13);
        assert_relative_eq!(a.h_ls, b.h_ls, max_relative = 1e-12);
    }

    #[test]
    fn order_of_absorption_does_not_matter() {
        let inst = instance(11, 90, 6);
        let b1 = RegressorBlock::from_series(&inst.u, &inst.y, 1, 40, 6).unwrap();
        let b2 = RegressorBlock::from_series(&inst.u, &inst.y, 41, 50, 6).unwrap();
        let mut a = SufficientStats::new(6, GammaMode::Unweighted);
        a.update_unweighted(&b1).unwrap();
        a.update_unweighted(&b2).unwrap();
        let mut b = SufficientStats::new(6, GammaMode::Unweighted);
        b.update_unweighted(&b2).unwrap();
        b.update_unweighted(&b1).unwrap();
        let kf = tc_kernel(&inst.eta, 6).unwrap();
        let fa = eval_f(&a, &kf, inst.sigma2, 90).unwrap().value;
        let fb = eval_f(&b, &kf, inst.sigma2, 90).unwrap().value;
        assert_relative_eq!(fa, fb, max_relative = 1e-12);
    }
}
