//! Oracle and study-level checks.
//!
//! The oracle checks compare the fast recursive paths against the dense
//! `N`-dimensional computations in [`oracle`] on random instances. The study
//! checks read a set of [`RunRecord`]s and test the orderings and
//! invariants a tracking study is expected to show.

use std::fmt;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::estimators::{posterior_mean, RlsEstimator};
use crate::kernel::{tc_kernel, HyperParams};
use crate::likelihood::{eval_f, eval_grad_eta, eval_grad_gamma, eval_joint_f};
use crate::metrics::{Distribution, RunRecord};
use crate::oracle;
use crate::stats::{GammaMode, RegressorBlock, SufficientStats};

pub const LIKELIHOOD_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const STATS_TOL: f64 = 1e-10;
pub const POSTERIOR_TOL: f64 = 1e-8;
pub const ONE_STEP_GAP: f64 = 3.0;
pub const SPEEDUP_RATIO: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Random FIR data set: decaying taps, uniform input, additive noise.
struct Instance {
    u: Vec<f64>,
    y: Vec<f64>,
    n: usize,
    eta: HyperParams,
    sigma2: f64,
    gamma: f64,
}

impl Instance {
    fn draw(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Self {
        let decay: f64 = rng.random_range(0.5..0.95);
        let h: Vec<f64> = (0..n).map(|j| decay.powi(j as i32) * rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..len).map(|_| rng.random_range(-1.7..1.7)).collect();
        let sigma2: f64 = rng.random_range(0.05..0.5);
        let y = (0..len)
            .map(|t| {
                let clean: f64 = (0..n.min(t + 1)).map(|j| h[j] * u[t - j]).sum();
                clean + sigma2.sqrt() * rng.random_range(-1.7..1.7)
            })
            .collect();
        Self {
            u,
            y,
            n,
            eta: HyperParams::new(rng.random_range(0.05..5.0), rng.random_range(0.5..0.97)),
            sigma2,
            gamma: rng.random_range(0.9..0.999),
        }
    }

    fn stats(&self) -> SufficientStats {
        let block = RegressorBlock::from_series(&self.u, &self.y, 1, self.y.len(), self.n).expect("valid range");
        SufficientStats::from_block(&block, GammaMode::Fixed(self.gamma)).expect("valid forgetting factor")
    }

    fn dense_inputs(&self) -> (nalgebra::DMatrix<f64>, DVector<f64>, DVector<f64>) {
        (
            oracle::dense_regressor(&self.u, self.n),
            DVector::from_column_slice(&self.y),
            oracle::forgetting_weights(self.y.len(), self.gamma),
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Negative log marginal likelihood from the statistics against the dense
/// `N × N` covariance form.
pub fn likelihood_oracle(instances: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(2..=30);
        let len = rng.random_range(n + 10..=300);
        let inst = Instance::draw(&mut rng, len, n);
        let kf = tc_kernel(&inst.eta, n).expect("kernel inside the box");
        let fast = eval_f(&inst.stats(), &kf, inst.sigma2, len).map(|e| e.value);
        let (phi, y, w) = inst.dense_inputs();
        let dense = oracle::dense_neg_log_ml(&phi, &y, &kf.k, inst.sigma2, &w);
        worst = worst.max(fast.map(|f| rel_err(f, dense)).unwrap_or(f64::INFINITY));
    }
    CheckResult::new(
        "likelihood oracle",
        worst <= LIKELIHOOD_TOL,
        format!("{instances} instances, max rel err {worst:.2e} (tol {LIKELIHOOD_TOL:.0e}), {:.2}s", start.elapsed().as_secs_f64()),
    )
}

/// Relative error of an analytic derivative against a central difference,
/// with a unit floor on the scale so that derivatives near zero are
/// compared absolutely.
fn derivative_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

/// `∂f/∂λ`, `∂f/∂β` and `∂f/∂γ` against central differences.
pub fn gradient_check(instances: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..instances {
        let n = rng.random_range(2..=20);
        let len = rng.random_range(n + 20..=200);
        let inst = Instance::draw(&mut rng, len, n);
        let stats = inst.stats();
        let x = inst.eta.to_vec();
        let f_at = |p: &[f64]| {
            let kf = tc_kernel(&HyperParams::from_slice(p), n).expect("kernel");
            eval_f(&stats, &kf, inst.sigma2, len).expect("likelihood").value
        };
        let kf = tc_kernel(&inst.eta, n).expect("kernel");
        let grad = eval_grad_eta(&stats, &kf, inst.sigma2, len).expect("gradient").grad;
        for j in 0..2 {
            let fd = oracle::central_difference(f_at, &x, j, 1e-6 * x[j].abs().max(1e-3));
            worst[j] = worst[j].max(derivative_err(grad[j], fd));
        }

        // γ enters through the newest block on top of stored statistics.
        let t_len = rng.random_range(1..=10).min(len - n - 1);
        let split = len - t_len;
        let mut prev = SufficientStats::new(n, GammaMode::Adaptive);
        let head = RegressorBlock::from_series(&inst.u, &inst.y, 1, split, n).expect("range");
        prev.update_weighted(&head, inst.gamma).expect("update");
        let block = RegressorBlock::from_series(&inst.u, &inst.y, split + 1, t_len, n).expect("range");
        let gamma = rng.random_range(0.9..0.999);
        let g = eval_grad_gamma(&prev, &block, &kf, inst.sigma2, gamma).expect("γ gradient");
        let fd = oracle::central_difference(
            |p| eval_joint_f(&prev, &block, &kf, inst.sigma2, p[0], len).expect("joint").value,
            &[gamma],
            0,
            1e-6,
        );
        worst[2] = worst[2].max(derivative_err(g, fd));
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    CheckResult::new(
        "gradient vs finite differences",
        max <= GRADIENT_TOL,
        format!(
            "{instances} instances, max rel err λ {:.2e} β {:.2e} γ {:.2e} (tol {GRADIENT_TOL:.0e}), {:.2}s",
            worst[0],
            worst[1],
            worst[2],
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Blockwise fixed-γ statistics against dense weighted products.
pub fn recursive_stats(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=20);
        let len = rng.random_range(1..=500);
        let inst = Instance::draw(&mut rng, len, n);
        let mut stats = SufficientStats::new(n, GammaMode::Fixed(inst.gamma));
        let mut start = 1;
        while start <= len {
            let t_len = rng.random_range(1..=25).min(len - start + 1);
            let block = RegressorBlock::from_series(&inst.u, &inst.y, start, t_len, n).expect("range");
            stats.update_weighted(&block, inst.gamma).expect("update");
            start += t_len;
        }
        let (r, yt, yb) = oracle::dense_weighted_stats(&inst.u, &inst.y, n, inst.gamma);
        let scale = r.amax().max(yt.amax()).max(yb.abs()).max(1.0);
        let diff = (&stats.r - &r).amax().max((&stats.yt - &yt).amax()).max((stats.yb - yb).abs());
        worst = worst.max(diff / scale);
    }
    CheckResult::new(
        "recursive statistics",
        worst <= STATS_TOL,
        format!("{instances} instances, max scaled diff {worst:.2e} (tol {STATS_TOL:.0e})"),
    )
}

/// Posterior mean against the dense representer solve, and blockwise RLS
/// against dense weighted least squares.
pub fn posterior_oracle(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 10;
    let mut worst_post = 0.0f64;
    let mut worst_rls = 0.0f64;
    for _ in 0..instances {
        let len = rng.random_range(40..=300);
        let inst = Instance::draw(&mut rng, len, n);
        let (phi, y, w) = inst.dense_inputs();
        let kf = tc_kernel(&inst.eta, n).expect("kernel");
        let dense = oracle::dense_posterior_mean(&phi, &y, &kf.k, inst.sigma2, &w);
        let fast = posterior_mean(&inst.stats(), &kf, inst.sigma2);
        worst_post = worst_post.max(fast.map(|h| (h - &dense).norm() / dense.norm()).unwrap_or(f64::INFINITY));

        let init = rng.random_range(n + 10..=len.min(60));
        let ls = oracle::dense_weighted_ls(&phi, &y, &w);
        let rls = RlsEstimator::initialize(&inst.u[..init], &inst.y[..init], n, inst.gamma).and_then(|mut e| {
            let mut k = init;
            while k < len {
                let t_len = rng.random_range(1..=10).min(len - k);
                e.update(&inst.u[k..k + t_len], &inst.y[k..k + t_len])?;
                k += t_len;
            }
            Ok(e)
        });
        worst_rls = worst_rls.max(
            rls.map(|e| (e.impulse_response() - &ls).norm() / ls.norm())
                .unwrap_or(f64::INFINITY),
        );
    }
    CheckResult::new(
        "posterior mean and RLS oracles",
        worst_post <= POSTERIOR_TOL && worst_rls <= POSTERIOR_TOL,
        format!(
            "{instances} instances, max rel err posterior {worst_post:.2e} RLS {worst_rls:.2e} (tol {POSTERIOR_TOL:.0e})"
        ),
    )
}

/// All four oracle checks with the default instance counts.
pub fn oracle_suite(seed: u64) -> Vec<CheckResult> {
    vec![
        likelihood_oracle(50, seed),
        gradient_check(100, seed + 1),
        recursive_stats(30, seed + 2),
        posterior_oracle(30, seed + 3),
    ]
}

fn mean_fit(records: &[RunRecord], method: &str, k: usize) -> Option<f64> {
    let values: Vec<f64> = records.iter().filter_map(|r| r.trace(method)?.at(k)).collect();
    (values.len() == records.len() && !values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn missing(name: &str, what: &str) -> CheckResult {
    CheckResult::new(name, false, format!("records lack {what}"))
}

/// Mean absolute fit gap between the one-step and the converged estimator
/// at every checkpoint.
pub fn one_step_matches_opt(records: &[RunRecord], checkpoints: &[usize]) -> CheckResult {
    let name = "one-step vs OPT fit gap";
    let mut gaps = Vec::new();
    for &k in checkpoints {
        let diffs: Option<Vec<f64>> = records
            .iter()
            .map(|r| Some((r.trace("tc_ff")?.at(k)? - r.trace("tc_opt_ff")?.at(k)?).abs()))
            .collect();
        match diffs {
            Some(d) if !d.is_empty() => gaps.push((k, d.iter().sum::<f64>() / d.len() as f64)),
            _ => return missing(name, "tc_ff/tc_opt_ff traces"),
        }
    }
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    let listed: Vec<String> = gaps.iter().map(|(k, g)| format!("k={k}: {g:.2}")).collect();
    CheckResult::new(
        name,
        worst <= ONE_STEP_GAP,
        format!("mean |Δfit| {} (limit {ONE_STEP_GAP})", listed.join(", ")),
    )
}

/// Ratio of mean cumulative update time, one-step over converged.
pub fn speedup(records: &[RunRecord]) -> CheckResult {
    let name = "one-step speedup";
    let mean_time = |m: &str| -> Option<f64> {
        let t: Option<Vec<f64>> = records.iter().map(|r| r.cumulative_time(m)).collect();
        t.filter(|t| !t.is_empty()).map(|t| t.iter().sum::<f64>() / t.len() as f64)
    };
    match (mean_time("tc_ff"), mean_time("tc_opt_ff")) {
        (Some(one), Some(opt)) => {
            let ratio = one / opt;
            CheckResult::new(
                name,
                ratio <= SPEEDUP_RATIO,
                format!("tc_ff {one:.3}s, tc_opt_ff {opt:.3}s, ratio {ratio:.3} (limit {SPEEDUP_RATIO})"),
            )
        }
        _ => missing(name, "timing for tc_ff/tc_opt_ff"),
    }
}

/// Median fit of the adaptive estimator against the fixed one at `k`.
pub fn adaptive_advantage(records: &[RunRecord], k: usize) -> CheckResult {
    let name = "adaptive forgetting at regime";
    let median = |m: &str| -> Option<f64> {
        let v: Option<Vec<f64>> = records.iter().map(|r| r.trace(m)?.at(k)).collect();
        Distribution::of(&v?).ok().map(|d| d.median)
    };
    match (median("tc_est_ff"), median("tc_ff")) {
        (Some(est), Some(ff)) => CheckResult::new(
            name,
            est >= ff,
            format!("median fit at k={k}: tc_est_ff {est:.2}, tc_ff {ff:.2}"),
        ),
        _ => missing(name, "tc_est_ff/tc_ff traces"),
    }
}

/// Drop after the switch, then recovery, for every TC method present.
pub fn switch_response(records: &[RunRecord], before: usize, after: usize, end: usize) -> CheckResult {
    let name = "switch response";
    let mut parts = Vec::new();
    let mut ok = true;
    for m in ["tc_ff", "tc_est_ff", "tc_opt_ff", "tc_opt_est_ff"] {
        if records.first().and_then(|r| r.trace(m)).is_none() {
            continue;
        }
        match (mean_fit(records, m, before), mean_fit(records, m, after), mean_fit(records, m, end)) {
            (Some(a), Some(b), Some(c)) => {
                ok &= b < a && c > b;
                parts.push(format!("{m} {a:.1} → {b:.1} → {c:.1}"));
            }
            _ => return missing(name, &format!("{m} checkpoints {before}/{after}/{end}")),
        }
    }
    if parts.is_empty() {
        return missing(name, "TC methods");
    }
    CheckResult::new(name, ok, format!("mean fit at k={before}/{after}/{end}: {}", parts.join("; ")))
}

/// Armijo and feasibility counters summed over every audited run.
pub fn step_invariants(records: &[RunRecord]) -> CheckResult {
    let (mut steps, mut armijo, mut bounds) = (0, 0, 0);
    for a in records.iter().flat_map(|r| r.audits.values()) {
        steps += a.sgp_steps;
        armijo += a.armijo_violations;
        bounds += a.bound_violations;
    }
    CheckResult::new(
        "Armijo and feasibility",
        steps > 0 && armijo == 0 && bounds == 0,
        format!("{steps} SGP steps, {armijo} Armijo violations, {bounds} iterates outside the box"),
    )
}
