//! Online estimators.
//!
//! [`BayesEstimator`] runs in one of four modes:
//!
//! | mode            | forgetting factor      | hyper-parameter update        |
//! |-----------------|------------------------|-------------------------------|
//! | `FixedFf`       | fixed `γ̄`              | one scaled SGP step on `(λ,β)` |
//! | `AdaptiveFf`    | estimated              | one SGP step on `(λ,β,γ)`, `D = I` |
//! | `OptFixedFf`    | fixed `γ̄`              | SGP to convergence            |
//! | `OptAdaptiveFf` | estimated, full history | SGP to convergence           |
//!
//! Every update absorbs the new block into the statistics, re-estimates the
//! noise variance by least squares, updates the hyper-parameters and
//! recomputes the posterior mean `(R + σ²K⁻¹)⁻¹Ỹ`.
//!
//! [`RlsEstimator`] is the parametric baseline: FIR recursive least squares
//! with an exponential forgetting factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{tc_kernel, FeasibleBox, HyperParams, KernelFactor};
use crate::likelihood::{self, eval_f, eval_grad_eta, eval_joint, ls_sigma2, Factored};
use crate::sgp::{self, Evaluation, Objective, SgpState, StepRecord};
use crate::stats::{build_block, GammaMode, RegressorBlock, SufficientStats};

/// `(R + σ²K⁻¹)⁻¹Ỹ`, computed as `L(σ²I + LᵀRL)⁻¹LᵀỸ`.
pub fn posterior_mean(stats: &SufficientStats, kf: &KernelFactor, sigma2: f64) -> Result<DVector<f64>> {
    Factored::new(stats, kf, sigma2)?.posterior_mean()
}

/// The last `n - 1` inputs, so that a new block's first rows see their lags.
#[derive(Clone, Debug, Default)]
pub struct InputTail {
    lags: usize,
    tail: Vec<f64>,
}

impl InputTail {
    pub fn new(n: usize) -> Self {
        Self {
            lags: n.saturating_sub(1),
            tail: Vec::with_capacity(n),
        }
    }

    /// Regressor block for the new samples, whose first sample is at
    /// absolute time `start`.
    pub fn block(&mut self, u: &[f64], y: &[f64], start: usize, n: usize) -> Result<RegressorBlock> {
        let mut history = self.tail.clone();
        history.extend_from_slice(u);
        let mut block = build_block(&history, y, self.tail.len() + 1, n)?;
        block.start_index = start;
        let keep = history.len().saturating_sub(self.lags);
        self.tail = history.split_off(keep);
        Ok(block)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    FixedFf { gamma: f64 },
    AdaptiveFf,
    OptFixedFf { gamma: f64 },
    OptAdaptiveFf,
}

impl Mode {
    pub fn is_adaptive(&self) -> bool {
        matches!(self, Mode::AdaptiveFf | Mode::OptAdaptiveFf)
    }

    pub fn is_opt(&self) -> bool {
        matches!(self, Mode::OptFixedFf { .. } | Mode::OptAdaptiveFf)
    }
}

/// Objective used for the forgetting factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaLikelihood {
    /// Weighted-data marginal likelihood as-is. Its `γ`-derivative is
    /// positive on informative data, so `γ̂` sinks to the lower bound.
    WeightedData,
    /// Marginal likelihood of the unweighted outputs under noise variance
    /// `σ²/w_t`, i.e. the weighted-data form minus `Σ ln w_t`.
    NoiseModel,
}

/// Noise variance inside the adaptive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptiveNoise {
    /// LS estimate from the statistics before the new block, held fixed
    /// during the step.
    PreviousStats,
    /// LS estimate from the candidate statistics at each trial `γ`; the
    /// posterior then uses the estimate at the accepted `γ̂`.
    Candidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub n: usize,
    pub mode: Mode,
    /// Starting forgetting factor in the adaptive modes.
    pub gamma_init: f64,
    pub omega: FeasibleBox,
    /// Relative-change tolerance of the OPT modes and of initialization.
    pub opt_rel_tol: f64,
    pub gamma_likelihood: GammaLikelihood,
    pub adaptive_noise: AdaptiveNoise,
}

impl EstimatorConfig {
    pub fn new(n: usize, mode: Mode) -> Self {
        Self {
            n,
            mode,
            gamma_init: 0.995,
            omega: FeasibleBox::default(),
            opt_rel_tol: 1e-9,
            gamma_likelihood: GammaLikelihood::NoiseModel,
            adaptive_noise: AdaptiveNoise::Candidate,
        }
    }
}

/// Call counts and invariant checks, for auditing the update loop.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub stats_updates: usize,
    pub ls_solves: usize,
    pub sgp_steps: usize,
    pub gradient_evals: usize,
    pub value_evals: usize,
    pub posterior_solves: usize,
    pub accepted_steps: usize,
    pub stalled_steps: usize,
    pub armijo_violations: usize,
    pub bound_violations: usize,
    pub faults: usize,
}

impl Audit {
    fn record_steps(&mut self, records: &[StepRecord], final_eta: &[f64], state: &SgpState) {
        for r in records {
            self.sgp_steps += 1;
            self.gradient_evals += 1;
            self.value_evals += r.line_search_evals;
            if r.accepted {
                self.accepted_steps += 1;
                if !r.satisfies_armijo() {
                    self.armijo_violations += 1;
                }
            } else {
                self.stalled_steps += 1;
            }
        }
        if !state.in_bounds(final_eta) {
            self.bound_violations += 1;
        }
    }
}

/// `(λ, β)` objective on fixed statistics.
struct EtaObjective<'a> {
    stats: &'a SufficientStats,
    sigma2: f64,
    k_total: usize,
    last: Memo,
}

/// Posterior mean at the most recently evaluated point.
type Memo = Option<(Vec<f64>, DVector<f64>)>;

fn recall(memo: Memo, x: &[f64]) -> Option<DVector<f64>> {
    memo.and_then(|(at, h)| (at == x).then_some(h))
}

impl<'a> EtaObjective<'a> {
    fn new(stats: &'a SufficientStats, sigma2: f64, k_total: usize) -> Self {
        Self { stats, sigma2, k_total, last: None }
    }
}

impl Objective for EtaObjective<'_> {
    fn value(&mut self, x: &[f64]) -> Result<f64> {
        let kf = tc_kernel(&HyperParams::from_slice(x), self.stats.dim())?;
        let ev = eval_f(self.stats, &kf, self.sigma2, self.k_total)?;
        self.last = Some((x.to_vec(), ev.posterior_mean));
        Ok(ev.value)
    }

    fn value_grad(&mut self, x: &[f64]) -> Result<Evaluation> {
        let kf = tc_kernel(&HyperParams::from_slice(x), self.stats.dim())?;
        let ev = eval_grad_eta(self.stats, &kf, self.sigma2, self.k_total)?;
        self.last = Some((x.to_vec(), ev.posterior_mean));
        Ok(Evaluation {
            value: ev.value,
            grad: ev.grad,
            split_v: Some(ev.split_v),
        })
    }
}

/// `(λ, β, γ)` objective: stored statistics scaled by `γ^T` plus the new
/// block weighted by `diag(γ^(T-1), ..., γ^0)`. With empty stored
/// statistics and the whole record as the block this is the full-history
/// weighting.
struct JointObjective<'a> {
    base: &'a SufficientStats,
    block: &'a RegressorBlock,
    sigma2: f64,
    k_total: usize,
    gamma_likelihood: GammaLikelihood,
    /// Re-estimate σ² by LS on the candidate statistics at every γ.
    candidate_sigma2: bool,
    last: Memo,
}

impl JointObjective<'_> {
    /// Coefficient `c` with `Σ ln w_t = c·ln γ + const` over the samples the
    /// candidate `γ` touches.
    fn log_weight_coefficient(&self) -> f64 {
        let t = self.block.len() as f64;
        self.base.count as f64 * t + t * (t - 1.0) / 2.0
    }

    fn correction(&self, gamma: f64) -> (f64, f64) {
        match self.gamma_likelihood {
            GammaLikelihood::WeightedData => (0.0, 0.0),
            GammaLikelihood::NoiseModel => {
                let c = self.log_weight_coefficient();
                (-c * gamma.ln(), -c / gamma)
            }
        }
    }
}

impl JointObjective<'_> {
    fn sigma2_at(&self, gamma: f64) -> Result<f64> {
        if self.candidate_sigma2 {
            let cand = self.base.with_block_weighted(self.block, gamma)?;
            Ok(ls_sigma2(&cand, self.k_total)?.sigma2)
        } else {
            Ok(self.sigma2)
        }
    }
}

impl Objective for JointObjective<'_> {
    fn value(&mut self, x: &[f64]) -> Result<f64> {
        let kf = tc_kernel(&HyperParams::from_slice(x), self.base.dim())?;
        let sigma2 = self.sigma2_at(x[2])?;
        let ev = likelihood::eval_joint_f(self.base, self.block, &kf, sigma2, x[2], self.k_total)?;
        self.last = Some((x.to_vec(), ev.posterior_mean));
        Ok(ev.value + self.correction(x[2]).0)
    }

    fn value_grad(&mut self, x: &[f64]) -> Result<Evaluation> {
        let kf = tc_kernel(&HyperParams::from_slice(x), self.base.dim())?;
        let sigma2 = self.sigma2_at(x[2])?;
        let mut ev = eval_joint(self.base, self.block, &kf, sigma2, x[2], self.k_total)?;
        if self.candidate_sigma2 {
            let cand = self.base.with_block_weighted(self.block, x[2])?;
            let ls = ls_sigma2(&cand, self.k_total)?;
            let d = self.base.weighted_stats_derivative(self.block, x[2])?;
            let dsig = likelihood::ls_sigma2_derivative(&ls, &d, self.k_total);
            ev.grad[2] += likelihood::eval_grad_sigma2(&cand, &kf, sigma2, self.k_total)? * dsig;
        }
        let (dv, dg) = self.correction(x[2]);
        ev.grad[2] += dg;
        self.last = Some((x.to_vec(), ev.posterior_mean.clone()));
        Ok(Evaluation {
            value: ev.value + dv,
            grad: ev.grad,
            split_v: Some(ev.split_v),
        })
    }
}

/// Starting point for the batch optimization: `β = 0.9` and `λ` matching
/// the prior's expected energy `λβ/(1-β)` to the LS estimate's.
fn initial_guess(h_ls: &DVector<f64>, omega: &FeasibleBox) -> HyperParams {
    let beta: f64 = 0.9;
    let lambda = h_ls.norm_squared() * (1.0 - beta) / beta;
    let lambda = if lambda.is_finite() && lambda > 0.0 { lambda } else { 1.0 };
    crate::kernel::project_box(&HyperParams::new(lambda, beta), omega)
}

/// Kernel-regularized online estimator.
#[derive(Clone, Debug)]
pub struct BayesEstimator {
    pub stats: SufficientStats,
    pub hyper: HyperParams,
    pub sgp: SgpState,
    pub h_hat: DVector<f64>,
    pub sigma2: f64,
    pub mode: Mode,
    /// Samples absorbed.
    pub clock: usize,
    pub audit: Audit,
    config: EstimatorConfig,
    tail: InputTail,
    /// Full record, kept only by `OptAdaptiveFf`.
    history: Option<(Vec<f64>, Vec<f64>)>,
}

impl BayesEstimator {
    pub fn initialize(u: &[f64], y: &[f64], config: EstimatorConfig) -> Result<Self> {
        let n = config.n;
        if u.len() != y.len() {
            return Err(Error::InvalidArgument("input and output lengths differ".into()));
        }
        if y.len() < n + 10 {
            return Err(Error::InsufficientData(format!(
                "initial batch of {} samples is shorter than n + 10 = {}",
                y.len(),
                n + 10
            )));
        }
        let omega = config.omega;
        let mut tail = InputTail::new(n);
        let block = tail.block(u, y, 1, n)?;
        let k = block.len();
        let gamma0 = match config.mode {
            Mode::FixedFf { gamma } | Mode::OptFixedFf { gamma } => gamma,
            Mode::AdaptiveFf | Mode::OptAdaptiveFf => {
                config.gamma_init.clamp(omega.gamma.0, omega.gamma.1)
            }
        };
        let stats = match config.mode {
            Mode::FixedFf { gamma } | Mode::OptFixedFf { gamma } => {
                SufficientStats::from_block(&block, GammaMode::Fixed(gamma))?
            }
            _ => {
                let mut s = SufficientStats::new(n, GammaMode::Adaptive);
                s.update_weighted(&block, gamma0)?;
                s
            }
        };
        let mut audit = Audit::default();
        let ls = ls_sigma2(&stats, k)?;
        audit.ls_solves += 1;
        let sigma2 = ls.sigma2;

        let guess = initial_guess(&ls.h_ls, &omega);
        let start = SgpState::new(guess.to_vec(), omega.lower(2), omega.upper(2));
        let mut objective = EtaObjective::new(&stats, sigma2, k);
        let conv = sgp::run_to_convergence(start, &mut objective, config.opt_rel_tol, true)?;
        audit.record_steps(&conv.records, &conv.eta, &conv.state);

        let (hyper, sgp_state) = if config.mode.is_adaptive() {
            let mut st = conv.state.clone();
            let empty = SufficientStats::new(n, GammaMode::Adaptive);
            let mut gamma_objective = JointObjective {
                base: &empty,
                block: &block,
                sigma2,
                k_total: k,
                gamma_likelihood: config.gamma_likelihood,
                candidate_sigma2: config.adaptive_noise == AdaptiveNoise::Candidate,
                last: None,
            };
            if let (Some(prev), Some(gprev)) = (st.eta_prev.as_mut(), st.grad_prev.as_mut()) {
                prev.push(gamma0);
                let g = gamma_objective.value_grad(prev)?.grad;
                gprev.push(g[2]);
            }
            st.eta_curr.push(gamma0);
            st.lower = omega.lower(3);
            st.upper = omega.upper(3);
            let p = HyperParams::from_slice(&st.eta_curr);
            (p, st)
        } else {
            (HyperParams::from_slice(&conv.eta), conv.state)
        };

        let kf = tc_kernel(&hyper, n)?;
        let h_hat = posterior_mean(&stats, &kf, sigma2)?;
        audit.posterior_solves += 1;
        audit.stats_updates += 1;

        let history = matches!(config.mode, Mode::OptAdaptiveFf).then(|| (u.to_vec(), y.to_vec()));
        Ok(Self {
            stats,
            hyper,
            sgp: sgp_state,
            h_hat,
            sigma2,
            mode: config.mode,
            clock: k,
            audit,
            config,
            tail,
            history,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn gamma(&self) -> f64 {
        match self.mode {
            Mode::FixedFf { gamma } | Mode::OptFixedFf { gamma } => gamma,
            _ => self.hyper.gamma.unwrap_or(1.0),
        }
    }

    /// Absorbs a block of `T` new samples. On a numerical failure the data
    /// are still absorbed, the previous estimate and hyper-parameters are
    /// kept, and the fault is counted in [`Audit::faults`].
    pub fn update(&mut self, u: &[f64], y: &[f64]) -> Result<()> {
        if u.len() != y.len() || y.is_empty() {
            return Err(Error::InvalidArgument("update block must be non-empty with matching lengths".into()));
        }
        let block = self.tail.block(u, y, self.clock + 1, self.config.n)?;
        if let Some((hu, hy)) = self.history.as_mut() {
            hu.extend_from_slice(u);
            hy.extend_from_slice(y);
        }
        let result = match self.mode {
            Mode::FixedFf { gamma } | Mode::OptFixedFf { gamma } => self.update_fixed(&block, gamma),
            Mode::AdaptiveFf => self.update_adaptive(&block),
            Mode::OptAdaptiveFf => self.update_opt_adaptive(&block),
        };
        self.clock += block.len();
        if result.is_err() {
            self.audit.faults += 1;
        }
        result
    }

    fn update_fixed(&mut self, block: &RegressorBlock, gamma: f64) -> Result<()> {
        self.stats.update_weighted(block, gamma)?;
        self.audit.stats_updates += 1;
        let k = self.stats.count;
        let sigma2 = ls_sigma2(&self.stats, k)?.sigma2;
        self.audit.ls_solves += 1;
        let mut objective = EtaObjective::new(&self.stats, sigma2, k);
        let (state, records) = if self.mode.is_opt() {
            let conv = sgp::run_to_convergence(self.sgp.clone(), &mut objective, self.config.opt_rel_tol, true)?;
            (conv.state, conv.records)
        } else {
            let out = sgp::one_step(&self.sgp, &mut objective, true)?;
            (out.state, vec![out.record])
        };
        let memo = objective.last.take();
        self.audit.record_steps(&records, &state.eta_curr, &state);
        let hyper = HyperParams::from_slice(&state.eta_curr);
        let h_hat = match recall(memo, &state.eta_curr) {
            Some(h) => h,
            None => posterior_mean(&self.stats, &tc_kernel(&hyper, self.config.n)?, sigma2)?,
        };
        self.audit.posterior_solves += 1;
        self.sgp = state;
        self.hyper = hyper;
        self.sigma2 = sigma2;
        self.h_hat = h_hat;
        Ok(())
    }

    fn update_adaptive(&mut self, block: &RegressorBlock) -> Result<()> {
        let k = self.stats.count + block.len();
        let candidate = self.config.adaptive_noise == AdaptiveNoise::Candidate;
        let sigma2_prev = if candidate {
            self.sigma2
        } else {
            self.audit.ls_solves += 1;
            ls_sigma2(&self.stats, k)?.sigma2
        };
        let (outcome, memo) = {
            let mut objective = JointObjective {
                base: &self.stats,
                block,
                sigma2: sigma2_prev,
                k_total: k,
                gamma_likelihood: self.config.gamma_likelihood,
                candidate_sigma2: candidate,
                last: None,
            };
            let out = sgp::one_step(&self.sgp, &mut objective, false);
            (out, objective.last.take())
        };
        let out = match outcome {
            Ok(out) => out,
            Err(e) => {
                // Keep the data with the current forgetting factor.
                let gamma = self.gamma();
                self.stats.update_weighted(block, gamma)?;
                return Err(e);
            }
        };
        self.audit.record_steps(std::slice::from_ref(&out.record), &out.eta, &out.state);
        let hyper = HyperParams::from_slice(&out.eta);
        let gamma = hyper.gamma.expect("adaptive iterate carries γ");
        self.stats.update_weighted(block, gamma)?;
        self.audit.stats_updates += 1;
        let sigma2 = if candidate {
            self.audit.ls_solves += 1;
            ls_sigma2(&self.stats, k)?.sigma2
        } else {
            sigma2_prev
        };
        // With candidate σ² the last trial already used these statistics.
        let h_hat = match recall(memo.filter(|_| candidate), &out.eta) {
            Some(h) => h,
            None => posterior_mean(&self.stats, &tc_kernel(&hyper, self.config.n)?, sigma2)?,
        };
        self.audit.posterior_solves += 1;
        self.sgp = out.state;
        self.hyper = hyper;
        self.sigma2 = sigma2;
        self.h_hat = h_hat;
        Ok(())
    }

    fn update_opt_adaptive(&mut self, block: &RegressorBlock) -> Result<()> {
        let n = self.config.n;
        let (hu, hy) = self.history.as_ref().expect("OPT adaptive keeps its record");
        let k = hy.len();
        let full = RegressorBlock::from_series(hu, hy, 1, k, n)?;
        let empty = SufficientStats::new(n, GammaMode::Adaptive);
        // Noise variance from the full record weighted with the current γ̂.
        let current = empty.with_block_weighted(&full, self.gamma())?;
        let sigma2 = ls_sigma2(&current, k)?.sigma2;
        self.audit.ls_solves += 1;
        let mut objective = JointObjective {
            base: &empty,
            block: &full,
            sigma2,
            k_total: k,
            gamma_likelihood: self.config.gamma_likelihood,
            candidate_sigma2: self.config.adaptive_noise == AdaptiveNoise::Candidate,
            last: None,
        };
        let conv = sgp::run_to_convergence(self.sgp.clone(), &mut objective, self.config.opt_rel_tol, false)?;
        self.audit.record_steps(&conv.records, &conv.eta, &conv.state);
        let hyper = HyperParams::from_slice(&conv.eta);
        let gamma = hyper.gamma.expect("adaptive iterate carries γ");
        self.stats = empty.with_block_weighted(&full, gamma)?;
        self.audit.stats_updates += 1;
        let sigma2 = if self.config.adaptive_noise == AdaptiveNoise::Candidate {
            ls_sigma2(&self.stats, k)?.sigma2
        } else {
            sigma2
        };
        let kf = tc_kernel(&hyper, n)?;
        let h_hat = posterior_mean(&self.stats, &kf, sigma2)?;
        self.audit.posterior_solves += 1;
        debug_assert_eq!(block.start_index + block.len() - 1, k);
        self.sgp = conv.state;
        self.hyper = hyper;
        self.sigma2 = sigma2;
        self.h_hat = h_hat;
        Ok(())
    }
}

/// Exponentially weighted recursive least squares for an FIR model of
/// order `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RlsState {
    pub theta: DVector<f64>,
    /// Inverse of the weighted information matrix.
    pub p: DMatrix<f64>,
    pub gamma_bar: f64,
    pub m: usize,
}

impl RlsState {
    /// Cold start with `P = p0·I` and `θ = 0`.
    pub fn new(m: usize, gamma_bar: f64, p0: f64) -> Self {
        Self {
            theta: DVector::zeros(m),
            p: DMatrix::identity(m, m) * p0,
            gamma_bar,
            m,
        }
    }

    /// Exact weighted LS solution on a batch, from which the recursion
    /// continues.
    pub fn from_block(block: &RegressorBlock, gamma_bar: f64) -> Result<Self> {
        let stats = SufficientStats::from_block(block, GammaMode::Fixed(gamma_bar))?;
        let m = block.width();
        let chol = stats
            .r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("batch information matrix is singular".into()))?;
        Ok(Self {
            theta: chol.solve(&stats.yt),
            p: chol.inverse(),
            gamma_bar,
            m,
        })
    }

    pub fn update(&mut self, phi: &DVector<f64>, y: f64) {
        let p_phi = &self.p * phi;
        let denom = self.gamma_bar + phi.dot(&p_phi);
        let gain = &p_phi / denom;
        let err = y - phi.dot(&self.theta);
        self.theta.axpy(err, &gain, 1.0);
        // P ← (P - g φᵀP)/γ̄ with φᵀP = (Pφ)ᵀ
        self.p.ger(-1.0, &gain, &p_phi, 1.0);
        self.p /= self.gamma_bar;
        let sym = (&self.p + self.p.transpose()) * 0.5;
        self.p = sym;
    }

    pub fn update_block(&mut self, block: &RegressorBlock) {
        for (row, &y) in block.rows.row_iter().zip(block.outputs.iter()) {
            self.update(&row.transpose(), y);
        }
    }
}

/// RLS baseline with its own input history.
#[derive(Clone, Debug)]
pub struct RlsEstimator {
    pub state: RlsState,
    pub clock: usize,
    tail: InputTail,
}

impl RlsEstimator {
    pub fn initialize(u: &[f64], y: &[f64], m: usize, gamma_bar: f64) -> Result<Self> {
        let mut tail = InputTail::new(m);
        let block = tail.block(u, y, 1, m)?;
        Ok(Self {
            state: RlsState::from_block(&block, gamma_bar)?,
            clock: y.len(),
            tail,
        })
    }

    pub fn update(&mut self, u: &[f64], y: &[f64]) -> Result<()> {
        let block = self.tail.block(u, y, self.clock + 1, self.state.m)?;
        self.state.update_block(&block);
        self.clock += y.len();
        Ok(())
    }

    pub fn impulse_response(&self) -> &DVector<f64> {
        &self.state.theta
    }
}
