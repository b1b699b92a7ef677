//! Scaled gradient projection over a box.
//!
//! One step: compute the gradient of the current objective at the current
//! iterate, pick a Barzilai-Borwein step length from the last iterate and
//! gradient differences (the two rules alternate), scale by a diagonal
//! matrix, project onto the box and backtrack along the feasible direction
//! until the Armijo condition holds.
//!
//! In online use the "previous gradient" belongs to the previous objective,
//! so `w` mixes two likelihoods.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::clamp_into;

pub const ARMIJO_C: f64 = 1e-4;
pub const BACKTRACK_FACTOR: f64 = 0.4;
pub const MIN_STEP_FRACTION: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 500;

/// Value, gradient and (optionally) the positive part of a gradient split
/// `grad = V - U` used for scaling.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    pub split_v: Option<Vec<f64>>,
}

pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    fn value_grad(&mut self, x: &[f64]) -> Result<Evaluation>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BbRule {
    /// `rᵀr / rᵀw`
    First,
    /// `rᵀw / wᵀw`
    Second,
}

impl BbRule {
    fn next(self) -> Self {
        match self {
            BbRule::First => BbRule::Second,
            BbRule::Second => BbRule::First,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgpState {
    pub eta_prev: Option<Vec<f64>>,
    pub eta_curr: Vec<f64>,
    /// Gradient at `eta_prev` of the objective that was current back then.
    pub grad_prev: Option<Vec<f64>>,
    pub bb_toggle: BbRule,
    pub alpha_bounds: (f64, f64),
    pub scaling_bounds: (f64, f64),
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SgpState {
    /// Fresh state without history; the first step uses `α = 1`, `D = I`.
    pub fn new(eta: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let mut eta = eta;
        clamp_into(&mut eta, &lower, &upper);
        Self {
            eta_prev: None,
            eta_curr: eta,
            grad_prev: None,
            bb_toggle: BbRule::First,
            alpha_bounds: (1e-8, 1e8),
            scaling_bounds: (1e-6, 1e6),
            lower,
            upper,
        }
    }

    pub fn dim(&self) -> usize {
        self.eta_curr.len()
    }

    pub fn in_bounds(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, h))| v >= l && v <= h)
    }
}

/// Split-gradient diagonal scaling `D_jj = clamp(η_j / V_j, d_min, d_max)`.
/// Coordinates with no positive `V_j` get `D_jj = 1`.
pub fn scaling_matrix(split_v: &[f64], eta: &[f64], bounds: (f64, f64)) -> Vec<f64> {
    eta.iter()
        .enumerate()
        .map(|(j, &x)| match split_v.get(j) {
            Some(&v) if v > 0.0 && v.is_finite() => (x / v).clamp(bounds.0, bounds.1),
            _ => 1.0,
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Barzilai-Borwein step length for the step `-αDg`, i.e. plain BB in the
/// coordinates `D^(-1/2)η`: `rᵀD⁻¹r / rᵀw` and `rᵀw / wᵀDw`. With `D = I`
/// these are `rᵀr/rᵀw` and `rᵀw/wᵀw`. Non-positive curvature `rᵀw` falls
/// back to `max(1, ‖r‖/‖w‖)`.
pub fn bb_step(r: &[f64], w: &[f64], d: &[f64], rule: BbRule) -> f64 {
    let rw = dot(r, w);
    if rw <= 0.0 {
        let rn = dot(r, r).sqrt();
        let wn = dot(w, w).sqrt();
        return (rn / wn).max(1.0);
    }
    match rule {
        BbRule::First => r.iter().zip(d).map(|(a, s)| a * a / s).sum::<f64>() / rw,
        BbRule::Second => rw / w.iter().zip(d).map(|(b, s)| b * b * s).sum::<f64>(),
    }
}

/// Record of one step, enough to re-check the Armijo inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub value_before: f64,
    pub value_after: f64,
    /// `∇fᵀΔ`
    pub directional: f64,
    pub nu: f64,
    pub alpha: f64,
    pub rule: Option<BbRule>,
    pub accepted: bool,
    pub line_search_evals: usize,
}

impl StepRecord {
    pub fn satisfies_armijo(&self) -> bool {
        self.value_after <= self.value_before + ARMIJO_C * self.nu * self.directional
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: SgpState,
    pub eta: Vec<f64>,
    pub record: StepRecord,
    /// Gradient of the current objective at the starting iterate.
    pub grad: Vec<f64>,
    /// True when backtracking ran below the minimum step without meeting the
    /// Armijo condition; the iterate is then unchanged.
    pub stalled: bool,
}

pub fn one_step<O: Objective + ?Sized>(state: &SgpState, objective: &mut O, use_scaling: bool) -> Result<StepOutcome> {
    let eta = &state.eta_curr;
    let dim = eta.len();
    let ev = objective.value_grad(eta)?;
    let g = ev.grad;

    let (alpha, d, rule) = match (&state.eta_prev, &state.grad_prev) {
        (Some(prev), Some(gprev)) => {
            let r: Vec<f64> = eta.iter().zip(prev).map(|(a, b)| a - b).collect();
            let w: Vec<f64> = g.iter().zip(gprev).map(|(a, b)| a - b).collect();
            let d = match (&ev.split_v, use_scaling) {
                (Some(v), true) => scaling_matrix(v, eta, state.scaling_bounds),
                _ => vec![1.0; dim],
            };
            let alpha = bb_step(&r, &w, &d, state.bb_toggle);
            let alpha = if alpha.is_finite() { alpha } else { state.alpha_bounds.1 };
            (alpha.clamp(state.alpha_bounds.0, state.alpha_bounds.1), d, Some(state.bb_toggle))
        }
        _ => (1.0, vec![1.0; dim], None),
    };

    let mut z: Vec<f64> = (0..dim).map(|j| eta[j] - alpha * d[j] * g[j]).collect();
    clamp_into(&mut z, &state.lower, &state.upper);
    let delta: Vec<f64> = z.iter().zip(eta).map(|(a, b)| a - b).collect();
    let directional = dot(&g, &delta);

    let mut nu = 1.0;
    let mut evals = 0;
    let mut accepted = None;
    if delta.iter().all(|&v| v == 0.0) {
        accepted = Some((eta.clone(), ev.value));
    } else {
        while nu >= MIN_STEP_FRACTION {
            let mut trial: Vec<f64> = (0..dim).map(|j| eta[j] + nu * delta[j]).collect();
            // A convex combination of feasible points; the clamp only removes
            // rounding past a bound.
            clamp_into(&mut trial, &state.lower, &state.upper);
            evals += 1;
            // Evaluation failures count as an Armijo failure.
            if let Ok(f) = objective.value(&trial) {
                if f.is_finite() && f <= ev.value + ARMIJO_C * nu * directional {
                    accepted = Some((trial, f));
                    break;
                }
            }
            nu *= BACKTRACK_FACTOR;
        }
    }

    let stalled = accepted.is_none();
    let (next, value_after) = accepted.unwrap_or_else(|| (eta.clone(), ev.value));
    let record = StepRecord {
        value_before: ev.value,
        value_after,
        directional,
        nu: if stalled { 0.0 } else { nu },
        alpha,
        rule,
        accepted: !stalled,
        line_search_evals: evals,
    };
    let new_state = SgpState {
        eta_prev: Some(eta.clone()),
        eta_curr: next.clone(),
        grad_prev: Some(g.clone()),
        bb_toggle: if stalled { state.bb_toggle } else { state.bb_toggle.next() },
        ..state.clone()
    };
    Ok(StepOutcome {
        state: new_state,
        eta: next,
        record,
        grad: g,
        stalled,
    })
}

#[derive(Clone, Debug)]
pub struct Convergence {
    pub state: SgpState,
    pub eta: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub records: Vec<StepRecord>,
}

/// Repeats [`one_step`] on a fixed objective until the relative change of
/// the objective falls below `rel_tol`, the line search stalls, or
/// [`MAX_ITERATIONS`] is reached.
pub fn run_to_convergence<O: Objective + ?Sized>(
    state: SgpState,
    objective: &mut O,
    rel_tol: f64,
    use_scaling: bool,
) -> Result<Convergence> {
    let mut state = state;
    let mut records = Vec::new();
    let mut converged = false;
    let mut value = f64::NAN;
    for _ in 0..MAX_ITERATIONS {
        let out = one_step(&state, objective, use_scaling)?;
        let rel = (out.record.value_before - out.record.value_after).abs() / out.record.value_before.abs().max(1.0);
        value = out.record.value_after;
        state = out.state;
        records.push(out.record);
        if out.stalled || rel < rel_tol {
            converged = true;
            break;
        }
    }
    Ok(Convergence {
        eta: state.eta_curr.clone(),
        state,
        value,
        iterations: records.len(),
        converged,
        records,
    })
}
