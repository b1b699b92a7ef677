//! FIR regressors and exponentially weighted sufficient statistics.
//!
//! For a block of `T` samples with regressor rows `B` (T×n) and outputs `Y`,
//! the statistics are `R = BᵀΓB`, `Ỹ = BᵀΓY`, `Ȳ = YᵀΓY`, where `Γ` carries
//! the forgetting weights. The oldest row of a block gets `γ^(T-1)` and the
//! newest `γ^0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A contiguous run of FIR regressor rows and the matching outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorBlock {
    /// Row `t` is `[u(t), u(t-1), ..., u(t-n+1)]`.
    pub rows: DMatrix<f64>,
    pub outputs: DVector<f64>,
    /// 1-based time index of the first row.
    pub start_index: usize,
}

impl RegressorBlock {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    /// Block covering times `start..start+len` of two aligned series whose
    /// first element is time 1.
    pub fn from_series(u: &[f64], y: &[f64], start: usize, len: usize, n: usize) -> Result<Self> {
        if start == 0 || start + len - 1 > y.len() {
            return Err(Error::InvalidArgument(format!(
                "block {start}..{} outside output series of length {}",
                start + len,
                y.len()
            )));
        }
        build_block(u, &y[start - 1..start - 1 + len], start, n)
    }
}

/// Builds the Toeplitz regressor block for outputs `y` observed at times
/// `start, start+1, ...`.
///
/// `u` is the input history indexed from time 1 (`u[0] = u(1)`); inputs at
/// times `<= 0` are taken as zero.
pub fn build_block(u: &[f64], y: &[f64], start: usize, n: usize) -> Result<RegressorBlock> {
    if n == 0 {
        return Err(Error::InvalidArgument("lag count must be positive".into()));
    }
    if u.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("empty input or output sequence".into()));
    }
    if start == 0 {
        return Err(Error::InvalidArgument("time indices are 1-based".into()));
    }
    let rows_n = y.len();
    let last = start + rows_n - 1;
    if last > u.len() {
        return Err(Error::InvalidArgument(format!(
            "input history ends at t={} but block needs t={last}",
            u.len()
        )));
    }
    let rows = DMatrix::from_fn(rows_n, n, |r, lag| {
        let t = start + r;
        if lag < t {
            u[t - lag - 1]
        } else {
            0.0
        }
    });
    Ok(RegressorBlock {
        rows,
        outputs: DVector::from_column_slice(y),
        start_index: start,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GammaMode {
    Unweighted,
    Fixed(f64),
    /// Weights follow the estimated forgetting factor, block by block.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    pub r: DMatrix<f64>,
    pub yt: DVector<f64>,
    pub yb: f64,
    /// Samples absorbed so far.
    pub count: usize,
    pub gamma_mode: GammaMode,
}

/// Derivative of a weighted block update with respect to the forgetting
/// factor.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsDerivative {
    pub dr: DMatrix<f64>,
    pub dyt: DVector<f64>,
    pub dyb: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Domain(format!("forgetting factor {gamma} not in (0, 1]")));
    }
    Ok(())
}

/// `(BᵀWB, BᵀWY, YᵀWY)` for a diagonal weight vector `w`.
fn weighted_products(b: &RegressorBlock, w: &[f64]) -> (DMatrix<f64>, DVector<f64>, f64) {
    let mut bw = b.rows.clone();
    let mut yw = b.outputs.clone();
    for (i, &wi) in w.iter().enumerate() {
        bw.row_mut(i).scale_mut(wi);
        yw[i] *= wi;
    }
    let r = b.rows.tr_mul(&bw);
    let yt = b.rows.tr_mul(&yw);
    let yb = b.outputs.dot(&yw);
    (r, yt, yb)
}

/// Forgetting weights `γ^(T-1), ..., γ^0` for a block of `t_len` rows.
pub fn block_weights(gamma: f64, t_len: usize) -> Vec<f64> {
    (0..t_len).map(|j| gamma.powi((t_len - 1 - j) as i32)).collect()
}

fn block_weight_derivatives(gamma: f64, t_len: usize) -> Vec<f64> {
    (0..t_len)
        .map(|j| {
            let e = t_len - 1 - j;
            if e == 0 {
                0.0
            } else {
                e as f64 * gamma.powi(e as i32 - 1)
            }
        })
        .collect()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

impl SufficientStats {
    pub fn new(n: usize, gamma_mode: GammaMode) -> Self {
        Self {
            r: DMatrix::zeros(n, n),
            yt: DVector::zeros(n),
            yb: 0.0,
            count: 0,
            gamma_mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.yt.len()
    }

    fn check_block(&self, b: &RegressorBlock) -> Result<()> {
        if b.width() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "block width {} does not match statistics dimension {}",
                b.width(),
                self.dim()
            )));
        }
        if b.is_empty() {
            return Err(Error::InvalidArgument("empty block".into()));
        }
        Ok(())
    }

    /// `R += BᵀB`, `Ỹ += BᵀY`, `Ȳ += YᵀY`.
    pub fn update_unweighted(&mut self, b: &RegressorBlock) -> Result<()> {
        if self.gamma_mode != GammaMode::Unweighted {
            return Err(Error::InvalidArgument(
                "unweighted update on weighted statistics".into(),
            ));
        }
        self.check_block(b)?;
        self.r += b.rows.tr_mul(&b.rows);
        self.yt += b.rows.tr_mul(&b.outputs);
        self.yb += b.outputs.norm_squared();
        self.count += b.len();
        symmetrize(&mut self.r);
        Ok(())
    }

    /// `R ← γ^T R + BᵀΓ_T B` and likewise for `Ỹ`, `Ȳ`.
    pub fn update_weighted(&mut self, b: &RegressorBlock, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        match self.gamma_mode {
            GammaMode::Unweighted => {
                return Err(Error::InvalidArgument(
                    "weighted update on unweighted statistics".into(),
                ))
            }
            GammaMode::Fixed(g) if g != gamma => {
                return Err(Error::InvalidArgument(format!(
                    "statistics use fixed forgetting factor {g}, got {gamma}"
                )))
            }
            _ => {}
        }
        self.check_block(b)?;
        let t_len = b.len();
        let decay = gamma.powi(t_len as i32);
        let (r, yt, yb) = weighted_products(b, &block_weights(gamma, t_len));
        self.r.scale_mut(decay);
        self.r += r;
        self.yt.scale_mut(decay);
        self.yt += yt;
        self.yb = decay * self.yb + yb;
        self.count += t_len;
        symmetrize(&mut self.r);
        Ok(())
    }

    /// Non-mutating form of [`update_weighted`](Self::update_weighted), used
    /// to evaluate candidate forgetting factors.
    pub fn with_block_weighted(&self, b: &RegressorBlock, gamma: f64) -> Result<Self> {
        let mut next = self.clone();
        next.update_weighted(b, gamma)?;
        Ok(next)
    }

    /// Exact derivative of `with_block_weighted(b, γ)` with respect to `γ`,
    /// holding the stored (historically weighted) statistics fixed.
    pub fn weighted_stats_derivative(&self, b: &RegressorBlock, gamma: f64) -> Result<StatsDerivative> {
        check_gamma(gamma)?;
        self.check_block(b)?;
        let t_len = b.len();
        let ddecay = t_len as f64 * gamma.powi(t_len as i32 - 1);
        let (r, yt, yb) = weighted_products(b, &block_weight_derivatives(gamma, t_len));
        let mut dr = &self.r * ddecay + r;
        symmetrize(&mut dr);
        Ok(StatsDerivative {
            dr,
            dyt: &self.yt * ddecay + yt,
            dyb: ddecay * self.yb + yb,
        })
    }

    /// Statistics of a whole block under the stationary weighting
    /// `diag(γ^(T-1), ..., γ^0)`, i.e. with no stored history.
    pub fn from_block(b: &RegressorBlock, gamma_mode: GammaMode) -> Result<Self> {
        let mut s = Self::new(b.width(), gamma_mode);
        match gamma_mode {
            GammaMode::Unweighted => s.update_unweighted(b)?,
            GammaMode::Fixed(g) => s.update_weighted(b, g)?,
            GammaMode::Adaptive => {
                return Err(Error::InvalidArgument(
                    "adaptive statistics need an explicit forgetting factor".into(),
                ))
            }
        }
        Ok(s)
    }
}
