//! Impulse-response fit, per-run records and Monte-Carlo aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics, Statistics};

use crate::error::{Error, Result};
use crate::estimators::Audit;

/// `100·(1 - ‖h - ĥ‖₂/‖h‖₂)`. At most 100, unbounded below.
pub fn fit(h_true: &[f64], h_est: &[f64]) -> Result<f64> {
    if h_true.len() != h_est.len() {
        return Err(Error::InvalidArgument(format!(
            "fit needs equal lengths ({} vs {})",
            h_true.len(),
            h_est.len()
        )));
    }
    let norm = h_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("truth has zero norm".into()));
    }
    let err = h_true
        .iter()
        .zip(h_est)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(100.0 * (1.0 - err / norm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub method: String,
    pub seed: u64,
    /// `(k, fit)`, strictly increasing in `k`.
    pub checkpoints: Vec<(usize, f64)>,
}

impl FitTrace {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.checkpoints.iter().find(|(kk, _)| *kk == k).map(|(_, f)| *f)
    }

    fn ks(&self) -> Vec<usize> {
        self.checkpoints.iter().map(|(k, _)| *k).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSample {
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma2: f64,
}

/// One Monte-Carlo run. Wall-clock data live in `time_traces`, which is not
/// serialized with the rest so that the record itself is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_fingerprint: String,
    pub fit_traces: Vec<FitTrace>,
    pub hyper_traces: BTreeMap<String, Vec<HyperSample>>,
    pub audits: BTreeMap<String, Audit>,
    /// Faults per method; a fault keeps the previous estimate.
    pub faults: BTreeMap<String, Vec<String>>,
    /// Cumulative update seconds at each checkpoint, per method.
    #[serde(skip)]
    pub time_traces: BTreeMap<String, Vec<(usize, f64)>>,
}

impl RunRecord {
    pub fn trace(&self, method: &str) -> Option<&FitTrace> {
        self.fit_traces.iter().find(|t| t.method == method)
    }

    /// Total update seconds of `method` over the run.
    pub fn cumulative_time(&self, method: &str) -> Option<f64> {
        self.time_traces.get(method).and_then(|t| t.last()).map(|(_, s)| *s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (`N - 1`); 0 for a single value.
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no values to summarize".into()));
        }
        let mut data = Data::new(values.to_vec());
        let std = if values.len() > 1 { values.std_dev() } else { 0.0 };
        let (q1, q3) = (data.lower_quartile(), data.upper_quartile());
        Ok(Self {
            count: values.len(),
            mean: values.mean(),
            std,
            median: data.median(),
            q1,
            q3,
            iqr: q3 - q1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: String,
    pub k: usize,
    pub stats: Distribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSummary {
    pub method: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub checkpoints: Vec<usize>,
    pub fits: Vec<FitSummary>,
    pub times: Vec<TimeSummary>,
}

impl Summary {
    pub fn fit(&self, method: &str, k: usize) -> Option<&Distribution> {
        self.fits
            .iter()
            .find(|f| f.method == method && f.k == k)
            .map(|f| &f.stats)
    }

    pub fn time(&self, method: &str) -> Option<&TimeSummary> {
        self.times.iter().find(|t| t.method == method)
    }
}

/// Per-method, per-checkpoint fit distributions and per-method cumulative
/// time mean/std. Methods come out in sorted order, so the result does not
/// depend on record order.
pub fn aggregate(records: &[RunRecord], checkpoints: &[usize]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no run records".into()))?;
    let methods: BTreeSet<&str> = first.fit_traces.iter().map(|t| t.method.as_str()).collect();
    for r in records {
        let these: BTreeSet<&str> = r.fit_traces.iter().map(|t| t.method.as_str()).collect();
        if these != methods {
            return Err(Error::InvalidArgument(format!("run {} has a different method set", r.seed)));
        }
        for t in &r.fit_traces {
            if t.ks() != checkpoints {
                return Err(Error::InvalidArgument(format!(
                    "run {} method {} has checkpoints {:?}, expected {:?}",
                    r.seed,
                    t.method,
                    t.ks(),
                    checkpoints
                )));
            }
        }
    }
    let mut fits = Vec::new();
    let mut times = Vec::new();
    for &m in &methods {
        for &k in checkpoints {
            let values: Vec<f64> = records
                .iter()
                .map(|r| r.trace(m).and_then(|t| t.at(k)).expect("validated above"))
                .collect();
            fits.push(FitSummary {
                method: m.to_string(),
                k,
                stats: Distribution::of(&values)?,
            });
        }
        let secs: Vec<f64> = records.iter().filter_map(|r| r.cumulative_time(m)).collect();
        if !secs.is_empty() {
            let d = Distribution::of(&secs)?;
            times.push(TimeSummary {
                method: m.to_string(),
                mean: d.mean,
                std: d.std,
            });
        }
    }
    Ok(Summary {
        checkpoints: checkpoints.to_vec(),
        fits,
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(seed: u64, fits: &[(usize, f64)], secs: f64) -> RunRecord {
        RunRecord {
            seed,
            config_fingerprint: String::new(),
            fit_traces: vec![FitTrace {
                method: "tc_ff".into(),
                seed,
                checkpoints: fits.to_vec(),
            }],
            hyper_traces: BTreeMap::new(),
            audits: BTreeMap::new(),
            faults: BTreeMap::new(),
            time_traces: [("tc_ff".to_string(), vec![(fits.last().unwrap().0, secs)])].into(),
        }
    }

    #[test]
    fn fit_reference_values() {
        let h = [1.0, -2.0, 0.5];
        assert_eq!(fit(&h, &h).unwrap(), 100.0);
        assert_eq!(fit(&h, &[0.0; 3]).unwrap(), 0.0);
        assert!(fit(&h, &[2.0, -4.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(matches!(fit(&[0.0; 3], &h), Err(Error::UndefinedMetric(_))));
        assert!(matches!(fit(&h, &[0.0; 2]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_record_has_zero_spread() {
        let s = aggregate(&[record(1, &[(300, 70.0)], 0.5)], &[300]).unwrap();
        let d = s.fit("tc_ff", 300).unwrap();
        assert_eq!((d.mean, d.std), (70.0, 0.0));
        assert_eq!(s.time("tc_ff").unwrap().std, 0.0);
    }

    #[test]
    fn two_records_sample_std() {
        let recs = [record(1, &[(300, 40.0)], 1.0), record(2, &[(300, 60.0)], 3.0)];
        let s = aggregate(&recs, &[300]).unwrap();
        let d = s.fit("tc_ff", 300).unwrap();
        assert_eq!(d.mean, 50.0);
        assert!((d.std - 200f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.time("tc_ff").unwrap().mean, 2.0);
    }

    #[test]
    fn inconsistent_checkpoints_are_rejected() {
        let recs = [record(1, &[(300, 40.0)], 1.0), record(2, &[(1000, 60.0)], 1.0)];
        assert!(matches!(aggregate(&recs, &[300]), Err(Error::InvalidArgument(_))));
        assert!(aggregate(&[], &[300]).is_err());
    }

    proptest! {
        #[test]
        fn fit_detects_scale(h in prop::collection::vec(-5.0f64..5.0, 1..40), c in 0.0f64..3.0) {
            prop_assume!(h.iter().any(|v| v.abs() > 1e-3));
            let est: Vec<f64> = h.iter().map(|v| c * v).collect();
            let f = fit(&h, &est).unwrap();
            prop_assert!((f - 100.0 * (1.0 - (1.0 - c).abs())).abs() <= 1e-9);
            prop_assert!(f <= 100.0);
        }

        #[test]
        fn aggregation_ignores_order(values in prop::collection::vec(-50.0f64..100.0, 1..12), rot in 0usize..12) {
            let recs: Vec<RunRecord> = values
                .iter()
                .enumerate()
                .map(|(i, v)| record(i as u64, &[(300, *v), (1000, v * 0.5)], v.abs()))
                .collect();
            let mut shuffled = recs.clone();
            shuffled.rotate_left(rot % recs.len());
            shuffled.reverse();
            let a = aggregate(&recs, &[300, 1000]).unwrap();
            let b = aggregate(&shuffled, &[300, 1000]).unwrap();
            for (x, y) in a.fits.iter().zip(&b.fits) {
                prop_assert!((x.stats.mean - y.stats.mean).abs() <= 1e-9);
                prop_assert!((x.stats.std - y.stats.std).abs() <= 1e-9);
                prop_assert_eq!(x.stats.median, y.stats.median);
                prop_assert_eq!(x.stats.iqr, y.stats.iqr);
            }
        }
    }
}
