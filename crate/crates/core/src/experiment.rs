//! Monte-Carlo study: configuration, execution and result files.
//!
//! Run `i` uses seed `base_seed + i`, so results do not depend on how runs
//! are scheduled. With the `parallel` feature runs are spread over a rayon
//! pool of `parallelism` threads; otherwise, or with `parallelism = 1`,
//! they run in order on the calling thread.
//!
//! Output files:
//!
//! - `run_<seed>.json`: the [`RunRecord`] (fits, hyper-parameter traces,
//!   audits, faults).
//! - `timing_<seed>.json`: cumulative update seconds per method.
//! - `summary.csv`, `summary.json`: per-method, per-checkpoint fit statistics
//!   (count, mean, std, median, quartiles, IQR).
//! - `fits_long.csv`: `method,k,seed,fit`, one row per method, checkpoint
//!   and run.
//! - `times.csv`: mean and std of cumulative update time, one column per
//!   method.
//!
//! All of these except `timing_<seed>.json` and `times.csv` are
//! byte-reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{BayesEstimator, EstimatorConfig, Mode, RlsEstimator};
use crate::metrics::{aggregate, fit, FitTrace, HyperSample, RunRecord, Summary};
use crate::simulator::{make_scenario_with, ScenarioConfig, ScenarioData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TcFf,
    TcEstFf,
    TcOptFf,
    TcOptEstFf,
    RlsFf,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TcFf,
        Method::TcEstFf,
        Method::TcOptFf,
        Method::TcOptEstFf,
        Method::RlsFf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::TcFf => "tc_ff",
            Method::TcEstFf => "tc_est_ff",
            Method::TcOptFf => "tc_opt_ff",
            Method::TcOptEstFf => "tc_opt_est_ff",
            Method::RlsFf => "rls_ff",
        }
    }

    fn mode(&self, gamma_fixed: f64) -> Option<Mode> {
        match self {
            Method::TcFf => Some(Mode::FixedFf { gamma: gamma_fixed }),
            Method::TcEstFf => Some(Mode::AdaptiveFf),
            Method::TcOptFf => Some(Mode::OptFixedFf { gamma: gamma_fixed }),
            Method::TcOptEstFf => Some(Mode::OptAdaptiveFf),
            Method::RlsFf => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

pub const DEFAULT_CHECKPOINTS: [usize; 5] = [300, 1000, 1050, 1500, 3000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_runs: usize,
    pub n_taps: usize,
    /// Samples per update block.
    pub block_len: usize,
    pub init_batch: usize,
    pub total_samples: usize,
    pub switch_time: usize,
    pub gamma_fixed: f64,
    pub gamma_init: f64,
    pub methods: Vec<Method>,
    pub opt_rel_tol: f64,
    pub base_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub checkpoints: Vec<usize>,
    pub system_order: usize,
    /// Scales the noise standard deviation (1 gives unit SNR).
    pub noise_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_runs: 200,
            n_taps: 100,
            block_len: 10,
            init_batch: 300,
            total_samples: 3000,
            switch_time: 1001,
            gamma_fixed: 0.998,
            gamma_init: 0.995,
            methods: Method::ALL.to_vec(),
            opt_rel_tol: 1e-9,
            base_seed: 1,
            parallelism: 0,
            output_dir: PathBuf::from("results"),
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            system_order: 30,
            noise_scale: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_runs == 0 {
            return bad("n_runs must be positive".into());
        }
        if self.n_taps == 0 || self.block_len == 0 {
            return bad("n_taps and block_len must be positive".into());
        }
        if self.init_batch < self.n_taps + 10 {
            return bad(format!("init_batch must be at least n_taps + 10 = {}", self.n_taps + 10));
        }
        if self.total_samples < self.init_batch {
            return bad("total_samples must be at least init_batch".into());
        }
        if !(self.gamma_fixed > 0.0 && self.gamma_fixed <= 1.0) {
            return bad(format!("gamma_fixed {} is outside (0, 1]", self.gamma_fixed));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init <= 1.0) {
            return bad(format!("gamma_init {} is outside (0, 1]", self.gamma_init));
        }
        if !(self.opt_rel_tol > 0.0) {
            return bad("opt_rel_tol must be positive".into());
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be non-negative".into());
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods contain duplicates".into());
        }
        if self.checkpoints.is_empty() || self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoints must be non-empty and strictly increasing".into());
        }
        for &k in &self.checkpoints {
            if k < self.init_batch || k > self.total_samples || (k - self.init_batch) % self.block_len != 0 {
                return bad(format!(
                    "checkpoint {k} is not an update boundary init_batch + j·block_len within the record"
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// SHA-256 of the settings that affect results (everything but the
    /// output directory and the thread count).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.parallelism = 0;
        let text = c.to_toml().expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_runs as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            total_samples: self.total_samples,
            switch_time: self.switch_time,
            order: self.system_order,
            noise_scale: self.noise_scale,
            ..ScenarioConfig::default()
        }
    }

    fn estimator(&self, mode: Mode) -> EstimatorConfig {
        EstimatorConfig {
            gamma_init: self.gamma_init,
            opt_rel_tol: self.opt_rel_tol,
            ..EstimatorConfig::new(self.n_taps, mode)
        }
    }
}

/// Sequential or thread-pool execution of the runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel { threads: usize },
}

impl Execution {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        if cfg!(feature = "parallel") && cfg.parallelism != 1 {
            Execution::Parallel { threads: cfg.parallelism }
        } else {
            Execution::Sequential
        }
    }
}

enum Runner {
    Bayes(BayesEstimator),
    Rls(RlsEstimator),
}

impl Runner {
    fn update(&mut self, u: &[f64], y: &[f64]) -> Result<()> {
        match self {
            Runner::Bayes(e) => e.update(u, y),
            Runner::Rls(e) => e.update(u, y),
        }
    }

    fn estimate(&self) -> &[f64] {
        match self {
            Runner::Bayes(e) => e.h_hat.as_slice(),
            Runner::Rls(e) => e.impulse_response().as_slice(),
        }
    }

    fn hyper_sample(&self, k: usize) -> Option<HyperSample> {
        match self {
            Runner::Bayes(e) => Some(HyperSample {
                k,
                lambda: e.hyper.lambda,
                beta: e.hyper.beta,
                gamma: e.gamma(),
                sigma2: e.sigma2,
            }),
            Runner::Rls(_) => None,
        }
    }
}

/// Per-update observation handed to a [`run_method`] callback.
pub struct UpdateEvent<'a> {
    pub k: usize,
    pub fit: f64,
    pub hyper: Option<&'a HyperSample>,
    pub fault: Option<&'a Error>,
}

/// Everything one method produced on one scenario.
pub struct MethodRun {
    pub trace: FitTrace,
    pub hyper: Vec<HyperSample>,
    pub times: Vec<(usize, f64)>,
    pub faults: Vec<String>,
    pub audit: Option<crate::estimators::Audit>,
}

/// Initializes `method` on the first `init_batch` samples and feeds the rest
/// in blocks. Fits are recorded at the checkpoints; `on_update` sees every
/// update. Only the update calls are timed.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    data: &ScenarioData,
    mut on_update: impl FnMut(UpdateEvent<'_>),
) -> MethodRun {
    let n = cfg.n_taps;
    let init = cfg.init_batch;
    let mut faults = Vec::new();
    let runner = match method.mode(cfg.gamma_fixed) {
        Some(mode) => BayesEstimator::initialize(&data.u[..init], &data.y[..init], cfg.estimator(mode)).map(Runner::Bayes),
        None => RlsEstimator::initialize(&data.u[..init], &data.y[..init], n, cfg.gamma_fixed).map(Runner::Rls),
    };
    let mut runner = match runner {
        Ok(r) => Some(r),
        Err(e) => {
            faults.push(format!("k={init}: initialization failed: {e}"));
            None
        }
    };
    let zeros = vec![0.0; n];
    let fit_at = |runner: &Option<Runner>, k: usize| {
        let est = runner.as_ref().map(|r| r.estimate()).unwrap_or(&zeros);
        fit(&data.truth_at(k, n), est).unwrap_or(f64::NAN)
    };

    let mut checkpoints = Vec::new();
    let mut hyper = Vec::new();
    let mut times = Vec::new();
    let mut elapsed = 0.0;
    let mut record = |k: usize, runner: &Option<Runner>, elapsed: f64, fault: Option<&Error>| {
        let f = fit_at(runner, k);
        let h = runner.as_ref().and_then(|r| r.hyper_sample(k));
        if cfg.checkpoints.contains(&k) {
            checkpoints.push((k, f));
            times.push((k, elapsed));
        }
        on_update(UpdateEvent { k, fit: f, hyper: h.as_ref(), fault });
        if let Some(h) = h {
            hyper.push(h);
        }
    };
    record(init, &runner, 0.0, None);

    let mut k = init;
    while k + cfg.block_len <= cfg.total_samples {
        let (u, y) = (&data.u[k..k + cfg.block_len], &data.y[k..k + cfg.block_len]);
        k += cfg.block_len;
        let mut fault = None;
        if let Some(r) = runner.as_mut() {
            let start = Instant::now();
            let res = r.update(u, y);
            elapsed += start.elapsed().as_secs_f64();
            if let Err(e) = res {
                faults.push(format!("k={k}: {e}"));
                fault = Some(e);
            }
        }
        record(k, &runner, elapsed, fault.as_ref());
    }

    let audit = match &runner {
        Some(Runner::Bayes(e)) => Some(e.audit.clone()),
        _ => None,
    };
    MethodRun {
        trace: FitTrace {
            method: method.name().to_string(),
            seed: data.seed,
            checkpoints,
        },
        hyper,
        times,
        faults,
        audit,
    }
}

/// One Monte-Carlo run: scenario for `seed`, then every configured method.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> RunRecord {
    let data = make_scenario_with(seed, &cfg.scenario());
    let mut rec = RunRecord {
        seed,
        config_fingerprint: cfg.fingerprint(),
        fit_traces: Vec::new(),
        hyper_traces: BTreeMap::new(),
        audits: BTreeMap::new(),
        faults: BTreeMap::new(),
        time_traces: BTreeMap::new(),
    };
    for &method in &cfg.methods {
        let out = run_method(cfg, method, &data, |_| {});
        let name = method.name().to_string();
        rec.fit_traces.push(out.trace);
        if !out.hyper.is_empty() {
            rec.hyper_traces.insert(name.clone(), out.hyper);
        }
        if let Some(a) = out.audit {
            rec.audits.insert(name.clone(), a);
        }
        if !out.faults.is_empty() {
            rec.faults.insert(name.clone(), out.faults);
        }
        rec.time_traces.insert(name, out.times);
    }
    rec
}

/// Runs every seed of the study and returns the records in seed order.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    execute_with(cfg, Execution::from_config(cfg))
}

pub fn execute_with(cfg: &ExperimentConfig, execution: Execution) -> Result<Vec<RunRecord>> {
    let seeds = cfg.seeds();
    match execution {
        Execution::Sequential => Ok(seeds.iter().map(|&s| run_single(cfg, s)).collect()),
        #[cfg(feature = "parallel")]
        Execution::Parallel { threads } => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(|| seeds.par_iter().map(|&s| run_single(cfg, s)).collect()))
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel { .. } => Ok(seeds.iter().map(|&s| run_single(cfg, s)).collect()),
    }
}

/// Executes the study and writes every result file.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let records = execute(cfg)?;
    write_records(&records, &cfg.output_dir)?;
    emit_plot_data(&records, &cfg.methods, &cfg.checkpoints, &cfg.output_dir)?;
    Ok(records)
}

pub fn write_records(records: &[RunRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in records {
        fs::write(dir.join(format!("run_{}.json", r.seed)), serde_json::to_string_pretty(r)? + "\n")?;
        fs::write(
            dir.join(format!("timing_{}.json", r.seed)),
            serde_json::to_string_pretty(&r.time_traces)? + "\n",
        )?;
    }
    Ok(())
}

/// Reads every `run_<seed>.json` (and its timing file, when present) from
/// `dir`, sorted by seed.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if !(name.starts_with("run_") && name.ends_with(".json")) {
            continue;
        }
        let mut rec: RunRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let timing = dir.join(format!("timing_{}.json", rec.seed));
        if timing.exists() {
            rec.time_traces = serde_json::from_str(&fs::read_to_string(timing)?)?;
        }
        records.push(rec);
    }
    records.sort_by_key(|r| r.seed);
    Ok(records)
}

/// Writes `summary.csv`, `summary.json`, `fits_long.csv` and `times.csv`.
pub fn emit_plot_data(records: &[RunRecord], methods: &[Method], checkpoints: &[usize], dir: &Path) -> Result<Summary> {
    let summary = aggregate(records, checkpoints)?;
    fs::create_dir_all(dir)?;
    let names: Vec<&str> = methods.iter().map(|m| m.name()).collect();

    let mut csv = String::from("method,k,count,mean,std,median,q1,q3,iqr\n");
    for name in &names {
        for &k in checkpoints {
            if let Some(d) = summary.fit(name, k) {
                csv += &format!(
                    "{name},{k},{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                    d.count, d.mean, d.std, d.median, d.q1, d.q3, d.iqr
                );
            }
        }
    }
    fs::write(dir.join("summary.csv"), csv)?;
    let fits_only = serde_json::json!({ "checkpoints": summary.checkpoints, "fits": summary.fits });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&fits_only)? + "\n")?;

    let mut long = String::from("method,k,seed,fit\n");
    for name in &names {
        for &k in checkpoints {
            for r in records {
                if let Some(f) = r.trace(name).and_then(|t| t.at(k)) {
                    long += &format!("{name},{k},{},{f:?}\n", r.seed);
                }
            }
        }
    }
    fs::write(dir.join("fits_long.csv"), long)?;

    let mut times = format!("stat,{}\n", names.join(","));
    let cell = |name: &str, pick: fn(&crate::metrics::TimeSummary) -> f64| {
        summary.time(name).map(|t| format!("{:?}", pick(t))).unwrap_or_default()
    };
    times += &format!("mean,{}\n", names.iter().map(|n| cell(n, |t| t.mean)).collect::<Vec<_>>().join(","));
    times += &format!("std,{}\n", names.iter().map(|n| cell(n, |t| t.std)).collect::<Vec<_>>().join(","));
    fs::write(dir.join("times.csv"), times)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_runs: 2,
            n_taps: 20,
            init_batch: 100,
            total_samples: 200,
            switch_time: 151,
            checkpoints: vec![100, 150, 200],
            methods: vec![Method::TcFf, Method::RlsFf],
            system_order: 6,
            parallelism: 1,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!(
            (c.n_runs, c.n_taps, c.block_len, c.init_batch, c.total_samples, c.switch_time),
            (200, 100, 10, 300, 3000, 1001)
        );
        assert_eq!((c.gamma_fixed, c.gamma_init, c.opt_rel_tol), (0.998, 0.995, 1e-9));
        assert_eq!(c.methods.len(), 5);
        c.validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = small();
        c.gamma_fixed = 0.123456789012345;
        c.base_seed = u32::MAX as u64 + 7;
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial = ExperimentConfig::from_toml("n_runs = 3\nmethods = [\"tc_ff\"]\n").unwrap();
        assert_eq!(partial.n_runs, 3);
        assert_eq!(partial.methods, vec![Method::TcFf]);
        assert_eq!(partial.init_batch, 300);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("methods = [\"nope\"]").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.init_batch = 25;
        assert!(c.validate().is_err());
        let mut c = small();
        c.checkpoints = vec![100, 155];
        assert!(c.validate().is_err());
        let mut c = small();
        c.methods = vec![Method::TcFf, Method::TcFf];
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_output_and_threads() {
        let a = small();
        let mut b = small();
        b.output_dir = "elsewhere".into();
        b.parallelism = 8;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.gamma_fixed = 0.99;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("pem".parse::<Method>().is_err());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let c = small();
        let a = execute_with(&c, Execution::Sequential).unwrap();
        let b = execute_with(&c, Execution::Parallel { threads: 2 }).unwrap();
        let strip = |v: Vec<RunRecord>| -> Vec<String> { v.iter().map(|r| serde_json::to_string(r).unwrap()).collect() };
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn result_files_have_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.output_dir = dir.path().to_path_buf();
        let records = run_experiment(&c).unwrap();
        assert_eq!(records.len(), 2);
        let long = fs::read_to_string(dir.path().join("fits_long.csv")).unwrap();
        let mut lines = long.lines();
        assert_eq!(lines.next(), Some("method,k,seed,fit"));
        assert_eq!(lines.count(), 2 * 3 * 2);
        let times = fs::read_to_string(dir.path().join("times.csv")).unwrap();
        assert_eq!(times.lines().next(), Some("stat,tc_ff,rls_ff"));
        let loaded = load_records(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].fit_traces, records[0].fit_traces);
        for r in &loaded {
            for trace in r.time_traces.values() {
                assert!(trace.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].0 < w[1].0));
                assert!(trace.iter().all(|(_, s)| *s >= 0.0));
            }
        }
    }

    #[test]
    fn single_method_time_table() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.n_runs = 1;
        c.methods = vec![Method::RlsFf];
        c.output_dir = dir.path().to_path_buf();
        run_experiment(&c).unwrap();
        let times = fs::read_to_string(dir.path().join("times.csv")).unwrap();
        let rows: Vec<&str> = times.lines().collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.split(',').count() == 2));
    }
}
