//! Random stable systems, band-limited inputs and switching scenarios.
//!
//! Everything is a pure function of the seed. Each seed drives independent
//! ChaCha8 streams: 0 for the base system, 1 for its perturbation, 2 for
//! the input and 3 for the noise.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stored length of the truth impulse responses.
pub const TRUTH_TAPS: usize = 600;
/// Accepted systems keep at least 99% of their impulse-response norm in
/// this many taps.
pub const TAIL_TAPS: usize = 100;
const MAX_TAIL_RATIO: f64 = 0.01;
const MIN_RADIUS: f64 = 0.4;
const LOWPASS_TAPS: usize = 65;

const STREAM_SYSTEM: u64 = 0;
const STREAM_PERTURB: u64 = 1;
const STREAM_INPUT: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `H(z) = gain · Π(1 - zᵢz⁻¹) / Π(1 - pᵢz⁻¹)`; poles and zeros are closed
/// under conjugation, with each complex pair stored adjacently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    pub poles: Vec<Complex64>,
    pub zeros: Vec<Complex64>,
    pub gain: f64,
    #[serde(skip)]
    pub h_true: Vec<f64>,
}

impl LtiSystem {
    pub fn order(&self) -> usize {
        self.poles.len()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.poles.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Recomputes `h_true` from poles, zeros and gain.
    pub fn refresh_response(&mut self) {
        self.h_true = impulse_response(&self.poles, &self.zeros, self.gain, TRUTH_TAPS);
    }

    /// First `n` taps of the truth, zero-padded if needed.
    pub fn taps(&self, n: usize) -> Vec<f64> {
        let mut h: Vec<f64> = self.h_true.iter().take(n).copied().collect();
        h.resize(n, 0.0);
        h
    }

    fn tail_ratio(&self) -> f64 {
        let total: f64 = self.h_true.iter().map(|v| v * v).sum();
        let tail: f64 = self.h_true.iter().skip(TAIL_TAPS).map(|v| v * v).sum();
        (tail / total).sqrt()
    }
}

/// Impulse response of a cascade of first- and second-order sections.
pub fn impulse_response(poles: &[Complex64], zeros: &[Complex64], gain: f64, len: usize) -> Vec<f64> {
    let mut x = vec![0.0; len];
    if len > 0 {
        x[0] = gain;
    }
    for z in zeros.iter().filter(|z| z.im >= 0.0) {
        let (a1, a2) = section(*z);
        for t in (0..len).rev() {
            let mut v = x[t];
            if t >= 1 {
                v += a1 * x[t - 1];
            }
            if t >= 2 {
                v += a2 * x[t - 2];
            }
            x[t] = v;
        }
    }
    for p in poles.iter().filter(|p| p.im >= 0.0) {
        let (a1, a2) = section(*p);
        for t in 0..len {
            let mut v = x[t];
            if t >= 1 {
                v -= a1 * x[t - 1];
            }
            if t >= 2 {
                v -= a2 * x[t - 2];
            }
            x[t] = v;
        }
    }
    x
}

/// Coefficients `(a1, a2)` of the section `1 + a1 z⁻¹ + a2 z⁻²` with root
/// `r` (and `conj(r)` when `r` is complex).
fn section(r: Complex64) -> (f64, f64) {
    if r.im > 0.0 {
        (-2.0 * r.re, r.norm_sqr())
    } else {
        (-r.re, 0.0)
    }
}

fn draw_pair(rng: &mut ChaCha8Rng, radius: f64) -> [Complex64; 2] {
    let r = rng.random_range(MIN_RADIUS..=radius);
    let theta = rng.random_range(0.0..=PI);
    let p = Complex64::from_polar(r, theta);
    [p, p.conj()]
}

fn draw_real(rng: &mut ChaCha8Rng, radius: f64) -> Complex64 {
    let r = rng.random_range(MIN_RADIUS..=radius);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    Complex64::new(sign * r, 0.0)
}

fn draw_roots(rng: &mut ChaCha8Rng, count: usize, radius: f64) -> Vec<Complex64> {
    let mut roots = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        roots.extend(draw_pair(rng, radius));
    }
    if count % 2 == 1 {
        roots.push(draw_real(rng, radius));
    }
    roots
}

fn normalized(poles: Vec<Complex64>, zeros: Vec<Complex64>) -> LtiSystem {
    let h = impulse_response(&poles, &zeros, 1.0, TRUTH_TAPS);
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut sys = LtiSystem {
        poles,
        zeros,
        gain: 1.0 / norm,
        h_true: Vec::new(),
    };
    sys.refresh_response();
    sys
}

/// Random stable system with `order` poles and zeros of magnitude in
/// `[0.4, radius]`, normalized to unit impulse-response norm. Draws whose
/// response is not concentrated in the first [`TAIL_TAPS`] taps are
/// rejected.
pub fn random_system(seed: u64, order: usize, radius: f64) -> LtiSystem {
    let mut rng = stream(seed, STREAM_SYSTEM);
    loop {
        let poles = draw_roots(&mut rng, order, radius);
        let zeros = draw_roots(&mut rng, order, radius);
        let sys = normalized(poles, zeros);
        if sys.tail_ratio() <= MAX_TAIL_RATIO {
            return sys;
        }
    }
}

/// Adds one conjugate pole pair and one conjugate zero pair, then
/// renormalizes.
pub fn perturb_system(sys: &LtiSystem, seed: u64) -> LtiSystem {
    let radius = 0.95;
    let mut rng = stream(seed, STREAM_PERTURB);
    loop {
        let mut poles = sys.poles.clone();
        let mut zeros = sys.zeros.clone();
        poles.extend(draw_pair(&mut rng, radius));
        zeros.extend(draw_pair(&mut rng, radius));
        let out = normalized(poles, zeros);
        if out.tail_ratio() <= MAX_TAIL_RATIO {
            return out;
        }
    }
}

/// Hamming-windowed sinc lowpass; `cutoff` is relative to Nyquist.
pub fn lowpass_taps(cutoff: f64, len: usize) -> Vec<f64> {
    let mid = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|k| {
            let m = k as f64 - mid;
            let ideal = if m == 0.0 { cutoff } else { (PI * cutoff * m).sin() / (PI * m) };
            let window = 0.54 - 0.46 * (2.0 * PI * k as f64 / (len - 1) as f64).cos();
            ideal * window
        })
        .collect()
}

fn variance(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64
}

/// Band-limited Gaussian input with unit empirical variance (about its
/// mean, `1/N` normalization).
pub fn bandlimited_input(seed: u64, length: usize, band: f64) -> Vec<f64> {
    let mut rng = stream(seed, STREAM_INPUT);
    let taps = lowpass_taps(band, LOWPASS_TAPS);
    let white: Vec<f64> = (0..length + LOWPASS_TAPS - 1).map(|_| rng.sample(StandardNormal)).collect();
    let mut u: Vec<f64> = (0..length)
        .map(|t| taps.iter().enumerate().map(|(j, h)| h * white[t + LOWPASS_TAPS - 1 - j]).sum())
        .collect();
    let scale = variance(&u).sqrt();
    if scale > 0.0 {
        u.iter_mut().for_each(|v| *v /= scale);
    }
    u
}

/// `y(t) = Σ_j h[j] u(t - j)` with zero pre-sample inputs.
pub fn convolve(h: &[f64], u: &[f64]) -> Vec<f64> {
    (0..u.len())
        .map(|t| h.iter().take(t + 1).enumerate().map(|(j, hj)| hj * u[t - j]).sum())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub total_samples: usize,
    /// First sample (1-based) produced by the perturbed system.
    pub switch_time: usize,
    pub order: usize,
    pub radius: f64,
    pub band: f64,
    /// Multiplies the noise standard deviation; 0 gives noiseless data.
    pub noise_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            total_samples: 3000,
            switch_time: 1001,
            order: 30,
            radius: 0.95,
            band: 0.8,
            noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioData {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub y_clean: Vec<f64>,
    pub before: LtiSystem,
    pub after: LtiSystem,
    pub switch_time: usize,
    /// Variance of the noiseless output, i.e. the noise variance at unit SNR.
    pub noise_sigma2: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl ScenarioData {
    /// Truth taps for the estimate available after `k` samples.
    pub fn truth_at(&self, k: usize, n: usize) -> Vec<f64> {
        if k < self.switch_time {
            self.before.taps(n)
        } else {
            self.after.taps(n)
        }
    }
}

pub fn make_scenario(seed: u64) -> ScenarioData {
    make_scenario_with(seed, &ScenarioConfig::default())
}

pub fn make_scenario_with(seed: u64, cfg: &ScenarioConfig) -> ScenarioData {
    let before = random_system(seed, cfg.order, cfg.radius);
    let after = perturb_system(&before, seed);
    let u = bandlimited_input(seed, cfg.total_samples, cfg.band);
    let y_before = convolve(&before.h_true, &u);
    let y_after = convolve(&after.h_true, &u);
    let split = cfg.switch_time.saturating_sub(1).min(cfg.total_samples);
    let y_clean: Vec<f64> = y_before[..split].iter().chain(&y_after[split..]).copied().collect();
    let noise_sigma2 = variance(&y_clean);
    let mut rng = stream(seed, STREAM_NOISE);
    let sd = cfg.noise_scale * noise_sigma2.sqrt();
    let y = y_clean
        .iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + sd * e
        })
        .collect();
    ScenarioData {
        u,
        y,
        y_clean,
        before,
        after,
        switch_time: cfg.switch_time,
        noise_sigma2,
        noise_scale: cfg.noise_scale,
        seed,
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    switch_time: usize,
    noise_sigma2: f64,
    noise_scale: f64,
    before: LtiSystem,
    after: LtiSystem,
}

/// Writes `<stem>.csv` (columns `t,u,y`) and `<stem>.json` (systems, seed,
/// switch time).
pub fn export_scenario(data: &ScenarioData, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = BufWriter::new(fs::File::create(dir.join(format!("{stem}.csv")))?);
    writeln!(csv, "t,u,y")?;
    for (t, (u, y)) in data.u.iter().zip(&data.y).enumerate() {
        writeln!(csv, "{},{u:?},{y:?}", t + 1)?;
    }
    csv.flush()?;
    let sidecar = Sidecar {
        seed: data.seed,
        switch_time: data.switch_time,
        noise_sigma2: data.noise_sigma2,
        noise_scale: data.noise_scale,
        before: data.before.clone(),
        after: data.after.clone(),
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Inverse of [`export_scenario`]. The noiseless output is recomputed from
/// the stored systems.
pub fn import_scenario(dir: &Path, stem: &str) -> Result<ScenarioData> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let file = BufReader::new(fs::File::open(dir.join(format!("{stem}.csv")))?);
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (i, line) in file.lines().enumerate().skip(1) {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))
        };
        if cols.len() != 3 {
            return Err(Error::Config(format!("line {}: expected 3 columns", i + 1)));
        }
        u.push(parse(cols[1])?);
        y.push(parse(cols[2])?);
    }
    let mut before = sidecar.before;
    let mut after = sidecar.after;
    before.refresh_response();
    after.refresh_response();
    let split = sidecar.switch_time.saturating_sub(1).min(u.len());
    let y_clean = convolve(&before.h_true, &u)[..split]
        .iter()
        .chain(&convolve(&after.h_true, &u)[split..])
        .copied()
        .collect();
    Ok(ScenarioData {
        u,
        y,
        y_clean,
        before,
        after,
        switch_time: sidecar.switch_time,
        noise_sigma2: sidecar.noise_sigma2,
        noise_scale: sidecar.noise_scale,
        seed: sidecar.seed,
    })
}
