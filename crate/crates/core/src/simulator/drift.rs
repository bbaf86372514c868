//! Synthetic outlier-channel drift.
//!
//! The outlier fraction of each tracked tensor starts high, settles towards a
//! floor with an exponential decay, and carries AR(1) noise whose amplitude
//! shrinks as `1/sqrt(iteration)`. Counts are turned into compression rates
//! with the outlier-separated size formula.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{outlier_separated_rate, DEFAULT_GROUP_SIZE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftRegime {
    /// Rows of the tracked activation; fixes the cost of one raw channel.
    pub rows: usize,
    pub group_size: u32,
    /// Outlier fraction of channels once training has settled.
    pub settled_fraction: f64,
    /// Extra outlier fraction at iteration 1, decaying with `decay_iterations`.
    pub transient_fraction: f64,
    pub decay_iterations: f64,
    /// Noise standard deviation (as a fraction of channels) at iteration 1.
    pub noise: f64,
    /// AR(1) coefficient of the noise, in [0, 1).
    pub smoothing: f64,
}

impl Default for DriftRegime {
    fn default() -> Self {
        DriftRegime {
            rows: 21_504,
            group_size: DEFAULT_GROUP_SIZE,
            settled_fraction: 0.015,
            transient_fraction: 0.075,
            decay_iterations: 50.0,
            noise: 0.02,
            smoothing: 0.8,
        }
    }
}

impl DriftRegime {
    /// No transient and no noise: the count stays at `fraction` of channels.
    pub fn flat(fraction: f64) -> Self {
        DriftRegime { settled_fraction: fraction, transient_fraction: 0.0, noise: 0.0, ..DriftRegime::default() }
    }

    /// Mean outlier fraction at `iteration` (1-based).
    pub fn mean_fraction(&self, iteration: u64) -> f64 {
        self.settled_fraction + self.transient_fraction * (-((iteration - 1) as f64) / self.decay_iterations).exp()
    }

    fn validate(&self) -> Result<(), DriftError> {
        let bad = |msg: &str| Err(DriftError::InvalidRegime(msg.to_string()));
        if self.rows == 0 || self.group_size == 0 {
            return bad("rows and group_size must be positive");
        }
        if !(0.0..=0.5).contains(&self.settled_fraction) || !(0.0..=0.5).contains(&self.transient_fraction) {
            return bad("fractions must lie in [0, 0.5]");
        }
        if !(self.decay_iterations > 0.0 && self.decay_iterations.is_finite()) {
            return bad("decay_iterations must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad("smoothing must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("invalid drift regime: {0}")]
    InvalidRegime(String),
    #[error("invalid drift sample: {0}")]
    InvalidSample(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub iteration: u64,
    pub operator_id: u32,
    pub outlier_count: u32,
    #[serde(rename = "crate")]
    pub compression_rate: f64,
}

/// Per-operator compression rate over iterations. Between samples the most
/// recent one holds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DriftTrace {
    series: BTreeMap<u32, Vec<DriftSample>>,
}

impl DriftTrace {
    pub fn from_samples(samples: impl IntoIterator<Item = DriftSample>) -> Result<Self, DriftError> {
        let mut series: BTreeMap<u32, Vec<DriftSample>> = BTreeMap::new();
        for s in samples {
            if s.iteration == 0 {
                return Err(DriftError::InvalidSample(format!("operator {}: iterations start at 1", s.operator_id)));
            }
            if !(s.compression_rate > 0.0 && s.compression_rate <= 1.0) {
                return Err(DriftError::InvalidSample(format!(
                    "operator {} iteration {}: crate {} outside (0, 1]",
                    s.operator_id, s.iteration, s.compression_rate
                )));
            }
            series.entry(s.operator_id).or_default().push(s);
        }
        for (id, samples) in series.iter_mut() {
            samples.sort_by_key(|s| s.iteration);
            if let Some(w) = samples.windows(2).find(|w| w[0].iteration == w[1].iteration) {
                return Err(DriftError::InvalidSample(format!(
                    "operator {id}: duplicate iteration {}",
                    w[0].iteration
                )));
            }
        }
        Ok(DriftTrace { series })
    }

    /// The same count and rate for every operator from iteration 1 on.
    pub fn constant(operator_ids: &[u32], outlier_count: u32, compression_rate: f64) -> Result<Self, DriftError> {
        DriftTrace::from_samples(operator_ids.iter().map(|&operator_id| DriftSample {
            iteration: 1,
            operator_id,
            outlier_count,
            compression_rate,
        }))
    }

    pub fn operator_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.series.keys().copied()
    }

    pub fn series(&self, operator_id: u32) -> &[DriftSample] {
        self.series.get(&operator_id).map_or(&[], Vec::as_slice)
    }

    /// Latest sample of `operator_id` at or before `iteration`.
    pub fn sample_at(&self, operator_id: u32, iteration: u64) -> Option<&DriftSample> {
        let s = self.series.get(&operator_id)?;
        let idx = s.partition_point(|x| x.iteration <= iteration);
        idx.checked_sub(1).map(|i| &s[i])
    }

    pub fn rate_at(&self, operator_id: u32, iteration: u64) -> Option<f64> {
        self.sample_at(operator_id, iteration).map(|s| s.compression_rate)
    }

    /// All samples ordered by iteration, then operator.
    pub fn samples(&self) -> Vec<DriftSample> {
        let mut all: Vec<DriftSample> = self.series.values().flatten().copied().collect();
        all.sort_by_key(|s| (s.iteration, s.operator_id));
        all
    }

    /// Population variance of the rate over the first `fraction` of samples
    /// divided by that over the last `fraction`. `None` when a window holds
    /// fewer than two samples; infinite when only the late window is flat.
    pub fn variance_ratio(&self, operator_id: u32, fraction: f64) -> Option<f64> {
        let s = self.series(operator_id);
        let w = (s.len() as f64 * fraction).floor() as usize;
        if w < 2 {
            return None;
        }
        let var = |xs: &[DriftSample]| {
            let mean = xs.iter().map(|x| x.compression_rate).sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x.compression_rate - mean).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let (early, late) = (var(&s[..w]), var(&s[s.len() - w..]));
        Some(if late == 0.0 {
            if early == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            early / late
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DriftError> {
        let mut w = csv::Writer::from_writer(out);
        let samples = self.samples();
        if samples.is_empty() {
            w.write_record(["iteration", "operator_id", "outlier_count", "crate"])?;
        }
        for s in samples {
            w.serialize(s)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DriftError> {
        let mut r = csv::Reader::from_reader(input);
        let samples = r.deserialize().collect::<Result<Vec<DriftSample>, _>>()?;
        DriftTrace::from_samples(samples)
    }
}

/// Seeded drift trace for every id in `operator_ids`, iterations
/// `1..=iterations`. Each operator draws from its own ChaCha stream, so its
/// trace does not depend on which other operators are generated.
/// Counts are clamped to `[0, cols / 2]`, the most outlier-separated
/// compression admits.
pub fn generate_drift(
    seed: u64,
    iterations: u64,
    cols: usize,
    regime: &DriftRegime,
    operator_ids: &[u32],
) -> Result<DriftTrace, DriftError> {
    regime.validate()?;
    if iterations == 0 || cols == 0 {
        return Err(DriftError::InvalidRegime("iterations and cols must be positive".into()));
    }
    let max_count = (cols / 2) as f64;
    let innovation = (1.0 - regime.smoothing * regime.smoothing).sqrt();
    let mut samples = Vec::with_capacity(iterations as usize * operator_ids.len());
    for &operator_id in operator_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(operator_id as u64);
        let mut state = 0.0f64;
        for t in 1..=iterations {
            let z: f64 = StandardNormal.sample(&mut rng);
            state = if t == 1 { z } else { regime.smoothing * state + innovation * z };
            let fraction = regime.mean_fraction(t) + regime.noise / (t as f64).sqrt() * state;
            let count = (fraction * cols as f64).round().clamp(0.0, max_count) as u32;
            samples.push(DriftSample {
                iteration: t,
                operator_id,
                outlier_count: count,
                compression_rate: outlier_separated_rate(regime.rows, cols, regime.group_size, count as usize),
            });
        }
    }
    DriftTrace::from_samples(samples)
}
