//! Step-level cost simulation: iteration time, peak memory and throughput of
//! a plan at a given batch size, plus maximum feasible batch search.

mod drift;

pub use drift::{generate_drift, DriftError, DriftRegime, DriftSample, DriftTrace};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::planner::{self, evaluate, PlanError, PolicyChoice, Violation};
use crate::profile::{scale_profile, ModelProfile};

/// Upper limit of the batch search.
pub const MAX_BATCH: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Small-batch utilization knee: efficiency at batch `b` is `b / (b + k)`.
    /// Zero gives a base step time exactly linear in batch.
    pub efficiency_k: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { efficiency_k: 2.0 }
    }
}

impl SimConfig {
    pub fn linear() -> Self {
        SimConfig { efficiency_k: 0.0 }
    }

    /// Forward plus backward time without memory optimizations at `batch`,
    /// equal to `base_step_time` at the reference batch.
    pub fn base_time(&self, profile: &ModelProfile, batch: u32) -> f64 {
        let k = self.efficiency_k;
        profile.base_step_time * (batch as f64 + k) / (profile.reference_batch as f64 + k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub batch: u32,
    pub iteration_ms: f64,
    /// Planned per-block overhead times the number of blocks.
    pub overhead_ms: f64,
    pub peak_bytes: u64,
    /// Samples per second.
    pub throughput: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("plan needs {peak_bytes} bytes at batch {batch}, budget is {budget_bytes} bytes")]
    InfeasiblePlan { batch: u32, peak_bytes: u64, budget_bytes: u64 },
    #[error("invalid plan: {0}")]
    InvalidPlan(Violation),
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Simulates one training iteration of `choices` at `batch`. Memory and times
/// of the profile are scaled from its reference batch first.
pub fn simulate_step(
    profile: &ModelProfile,
    choices: &[PolicyChoice],
    batch: u32,
    config: &SimConfig,
) -> Result<StepReport, SimError> {
    if batch == 0 {
        return Err(SimError::ZeroBatch);
    }
    if choices.len() != profile.len() {
        return Err(SimError::InvalidPlan(Violation::LengthMismatch { expected: profile.len(), found: choices.len() }));
    }
    if choices[0] == PolicyChoice::Recompute {
        return Err(SimError::InvalidPlan(Violation::CheckpointNotResident));
    }
    let scaled = scale_profile(profile, batch);
    let eval = evaluate(&scaled, choices);
    if eval.total_bytes > scaled.mem_budget_bytes {
        return Err(SimError::InfeasiblePlan {
            batch,
            peak_bytes: eval.total_bytes,
            budget_bytes: scaled.mem_budget_bytes,
        });
    }
    let overhead_ms = eval.objective_ms * profile.n_layers as f64;
    let iteration_ms = config.base_time(profile, batch) + overhead_ms;
    Ok(StepReport {
        batch,
        iteration_ms,
        overhead_ms,
        peak_bytes: eval.total_bytes,
        throughput: batch as f64 / (iteration_ms / 1000.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Strategy {
    #[serde(rename = "retain-all")]
    RetainAll,
    /// Keeps each block's checkpoint and recomputes everything else.
    #[serde(rename = "full-recompute")]
    FullRecompute,
    #[serde(rename = "all-compress")]
    AllCompress,
    #[serde(rename = "optimal")]
    Optimal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::RetainAll, Strategy::FullRecompute, Strategy::AllCompress, Strategy::Optimal];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::RetainAll => "retain-all",
            Strategy::FullRecompute => "full-recompute",
            Strategy::AllCompress => "all-compress",
            Strategy::Optimal => "optimal",
        }
    }

    /// The fixed assignment of a baseline strategy; `None` for `Optimal`.
    pub fn fixed_choices(self, n: usize) -> Option<Vec<PolicyChoice>> {
        let rest = match self {
            Strategy::RetainAll => PolicyChoice::Retain,
            Strategy::FullRecompute => PolicyChoice::Recompute,
            Strategy::AllCompress => PolicyChoice::Compress,
            Strategy::Optimal => return None,
        };
        let first = if self == Strategy::AllCompress { PolicyChoice::Compress } else { PolicyChoice::Retain };
        Some(std::iter::once(first).chain(std::iter::repeat_n(rest, n.saturating_sub(1))).collect())
    }

    /// Choices of this strategy on an already scaled profile.
    pub fn choices(self, profile: &ModelProfile) -> Result<Vec<PolicyChoice>, PlanError> {
        match self.fixed_choices(profile.len()) {
            Some(choices) => Ok(choices),
            None => planner::solve(profile).map(|plan| plan.choices),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| {
            format!("unknown strategy '{s}', expected one of retain-all, full-recompute, all-compress, optimal")
        })
    }
}

/// Least total memory any plan needs, on an already scaled profile.
fn min_plan_bytes(profile: &ModelProfile) -> u64 {
    let block: u64 =
        profile.operators.iter().enumerate().map(|(i, op)| if i == 0 { op.compressed_bytes() } else { 0 }).sum();
    profile.static_mem_bytes.saturating_add((block as u128 * profile.n_layers as u128).min(u64::MAX as u128) as u64)
}

/// Whether `strategy` fits the budget at `batch`.
pub fn is_feasible(profile: &ModelProfile, strategy: Strategy, batch: u32) -> bool {
    let scaled = scale_profile(profile, batch);
    let needed = match strategy.fixed_choices(scaled.len()) {
        Some(choices) => evaluate(&scaled, &choices).total_bytes,
        None => min_plan_bytes(&scaled),
    };
    needed <= scaled.mem_budget_bytes
}

/// Largest batch at which `strategy` fits the budget, 0 if batch 1 does not.
/// Memory of every strategy is monotone in batch, so a doubling phase
/// followed by binary search is exact. Capped at [`MAX_BATCH`].
pub fn max_feasible_batch(profile: &ModelProfile, strategy: Strategy) -> u32 {
    if !is_feasible(profile, strategy, 1) {
        return 0;
    }
    let mut lo = 1u32;
    while lo < MAX_BATCH && is_feasible(profile, strategy, (lo * 2).min(MAX_BATCH)) {
        lo = (lo * 2).min(MAX_BATCH);
    }
    if lo == MAX_BATCH {
        return MAX_BATCH;
    }
    // lo feasible, hi infeasible
    let mut hi = lo * 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if is_feasible(profile, strategy, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub batch: u32,
    /// Strategy name, or a caller-chosen label for a fixed plan.
    pub strategy: String,
    pub iteration_ms: f64,
    pub overhead_ms: f64,
    pub peak_bytes: u64,
    pub throughput: f64,
}

/// Simulates every strategy at every batch; infeasible combinations are
/// omitted. Rows are ordered by batch, then strategy.
pub fn sweep(
    profile: &ModelProfile,
    batches: impl IntoIterator<Item = u32>,
    strategies: &[Strategy],
    config: &SimConfig,
) -> Vec<SweepRow> {
    let mut strategies = strategies.to_vec();
    strategies.sort();
    strategies.dedup();
    let mut batches: Vec<u32> = batches.into_iter().filter(|&b| b > 0).collect();
    batches.sort_unstable();
    batches.dedup();

    let mut rows = Vec::new();
    for batch in batches {
        let scaled = scale_profile(profile, batch);
        for &strategy in &strategies {
            let Ok(choices) = strategy.choices(&scaled) else { continue };
            if let Ok(r) = simulate_step(profile, &choices, batch, config) {
                rows.push(SweepRow {
                    batch,
                    strategy: strategy.to_string(),
                    iteration_ms: r.iteration_ms,
                    overhead_ms: r.overhead_ms,
                    peak_bytes: r.peak_bytes,
                    throughput: r.throughput,
                });
            }
        }
    }
    rows
}

/// Simulates fixed `choices` at every batch where they fit, labelled `label`.
pub fn sweep_choices(
    profile: &ModelProfile,
    label: &str,
    choices: &[PolicyChoice],
    batches: impl IntoIterator<Item = u32>,
    config: &SimConfig,
) -> Result<Vec<SweepRow>, SimError> {
    let mut batches: Vec<u32> = batches.into_iter().collect();
    batches.sort_unstable();
    batches.dedup();
    let mut rows = Vec::new();
    for batch in batches {
        match simulate_step(profile, choices, batch, config) {
            Ok(r) => rows.push(SweepRow {
                batch,
                strategy: label.to_string(),
                iteration_ms: r.iteration_ms,
                overhead_ms: r.overhead_ms,
                peak_bytes: r.peak_bytes,
                throughput: r.throughput,
            }),
            Err(SimError::InfeasiblePlan { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["batch", "strategy", "iteration_ms", "overhead_ms", "peak_bytes", "throughput"])?;
    }
    w.flush()?;
    Ok(())
}
