//! Exact per-block policy planning.
//!
//! Every operator of a block picks one policy: recompute in the backward pass,
//! keep a compressed copy, or retain the activation as is. The first operator
//! is the block checkpoint and can not be recomputed. The plan minimizes
//!
//! ```text
//! sum(Tcomp_i  for recomputed i) + sum(Tc_i + Tdc_i  for compressed i)
//! ```
//!
//! subject to `M_static + N_layers * sum(resident bytes of i) <= M_budget`,
//! where a compressed operator keeps `ceil(M_i * CRate_i)` bytes and a retained
//! one `M_i`. This is a multiple-choice knapsack; [`solve`] runs a
//! depth-first branch and bound with LP-relaxation bounds and is exact.
//!
//! Times are compared in integer picoseconds so that ties are exact. Among
//! plans of equal time the one with the least activation memory wins, and
//! remaining ties go to the lexicographically first choice vector with
//! `Recompute < Compress < Retain`.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::ModelProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyChoice {
    Recompute,
    Compress,
    Retain,
}

impl PolicyChoice {
    pub const ALL: [PolicyChoice; 3] = [PolicyChoice::Recompute, PolicyChoice::Compress, PolicyChoice::Retain];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyChoice::Recompute => "recompute",
            PolicyChoice::Compress => "compress",
            PolicyChoice::Retain => "retain",
        }
    }
}

impl fmt::Display for PolicyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverStats {
    pub nodes: u64,
    pub wall_ms: f64,
}

/// Policy assignment for one block plus its predicted cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub choices: Vec<PolicyChoice>,
    /// Overhead of one block per step.
    pub objective_ms: f64,
    /// Resident activation bytes across all blocks.
    pub activation_bytes: u64,
    pub total_bytes: u64,
    pub solver: SolverStats,
}

impl Plan {
    /// Builds a plan from explicit choices, evaluating its cost on `profile`.
    pub fn from_choices(profile: &ModelProfile, choices: Vec<PolicyChoice>) -> Plan {
        let eval = evaluate(profile, &choices);
        Plan {
            choices,
            objective_ms: eval.objective_ms,
            activation_bytes: eval.activation_bytes,
            total_bytes: eval.total_bytes,
            solver: SolverStats::default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Plan, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn count(&self, choice: PolicyChoice) -> usize {
        self.choices.iter().filter(|&&c| c == choice).count()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(
        "no policy fits the memory budget: budget {budget_bytes} bytes, minimum achievable {min_total_bytes} bytes"
    )]
    Infeasible { min_total_bytes: u64, budget_bytes: u64 },
    #[error("exhaustive search limited to {max} operators, profile has {n}")]
    TooLarge { n: usize, max: usize },
}

/// Largest block handled by [`brute_force`].
pub const BRUTE_FORCE_MAX_OPS: usize = 12;

/// Milliseconds to integer picoseconds.
pub(crate) fn time_units(ms: f64) -> u64 {
    (ms * 1e9).round() as u64
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    choice: PolicyChoice,
    cost: u64,
    mem: u64,
}

fn candidates(profile: &ModelProfile) -> Vec<Vec<Candidate>> {
    profile
        .operators
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let all = [
                Candidate { choice: PolicyChoice::Recompute, cost: time_units(op.compute_time), mem: 0 },
                Candidate {
                    choice: PolicyChoice::Compress,
                    cost: time_units(op.compress_time) + time_units(op.decompress_time),
                    mem: op.compressed_bytes(),
                },
                Candidate { choice: PolicyChoice::Retain, cost: 0, mem: op.mem_bytes },
            ];
            // the block checkpoint stays resident
            all.into_iter().skip(usize::from(i == 0)).collect()
        })
        .collect()
}

/// Per-block activation byte limit implied by the budget.
fn block_capacity(profile: &ModelProfile) -> Option<u64> {
    profile.mem_budget_bytes.checked_sub(profile.static_mem_bytes).map(|free| free / profile.n_layers as u64)
}

fn total_bytes(profile: &ModelProfile, block_bytes: u64) -> (u64, u64) {
    let activation = (block_bytes as u128 * profile.n_layers as u128).min(u64::MAX as u128) as u64;
    (activation, profile.static_mem_bytes.saturating_add(activation))
}

fn min_total_bytes(profile: &ModelProfile) -> u64 {
    let block: u64 = candidates(profile).iter().map(|c| c.iter().map(|o| o.mem).min().unwrap()).sum();
    total_bytes(profile, block).1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub cost_units: u64,
    pub objective_ms: f64,
    pub block_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

/// Cost and memory of an arbitrary choice vector (no feasibility checks).
pub fn evaluate(profile: &ModelProfile, choices: &[PolicyChoice]) -> Evaluation {
    let mut cost_units = 0u64;
    let mut objective_ms = 0.0;
    let mut block_bytes = 0u64;
    for (op, &choice) in profile.operators.iter().zip(choices) {
        match choice {
            PolicyChoice::Recompute => {
                cost_units += time_units(op.compute_time);
                objective_ms += op.compute_time;
            }
            PolicyChoice::Compress => {
                cost_units += time_units(op.compress_time) + time_units(op.decompress_time);
                objective_ms += op.compress_time + op.decompress_time;
                block_bytes += op.compressed_bytes();
            }
            PolicyChoice::Retain => block_bytes += op.mem_bytes,
        }
    }
    let (activation_bytes, total_bytes) = total_bytes(profile, block_bytes);
    Evaluation { cost_units, objective_ms, block_bytes, activation_bytes, total_bytes }
}

/// One step along an operator's lower convex hull of (memory, cost) points,
/// moving from its least-memory option towards cheaper, larger options.
#[derive(Debug, Clone, Copy)]
struct Segment {
    op: usize,
    mem: u64,
    saving: u64,
    efficiency: f64,
}

fn hull_segments(op: usize, options: &[Candidate]) -> (Candidate, Vec<Segment>) {
    let mut pts: Vec<Candidate> = options.to_vec();
    pts.sort_by_key(|c| (c.mem, c.cost));
    // drop dominated points: keep strictly decreasing cost with increasing memory
    let mut frontier: Vec<Candidate> = Vec::with_capacity(pts.len());
    for p in pts {
        if frontier.last().is_none_or(|last| p.cost < last.cost && p.mem > last.mem) {
            frontier.push(p);
        }
    }
    let mut hull: Vec<Candidate> = Vec::with_capacity(frontier.len());
    for p in frontier {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // keep b only if slope(a, b) < slope(b, p), i.e. b lies strictly below segment a-p
            let lhs = (a.cost - b.cost) as i128 * (p.mem - b.mem) as i128;
            let rhs = (b.cost - p.cost) as i128 * (b.mem - a.mem) as i128;
            if lhs > rhs {
                break;
            }
            hull.pop();
        }
        hull.push(p);
    }
    let segments = hull
        .windows(2)
        .map(|w| {
            let mem = w[1].mem - w[0].mem;
            let saving = w[0].cost - w[1].cost;
            Segment { op, mem, saving, efficiency: saving as f64 / mem as f64 }
        })
        .collect();
    (hull[0], segments)
}

struct Search<'a> {
    options: &'a [Vec<Candidate>],
    capacity: u64,
    suffix_min_mem: Vec<u64>,
    suffix_base_cost: Vec<u64>,
    segments: Vec<Segment>,
    current: Vec<usize>,
    best: Option<(u64, u64, Vec<usize>)>,
    nodes: u64,
}

impl<'a> Search<'a> {
    fn new(options: &'a [Vec<Candidate>], capacity: u64) -> Self {
        let n = options.len();
        let mut suffix_min_mem = vec![0u64; n + 1];
        let mut suffix_base_cost = vec![0u64; n + 1];
        let mut segments = Vec::new();
        for i in (0..n).rev() {
            let (start, segs) = hull_segments(i, &options[i]);
            suffix_min_mem[i] = suffix_min_mem[i + 1] + start.mem;
            suffix_base_cost[i] = suffix_base_cost[i + 1] + start.cost;
            segments.extend(segs);
        }
        segments.sort_by(|a, b| b.efficiency.total_cmp(&a.efficiency).then(a.op.cmp(&b.op)));
        Search {
            options,
            capacity,
            suffix_min_mem,
            suffix_base_cost,
            segments,
            current: vec![0; n],
            best: None,
            nodes: 0,
        }
    }

    /// LP relaxation of the remaining operators `depth..`, plus the cost so far.
    fn lower_bound(&self, depth: usize, used_mem: u64, used_cost: u64) -> f64 {
        let mut room = self.capacity - used_mem - self.suffix_min_mem[depth];
        let mut bound = (used_cost + self.suffix_base_cost[depth]) as f64;
        for seg in self.segments.iter().filter(|s| s.op >= depth) {
            if room == 0 {
                break;
            }
            if seg.mem <= room {
                room -= seg.mem;
                bound -= seg.saving as f64;
            } else {
                bound -= seg.saving as f64 * (room as f64 / seg.mem as f64);
                break;
            }
        }
        bound
    }

    fn dfs(&mut self, depth: usize, used_mem: u64, used_cost: u64) {
        self.nodes += 1;
        if used_mem + self.suffix_min_mem[depth] > self.capacity {
            return;
        }
        if depth == self.options.len() {
            let better = match &self.best {
                None => true,
                Some((cost, mem, _)) => (used_cost, used_mem) < (*cost, *mem),
            };
            if better {
                self.best = Some((used_cost, used_mem, self.current.clone()));
            }
            return;
        }
        if let Some((best_cost, best_mem, _)) = self.best {
            // costs are integral, so a half-unit margin absorbs float error in the bound
            let bound = self.lower_bound(depth, used_mem, used_cost);
            if bound > best_cost as f64 + 0.5 {
                return;
            }
            if bound > best_cost as f64 - 0.5 && used_mem + self.suffix_min_mem[depth] >= best_mem {
                return;
            }
        }
        for k in 0..self.options[depth].len() {
            let opt = self.options[depth][k];
            self.current[depth] = k;
            self.dfs(depth + 1, used_mem + opt.mem, used_cost + opt.cost);
        }
    }
}

fn plan_from_indices(
    profile: &ModelProfile,
    options: &[Vec<Candidate>],
    indices: &[usize],
    solver: SolverStats,
) -> Plan {
    let choices = indices.iter().zip(options).map(|(&k, opts)| opts[k].choice).collect();
    Plan { solver, ..Plan::from_choices(profile, choices) }
}

/// Optimal plan for one block under the profile's memory budget.
pub fn solve(profile: &ModelProfile) -> Result<Plan, PlanError> {
    let start = Instant::now();
    let infeasible =
        || PlanError::Infeasible { min_total_bytes: min_total_bytes(profile), budget_bytes: profile.mem_budget_bytes };
    let capacity = block_capacity(profile).ok_or_else(infeasible)?;
    let options = candidates(profile);
    let mut search = Search::new(&options, capacity);
    search.dfs(0, 0, 0);
    let (_, _, indices) = search.best.take().ok_or_else(infeasible)?;
    let stats = SolverStats { nodes: search.nodes, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
    Ok(plan_from_indices(profile, &options, &indices, stats))
}

/// Exhaustive enumeration of all assignments, in the same tie-break order as
/// [`solve`]. Only for small blocks.
pub fn brute_force(profile: &ModelProfile) -> Result<Plan, PlanError> {
    let n = profile.len();
    if n > BRUTE_FORCE_MAX_OPS {
        return Err(PlanError::TooLarge { n, max: BRUTE_FORCE_MAX_OPS });
    }
    let start = Instant::now();
    let infeasible =
        || PlanError::Infeasible { min_total_bytes: min_total_bytes(profile), budget_bytes: profile.mem_budget_bytes };
    let capacity = block_capacity(profile).ok_or_else(infeasible)?;
    let options = candidates(profile);

    let mut digits = vec![0usize; n];
    let mut best: Option<(u64, u64, Vec<usize>)> = None;
    let mut visited = 0u64;
    loop {
        visited += 1;
        let (cost, mem) =
            digits.iter().zip(&options).fold((0u64, 0u64), |(c, m), (&k, opts)| (c + opts[k].cost, m + opts[k].mem));
        if mem <= capacity && best.as_ref().is_none_or(|(bc, bm, _)| (cost, mem) < (*bc, *bm)) {
            best = Some((cost, mem, digits.clone()));
        }
        // odometer, last operator fastest
        let mut pos = n;
        loop {
            if pos == 0 {
                let (_, _, indices) = best.ok_or_else(infeasible)?;
                let stats = SolverStats { nodes: visited, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
                return Ok(plan_from_indices(profile, &options, &indices, stats));
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < options[pos].len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// A constraint or accounting identity a plan fails.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch {
        expected: usize,
        found: usize,
    },
    /// The first operator must be retained or compressed.
    CheckpointNotResident,
    MemoryBudgetExceeded {
        total_bytes: u64,
        budget_bytes: u64,
    },
    ActivationMismatch {
        reported: u64,
        actual: u64,
    },
    TotalMismatch {
        reported: u64,
        actual: u64,
    },
    ObjectiveMismatch {
        reported: f64,
        actual: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { expected, found } => {
                write!(f, "plan has {found} choices, profile has {expected} operators")
            }
            Violation::CheckpointNotResident => {
                write!(f, "checkpoint constraint: operator 1 must be retained or compressed")
            }
            Violation::MemoryBudgetExceeded { total_bytes, budget_bytes } => {
                write!(f, "memory budget constraint: total {total_bytes} bytes exceeds budget {budget_bytes} bytes")
            }
            Violation::ActivationMismatch { reported, actual } => {
                write!(f, "activation bytes: plan reports {reported}, profile gives {actual}")
            }
            Violation::TotalMismatch { reported, actual } => {
                write!(f, "total bytes: plan reports {reported}, profile gives {actual}")
            }
            Violation::ObjectiveMismatch { reported, actual } => {
                write!(f, "objective: plan reports {reported} ms, profile gives {actual} ms")
            }
        }
    }
}

/// Re-evaluates a plan against a profile from scratch.
pub fn verify(profile: &ModelProfile, plan: &Plan) -> Result<(), Violation> {
    if plan.choices.len() != profile.len() {
        return Err(Violation::LengthMismatch { expected: profile.len(), found: plan.choices.len() });
    }
    if plan.choices[0] == PolicyChoice::Recompute {
        return Err(Violation::CheckpointNotResident);
    }
    let eval = evaluate(profile, &plan.choices);
    if eval.total_bytes > profile.mem_budget_bytes {
        return Err(Violation::MemoryBudgetExceeded {
            total_bytes: eval.total_bytes,
            budget_bytes: profile.mem_budget_bytes,
        });
    }
    if plan.activation_bytes != eval.activation_bytes {
        return Err(Violation::ActivationMismatch { reported: plan.activation_bytes, actual: eval.activation_bytes });
    }
    if plan.total_bytes != eval.total_bytes {
        return Err(Violation::TotalMismatch { reported: plan.total_bytes, actual: eval.total_bytes });
    }
    let tolerance = 1e-9 * eval.objective_ms.abs().max(plan.objective_ms.abs());
    if (plan.objective_ms - eval.objective_ms).abs() > tolerance {
        return Err(Violation::ObjectiveMismatch { reported: plan.objective_ms, actual: eval.objective_ms });
    }
    Ok(())
}

/// Memory saved per millisecond by each technique, in bytes/ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub operator_id: u32,
    /// `None` when the recompute time is zero.
    pub recompute: Option<f64>,
    /// `None` when compression plus decompression time is zero.
    pub compress: Option<f64>,
    pub preferred: PolicyChoice,
}

pub fn bandwidths(profile: &ModelProfile) -> Vec<Bandwidth> {
    profile
        .operators
        .iter()
        .map(|op| {
            let recompute = (op.compute_time > 0.0).then(|| op.mem_bytes as f64 / op.compute_time);
            let saved = (op.mem_bytes - op.compressed_bytes()) as f64;
            let compress = (op.codec_time() > 0.0).then(|| saved / op.codec_time());
            let preferred = match (recompute, compress) {
                (Some(r), Some(c)) if c > r => PolicyChoice::Compress,
                (None, Some(_)) => PolicyChoice::Compress,
                _ => PolicyChoice::Recompute,
            };
            Bandwidth { operator_id: op.id, recompute, compress, preferred }
        })
        .collect()
}
