//! Adaptive policy evolution.
//!
//! Outlier statistics of some layers drift during training, which changes
//! their compression rates and therefore which plan is optimal. Tracking
//! iterations follow an exponential backoff (1, 2, 4, ... up to a maximum
//! interval, then every maximum interval). At each one the tracked
//! operators' rates are refreshed, the plan is re-solved, and the new plan is
//! adopted when it is strictly cheaper or the current one no longer fits.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use thiserror::Error;

use crate::planner::{evaluate, solve, Plan, PlanError, PolicyChoice};
use crate::profile::{LayerKind, ModelProfile};
use crate::simulator::{simulate_step, DriftTrace, SimConfig, SimError};

pub const DEFAULT_MAX_INTERVAL: u64 = 512;

/// Layers whose outliers are re-evaluated unless configured otherwise.
pub fn default_tracked_kinds() -> BTreeSet<LayerKind> {
    [LayerKind::Linear, LayerKind::LayerNorm, LayerKind::Gelu].into_iter().collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolutionError {
    #[error("iteration {iteration} requested after iteration {previous}")]
    OutOfOrderIteration { iteration: u64, previous: u64 },
    #[error("iterations are numbered from 1")]
    ZeroIteration,
    #[error("max interval must be a positive power of two, got {0}")]
    InvalidMaxInterval(u64),
    #[error("drift trace has no value for operator {operator_id} at iteration {iteration}")]
    MissingDrift { operator_id: u32, iteration: u64 },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Exponential-backoff tracking schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackingSchedule {
    next: u64,
    interval: u64,
    /// `None` stops tracking after iteration 1.
    max_interval: Option<u64>,
    previous: Option<u64>,
}

impl Default for TrackingSchedule {
    fn default() -> Self {
        TrackingSchedule::new(DEFAULT_MAX_INTERVAL).expect("default interval is a power of two")
    }
}

impl TrackingSchedule {
    pub fn new(max_interval: u64) -> Result<Self, EvolutionError> {
        if !max_interval.is_power_of_two() {
            return Err(EvolutionError::InvalidMaxInterval(max_interval));
        }
        Ok(TrackingSchedule { next: 1, interval: 1, max_interval: Some(max_interval), previous: None })
    }

    /// Tracks at iteration 1 only.
    pub fn disabled() -> Self {
        TrackingSchedule { next: 1, interval: 1, max_interval: None, previous: None }
    }

    pub fn next_tracking_iteration(&self) -> Option<u64> {
        (self.next != u64::MAX).then_some(self.next)
    }

    pub fn current_interval(&self) -> u64 {
        self.interval
    }

    pub fn max_interval(&self) -> Option<u64> {
        self.max_interval
    }

    fn advance_from(&mut self, tracked: u64) {
        match self.max_interval {
            Some(max) => {
                self.interval = tracked.min(max);
                self.next = tracked.saturating_add(self.interval);
            }
            None => self.next = u64::MAX,
        }
    }

    /// Whether `iteration` is a tracking iteration. Iterations must be
    /// strictly increasing across calls; skipped tracking iterations still
    /// advance the backoff.
    pub fn is_tracking_iteration(&mut self, iteration: u64) -> Result<bool, EvolutionError> {
        if iteration == 0 {
            return Err(EvolutionError::ZeroIteration);
        }
        if let Some(previous) = self.previous {
            if iteration <= previous {
                return Err(EvolutionError::OutOfOrderIteration { iteration, previous });
            }
        }
        self.previous = Some(iteration);
        while self.next < iteration {
            self.advance_from(self.next);
        }
        if self.next == iteration {
            self.advance_from(iteration);
            return Ok(true);
        }
        Ok(false)
    }

    /// Tracking iterations in `1..=up_to` for a fresh schedule.
    pub fn tracking_iterations(&self, up_to: u64) -> Vec<u64> {
        let mut fresh = TrackingSchedule { next: 1, interval: 1, previous: None, ..self.clone() };
        let mut out = Vec::new();
        while let Some(t) = fresh.next_tracking_iteration().filter(|&t| t <= up_to) {
            out.push(t);
            fresh.advance_from(t);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateChange {
    pub operator_id: u32,
    pub old: f64,
    pub new: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionEntry {
    pub iteration: u64,
    pub tracked: bool,
    pub resolved: bool,
    pub changed: bool,
    pub objective_ms_old: f64,
    pub objective_ms_new: f64,
    /// Time spent re-solving.
    pub wall_ms: f64,
    pub rate_changes: Vec<RateChange>,
    pub old_choices: Vec<PolicyChoice>,
    /// Present when the plan changed.
    pub new_choices: Option<Vec<PolicyChoice>>,
}

/// Holds the current plan and the planner's view of compression rates.
#[derive(Debug, Clone)]
pub struct PolicyEvolver {
    profile: ModelProfile,
    plan: Plan,
    schedule: TrackingSchedule,
    tracked_kinds: BTreeSet<LayerKind>,
}

impl PolicyEvolver {
    pub fn new(
        profile: ModelProfile,
        plan: Plan,
        schedule: TrackingSchedule,
        tracked_kinds: BTreeSet<LayerKind>,
    ) -> Self {
        PolicyEvolver { profile, plan, schedule, tracked_kinds }
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn profile(&self) -> &ModelProfile {
        &self.profile
    }

    pub fn schedule(&self) -> &TrackingSchedule {
        &self.schedule
    }

    /// Processes one iteration. On tracking iterations the tracked operators'
    /// rates are read from `drift`, the block is re-solved, and the new plan
    /// replaces the current one if it is strictly cheaper or the current one
    /// exceeds the budget under the refreshed rates.
    pub fn evolve_step(&mut self, drift: &DriftTrace, iteration: u64) -> Result<EvolutionEntry, EvolutionError> {
        let old_choices = self.plan.choices.clone();
        let objective_old = self.plan.objective_ms;
        if !self.schedule.is_tracking_iteration(iteration)? {
            return Ok(EvolutionEntry {
                iteration,
                tracked: false,
                resolved: false,
                changed: false,
                objective_ms_old: objective_old,
                objective_ms_new: objective_old,
                wall_ms: 0.0,
                rate_changes: Vec::new(),
                old_choices,
                new_choices: None,
            });
        }

        let mut rate_changes = Vec::new();
        for op in self.profile.operators.iter_mut().filter(|op| self.tracked_kinds.contains(&op.kind)) {
            let new = drift
                .rate_at(op.id, iteration)
                .ok_or(EvolutionError::MissingDrift { operator_id: op.id, iteration })?;
            if new != op.compression_rate {
                rate_changes.push(RateChange { operator_id: op.id, old: op.compression_rate, new });
                op.compression_rate = new;
            }
        }

        let start = Instant::now();
        let candidate = solve(&self.profile);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let candidate = candidate?;

        let current = evaluate(&self.profile, &old_choices);
        let fits = current.total_bytes <= self.profile.mem_budget_bytes;
        let cheaper = evaluate(&self.profile, &candidate.choices).cost_units < current.cost_units;
        let swap = (cheaper || !fits) && candidate.choices != old_choices;
        if swap {
            self.plan = candidate;
        } else {
            // rates moved, so refresh the memory accounting of the kept plan
            let solver = self.plan.solver;
            self.plan = Plan { solver, ..Plan::from_choices(&self.profile, old_choices.clone()) };
        }
        Ok(EvolutionEntry {
            iteration,
            tracked: true,
            resolved: true,
            changed: swap,
            objective_ms_old: objective_old,
            objective_ms_new: self.plan.objective_ms,
            wall_ms,
            rate_changes,
            old_choices,
            new_choices: swap.then(|| self.plan.choices.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionReport {
    pub log: Vec<EvolutionEntry>,
    pub initial_plan: Plan,
    pub final_plan: Plan,
    /// Mean samples/s of the evolving plan, re-solve time not charged.
    pub adaptive_mean_throughput: f64,
    /// As above with each re-solve's wall time added to its iteration.
    pub adaptive_charged_mean_throughput: f64,
    /// Mean samples/s of the initial plan kept for the whole run.
    pub static_mean_throughput: f64,
    /// Iterations whose plan exceeded the budget under the actual rates
    /// (counted as zero throughput).
    pub adaptive_oom_iterations: u64,
    pub static_oom_iterations: u64,
    pub adaptive_overhead_ms: f64,
    pub static_overhead_ms: f64,
    pub resolve_wall_ms: f64,
}

impl EvolutionReport {
    pub fn throughput_ratio(&self) -> f64 {
        self.adaptive_mean_throughput / self.static_mean_throughput
    }

    pub fn resolves(&self) -> usize {
        self.log.iter().filter(|e| e.resolved).count()
    }

    pub fn plan_changes(&self) -> usize {
        self.log.iter().filter(|e| e.changed).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "tracked",
            "resolved",
            "changed",
            "objective_ms_old",
            "objective_ms_new",
            "wall_ms",
        ])?;
        for e in &self.log {
            w.write_record([
                e.iteration.to_string(),
                e.tracked.to_string(),
                e.resolved.to_string(),
                e.changed.to_string(),
                e.objective_ms_old.to_string(),
                e.objective_ms_new.to_string(),
                e.wall_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The profile with every operator that has a drift series set to its
/// drifted rate at `iteration`.
pub fn profile_at(profile: &ModelProfile, drift: &DriftTrace, iteration: u64) -> ModelProfile {
    let mut actual = profile.clone();
    for op in &mut actual.operators {
        if let Some(rate) = drift.rate_at(op.id, iteration) {
            op.compression_rate = rate;
        }
    }
    actual
}

/// Runs `iterations` training iterations at the reference batch, comparing
/// an evolving plan with the initial plan held fixed. Both are simulated
/// against the drifted rates of every iteration.
pub fn run_evolution(
    profile: &ModelProfile,
    drift: &DriftTrace,
    iterations: u64,
    schedule: TrackingSchedule,
    tracked_kinds: BTreeSet<LayerKind>,
    config: &SimConfig,
) -> Result<EvolutionReport, EvolutionError> {
    let initial_plan = solve(profile)?;
    let batch = profile.reference_batch;
    let mut evolver = PolicyEvolver::new(profile.clone(), initial_plan.clone(), schedule, tracked_kinds);

    let mut log = Vec::with_capacity(iterations as usize);
    let (mut adaptive_sum, mut charged_sum, mut static_sum) = (0.0, 0.0, 0.0);
    let (mut adaptive_oom, mut static_oom) = (0u64, 0u64);
    let (mut adaptive_overhead, mut static_overhead, mut resolve_wall) = (0.0, 0.0, 0.0);

    let outcome = |choices: &[PolicyChoice], actual: &ModelProfile| match simulate_step(actual, choices, batch, config)
    {
        Ok(report) => Ok(Some(report)),
        Err(SimError::InfeasiblePlan { .. }) => Ok(None),
        Err(e) => Err(e),
    };

    for t in 1..=iterations {
        let entry = evolver.evolve_step(drift, t)?;
        let actual = profile_at(profile, drift, t);

        match outcome(&evolver.plan().choices, &actual)? {
            Some(r) => {
                adaptive_sum += r.throughput;
                charged_sum += batch as f64 / ((r.iteration_ms + entry.wall_ms) / 1000.0);
                adaptive_overhead += r.overhead_ms;
            }
            None => adaptive_oom += 1,
        }
        match outcome(&initial_plan.choices, &actual)? {
            Some(r) => {
                static_sum += r.throughput;
                static_overhead += r.overhead_ms;
            }
            None => static_oom += 1,
        }
        resolve_wall += entry.wall_ms;
        log.push(entry);
    }

    let n = iterations.max(1) as f64;
    Ok(EvolutionReport {
        log,
        final_plan: evolver.plan().clone(),
        initial_plan,
        adaptive_mean_throughput: adaptive_sum / n,
        adaptive_charged_mean_throughput: charged_sum / n,
        static_mean_throughput: static_sum / n,
        adaptive_oom_iterations: adaptive_oom,
        static_oom_iterations: static_oom,
        adaptive_overhead_ms: adaptive_overhead,
        static_overhead_ms: static_overhead,
        resolve_wall_ms: resolve_wall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::brute_force;
    use crate::profile::tests::MIB;
    use crate::profile::OperatorProfile;
    use crate::simulator::{generate_drift, DriftRegime, DriftSample};
    use crate::testutil::five_op;
    use PolicyChoice::*;

    fn schedule_hits(mut s: TrackingSchedule, up_to: u64) -> Vec<u64> {
        (1..=up_to).filter(|&t| s.is_tracking_iteration(t).unwrap()).collect()
    }

    #[test]
    fn doubling_phase() {
        assert_eq!(schedule_hits(TrackingSchedule::default(), 20), vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn capped_interval() {
        let s = TrackingSchedule::new(4).unwrap();
        assert_eq!(schedule_hits(s.clone(), 24), vec![1, 2, 4, 8, 12, 16, 20, 24]);
        assert_eq!(s.tracking_iterations(24), vec![1, 2, 4, 8, 12, 16, 20, 24]);
    }

    #[test]
    fn default_cap_continues_every_512() {
        let hits = schedule_hits(TrackingSchedule::default(), 3000);
        assert_eq!(hits, vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 1536, 2048, 2560]);
    }

    #[test]
    fn interval_doubles_then_caps() {
        let mut s = TrackingSchedule::new(8).unwrap();
        let mut intervals = Vec::new();
        for t in 1..=40 {
            if s.is_tracking_iteration(t).unwrap() {
                intervals.push(s.current_interval());
            }
        }
        assert_eq!(intervals, vec![1, 2, 4, 8, 8, 8, 8, 8]);
    }

    #[test]
    fn out_of_order_rejected() {
        let mut s = TrackingSchedule::default();
        s.is_tracking_iteration(5).unwrap();
        assert_eq!(s.is_tracking_iteration(3), Err(EvolutionError::OutOfOrderIteration { iteration: 3, previous: 5 }));
        assert_eq!(s.is_tracking_iteration(5), Err(EvolutionError::OutOfOrderIteration { iteration: 5, previous: 5 }));
        assert_eq!(TrackingSchedule::default().is_tracking_iteration(0), Err(EvolutionError::ZeroIteration));
    }

    #[test]
    fn skipped_iterations_keep_schedule() {
        let mut s = TrackingSchedule::default();
        let hits: Vec<u64> = [1, 3, 4, 7, 9, 16].into_iter().filter(|&t| s.is_tracking_iteration(t).unwrap()).collect();
        assert_eq!(hits, vec![1, 4, 16]);
    }

    #[test]
    fn max_interval_must_be_power_of_two() {
        assert_eq!(TrackingSchedule::new(3), Err(EvolutionError::InvalidMaxInterval(3)));
        assert_eq!(TrackingSchedule::new(0), Err(EvolutionError::InvalidMaxInterval(0)));
        assert!(TrackingSchedule::new(1).is_ok());
    }

    #[test]
    fn disabled_tracks_once() {
        assert_eq!(schedule_hits(TrackingSchedule::disabled(), 1000), vec![1]);
        assert_eq!(TrackingSchedule::disabled().tracking_iterations(1000), vec![1]);
    }

    /// Checkpoint plus two equally expensive tensors, one tracked (linear) and
    /// one untracked (qkv).
    fn pair_profile(tracked_rate: f64, budget: u64) -> ModelProfile {
        let op = |id, kind, rate| OperatorProfile {
            id,
            name: format!("op{id}"),
            kind,
            mem_bytes: 10 * MIB,
            compute_time: 0.5,
            compress_time: 0.1,
            decompress_time: 0.1,
            compression_rate: rate,
        };
        ModelProfile {
            n_layers: 1,
            static_mem_bytes: 0,
            mem_budget_bytes: budget,
            reference_batch: 8,
            base_step_time: 10.0,
            operators: vec![
                OperatorProfile { mem_bytes: MIB, compression_rate: 1.0, ..op(1, LayerKind::Other, 1.0) },
                op(2, LayerKind::Linear, tracked_rate),
                op(3, LayerKind::QkvMatrix, 0.3),
            ],
        }
    }

    fn step_trace(id: u32, points: &[(u64, f64)]) -> DriftTrace {
        DriftTrace::from_samples(points.iter().map(|&(iteration, compression_rate)| DriftSample {
            iteration,
            operator_id: id,
            outlier_count: 0,
            compression_rate,
        }))
        .unwrap()
    }

    #[test]
    fn flat_drift_never_replans() {
        let p = five_op(37 * MIB);
        let plan = solve(&p).unwrap();
        let ids: Vec<u32> =
            p.operators.iter().filter(|o| default_tracked_kinds().contains(&o.kind)).map(|o| o.id).collect();
        let drift = DriftTrace::constant(&ids, 0, p.operators[2].compression_rate).unwrap();
        let mut ev = PolicyEvolver::new(p, plan.clone(), TrackingSchedule::default(), default_tracked_kinds());
        for t in 1..=1000 {
            let e = ev.evolve_step(&drift, t).unwrap();
            assert!(!e.changed);
            assert!(e.rate_changes.is_empty());
        }
        assert_eq!(ev.plan().choices, plan.choices);
    }

    #[test]
    fn improving_rate_flips_to_compress() {
        // two compressed copies need 1 + 4 + 3 MiB; only 7.5 MiB available
        let p = pair_profile(0.4, 7 * MIB + MIB / 2);
        let before = solve(&p).unwrap();
        assert_eq!(before.choices, brute_force(&p).unwrap().choices);
        assert_eq!(before.choices, vec![Retain, Recompute, Compress]);

        let drift = step_trace(2, &[(1, 0.4), (3, 0.25)]);
        let mut ev = PolicyEvolver::new(p.clone(), before, TrackingSchedule::default(), default_tracked_kinds());
        assert!(!ev.evolve_step(&drift, 1).unwrap().changed);
        assert!(!ev.evolve_step(&drift, 2).unwrap().changed);
        // rate improved at 3, but only tracking iteration 4 sees it
        let e3 = ev.evolve_step(&drift, 3).unwrap();
        assert!(!e3.tracked && !e3.changed);
        let e4 = ev.evolve_step(&drift, 4).unwrap();
        assert!(e4.tracked && e4.changed);
        assert_eq!(e4.rate_changes, vec![RateChange { operator_id: 2, old: 0.4, new: 0.25 }]);
        let after = p.clone();
        let after = ModelProfile { operators: ev.profile().operators.clone(), ..after };
        assert_eq!(ev.plan().choices, brute_force(&after).unwrap().choices);
        assert_eq!(ev.plan().choices, vec![Retain, Compress, Compress]);
        assert!(e4.objective_ms_new < e4.objective_ms_old);
    }

    #[test]
    fn worsening_rate_forces_equal_cost_replan() {
        // one compressed copy fits; the tracked one is smaller so it wins the tie
        let p = pair_profile(0.25, 5 * MIB);
        let before = solve(&p).unwrap();
        assert_eq!(before.choices, vec![Retain, Compress, Recompute]);
        let drift = step_trace(2, &[(1, 0.25), (2, 0.5)]);
        let mut ev = PolicyEvolver::new(p, before.clone(), TrackingSchedule::default(), default_tracked_kinds());
        ev.evolve_step(&drift, 1).unwrap();
        let e = ev.evolve_step(&drift, 2).unwrap();
        assert!(e.changed);
        assert_eq!(e.objective_ms_new, e.objective_ms_old);
        assert_eq!(ev.plan().choices, vec![Retain, Recompute, Compress]);
    }

    #[test]
    fn missing_drift_is_an_error() {
        let p = pair_profile(0.25, 5 * MIB);
        let plan = solve(&p).unwrap();
        let mut ev = PolicyEvolver::new(p, plan, TrackingSchedule::default(), default_tracked_kinds());
        let drift = step_trace(2, &[(5, 0.3)]);
        assert_eq!(
            ev.evolve_step(&drift, 1).unwrap_err(),
            EvolutionError::MissingDrift { operator_id: 2, iteration: 1 }
        );
    }

    #[test]
    fn infeasible_after_drift_propagates() {
        let p = pair_profile(0.25, MIB);
        let plan = solve(&p).unwrap();
        let mut ev = PolicyEvolver::new(p, plan, TrackingSchedule::default(), default_tracked_kinds());
        let drift = step_trace(2, &[(1, 0.5)]);
        // the checkpoint alone uses the whole budget, so everything else is recomputed
        assert!(ev.evolve_step(&drift, 1).is_ok());
        let mut tight = pair_profile(0.25, MIB - 1);
        tight.operators.truncate(2);
        assert!(matches!(solve(&tight), Err(PlanError::Infeasible { .. })));
    }

    #[test]
    fn resolves_equal_tracking_iterations() {
        let p = five_op(37 * MIB);
        let drift = generate_drift(4, 300, 1024, &DriftRegime::default(), &[3, 4]).unwrap();
        let report =
            run_evolution(&p, &drift, 300, TrackingSchedule::default(), default_tracked_kinds(), &SimConfig::default())
                .unwrap();
        let tracked: Vec<u64> = report.log.iter().filter(|e| e.tracked).map(|e| e.iteration).collect();
        assert_eq!(tracked, vec![1, 2, 4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(report.resolves(), tracked.len());
        assert!(report.log.iter().filter(|e| e.changed).all(|e| e.tracked));
        assert_eq!(report.log.len(), 300);
    }

    #[test]
    fn disabled_tracking_matches_static_after_first_iteration() {
        let p = five_op(37 * MIB);
        let drift = generate_drift(4, 200, 1024, &DriftRegime::default(), &[3, 4]).unwrap();
        let report = run_evolution(
            &p,
            &drift,
            200,
            TrackingSchedule::disabled(),
            default_tracked_kinds(),
            &SimConfig::default(),
        )
        .unwrap();
        assert_eq!(report.resolves(), 1);
        assert!(report.log[1..].iter().all(|e| !e.changed && e.old_choices == report.final_plan.choices));
    }

    #[test]
    fn evolution_csv_columns() {
        let p = five_op(37 * MIB);
        let drift = generate_drift(4, 5, 1024, &DriftRegime::default(), &[3, 4]).unwrap();
        let report =
            run_evolution(&p, &drift, 5, TrackingSchedule::default(), default_tracked_kinds(), &SimConfig::default())
                .unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,tracked,resolved,changed,objective_ms_old,objective_ms_new,wall_ms");
        assert_eq!(lines.len(), 6);
        assert!(lines[3].starts_with("3,false,false,false,"));
        assert!(lines[3].ends_with(",0"));
    }
}
