//! Closed-loop Euler rollouts of a fused policy, evaluation metrics and
//! vector-field export.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demonstrations::stack;
use crate::error::{Error, Result};
use crate::fusion::{strategy_action, FusionParams, GoalSet, MixingCoefficients, Strategy};
use crate::kmp::KmpModel;
use crate::scalar::{all_finite, Scalar};

pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_SUCCESS_RADIUS: f64 = 0.01;
pub const DEFAULT_DT: f64 = 0.05;
/// A step longer than this many reference bounding-box diagonals counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ContextSchedule<T: Scalar> {
    None,
    Constant(DVector<T>),
    /// `(start_iteration, context)` sorted by start, first entry at 0.
    Piecewise(Vec<(usize, DVector<T>)>),
    /// Context supplied step by step by the caller (live sessions).
    External,
}

impl<T: Scalar> ContextSchedule<T> {
    pub fn validate(&self, context_dim: usize) -> Result<()> {
        let check = |c: &DVector<T>| {
            if c.len() != context_dim {
                Err(Error::DimensionMismatch(format!("context has dim {}, model expects {context_dim}", c.len())))
            } else if !all_finite(c) {
                Err(Error::Input("context is not finite".into()))
            } else {
                Ok(())
            }
        };
        match self {
            ContextSchedule::None if context_dim > 0 => {
                Err(Error::Config(format!("model needs a {context_dim}-dim context but the schedule has none")))
            }
            ContextSchedule::None | ContextSchedule::External => Ok(()),
            ContextSchedule::Constant(c) => check(c),
            ContextSchedule::Piecewise(entries) => {
                if entries.first().map(|e| e.0) != Some(0) {
                    return Err(Error::Config("piecewise schedule must start at iteration 0".into()));
                }
                if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::Config("piecewise schedule must be strictly increasing".into()));
                }
                entries.iter().try_for_each(|(_, c)| check(c))
            }
        }
    }

    /// Context in force at `iteration`; `None` for external schedules.
    pub fn at(&self, iteration: usize) -> Option<DVector<T>> {
        match self {
            ContextSchedule::None => Some(DVector::zeros(0)),
            ContextSchedule::Constant(c) => Some(c.clone()),
            ContextSchedule::Piecewise(entries) => {
                entries.iter().take_while(|(start, _)| *start <= iteration).last().map(|(_, c)| c.clone())
            }
            ContextSchedule::External => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig<T: Scalar> {
    pub x0: DVector<T>,
    pub schedule: ContextSchedule<T>,
    pub max_iters: usize,
    pub success_radius: T,
    pub dt: T,
    pub seed: u64,
}

impl<T: Scalar> RolloutConfig<T> {
    pub fn new(x0: DVector<T>, schedule: ContextSchedule<T>) -> Self {
        RolloutConfig {
            x0,
            schedule,
            max_iters: DEFAULT_MAX_ITERS,
            success_radius: T::of(DEFAULT_SUCCESS_RADIUS),
            dt: T::of(DEFAULT_DT),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.success_radius > T::zero()) {
            return Err(Error::Config("success_radius must be positive".into()));
        }
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !all_finite(&self.x0) {
            return Err(Error::Input("start position is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T: Scalar> {
    pub iteration: usize,
    /// Full input `[context, position]`.
    pub input: DVector<T>,
    pub action: DVector<T>,
    pub coefficients: MixingCoefficients<T>,
    pub epistemic: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    Running,
    Succeeded,
    Failed,
    Diverged,
    Cancelled,
}

impl RolloutStatus {
    pub fn is_terminal(self) -> bool {
        self != RolloutStatus::Running
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult<T: Scalar> {
    pub trace: Vec<TraceStep<T>>,
    pub status: RolloutStatus,
    pub success: bool,
    /// Step at which the goal was reached, or `max_iters` otherwise.
    pub iterations: usize,
    pub terminal_distance: T,
}

impl<T: Scalar> RolloutResult<T> {
    /// Positions visited, start included.
    pub fn positions(&self, context_dim: usize) -> Vec<DVector<T>> {
        self.trace.iter().map(|t| t.input.rows(context_dim, t.input.len() - context_dim).into_owned()).collect()
    }

    /// Turns a diverged rollout into an error, keeping other outcomes.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            RolloutStatus::Diverged => Err(Error::Diverged { iteration: self.trace.len().saturating_sub(1) }),
            _ => Ok(self),
        }
    }
}

/// Single-writer rollout state machine shared by offline rollouts and live sessions.
#[derive(Debug, Clone)]
pub struct RolloutStepper<T: Scalar> {
    x: DVector<T>,
    iteration: usize,
    max_iters: usize,
    success_radius: T,
    dt: T,
    strategy: Strategy,
    step_limit: T,
    status: RolloutStatus,
    terminal_distance: T,
}

impl<T: Scalar> RolloutStepper<T> {
    pub fn new(model: &KmpModel<T>, goals: &GoalSet<T>, config: &RolloutConfig<T>, strategy: Strategy) -> Result<Self> {
        config.validate()?;
        let p = model.output_dim();
        if config.x0.len() != p {
            return Err(Error::DimensionMismatch(format!("start has dim {}, positions have {p}", config.x0.len())));
        }
        if goals.context_dim + p != model.input_dim() {
            return Err(Error::DimensionMismatch("goal context dim does not match model".into()));
        }
        config.schedule.validate(goals.context_dim)?;
        let c = goals.context_dim;
        let positions = model.references().inputs.iter().map(|s| s.rows(c, p).into_owned());
        let diag = bounding_box(positions).map(|b| (&b.hi - &b.lo).norm()).unwrap_or(T::one());
        Ok(RolloutStepper {
            x: config.x0.clone(),
            iteration: 0,
            max_iters: config.max_iters,
            success_radius: config.success_radius,
            dt: config.dt,
            strategy,
            step_limit: diag.max(T::of(1e-12)) * T::of(DIVERGENCE_FACTOR),
            status: RolloutStatus::Running,
            terminal_distance: T::of(f64::INFINITY),
        })
    }

    pub fn status(&self) -> RolloutStatus {
        self.status
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn position(&self) -> &DVector<T> {
        &self.x
    }

    pub fn terminal_distance(&self) -> T {
        self.terminal_distance
    }

    pub fn cancel(&mut self) {
        if !self.status.is_terminal() {
            self.status = RolloutStatus::Cancelled;
        }
    }

    /// Evaluates the policy at the current state under `context`, records the
    /// step, then either terminates or advances one Euler step.
    pub fn step(
        &mut self,
        model: &KmpModel<T>,
        goals: &GoalSet<T>,
        params: &FusionParams<T>,
        context: &DVector<T>,
    ) -> Result<TraceStep<T>> {
        if self.status.is_terminal() {
            return Err(Error::Config("rollout already finished".into()));
        }
        if context.len() != goals.context_dim {
            return Err(Error::DimensionMismatch(format!(
                "context has dim {}, model expects {}",
                context.len(),
                goals.context_dim
            )));
        }
        let input = stack(context, &self.x);
        let action = strategy_action(model, &input, goals, params, self.strategy)?;
        let record = TraceStep {
            iteration: self.iteration,
            input,
            action: action.mean.clone(),
            coefficients: action.coefficients,
            epistemic: action.epistemic,
        };
        let goal = &goals.positions[action.coefficients.goal_index];
        self.terminal_distance = (&self.x - goal).norm();
        if self.terminal_distance < self.success_radius {
            self.status = RolloutStatus::Succeeded;
            return Ok(record);
        }
        let dx = &action.mean * self.dt;
        let step_len = dx.norm();
        let next = &self.x + dx;
        if !all_finite(&next) || !step_len.is_finite() || step_len > self.step_limit {
            self.status = RolloutStatus::Diverged;
            return Ok(record);
        }
        self.x = next;
        self.iteration += 1;
        if self.iteration >= self.max_iters {
            self.status = RolloutStatus::Failed;
            self.terminal_distance = (&self.x - goal).norm();
        }
        Ok(record)
    }

    /// Iteration count reported for a finished rollout.
    pub fn reported_iterations(&self) -> usize {
        match self.status {
            RolloutStatus::Succeeded => self.iteration,
            _ => self.max_iters,
        }
    }
}

/// Offline rollout driven by the config's context schedule.
pub fn rollout<T: Scalar>(
    model: &KmpModel<T>,
    goals: &GoalSet<T>,
    params: &FusionParams<T>,
    config: &RolloutConfig<T>,
    strategy: Strategy,
) -> Result<RolloutResult<T>> {
    if matches!(config.schedule, ContextSchedule::External) {
        return Err(Error::Config("offline rollouts need a scripted context schedule".into()));
    }
    params.validate()?;
    let mut stepper = RolloutStepper::new(model, goals, config, strategy)?;
    let mut trace = Vec::new();
    while !stepper.status().is_terminal() {
        let ctx = config.schedule.at(stepper.iteration()).expect("scripted schedules always yield a context");
        trace.push(stepper.step(model, goals, params, &ctx)?);
    }
    let status = stepper.status();
    Ok(RolloutResult {
        trace,
        status,
        success: status == RolloutStatus::Succeeded,
        iterations: stepper.reported_iterations(),
        terminal_distance: stepper.terminal_distance(),
    })
}

// ---------------------------------------------------------------------------
// Metrics

/// Root mean square of each visited position's distance to its nearest demonstrated position.
pub fn rms_to_demos<T: Scalar>(visited: &[DVector<T>], demo_positions: &[DVector<T>]) -> Result<T> {
    let (sum, count) = sum_sq_to_demos(visited, demo_positions)?;
    Ok((sum / T::of(count as f64)).sqrt())
}

fn sum_sq_to_demos<T: Scalar>(visited: &[DVector<T>], demo_positions: &[DVector<T>]) -> Result<(T, usize)> {
    if visited.is_empty() {
        return Err(Error::Data("trace is empty".into()));
    }
    if demo_positions.is_empty() {
        return Err(Error::Data("no demonstrated positions".into()));
    }
    let sum = visited.iter().fold(T::zero(), |acc, x| {
        acc + demo_positions
            .iter()
            .map(|d| (x - d).norm_squared())
            .fold(T::of(f64::INFINITY), |a, b| a.min(b))
    });
    Ok((sum, visited.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub trials: usize,
    pub successes: usize,
    pub success_pct: f64,
    pub avg_iterations: f64,
    pub rms: f64,
    pub visited: usize,
    #[serde(skip)]
    sum_iterations: f64,
    #[serde(skip)]
    sum_sq_distance: f64,
}

impl EvalReport {
    fn from_sums(strategy: &str, trials: usize, successes: usize, sum_iterations: f64, sum_sq: f64, visited: usize) -> Self {
        let t = trials.max(1) as f64;
        EvalReport {
            strategy: strategy.to_string(),
            trials,
            successes,
            success_pct: 100.0 * successes as f64 / t,
            avg_iterations: sum_iterations / t,
            rms: if visited > 0 { (sum_sq / visited as f64).sqrt() } else { 0.0 },
            visited,
            sum_iterations,
            sum_sq_distance: sum_sq,
        }
    }

    /// Merges reports of the same strategy as if all trials had been run together.
    pub fn pool(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| Error::Data("nothing to pool".into()))?;
        if reports.iter().any(|r| r.strategy != first.strategy) {
            return Err(Error::Data("cannot pool reports of different strategies".into()));
        }
        let (mut trials, mut successes, mut it, mut sq, mut visited) = (0, 0, 0.0, 0.0, 0);
        for r in reports {
            trials += r.trials;
            successes += r.successes;
            it += r.sum_iterations;
            sq += r.sum_sq_distance;
            visited += r.visited;
        }
        Ok(Self::from_sums(&first.strategy, trials, successes, it, sq, visited))
    }

    pub const CSV_HEADER: &'static str = "strategy,success_pct,avg_iterations,rms";

    pub fn csv_row(&self) -> String {
        format!("{},{:.2},{:.2},{:.4}", self.strategy, self.success_pct, self.avg_iterations, self.rms)
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// One evaluation trial: a start position and the context schedule to run under.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial<T: Scalar> {
    pub x0: DVector<T>,
    pub schedule: ContextSchedule<T>,
}

/// Runs every trial (in parallel) and aggregates in trial order.
/// `template` supplies everything but the start and the schedule.
pub fn evaluate_trials<T: Scalar>(
    model: &KmpModel<T>,
    goals: &GoalSet<T>,
    params: &FusionParams<T>,
    trials: &[Trial<T>],
    strategy: Strategy,
    template: &RolloutConfig<T>,
    demo_positions: &[DVector<T>],
) -> Result<EvalReport> {
    if trials.is_empty() {
        return Err(Error::Config("evaluation needs at least one start".into()));
    }
    let outcomes: Vec<Result<(bool, usize, T, usize)>> = trials
        .par_iter()
        .map(|trial| {
            let config = RolloutConfig { x0: trial.x0.clone(), schedule: trial.schedule.clone(), ..template.clone() };
            let r = rollout(model, goals, params, &config, strategy)?;
            let (sq, n) = sum_sq_to_demos(&r.positions(goals.context_dim), demo_positions)?;
            Ok((r.success, r.iterations, sq, n))
        })
        .collect();
    let (mut successes, mut it, mut sq, mut visited) = (0, 0.0, 0.0, 0);
    for o in outcomes {
        let (ok, iters, s, n) = o?;
        successes += ok as usize;
        it += iters as f64;
        sq += s.to_f64_lossy();
        visited += n;
    }
    Ok(EvalReport::from_sums(strategy.name(), trials.len(), successes, it, sq, visited))
}

pub fn evaluate<T: Scalar>(
    model: &KmpModel<T>,
    goals: &GoalSet<T>,
    params: &FusionParams<T>,
    starts: &[DVector<T>],
    schedule: &ContextSchedule<T>,
    strategy: Strategy,
    template: &RolloutConfig<T>,
    demo_positions: &[DVector<T>],
) -> Result<EvalReport> {
    let trials: Vec<Trial<T>> = starts.iter().map(|x0| Trial { x0: x0.clone(), schedule: schedule.clone() }).collect();
    evaluate_trials(model, goals, params, &trials, strategy, template, demo_positions)
}

// ---------------------------------------------------------------------------
// Start positions

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds<T: Scalar> {
    pub lo: DVector<T>,
    pub hi: DVector<T>,
}

impl<T: Scalar> Bounds<T> {
    /// Widens every side by `fraction` of the extent along that dimension.
    pub fn inflated(&self, fraction: T) -> Self {
        let pad = (&self.hi - &self.lo) * fraction;
        Bounds { lo: &self.lo - &pad, hi: &self.hi + pad }
    }
}

pub fn bounding_box<'a, T: Scalar>(points: impl IntoIterator<Item = DVector<T>>) -> Option<Bounds<T>> {
    let mut it = points.into_iter();
    let first = it.next()?;
    let mut b = Bounds { lo: first.clone(), hi: first };
    for p in it {
        b.lo = b.lo.inf(&p);
        b.hi = b.hi.sup(&p);
    }
    Some(b)
}

/// Demonstration bounding box inflated by 20% per side.
pub fn default_start_box<T: Scalar>(demo_positions: &[DVector<T>]) -> Result<Bounds<T>> {
    bounding_box(demo_positions.iter().cloned())
        .map(|b| b.inflated(T::of(0.2)))
        .ok_or_else(|| Error::Data("no demonstrated positions".into()))
}

pub fn random_starts<T: Scalar>(bounds: &Bounds<T>, n: usize, seed: u64) -> Result<Vec<DVector<T>>> {
    if n == 0 {
        return Err(Error::Config("need at least one start".into()));
    }
    if bounds.lo.len() != bounds.hi.len() || bounds.lo.is_empty() {
        return Err(Error::Config("start box bounds have mismatched dims".into()));
    }
    if bounds.lo.iter().zip(bounds.hi.iter()).any(|(l, h)| !(h > l) || !l.is_finite() || !h.is_finite()) {
        return Err(Error::Config("start box has a zero-width dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            DVector::from_fn(bounds.lo.len(), |i, _| {
                let u: f64 = rng.random();
                bounds.lo[i] + (bounds.hi[i] - bounds.lo[i]) * T::of(u)
            })
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Vector fields

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Config("grid must be at least 2x2".into()));
        }
        let ok = |a: f64, b: f64| a.is_finite() && b.is_finite() && b > a;
        if !ok(self.x_min, self.x_max) || !ok(self.y_min, self.y_max) {
            return Err(Error::Config("grid ranges must be finite with max > min".into()));
        }
        Ok(())
    }

    /// Grid covering `bounds` (2-D).
    pub fn covering<T: Scalar>(bounds: &Bounds<T>, nx: usize, ny: usize) -> Self {
        GridSpec {
            x_min: bounds.lo[0].to_f64_lossy(),
            x_max: bounds.hi[0].to_f64_lossy(),
            y_min: bounds.lo[1].to_f64_lossy(),
            y_max: bounds.hi[1].to_f64_lossy(),
            nx,
            ny,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub x: f64,
    pub y: f64,
    pub ux: f64,
    pub uy: f64,
    pub sigma_ep: f64,
}

/// Action and epistemic variance on a row-major lattice (`y` outer, `x` inner).
pub fn vector_field_grid<T: Scalar>(
    model: &KmpModel<T>,
    goals: &GoalSet<T>,
    params: &FusionParams<T>,
    grid: &GridSpec,
    context: &DVector<T>,
    strategy: Strategy,
) -> Result<Vec<FieldRecord>> {
    if model.output_dim() != 2 {
        return Err(Error::UnsupportedProjection(format!(
            "vector fields need 2-D positions, model has {}",
            model.output_dim()
        )));
    }
    grid.validate()?;
    if context.len() != goals.context_dim {
        return Err(Error::DimensionMismatch(format!(
            "context has dim {}, model expects {}",
            context.len(),
            goals.context_dim
        )));
    }
    let nodes: Vec<(f64, f64)> = (0..grid.ny)
        .flat_map(|r| {
            let y = grid.y_min + (grid.y_max - grid.y_min) * r as f64 / (grid.ny - 1) as f64;
            (0..grid.nx).map(move |c| (grid.x_min + (grid.x_max - grid.x_min) * c as f64 / (grid.nx - 1) as f64, y))
        })
        .collect();
    nodes
        .par_iter()
        .map(|&(x, y)| {
            let s = stack(context, &DVector::from_vec(vec![T::of(x), T::of(y)]));
            let a = strategy_action(model, &s, goals, params, strategy)?;
            Ok(FieldRecord {
                x,
                y,
                ux: a.mean[0].to_f64_lossy(),
                uy: a.mean[1].to_f64_lossy(),
                sigma_ep: a.epistemic.to_f64_lossy(),
            })
        })
        .collect()
}

pub fn field_to_csv(records: &[FieldRecord]) -> String {
    let mut out = String::from("x,y,ux,uy,sigma_ep\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.x, r.y, r.ux, r.uy, r.sigma_ep);
    }
    out
}
