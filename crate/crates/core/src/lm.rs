//! The outer Levenberg-Marquardt loop.
//!
//! Per iteration: form the reduced camera system through an execution
//! backend, solve it with PCG, back-substitute the point steps, evaluate the
//! trial cost, and accept or reject with a multiplicative damping schedule.
//! The driver runs single-threaded control; backends own the tie points and
//! all parallelism.

use crate::normal_eq::{self, RcsSystem};
use crate::pcg::{self, PcgConfig, PcgError};
use crate::problem::{BaProblem, BlockModel};
use nalgebra::{DVector, Point3};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("no observation projected successfully")]
    AllPointsDegenerate,
    #[error("backend failure: {0}")]
    Backend(#[from] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Pcg(#[from] PcgError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iterations: usize,
    /// Relative cost-change threshold on accepted steps.
    pub function_tolerance: f64,
    pub max_consecutive_rejections: usize,
    pub pcg: PcgConfig,
    /// Pin the first camera block to remove the gauge freedom in tests.
    pub fix_first_camera: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iterations: 50,
            function_tolerance: 1e-6,
            max_consecutive_rejections: 8,
            pcg: PcgConfig::default(),
            fix_first_camera: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmTermination {
    FunctionTolerance,
    /// The solved step had (numerically) zero length; nothing can move.
    StepTolerance,
    MaxIterations,
    RejectionLimit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub index: usize,
    pub cost_before: f64,
    pub trial_cost: f64,
    pub trial_rms_px: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub pcg_iterations: usize,
    pub pcg_relative_residual: f64,
    pub accepted: bool,
    pub excluded_points: usize,
    pub degenerate_observations: usize,
    /// Stored byte footprint of the reduced matrix this iteration.
    pub rcs_bytes: u64,
    pub t_form_s: f64,
    pub t_solve_s: f64,
    pub t_trial_s: f64,
}

/// Per-message-class transfer accounting, filled by distributed backends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub tie_point_frames: u64,
    pub tie_point_bytes: u64,
    pub pose_frames: u64,
    pub pose_bytes: u64,
    pub sub_rcs_frames: u64,
    pub sub_rcs_bytes: u64,
    pub delta_frames: u64,
    pub delta_bytes: u64,
    pub cost_frames: u64,
    pub cost_bytes: u64,
    pub control_frames: u64,
    pub control_bytes: u64,
    pub final_point_frames: u64,
    pub final_point_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct LmTrace {
    pub iterations: Vec<IterationRecord>,
    pub termination: LmTermination,
    pub initial_cost: f64,
    pub initial_rms_px: f64,
    pub final_cost: f64,
    pub final_rms_px: f64,
    pub transfer: TransferStats,
}

impl LmTrace {
    pub fn accepted_costs(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.trial_cost)
            .collect()
    }
}

/// What the backend should do with the point steps buffered by the previous
/// trial before forming the next system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialDisposition {
    None,
    Commit,
    Discard,
}

#[derive(Debug)]
pub struct FormOutput {
    pub system: RcsSystem,
    /// Robust cost at the formation state: 0.5 * sum of rho.
    pub cost: f64,
    /// Raw squared pixel residual sum, for rms reporting.
    pub sq_px_sum: f64,
    pub valid_observations: usize,
    pub degenerate_observations: usize,
    pub excluded_points: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TrialOutput {
    pub cost: f64,
    pub sq_px_sum: f64,
    pub valid_observations: usize,
    pub degenerate_observations: usize,
    /// Squared norm of the buffered point steps.
    pub point_step_sq: f64,
}

#[derive(Debug, Clone)]
pub struct FinishOutput {
    pub points: Vec<(usize, Point3<f64>)>,
    pub transfer: TransferStats,
}

pub type BackendResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

/// Execution backend owning the tie points for the duration of a solve.
///
/// `form` evaluates the cost at the given camera state and assembles the
/// reduced system; `trial` back-substitutes the point steps for a camera step
/// and reports the trial cost without committing anything; `finish` resolves
/// the last trial and hands the final point positions back.
pub trait ExecutionBackend {
    fn form(
        &mut self,
        cams: &DVector<f64>,
        lambda: f64,
        prior: TrialDisposition,
    ) -> BackendResult<FormOutput>;

    fn trial(&mut self, delta_xc: &DVector<f64>) -> BackendResult<TrialOutput>;

    fn finish(&mut self, last: TrialDisposition) -> BackendResult<FinishOutput>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostStats {
    /// 0.5 * sum of rho over valid observations.
    pub cost: f64,
    /// Raw squared pixel residual sum over valid observations.
    pub sq_px_sum: f64,
    pub valid: usize,
    pub degenerate: usize,
}

impl CostStats {
    pub fn rms_px(&self) -> f64 {
        if self.valid == 0 {
            0.0
        } else {
            (self.sq_px_sum / self.valid as f64).sqrt()
        }
    }
}

/// Evaluate the whole problem at its current state.
pub fn cost_stats(problem: &BaProblem) -> CostStats {
    let mut stats = CostStats {
        cost: 0.0,
        sq_px_sum: 0.0,
        valid: 0,
        degenerate: 0,
    };
    for oi in 0..problem.n_observations() {
        match normal_eq::residual_only(problem, oi) {
            Ok(residual) => {
                let raw_sq = residual.norm_squared();
                stats.cost += 0.5 * normal_eq::robust_rho(raw_sq, problem.huber_scale);
                stats.sq_px_sum += raw_sq;
                stats.valid += 1;
            }
            Err(_) => stats.degenerate += 1,
        }
    }
    stats
}

/// Half the sum of squared reprojection errors (robustified when configured).
pub fn total_cost(problem: &BaProblem) -> f64 {
    cost_stats(problem).cost
}

/// Root-mean-square reprojection error in pixels.
pub fn rms_pixels(problem: &BaProblem) -> f64 {
    cost_stats(problem).rms_px()
}

/// Accept a trial step exactly when its cost is finite and strictly lower.
pub fn step_quality_guard(prev_cost: f64, trial_cost: f64) -> bool {
    trial_cost.is_finite() && trial_cost < prev_cost
}

/// Run the damped Gauss-Newton loop to convergence.
///
/// On return the problem holds the best accepted state. `NoProgress`
/// situations (rejection limit) are a normal termination, not an error.
pub fn lm_solve(
    problem: &mut BaProblem,
    config: &LmConfig,
    backend: &mut dyn ExecutionBackend,
) -> Result<LmTrace, LmError> {
    let block_model = BlockModel::of(problem);
    let mut cams = block_model.pack(problem);
    let mut lambda = config.lambda_init.max(0.0);
    let mut prior = TrialDisposition::None;
    let mut rejections = 0usize;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut termination = LmTermination::MaxIterations;

    let mut current_cost = f64::INFINITY;
    let mut current_sq_px = 0.0f64;
    let mut current_valid = 0usize;
    let mut initial_cost = 0.0f64;
    let mut initial_rms = 0.0f64;
    let mut have_initial = false;

    for index in 0..config.max_iterations.max(1) {
        let t0 = Instant::now();
        let formed = backend.form(&cams, lambda, prior)?;
        let t_form_s = t0.elapsed().as_secs_f64();
        if formed.valid_observations == 0 {
            return Err(LmError::AllPointsDegenerate);
        }
        if !have_initial {
            have_initial = true;
            current_cost = formed.cost;
            current_sq_px = formed.sq_px_sum;
            current_valid = formed.valid_observations;
            initial_cost = formed.cost;
            initial_rms = rms_of(formed.sq_px_sum, formed.valid_observations);
        }

        let t1 = Instant::now();
        let (delta_xc, pcg_report) = pcg::solve(
            &formed.system.r,
            &formed.system.b,
            &formed.system.preconditioner,
            &config.pcg,
        )?;
        let t_solve_s = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let trial = backend.trial(&delta_xc)?;
        let t_trial_s = t2.elapsed().as_secs_f64();

        let accepted = step_quality_guard(current_cost, trial.cost);
        let step_norm = (delta_xc.norm_squared() + trial.point_step_sq).sqrt();
        records.push(IterationRecord {
            index,
            cost_before: current_cost,
            trial_cost: trial.cost,
            trial_rms_px: rms_of(trial.sq_px_sum, trial.valid_observations),
            lambda,
            step_norm,
            pcg_iterations: pcg_report.iterations,
            pcg_relative_residual: pcg_report.final_relative_residual,
            accepted,
            excluded_points: formed.excluded_points,
            degenerate_observations: formed.degenerate_observations,
            rcs_bytes: formed.system.r.audited_bytes(),
            t_form_s,
            t_solve_s,
            t_trial_s,
        });

        if accepted {
            let rel_change = (current_cost - trial.cost) / current_cost.abs().max(f64::MIN_POSITIVE);
            cams += &delta_xc;
            current_cost = trial.cost;
            current_sq_px = trial.sq_px_sum;
            current_valid = trial.valid_observations;
            lambda = (lambda / config.lambda_down).max(1e-14);
            rejections = 0;
            prior = TrialDisposition::Commit;
            if rel_change < config.function_tolerance {
                termination = LmTermination::FunctionTolerance;
                break;
            }
        } else {
            lambda *= config.lambda_up;
            rejections += 1;
            prior = TrialDisposition::Discard;
            if rejections >= config.max_consecutive_rejections {
                termination = LmTermination::RejectionLimit;
                break;
            }
        }

        if step_norm <= 1e-14 * (1.0 + cams.norm()) {
            termination = LmTermination::StepTolerance;
            break;
        }
    }

    let finish = backend.finish(prior)?;
    block_model.unpack_into(&cams, problem);
    for (pid, position) in finish.points {
        problem.points[pid] = position;
    }

    Ok(LmTrace {
        iterations: records,
        termination,
        initial_cost,
        initial_rms_px: initial_rms,
        final_cost: current_cost,
        final_rms_px: rms_of(current_sq_px, current_valid),
        transfer: finish.transfer,
    })
}

fn rms_of(sq_sum: f64, valid: usize) -> f64 {
    if valid == 0 {
        0.0
    } else {
        (sq_sum / valid as f64).sqrt()
    }
}
