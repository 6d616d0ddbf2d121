//! Run reports: one line per iteration plus a machine-readable summary block.

use crate::lm::{LmTermination, LmTrace};
use crate::problem::BaProblem;
use std::io::Write;

/// Rough resident-size estimate of the problem data itself.
pub fn problem_bytes_estimate(problem: &BaProblem) -> u64 {
    let cams = problem.n_cameras() as u64 * (6 * 8 + 8);
    let intrinsics = problem.intrinsics.len() as u64 * (5 * 8);
    let points = problem.n_points() as u64 * (3 * 8);
    let observations = problem.n_observations() as u64 * (2 * 8 + 2 * 8);
    cams + intrinsics + points + observations
}

fn termination_name(t: LmTermination) -> &'static str {
    match t {
        LmTermination::FunctionTolerance => "function_tolerance",
        LmTermination::StepTolerance => "step_tolerance",
        LmTermination::MaxIterations => "max_iterations",
        LmTermination::RejectionLimit => "rejection_limit",
    }
}

/// Write the iteration trace and summary. Extra key-value pairs land at the
/// end of the summary block.
pub fn write_report(
    w: &mut impl Write,
    trace: &LmTrace,
    problem: &BaProblem,
    extra: &[(String, String)],
) -> std::io::Result<()> {
    writeln!(
        w,
        "# iter  cost  rms_px  lambda  pcg_iters  accepted  seconds"
    )?;
    for r in &trace.iterations {
        writeln!(
            w,
            "{} {:.6e} {:.6} {:.3e} {} {} {:.3}",
            r.index,
            r.trial_cost,
            r.trial_rms_px,
            r.lambda,
            r.pcg_iterations,
            u8::from(r.accepted),
            r.t_form_s + r.t_solve_s + r.t_trial_s
        )?;
    }
    let peak_rcs = trace.iterations.iter().map(|r| r.rcs_bytes).max().unwrap_or(0);
    let (mut t_form, mut t_solve, mut t_trial) = (0.0, 0.0, 0.0);
    for r in &trace.iterations {
        t_form += r.t_form_s;
        t_solve += r.t_solve_s;
        t_trial += r.t_trial_s;
    }
    writeln!(w, "# summary")?;
    writeln!(w, "iterations={}", trace.iterations.len())?;
    writeln!(w, "accepted={}", trace.accepted_costs().len())?;
    writeln!(w, "termination={}", termination_name(trace.termination))?;
    writeln!(w, "initial_cost={:e}", trace.initial_cost)?;
    writeln!(w, "final_cost={:e}", trace.final_cost)?;
    writeln!(w, "initial_rms_px={}", trace.initial_rms_px)?;
    writeln!(w, "final_rms_px={}", trace.final_rms_px)?;
    writeln!(
        w,
        "peak_memory_estimate_bytes={}",
        peak_rcs + problem_bytes_estimate(problem)
    )?;
    writeln!(w, "t_form_s={t_form:.3}")?;
    writeln!(w, "t_solve_s={t_solve:.3}")?;
    writeln!(w, "t_trial_s={t_trial:.3}")?;
    let t = &trace.transfer;
    writeln!(w, "bytes_tie_points={}", t.tie_point_bytes)?;
    writeln!(w, "bytes_poses={}", t.pose_bytes)?;
    writeln!(w, "bytes_sub_rcs={}", t.sub_rcs_bytes)?;
    writeln!(w, "bytes_delta={}", t.delta_bytes)?;
    writeln!(w, "bytes_cost_reports={}", t.cost_bytes)?;
    writeln!(w, "bytes_final_points={}", t.final_point_bytes)?;
    for (k, v) in extra {
        writeln!(w, "{k}={v}")?;
    }
    Ok(())
}
