//! Point-wise assembly of the reduced camera system.
//!
//! Each 3D point contributes its own normal-equation fragment: the 3x3 point
//! block V, the camera-point blocks W, the camera contributions to U and the
//! right-hand sides. Eliminating the point turns the fragment into a sub
//! system over the clique of observing camera blocks, and the full reduced
//! system is the plain sum of those per-point sub systems. That additivity is
//! what lets the assembly run point by point on independent workers.

use crate::bsmc::{BsmcError, BsmcMatrix};
use crate::geometry::{self, GeometryError, JacobianPair};
use crate::pcg::{BlockJacobiPreconditioner, PcgError};
use crate::problem::{BaProblem, BlockModel};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Damping diagonals are clamped to this range before scaling by lambda.
pub const DAMPING_CLAMP: (f64, f64) = (1e-12, 1e12);

/// Point blocks with a worse 1-norm condition estimate are excluded.
pub const SINGULAR_POINT_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalEqError {
    #[error("point {point_id} has no usable observations")]
    EmptyPoint { point_id: usize },
    #[error("point {point_id} block is numerically singular (condition {condition:.3e})")]
    SingularPointBlock { point_id: usize, condition: f64 },
    #[error("every point of the set was excluded")]
    AllPointsExcluded,
    #[error(transparent)]
    Matrix(#[from] BsmcError),
    #[error(transparent)]
    Preconditioner(#[from] PcgError),
    #[error("camera step has length {got}, layout expects {want}")]
    StepDimensionMismatch { got: usize, want: usize },
}

/// Levenberg damping: lambda plus the effective squared diagonals.
///
/// Damping is applied per point so that assembly stays exactly additive over
/// any point partition: each point damps its own V diagonal and its own share
/// of the U diagonals, both clamped to [`DAMPING_CLAMP`]. The vectors record
/// the totals for diagnostics; [`DampingState::new`] leaves them empty, which
/// changes nothing about assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingState {
    pub lambda: f64,
    pub d_squared_cam: Vec<DVector<f64>>,
    pub d_squared_pt: Vec<Vector3<f64>>,
}

impl DampingState {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda >= 0.0, "damping strength must be non-negative");
        DampingState {
            lambda,
            d_squared_cam: Vec::new(),
            d_squared_pt: Vec::new(),
        }
    }

    /// Prepass over all observations recording the effective damping
    /// diagonals at the current linearization point.
    pub fn compute(
        problem: &BaProblem,
        block_model: &BlockModel,
        lambda: f64,
    ) -> Result<Self, NormalEqError> {
        let mut state = DampingState::new(lambda);
        state.d_squared_cam = (0..block_model.n_blocks())
            .map(|b| DVector::zeros(block_model.layout().size(b)))
            .collect();
        state.d_squared_pt = vec![Vector3::zeros(); problem.n_points()];
        let obs_index = problem.observations_by_point();
        for (point_id, obs_ids) in obs_index.iter().enumerate() {
            if obs_ids.is_empty() {
                continue;
            }
            match build_point_system(problem, block_model, point_id, obs_ids, &state) {
                Ok(ps) => {
                    state.d_squared_pt[point_id] = ps.d_squared_pt;
                    for (block, d) in &ps.d_squared_cam {
                        state.d_squared_cam[*block] += d;
                    }
                }
                Err(NormalEqError::EmptyPoint { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(state)
    }
}

fn clamp_damping(x: f64) -> f64 {
    x.clamp(DAMPING_CLAMP.0, DAMPING_CLAMP.1)
}

/// Raw reprojection residual of one observation.
pub fn residual_only(problem: &BaProblem, obs_index: usize) -> Result<Vector2<f64>, GeometryError> {
    let obs = &problem.observations[obs_index];
    let predicted = geometry::project(
        &problem.poses[obs.camera_id],
        problem.intrinsics_of(obs.camera_id),
        problem.model,
        &problem.points[obs.point_id],
    )?;
    Ok(predicted - obs.pixel)
}

/// Robust cost of a squared residual norm: plain for `None`, Huber otherwise.
pub fn robust_rho(raw_sq: f64, huber_scale: Option<f64>) -> f64 {
    match huber_scale {
        None => raw_sq,
        Some(delta) => {
            if raw_sq <= delta * delta {
                raw_sq
            } else {
                2.0 * delta * raw_sq.sqrt() - delta * delta
            }
        }
    }
}

/// Residual and Jacobians of one observation, reweighted by the problem's
/// Huber scale when one is set.
pub fn weighted_jacobian(
    problem: &BaProblem,
    obs_index: usize,
) -> Result<JacobianPair, GeometryError> {
    let obs = &problem.observations[obs_index];
    let mut pair = geometry::residual_and_jacobian(
        &problem.poses[obs.camera_id],
        problem.intrinsics_of(obs.camera_id),
        problem.model,
        &problem.points[obs.point_id],
        &obs.pixel,
    )?;
    if let Some(delta) = problem.huber_scale {
        let s = pair.residual.norm();
        if s > delta {
            let w = (delta / s).sqrt();
            pair.residual *= w;
            pair.j_cam *= w;
            pair.j_pt *= w;
        }
    }
    Ok(pair)
}

/// Normal-equation fragment of one 3D point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSystem {
    pub point_id: usize,
    /// V with the point damping applied.
    pub v_block: Matrix3<f64>,
    /// W per observing camera block, keyed and sorted by block id.
    pub w_blocks: Vec<(usize, DMatrix<f64>)>,
    /// Camera Hessian contributions per block pair (i <= j), damped on (i, i).
    pub u_contribs: Vec<((usize, usize), DMatrix<f64>)>,
    pub l_p: Vector3<f64>,
    pub l_c_contribs: Vec<(usize, DVector<f64>)>,
    pub skipped_observations: usize,
    /// Clamped damping shares this point applied, for the record.
    pub d_squared_pt: Vector3<f64>,
    pub d_squared_cam: Vec<(usize, DVector<f64>)>,
}

impl PointSystem {
    /// Sorted ids of the camera blocks this point touches.
    pub fn involved_blocks(&self) -> Vec<usize> {
        self.w_blocks.iter().map(|(b, _)| *b).collect()
    }
}

fn sorted_insert_mat(
    entries: &mut Vec<(usize, DMatrix<f64>)>,
    key: usize,
    rows: usize,
    cols: usize,
) -> usize {
    match entries.binary_search_by_key(&key, |(k, _)| *k) {
        Ok(i) => i,
        Err(i) => {
            entries.insert(i, (key, DMatrix::zeros(rows, cols)));
            i
        }
    }
}

/// Accumulate the Gauss-Newton fragment of `point_id` over exactly its
/// observations, then damp the V and U diagonals.
///
/// Observations with a degenerate projection are skipped and counted;
/// [`NormalEqError::EmptyPoint`] is returned when none survive.
pub fn build_point_system(
    problem: &BaProblem,
    block_model: &BlockModel,
    point_id: usize,
    obs_indices: &[usize],
    damping: &DampingState,
) -> Result<PointSystem, NormalEqError> {
    let mut v = Matrix3::zeros();
    let mut l_p = Vector3::zeros();
    let mut w_blocks: Vec<(usize, DMatrix<f64>)> = Vec::new();
    let mut l_c: Vec<(usize, DVector<f64>)> = Vec::new();
    let mut u: Vec<((usize, usize), DMatrix<f64>)> = Vec::new();
    let mut skipped = 0usize;
    let mut used = 0usize;

    for &oi in obs_indices {
        let obs = &problem.observations[oi];
        debug_assert_eq!(obs.point_id, point_id);
        let pair = match weighted_jacobian(problem, oi) {
            Ok(p) => p,
            Err(GeometryError::DegenerateProjection { .. }) => {
                skipped += 1;
                continue;
            }
        };
        used += 1;
        v += pair.j_pt.transpose() * pair.j_pt;
        l_p -= pair.j_pt.transpose() * pair.residual;

        let spans = block_model.spans_for_camera(obs.camera_id);
        for (ai, span_a) in spans.iter().enumerate() {
            let ja = pair.j_cam.columns(span_a.cols.0, span_a.cols.1 - span_a.cols.0);
            let rows = ja.ncols();
            let wi = sorted_insert_mat(&mut w_blocks, span_a.block_id, rows, 3);
            w_blocks[wi].1 += ja.transpose() * pair.j_pt;
            let li = match l_c.binary_search_by_key(&span_a.block_id, |(k, _)| *k) {
                Ok(i) => i,
                Err(i) => {
                    l_c.insert(i, (span_a.block_id, DVector::zeros(rows)));
                    i
                }
            };
            l_c[li].1 -= ja.transpose() * pair.residual;

            for span_b in &spans[ai..] {
                let jb = pair.j_cam.columns(span_b.cols.0, span_b.cols.1 - span_b.cols.0);
                let key = (span_a.block_id, span_b.block_id);
                let ui = match u.binary_search_by_key(&key, |(k, _)| *k) {
                    Ok(i) => i,
                    Err(i) => {
                        u.insert(i, (key, DMatrix::zeros(rows, jb.ncols())));
                        i
                    }
                };
                u[ui].1 += ja.transpose() * jb;
            }
        }
    }

    if used == 0 {
        return Err(NormalEqError::EmptyPoint { point_id });
    }

    // Marquardt scaling from the point's own Gauss-Newton diagonals.
    let lambda = damping.lambda;
    let d_pt = Vector3::from_fn(|i, _| clamp_damping(v[(i, i)]));
    for i in 0..3 {
        v[(i, i)] += lambda * d_pt[i];
    }
    let mut d_cam = Vec::new();
    for ((a, b), m) in u.iter_mut() {
        if a == b {
            let d = DVector::from_fn(m.nrows(), |i, _| clamp_damping(m[(i, i)]));
            for i in 0..m.nrows() {
                m[(i, i)] += lambda * d[i];
            }
            d_cam.push((*a, d));
        }
    }

    Ok(PointSystem {
        point_id,
        v_block: v,
        w_blocks,
        u_contribs: u,
        l_p,
        l_c_contribs: l_c,
        skipped_observations: skipped,
        d_squared_pt: d_pt,
        d_squared_cam: d_cam,
    })
}

/// Inverse of a damped point block with a cheap 1-norm condition estimate.
fn invert_point_block(
    v: &Matrix3<f64>,
    point_id: usize,
) -> Result<Matrix3<f64>, NormalEqError> {
    let norm1 = |m: &Matrix3<f64>| {
        (0..3)
            .map(|c| (0..3).map(|r| m[(r, c)].abs()).sum::<f64>())
            .fold(0.0f64, f64::max)
    };
    let inv = v.try_inverse().ok_or(NormalEqError::SingularPointBlock {
        point_id,
        condition: f64::INFINITY,
    })?;
    let condition = norm1(v) * norm1(&inv);
    if !condition.is_finite() || condition > SINGULAR_POINT_CONDITION {
        return Err(NormalEqError::SingularPointBlock {
            point_id,
            condition,
        });
    }
    Ok(inv)
}

/// One point's contribution to the reduced system: the clique of its camera
/// blocks in the upper triangle, plus right-hand-side segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurContribution {
    pub point_id: usize,
    pub blocks: Vec<(usize, usize, DMatrix<f64>)>,
    pub rhs: Vec<(usize, DVector<f64>)>,
}

/// Eliminate the point from its fragment.
///
/// Emits `u(i, j) - W_i V^-1 W_j'` for every block pair i <= j over the
/// point's clique and `l_c(i) - W_i V^-1 l_p` per block.
pub fn schur_eliminate(ps: &PointSystem) -> Result<SchurContribution, NormalEqError> {
    let v_inv = invert_point_block(&ps.v_block, ps.point_id)?;
    let find_u = |key: (usize, usize)| -> Option<&DMatrix<f64>> {
        ps.u_contribs
            .binary_search_by_key(&key, |(k, _)| *k)
            .ok()
            .map(|i| &ps.u_contribs[i].1)
    };

    let mut blocks = Vec::with_capacity(ps.w_blocks.len() * (ps.w_blocks.len() + 1) / 2);
    for (ai, (block_a, w_a)) in ps.w_blocks.iter().enumerate() {
        let wa_vinv = w_a * v_inv;
        for (block_b, w_b) in &ps.w_blocks[ai..] {
            let mut contribution = -(&wa_vinv * w_b.transpose());
            if let Some(u) = find_u((*block_a, *block_b)) {
                contribution += u;
            }
            blocks.push((*block_a, *block_b, contribution));
        }
    }

    let mut rhs = Vec::with_capacity(ps.w_blocks.len());
    for ((block, w), (lb, l)) in ps.w_blocks.iter().zip(&ps.l_c_contribs) {
        debug_assert_eq!(block, lb);
        rhs.push((*block, l - w * (v_inv * ps.l_p)));
    }

    Ok(SchurContribution {
        point_id: ps.point_id,
        blocks,
        rhs,
    })
}

/// Upper-triangle off-diagonal occupancy implied by covisibility: one pair per
/// camera-block pair that shares a point. Diagonal blocks are implied.
pub fn covisibility_structure(
    problem: &BaProblem,
    block_model: &BlockModel,
    obs_index: &[Vec<usize>],
    point_ids: &[usize],
) -> Vec<(u32, u32)> {
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    let mut involved: Vec<usize> = Vec::new();
    for &point_id in point_ids {
        involved.clear();
        for &oi in &obs_index[point_id] {
            for span in block_model.spans_for_camera(problem.observations[oi].camera_id) {
                involved.push(span.block_id);
            }
        }
        involved.sort_unstable();
        involved.dedup();
        for (i, &a) in involved.iter().enumerate() {
            for &b in &involved[i + 1..] {
                pairs.push((a as u32, b as u32));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Assembly outcome bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FormReport {
    pub excluded_points: Vec<usize>,
    pub skipped_observations: usize,
}

/// Sum every point's eliminated contribution into `target`/`rhs`.
///
/// `target` must already carry the union structure of the cliques. Points
/// whose damped V block is singular are excluded and reported, not dropped
/// from the problem.
pub fn accumulate_rcs(
    problem: &BaProblem,
    block_model: &BlockModel,
    obs_index: &[Vec<usize>],
    point_ids: &[usize],
    damping: &DampingState,
    target: &mut BsmcMatrix,
    rhs: &mut DVector<f64>,
) -> Result<FormReport, NormalEqError> {
    let layout = block_model.layout();
    let mut report = FormReport::default();
    for &point_id in point_ids {
        let ps = match build_point_system(problem, block_model, point_id, &obs_index[point_id], damping)
        {
            Ok(ps) => ps,
            Err(NormalEqError::EmptyPoint { .. }) => {
                report.excluded_points.push(point_id);
                report.skipped_observations += obs_index[point_id].len();
                continue;
            }
            Err(e) => return Err(e),
        };
        report.skipped_observations += ps.skipped_observations;
        match schur_eliminate(&ps) {
            Ok(contribution) => {
                for (row, col, block) in &contribution.blocks {
                    target.add_to_block(*row, *col, block)?;
                }
                for (block, segment) in &contribution.rhs {
                    let off = layout.offset(*block);
                    let mut seg = rhs.rows_mut(off, segment.len());
                    seg += segment;
                }
            }
            Err(NormalEqError::SingularPointBlock { .. }) => {
                report.excluded_points.push(point_id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Raw reduced system over a point set: structure pass, then point-wise
/// accumulation. No preconditioner, no gauge handling.
pub fn form_rcs_raw(
    problem: &BaProblem,
    block_model: &BlockModel,
    obs_index: &[Vec<usize>],
    point_ids: &[usize],
    damping: &DampingState,
) -> Result<(BsmcMatrix, DVector<f64>, FormReport), NormalEqError> {
    let structure = covisibility_structure(problem, block_model, obs_index, point_ids);
    let mut target = BsmcMatrix::zeros_with_structure(block_model.layout().clone(), &structure)?;
    let mut rhs = DVector::zeros(block_model.dim());
    let report = accumulate_rcs(
        problem,
        block_model,
        obs_index,
        point_ids,
        damping,
        &mut target,
        &mut rhs,
    )?;
    if report.excluded_points.len() == point_ids.len() {
        return Err(NormalEqError::AllPointsExcluded);
    }
    Ok((target, rhs, report))
}

/// The reduced camera system, its right-hand side and the block-Jacobi
/// preconditioner built from the final diagonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct RcsSystem {
    pub r: BsmcMatrix,
    pub b: DVector<f64>,
    pub preconditioner: BlockJacobiPreconditioner,
}

impl RcsSystem {
    /// Finalize an assembled system. With `fix_first_block` the first camera
    /// block is pinned: its rows and columns are zeroed, its diagonal becomes
    /// identity and its right-hand side zero, so the solve returns a zero
    /// step for that block.
    pub fn assemble(
        mut r: BsmcMatrix,
        mut b: DVector<f64>,
        fix_first_block: bool,
    ) -> Result<Self, PcgError> {
        if fix_first_block {
            r.for_each_block_mut(|row, col, h, w, data| {
                if (row == 0) != (col == 0) {
                    data.fill(0.0);
                } else if row == 0 && col == 0 {
                    data.fill(0.0);
                    for i in 0..h.min(w) {
                        data[i * w + i] = 1.0;
                    }
                }
            });
            let width = r.layout().size(0);
            b.rows_mut(0, width).fill(0.0);
        }
        let preconditioner = BlockJacobiPreconditioner::build(&r)?;
        Ok(RcsSystem {
            r,
            b,
            preconditioner,
        })
    }
}

/// Serial reference formation of the reduced system over `point_ids`.
pub fn form_rcs(
    problem: &BaProblem,
    point_ids: &[usize],
    damping: &DampingState,
) -> Result<(RcsSystem, FormReport), NormalEqError> {
    let block_model = BlockModel::of(problem);
    let obs_index = problem.observations_by_point();
    let (r, b, report) = form_rcs_raw(problem, &block_model, &obs_index, point_ids, damping)?;
    Ok((RcsSystem::assemble(r, b, false)?, report))
}

/// Solve each point's 3x3 system for its step given the camera step:
/// `V dx_p = l_p - W' dx_c`. Points run independently and in parallel;
/// excluded points simply yield no entry.
pub fn back_substitute_points(
    problem: &BaProblem,
    block_model: &BlockModel,
    obs_index: &[Vec<usize>],
    point_ids: &[usize],
    damping: &DampingState,
    delta_xc: &DVector<f64>,
) -> Result<Vec<(usize, Vector3<f64>)>, NormalEqError> {
    if delta_xc.len() != block_model.dim() {
        return Err(NormalEqError::StepDimensionMismatch {
            got: delta_xc.len(),
            want: block_model.dim(),
        });
    }
    use rayon::prelude::*;
    let layout = block_model.layout();
    let steps: Vec<Option<(usize, Vector3<f64>)>> = point_ids
        .par_iter()
        .map(|&point_id| {
            let ps = match build_point_system(
                problem,
                block_model,
                point_id,
                &obs_index[point_id],
                damping,
            ) {
                Ok(ps) => ps,
                Err(_) => return None,
            };
            let v_inv = match invert_point_block(&ps.v_block, point_id) {
                Ok(inv) => inv,
                Err(_) => return None,
            };
            let mut rhs = ps.l_p;
            for (block, w) in &ps.w_blocks {
                let off = layout.offset(*block);
                rhs -= w.transpose() * delta_xc.rows(off, w.nrows());
            }
            Some((point_id, v_inv * rhs))
        })
        .collect();
    Ok(steps.into_iter().flatten().collect())
}
