//! Shared oracles for the integration and acceptance suites. Everything here
//! goes through dense linear algebra, independent of the block-sparse
//! assembly and iterative solve paths it is used to check.
#![allow(dead_code)] // each test target compiles its own slice of this module

use dba_core::geometry::{
    self, CameraIntrinsics, CameraModel, CameraPose, Observation,
};
use dba_core::lm::LmConfig;
use dba_core::problem::{BaProblem, BlockModel};
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2xX, Matrix3, Point3, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::Rng;

pub const DAMP_MIN: f64 = 1e-12;
pub const DAMP_MAX: f64 = 1e12;

/// Random well-posed problem: cameras above a point cloud looking down -z,
/// every point observed by at least `min_views` cameras.
pub fn random_problem(
    rng: &mut StdRng,
    n_cams: usize,
    n_pts: usize,
    min_views: usize,
) -> BaProblem {
    let poses: Vec<CameraPose> = (0..n_cams)
        .map(|_| CameraPose {
            rotation: Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
            translation: Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-6.0..-4.0),
            ),
        })
        .collect();
    let intrinsics: Vec<CameraIntrinsics> = (0..n_cams)
        .map(|_| CameraIntrinsics {
            focal: rng.random_range(400.0..1200.0),
            k1: rng.random_range(-1e-3..1e-3),
            k2: rng.random_range(-1e-5..1e-5),
            cx: 0.0,
            cy: 0.0,
        })
        .collect();
    let points: Vec<Point3<f64>> = (0..n_pts)
        .map(|_| {
            Point3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut observations = Vec::new();
    for (pid, point) in points.iter().enumerate() {
        let mut cams: Vec<usize> = (0..n_cams).collect();
        for i in (1..cams.len()).rev() {
            cams.swap(i, rng.random_range(0..=i));
        }
        let views = rng.random_range(min_views..=n_cams.max(min_views)).min(n_cams);
        for &cam in cams.iter().take(views) {
            let predicted =
                geometry::project(&poses[cam], &intrinsics[cam], CameraModel::Bal9, point)
                    .expect("point in front of generated camera");
            observations.push(Observation {
                camera_id: cam,
                point_id: pid,
                pixel: predicted
                    + Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            });
        }
    }
    BaProblem::new(CameraModel::Bal9, poses, intrinsics, points, observations).unwrap()
}

/// Dense damped normal equations over the full unknown vector
/// [cameras, points], with the same per-point damping rule as the engine.
pub struct DenseSystem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub dim_c: usize,
}

pub fn dense_normal_equations(problem: &BaProblem, lambda: f64) -> DenseSystem {
    let bm = BlockModel::of(problem);
    let dim_c = bm.dim();
    let dim = dim_c + 3 * problem.n_points();
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    let clamp = |x: f64| x.clamp(DAMP_MIN, DAMP_MAX);

    let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); problem.n_points()];
    for (oi, obs) in problem.observations.iter().enumerate() {
        by_point[obs.point_id].push(oi);
    }

    for (pid, obs_ids) in by_point.iter().enumerate() {
        let po = dim_c + 3 * pid;
        let mut v_raw = Matrix3::zeros();
        let mut u_raw: Vec<(usize, DMatrix<f64>)> = Vec::new();
        for &oi in obs_ids {
            let obs = &problem.observations[oi];
            let pair = geometry::residual_and_jacobian(
                &problem.poses[obs.camera_id],
                problem.intrinsics_of(obs.camera_id),
                problem.model,
                &problem.points[obs.point_id],
                &obs.pixel,
            )
            .unwrap();
            v_raw += pair.j_pt.transpose() * pair.j_pt;
            for r in 0..3 {
                for c in 0..3 {
                    h[(po + r, po + c)] += (pair.j_pt.transpose() * pair.j_pt)[(r, c)];
                }
                g[po + r] -= (pair.j_pt.transpose() * pair.residual)[r];
            }
            for span in bm.spans_for_camera(obs.camera_id) {
                let width = span.cols.1 - span.cols.0;
                let ja = pair.j_cam.columns(span.cols.0, width);
                let co = bm.layout().offset(span.block_id);
                let w = ja.transpose() * pair.j_pt;
                let u = ja.transpose() * ja;
                let lc = ja.transpose() * pair.residual;
                for r in 0..width {
                    g[co + r] -= lc[r];
                    for c in 0..3 {
                        h[(co + r, po + c)] += w[(r, c)];
                        h[(po + c, co + r)] += w[(r, c)];
                    }
                    for c in 0..width {
                        h[(co + r, co + c)] += u[(r, c)];
                    }
                }
                match u_raw.binary_search_by_key(&span.block_id, |(k, _)| *k) {
                    Ok(i) => u_raw[i].1 += u.into_owned(),
                    Err(i) => u_raw.insert(i, (span.block_id, u.into_owned())),
                }
            }
            // Cross terms between the two spans of a shared-mode observation.
            let spans = bm.spans_for_camera(obs.camera_id);
            for a in 0..spans.len() {
                for b in (a + 1)..spans.len() {
                    let (sa, sb) = (spans[a], spans[b]);
                    let ja = pair.j_cam.columns(sa.cols.0, sa.cols.1 - sa.cols.0);
                    let jb = pair.j_cam.columns(sb.cols.0, sb.cols.1 - sb.cols.0);
                    let cross = ja.transpose() * jb;
                    let (ao, bo) = (bm.layout().offset(sa.block_id), bm.layout().offset(sb.block_id));
                    for r in 0..cross.nrows() {
                        for c in 0..cross.ncols() {
                            h[(ao + r, bo + c)] += cross[(r, c)];
                            h[(bo + c, ao + r)] += cross[(r, c)];
                        }
                    }
                }
            }
        }
        for i in 0..3 {
            h[(po + i, po + i)] += lambda * clamp(v_raw[(i, i)]);
        }
        for (block, u) in u_raw {
            let off = bm.layout().offset(block);
            for i in 0..u.nrows() {
                h[(off + i, off + i)] += lambda * clamp(u[(i, i)]);
            }
        }
    }
    DenseSystem { h, g, dim_c }
}

/// Dense Schur complement of the point unknowns.
pub fn dense_reduced_system(dense: &DenseSystem) -> (DMatrix<f64>, DVector<f64>) {
    let dim_c = dense.dim_c;
    let dim_p = dense.h.nrows() - dim_c;
    let h_cc = dense.h.view((0, 0), (dim_c, dim_c)).into_owned();
    let h_cp = dense.h.view((0, dim_c), (dim_c, dim_p)).into_owned();
    let h_pp = dense.h.view((dim_c, dim_c), (dim_p, dim_p)).into_owned();
    let g_c = dense.g.rows(0, dim_c).into_owned();
    let g_p = dense.g.rows(dim_c, dim_p).into_owned();
    let h_pp_inv = h_pp.try_inverse().expect("point block invertible");
    let r = &h_cc - &h_cp * &h_pp_inv * h_cp.transpose();
    let b = g_c - h_cp * (h_pp_inv * g_p);
    (r, b)
}

fn plain_cost(problem: &BaProblem) -> f64 {
    let mut cost = 0.0;
    for obs in &problem.observations {
        let predicted = geometry::project(
            &problem.poses[obs.camera_id],
            problem.intrinsics_of(obs.camera_id),
            problem.model,
            &problem.points[obs.point_id],
        )
        .expect("reference problems stay non-degenerate");
        cost += 0.5 * (predicted - obs.pixel).norm_squared();
    }
    cost
}

pub struct DenseLmOutcome {
    pub accepted_costs: Vec<f64>,
    pub final_rms_px: f64,
    pub iterations: usize,
}

/// Reference optimizer: the same damping schedule and acceptance rule, but
/// every step solves the full dense normal equations by Cholesky. No Schur
/// trick, no block compression, no iterative solve.
pub fn dense_lm_reference(problem: &mut BaProblem, config: &LmConfig) -> DenseLmOutcome {
    let bm = BlockModel::of(problem);
    let mut lambda = config.lambda_init;
    let mut prev = plain_cost(problem);
    let mut accepted_costs = Vec::new();
    let mut rejections = 0usize;
    let mut iterations = 0usize;

    for _ in 0..config.max_iterations {
        iterations += 1;
        let dense = dense_normal_equations(problem, lambda);
        let step = dense
            .h
            .clone()
            .cholesky()
            .map(|c| c.solve(&dense.g))
            .unwrap_or_else(|| dense.h.clone().lu().solve(&dense.g).expect("solvable"));

        let mut trial = problem.clone();
        let cams = bm.pack(problem) + step.rows(0, dense.dim_c).into_owned();
        bm.unpack_into(&cams, &mut trial);
        for pid in 0..trial.n_points() {
            for i in 0..3 {
                trial.points[pid].coords[i] += step[dense.dim_c + 3 * pid + i];
            }
        }
        let trial_cost = plain_cost(&trial);
        if trial_cost.is_finite() && trial_cost < prev {
            let rel = (prev - trial_cost) / prev.max(f64::MIN_POSITIVE);
            *problem = trial;
            prev = trial_cost;
            accepted_costs.push(trial_cost);
            lambda = (lambda / config.lambda_down).max(1e-14);
            rejections = 0;
            if rel < config.function_tolerance {
                break;
            }
        } else {
            lambda *= config.lambda_up;
            rejections += 1;
            if rejections >= config.max_consecutive_rejections {
                break;
            }
        }
    }
    let final_rms_px = (2.0 * prev / problem.n_observations() as f64).sqrt();
    DenseLmOutcome {
        accepted_costs,
        final_rms_px,
        iterations,
    }
}

/// Central finite differences of the reprojection residual.
pub fn fd_jacobians(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    model: CameraModel,
    point: &Point3<f64>,
    observed: &Vector2<f64>,
) -> (Matrix2xX<f64>, Matrix2x3<f64>) {
    let c = model.param_count();
    let pack = |pose: &CameraPose, intr: &CameraIntrinsics| {
        let mut v = vec![
            pose.rotation.x,
            pose.rotation.y,
            pose.rotation.z,
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
            intr.focal,
            intr.k1,
            intr.k2,
        ];
        if c == 11 {
            v.push(intr.cx);
            v.push(intr.cy);
        }
        v
    };
    let eval = |v: &[f64]| {
        let pose = CameraPose {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        };
        let intr = CameraIntrinsics {
            focal: v[6],
            k1: v[7],
            k2: v[8],
            cx: if v.len() == 11 { v[9] } else { 0.0 },
            cy: if v.len() == 11 { v[10] } else { 0.0 },
        };
        geometry::project(&pose, &intr, model, point).unwrap() - observed
    };

    let base = pack(pose, intr);
    let mut j_cam = Matrix2xX::zeros(c);
    for i in 0..c {
        let h = 1e-6 * base[i].abs().max(1.0);
        let (mut lo, mut hi) = (base.clone(), base.clone());
        lo[i] -= h;
        hi[i] += h;
        j_cam.set_column(i, &((eval(&hi) - eval(&lo)) / (2.0 * h)));
    }
    let mut j_pt = Matrix2x3::zeros();
    for i in 0..3 {
        let h = 1e-6 * point.coords[i].abs().max(1.0);
        let (mut lo, mut hi) = (*point, *point);
        lo.coords[i] -= h;
        hi.coords[i] += h;
        let d = (geometry::project(pose, intr, model, &hi).unwrap()
            - geometry::project(pose, intr, model, &lo).unwrap())
            / (2.0 * h);
        j_pt.set_column(i, &d);
    }
    (j_cam, j_pt)
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
