//! End-to-end checks that cut across modules: dense-Hessian oracles at the
//! scale the unit tests cannot afford, gauge fixing, and robust reweighting.

mod common;

use common::{dense_normal_equations, dense_reduced_system, random_problem, rel_frobenius};
use dba_core::dist::solve_serial;
use dba_core::io::{synthesize, SyntheticSpec};
use dba_core::lm::{rms_pixels, LmConfig};
use dba_core::normal_eq::{form_rcs, DampingState};
use dba_core::problem::BlockModel;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[test]
fn formed_rcs_matches_dense_hessian_at_scale() {
    let mut rng = StdRng::seed_from_u64(11);
    let problem = random_problem(&mut rng, 20, 200, 3);
    let lambda = 1e-3;
    let point_ids: Vec<usize> = (0..problem.n_points()).collect();
    let (system, report) = form_rcs(&problem, &point_ids, &DampingState::new(lambda)).unwrap();
    assert!(report.excluded_points.is_empty());

    let dense = dense_normal_equations(&problem, lambda);
    let (r_dense, b_dense) = dense_reduced_system(&dense);
    let rel = rel_frobenius(&system.r.to_dense(), &r_dense);
    assert!(rel <= 1e-10, "reduced system off by {rel:e}");
    let rel_b = (&system.b - &b_dense).norm() / b_dense.norm();
    assert!(rel_b <= 1e-10, "right-hand side off by {rel_b:e}");
}

#[test]
fn gauge_fixed_runs_are_reproducible() {
    let mut rng = StdRng::seed_from_u64(12);
    let problem = random_problem(&mut rng, 8, 60, 3);
    let config = LmConfig {
        fix_first_camera: true,
        max_iterations: 8,
        ..Default::default()
    };
    let run = || {
        let mut p = problem.clone();
        let before = p.poses[0];
        let trace = solve_serial(&mut p, &config).unwrap();
        // The pinned block never moves.
        assert_eq!(p.poses[0], before);
        (trace.final_cost, p)
    };
    let (cost_a, problem_a) = run();
    let (cost_b, problem_b) = run();
    assert_eq!(cost_a, cost_b);
    assert_eq!(problem_a, problem_b);
}

#[test]
fn huber_downweights_outliers() {
    let spec = SyntheticSpec {
        n_images: 16,
        features_per_image: 60,
        noise_sigma_px: 0.5,
        seed: 21,
        ..Default::default()
    };
    let result = synthesize(&spec).unwrap();
    let truth = &result.ground_truth;

    // Corrupt a slice of observations with gross errors.
    let mut corrupted = result.problem.clone();
    let mut rng = StdRng::seed_from_u64(22);
    let n_outliers = corrupted.n_observations() / 20;
    for _ in 0..n_outliers {
        let oi = rng.random_range(0..corrupted.n_observations());
        corrupted.observations[oi].pixel.x += rng.random_range(40.0..80.0);
        corrupted.observations[oi].pixel.y -= rng.random_range(40.0..80.0);
    }

    let config = LmConfig {
        max_iterations: 20,
        ..Default::default()
    };
    let point_error = |p: &dba_core::problem::BaProblem| -> f64 {
        p.points
            .iter()
            .zip(&truth.points)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    };

    let mut plain = corrupted.clone();
    solve_serial(&mut plain, &config).unwrap();

    let mut robust = corrupted.clone();
    robust.huber_scale = Some(2.0);
    solve_serial(&mut robust, &config).unwrap();

    let e_plain = point_error(&plain);
    let e_robust = point_error(&robust);
    assert!(
        e_robust < e_plain,
        "robust point error {e_robust} not below plain {e_plain}"
    );
}

#[test]
fn well_conditioned_synthetic_recovers_noise_floor() {
    // Ground truth is recovered to at most 1.05x the injected noise in the
    // per-coordinate sense, i.e. 1.05 * sigma * sqrt(2) for the 2D norm rms.
    let spec = SyntheticSpec {
        n_images: 64,
        features_per_image: 120,
        noise_sigma_px: 1.0,
        forward_overlap: 0.85,
        side_overlap: 0.65,
        seed: 23,
        ..Default::default()
    };
    let result = synthesize(&spec).unwrap();
    let avg_views = result.problem.n_observations() as f64 / result.problem.n_points() as f64;
    assert!(avg_views >= 4.0, "spec not well conditioned: {avg_views:.1} views");
    let mut problem = result.problem.clone();
    let config = LmConfig {
        function_tolerance: 1e-5,
        max_iterations: 20,
        ..Default::default()
    };
    solve_serial(&mut problem, &config).unwrap();
    let rms = rms_pixels(&problem);
    let bound = 1.05 * spec.noise_sigma_px * 2.0f64.sqrt();
    assert!(rms <= bound, "rms {rms} above {bound}");
}

#[test]
fn perturbed_initialization_recovers() {
    let spec = SyntheticSpec {
        n_images: 36,
        features_per_image: 80,
        noise_sigma_px: 1.0,
        seed: 24,
        ..Default::default()
    };
    let result = synthesize(&spec).unwrap();
    let mut problem = result.problem.clone();
    let mut rng = StdRng::seed_from_u64(25);
    for pose in &mut problem.poses {
        for i in 0..3 {
            pose.rotation[i] += rng.random_range(-5e-3..5e-3);
            pose.translation[i] += rng.random_range(-0.1..0.1);
        }
    }
    for p in &mut problem.points {
        for i in 0..3 {
            p.coords[i] += rng.random_range(-0.2..0.2);
        }
    }
    let init = rms_pixels(&problem);
    assert!(init > 3.0, "perturbation too small to be meaningful: {init}");
    let config = LmConfig {
        function_tolerance: 1e-5,
        max_iterations: 30,
        ..Default::default()
    };
    let trace = solve_serial(&mut problem, &config).unwrap();
    assert!(
        trace.final_rms_px < 1.45,
        "did not recover from perturbed start: rms {}",
        trace.final_rms_px
    );
    let bm = BlockModel::of(&problem);
    assert_eq!(bm.dim(), 9 * 36);
}

/// Shared-intrinsics problems: pose blocks per image plus one 5-wide
/// intrinsics block per camera group.
fn shared_intrinsics_problem(seed: u64) -> dba_core::problem::BaProblem {
    use dba_core::geometry::{self, CameraIntrinsics, CameraModel, CameraPose, Observation};
    use nalgebra::{Point3, Vector3};
    let mut rng = StdRng::seed_from_u64(seed);
    let n_cams = 6;
    let poses: Vec<CameraPose> = (0..n_cams)
        .map(|_| CameraPose {
            rotation: Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
            translation: Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-6.0..-4.0),
            ),
        })
        .collect();
    let intrinsics = vec![
        CameraIntrinsics {
            focal: 900.0,
            k1: 1e-4,
            k2: -1e-6,
            cx: 4.0,
            cy: -3.0,
        },
        CameraIntrinsics {
            focal: 1100.0,
            k1: -2e-4,
            k2: 1e-6,
            cx: -2.0,
            cy: 5.0,
        },
    ];
    let camera_group: Vec<usize> = (0..n_cams).map(|c| c % 2).collect();
    let points: Vec<Point3<f64>> = (0..50)
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
        for cam in 0..n_cams {
            if rng.random_bool(0.6) || observations.iter().filter(|o: &&Observation| o.point_id == pid).count() < 2 {
                let predicted = geometry::project(
                    &poses[cam],
                    &intrinsics[camera_group[cam]],
                    CameraModel::Full11,
                    point,
                )
                .unwrap();
                observations.push(Observation {
                    camera_id: cam,
                    point_id: pid,
                    pixel: predicted
                        + nalgebra::Vector2::new(
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                        ),
                });
            }
        }
    }
    let problem = dba_core::problem::BaProblem {
        model: CameraModel::Full11,
        shared_intrinsics: true,
        poses,
        intrinsics,
        camera_group,
        points,
        observations,
        huber_scale: None,
    };
    problem.validate().unwrap();
    problem
}

#[test]
fn shared_intrinsics_rcs_matches_dense_oracle() {
    let problem = shared_intrinsics_problem(31);
    let lambda = 1e-3;
    let point_ids: Vec<usize> = (0..problem.n_points()).collect();
    let (system, report) = form_rcs(&problem, &point_ids, &DampingState::new(lambda)).unwrap();
    assert!(report.excluded_points.is_empty());
    // Layout: six 6-wide pose blocks then two 5-wide intrinsics blocks.
    assert_eq!(system.r.layout().n_blocks(), 8);
    assert_eq!(system.r.dim(), 6 * 6 + 2 * 5);

    let dense = dense_normal_equations(&problem, lambda);
    let (r_dense, b_dense) = dense_reduced_system(&dense);
    let rel = rel_frobenius(&system.r.to_dense(), &r_dense);
    assert!(rel <= 1e-10, "shared-mode reduced system off by {rel:e}");
    let rel_b = (&system.b - &b_dense).norm() / b_dense.norm();
    assert!(rel_b <= 1e-10, "shared-mode rhs off by {rel_b:e}");
}

#[test]
fn shared_intrinsics_solve_improves_and_distributes() {
    let problem = shared_intrinsics_problem(32);
    let config = LmConfig {
        max_iterations: 10,
        ..Default::default()
    };
    let initial = rms_pixels(&problem);

    let mut serial_problem = problem.clone();
    let serial = solve_serial(&mut serial_problem, &config).unwrap();
    assert!(serial.final_rms_px < initial);

    let mut dist_problem = problem.clone();
    let dist = dba_core::dist::solve_threads(&mut dist_problem, &config, 3, 3, 1).unwrap();
    let rel = (serial.final_rms_px - dist.final_rms_px).abs() / serial.final_rms_px;
    assert!(rel <= 1e-6, "shared-mode backends disagree by {rel:e}");
}
