//! Synthetic aerial-survey datasets.
//!
//! Cameras fly a serpentine grid at a nominal altitude looking straight down
//! (with a small attitude jitter), 3D points sit on a gently undulating
//! ground plane, and observations come from the projection model with
//! isotropic Gaussian pixel noise. The generator is deterministic for a
//! fixed seed: per-camera choices use an rng stream derived from
//! (seed, camera id).

use super::IoError;
use crate::geometry::{self, CameraIntrinsics, CameraModel, CameraPose, Observation};
use crate::problem::BaProblem;
use nalgebra::{Point3, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub features_per_image: usize,
    pub noise_sigma_px: f64,
    /// Grid columns; rows follow from the image count. Near-square when unset.
    pub grid_cols: Option<usize>,
    pub altitude: f64,
    /// Along-track overlap between consecutive images of a strip.
    pub forward_overlap: f64,
    /// Overlap between adjacent strips.
    pub side_overlap: f64,
    pub focal_px: f64,
    pub image_half_extent_px: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 100,
            features_per_image: 300,
            noise_sigma_px: 1.0,
            grid_cols: None,
            altitude: 100.0,
            forward_overlap: 0.8,
            side_overlap: 0.6,
            focal_px: 1000.0,
            image_half_extent_px: 500.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<CameraPose>,
    pub intrinsics: Vec<CameraIntrinsics>,
    pub points: Vec<Point3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticResult {
    pub problem: BaProblem,
    pub ground_truth: GroundTruth,
    /// Points dropped for having fewer than two views.
    pub dropped_points: usize,
}

fn camera_rng(seed: u64, camera: usize) -> StdRng {
    StdRng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(camera as u64),
    )
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticResult, IoError> {
    if spec.n_images == 0 || spec.features_per_image == 0 {
        return Err(IoError::InfeasibleSpec("empty image or feature count".into()));
    }
    for (name, v) in [
        ("forward_overlap", spec.forward_overlap),
        ("side_overlap", spec.side_overlap),
    ] {
        if !(0.0..1.0).contains(&v) {
            return Err(IoError::InfeasibleSpec(format!(
                "{name} must be in (0, 1), got {v}"
            )));
        }
    }
    if spec.altitude <= 0.0 || spec.focal_px <= 0.0 || spec.image_half_extent_px <= 0.0 {
        return Err(IoError::InfeasibleSpec(
            "altitude, focal and image extent must be positive".into(),
        ));
    }

    let cols = spec
        .grid_cols
        .unwrap_or_else(|| (spec.n_images as f64).sqrt().ceil() as usize)
        .max(1);
    let rows = spec.n_images.div_ceil(cols);
    let footprint = 2.0 * spec.altitude * spec.image_half_extent_px / spec.focal_px;
    let stride_x = footprint * (1.0 - spec.forward_overlap);
    let stride_y = footprint * (1.0 - spec.side_overlap);
    let relief = spec.altitude * 0.02;

    // Ground-truth cameras on the serpentine grid.
    let mut poses = Vec::with_capacity(spec.n_images);
    let mut intrinsics = Vec::with_capacity(spec.n_images);
    for image in 0..spec.n_images {
        let row = image / cols;
        let col_in_row = image % cols;
        let col = if row % 2 == 0 {
            col_in_row
        } else {
            cols - 1 - col_in_row
        };
        let mut rng = camera_rng(spec.seed, image);
        let center = Vector3::new(
            col as f64 * stride_x + rng.random_range(-0.01..0.01) * stride_x.max(1.0),
            row as f64 * stride_y + rng.random_range(-0.01..0.01) * stride_y.max(1.0),
            spec.altitude * (1.0 + rng.random_range(-0.01..0.01)),
        );
        let rotation = Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02));
        let translation = -geometry::rotate(&rotation, &center);
        poses.push(CameraPose {
            rotation,
            translation,
        });
        intrinsics.push(CameraIntrinsics::from_focal(spec.focal_px));
    }

    // Candidate ground points over the covered rectangle.
    let expected_views =
        (1.0 / (1.0 - spec.forward_overlap)) * (1.0 / (1.0 - spec.side_overlap));
    let n_candidates = ((spec.n_images * spec.features_per_image) as f64 / expected_views
        * 1.6)
        .ceil() as usize;
    let span_x = (cols.saturating_sub(1)) as f64 * stride_x + footprint;
    let span_y = (rows.saturating_sub(1)) as f64 * stride_y + footprint;
    let mut point_rng = StdRng::seed_from_u64(spec.seed.wrapping_add(0xA5A5_5A5A));
    let wavelength = footprint.max(1.0) * 3.0;
    let candidates: Vec<Point3<f64>> = (0..n_candidates)
        .map(|_| {
            let x = point_rng.random_range(-footprint / 2.0..span_x - footprint / 2.0);
            let y = point_rng.random_range(-footprint / 2.0..span_y - footprint / 2.0);
            let z = relief
                * ((2.0 * std::f64::consts::PI * x / wavelength).sin()
                    * (2.0 * std::f64::consts::PI * y / wavelength).cos())
                + point_rng.random_range(-relief..relief) * 0.25;
            Point3::new(x, y, z)
        })
        .collect();

    // Observations: frustum test against every candidate, then a per-camera
    // deterministic subsample down to the feature budget.
    let mut observations: Vec<Observation> = Vec::new();
    for cam in 0..spec.n_images {
        let mut in_view: Vec<(usize, Vector2<f64>)> = Vec::new();
        for (pid, point) in candidates.iter().enumerate() {
            if let Ok(pixel) = geometry::project(&poses[cam], &intrinsics[cam], CameraModel::Bal9, point)
            {
                if pixel.x.abs() <= spec.image_half_extent_px
                    && pixel.y.abs() <= spec.image_half_extent_px
                {
                    in_view.push((pid, pixel));
                }
            }
        }
        let mut rng = camera_rng(spec.seed ^ 0x5EED, cam);
        let keep = spec.features_per_image.min(in_view.len());
        // Partial Fisher-Yates keeps exactly `keep` deterministic picks.
        for i in 0..keep {
            let j = rng.random_range(i..in_view.len());
            in_view.swap(i, j);
        }
        in_view.truncate(keep);
        in_view.sort_unstable_by_key(|(pid, _)| *pid);
        let noise = Normal::new(0.0, spec.noise_sigma_px.max(0.0)).map_err(|_| {
            IoError::InfeasibleSpec(format!("bad noise sigma {}", spec.noise_sigma_px))
        })?;
        for (pid, mut pixel) in in_view {
            if spec.noise_sigma_px > 0.0 {
                pixel.x += noise.sample(&mut rng);
                pixel.y += noise.sample(&mut rng);
            }
            observations.push(Observation {
                camera_id: cam,
                point_id: pid,
                pixel,
            });
        }
    }

    // Keep only points with at least two views; one-view points are
    // unconstrained along their ray.
    let mut views = vec![0usize; candidates.len()];
    for obs in &observations {
        views[obs.point_id] += 1;
    }
    let mut remap = vec![usize::MAX; candidates.len()];
    let mut points = Vec::new();
    for (pid, &count) in views.iter().enumerate() {
        if count >= 2 {
            remap[pid] = points.len();
            points.push(candidates[pid]);
        }
    }
    let dropped_points = candidates.len() - points.len();
    observations.retain(|obs| remap[obs.point_id] != usize::MAX);
    for obs in &mut observations {
        obs.point_id = remap[obs.point_id];
    }
    if points.is_empty() {
        return Err(IoError::InfeasibleSpec(
            "overlaps produce no covisible points".into(),
        ));
    }
    let cameras_observing: std::collections::HashSet<usize> =
        observations.iter().map(|o| o.camera_id).collect();
    if cameras_observing.len() < spec.n_images {
        return Err(IoError::InfeasibleSpec(format!(
            "{} of {} cameras see no surviving point",
            spec.n_images - cameras_observing.len(),
            spec.n_images
        )));
    }

    let ground_truth = GroundTruth {
        poses: poses.clone(),
        intrinsics: intrinsics.clone(),
        points: points.clone(),
    };
    let problem = BaProblem::new(CameraModel::Bal9, poses, intrinsics, points, observations)?;
    Ok(SyntheticResult {
        problem,
        ground_truth,
        dropped_points,
    })
}
