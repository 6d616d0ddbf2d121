//! Bundle adjustment problem state and the layout of its camera unknowns.

use crate::bsmc::BlockLayout;
use crate::geometry::{CameraIntrinsics, CameraModel, CameraPose, Observation};
use nalgebra::{DVector, Point3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("observation {index} references camera {camera_id} but only {n_cameras} exist")]
    BadCameraIndex {
        index: usize,
        camera_id: usize,
        n_cameras: usize,
    },
    #[error("observation {index} references point {point_id} but only {n_points} exist")]
    BadPointIndex {
        index: usize,
        point_id: usize,
        n_points: usize,
    },
    #[error("duplicate observation of point {point_id} by camera {camera_id}")]
    DuplicateObservation { camera_id: usize, point_id: usize },
    #[error("camera {camera_id} has group {group} but only {n_groups} intrinsics blocks exist")]
    BadGroup {
        camera_id: usize,
        group: usize,
        n_groups: usize,
    },
    #[error("shared intrinsics blocks require the 11-parameter camera model")]
    SharedNeedsFull11,
}

/// Cameras, 3D points and tie-point observations.
///
/// Each camera has a pose and belongs to an intrinsics group; in the default
/// per-image mode `camera_group` is the identity map and every camera owns a
/// joint unknown block of `model.param_count()` scalars. With
/// `shared_intrinsics` the pose blocks are 6 wide and each intrinsics group
/// contributes a separate 5-wide unknown block.
#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub model: CameraModel,
    pub shared_intrinsics: bool,
    pub poses: Vec<CameraPose>,
    pub intrinsics: Vec<CameraIntrinsics>,
    pub camera_group: Vec<usize>,
    pub points: Vec<Point3<f64>>,
    pub observations: Vec<Observation>,
    /// Huber scale in pixels; `None` disables robust reweighting.
    pub huber_scale: Option<f64>,
}

impl BaProblem {
    /// Per-image intrinsics problem (the BAL layout).
    pub fn new(
        model: CameraModel,
        poses: Vec<CameraPose>,
        intrinsics: Vec<CameraIntrinsics>,
        points: Vec<Point3<f64>>,
        observations: Vec<Observation>,
    ) -> Result<Self, ProblemError> {
        let camera_group = (0..poses.len()).collect();
        let problem = BaProblem {
            model,
            shared_intrinsics: false,
            poses,
            intrinsics,
            camera_group,
            points,
            observations,
            huber_scale: None,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn n_cameras(&self) -> usize {
        self.poses.len()
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn intrinsics_of(&self, camera_id: usize) -> &CameraIntrinsics {
        &self.intrinsics[self.camera_group[camera_id]]
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.shared_intrinsics && self.model != CameraModel::Full11 {
            return Err(ProblemError::SharedNeedsFull11);
        }
        for (camera_id, &group) in self.camera_group.iter().enumerate() {
            if group >= self.intrinsics.len() {
                return Err(ProblemError::BadGroup {
                    camera_id,
                    group,
                    n_groups: self.intrinsics.len(),
                });
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(self.observations.len());
        for (index, obs) in self.observations.iter().enumerate() {
            if obs.camera_id >= self.n_cameras() {
                return Err(ProblemError::BadCameraIndex {
                    index,
                    camera_id: obs.camera_id,
                    n_cameras: self.n_cameras(),
                });
            }
            if obs.point_id >= self.n_points() {
                return Err(ProblemError::BadPointIndex {
                    index,
                    point_id: obs.point_id,
                    n_points: self.n_points(),
                });
            }
            if !seen.insert((obs.camera_id, obs.point_id)) {
                return Err(ProblemError::DuplicateObservation {
                    camera_id: obs.camera_id,
                    point_id: obs.point_id,
                });
            }
        }
        Ok(())
    }

    /// Drop cameras and points without observations, remapping indices.
    pub fn prune(&mut self) -> PruneReport {
        let mut cam_used = vec![false; self.n_cameras()];
        let mut pt_used = vec![false; self.n_points()];
        for obs in &self.observations {
            cam_used[obs.camera_id] = true;
            pt_used[obs.point_id] = true;
        }
        let report = PruneReport {
            pruned_cameras: cam_used.iter().filter(|&&u| !u).count(),
            pruned_points: pt_used.iter().filter(|&&u| !u).count(),
        };
        if report.pruned_cameras == 0 && report.pruned_points == 0 {
            return report;
        }

        let mut cam_map = vec![usize::MAX; self.n_cameras()];
        let mut next = 0;
        for (i, &used) in cam_used.iter().enumerate() {
            if used {
                cam_map[i] = next;
                next += 1;
            }
        }
        let mut pt_map = vec![usize::MAX; self.n_points()];
        let mut next = 0;
        for (i, &used) in pt_used.iter().enumerate() {
            if used {
                pt_map[i] = next;
                next += 1;
            }
        }

        let mut poses = Vec::with_capacity(next);
        let mut camera_group = Vec::with_capacity(next);
        for (i, &used) in cam_used.iter().enumerate() {
            if used {
                poses.push(self.poses[i]);
                camera_group.push(self.camera_group[i]);
            }
        }
        // In per-image mode the intrinsics table shrinks with the cameras.
        if !self.shared_intrinsics && self.intrinsics.len() == cam_used.len() {
            let mut intrinsics = Vec::with_capacity(poses.len());
            for (i, &used) in cam_used.iter().enumerate() {
                if used {
                    intrinsics.push(self.intrinsics[i]);
                }
            }
            self.intrinsics = intrinsics;
            camera_group = (0..poses.len()).collect();
        }
        self.poses = poses;
        self.camera_group = camera_group;
        self.points = self
            .points
            .iter()
            .enumerate()
            .filter(|(i, _)| pt_used[*i])
            .map(|(_, p)| *p)
            .collect();
        for obs in &mut self.observations {
            obs.camera_id = cam_map[obs.camera_id];
            obs.point_id = pt_map[obs.point_id];
        }
        report
    }

    /// Observation indices grouped by point, one Vec per point id.
    pub fn observations_by_point(&self) -> Vec<Vec<usize>> {
        let mut by_point = vec![Vec::new(); self.n_points()];
        for (i, obs) in self.observations.iter().enumerate() {
            by_point[obs.point_id].push(i);
        }
        by_point
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PruneReport {
    pub pruned_cameras: usize,
    pub pruned_points: usize,
}

/// Where an observation's camera Jacobian columns land in the unknown blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpan {
    pub block_id: usize,
    /// Column range inside the observation's `j_cam`.
    pub cols: (usize, usize),
}

/// Mapping between cameras and the unknown blocks of the reduced system.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockModel {
    layout: BlockLayout,
    shared: bool,
    n_cameras: usize,
    camera_group: Vec<usize>,
    model: CameraModel,
}

impl BlockModel {
    pub fn of(problem: &BaProblem) -> Self {
        let c = problem.model.param_count() as u32;
        let sizes = if problem.shared_intrinsics {
            let mut sizes = vec![6u32; problem.n_cameras()];
            sizes.extend(std::iter::repeat_n(
                problem.model.intrinsic_count() as u32,
                problem.intrinsics.len(),
            ));
            sizes
        } else {
            vec![c; problem.n_cameras()]
        };
        BlockModel {
            layout: BlockLayout::new(sizes).expect("camera blocks are non-empty"),
            shared: problem.shared_intrinsics,
            n_cameras: problem.n_cameras(),
            camera_group: problem.camera_group.clone(),
            model: problem.model,
        }
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn n_blocks(&self) -> usize {
        self.layout.n_blocks()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Unknown blocks touched by an observation of `camera_id`, with the
    /// `j_cam` column ranges feeding each block. One entry in joint mode, two
    /// (pose, then shared intrinsics) in shared mode.
    pub fn spans_for_camera(&self, camera_id: usize) -> Vec<BlockSpan> {
        if self.shared {
            vec![
                BlockSpan {
                    block_id: camera_id,
                    cols: (0, 6),
                },
                BlockSpan {
                    block_id: self.n_cameras + self.camera_group[camera_id],
                    cols: (6, self.model.param_count()),
                },
            ]
        } else {
            vec![BlockSpan {
                block_id: camera_id,
                cols: (0, self.model.param_count()),
            }]
        }
    }

    /// Concatenated camera unknowns in block order.
    pub fn pack(&self, problem: &BaProblem) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for (cam, pose) in problem.poses.iter().enumerate() {
            let off = self.layout.offset(cam);
            x.rows_mut(off, 3).copy_from(&pose.rotation);
            x.rows_mut(off + 3, 3).copy_from(&pose.translation);
            if !self.shared {
                let intr = problem.intrinsics_of(cam);
                x[off + 6] = intr.focal;
                x[off + 7] = intr.k1;
                x[off + 8] = intr.k2;
                if self.model == CameraModel::Full11 {
                    x[off + 9] = intr.cx;
                    x[off + 10] = intr.cy;
                }
            }
        }
        if self.shared {
            for (g, intr) in problem.intrinsics.iter().enumerate() {
                let off = self.layout.offset(self.n_cameras + g);
                x[off] = intr.focal;
                x[off + 1] = intr.k1;
                x[off + 2] = intr.k2;
                x[off + 3] = intr.cx;
                x[off + 4] = intr.cy;
            }
        }
        x
    }

    /// Write a packed camera vector back into the problem.
    pub fn unpack_into(&self, x: &DVector<f64>, problem: &mut BaProblem) {
        assert_eq!(x.len(), self.dim(), "camera vector length mismatch");
        for cam in 0..problem.n_cameras() {
            let off = self.layout.offset(cam);
            problem.poses[cam].rotation = nalgebra::Vector3::new(x[off], x[off + 1], x[off + 2]);
            problem.poses[cam].translation =
                nalgebra::Vector3::new(x[off + 3], x[off + 4], x[off + 5]);
            if !self.shared {
                let intr = &mut problem.intrinsics[problem.camera_group[cam]];
                intr.focal = x[off + 6];
                intr.k1 = x[off + 7];
                intr.k2 = x[off + 8];
                if self.model == CameraModel::Full11 {
                    intr.cx = x[off + 9];
                    intr.cy = x[off + 10];
                }
            }
        }
        if self.shared {
            for g in 0..problem.intrinsics.len() {
                let off = self.layout.offset(self.n_cameras + g);
                let intr = &mut problem.intrinsics[g];
                intr.focal = x[off];
                intr.k1 = x[off + 1];
                intr.k2 = x[off + 2];
                intr.cx = x[off + 3];
                intr.cy = x[off + 4];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector2, Vector3};

    fn tiny_problem() -> BaProblem {
        let poses = vec![
            CameraPose::identity(),
            CameraPose {
                rotation: Vector3::new(0.1, 0.0, 0.0),
                translation: Vector3::new(1.0, 0.0, 0.0),
            },
        ];
        let intrinsics = vec![
            CameraIntrinsics::from_focal(100.0),
            CameraIntrinsics::from_focal(200.0),
        ];
        let points = vec![Point3::new(0.0, 0.0, -2.0), Point3::new(1.0, 1.0, -3.0)];
        let observations = vec![
            Observation {
                camera_id: 0,
                point_id: 0,
                pixel: Vector2::zeros(),
            },
            Observation {
                camera_id: 1,
                point_id: 0,
                pixel: Vector2::new(1.0, 2.0),
            },
        ];
        BaProblem::new(
            CameraModel::Bal9,
            poses,
            intrinsics,
            points,
            observations,
        )
        .unwrap()
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut problem = tiny_problem();
        let model = BlockModel::of(&problem);
        let x = model.pack(&problem);
        assert_eq!(x.len(), 18);
        let mut modified = x.clone();
        modified[0] = 0.5;
        modified[17] = -4.0;
        model.unpack_into(&modified, &mut problem);
        assert_eq!(model.pack(&problem), modified);
    }

    #[test]
    fn prune_drops_unobserved_entities() {
        let mut problem = tiny_problem();
        let report = problem.prune();
        assert_eq!(report.pruned_cameras, 0);
        assert_eq!(report.pruned_points, 1);
        assert_eq!(problem.n_points(), 1);
        assert!(problem.validate().is_ok());
    }

    #[test]
    fn duplicate_observation_rejected() {
        let mut problem = tiny_problem();
        problem.observations.push(Observation {
            camera_id: 0,
            point_id: 0,
            pixel: Vector2::zeros(),
        });
        assert!(matches!(
            problem.validate(),
            Err(ProblemError::DuplicateObservation { .. })
        ));
    }

    #[test]
    fn shared_blocks_layout() {
        let mut problem = tiny_problem();
        problem.model = CameraModel::Full11;
        problem.shared_intrinsics = true;
        problem.intrinsics = vec![CameraIntrinsics::from_focal(100.0)];
        problem.camera_group = vec![0, 0];
        problem.validate().unwrap();
        let model = BlockModel::of(&problem);
        assert_eq!(model.n_blocks(), 3);
        assert_eq!(model.dim(), 6 + 6 + 5);
        let spans = model.spans_for_camera(1);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].block_id, 2);
        assert_eq!(spans[1].cols, (6, 11));
    }
}
