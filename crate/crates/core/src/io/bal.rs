//! BAL text files.
//!
//! Layout: a header line `n_cameras n_points n_observations`, one line per
//! observation `camera_id point_id x y`, then 9 parameters per camera
//! (rotation, translation, focal, k1, k2) and 3 coordinates per point, one
//! value per line. Written files use Rust's shortest round-trip float
//! formatting in scientific notation, so load(save(p)) reproduces p exactly
//! and saving a canonically formatted file reproduces it byte for byte.

use super::IoError;
use crate::geometry::{CameraIntrinsics, CameraModel, CameraPose, Observation};
use crate::problem::{BaProblem, PruneReport};
use nalgebra::{Point3, Vector2, Vector3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

struct Tokens<R: BufRead> {
    reader: R,
    line: usize,
    buffer: Vec<String>,
    cursor: usize,
}

impl<R: BufRead> Tokens<R> {
    fn new(reader: R) -> Self {
        Tokens {
            reader,
            line: 0,
            buffer: Vec::new(),
            cursor: 0,
        }
    }

    fn next(&mut self) -> Result<Option<(String, usize)>, IoError> {
        loop {
            if self.cursor < self.buffer.len() {
                let token = self.buffer[self.cursor].clone();
                self.cursor += 1;
                return Ok(Some((token, self.line)));
            }
            let mut raw = String::new();
            if self.reader.read_line(&mut raw)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            self.buffer = raw.split_whitespace().map(str::to_owned).collect();
            self.cursor = 0;
        }
    }

    fn expect(&mut self, what: &str) -> Result<(String, usize), IoError> {
        self.next()?.ok_or_else(|| IoError::Parse {
            line: self.line,
            detail: format!("unexpected end of file, expected {what}"),
        })
    }

    fn usize(&mut self, what: &str) -> Result<usize, IoError> {
        let (token, line) = self.expect(what)?;
        token.parse().map_err(|_| IoError::Parse {
            line,
            detail: format!("expected {what}, got {token:?}"),
        })
    }

    fn f64(&mut self, what: &str) -> Result<f64, IoError> {
        let (token, line) = self.expect(what)?;
        token.parse().map_err(|_| IoError::Parse {
            line,
            detail: format!("expected {what}, got {token:?}"),
        })
    }
}

pub fn load_bal(path: impl AsRef<Path>) -> Result<(BaProblem, PruneReport), IoError> {
    load_bal_from(BufReader::new(File::open(path)?))
}

pub fn load_bal_from(reader: impl Read) -> Result<(BaProblem, PruneReport), IoError> {
    let mut tokens = Tokens::new(BufReader::new(reader));
    let n_cameras = tokens.usize("camera count")?;
    let n_points = tokens.usize("point count")?;
    let n_observations = tokens.usize("observation count")?;

    let mut observations = Vec::with_capacity(n_observations);
    for _ in 0..n_observations {
        let (cam_token, line) = tokens.expect("camera id")?;
        let camera_id: usize = cam_token.parse().map_err(|_| IoError::Parse {
            line,
            detail: format!("expected camera id, got {cam_token:?}"),
        })?;
        let point_id = tokens.usize("point id")?;
        let x = tokens.f64("observation x")?;
        let y = tokens.f64("observation y")?;
        if camera_id >= n_cameras {
            return Err(IoError::IndexOutOfRange {
                line,
                detail: format!("camera id {camera_id} outside 0..{n_cameras}"),
            });
        }
        if point_id >= n_points {
            return Err(IoError::IndexOutOfRange {
                line,
                detail: format!("point id {point_id} outside 0..{n_points}"),
            });
        }
        observations.push(Observation {
            camera_id,
            point_id,
            pixel: Vector2::new(x, y),
        });
    }

    let mut poses = Vec::with_capacity(n_cameras);
    let mut intrinsics = Vec::with_capacity(n_cameras);
    for _ in 0..n_cameras {
        let mut v = [0.0; 9];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = tokens.f64(&format!("camera parameter {i}"))?;
        }
        poses.push(CameraPose {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        });
        intrinsics.push(CameraIntrinsics {
            focal: v[6],
            k1: v[7],
            k2: v[8],
            cx: 0.0,
            cy: 0.0,
        });
    }
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x = tokens.f64("point x")?;
        let y = tokens.f64("point y")?;
        let z = tokens.f64("point z")?;
        points.push(Point3::new(x, y, z));
    }
    if let Some((token, line)) = tokens.next()? {
        return Err(IoError::Parse {
            line,
            detail: format!("trailing data {token:?}"),
        });
    }

    let mut problem = BaProblem::new(CameraModel::Bal9, poses, intrinsics, points, observations)?;
    let report = problem.prune();
    Ok((problem, report))
}

pub fn save_bal(problem: &BaProblem, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    save_bal_to(problem, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_bal_to(problem: &BaProblem, w: &mut impl Write) -> Result<(), IoError> {
    writeln!(
        w,
        "{} {} {}",
        problem.n_cameras(),
        problem.n_points(),
        problem.n_observations()
    )?;
    for obs in &problem.observations {
        writeln!(
            w,
            "{} {} {:e} {:e}",
            obs.camera_id, obs.point_id, obs.pixel.x, obs.pixel.y
        )?;
    }
    for cam in 0..problem.n_cameras() {
        let pose = &problem.poses[cam];
        let intr = problem.intrinsics_of(cam);
        for v in [
            pose.rotation.x,
            pose.rotation.y,
            pose.rotation.z,
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
            intr.focal,
            intr.k1,
            intr.k2,
        ] {
            writeln!(w, "{v:e}")?;
        }
    }
    for p in &problem.points {
        for v in [p.x, p.y, p.z] {
            writeln!(w, "{v:e}")?;
        }
    }
    Ok(())
}
