//! Motion-distortion correction: every point is moved from the sensor frame
//! at its capture instant into the sensor frame at scan end.
//!
//! With `s = t_off / duration`, the capture pose lies on the geodesic from
//! the previous end-of-frame pose to the current one. Relative to the scan
//! end pose this is `Exp(-(1 - s)·ξ)`, which is what gets applied.

use rayon::prelude::*;

use crate::manifold::{Pose, Rotation, Vec3};
use crate::pointcloud::{RawPoint, Scan};
use crate::sim::World;
use crate::state::MotionModel;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct DeskewInput<'a> {
    pub scan: &'a Scan,
    /// Posterior pose at the end of the previous frame.
    pub pose_prev: Pose,
    /// Current estimate of the pose at the end of this frame.
    pub pose_pred: Pose,
    pub model: MotionModel,
    /// Quantise capture times to buckets of this many seconds and reuse one
    /// transform per bucket.
    pub time_bucket: Option<f64>,
}

impl<'a> DeskewInput<'a> {
    pub fn new(scan: &'a Scan, pose_prev: Pose, pose_pred: Pose, model: MotionModel) -> Self {
        DeskewInput {
            scan,
            pose_prev,
            pose_pred,
            model,
            time_bucket: None,
        }
    }
}

/// Transform from the capture frame at interpolation `s` to the scan end
/// frame.
#[derive(Clone, Copy, Debug)]
struct EndRelative {
    model: MotionModel,
    /// Model1: end-frame rotation delta and world translation delta.
    rot_delta: Vec3,
    trans_delta_end: Vec3,
    /// Model2: twist of `T_prev^-1 · T_pred`.
    rho: Vec3,
    phi: Vec3,
}

impl EndRelative {
    fn new(prev: &Pose, pred: &Pose, model: MotionModel) -> Self {
        let (rho, phi) = (prev.inverse() * *pred).log();
        let rot_delta = (prev.rotation.inverse() * pred.rotation).log();
        EndRelative {
            model,
            rot_delta,
            // translation change expressed in the end frame
            trans_delta_end: pred.rotation.inverse() * (pred.translation - prev.translation),
            rho,
            phi,
        }
    }

    fn at(&self, s: f64) -> Pose {
        let back = s - 1.0;
        match self.model {
            MotionModel::Model1 => Pose::new(
                Rotation::exp(&(self.rot_delta * back)),
                self.trans_delta_end * back,
            ),
            MotionModel::Model2 => Pose::exp(&(self.rho * back), &(self.phi * back)),
        }
    }
}

/// Re-expresses every point in the scan-end frame. Point count, order and
/// `t_off` are preserved.
pub fn deskew(input: &DeskewInput) -> Result<Scan> {
    let scan = input.scan;
    let duration = scan.duration();
    if !(duration > 0.0) {
        return Err(Error::invalid("cannot deskew a zero-duration scan"));
    }
    if input.pose_prev == input.pose_pred {
        return Ok(scan.clone());
    }
    let rel = EndRelative::new(&input.pose_prev, &input.pose_pred, input.model);
    let scale = |t_off: f64| (t_off / duration).clamp(0.0, 1.0);
    let points: Vec<RawPoint> = match input.time_bucket.filter(|b| *b > 0.0) {
        None => scan
            .points
            .par_iter()
            .map(|p| RawPoint {
                xyz: rel.at(scale(p.t_off)).transform_point(&p.xyz),
                ..*p
            })
            .collect(),
        Some(bucket) => {
            let buckets = (duration / bucket).ceil() as usize + 1;
            let table: Vec<Pose> = (0..buckets)
                .map(|b| rel.at(scale(b as f64 * bucket)))
                .collect();
            scan.points
                .par_iter()
                .map(|p| {
                    let b = ((p.t_off / bucket).round() as usize).min(buckets - 1);
                    RawPoint {
                        xyz: table[b].transform_point(&p.xyz),
                        ..*p
                    }
                })
                .collect()
        }
    };
    Ok(Scan {
        points,
        t_start: scan.t_start,
        t_end: scan.t_end,
    })
}

/// Largest distance from a deskewed point, placed in the world with
/// `pose_true`, to the nearest world surface.
pub fn deskew_residual_check(world: &World, deskewed: &Scan, pose_true: &Pose) -> f64 {
    deskewed
        .points
        .par_iter()
        .map(|p| world.distance_to_surface(&pose_true.transform_point(&p.xyz)))
        .reduce(|| 0.0, f64::max)
}
