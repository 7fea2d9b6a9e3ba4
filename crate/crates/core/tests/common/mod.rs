//! In-memory simulation runs shared by the integration tests.
#![allow(dead_code)]

use i2ekf::eval::{evaluate, EvalReport, StampedPose, Trajectory};
use i2ekf::odometry::{records_to_trajectory, Odometry, OdometryConfig, TrajectoryRecord};
use i2ekf::sim::{simulate_scan, LidarModel, ProfileKind, TrajectoryProfile, World};
use i2ekf::Result;

pub struct SimRun {
    pub records: Vec<TrajectoryRecord>,
    pub estimate: Trajectory,
    pub truth: Trajectory,
    pub frame_ms: Vec<f64>,
}

impl SimRun {
    pub fn evaluate(&self) -> EvalReport {
        evaluate(&self.estimate, &self.truth, 1e-6).expect("stamps coincide")
    }

    pub fn ate(&self) -> f64 {
        self.evaluate().ate_rmse
    }
}

/// Simulates `duration` seconds and feeds every frame to a fresh pipeline.
pub fn run_sim(
    world_name: &str,
    kind: ProfileKind,
    lidar: &LidarModel,
    duration: f64,
    config: &OdometryConfig,
) -> Result<SimRun> {
    let world = World::preset(world_name)?;
    let profile = TrajectoryProfile::preset(kind, world_name, duration)?;
    run_profile(&world, &profile, lidar, duration, config)
}

pub fn run_profile(
    world: &World,
    profile: &TrajectoryProfile,
    lidar: &LidarModel,
    duration: f64,
    config: &OdometryConfig,
) -> Result<SimRun> {
    let frames = (duration * lidar.rate_hz + 1e-9).floor() as usize;
    let mut odom = Odometry::new(*config)?;
    let mut records = Vec::new();
    let mut frame_ms = Vec::new();
    for frame in 0..frames {
        let sim = simulate_scan(world, profile, lidar, frame)?;
        let t = std::time::Instant::now();
        records.extend(odom.process_frame(&sim.scan)?);
        frame_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let estimate = records_to_trajectory(&records)?;
    let truth = Trajectory::new(
        records
            .iter()
            .map(|r| {
                Ok(StampedPose {
                    stamp: r.stamp,
                    pose: profile.pose_at(r.stamp.min(profile.duration))?.pose,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok(SimRun {
        records,
        estimate,
        truth,
        frame_ms,
    })
}
