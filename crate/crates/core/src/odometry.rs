//! Frame-by-frame odometry pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;

use crate::eval::{timing_report, tum_line, SampleStats, StampedPose, Trajectory};
use crate::filter::{iterate_update, FilterConfig, FilterReport, Prediction};
use crate::manifold::{Pose, Vec3};
use crate::map::MapIndex;
use crate::pointcloud::{save_scan, segment_frames, voxel_downsample, Dataset, RangeGate, RawPoint, Scan, ScanFormat};
use crate::state::{initial_covariance, propagate, Covariance, ProcessNoise, StateVector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryConfig {
    pub filter: FilterConfig,
    /// Sub-frames per scan, each a full filter cycle.
    pub segments: usize,
    /// Scan downsampling leaf before the update; 0 disables it.
    pub scan_leaf: f64,
    /// Map occupancy leaf; 0 stores every inserted point.
    pub map_leaf: f64,
    pub range_gate: RangeGate,
    /// Leading frames that only build the map.
    pub bootstrap_frames: usize,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            filter: FilterConfig::default(),
            segments: 1,
            scan_leaf: 0.2,
            map_leaf: 0.25,
            range_gate: RangeGate::default(),
            bootstrap_frames: 1,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.segments == 0 {
            return Err(Error::invalid("segments must be at least 1"));
        }
        for (name, leaf) in [("scan_leaf", self.scan_leaf), ("map_leaf", self.map_leaf)] {
            if !(leaf >= 0.0 && leaf.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {leaf}")));
            }
        }
        if !(self.range_gate.min >= 0.0 && self.range_gate.max > self.range_gate.min) {
            return Err(Error::invalid("range gate needs 0 <= min < max"));
        }
        if self.bootstrap_frames == 0 {
            return Err(Error::invalid("bootstrap_frames must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    /// End time of the (sub-)frame, seconds.
    pub stamp: f64,
    pub pose: Pose,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
    pub frame: usize,
    pub segment: usize,
    /// `None` for map-only bootstrap frames.
    pub report: Option<FilterReport>,
}

/// Pipeline state carried from frame to frame.
#[derive(Clone, Debug)]
pub struct Odometry {
    config: OdometryConfig,
    state: StateVector,
    cov: Covariance,
    map: MapIndex,
    frames: usize,
    last_stamp: Option<f64>,
}

impl Odometry {
    pub fn new(config: OdometryConfig) -> Result<Self> {
        config.validate()?;
        let leaf = (config.map_leaf > 0.0).then_some(config.map_leaf);
        Ok(Odometry {
            config,
            state: StateVector::identity(),
            cov: initial_covariance(),
            map: MapIndex::new(leaf),
            frames: 0,
            last_stamp: None,
        })
    }

    pub fn config(&self) -> &OdometryConfig {
        &self.config
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn map(&self) -> &MapIndex {
        &self.map
    }

    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    fn insert(&mut self, scan: &Scan, pose: &Pose) {
        let world: Vec<Vec3> = scan.points.iter().map(|p| pose.transform_point(&p.xyz)).collect();
        self.map.insert_scan(&world);
    }

    fn record(&self, stamp: f64, segment: usize, report: Option<FilterReport>) -> TrajectoryRecord {
        TrajectoryRecord {
            stamp,
            pose: self.state.pose(),
            velocity: self.state.velocity,
            angular_velocity: self.state.angular_velocity,
            frame: self.frames,
            segment,
            report,
        }
    }

    /// Processes one scan and returns one record per sub-frame, or an empty
    /// list when nothing survives filtering.
    pub fn process_frame(&mut self, scan: &Scan) -> Result<Vec<TrajectoryRecord>> {
        if let Some(last) = self.last_stamp {
            if !(scan.t_end > last) {
                return Err(Error::invalid(format!(
                    "scan ending at {} does not follow the previous frame ending at {last}",
                    scan.t_end
                )));
            }
        }
        let (gated, _) = scan.range_filtered(&self.config.range_gate);
        let scan = if self.config.scan_leaf > 0.0 {
            voxel_downsample(&gated, self.config.scan_leaf)?
        } else {
            gated
        };
        if scan.is_empty() {
            warn!("frame {} has no usable points, skipped", self.frames);
            self.frames += 1;
            return Ok(Vec::new());
        }

        if self.frames < self.config.bootstrap_frames {
            if let Some(last) = self.last_stamp {
                let (x, p) = propagate(&self.state, &self.cov, &ProcessNoise::zero(), scan.t_end - last, self.config.filter.model)?;
                self.state = x;
                self.cov = p;
            }
            let pose = self.state.pose();
            self.insert(&scan, &pose);
            let rec = self.record(scan.t_end, 0, None);
            self.last_stamp = Some(scan.t_end);
            self.frames += 1;
            return Ok(vec![rec]);
        }

        let mut records = Vec::with_capacity(self.config.segments);
        for (segment, sub) in segment_frames(&scan, self.config.segments)?.into_iter().enumerate() {
            let last = self.last_stamp.unwrap_or(sub.t_start);
            let dt = sub.t_end - last;
            let q = self.config.filter.q_scale;
            let pred = Prediction::new(self.state, self.cov, dt, self.config.filter.model, q, q)?;
            let report = if sub.is_empty() || sub.duration() <= 0.0 {
                self.state = pred.state;
                self.cov = pred.cov;
                FilterReport {
                    degenerate: true,
                    q_scale_v: q,
                    q_scale_omega: q,
                    ..Default::default()
                }
            } else {
                let out = iterate_update(&pred, &sub, &self.map, &self.config.filter)?;
                self.state = out.state;
                self.cov = out.cov;
                let pose = self.state.pose();
                self.insert(&out.deskewed, &pose);
                out.report
            };
            self.last_stamp = Some(sub.t_end);
            records.push(self.record(sub.t_end, segment, Some(report)));
        }
        self.frames += 1;
        Ok(records)
    }
}

pub fn records_to_trajectory(records: &[TrajectoryRecord]) -> Result<Trajectory> {
    Trajectory::new(
        records
            .iter()
            .map(|r| StampedPose {
                stamp: r.stamp,
                pose: r.pose,
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub trajectory_path: PathBuf,
    pub map_path: PathBuf,
    pub timing_path: PathBuf,
    pub records: Vec<TrajectoryRecord>,
    /// Wall time per input frame, ms.
    pub frame_ms: Vec<f64>,
    pub timing: Option<SampleStats>,
    pub skipped_frames: usize,
    pub degenerate_updates: usize,
    pub map_points: usize,
}

/// Runs the pipeline over a dataset directory and writes `trajectory.tum`,
/// `map.csv`, `timing.txt` and `timing.csv` into `out_dir`.
pub fn run_dataset(dataset_dir: &Path, config: &OdometryConfig, out_dir: &Path) -> Result<RunSummary> {
    let dataset = Dataset::open(dataset_dir)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("{} contains no scans", dataset_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut odom = Odometry::new(*config)?;
    let mut records = Vec::new();
    let mut frame_ms = Vec::with_capacity(dataset.len());
    let mut skipped = 0;
    for index in 0..dataset.len() {
        let t = Instant::now();
        let scan = match dataset.load(index, &config.range_gate) {
            Ok(loaded) => loaded.scan,
            Err(Error::EmptyScan(msg)) => {
                warn!("{msg}, frame skipped");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let recs = odom.process_frame(&scan)?;
        frame_ms.push(t.elapsed().as_secs_f64() * 1e3);
        if recs.is_empty() {
            skipped += 1;
        }
        records.extend(recs);
    }

    let trajectory_path = out_dir.join("trajectory.tum");
    let mut text = String::with_capacity(records.len() * 96);
    for r in &records {
        text.push_str(&tum_line(r.stamp, &r.pose));
    }
    fs::write(&trajectory_path, text).map_err(|e| Error::io(&trajectory_path, e))?;

    let map_path = out_dir.join("map.csv");
    let map_scan = Scan {
        points: odom.map().points().iter().map(|p| RawPoint::new(*p, 0.0)).collect(),
        t_start: 0.0,
        t_end: 0.0,
    };
    save_scan(&map_path, &map_scan, ScanFormat::Csv)?;

    let (timing_text, timing_csv) = timing_report("frame", &frame_ms);
    let timing_path = out_dir.join("timing.txt");
    fs::write(&timing_path, timing_text).map_err(|e| Error::io(&timing_path, e))?;
    let csv_path = out_dir.join("timing.csv");
    fs::write(&csv_path, timing_csv).map_err(|e| Error::io(&csv_path, e))?;

    let degenerate_updates = records
        .iter()
        .filter(|r| r.report.as_ref().is_some_and(|rep| rep.degenerate))
        .count();
    Ok(RunSummary {
        trajectory_path,
        map_path,
        timing_path,
        timing: SampleStats::from_samples(&frame_ms),
        map_points: odom.map().len(),
        records,
        frame_ms,
        skipped_frames: skipped,
        degenerate_updates,
    })
}
