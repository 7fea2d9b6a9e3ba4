//! Trajectory evaluation: TUM files, timestamp association, rigid
//! alignment, ATE and end-to-end error, timing statistics.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::manifold::{Mat3, Pose, Rotation, Vec3};
use crate::{Error, Result};

/// Default association window, seconds.
pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub stamp: f64,
    pub pose: Pose,
}

/// Timestamped poses, strictly increasing in time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(samples: Vec<StampedPose>) -> Result<Self> {
        if let Some(w) = samples.windows(2).find(|w| !(w[1].stamp > w[0].stamp)) {
            return Err(Error::Data(format!(
                "trajectory timestamps not strictly increasing at {:.9}",
                w[1].stamp
            )));
        }
        if samples.iter().any(|s| !s.stamp.is_finite() || !s.pose.is_finite()) {
            return Err(Error::Data("trajectory contains non-finite values".into()));
        }
        Ok(Trajectory { samples })
    }

    /// Appends a sample; errors unless it is later than the last one.
    pub fn push(&mut self, stamp: f64, pose: Pose) -> Result<()> {
        if self.samples.last().is_some_and(|s| !(stamp > s.stamp)) {
            return Err(Error::Data(format!(
                "timestamp {stamp:.9} does not follow the previous sample"
            )));
        }
        self.samples.push(StampedPose { stamp, pose });
        Ok(())
    }

    pub fn samples(&self) -> &[StampedPose] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads `timestamp tx ty tz qx qy qz qw` lines; `#` comments and blank
    /// lines are skipped.
    pub fn read_tum(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let vals = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            if vals.len() != 8 {
                return Err(parse_err(format!("expected 8 fields, found {}", vals.len())));
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if !(q.norm() > 1e-9) {
                return Err(parse_err("zero quaternion".into()));
            }
            samples.push(StampedPose {
                stamp: vals[0],
                pose: Pose::new(
                    Rotation::from_quaternion(UnitQuaternion::from_quaternion(q)),
                    Vec3::new(vals[1], vals[2], vals[3]),
                ),
            });
        }
        Trajectory::new(samples).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write_tum(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            w.write_all(tum_line(s.stamp, &s.pose).as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One TUM line with nine decimals, newline-terminated.
pub fn tum_line(stamp: f64, pose: &Pose) -> String {
    let t = pose.translation;
    let q = pose.rotation.quaternion();
    format!(
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
        stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePair {
    pub stamp: f64,
    pub est: Pose,
    pub reference: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub pairs: Vec<PosePair>,
    /// Estimated samples without a reference within `max_dt`.
    pub dropped: usize,
}

/// Pairs every estimated sample with its nearest reference sample in time
/// (earlier one on ties) when the gap is at most `max_dt`.
pub fn associate(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<Association> {
    if !(max_dt >= 0.0) {
        return Err(Error::invalid(format!("max_dt must be non-negative, got {max_dt}")));
    }
    let refs = reference.samples();
    let mut pairs = Vec::new();
    for e in est.samples() {
        let i = refs.partition_point(|r| r.stamp < e.stamp);
        let best = [i.checked_sub(1), (i < refs.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                (refs[a].stamp - e.stamp)
                    .abs()
                    .total_cmp(&(refs[b].stamp - e.stamp).abs())
                    .then(a.cmp(&b))
            });
        if let Some(j) = best {
            if (refs[j].stamp - e.stamp).abs() <= max_dt {
                pairs.push(PosePair {
                    stamp: e.stamp,
                    est: e.pose,
                    reference: refs[j].pose,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no timestamp pairs within {max_dt} s between the trajectories"
        )));
    }
    let dropped = est.len() - pairs.len();
    Ok(Association { pairs, dropped })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    /// Maps estimated positions onto the reference.
    pub transform: Pose,
    /// Set when the estimated positions are too few or collinear; the
    /// transform is then the identity.
    pub degenerate: bool,
}

/// Least-squares rigid transform `T` minimising `Σ‖T·est_i − ref_i‖²`
/// (no scale), from the SVD of the cross-covariance.
pub fn align_rigid(pairs: &[PosePair]) -> Alignment {
    let degenerate = Alignment {
        transform: Pose::identity(),
        degenerate: true,
    };
    if pairs.len() < 3 {
        return degenerate;
    }
    let n = pairs.len() as f64;
    let ce = pairs.iter().map(|p| p.est.translation).sum::<Vec3>() / n;
    let cr = pairs.iter().map(|p| p.reference.translation).sum::<Vec3>() / n;
    let mut cross = Mat3::zeros();
    let mut scatter = Mat3::zeros();
    for p in pairs {
        let de = p.est.translation - ce;
        cross += de * (p.reference.translation - cr).transpose();
        scatter += de * de.transpose();
    }
    let sv = scatter.singular_values();
    let (smax, smid) = {
        let mut s = [sv[0], sv[1], sv[2]];
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s[1])
    };
    if !(smax > 0.0) || smid <= 1e-12 * smax {
        return degenerate;
    }
    if pairs.iter().all(|p| p.est.translation == p.reference.translation) {
        return Alignment {
            transform: Pose::identity(),
            degenerate: false,
        };
    }
    let svd = cross.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return degenerate;
    };
    let v = v_t.transpose();
    let mut d = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let Ok(rotation) = Rotation::from_matrix(&r) else {
        return degenerate;
    };
    let translation = cr - rotation * ce;
    Alignment {
        transform: Pose::new(rotation, translation),
        degenerate: false,
    }
}

/// Translational residuals `T·est_i − ref_i`.
pub fn residuals(pairs: &[PosePair], alignment: &Pose) -> Vec<Vec3> {
    pairs
        .iter()
        .map(|p| alignment.transform_point(&p.est.translation) - p.reference.translation)
        .collect()
}

pub fn ate_rmse(pairs: &[PosePair], alignment: &Pose) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = residuals(pairs, alignment).iter().map(|r| r.norm_squared()).sum();
    (sum / pairs.len() as f64).sqrt()
}

/// Drift between the first and last pair after alignment. For a closed loop
/// this is the gap between the estimated start and end positions.
pub fn end_to_end_error(pairs: &[PosePair], alignment: &Pose) -> f64 {
    match (pairs.first(), pairs.last()) {
        (Some(a), Some(b)) => {
            let e = alignment.rotation * (b.est.translation - a.est.translation);
            (e - (b.reference.translation - a.reference.translation)).norm()
        }
        _ => 0.0,
    }
}

/// Summary of a sample set; percentiles interpolate linearly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleStats {
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl SampleStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(SampleStats {
            count: sorted.len(),
            mean,
            std_dev: var.sqrt(),
            min: sorted[0],
            median: percentile(&sorted, 50.0),
            p95: percentile(&sorted, 95.0),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Percentile of an ascending, non-empty slice.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Trajectory comparison results.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub dropped: usize,
    pub alignment: Alignment,
    pub ate_rmse: f64,
    pub ate_stats: SampleStats,
    pub end_to_end: f64,
    /// Per pair: stamp and aligned residual.
    pub errors: Vec<(f64, Vec3)>,
}

pub fn evaluate(est: &Trajectory, reference: &Trajectory, max_dt: f64) -> Result<EvalReport> {
    let assoc = associate(est, reference, max_dt)?;
    let alignment = align_rigid(&assoc.pairs);
    let res = residuals(&assoc.pairs, &alignment.transform);
    let norms: Vec<f64> = res.iter().map(|r| r.norm()).collect();
    Ok(EvalReport {
        pairs: assoc.pairs.len(),
        dropped: assoc.dropped,
        alignment,
        ate_rmse: ate_rmse(&assoc.pairs, &alignment.transform),
        ate_stats: SampleStats::from_samples(&norms).expect("pairs are non-empty"),
        end_to_end: end_to_end_error(&assoc.pairs, &alignment.transform),
        errors: assoc.pairs.iter().map(|p| p.stamp).zip(res).collect(),
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let s = &self.ate_stats;
        let mut out = String::new();
        let _ = writeln!(out, "pairs: {}", self.pairs);
        let _ = writeln!(out, "dropped: {}", self.dropped);
        let _ = writeln!(out, "alignment_degenerate: {}", self.alignment.degenerate);
        let _ = writeln!(out, "ate_rmse_m: {:.6}", self.ate_rmse);
        let _ = writeln!(out, "ate_mean_m: {:.6}", s.mean);
        let _ = writeln!(out, "ate_median_m: {:.6}", s.median);
        let _ = writeln!(out, "ate_p95_m: {:.6}", s.p95);
        let _ = writeln!(out, "ate_max_m: {:.6}", s.max);
        let _ = writeln!(out, "end_to_end_m: {:.6}", self.end_to_end);
        out
    }

    /// Per-axis aligned error series for external plotting.
    pub fn errors_csv(&self) -> String {
        let mut out = String::from("timestamp,ex,ey,ez,norm\n");
        for (t, e) in &self.errors {
            let _ = writeln!(out, "{t:.9},{:.9},{:.9},{:.9},{:.9}", e.x, e.y, e.z, e.norm());
        }
        out
    }
}

/// Plain-text timing report plus CSV of the raw per-frame samples.
pub fn timing_report(label: &str, frame_ms: &[f64]) -> (String, String) {
    let mut text = String::new();
    match SampleStats::from_samples(frame_ms) {
        Some(s) => {
            let _ = writeln!(text, "{label}_frames: {}", s.count);
            let _ = writeln!(text, "{label}_mean_ms: {:.3}", s.mean);
            let _ = writeln!(text, "{label}_median_ms: {:.3}", s.median);
            let _ = writeln!(text, "{label}_p95_ms: {:.3}", s.p95);
            let _ = writeln!(text, "{label}_max_ms: {:.3}", s.max);
        }
        None => {
            let _ = writeln!(text, "{label}_frames: 0");
        }
    }
    let mut csv = String::from("frame,ms\n");
    for (i, ms) in frame_ms.iter().enumerate() {
        let _ = writeln!(csv, "{i},{ms:.6}");
    }
    (text, csv)
}
