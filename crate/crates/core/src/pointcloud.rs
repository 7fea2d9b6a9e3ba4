//! Timestamped scans, scan files and datasets, frame segmentation and voxel
//! downsampling.
//!
//! Two on-disk scan formats are supported:
//!
//! * CSV with a `x,y,z,t_off[,intensity]` header;
//! * little-endian binary: `u32` point count followed by `x, y, z, t_off`
//!   as `f32` per point.
//!
//! A dataset is a directory of `scan_%06d.{csv|bin}` files plus `times.txt`
//! holding one absolute scan start time per line (seconds, 9 decimals).

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifold::Vec3;

/// Slack allowed between the last point time and the scan duration.
pub const TIME_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    /// Position in the LiDAR frame at the instant of capture, meters.
    pub xyz: Vec3,
    /// Seconds since scan start.
    pub t_off: f64,
    pub intensity: Option<f32>,
}

impl RawPoint {
    pub fn new(xyz: Vec3, t_off: f64) -> Self {
        RawPoint {
            xyz,
            t_off,
            intensity: None,
        }
    }

    fn is_finite(&self) -> bool {
        self.xyz.iter().all(|v| v.is_finite())
            && self.t_off.is_finite()
            && self.intensity.is_none_or(|i| i.is_finite())
    }
}

/// One LiDAR frame: points sorted by capture time.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub points: Vec<RawPoint>,
    /// Absolute start time, seconds.
    pub t_start: f64,
    /// Absolute end time, seconds.
    pub t_end: f64,
}

impl Scan {
    /// Validates ordering and time bounds.
    pub fn new(points: Vec<RawPoint>, t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_end >= t_start) {
            return Err(Error::invalid(format!(
                "scan interval [{t_start}, {t_end}] is not valid"
            )));
        }
        let duration = t_end - t_start;
        if points.windows(2).any(|w| w[1].t_off < w[0].t_off) {
            return Err(Error::invalid("scan points are not sorted by t_off"));
        }
        if let Some(p) = points
            .iter()
            .find(|p| !(p.t_off >= 0.0 && p.t_off <= duration + TIME_SLACK))
        {
            return Err(Error::invalid(format!(
                "point t_off {} outside scan duration {duration}",
                p.t_off
            )));
        }
        Ok(Scan {
            points,
            t_start,
            t_end,
        })
    }

    /// Sorts the points by time and takes the duration from the last point.
    pub fn from_points(mut points: Vec<RawPoint>, t_start: f64) -> Result<Self> {
        points.sort_by(|a, b| a.t_off.total_cmp(&b.t_off));
        let t_end = t_start + points.last().map_or(0.0, |p| p.t_off);
        Scan::new(points, t_start, t_end)
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps finite points whose range lies inside the gate.
    pub fn range_filtered(&self, gate: &RangeGate) -> (Scan, usize) {
        let points: Vec<RawPoint> = self
            .points
            .iter()
            .filter(|p| p.is_finite() && gate.contains(&p.xyz))
            .copied()
            .collect();
        let dropped = self.points.len() - points.len();
        (
            Scan {
                points,
                t_start: self.t_start,
                t_end: self.t_end,
            },
            dropped,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeGate {
    pub min: f64,
    pub max: f64,
}

impl Default for RangeGate {
    fn default() -> Self {
        RangeGate {
            min: 0.5,
            max: 100.0,
        }
    }
}

impl RangeGate {
    pub fn contains(&self, p: &Vec3) -> bool {
        let r = p.norm();
        r >= self.min && r <= self.max
    }

    /// A gate that only rejects non-finite points.
    pub fn open() -> Self {
        RangeGate {
            min: 0.0,
            max: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanFormat {
    Csv,
    Binary,
}

impl ScanFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ScanFormat::Csv),
            Some("bin") => Ok(ScanFormat::Binary),
            _ => Err(Error::invalid(format!(
                "cannot infer scan format of {}",
                path.display()
            ))),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ScanFormat::Csv => "csv",
            ScanFormat::Binary => "bin",
        }
    }
}

/// A scan read from disk together with the number of rejected points.
#[derive(Clone, Debug)]
pub struct LoadedScan {
    pub scan: Scan,
    pub dropped: usize,
}

/// Reads a scan file. Non-finite points, negative times and points outside
/// the range gate are dropped and counted; the scan ends at its last point.
pub fn load_scan(path: &Path, format: ScanFormat, t_start: f64, gate: &RangeGate) -> Result<LoadedScan> {
    let raw = match format {
        ScanFormat::Csv => read_csv(path)?,
        ScanFormat::Binary => read_binary(path)?,
    };
    let total = raw.len();
    let kept: Vec<RawPoint> = raw
        .into_iter()
        .filter(|p| p.is_finite() && p.t_off >= 0.0 && gate.contains(&p.xyz))
        .collect();
    let dropped = total - kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyScan(format!(
            "{} has no valid points ({dropped} dropped)",
            path.display()
        )));
    }
    Ok(LoadedScan {
        scan: Scan::from_points(kept, t_start)?,
        dropped,
    })
}

fn read_csv(path: &Path) -> Result<Vec<RawPoint>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut points = Vec::new();
    let mut columns = 0;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if columns == 0 {
            let header: Vec<&str> = line.split(',').map(str::trim).collect();
            columns = match header.as_slice() {
                ["x", "y", "z", "t_off"] => 4,
                ["x", "y", "z", "t_off", "intensity"] => 5,
                _ => {
                    return Err(parse_err(
                        line_no,
                        format!("expected header x,y,z,t_off[,intensity], found '{line}'"),
                    ))
                }
            };
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns {
            return Err(parse_err(
                line_no,
                format!("expected {columns} fields, found {}", fields.len()),
            ));
        }
        let mut values = [0.0f64; 5];
        for (v, f) in values.iter_mut().zip(&fields) {
            *v = f
                .parse()
                .map_err(|_| parse_err(line_no, format!("invalid number '{f}'")))?;
        }
        points.push(RawPoint {
            xyz: Vec3::new(values[0], values[1], values[2]),
            t_off: values[3],
            intensity: (columns == 5).then_some(values[4] as f32),
        });
    }
    if columns == 0 {
        return Err(Error::EmptyScan(format!("{} is empty", path.display())));
    }
    Ok(points)
}

fn read_binary(path: &Path) -> Result<Vec<RawPoint>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::Data(format!("{}: missing point count", path.display())));
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = &bytes[4..];
    if body.len() != count * 16 {
        return Err(Error::Data(format!(
            "{}: header declares {count} points but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let f = |chunk: &[u8], i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap()) as f64;
    Ok(body
        .chunks_exact(16)
        .map(|c| RawPoint::new(Vec3::new(f(c, 0), f(c, 1), f(c, 2)), f(c, 3)))
        .collect())
}

pub fn save_scan(path: &Path, scan: &Scan, format: ScanFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        ScanFormat::Csv => write_csv(&mut w, scan),
        ScanFormat::Binary => write_binary(&mut w, scan),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_csv(w: &mut impl Write, scan: &Scan) -> std::io::Result<()> {
    let with_intensity = scan.points.iter().any(|p| p.intensity.is_some());
    if with_intensity {
        writeln!(w, "x,y,z,t_off,intensity")?;
    } else {
        writeln!(w, "x,y,z,t_off")?;
    }
    for p in &scan.points {
        // Shortest round-trip representation.
        write!(w, "{},{},{},{}", p.xyz.x, p.xyz.y, p.xyz.z, p.t_off)?;
        if with_intensity {
            write!(w, ",{}", p.intensity.unwrap_or(0.0))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_binary(w: &mut impl Write, scan: &Scan) -> std::io::Result<()> {
    let count = u32::try_from(scan.points.len())
        .map_err(|_| std::io::Error::other("too many points for the binary format"))?;
    w.write_all(&count.to_le_bytes())?;
    for p in &scan.points {
        for v in [p.xyz.x, p.xyz.y, p.xyz.z, p.t_off] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Splits a scan into `n` equal time slices. Slices are half-open except the
/// last; each slice's `t_off` is rebased to its own start.
pub fn segment_frames(scan: &Scan, n: usize) -> Result<Vec<Scan>> {
    if n == 0 {
        return Err(Error::invalid("segment count must be at least 1"));
    }
    if n == 1 {
        return Ok(vec![scan.clone()]);
    }
    let duration = scan.duration();
    let boundary = |i: usize| duration * i as f64 / n as f64;
    let mut buckets: Vec<Vec<RawPoint>> = vec![Vec::new(); n];
    for p in &scan.points {
        let mut idx = ((p.t_off * n as f64 / duration).floor().max(0.0) as usize).min(n - 1);
        while idx > 0 && p.t_off < boundary(idx) {
            idx -= 1;
        }
        while idx + 1 < n && p.t_off >= boundary(idx + 1) {
            idx += 1;
        }
        let mut q = *p;
        q.t_off -= boundary(idx);
        buckets[idx].push(q);
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(i, points)| Scan {
            points,
            t_start: scan.t_start + boundary(i),
            t_end: if i + 1 == n {
                scan.t_end
            } else {
                scan.t_start + boundary(i + 1)
            },
        })
        .collect())
}

pub(crate) fn voxel_key(p: &Vec3, leaf: f64) -> (i64, i64, i64) {
    (
        (p.x / leaf).floor() as i64,
        (p.y / leaf).floor() as i64,
        (p.z / leaf).floor() as i64,
    )
}

/// Keeps the earliest point of every occupied voxel, preserving time order.
pub fn voxel_downsample(scan: &Scan, leaf: f64) -> Result<Scan> {
    if !(leaf > 0.0 && leaf.is_finite()) {
        return Err(Error::invalid(format!("voxel leaf {leaf} must be positive")));
    }
    let mut occupied = HashSet::with_capacity(scan.points.len());
    let points = scan
        .points
        .iter()
        .filter(|p| occupied.insert(voxel_key(&p.xyz, leaf)))
        .copied()
        .collect();
    Ok(Scan {
        points,
        t_start: scan.t_start,
        t_end: scan.t_end,
    })
}

/// Scan files and start times of a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub frames: Vec<DatasetFrame>,
}

#[derive(Clone, Debug)]
pub struct DatasetFrame {
    pub path: PathBuf,
    pub format: ScanFormat,
    pub t_start: f64,
}

pub fn scan_file_name(index: usize, format: ScanFormat) -> String {
    format!("scan_{index:06}.{}", format.extension())
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let times_path = dir.join("times.txt");
        if !dir.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", dir.display())));
        }
        if !times_path.exists() {
            return Err(Error::Data(format!(
                "{} has no times.txt",
                dir.display()
            )));
        }
        let text = fs::read_to_string(&times_path).map_err(|e| Error::io(&times_path, e))?;
        let mut frames = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let t_start: f64 = line.parse().map_err(|_| Error::Parse {
                path: times_path.clone(),
                line: idx + 1,
                message: format!("invalid time '{line}'"),
            })?;
            let index = frames.len();
            let found = [ScanFormat::Binary, ScanFormat::Csv]
                .into_iter()
                .map(|f| (f, dir.join(scan_file_name(index, f))))
                .find(|(_, p)| p.exists());
            let Some((format, path)) = found else {
                return Err(Error::Data(format!(
                    "{}: no scan file for frame {index}",
                    dir.display()
                )));
            };
            frames.push(DatasetFrame {
                path,
                format,
                t_start,
            });
        }
        if frames.is_empty() {
            return Err(Error::Data(format!("{} contains no scans", dir.display())));
        }
        if frames.windows(2).any(|w| w[1].t_start <= w[0].t_start) {
            return Err(Error::Data(format!(
                "{}: scan start times are not strictly increasing",
                times_path.display()
            )));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames are contiguous: a frame ends where the next one starts, and the
    /// last frame lasts as long as the one before it.
    pub fn frame_end(&self, index: usize) -> Option<f64> {
        match (self.frames.get(index + 1), index.checked_sub(1)) {
            (Some(next), _) => Some(next.t_start),
            (None, Some(prev)) if index < self.frames.len() => Some(
                self.frames[index].t_start + self.frames[index].t_start - self.frames[prev].t_start,
            ),
            _ => None,
        }
    }

    /// Loads frame `index`; its end time is the frame boundary unless a point
    /// lies beyond it.
    pub fn load(&self, index: usize, gate: &RangeGate) -> Result<LoadedScan> {
        let frame = &self.frames[index];
        let mut loaded = load_scan(&frame.path, frame.format, frame.t_start, gate)?;
        if let Some(end) = self.frame_end(index) {
            // f32 time offsets can overshoot the boundary by one rounding step
            let duration = end - frame.t_start;
            let slack = 2.0 * f32::EPSILON as f64 * duration.abs().max(1.0);
            if loaded.scan.t_end <= end + slack {
                for p in &mut loaded.scan.points {
                    p.t_off = p.t_off.min(duration);
                }
                loaded.scan.t_end = end;
            } else {
                loaded.scan.t_end = loaded.scan.t_end.max(end);
            }
        }
        Ok(loaded)
    }
}

/// Writes `times.txt` for a dataset directory.
pub fn write_times(dir: &Path, starts: &[f64]) -> Result<()> {
    let path = dir.join("times.txt");
    let mut text = String::with_capacity(starts.len() * 20);
    for t in starts {
        text.push_str(&format!("{t:.9}\n"));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
