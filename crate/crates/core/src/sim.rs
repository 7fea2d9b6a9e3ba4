//! Deterministic LiDAR simulator: planar worlds, closed-form trajectories and
//! per-point-timestamped ray casting.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::eval::Trajectory;
use crate::manifold::{Pose, Rotation, Vec3};
use crate::pointcloud::{save_scan, scan_file_name, write_times, RawPoint, Scan, ScanFormat};
use crate::{Error, Result};

/// Finite planar parallelogram `corner + a·edge_u + b·edge_v`, `a, b ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub corner: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
    normal: Vec3,
    // Gram matrix entries for barycentric solves.
    uu: f64,
    uv: f64,
    vv: f64,
    det: f64,
}

impl Patch {
    pub fn new(corner: Vec3, edge_u: Vec3, edge_v: Vec3) -> Result<Self> {
        let cross = edge_u.cross(&edge_v);
        let area = cross.norm();
        if !(area > 1e-12) || !corner.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("patch has zero area"));
        }
        let (uu, uv, vv) = (edge_u.dot(&edge_u), edge_u.dot(&edge_v), edge_v.dot(&edge_v));
        Ok(Patch {
            corner,
            edge_u,
            edge_v,
            normal: cross / area,
            uu,
            uv,
            vv,
            det: uu * vv - uv * uv,
        })
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    fn coords(&self, local: &Vec3) -> (f64, f64) {
        let (lu, lv) = (local.dot(&self.edge_u), local.dot(&self.edge_v));
        (
            (lu * self.vv - lv * self.uv) / self.det,
            (lv * self.uu - lu * self.uv) / self.det,
        )
    }

    /// Ray parameter of the hit with `origin + t·dir`, `t > 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        const EDGE_EPS: f64 = 1e-12;
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.corner - origin)) / denom;
        if !(t > 1e-9) {
            return None;
        }
        let (a, b) = self.coords(&(origin + dir * t - self.corner));
        let inside = |c: f64| (-EDGE_EPS..=1.0 + EDGE_EPS).contains(&c);
        (inside(a) && inside(b)).then_some(t)
    }

    /// Euclidean distance from `p` to the patch.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let local = p - self.corner;
        let height = self.normal.dot(&local);
        let (a, b) = self.coords(&(local - self.normal * height));
        if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
            return height.abs();
        }
        let c = self.corner;
        let (u, v) = (self.edge_u, self.edge_v);
        [(c, u), (c, v), (c + u, v), (c + v, u)]
            .iter()
            .map(|(s, e)| segment_distance(p, s, e))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(p: &Vec3, start: &Vec3, edge: &Vec3) -> f64 {
    let s = ((p - start).dot(edge) / edge.norm_squared()).clamp(0.0, 1.0);
    (p - (start + edge * s)).norm()
}

/// Collection of patches; preset worlds enclose their default trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub name: String,
    pub patches: Vec<Patch>,
}

impl World {
    pub fn new(name: impl Into<String>) -> Self {
        World {
            name: name.into(),
            patches: Vec::new(),
        }
    }

    pub fn add_patch(&mut self, corner: Vec3, edge_u: Vec3, edge_v: Vec3) -> Result<()> {
        self.patches.push(Patch::new(corner, edge_u, edge_v)?);
        Ok(())
    }

    /// Adds the six faces of an axis-aligned box.
    pub fn add_box(&mut self, min: Vec3, max: Vec3) -> Result<()> {
        let d = max - min;
        if !(d.x > 0.0 && d.y > 0.0 && d.z > 0.0) {
            return Err(Error::invalid("box extents must be positive"));
        }
        let (ex, ey, ez) = (Vec3::x() * d.x, Vec3::y() * d.y, Vec3::z() * d.z);
        self.add_patch(min, ex, ey)?;
        self.add_patch(min + ez, ex, ey)?;
        self.add_patch(min, ex, ez)?;
        self.add_patch(min + ey, ex, ez)?;
        self.add_patch(min, ey, ez)?;
        self.add_patch(min + ex, ey, ez)
    }

    fn with_boxes(name: &str, boxes: &[([f64; 3], [f64; 3])]) -> Self {
        let mut w = World::new(name);
        for (lo, hi) in boxes {
            w.add_box(Vec3::from(*lo), Vec3::from(*hi))
                .expect("preset boxes are valid");
        }
        w
    }

    /// 12 × 10 × 4 m room with pillars, a table and a cabinet.
    pub fn room() -> Self {
        World::with_boxes(
            "room",
            &[
                ([-6.0, -5.0, 0.0], [6.0, 5.0, 4.0]),
                ([4.2, 3.2, 0.0], [4.8, 3.8, 4.0]),
                ([-4.8, 3.2, 0.0], [-4.2, 3.8, 4.0]),
                ([4.2, -3.8, 0.0], [4.8, -3.2, 4.0]),
                ([-4.8, -3.8, 0.0], [-4.2, -3.2, 4.0]),
                ([1.5, -4.5, 0.0], [2.5, -3.5, 0.8]),
                ([-6.0, -1.0, 0.0], [-5.4, 1.0, 2.0]),
            ],
        )
    }

    /// 95 m long, 3 m wide corridor with pillars alternating along both walls.
    pub fn corridor() -> Self {
        let mut boxes = vec![([-5.0, -1.5, 0.0], [90.0, 1.5, 3.0])];
        for i in 0..18 {
            let x = -2.0 + 5.0 * i as f64;
            let (y0, y1) = if i % 2 == 0 { (1.2, 1.5) } else { (-1.5, -1.2) };
            boxes.push(([x, y0, 0.0], [x + 0.3, y1, 3.0]));
        }
        World::with_boxes("corridor", &boxes)
    }

    /// Open ground with buildings, fenced at ±60 m; no ceiling.
    pub fn yard() -> Self {
        let mut w = World::with_boxes(
            "yard",
            &[
                ([6.0, 5.0, 0.0], [10.0, 11.0, 5.0]),
                ([-12.5, 2.5, 0.0], [-7.5, 7.5, 3.0]),
                ([-6.5, -11.0, 0.0], [-3.5, -6.0, 4.0]),
                ([8.0, -9.0, 0.0], [12.0, -6.0, 6.0]),
                ([22.0, 22.0, 0.0], [28.0, 28.0, 8.0]),
                ([-31.0, 17.0, 0.0], [-25.0, 23.0, 4.0]),
                ([-3.0, 32.0, 0.0], [3.0, 38.0, 5.0]),
                ([27.0, -33.0, 0.0], [33.0, -27.0, 7.0]),
            ],
        );
        let (e, h) = (60.0, 5.0);
        let walls = [
            (Vec3::new(-e, -e, 0.0), Vec3::x() * 2.0 * e, Vec3::z() * h),
            (Vec3::new(-e, e, 0.0), Vec3::x() * 2.0 * e, Vec3::z() * h),
            (Vec3::new(-e, -e, 0.0), Vec3::y() * 2.0 * e, Vec3::z() * h),
            (Vec3::new(e, -e, 0.0), Vec3::y() * 2.0 * e, Vec3::z() * h),
            (Vec3::new(-e, -e, 0.0), Vec3::x() * 2.0 * e, Vec3::y() * 2.0 * e),
        ];
        for (c, u, v) in walls {
            w.add_patch(c, u, v).expect("preset walls are valid");
        }
        w
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "room" => Ok(World::room()),
            "corridor" => Ok(World::corridor()),
            "yard" => Ok(World::yard()),
            other => Err(Error::invalid(format!(
                "unknown world '{other}' (expected room, corridor or yard)"
            ))),
        }
    }

    /// Nearest hit distance along a unit direction.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        self.patches
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(f64::total_cmp)
    }

    pub fn distance_to_surface(&self, p: &Vec3) -> f64 {
        self.patches
            .iter()
            .map(|patch| patch.distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProfileKind {
    Static,
    ConstGlobal,
    ConstBody,
    WaypointSmooth,
    Aggressive,
}

impl FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ProfileKind::Static),
            "const_global" => Ok(ProfileKind::ConstGlobal),
            "const_body" => Ok(ProfileKind::ConstBody),
            "waypoint_smooth" | "normal" => Ok(ProfileKind::WaypointSmooth),
            "aggressive" | "dance" => Ok(ProfileKind::Aggressive),
            other => Err(Error::invalid(format!("unknown profile '{other}'"))),
        }
    }
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileKind::Static => "static",
            ProfileKind::ConstGlobal => "const_global",
            ProfileKind::ConstBody => "const_body",
            ProfileKind::WaypointSmooth => "waypoint_smooth",
            ProfileKind::Aggressive => "aggressive",
        })
    }
}

/// Waypoint relative to the profile's start pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub t: f64,
    pub position: Vec3,
    pub yaw: f64,
}

/// Sinusoidal rates and a Lissajous position, relative to the start pose.
///
/// Orientation is `Rz(ψ)·Rx(φ)` with `ψ̇ = yaw_rate·sin(2π·yaw_freq·t)` and
/// `φ̇ = roll_rate·sin(2π·roll_freq·t)`, so the rate peaks equal the
/// amplitudes at a quarter period.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggressiveParams {
    pub position_amp: Vec3,
    pub position_freq: Vec3,
    pub yaw_rate: f64,
    pub yaw_freq: f64,
    pub roll_rate: f64,
    pub roll_freq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Static,
    /// Constant world-frame velocity and body angular rate.
    ConstGlobal { velocity: Vec3, angular_velocity: Vec3 },
    /// Constant body-frame twist (screw motion).
    ConstBody { velocity: Vec3, angular_velocity: Vec3 },
    /// C¹ cubic Hermite through the waypoints, zero velocity at both ends.
    WaypointSmooth { waypoints: Vec<Waypoint> },
    Aggressive(AggressiveParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileSample {
    pub pose: Pose,
    pub velocity: Vec3,
    /// Body frame.
    pub angular_velocity: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryProfile {
    pub start: Pose,
    pub duration: f64,
    pub motion: Motion,
}

impl TrajectoryProfile {
    pub fn new(start: Pose, duration: f64, motion: Motion) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid(format!("profile duration must be positive, got {duration}")));
        }
        if let Motion::WaypointSmooth { waypoints } = &motion {
            if waypoints.is_empty() || waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
                return Err(Error::invalid("waypoint times must be strictly increasing"));
            }
        }
        Ok(TrajectoryProfile {
            start,
            duration,
            motion,
        })
    }

    pub fn kind(&self) -> ProfileKind {
        match self.motion {
            Motion::Static => ProfileKind::Static,
            Motion::ConstGlobal { .. } => ProfileKind::ConstGlobal,
            Motion::ConstBody { .. } => ProfileKind::ConstBody,
            Motion::WaypointSmooth { .. } => ProfileKind::WaypointSmooth,
            Motion::Aggressive(_) => ProfileKind::Aggressive,
        }
    }

    /// Default profile of `kind` laid out to stay inside the named world.
    pub fn preset(kind: ProfileKind, world: &str, duration: f64) -> Result<Self> {
        let at = |x: f64, y: f64| Pose::from_translation(Vec3::new(x, y, 1.5));
        let (start, motion) = match (kind, world) {
            (ProfileKind::Static, "room" | "corridor" | "yard") => (at(0.0, 0.0), Motion::Static),
            (ProfileKind::ConstGlobal, "room") => (
                at(-3.0, -1.0),
                Motion::ConstGlobal {
                    velocity: Vec3::new(0.25, 0.1, 0.0),
                    angular_velocity: Vec3::new(0.0, 0.0, 0.2),
                },
            ),
            (ProfileKind::ConstBody, "room") => (
                at(0.0, -1.5),
                Motion::ConstBody {
                    velocity: Vec3::new(0.5, 0.0, 0.0),
                    angular_velocity: Vec3::new(0.0, 0.0, 0.3),
                },
            ),
            (ProfileKind::ConstGlobal | ProfileKind::ConstBody, "corridor") => {
                let (velocity, angular_velocity) = (Vec3::new(2.0, 0.0, 0.0), Vec3::zeros());
                let motion = if kind == ProfileKind::ConstGlobal {
                    Motion::ConstGlobal {
                        velocity,
                        angular_velocity,
                    }
                } else {
                    Motion::ConstBody {
                        velocity,
                        angular_velocity,
                    }
                };
                (at(0.0, 0.0), motion)
            }
            (ProfileKind::ConstGlobal, "yard") => (
                at(-30.0, -45.0),
                Motion::ConstGlobal {
                    velocity: Vec3::new(2.0, 0.0, 0.0),
                    angular_velocity: Vec3::new(0.0, 0.0, 0.1),
                },
            ),
            (ProfileKind::ConstBody, "yard") => (
                at(0.0, -20.0),
                Motion::ConstBody {
                    velocity: Vec3::new(3.0, 0.0, 0.0),
                    angular_velocity: Vec3::new(0.0, 0.0, 0.15),
                },
            ),
            (ProfileKind::WaypointSmooth, "room") => {
                let corners = [(-3.0, -2.0), (3.0, -2.0), (3.0, 2.0), (-3.0, 2.0), (-3.0, -2.0)];
                let waypoints = corners
                    .iter()
                    .enumerate()
                    .map(|(i, (x, y))| Waypoint {
                        t: i as f64 * duration / 4.0,
                        position: Vec3::new(x + 3.0, y + 2.0, if i % 2 == 0 { 0.0 } else { 0.3 }),
                        yaw: i as f64 * PI / 2.0,
                    })
                    .collect();
                (at(-3.0, -2.0), Motion::WaypointSmooth { waypoints })
            }
            (ProfileKind::WaypointSmooth, "corridor") => {
                let waypoints = (0..=6)
                    .map(|i| Waypoint {
                        t: i as f64 * duration / 6.0,
                        position: Vec3::new(10.0 * i as f64, if i % 2 == 0 { 0.0 } else { 0.5 }, 0.0),
                        yaw: if i % 2 == 0 { 0.0 } else { 0.1 },
                    })
                    .collect();
                (at(0.0, 0.0), Motion::WaypointSmooth { waypoints })
            }
            (ProfileKind::WaypointSmooth, "yard") => {
                let waypoints = (0..=8)
                    .map(|i| {
                        let a = i as f64 * TAU / 8.0;
                        Waypoint {
                            t: i as f64 * duration / 8.0,
                            position: Vec3::new(20.0 * a.sin(), 20.0 * (1.0 - a.cos()), 0.0),
                            yaw: a,
                        }
                    })
                    .collect();
                (at(0.0, -20.0), Motion::WaypointSmooth { waypoints })
            }
            (ProfileKind::Aggressive, "room" | "corridor" | "yard") => {
                let (start, position_amp) = match world {
                    "room" => (at(0.0, 0.0), Vec3::new(2.0, 1.5, 0.3)),
                    "corridor" => (at(40.0, 0.0), Vec3::new(3.0, 0.5, 0.3)),
                    _ => (at(0.0, -20.0), Vec3::new(3.0, 3.0, 0.3)),
                };
                (
                    start,
                    Motion::Aggressive(AggressiveParams {
                        position_amp,
                        position_freq: Vec3::new(0.1, 0.15, 0.2),
                        yaw_rate: 2.5,
                        yaw_freq: 0.5,
                        roll_rate: 1.5,
                        roll_freq: 0.7,
                    }),
                )
            }
            (_, other) => {
                return Err(Error::invalid(format!("unknown world '{other}'")));
            }
        };
        TrajectoryProfile::new(start, duration, motion)
    }

    /// Closed-form pose, world velocity and body rate at time `t`.
    pub fn pose_at(&self, t: f64) -> Result<ProfileSample> {
        if !(t >= 0.0 && t <= self.duration + 1e-9) {
            return Err(Error::invalid(format!(
                "time {t} outside the profile span [0, {}]",
                self.duration
            )));
        }
        let start = self.start;
        let sample = match &self.motion {
            Motion::Static => ProfileSample {
                pose: start,
                velocity: Vec3::zeros(),
                angular_velocity: Vec3::zeros(),
            },
            Motion::ConstGlobal {
                velocity,
                angular_velocity,
            } => ProfileSample {
                pose: Pose::new(
                    start.rotation * Rotation::exp(&(angular_velocity * t)),
                    start.translation + velocity * t,
                ),
                velocity: *velocity,
                angular_velocity: *angular_velocity,
            },
            Motion::ConstBody {
                velocity,
                angular_velocity,
            } => {
                let pose = start * Pose::exp(&(velocity * t), &(angular_velocity * t));
                ProfileSample {
                    velocity: &pose.rotation * velocity,
                    pose,
                    angular_velocity: *angular_velocity,
                }
            }
            Motion::WaypointSmooth { waypoints } => {
                let (p, dp, yaw, dyaw) = hermite(waypoints, t);
                ProfileSample {
                    pose: start * Pose::new(Rotation::exp(&(Vec3::z() * yaw)), p),
                    velocity: start.rotation * dp,
                    angular_velocity: Vec3::z() * dyaw,
                }
            }
            Motion::Aggressive(a) => {
                let w = a.position_freq * TAU;
                let p = a.position_amp.component_mul(&(w * t).map(f64::sin));
                let dp = a.position_amp.component_mul(&w).component_mul(&(w * t).map(f64::cos));
                let (wy, wr) = (TAU * a.yaw_freq, TAU * a.roll_freq);
                let yaw = a.yaw_rate / wy * (1.0 - (wy * t).cos());
                let roll = a.roll_rate / wr * (1.0 - (wr * t).cos());
                let dyaw = a.yaw_rate * (wy * t).sin();
                let droll = a.roll_rate * (wr * t).sin();
                let rot = Rotation::exp(&(Vec3::z() * yaw)) * Rotation::exp(&(Vec3::x() * roll));
                ProfileSample {
                    pose: start * Pose::new(rot, p),
                    velocity: start.rotation * dp,
                    angular_velocity: Vec3::new(droll, dyaw * roll.sin(), dyaw * roll.cos()),
                }
            }
        };
        Ok(sample)
    }
}

/// Cubic Hermite interpolation with Catmull-Rom interior tangents and zero
/// end tangents; holds the end values outside the waypoint span.
fn hermite(w: &[Waypoint], t: f64) -> (Vec3, Vec3, f64, f64) {
    let last = w.len() - 1;
    if t <= w[0].t {
        return (w[0].position, Vec3::zeros(), w[0].yaw, 0.0);
    }
    if t >= w[last].t {
        return (w[last].position, Vec3::zeros(), w[last].yaw, 0.0);
    }
    let i = w.partition_point(|p| p.t <= t) - 1;
    let tangent = |j: usize| -> (Vec3, f64) {
        if j == 0 || j == last {
            (Vec3::zeros(), 0.0)
        } else {
            let dt = w[j + 1].t - w[j - 1].t;
            (
                (w[j + 1].position - w[j - 1].position) / dt,
                (w[j + 1].yaw - w[j - 1].yaw) / dt,
            )
        }
    };
    let (a, b) = (&w[i], &w[i + 1]);
    let h = b.t - a.t;
    let s = (t - a.t) / h;
    let (ma, ya) = tangent(i);
    let (mb, yb) = tangent(i + 1);
    let (s2, s3) = (s * s, s * s * s);
    let (h00, h10, h01, h11) = (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2);
    let (d00, d10, d01, d11) = (6.0 * s2 - 6.0 * s, 3.0 * s2 - 4.0 * s + 1.0, -6.0 * s2 + 6.0 * s, 3.0 * s2 - 2.0 * s);
    let p = a.position * h00 + ma * (h * h10) + b.position * h01 + mb * (h * h11);
    let dp = (a.position * d00 + b.position * d01) / h + ma * d10 + mb * d11;
    let yaw = a.yaw * h00 + ya * h * h10 + b.yaw * h01 + yb * h * h11;
    let dyaw = (a.yaw * d00 + b.yaw * d01) / h + ya * d10 + yb * d11;
    (p, dp, yaw, dyaw)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScanPattern {
    /// Azimuth sweep over fixed elevation rings, one revolution per frame.
    Spinning { rings: usize, fov_down_deg: f64, fov_up_deg: f64 },
    /// Low-discrepancy (R2 sequence) directions continuing across frames.
    QuasiRandom { fov_down_deg: f64, fov_up_deg: f64 },
}

impl ScanPattern {
    pub fn spinning() -> Self {
        ScanPattern::Spinning {
            rings: 32,
            fov_down_deg: -25.0,
            fov_up_deg: 25.0,
        }
    }

    pub fn quasi_random() -> Self {
        ScanPattern::QuasiRandom {
            fov_down_deg: -7.0,
            fov_up_deg: 52.0,
        }
    }

    /// Unit direction of ray `i` of `n` in frame `frame`.
    fn direction(&self, frame: usize, i: usize, n: usize) -> Vec3 {
        let (azimuth, elevation) = match *self {
            ScanPattern::Spinning {
                rings,
                fov_down_deg,
                fov_up_deg,
            } => {
                let ring = i % rings.max(1);
                let frac = if rings > 1 { ring as f64 / (rings - 1) as f64 } else { 0.5 };
                (
                    TAU * i as f64 / n as f64,
                    (fov_down_deg + (fov_up_deg - fov_down_deg) * frac).to_radians(),
                )
            }
            ScanPattern::QuasiRandom {
                fov_down_deg,
                fov_up_deg,
            } => {
                // plastic number
                const G: f64 = 1.324_717_957_244_746;
                let k = (frame as u64 * n as u64 + i as u64) as f64;
                let x = (0.5 + k / G).fract();
                let y = (0.5 + k / (G * G)).fract();
                let (lo, hi) = (fov_down_deg.to_radians().sin(), fov_up_deg.to_radians().sin());
                (TAU * x, (lo + (hi - lo) * y).asin())
            }
        };
        Vec3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        )
    }
}

impl FromStr for ScanPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spinning" => Ok(ScanPattern::spinning()),
            "quasi_random" => Ok(ScanPattern::quasi_random()),
            other => Err(Error::invalid(format!("unknown scan pattern '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarModel {
    pub rate_hz: f64,
    pub points_per_scan: usize,
    pub pattern: ScanPattern,
    /// Standard deviation of the additive range noise, meters.
    pub range_sigma: f64,
    pub max_range: f64,
    pub seed: u64,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            rate_hz: 10.0,
            points_per_scan: 5000,
            pattern: ScanPattern::spinning(),
            range_sigma: 0.0,
            max_range: 100.0,
            seed: 0,
        }
    }
}

impl LidarModel {
    fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::invalid("scan rate must be positive"));
        }
        if self.points_per_scan == 0 {
            return Err(Error::invalid("points per scan must be positive"));
        }
        if !(self.range_sigma >= 0.0 && self.range_sigma.is_finite()) {
            return Err(Error::invalid("range noise must be finite and non-negative"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::invalid("max range must be positive"));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }

    fn frame_start(&self, frame: usize) -> f64 {
        frame as f64 / self.rate_hz
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent noise stream per ray, keyed by seed, frame and ray index.
fn ray_noise(seed: u64, frame: usize, i: usize) -> f64 {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ frame as u64) ^ i as u64);
    StandardNormal.sample(&mut ChaCha8Rng::seed_from_u64(key))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedScan {
    pub scan: Scan,
    pub pose_start: Pose,
    pub pose_end: Pose,
    /// Rays without a return.
    pub misses: usize,
}

impl SimulatedScan {
    /// True when no ray hit anything.
    pub fn is_empty(&self) -> bool {
        self.scan.is_empty()
    }
}

/// Ray-casts frame `frame_index`. Ray `i` of `N` fires at
/// `t_start + T·i/(N−1)` from the pose at that instant; each return is
/// stored in the instantaneous sensor frame.
pub fn simulate_scan(
    world: &World,
    profile: &TrajectoryProfile,
    lidar: &LidarModel,
    frame_index: usize,
) -> Result<SimulatedScan> {
    lidar.validate()?;
    let t_start = lidar.frame_start(frame_index);
    let period = lidar.period();
    let pose_start = profile.pose_at(t_start)?.pose;
    let pose_end = profile.pose_at(t_start + period)?.pose;
    let n = lidar.points_per_scan;
    let rays: Vec<Option<RawPoint>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Option<RawPoint>> {
            let t_off = if n > 1 { period * (i as f64 / (n - 1) as f64) } else { 0.0 };
            let pose = profile.pose_at(t_start + t_off)?.pose;
            let dir = lidar.pattern.direction(frame_index, i, n);
            let Some(range) = world.cast(&pose.translation, &(pose.rotation * dir)) else {
                return Ok(None);
            };
            if range > lidar.max_range {
                return Ok(None);
            }
            let noisy = if lidar.range_sigma > 0.0 {
                range + lidar.range_sigma * ray_noise(lidar.seed, frame_index, i)
            } else {
                range
            };
            Ok(Some(RawPoint::new(dir * noisy, t_off)))
        })
        .collect::<Result<_>>()?;
    let misses = rays.iter().filter(|r| r.is_none()).count();
    let points: Vec<RawPoint> = rays.into_iter().flatten().collect();
    Ok(SimulatedScan {
        scan: Scan::new(points, t_start, t_start + period)?,
        pose_start,
        pose_end,
        misses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub dir: PathBuf,
    pub frames: usize,
    pub points: usize,
    pub misses: usize,
    /// Frames in which no ray returned.
    pub empty_frames: usize,
    pub ground_truth: Trajectory,
}

/// Writes `scan_%06d.{bin,csv}`, `times.txt` and `gt.tum` (poses at frame
/// ends) for `round(duration·rate)` frames.
pub fn export_dataset(
    world: &World,
    profile: &TrajectoryProfile,
    lidar: &LidarModel,
    duration: f64,
    out_dir: &Path,
    format: ScanFormat,
) -> Result<ExportSummary> {
    lidar.validate()?;
    if !(duration > 0.0 && duration <= profile.duration + 1e-9) {
        return Err(Error::invalid(format!(
            "duration {duration} must be positive and within the profile span {}",
            profile.duration
        )));
    }
    let frames = (duration * lidar.rate_hz + 1e-9).floor() as usize;
    if frames == 0 {
        return Err(Error::invalid("duration shorter than one frame"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut starts = Vec::with_capacity(frames);
    let mut gt = Trajectory::default();
    let (mut points, mut misses, mut empty_frames) = (0, 0, 0);
    for k in 0..frames {
        let sim = simulate_scan(world, profile, lidar, k)?;
        save_scan(&out_dir.join(scan_file_name(k, format)), &sim.scan, format)?;
        starts.push(sim.scan.t_start);
        gt.push(sim.scan.t_end, sim.pose_end)?;
        points += sim.scan.len();
        misses += sim.misses;
        empty_frames += usize::from(sim.is_empty());
    }
    write_times(out_dir, &starts)?;
    gt.write_tum(&out_dir.join("gt.tum"))?;
    Ok(ExportSummary {
        dir: out_dir.to_path_buf(),
        frames,
        points,
        misses,
        empty_frames,
        ground_truth: gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::hat;
    use crate::pointcloud::{Dataset, RangeGate};

    fn rk4_screw(start: Pose, v: Vec3, w: Vec3, t_end: f64, steps: usize) -> Pose {
        // state: rotation matrix (9) + position (3); Ṙ = R[ω]×, ṗ = R v
        type S = (nalgebra::Matrix3<f64>, Vec3);
        let f = |s: &S| -> S { (s.0 * hat(&w), s.0 * v) };
        let add = |s: &S, d: &S, h: f64| -> S { (s.0 + d.0 * h, s.1 + d.1 * h) };
        let mut s: S = (start.rotation.matrix(), start.translation);
        let h = t_end / steps as f64;
        for _ in 0..steps {
            let k1 = f(&s);
            let k2 = f(&add(&s, &k1, h / 2.0));
            let k3 = f(&add(&s, &k2, h / 2.0));
            let k4 = f(&add(&s, &k3, h));
            s = (
                s.0 + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (h / 6.0),
                s.1 + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (h / 6.0),
            );
        }
        let q = nalgebra::UnitQuaternion::from_matrix(&s.0);
        Pose::new(Rotation::from_quaternion(q), s.1)
    }

    #[test]
    fn patch_intersection_and_distance() {
        let p = Patch::new(Vec3::zeros(), Vec3::x() * 2.0, Vec3::y()).unwrap();
        let t = p.intersect(&Vec3::new(1.0, 0.5, 3.0), &-Vec3::z()).unwrap();
        assert!((t - 3.0).abs() < 1e-15);
        assert!(p.intersect(&Vec3::new(3.0, 0.5, 3.0), &-Vec3::z()).is_none());
        assert!(p.intersect(&Vec3::new(1.0, 0.5, 3.0), &Vec3::z()).is_none());
        assert!((p.distance(&Vec3::new(1.0, 0.5, -0.7)) - 0.7).abs() < 1e-15);
        assert!((p.distance(&Vec3::new(3.0, 0.5, 0.0)) - 1.0).abs() < 1e-15);
        assert!((p.distance(&Vec3::new(3.0, 2.0, 0.0)) - 2f64.sqrt()).abs() < 1e-15);
        assert!(Patch::new(Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0).is_err());
    }

    #[test]
    fn presets_are_small_and_enclosing() {
        for name in ["room", "corridor", "yard"] {
            let w = World::preset(name).unwrap();
            assert!(w.patches.len() <= 200);
            for kind in [
                ProfileKind::Static,
                ProfileKind::ConstGlobal,
                ProfileKind::ConstBody,
                ProfileKind::WaypointSmooth,
                ProfileKind::Aggressive,
            ] {
                let prof = TrajectoryProfile::preset(kind, name, 30.0).unwrap();
                for i in 0..=300 {
                    let p = prof.pose_at(i as f64 * 0.1).unwrap().pose.translation;
                    assert!(
                        w.distance_to_surface(&p) > 0.5,
                        "{name}/{kind} at step {i} too close to geometry: {p:?}"
                    );
                    if name != "yard" {
                        // enclosed: a ray straight up hits the ceiling
                        assert!(w.cast(&p, &Vec3::z()).is_some());
                    }
                }
            }
        }
        assert!(World::preset("moon").is_err());
    }

    #[test]
    fn static_profile_holds_start() {
        let prof = TrajectoryProfile::preset(ProfileKind::Static, "room", 10.0).unwrap();
        for t in [0.0, 3.3, 10.0] {
            assert_eq!(prof.pose_at(t).unwrap().pose, prof.start);
        }
        assert!(prof.pose_at(-0.1).is_err());
        assert!(prof.pose_at(10.5).is_err());
    }

    #[test]
    fn const_global_closed_form() {
        let prof = TrajectoryProfile::new(
            Pose::identity(),
            5.0,
            Motion::ConstGlobal {
                velocity: Vec3::x(),
                angular_velocity: Vec3::zeros(),
            },
        )
        .unwrap();
        assert_eq!(prof.pose_at(2.0).unwrap().pose.translation, Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn const_body_matches_rk4() {
        let (v, w) = (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.5));
        let start = Pose::new(Rotation::exp(&Vec3::new(0.1, -0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0));
        let prof = TrajectoryProfile::new(start, 4.0, Motion::ConstBody { velocity: v, angular_velocity: w }).unwrap();
        let got = prof.pose_at(PI).unwrap().pose;
        let want = rk4_screw(start, v, w, PI, 4000);
        assert!((got.translation - want.translation).norm() < 1e-8);
        assert!(got.rotation.angle_to(&want.rotation) < 1e-8);
    }

    #[test]
    fn profiles_report_consistent_rates() {
        // velocity and body rate agree with central differences of the pose
        let h = 1e-5;
        for kind in [
            ProfileKind::ConstGlobal,
            ProfileKind::ConstBody,
            ProfileKind::WaypointSmooth,
            ProfileKind::Aggressive,
        ] {
            let prof = TrajectoryProfile::preset(kind, "room", 30.0).unwrap();
            for t in [0.37, 4.2, 11.9, 23.3] {
                let s = prof.pose_at(t).unwrap();
                let (a, b) = (prof.pose_at(t - h).unwrap().pose, prof.pose_at(t + h).unwrap().pose);
                let v = (b.translation - a.translation) / (2.0 * h);
                let w = (a.rotation.inverse() * b.rotation).log() / (2.0 * h);
                assert!((v - s.velocity).norm() < 1e-6, "{kind} velocity at {t}");
                assert!((w - s.angular_velocity).norm() < 1e-6, "{kind} rate at {t}");
            }
        }
    }

    #[test]
    fn waypoints_are_interpolated_through() {
        let prof = TrajectoryProfile::preset(ProfileKind::WaypointSmooth, "room", 20.0).unwrap();
        let Motion::WaypointSmooth { waypoints } = &prof.motion else { unreachable!() };
        for w in waypoints {
            let s = prof.pose_at(w.t).unwrap();
            assert!((s.pose.translation - prof.start.transform_point(&w.position)).norm() < 1e-12);
        }
        let end = prof.pose_at(20.0).unwrap();
        assert!((end.pose.translation - prof.start.translation).norm() < 1e-12);
        assert_eq!(end.velocity, Vec3::zeros());
    }

    #[test]
    fn aggressive_rate_peaks() {
        let prof = TrajectoryProfile::preset(ProfileKind::Aggressive, "room", 30.0).unwrap();
        let Motion::Aggressive(a) = prof.motion else { unreachable!() };
        let yaw_peak = prof.pose_at(0.25 / a.yaw_freq).unwrap();
        let world_rate = yaw_peak.pose.rotation * yaw_peak.angular_velocity;
        assert!((world_rate.z - a.yaw_rate).abs() < 1e-9);
        let roll_peak = prof.pose_at(0.25 / a.roll_freq).unwrap();
        assert!((roll_peak.angular_velocity.x - a.roll_rate).abs() < 1e-9);
    }

    #[test]
    fn downward_ray_in_room() {
        let w = World::room();
        let r = w.cast(&Vec3::new(0.0, 0.0, 2.0), &-Vec3::z()).unwrap();
        let p = -Vec3::z() * r;
        assert!((p - Vec3::new(0.0, 0.0, -2.0)).norm() < 1e-15);
    }

    #[test]
    fn static_scans_are_deterministic() {
        let w = World::room();
        let prof = TrajectoryProfile::preset(ProfileKind::Static, "room", 2.0).unwrap();
        let lidar = LidarModel {
            range_sigma: 0.02,
            seed: 7,
            points_per_scan: 2000,
            ..Default::default()
        };
        let a = simulate_scan(&w, &prof, &lidar, 3).unwrap();
        let b = simulate_scan(&w, &prof, &lidar, 3).unwrap();
        assert_eq!(a, b);
        let other_seed = simulate_scan(&w, &prof, &LidarModel { seed: 8, ..lidar }, 3).unwrap();
        assert_ne!(a.scan, other_seed.scan);
        assert_eq!(a.misses, 0);
        assert!(a.scan.points.windows(2).all(|p| p[0].t_off <= p[1].t_off));
        assert_eq!(a.scan.points.last().unwrap().t_off, lidar.period());
    }

    #[test]
    fn moving_scan_reprojects_onto_surfaces() {
        let w = World::room();
        let prof = TrajectoryProfile::new(
            Pose::new(Rotation::exp(&Vec3::new(0.0, 0.0, 0.4)), Vec3::new(0.0, 0.0, 1.5)),
            2.0,
            Motion::ConstGlobal {
                velocity: Vec3::x(),
                angular_velocity: Vec3::new(0.1, 0.0, 0.5),
            },
        )
        .unwrap();
        for pattern in [ScanPattern::spinning(), ScanPattern::quasi_random()] {
            let lidar = LidarModel {
                pattern,
                points_per_scan: 3000,
                ..Default::default()
            };
            let sim = simulate_scan(&w, &prof, &lidar, 2).unwrap();
            for p in &sim.scan.points {
                let pose = prof.pose_at(sim.scan.t_start + p.t_off).unwrap().pose;
                assert!(w.distance_to_surface(&pose.transform_point(&p.xyz)) < 1e-9);
            }
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = World::room();
        let prof = TrajectoryProfile::preset(ProfileKind::ConstBody, "room", 1.0).unwrap();
        let lidar = LidarModel {
            points_per_scan: 500,
            range_sigma: 0.01,
            ..Default::default()
        };
        let summary = export_dataset(&w, &prof, &lidar, 1.0, dir.path(), ScanFormat::Binary).unwrap();
        assert_eq!(summary.frames, 10);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 10);
        let gt = Trajectory::read_tum(&dir.path().join("gt.tum")).unwrap();
        assert_eq!(gt.len(), 10);
        for (k, s) in summary.ground_truth.samples().iter().enumerate() {
            let want = prof.pose_at((k + 1) as f64 * 0.1).unwrap().pose;
            assert!((s.pose.translation - want.translation).norm() < 1e-12);
            assert!(s.pose.rotation.angle_to(&want.rotation) < 1e-12);
            let sim = simulate_scan(&w, &prof, &lidar, k).unwrap();
            let loaded = ds.load(k, &RangeGate::open()).unwrap();
            assert_eq!(loaded.scan.len(), sim.scan.len());
        }
        assert!(export_dataset(&w, &prof, &lidar, 2.0, dir.path(), ScanFormat::Binary).is_err());
    }
}
