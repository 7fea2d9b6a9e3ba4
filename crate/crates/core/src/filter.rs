//! Dual-iteration Kalman update for one frame.
//!
//! The outer loop re-deskews the scan with the latest end-of-frame iterate;
//! the inner loop re-matches points and applies the iterated update
//! `x ← x ⊞ (−K z − (I − K H)(x ⊟ x̂))`. After the first inner convergence the
//! process noise is rescaled from the size of the prior correction and the
//! prior covariance is propagated again.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SMatrix, Vector6};

use crate::observation::{build_measurements, MeasurementBatch, ObservationParams};
use crate::map::MapIndex;
use crate::pointcloud::Scan;
use crate::state::{
    propagate, symmetrize, Covariance, ErrorState, MotionModel, ProcessNoise, StateVector, DIM,
};
use crate::undistort::{deskew, DeskewInput};
use crate::{Error, Result};

/// Diagonal loading applied to a covariance that fails to factorise.
const REGULARIZATION: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    /// Outer (deskew) convergence threshold on `‖x_new ⊟ x_old‖`.
    pub eps_outer: f64,
    /// Inner (measurement) convergence threshold.
    pub eps_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Gain of the innovation-to-noise sigmoid.
    pub alpha_gain: f64,
    /// Offset of the innovation-to-noise sigmoid.
    pub gamma_offset: f64,
    /// Separate sigmoid parameters for the angular-rate block.
    pub omega_alpha_gain: Option<f64>,
    pub omega_gamma_offset: Option<f64>,
    pub adaptive_noise: bool,
    /// Noise scale used before the first adaptation, or throughout when
    /// adaptation is off.
    pub q_scale: f64,
    pub model: MotionModel,
    pub observation: ObservationParams,
    /// Optional deskew time quantisation, seconds.
    pub deskew_bucket: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            eps_outer: 1e-3,
            eps_inner: 1e-3,
            max_outer: 4,
            max_inner: 5,
            alpha_gain: 5.0,
            gamma_offset: 7.0,
            omega_alpha_gain: None,
            omega_gamma_offset: None,
            adaptive_noise: true,
            q_scale: 1.0,
            model: MotionModel::Model1,
            observation: ObservationParams::default(),
            deskew_bucket: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("eps_outer", self.eps_outer)?;
        positive("eps_inner", self.eps_inner)?;
        positive("q_scale", self.q_scale)?;
        positive("range_sigma", self.observation.range_sigma)?;
        positive("plane_tol", self.observation.plane.plane_tol)?;
        positive("match_dist_max", self.observation.plane.match_dist_max)?;
        for (name, v) in [
            ("alpha_gain", Some(self.alpha_gain)),
            ("gamma_offset", Some(self.gamma_offset)),
            ("omega_alpha_gain", self.omega_alpha_gain),
            ("omega_gamma_offset", self.omega_gamma_offset),
        ] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::invalid("iteration caps must be at least 1"));
        }
        if self.observation.k < 3 {
            return Err(Error::invalid("plane fitting needs at least 3 neighbours"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTiming {
    pub deskew_ms: f64,
    pub measure_ms: f64,
    pub solve_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterReport {
    pub outer_iters: usize,
    /// Inner iterations run in each outer iteration.
    pub inner_iters: Vec<usize>,
    /// `‖K d‖` at the first inner convergence.
    pub innovation_norm: Option<f64>,
    /// Whether the noise was rescaled in this update.
    pub adapted: bool,
    /// Noise scales in effect at the end of the update.
    pub q_scale_v: f64,
    pub q_scale_omega: f64,
    pub matched_count: usize,
    /// Too few matches: the prior was returned as the posterior.
    pub degenerate: bool,
    /// The prior covariance needed diagonal loading to invert.
    pub regularized: bool,
    pub outer_converged: bool,
    pub timing: PhaseTiming,
}

/// Propagated prior for one frame, kept together with its inputs so the
/// covariance can be propagated again with a different noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub prev: StateVector,
    pub prev_cov: Covariance,
    pub dt: f64,
    pub model: MotionModel,
    pub q_scale_v: f64,
    pub q_scale_omega: f64,
    pub state: StateVector,
    pub cov: Covariance,
}

impl Prediction {
    pub fn new(
        prev: StateVector,
        prev_cov: Covariance,
        dt: f64,
        model: MotionModel,
        q_scale_v: f64,
        q_scale_omega: f64,
    ) -> Result<Self> {
        let noise = ProcessNoise::from_scales(q_scale_v, q_scale_omega, dt)?;
        let (state, cov) = propagate(&prev, &prev_cov, &noise, dt, model)?;
        Ok(Prediction {
            prev,
            prev_cov,
            dt,
            model,
            q_scale_v,
            q_scale_omega,
            state,
            cov,
        })
    }

    pub fn noise(&self) -> Result<ProcessNoise> {
        ProcessNoise::from_scales(self.q_scale_v, self.q_scale_omega, self.dt)
    }

    fn with_scales(&self, q_scale_v: f64, q_scale_omega: f64) -> Result<Self> {
        Prediction::new(self.prev, self.prev_cov, self.dt, self.model, q_scale_v, q_scale_omega)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutput {
    pub state: StateVector,
    pub cov: Covariance,
    /// Scan deskewed with the last iterate used by the update.
    pub deskewed: Scan,
    pub report: FilterReport,
}

/// Inverse of a covariance, with diagonal loading when it is not positive
/// definite. Returns the inverse and whether loading was needed.
fn covariance_inverse(p: &Covariance) -> Result<(Covariance, bool)> {
    if let Some(ch) = Cholesky::new(*p) {
        return Ok((ch.inverse(), false));
    }
    let loaded = p + Covariance::identity() * REGULARIZATION;
    Cholesky::new(loaded)
        .map(|ch| (ch.inverse(), true))
        .ok_or_else(|| Error::NumericFailure("prior covariance is not positive definite".into()))
}

/// `K = (Hᵀ R⁻¹ H + P⁻¹)⁻¹ Hᵀ R⁻¹`, solved in the 12-dimensional
/// information form.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanGain {
    pub gain: DMatrix<f64>,
    pub regularized: bool,
}

pub fn kalman_gain(h: &DMatrix<f64>, r_diag: &DVector<f64>, p: &Covariance) -> Result<KalmanGain> {
    if h.ncols() != DIM || h.nrows() != r_diag.len() {
        return Err(Error::invalid(format!(
            "H is {}x{}, R has {} entries",
            h.nrows(),
            h.ncols(),
            r_diag.len()
        )));
    }
    if r_diag.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid("measurement variances must be positive"));
    }
    let (p_inv, regularized) = covariance_inverse(p)?;
    // Hᵀ R⁻¹, 12 × m
    let mut ht_rinv = h.transpose();
    for (mut col, r) in ht_rinv.column_iter_mut().zip(r_diag.iter()) {
        col /= *r;
    }
    let info = &ht_rinv * h + DMatrix::from_column_slice(DIM, DIM, p_inv.as_slice());
    let ch = Cholesky::<f64, Dyn>::new(symmetrize_dyn(&info))
        .ok_or_else(|| Error::NumericFailure("information matrix is singular".into()))?;
    Ok(KalmanGain {
        gain: ch.solve(&ht_rinv),
        regularized,
    })
}

fn symmetrize_dyn(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `100 / (1 + exp(−α·‖Kd‖ + γ)) + 0.01`, within `(0.01, 100.01)`.
pub fn noise_scale(innovation_norm: f64, alpha_gain: f64, gamma_offset: f64) -> f64 {
    100.0 / (1.0 + (-alpha_gain * innovation_norm + gamma_offset).exp()) + 0.01
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptedNoise {
    pub noise: ProcessNoise,
    pub scale_v: f64,
    pub scale_omega: f64,
    pub innovation_norm: f64,
}

fn adapt_from_norm(innovation_norm: f64, dt: f64, config: &FilterConfig) -> Result<AdaptedNoise> {
    let scale_v = noise_scale(innovation_norm, config.alpha_gain, config.gamma_offset);
    let scale_omega = noise_scale(
        innovation_norm,
        config.omega_alpha_gain.unwrap_or(config.alpha_gain),
        config.omega_gamma_offset.unwrap_or(config.gamma_offset),
    );
    Ok(AdaptedNoise {
        noise: ProcessNoise::from_scales(scale_v, scale_omega, dt)?,
        scale_v,
        scale_omega,
        innovation_norm,
    })
}

/// Noise from the state correction `K d` implied by the innovation `d`.
pub fn adapt_process_noise(
    k: &DMatrix<f64>,
    d: &DVector<f64>,
    dt: f64,
    config: &FilterConfig,
) -> Result<AdaptedNoise> {
    if k.ncols() != d.len() {
        return Err(Error::invalid("gain and innovation sizes differ"));
    }
    adapt_from_norm((k * d).norm(), dt, config)
}

/// Information-form system for one linearisation point.
struct InfoSystem {
    /// `Hᵀ R⁻¹ H + P⁻¹`, factorised.
    info: Cholesky<f64, nalgebra::Const<DIM>>,
    /// `Hᵀ R⁻¹ z`.
    ht_rinv_z: ErrorState,
}

impl InfoSystem {
    /// Accumulates rows in index order so the sums are reproducible.
    fn new(batch: &MeasurementBatch, p_inv: &Covariance) -> Result<Self> {
        let mut block = SMatrix::<f64, 6, 6>::zeros();
        let mut rhs = Vector6::zeros();
        for ((row, z), r) in batch.rows.iter().zip(&batch.residuals).zip(&batch.noise) {
            let w = row / *r;
            block += w * row.transpose();
            rhs += w * *z;
        }
        // the measured block covers rotation then position, i.e. indices 0..6
        let mut info = *p_inv;
        let mut measured = info.fixed_view_mut::<6, 6>(0, 0);
        measured += block;
        let mut ht_rinv_z = ErrorState::zeros();
        ht_rinv_z.fixed_rows_mut::<6>(0).copy_from(&rhs);
        let info = Cholesky::new(symmetrize(&info))
            .ok_or_else(|| Error::NumericFailure("information matrix is singular".into()))?;
        Ok(InfoSystem { info, ht_rinv_z })
    }

    /// Step `−K z − (I − K H) e`, which equals `−A⁻¹ (Hᵀ R⁻¹ z + P⁻¹ e)`.
    fn step(&self, p_inv: &Covariance, e: &ErrorState) -> ErrorState {
        -self.info.solve(&(self.ht_rinv_z + p_inv * e))
    }

    /// `(I − K H) P`, which equals `A⁻¹`.
    fn posterior(&self) -> Covariance {
        symmetrize(&self.info.inverse())
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the dual-iteration update for one (sub-)frame against a non-empty
/// map.
pub fn iterate_update(
    pred: &Prediction,
    scan: &Scan,
    map: &MapIndex,
    config: &FilterConfig,
) -> Result<UpdateOutput> {
    config.validate()?;
    if map.is_empty() {
        return Err(Error::invalid("update needs a non-empty map"));
    }
    let prior = pred.state;
    let pose_prev = pred.prev.pose();
    let mut pred = *pred;
    let mut report = FilterReport {
        q_scale_v: pred.q_scale_v,
        q_scale_omega: pred.q_scale_omega,
        ..Default::default()
    };
    let (mut p_inv, regularized) = covariance_inverse(&pred.cov)?;
    report.regularized = regularized;

    let mut x = prior;
    let mut first_kd: Option<f64> = None;
    let mut last_system: Option<InfoSystem> = None;
    let mut deskewed = scan.clone();

    for alpha in 0..config.max_outer {
        report.outer_iters = alpha + 1;
        let t = Instant::now();
        let input = DeskewInput {
            time_bucket: config.deskew_bucket,
            ..DeskewInput::new(scan, pose_prev, x.pose(), config.model)
        };
        deskewed = deskew(&input)?;
        report.timing.deskew_ms += ms_since(t);

        if alpha == 1 && config.adaptive_noise {
            if let Some(norm) = first_kd {
                let adapted = adapt_from_norm(norm, pred.dt, config)?;
                pred = pred.with_scales(adapted.scale_v, adapted.scale_omega)?;
                let (inv, reg) = covariance_inverse(&pred.cov)?;
                p_inv = inv;
                report.regularized |= reg;
                report.adapted = true;
                report.q_scale_v = adapted.scale_v;
                report.q_scale_omega = adapted.scale_omega;
            }
        }

        let x_outer = x;
        let mut inner = 0;
        for _ in 0..config.max_inner {
            inner += 1;
            let t = Instant::now();
            let batch = match build_measurements(&deskewed, &x, map, &config.observation) {
                Ok(b) => b,
                Err(Error::DegenerateMeasurement { matched, .. }) => {
                    report.inner_iters.push(inner);
                    report.timing.measure_ms += ms_since(t);
                    report.matched_count = matched;
                    report.degenerate = true;
                    let input = DeskewInput {
                        time_bucket: config.deskew_bucket,
                        ..DeskewInput::new(scan, pose_prev, prior.pose(), config.model)
                    };
                    return Ok(UpdateOutput {
                        state: prior,
                        cov: pred.cov,
                        deskewed: deskew(&input)?,
                        report,
                    });
                }
                Err(e) => return Err(e),
            };
            report.timing.measure_ms += ms_since(t);
            report.matched_count = batch.matched_count();

            let t = Instant::now();
            let system = InfoSystem::new(&batch, &p_inv)?;
            let e = x.boxminus(&prior);
            let step = system.step(&p_inv, &e);
            if !step.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure("state update is not finite".into()));
            }
            x = x.boxplus(&step);
            last_system = Some(system);
            report.timing.solve_ms += ms_since(t);
            if alpha == 0 {
                // K d = step + e: the correction relative to the prior implied
                // by the innovation at this linearisation point
                first_kd = Some((step + e).norm());
            }
            if step.norm() < config.eps_inner {
                break;
            }
        }
        report.inner_iters.push(inner);
        if alpha == 0 {
            report.innovation_norm = first_kd;
        }
        if x.boxminus(&x_outer).norm() < config.eps_outer {
            report.outer_converged = true;
            break;
        }
    }

    let system = last_system.expect("at least one inner iteration ran");
    let cov = system.posterior();
    if !x.is_finite() || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("posterior is not finite".into()));
    }
    Ok(UpdateOutput {
        state: x,
        cov,
        deskewed,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{Pose, Rotation, Vec3};
    use crate::map::PlaneParams;
    use crate::sim::{simulate_scan, LidarModel, ProfileKind, ScanPattern, TrajectoryProfile, World};
    use crate::state::initial_covariance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn to_cov(m: &DMatrix<f64>) -> Covariance {
        Covariance::from_column_slice(m.as_slice())
    }

    #[test]
    fn gain_identity_example() {
        let h = DMatrix::identity(DIM, DIM);
        let r = DVector::from_element(DIM, 1.0);
        let k = kalman_gain(&h, &r, &Covariance::identity()).unwrap();
        assert!((k.gain - DMatrix::identity(DIM, DIM) * 0.5).amax() < 1e-12);
        assert!(!k.regularized);
    }

    #[test]
    fn gain_vanishes_for_huge_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = DMatrix::from_fn(30, DIM, |_, _| rng.random_range(-1.0..1.0));
        let r = DVector::from_element(30, 1e12);
        let k = kalman_gain(&h, &r, &to_cov(&random_spd(&mut rng, DIM))).unwrap();
        assert!(k.gain.amax() < 1e-9);
    }

    #[test]
    fn gain_matches_measurement_space_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let m = 200;
            let h = DMatrix::from_fn(m, DIM, |_, _| rng.random_range(-1.0..1.0));
            let r = DVector::from_fn(m, |_, _| rng.random_range(0.5..2.0));
            let p = random_spd(&mut rng, DIM);
            // K = P Hᵀ (H P Hᵀ + R)⁻¹
            let s = &h * &p * h.transpose() + DMatrix::from_diagonal(&r);
            let oracle = &p * h.transpose() * s.try_inverse().unwrap();
            let k = kalman_gain(&h, &r, &to_cov(&p)).unwrap();
            let rel = (&k.gain - &oracle).amax() / oracle.amax();
            assert!(rel < 1e-9, "relative error {rel}");
        }
    }

    #[test]
    fn gain_rejects_bad_shapes() {
        let h = DMatrix::zeros(3, 6);
        assert!(kalman_gain(&h, &DVector::from_element(3, 1.0), &Covariance::identity()).is_err());
        let h = DMatrix::zeros(3, DIM);
        assert!(kalman_gain(&h, &DVector::from_element(2, 1.0), &Covariance::identity()).is_err());
        assert!(kalman_gain(&h, &DVector::from_element(3, 0.0), &Covariance::identity()).is_err());
    }

    #[test]
    fn singular_prior_is_regularized() {
        let h = DMatrix::identity(DIM, DIM);
        let r = DVector::from_element(DIM, 1.0);
        let k = kalman_gain(&h, &r, &Covariance::zeros()).unwrap();
        assert!(k.regularized);
        assert!(k.gain.amax() < 1e-9);
    }

    #[test]
    fn noise_scale_examples() {
        let oracle = |n: f64, a: f64, g: f64| 100.0 / (1.0 + f64::exp(g - a * n)) + 0.01;
        assert!((noise_scale(0.1, 50.0, 5.0) - 50.01).abs() < 1e-12);
        let s = noise_scale(0.0, 50.0, 20.0);
        assert!((s - oracle(0.0, 50.0, 20.0)).abs() < 1e-15);
        assert!(s > 0.01 && s < 0.01 + 1e-6);
        assert!((noise_scale(1e6, 50.0, 5.0) - 100.01).abs() < 1e-12);
        assert_eq!(noise_scale(0.0, 50.0, 1e6), 0.01);
    }

    #[test]
    fn noise_scale_is_monotone_and_bounded() {
        let mut prev = 0.0;
        for i in 0..2000 {
            let s = noise_scale(i as f64 * 1e-3, 50.0, 5.0);
            assert!(s > 0.01 - 1e-15 && s < 100.01 + 1e-12);
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn adapt_uses_gain_times_innovation() {
        let k = DMatrix::identity(DIM, 2) * 0.5;
        let d = DVector::from_column_slice(&[0.12, 0.16]);
        let cfg = FilterConfig {
            alpha_gain: 50.0,
            gamma_offset: 5.0,
            omega_alpha_gain: Some(0.0),
            ..Default::default()
        };
        let a = adapt_process_noise(&k, &d, 0.1, &cfg).unwrap();
        assert!((a.innovation_norm - 0.1).abs() < 1e-15);
        assert!((a.scale_v - 50.01).abs() < 1e-12);
        let omega_oracle = 100.0 / (1.0 + f64::exp(5.0)) + 0.01;
        assert!((a.scale_omega - omega_oracle).abs() < 1e-12);
        assert!(adapt_process_noise(&k, &DVector::zeros(3), 0.1, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        assert!(FilterConfig { max_outer: 0, ..Default::default() }.validate().is_err());
        assert!(FilterConfig { eps_inner: 0.0, ..Default::default() }.validate().is_err());
        assert!(FilterConfig { q_scale: f64::NAN, ..Default::default() }.validate().is_err());
    }

    struct Scene {
        map: MapIndex,
        scan: Scan,
        truth: Pose,
    }

    fn static_scene() -> Scene {
        let world = World::room();
        let prof = TrajectoryProfile::preset(ProfileKind::Static, "room", 2.0).unwrap();
        let dense = LidarModel {
            pattern: ScanPattern::quasi_random(),
            points_per_scan: 20_000,
            ..Default::default()
        };
        let mut map = MapIndex::new(None);
        let mut truth = Pose::identity();
        for frame in 0..4 {
            let sim = simulate_scan(&world, &prof, &dense, frame).unwrap();
            truth = sim.pose_end;
            let pts: Vec<Vec3> = sim.scan.points.iter().map(|p| truth.transform_point(&p.xyz)).collect();
            map.insert_scan(&pts);
        }
        let lidar = LidarModel {
            points_per_scan: 2000,
            ..Default::default()
        };
        let scan = simulate_scan(&world, &prof, &lidar, 6).unwrap().scan;
        Scene { map, scan, truth }
    }

    fn tight_config() -> FilterConfig {
        FilterConfig {
            eps_outer: 1e-9,
            eps_inner: 1e-10,
            max_inner: 10,
            observation: ObservationParams {
                plane: PlaneParams {
                    plane_tol: 1e-6,
                    match_dist_max: 0.3,
                },
                range_sigma: 1e-3,
                max_residual: f64::INFINITY,
                ..Default::default()
            },
            alpha_gain: 50.0,
            gamma_offset: 5.0,
            ..Default::default()
        }
    }

    fn truth_state(p: &Pose) -> StateVector {
        StateVector {
            rotation: p.rotation,
            position: p.translation,
            ..Default::default()
        }
    }

    #[test]
    fn exact_prior_is_a_fixed_point() {
        let scene = static_scene();
        let x = truth_state(&scene.truth);
        let pred = Prediction::new(x, initial_covariance(), 0.1, MotionModel::Model1, 1.0, 1.0).unwrap();
        let out = iterate_update(&pred, &scene.scan, &scene.map, &tight_config()).unwrap();
        assert!(!out.report.degenerate);
        let err = out.state.boxminus(&x).norm();
        assert!(err < 1e-7, "moved by {err}");
        assert_eq!(out.report.outer_iters, 1);
        assert!(out.report.innovation_norm.unwrap() < 1e-7);
    }

    #[test]
    fn translated_prior_converges_to_truth() {
        let scene = static_scene();
        let truth = truth_state(&scene.truth);
        let mut prior_cov = initial_covariance();
        for i in 0..6 {
            prior_cov[(i, i)] = 1.0;
        }
        let mut start = truth;
        start.position += Vec3::new(0.1, 0.0, 0.0);
        start.rotation = start.rotation * Rotation::exp(&Vec3::new(0.0, 0.0, 0.01));
        // previous pose at the truth, so the scan carries no apparent motion
        let pred = Prediction {
            state: start,
            cov: prior_cov,
            ..Prediction::new(truth, prior_cov, 0.1, MotionModel::Model1, 1.0, 1.0).unwrap()
        };
        // each deskew pass halves the apparent in-scan motion
        let cfg = FilterConfig {
            adaptive_noise: false,
            max_outer: 40,
            ..tight_config()
        };
        let out = iterate_update(&pred, &scene.scan, &scene.map, &cfg).unwrap();
        assert!(out.report.outer_converged);
        let pos_err = (out.state.position - truth.position).norm();
        let rot_err = out.state.rotation.angle_to(&truth.rotation);
        assert!(pos_err < 1e-6, "position error {pos_err}");
        assert!(rot_err < 1e-6, "rotation error {rot_err}");
        assert!(out.report.matched_count > 1000);
    }

    #[test]
    fn posterior_is_tighter_and_symmetric() {
        let scene = static_scene();
        let x = truth_state(&scene.truth);
        let pred = Prediction::new(x, initial_covariance(), 0.1, MotionModel::Model1, 1.0, 1.0).unwrap();
        let out = iterate_update(&pred, &scene.scan, &scene.map, &FilterConfig::default()).unwrap();
        assert!(out.cov.trace() <= pred.cov.trace());
        assert_eq!(out.cov, out.cov.transpose());
        assert!(out.cov.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn iteration_caps_are_respected() {
        let scene = static_scene();
        let mut start = truth_state(&scene.truth);
        start.position.x += 0.05;
        let pred = Prediction::new(start, initial_covariance(), 0.1, MotionModel::Model1, 1.0, 1.0).unwrap();
        let cfg = FilterConfig {
            max_outer: 1,
            max_inner: 1,
            ..tight_config()
        };
        let out = iterate_update(&pred, &scene.scan, &scene.map, &cfg).unwrap();
        assert_eq!(out.report.outer_iters, 1);
        assert_eq!(out.report.inner_iters, vec![1]);
        assert!(!out.report.adapted);
        let cfg = FilterConfig {
            max_outer: 3,
            max_inner: 2,
            ..tight_config()
        };
        let out = iterate_update(&pred, &scene.scan, &scene.map, &cfg).unwrap();
        assert!(out.report.outer_iters <= 3);
        assert!(out.report.inner_iters.iter().all(|n| *n <= 2));
    }

    #[test]
    fn adaptation_rescales_noise_after_first_pass() {
        let scene = static_scene();
        let mut start = truth_state(&scene.truth);
        start.position.x += 0.2;
        let pred = Prediction::new(start, initial_covariance(), 0.1, MotionModel::Model1, 1.0, 1.0).unwrap();
        let out = iterate_update(&pred, &scene.scan, &scene.map, &tight_config()).unwrap();
        assert!(out.report.outer_iters >= 2);
        assert!(out.report.adapted);
        let kd = out.report.innovation_norm.unwrap();
        assert!(kd > 0.05);
        assert!((out.report.q_scale_v - noise_scale(kd, 50.0, 5.0)).abs() < 1e-12);
        let fixed = FilterConfig {
            adaptive_noise: false,
            ..tight_config()
        };
        let out = iterate_update(&pred, &scene.scan, &scene.map, &fixed).unwrap();
        assert!(!out.report.adapted);
        assert_eq!(out.report.q_scale_v, 1.0);
    }

    #[test]
    fn degenerate_update_returns_prior() {
        let scene = static_scene();
        let mut start = truth_state(&scene.truth);
        start.position += Vec3::new(500.0, 0.0, 0.0);
        let pred = Prediction::new(start, initial_covariance(), 0.1, MotionModel::Model1, 1.0, 1.0).unwrap();
        let out = iterate_update(&pred, &scene.scan, &scene.map, &FilterConfig::default()).unwrap();
        assert!(out.report.degenerate);
        assert_eq!(out.state, pred.state);
        assert_eq!(out.cov, pred.cov);
    }

    #[test]
    fn single_outer_pass_equals_classical_iterated_update() {
        let scene = static_scene();
        let mut start = truth_state(&scene.truth);
        start.position += Vec3::new(0.04, -0.03, 0.02);
        let pred = Prediction::new(start, initial_covariance(), 0.1, MotionModel::Model1, 1.0, 1.0).unwrap();
        let cfg = FilterConfig {
            max_outer: 1,
            max_inner: 4,
            eps_inner: 1e-12,
            adaptive_noise: false,
            ..Default::default()
        };
        let out = iterate_update(&pred, &scene.scan, &scene.map, &cfg).unwrap();

        // measurement-space iterated update on the same (static) scan
        let p = DMatrix::from_column_slice(DIM, DIM, pred.cov.as_slice());
        let mut x = pred.state;
        let mut kh = DMatrix::zeros(DIM, DIM);
        for _ in 0..4 {
            let batch = build_measurements(&scene.scan, &x, &scene.map, &cfg.observation).unwrap();
            let h = batch.jacobian();
            let k = kalman_gain(&h, &batch.noise_vector(), &pred.cov).unwrap().gain;
            let s = &h * &p * h.transpose() + DMatrix::from_diagonal(&batch.noise_vector());
            let k_oracle = &p * h.transpose() * s.try_inverse().unwrap();
            assert!((&k - &k_oracle).amax() < 1e-6 * k_oracle.amax());
            let e = DVector::from_column_slice(x.boxminus(&pred.state).as_slice());
            kh = &k_oracle * &h;
            let step = -(&k_oracle * batch.residual_vector())
                - (DMatrix::identity(DIM, DIM) - &kh) * e;
            x = x.boxplus(&ErrorState::from_column_slice(step.as_slice()));
        }
        let cov_oracle = (DMatrix::identity(DIM, DIM) - kh) * &p;
        assert!(out.state.boxminus(&x).norm() < 1e-9);
        let cov = DMatrix::from_column_slice(DIM, DIM, out.cov.as_slice());
        assert!((cov - cov_oracle).amax() < 1e-9);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let scene = static_scene();
        let mut start = truth_state(&scene.truth);
        start.position.y += 0.1;
        let pred = Prediction::new(start, initial_covariance(), 0.1, MotionModel::Model1, 1.0, 1.0).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| iterate_update(&pred, &scene.scan, &scene.map, &FilterConfig::default()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.state, b.state);
        assert_eq!(a.cov, b.cov);
    }
}
