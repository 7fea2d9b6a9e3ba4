//! Filter state, the two constant-velocity motion models and forward
//! propagation.
//!
//! Error-state ordering is fixed crate-wide as `(dtheta, dt, dv, domega)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{SMatrix, SVector, Vector6};

use crate::error::{Error, Result};
use crate::manifold::{hat, right_jacobian, Mat3, Pose, Rotation, Vec3};

pub const ROT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const OMEGA: usize = 9;
pub const DIM: usize = 12;

pub type ErrorState = SVector<f64, DIM>;
pub type Covariance = SMatrix<f64, DIM, DIM>;
pub type NoiseJacobian = SMatrix<f64, DIM, 6>;

/// Rotation and position of the LiDAR at frame end, global-frame velocity
/// and body-frame angular rate.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct StateVector {
    pub rotation: Rotation,
    pub position: Vec3,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
}

impl StateVector {
    pub fn identity() -> Self {
        StateVector::default()
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    /// `x ⊞ delta`: right-composed rotation, vector addition elsewhere.
    pub fn boxplus(&self, delta: &ErrorState) -> StateVector {
        let block = |i: usize| Vec3::new(delta[i], delta[i + 1], delta[i + 2]);
        let dtheta = block(ROT);
        let rotation = if dtheta == Vec3::zeros() {
            self.rotation
        } else {
            self.rotation * Rotation::exp(&dtheta)
        };
        StateVector {
            rotation,
            position: self.position + block(POS),
            velocity: self.velocity + block(VEL),
            angular_velocity: self.angular_velocity + block(OMEGA),
        }
    }

    /// `self ⊟ other`, the exact inverse of [`StateVector::boxplus`].
    pub fn boxminus(&self, other: &StateVector) -> ErrorState {
        let mut d = ErrorState::zeros();
        d.fixed_rows_mut::<3>(ROT)
            .copy_from(&(other.rotation.inverse() * self.rotation).log());
        d.fixed_rows_mut::<3>(POS)
            .copy_from(&(self.position - other.position));
        d.fixed_rows_mut::<3>(VEL)
            .copy_from(&(self.velocity - other.velocity));
        d.fixed_rows_mut::<3>(OMEGA)
            .copy_from(&(self.angular_velocity - other.angular_velocity));
        d
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite()
            && self
                .position
                .iter()
                .chain(self.velocity.iter())
                .chain(self.angular_velocity.iter())
                .all(|x| x.is_finite())
    }
}

pub fn state_boxplus(x: &StateVector, delta: &ErrorState) -> StateVector {
    x.boxplus(delta)
}

pub fn state_boxminus(a: &StateVector, b: &StateVector) -> ErrorState {
    a.boxminus(b)
}

/// Constant-velocity prior used between frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MotionModel {
    /// Constant global-frame linear velocity and body angular rate
    /// (handheld, aerial).
    #[default]
    Model1,
    /// Constant body-frame linear and angular velocity (ground robots).
    Model2,
}

impl FromStr for MotionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "model1" => Ok(MotionModel::Model1),
            "2" | "model2" => Ok(MotionModel::Model2),
            other => Err(Error::invalid(format!("unknown motion model '{other}'"))),
        }
    }
}

impl fmt::Display for MotionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MotionModel::Model1 => f.write_str("1"),
            MotionModel::Model2 => f.write_str("2"),
        }
    }
}

/// Diagonal covariance of the velocity / angular-rate random walk
/// `(n_v, n_omega)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessNoise {
    diagonal: Vector6<f64>,
}

impl ProcessNoise {
    pub fn new(velocity_var: f64, angular_var: f64) -> Result<Self> {
        for v in [velocity_var, angular_var] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("process noise variance {v}")));
            }
        }
        let mut diagonal = Vector6::zeros();
        diagonal.fixed_rows_mut::<3>(0).fill(velocity_var);
        diagonal.fixed_rows_mut::<3>(3).fill(angular_var);
        Ok(ProcessNoise { diagonal })
    }

    /// `Q_v = scale_v dt^2 I`, `Q_omega = scale_omega dt^2 I`.
    pub fn from_scales(scale_v: f64, scale_omega: f64, dt: f64) -> Result<Self> {
        ProcessNoise::new(scale_v * dt * dt, scale_omega * dt * dt)
    }

    pub fn zero() -> Self {
        ProcessNoise {
            diagonal: Vector6::zeros(),
        }
    }

    pub fn diagonal(&self) -> &Vector6<f64> {
        &self.diagonal
    }
}

/// Default prior for the bootstrap state.
pub fn initial_covariance() -> Covariance {
    let mut p = Covariance::zeros();
    for i in 0..3 {
        p[(ROT + i, ROT + i)] = 1e-4;
        p[(POS + i, POS + i)] = 1e-4;
        p[(VEL + i, VEL + i)] = 1.0;
        p[(OMEGA + i, OMEGA + i)] = 1.0;
    }
    p
}

pub fn symmetrize(p: &Covariance) -> Covariance {
    (p + p.transpose()) * 0.5
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("time step {dt} must be positive")))
    }
}

fn set_block(m: &mut Covariance, row: usize, col: usize, block: &Mat3) {
    m.fixed_view_mut::<3, 3>(row, col).copy_from(block);
}

/// `f(x, w)` for both models, with the random-walk noise `w = (n_v, n_omega)`.
pub(crate) fn transition_with_noise(
    x: &StateVector,
    dt: f64,
    model: MotionModel,
    noise: &Vector6<f64>,
) -> ErrorState {
    let n_v = Vec3::new(noise[0], noise[1], noise[2]);
    let n_w = Vec3::new(noise[3], noise[4], noise[5]);
    let mut f = ErrorState::zeros();
    f.fixed_rows_mut::<3>(ROT)
        .copy_from(&(x.angular_velocity * dt));
    match model {
        MotionModel::Model1 => {
            f.fixed_rows_mut::<3>(POS).copy_from(&(x.velocity * dt));
            f.fixed_rows_mut::<3>(VEL).copy_from(&(n_v * dt));
        }
        MotionModel::Model2 => {
            // (R ⊞ w dt) R^-1 rotates the velocity with the body.
            let rot = x.rotation.matrix();
            let delta_r = rot * Rotation::exp(&(x.angular_velocity * dt)).matrix() * rot.transpose();
            let turned = delta_r * x.velocity;
            f.fixed_rows_mut::<3>(POS).copy_from(&(turned * dt));
            f.fixed_rows_mut::<3>(VEL)
                .copy_from(&(turned - x.velocity + n_v * dt));
        }
    }
    f.fixed_rows_mut::<3>(OMEGA).copy_from(&(n_w * dt));
    f
}

/// Noise-free state increment `f(x, 0)`.
pub fn transition(x: &StateVector, dt: f64, model: MotionModel) -> Result<ErrorState> {
    check_dt(dt)?;
    Ok(transition_with_noise(x, dt, model, &Vector6::zeros()))
}

/// Analytic `(F_x, F_w)` evaluated at zero error and zero noise.
pub fn analytic_jacobians(x: &StateVector, dt: f64, model: MotionModel) -> (Covariance, NoiseJacobian) {
    let identity = Mat3::identity();
    let step = x.angular_velocity * dt;
    let e = Rotation::exp(&step).matrix();
    let jr_dt = right_jacobian(&step) * dt;

    let mut fx = Covariance::zeros();
    set_block(&mut fx, ROT, ROT, &e.transpose());
    set_block(&mut fx, ROT, OMEGA, &jr_dt);
    set_block(&mut fx, POS, POS, &identity);
    set_block(&mut fx, OMEGA, OMEGA, &identity);
    match model {
        MotionModel::Model1 => {
            set_block(&mut fx, POS, VEL, &(identity * dt));
            set_block(&mut fx, VEL, VEL, &identity);
        }
        MotionModel::Model2 => {
            // Both the position step and the new velocity are driven by
            // g = R E R^T v, so they share the partials of g.
            let rot = x.rotation.matrix();
            let body_v = rot.transpose() * x.velocity;
            let d_theta = rot * (e * hat(&body_v) - hat(&(e * body_v)));
            let d_v = rot * e * rot.transpose();
            let d_omega = -(rot * e * hat(&body_v) * jr_dt);
            set_block(&mut fx, POS, ROT, &(d_theta * dt));
            set_block(&mut fx, POS, VEL, &(d_v * dt));
            set_block(&mut fx, POS, OMEGA, &(d_omega * dt));
            set_block(&mut fx, VEL, ROT, &d_theta);
            set_block(&mut fx, VEL, VEL, &d_v);
            set_block(&mut fx, VEL, OMEGA, &d_omega);
        }
    }

    let mut fw = NoiseJacobian::zeros();
    fw.fixed_view_mut::<3, 3>(VEL, 0).copy_from(&(identity * dt));
    fw.fixed_view_mut::<3, 3>(OMEGA, 3).copy_from(&(identity * dt));
    (fx, fw)
}

/// Central-difference `(F_x, F_w)` of the ⊟-composed transition.
pub fn numeric_jacobians(x: &StateVector, dt: f64, model: MotionModel) -> (Covariance, NoiseJacobian) {
    const H: f64 = 1e-6;
    let zero = Vector6::zeros();
    let nominal = x.boxplus(&transition_with_noise(x, dt, model, &zero));
    let advance = |err: &ErrorState, noise: &Vector6<f64>| {
        let start = x.boxplus(err);
        start
            .boxplus(&transition_with_noise(&start, dt, model, noise))
            .boxminus(&nominal)
    };
    let mut fx = Covariance::zeros();
    for i in 0..DIM {
        let mut d = ErrorState::zeros();
        d[i] = H;
        let col = (advance(&d, &zero) - advance(&(-d), &zero)) / (2.0 * H);
        fx.set_column(i, &col);
    }
    let mut fw = NoiseJacobian::zeros();
    for i in 0..6 {
        let mut n = Vector6::zeros();
        n[i] = H;
        let col = (advance(&ErrorState::zeros(), &n) - advance(&ErrorState::zeros(), &(-n))) / (2.0 * H);
        fw.set_column(i, &col);
    }
    (fx, fw)
}

/// Transition Jacobians used by propagation. Built with the `fd-jacobians`
/// feature these come from [`numeric_jacobians`].
pub fn jacobians(x: &StateVector, dt: f64, model: MotionModel) -> Result<(Covariance, NoiseJacobian)> {
    check_dt(dt)?;
    if cfg!(feature = "fd-jacobians") {
        Ok(numeric_jacobians(x, dt, model))
    } else {
        Ok(analytic_jacobians(x, dt, model))
    }
}

pub fn jacobian_f_x(x: &StateVector, dt: f64, model: MotionModel) -> Result<Covariance> {
    jacobians(x, dt, model).map(|(fx, _)| fx)
}

pub fn jacobian_f_w(x: &StateVector, dt: f64, model: MotionModel) -> Result<NoiseJacobian> {
    jacobians(x, dt, model).map(|(_, fw)| fw)
}

/// One prediction step: `x̂ = x̄ ⊞ f(x̄, 0)`, `P̂ = F_x P̄ F_xᵀ + F_w Q F_wᵀ`.
pub fn propagate(
    x: &StateVector,
    p: &Covariance,
    q: &ProcessNoise,
    dt: f64,
    model: MotionModel,
) -> Result<(StateVector, Covariance)> {
    let f = transition(x, dt, model)?;
    let (fx, fw) = jacobians(x, dt, model)?;
    let q_mat = SMatrix::<f64, 6, 6>::from_diagonal(q.diagonal());
    let p_next = symmetrize(&(fx * p * fx.transpose() + fw * q_mat * fw.transpose()));
    if p_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure(
            "propagated covariance is not finite".into(),
        ));
    }
    let x_next = x.boxplus(&f);
    if !x_next.is_finite() {
        return Err(Error::NumericFailure("propagated state is not finite".into()));
    }
    Ok((x_next, p_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn v3(rng: &mut impl Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn random_state(rng: &mut impl Rng) -> StateVector {
        StateVector {
            rotation: Rotation::exp(&v3(rng, 2.0)),
            position: v3(rng, 10.0),
            velocity: v3(rng, 3.0),
            angular_velocity: v3(rng, 2.0),
        }
    }

    #[test]
    fn boxplus_zero_is_identity_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = random_state(&mut rng);
            assert_eq!(x.boxplus(&ErrorState::zeros()), x);
            let mut d = ErrorState::zeros();
            for i in 0..DIM {
                d[i] = rng.random_range(-1.0..1.0);
            }
            assert!((x.boxplus(&d).boxminus(&x) - d).norm() < 1e-9);
        }
    }

    #[test]
    fn boxplus_is_not_additive_on_rotation() {
        let x = StateVector::identity();
        let mut d1 = ErrorState::zeros();
        let mut d2 = ErrorState::zeros();
        d1[0] = 0.5;
        d2[1] = 0.5;
        let sequential = x.boxplus(&d1).boxplus(&d2);
        let summed = x.boxplus(&(d1 + d2));
        assert!(sequential.rotation.angle_to(&summed.rotation) > 1e-3);
    }

    #[test]
    fn zero_motion_gives_zero_increment() {
        let x = StateVector {
            rotation: Rotation::exp(&Vec3::new(0.2, 0.1, -0.3)),
            ..Default::default()
        };
        for model in [MotionModel::Model1, MotionModel::Model2] {
            assert_eq!(transition(&x, 0.1, model).unwrap(), ErrorState::zeros());
        }
    }

    #[test]
    fn model1_translation_step() {
        let x = StateVector {
            velocity: Vec3::new(1.0, 0.0, 0.0),
            ..Default::default()
        };
        let f = transition(&x, 0.1, MotionModel::Model1).unwrap();
        assert_relative_eq!(f.fixed_rows::<3>(POS).into_owned(), Vec3::new(0.1, 0.0, 0.0));
        assert_eq!(f.fixed_rows::<3>(ROT).into_owned(), Vec3::zeros());
    }

    #[test]
    fn model2_quarter_turn() {
        let x = StateVector {
            velocity: Vec3::new(1.0, 0.0, 0.0),
            angular_velocity: Vec3::new(0.0, 0.0, FRAC_PI_2),
            ..Default::default()
        };
        let f = transition(&x, 1.0, MotionModel::Model2).unwrap();
        // Oracle: explicit rotation matrix about z by pi/2.
        let rz = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let turned = rz * x.velocity;
        assert_relative_eq!(f.fixed_rows::<3>(ROT).into_owned(), Vec3::new(0.0, 0.0, FRAC_PI_2), epsilon = 1e-12);
        assert_relative_eq!(f.fixed_rows::<3>(POS).into_owned(), turned, epsilon = 1e-12);
        assert_relative_eq!(f.fixed_rows::<3>(POS).into_owned(), Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(f.fixed_rows::<3>(VEL).into_owned(), Vec3::new(-1.0, 1.0, 0.0), epsilon = 1e-12);
        assert_eq!(f.fixed_rows::<3>(OMEGA).into_owned(), Vec3::zeros());
    }

    #[test]
    fn non_positive_dt_rejected() {
        let x = StateVector::identity();
        assert!(transition(&x, 0.0, MotionModel::Model1).is_err());
        assert!(transition(&x, -1.0, MotionModel::Model2).is_err());
        assert!(jacobians(&x, 0.0, MotionModel::Model1).is_err());
        let p = Covariance::zeros();
        assert!(propagate(&x, &p, &ProcessNoise::zero(), 0.0, MotionModel::Model1).is_err());
    }

    #[test]
    fn models_agree_without_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut x = random_state(&mut rng);
            x.angular_velocity = Vec3::zeros();
            let f1 = transition(&x, 0.1, MotionModel::Model1).unwrap();
            let f2 = transition(&x, 0.1, MotionModel::Model2).unwrap();
            assert!((f1 - f2).norm() < 1e-12);
            // The noise Jacobians coincide; F_x still differs in the omega
            // column because perturbing omega turns the Model2 velocity.
            let (_, b1) = analytic_jacobians(&x, 0.1, MotionModel::Model1);
            let (_, b2) = analytic_jacobians(&x, 0.1, MotionModel::Model2);
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn model1_jacobian_blocks() {
        let x = StateVector::identity();
        let (fx, fw) = analytic_jacobians(&x, 0.1, MotionModel::Model1);
        let mut expected = Covariance::identity();
        for i in 0..3 {
            expected[(POS + i, VEL + i)] = 0.1;
            expected[(ROT + i, OMEGA + i)] = 0.1;
        }
        assert_relative_eq!(fx, expected, epsilon = 1e-15);
        for r in 0..DIM {
            for c in 0..6 {
                let want = if (r >= VEL && r - VEL == c) || (r >= OMEGA && r - OMEGA + 3 == c) {
                    0.1
                } else {
                    0.0
                };
                assert_relative_eq!(fw[(r, c)], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn static_propagation_grows_only_rate_blocks() {
        let q = 0.3;
        let dt = 0.1;
        let noise = ProcessNoise::new(q, q).unwrap();
        let (x, p) = propagate(&StateVector::identity(), &Covariance::zeros(), &noise, dt, MotionModel::Model2).unwrap();
        assert_eq!(x, StateVector::identity());
        for r in 0..DIM {
            for c in 0..DIM {
                let want = if r == c && r >= VEL { q * dt * dt } else { 0.0 };
                assert_relative_eq!(p[(r, c)], want, epsilon = 1e-18);
            }
        }
    }

    #[test]
    fn zero_covariance_and_noise_stay_zero() {
        let x = StateVector {
            velocity: Vec3::new(1.0, 2.0, 0.0),
            angular_velocity: Vec3::new(0.0, 0.1, 0.3),
            ..Default::default()
        };
        let (xn, p) = propagate(&x, &Covariance::zeros(), &ProcessNoise::zero(), 0.1, MotionModel::Model1).unwrap();
        assert_eq!(p, Covariance::zeros());
        assert_eq!(xn, x.boxplus(&transition(&x, 0.1, MotionModel::Model1).unwrap()));
    }

    #[test]
    fn propagated_covariance_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let a = SMatrix::<f64, DIM, DIM>::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let p = a * a.transpose();
            let q = ProcessNoise::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)).unwrap();
            for model in [MotionModel::Model1, MotionModel::Model2] {
                let (_, pn) = propagate(&x, &p, &q, rng.random_range(0.01..0.2), model).unwrap();
                assert!((pn - pn.transpose()).amax() < 1e-12);
                let eig = SymmetricEigen::new(pn).eigenvalues;
                assert!(eig.min() > -1e-9);
            }
        }
    }

    #[test]
    fn small_dt_limits_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_state(&mut rng);
        for dt in [1e-2, 1e-4, 1e-6] {
            for model in [MotionModel::Model1, MotionModel::Model2] {
                let (xn, _) = propagate(&x, &Covariance::zeros(), &ProcessNoise::zero(), dt, model).unwrap();
                // |v| <= 3 sqrt(3), |w| <= 2 sqrt(3)
                assert!(xn.boxminus(&x).norm() <= 12.0 * dt);
            }
        }
    }

    #[test]
    fn feature_selected_jacobians_match_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_state(&mut rng);
        let (fa, wa) = analytic_jacobians(&x, 0.1, MotionModel::Model2);
        let (fn_, wn) = numeric_jacobians(&x, 0.1, MotionModel::Model2);
        assert!((fa - fn_).amax() < 1e-6);
        assert!((wa - wn).amax() < 1e-6);
    }

    #[test]
    fn model_parses() {
        assert_eq!("1".parse::<MotionModel>().unwrap(), MotionModel::Model1);
        assert_eq!("model2".parse::<MotionModel>().unwrap(), MotionModel::Model2);
        assert!("3".parse::<MotionModel>().is_err());
    }
}
