//! Goal-conditioned dynamics built on a diffeomorphism `g`.
//!
//! The natural gradient field is `f(x, x*) = G(x)^{-1} lambda (g(x*) - g(x))`,
//! which is the pullback of the straight-line flow `z' = lambda (z* - z)`.
//! Closed-form rollouts sample that line and invert `g`; the other fields
//! (finite-time, plain gradient flow, moving goal) are integrated with
//! fixed-step RK4.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilip::{Diffeomorphism, DEFAULT_INVERSE_TOL, DEFAULT_MAX_ITER};
use crate::error::FlowError;
use crate::shear::{shear_forward, shear_inverse, ShearMap};
use crate::StateVec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// RK4 step.
    pub h: f64,
    /// Radius in Z-space inside which the finite-time field is zero.
    pub eps_ft: f64,
}

impl FlowConfig {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda > 0.0 && lambda.is_finite(), "lambda must be positive");
        Self {
            lambda,
            tol: DEFAULT_INVERSE_TOL,
            max_iter: DEFAULT_MAX_ITER,
            h: 0.01f64.min(0.1 / lambda),
            eps_ft: 1e-3,
        }
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    fn validate(&self) -> Result<(), FlowError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(FlowError::InvalidArgument("lambda must be positive"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(FlowError::InvalidArgument("step h must be positive"));
        }
        if !(self.eps_ft >= 0.0) {
            return Err(FlowError::InvalidArgument("deadzone must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Analytic,
    Rk4,
    FiniteTime,
    GradientBaseline,
    Tracking,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Analytic => "analytic",
            Method::Rk4 => "rk4",
            Method::FiniteTime => "finite-time",
            Method::GradientBaseline => "gradient-baseline",
            Method::Tracking => "tracking",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVec>,
    /// Fixed goal, or the final goal of a moving-goal rollout.
    pub goal: StateVec,
    /// Goal at each sample for moving-goal rollouts.
    pub goal_samples: Option<Vec<StateVec>>,
    pub lambda: f64,
    pub tol: f64,
    pub method: Method,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn goal_at(&self, i: usize) -> &StateVec {
        self.goal_samples.as_ref().map_or(&self.goal, |g| &g[i])
    }

    /// `x(t) - x*(t)` at every sample.
    pub fn errors(&self) -> Vec<StateVec> {
        (0..self.len()).map(|i| &self.states[i] - self.goal_at(i)).collect()
    }

    pub fn is_well_formed(&self) -> bool {
        self.times.len() == self.states.len()
            && self.times.windows(2).all(|w| w[0] < w[1])
            && self.states.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Solves `G v = rhs`, checking conditioning against the certificate.
fn pushforward_solve<D: Diffeomorphism + ?Sized>(
    map: &D,
    g: DMatrix<f64>,
    rhs: StateVec,
) -> Result<StateVec, FlowError> {
    if let Some(b) = map.cert_bounds() {
        let sv = g.singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if cond > 10.0 * b.distortion {
            return Err(FlowError::IllConditioned {
                cond,
                distortion: b.distortion,
            });
        }
    }
    g.lu().solve(&rhs).ok_or(FlowError::Singular)
}

/// Natural gradient field with a precomputed goal image `z_star = g(x*)`.
pub fn natural_field_z<D: Diffeomorphism + ?Sized>(
    map: &D,
    x: &StateVec,
    z_star: &StateVec,
    lambda: f64,
) -> Result<StateVec, FlowError> {
    let (z, g) = map.forward_jacobian(x);
    pushforward_solve(map, g, (z_star - z) * lambda)
}

/// `f(x, x*) = G(x)^{-1} lambda (g(x*) - g(x))`, equal to `-M(x)^{-1} grad V`.
pub fn natural_field<D: Diffeomorphism + ?Sized>(
    map: &D,
    x: &StateVec,
    x_star: &StateVec,
    cfg: &FlowConfig,
) -> Result<StateVec, FlowError> {
    natural_field_z(map, x, &map.forward(x_star), cfg.lambda)
}

/// Finite-time field: unit Z-space direction scaled by `lambda`, zero in
/// the deadzone `|z - z*| <= eps_ft`.
pub fn finite_time_field_z<D: Diffeomorphism + ?Sized>(
    map: &D,
    x: &StateVec,
    z_star: &StateVec,
    cfg: &FlowConfig,
) -> Result<StateVec, FlowError> {
    let (z, g) = map.forward_jacobian(x);
    let d = z_star - z;
    let dist = d.norm();
    if dist <= cfg.eps_ft {
        return Ok(StateVec::zeros(x.len()));
    }
    pushforward_solve(map, g, d * (cfg.lambda / dist))
}

pub fn finite_time_field<D: Diffeomorphism + ?Sized>(
    map: &D,
    x: &StateVec,
    x_star: &StateVec,
    cfg: &FlowConfig,
) -> Result<StateVec, FlowError> {
    finite_time_field_z(map, x, &map.forward(x_star), cfg)
}

/// Plain gradient flow of `V = lambda/2 |g(x) - g(x*)|^2`:
/// `-lambda G(x)^T (g(x) - g(x*))`.
pub fn gradient_flow_field_z<D: Diffeomorphism + ?Sized>(
    map: &D,
    x: &StateVec,
    z_star: &StateVec,
    lambda: f64,
) -> StateVec {
    let (z, g) = map.forward_jacobian(x);
    -(g.transpose() * (z - z_star)) * lambda
}

pub fn gradient_flow_field<D: Diffeomorphism + ?Sized>(
    map: &D,
    x: &StateVec,
    x_star: &StateVec,
    cfg: &FlowConfig,
) -> StateVec {
    gradient_flow_field_z(map, x, &map.forward(x_star), cfg.lambda)
}

/// Point on the straight line `z(t) = z0 e^{-lambda t} + z* (1 - e^{-lambda t})`.
pub fn z_line(z0: &StateVec, z_star: &StateVec, lambda: f64, t: f64) -> StateVec {
    let e = (-lambda * t).exp();
    z0 * e + z_star * (1.0 - e)
}

/// Closed-form rollout: samples the Z-space line and inverts `g` at each
/// time. Samples are independent and evaluated in parallel.
pub fn rollout_analytic<D: Diffeomorphism + ?Sized>(
    map: &D,
    x0: &StateVec,
    x_star: &StateVec,
    cfg: &FlowConfig,
    times: &[f64],
) -> Result<Trajectory, FlowError> {
    cfg.validate()?;
    if times.is_empty() || times[0] < 0.0 || times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FlowError::InvalidArgument("times must be increasing and start at t >= 0"));
    }
    let z0 = map.forward(x0);
    let zs = map.forward(x_star);
    let states = times
        .par_iter()
        .enumerate()
        .map(|(index, &t)| {
            map.inverse(&z_line(&z0, &zs, cfg.lambda, t), cfg.tol, cfg.max_iter)
                .map_err(|source| FlowError::Sample { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        goal: x_star.clone(),
        goal_samples: None,
        lambda: cfg.lambda,
        tol: cfg.tol,
        method: Method::Analytic,
    })
}

/// Classic fixed-step RK4 for a time-dependent field on `[0, t_end]`; the
/// last step is shortened to land on `t_end`.
pub fn integrate_field<F>(
    mut field: F,
    x0: &StateVec,
    t_end: f64,
    h: f64,
) -> Result<(Vec<f64>, Vec<StateVec>), FlowError>
where
    F: FnMut(f64, &StateVec) -> Result<StateVec, FlowError>,
{
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(FlowError::InvalidArgument("horizon must be positive"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(FlowError::InvalidArgument("step h must be positive"));
    }
    let steps = (t_end / h).ceil() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut t = 0.0;
    let mut x = x0.clone();
    times.push(t);
    states.push(x.clone());
    let mut k = 0usize;
    while t < t_end {
        k += 1;
        let t_next = (k as f64 * h).min(t_end);
        let dt = t_next - t;
        if dt <= 0.0 {
            break;
        }
        let k1 = field(t, &x)?;
        let k2 = field(t + 0.5 * dt, &(&x + &k1 * (0.5 * dt)))?;
        let k3 = field(t + 0.5 * dt, &(&x + &k2 * (0.5 * dt)))?;
        let k4 = field(t + dt, &(&x + &k3 * dt))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        t = t_next;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite { t });
        }
        times.push(t);
        states.push(x.clone());
    }
    Ok((times, states))
}

fn fixed_goal_rollout<D, F>(
    map: &D,
    x0: &StateVec,
    x_star: &StateVec,
    t_end: f64,
    cfg: &FlowConfig,
    method: Method,
    field: F,
) -> Result<Trajectory, FlowError>
where
    D: Diffeomorphism + ?Sized,
    F: Fn(&D, &StateVec, &StateVec) -> Result<StateVec, FlowError>,
{
    cfg.validate()?;
    let zs = map.forward(x_star);
    let (times, states) = integrate_field(|_, x| field(map, x, &zs), x0, t_end, cfg.h)?;
    Ok(Trajectory {
        times,
        states,
        goal: x_star.clone(),
        goal_samples: None,
        lambda: cfg.lambda,
        tol: cfg.tol,
        method,
    })
}

/// RK4 integration of the natural gradient field.
pub fn rollout_rk4<D: Diffeomorphism + ?Sized>(
    map: &D,
    x0: &StateVec,
    x_star: &StateVec,
    t_end: f64,
    cfg: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    fixed_goal_rollout(map, x0, x_star, t_end, cfg, Method::Rk4, |m, x, zs| {
        natural_field_z(m, x, zs, cfg.lambda)
    })
}

pub fn rollout_finite_time<D: Diffeomorphism + ?Sized>(
    map: &D,
    x0: &StateVec,
    x_star: &StateVec,
    t_end: f64,
    cfg: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    fixed_goal_rollout(map, x0, x_star, t_end, cfg, Method::FiniteTime, |m, x, zs| {
        finite_time_field_z(m, x, zs, cfg)
    })
}

pub fn rollout_gradient_flow<D: Diffeomorphism + ?Sized>(
    map: &D,
    x0: &StateVec,
    x_star: &StateVec,
    t_end: f64,
    cfg: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    fixed_goal_rollout(map, x0, x_star, t_end, cfg, Method::GradientBaseline, |m, x, zs| {
        Ok(gradient_flow_field_z(m, x, zs, cfg.lambda))
    })
}

/// A goal that moves over time.
pub trait GoalPath: Sync {
    fn at(&self, t: f64) -> StateVec;
}

impl<F: Fn(f64) -> StateVec + Sync> GoalPath for F {
    fn at(&self, t: f64) -> StateVec {
        self(t)
    }
}

/// Piecewise-linear goal path through timestamped waypoints; constant
/// before the first and after the last waypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointPath {
    pub times: Vec<f64>,
    pub points: Vec<StateVec>,
}

impl WaypointPath {
    pub fn new(times: Vec<f64>, points: Vec<StateVec>) -> Result<Self, FlowError> {
        if times.is_empty() || times.len() != points.len() {
            return Err(FlowError::InvalidArgument("waypoint times and points must match"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FlowError::InvalidArgument("waypoint times must increase"));
        }
        Ok(Self { times, points })
    }

    /// Largest segment speed.
    pub fn max_speed(&self) -> f64 {
        self.times
            .windows(2)
            .zip(self.points.windows(2))
            .map(|(t, p)| (&p[1] - &p[0]).norm() / (t[1] - t[0]))
            .fold(0.0, f64::max)
    }
}

impl GoalPath for WaypointPath {
    fn at(&self, t: f64) -> StateVec {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return self.points[0].clone();
        }
        if k == self.times.len() {
            return self.points[k - 1].clone();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let a = (t - t0) / (t1 - t0);
        &self.points[k - 1] * (1.0 - a) + &self.points[k] * a
    }
}

/// RK4 rollout of `x' = f(x, x*(t))` for a moving goal.
pub fn tracking_rollout<D: Diffeomorphism + ?Sized, P: GoalPath + ?Sized>(
    map: &D,
    x0: &StateVec,
    goal_path: &P,
    t_end: f64,
    cfg: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    cfg.validate()?;
    let (times, states) = integrate_field(
        |t, x| natural_field_z(map, x, &map.forward(&goal_path.at(t)), cfg.lambda),
        x0,
        t_end,
        cfg.h,
    )?;
    let goals: Vec<StateVec> = times.iter().map(|&t| goal_path.at(t)).collect();
    Ok(Trajectory {
        times,
        states,
        goal: goals.last().cloned().expect("at least one sample"),
        goal_samples: Some(goals),
        lambda: cfg.lambda,
        tol: cfg.tol,
        method: Method::Tracking,
    })
}

/// Outcome of running both flows on the shear example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example1Report {
    pub goal: Vec<f64>,
    pub gradient_flow_exits: bool,
    pub gradient_flow_max_z_norm: f64,
    /// Start that produced the gradient-flow maximum.
    pub worst_start: Vec<f64>,
    pub natural_flow_max_z_norm: f64,
}

fn max_z_norm(traj: &Trajectory) -> f64 {
    traj.states
        .iter()
        .map(|x| shear_forward(x).norm())
        .fold(0.0, f64::max)
}

/// Integrates the natural and the plain gradient flow of the shear map from
/// every start towards `goal` and reports the largest `|g(x(t))|` of each.
pub fn example1_compare(
    goal: &StateVec,
    starts: &[StateVec],
    t_end: f64,
    cfg: &FlowConfig,
) -> Result<Example1Report, FlowError> {
    if shear_forward(goal).norm() > 1.0 + 1e-12 {
        return Err(FlowError::InvalidArgument("goal must lie in the preimage of the unit disk"));
    }
    let map = ShearMap;
    let runs = starts
        .par_iter()
        .map(|x0| {
            let nat = rollout_rk4(&map, x0, goal, t_end, cfg)?;
            let grad = rollout_gradient_flow(&map, x0, goal, t_end, cfg)?;
            Ok((max_z_norm(&nat), max_z_norm(&grad)))
        })
        .collect::<Result<Vec<_>, FlowError>>()?;
    let mut report = Example1Report {
        goal: goal.iter().copied().collect(),
        gradient_flow_exits: false,
        gradient_flow_max_z_norm: 0.0,
        worst_start: Vec::new(),
        natural_flow_max_z_norm: 0.0,
    };
    for (x0, (nat, grad)) in starts.iter().zip(runs) {
        report.natural_flow_max_z_norm = report.natural_flow_max_z_norm.max(nat);
        if grad > report.gradient_flow_max_z_norm || report.worst_start.is_empty() {
            report.gradient_flow_max_z_norm = grad;
            report.worst_start = x0.iter().copied().collect();
        }
    }
    report.gradient_flow_exits = report.gradient_flow_max_z_norm > 1.0;
    Ok(report)
}

/// Points of the shear region given in Z-space polar coordinates.
pub fn shear_region_point(radius: f64, angle: f64) -> StateVec {
    shear_inverse(&StateVec::from_row_slice(&[radius * angle.cos(), radius * angle.sin()]))
}

/// Grid search for a goal whose plain gradient flow leaves the shear
/// region: goals on rings of radius `{0.25, 0.5, 0.75}` in Z-space, starts
/// on the boundary circle. Returns the goal with the largest excursion.
pub fn find_shear_exit(
    goal_angles: usize,
    start_angles: usize,
    t_end: f64,
    cfg: &FlowConfig,
) -> Result<(Example1Report, Vec<StateVec>), FlowError> {
    let starts: Vec<StateVec> = (0..start_angles)
        .map(|k| shear_region_point(1.0, std::f64::consts::TAU * k as f64 / start_angles as f64))
        .collect();
    let mut best: Option<Example1Report> = None;
    for &radius in &[0.25, 0.5, 0.75] {
        for k in 0..goal_angles {
            let angle = std::f64::consts::TAU * k as f64 / goal_angles as f64;
            let goal = shear_region_point(radius, angle);
            let report = example1_compare(&goal, &starts, t_end, cfg)?;
            let better = best
                .as_ref()
                .is_none_or(|b| report.gradient_flow_max_z_norm > b.gradient_flow_max_z_norm);
            let nat_max = best.as_ref().map_or(0.0, |b| b.natural_flow_max_z_norm);
            let nat = nat_max.max(report.natural_flow_max_z_norm);
            if better {
                best = Some(report);
            }
            if let Some(b) = best.as_mut() {
                b.natural_flow_max_z_norm = nat;
            }
        }
    }
    Ok((best.expect("grid is nonempty"), starts))
}
