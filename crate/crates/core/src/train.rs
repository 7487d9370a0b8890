//! Sublevel-set separation training and level calibration.
//!
//! With `g(goal) = 0` and `V(x) = lambda/2 |g(x)|^2`, training asks for
//! `V(x_i) <= c_i` on safe samples and `V(x_j) >= c_bar + delta` on unsafe
//! ones through squared hinge losses. Calibration then rescales `g` so the
//! level set `V = c` lands on the unit sphere.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilip::{BiLipMap, Diffeomorphism};
use crate::error::{FlowError, TrainError};
use crate::roadmap::{DemoTriple, LabeledDatasets};
use crate::StateVec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one, reached by
    /// cosine decay over the run. `1.0` keeps it constant.
    #[serde(default = "one")]
    pub lr_final_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the demonstration loss.
    pub rho: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_final_ratio: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            rho: 0.0,
            lambda: 1.0,
            seed: 0,
        }
    }
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    /// Learning rate at the start of `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.learning_rate * (self.lr_final_ratio + (1.0 - self.lr_final_ratio) * cos)
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive"));
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return Err(TrainError::InvalidConfig("lr_final_ratio must lie in (0, 1]"));
        }
        if !(self.lambda > 0.0) {
            return Err(TrainError::InvalidConfig("lambda must be positive"));
        }
        if !(self.rho >= 0.0) {
            return Err(TrainError::InvalidConfig("rho must be nonnegative"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// `lambda/2 |g(x)|^2`.
pub fn lyapunov_value<D: Diffeomorphism + ?Sized>(map: &D, x: &StateVec, lambda: f64) -> f64 {
    0.5 * lambda * map.forward(x).norm_squared()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub safe: f64,
    pub unsafe_: f64,
}

/// Mean squared hinge losses over the full datasets.
pub fn separation_loss(map: &BiLipMap, data: &LabeledDatasets, lambda: f64) -> LossParts {
    let mean = |items: &[(StateVec, f64)], excess: &dyn Fn(f64, f64) -> f64| {
        if items.is_empty() {
            0.0
        } else {
            items
                .iter()
                .map(|(x, c)| excess(lyapunov_value(map, x, lambda), *c).max(0.0).powi(2))
                .sum::<f64>()
                / items.len() as f64
        }
    };
    let safe = mean(&data.safe, &|v, c| v - c);
    let unsafe_ = mean(&data.unsafe_, &|v, c| c - v);
    LossParts {
        total: safe + unsafe_,
        safe,
        unsafe_,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Safe,
    Unsafe,
}

/// Loss value and goal-centred gradient over weighted samples.
fn weighted_separation_grad(
    map: &BiLipMap,
    goal: &StateVec,
    items: &[(&StateVec, f64, Side, f64)],
    lambda: f64,
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut cots = Vec::with_capacity(items.len());
    for &(x, c, side, weight) in items {
        let z = map.forward(x);
        let v = 0.5 * lambda * z.norm_squared();
        let excess = match side {
            Side::Safe => v - c,
            Side::Unsafe => c - v,
        };
        if excess <= 0.0 {
            continue;
        }
        loss += weight * excess * excess;
        // d/dz of excess^2 = 2 excess * (+-) lambda z
        let sign = if side == Side::Safe { 1.0 } else { -1.0 };
        cots.push((x, z * (2.0 * weight * excess * sign * lambda)));
    }
    if cots.is_empty() {
        return (loss, vec![0.0; map.num_params()]);
    }
    (loss, map.centered_param_gradient(goal, &cots))
}

/// Full-batch separation loss and its gradient with respect to the raw
/// parameters; the shift follows the goal.
pub fn separation_loss_grad(
    map: &BiLipMap,
    data: &LabeledDatasets,
    lambda: f64,
) -> Result<(LossParts, Vec<f64>), TrainError> {
    let goal = map.goal().ok_or(TrainError::NoGoal)?;
    let ws = 1.0 / data.safe.len().max(1) as f64;
    let wu = 1.0 / data.unsafe_.len().max(1) as f64;
    let items: Vec<_> = data
        .safe
        .iter()
        .map(|(x, c)| (x, *c, Side::Safe, ws))
        .chain(data.unsafe_.iter().map(|(x, c)| (x, *c, Side::Unsafe, wu)))
        .collect();
    let (_, grad) = weighted_separation_grad(map, &goal, &items, lambda);
    Ok((separation_loss(map, data, lambda), grad))
}

fn demo_residual(map: &BiLipMap, d: &DemoTriple, lambda: f64) -> Result<(StateVec, StateVec, DMatrix<f64>, StateVec), FlowError> {
    let (z, g) = map.eval(&d.x);
    let zs = map.forward(&d.x_star);
    let lu = g.clone().lu();
    let f = lu.solve(&((zs - z) * lambda)).ok_or(FlowError::Singular)?;
    let e = &d.xdot - &f;
    Ok((e, f, g, StateVec::zeros(0)))
}

/// Mean squared velocity residual `|xdot_k - f(x_k, x_k*)|^2`.
pub fn demo_loss(map: &BiLipMap, demo: &[DemoTriple], lambda: f64) -> Result<f64, TrainError> {
    if demo.is_empty() {
        return Err(TrainError::EmptyData("demonstrations"));
    }
    let mut total = 0.0;
    for d in demo {
        let (e, ..) = demo_residual(map, d, lambda)?;
        total += e.norm_squared();
    }
    Ok(total / demo.len() as f64)
}

/// Demonstration loss and its parameter gradient. The linear solve is
/// differentiated with the adjoint rule: for `f = G^{-1} a`,
/// `a_bar = G^{-T} f_bar` and `G_bar = -a_bar f^T`.
pub fn demo_loss_grad(
    map: &BiLipMap,
    demo: &[DemoTriple],
    lambda: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    demo_loss_grad_weighted(map, demo, lambda, 1.0 / demo.len().max(1) as f64)
        .and_then(|r| if demo.is_empty() { Err(TrainError::EmptyData("demonstrations")) } else { Ok(r) })
}

fn demo_loss_grad_weighted(
    map: &BiLipMap,
    demo: &[DemoTriple],
    lambda: f64,
    weight: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut loss = 0.0;
    let mut grad = Vec::new();
    for d in demo {
        let (e, f, g, _) = demo_residual(map, d, lambda)?;
        loss += weight * e.norm_squared();
        let f_bar = &e * (-2.0 * weight);
        let a_bar = g
            .transpose()
            .lu()
            .solve(&f_bar)
            .ok_or(FlowError::Singular)?;
        let g_bar = -(&a_bar * f.transpose());
        // a = lambda (g(x*) - g(x))
        let cot_star = &a_bar * lambda;
        let cot_x = -&cot_star;
        map.field_param_gradient(&d.x, &g_bar, &cot_x, &d.x_star, &cot_star, &mut grad);
    }
    if grad.is_empty() {
        grad = vec![0.0; map.num_params()];
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_total: Vec<f64>,
    pub loss_safe: Vec<f64>,
    pub loss_unsafe: Vec<f64>,
    pub loss_task: Vec<f64>,
    /// `max_i (V(x_i) - c_i)` over safe samples.
    pub max_safe_violation: f64,
    /// `min_j (V(x_j) - c_bar)` over unsafe samples.
    pub min_unsafe_margin: f64,
    /// Fraction of safe samples with `V <= c_i`.
    pub safe_satisfied: f64,
    /// Fraction of unsafe samples with `V >= c_bar`.
    pub unsafe_satisfied: f64,
    pub level_c: f64,
    pub ball_scale: f64,
    pub separated: bool,
    /// Not serialized, so report files stay reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Per-epoch loss curves as CSV.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,total,safe,unsafe,task\n");
        for i in 0..self.loss_total.len() {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                i + 1,
                self.loss_total[i],
                self.loss_safe[i],
                self.loss_unsafe[i],
                self.loss_task[i]
            ));
        }
        s
    }
}

/// Sets `out_scale` so that the farthest safe sample from the goal lands at
/// `|g| = sqrt(2 c_bar / lambda)`, matching the label range.
pub fn init_scale_from_data(map: &mut BiLipMap, data: &LabeledDatasets, lambda: f64) {
    let Some(goal) = map.goal() else { return };
    let far = data
        .safe
        .iter()
        .map(|(x, _)| (x - &goal).norm())
        .fold(0.0, f64::max);
    if far > 0.0 && data.c_bar > 0.0 {
        map.set_out_scale((2.0 * data.c_bar / lambda).sqrt() / far);
        map.recenter();
    }
}

/// Minibatch Adam over shuffled safe and unsafe samples. Each batch loss
/// is an unbiased estimate of `L_safe + L_unsafe` (+ `rho L_task`).
pub fn train(
    map: &BiLipMap,
    data: &LabeledDatasets,
    cfg: &TrainConfig,
) -> Result<(BiLipMap, TrainReport), TrainError> {
    cfg.validate()?;
    if data.safe.is_empty() {
        return Err(TrainError::EmptyData("safe samples"));
    }
    if data.unsafe_.is_empty() {
        log::warn!("training without unsafe samples");
    }
    let goal = map.goal().ok_or(TrainError::NoGoal)?;
    let start = Instant::now();
    let mut map = map.clone();
    map.set_ball_scale(1.0);
    map.recenter();
    let (m, n) = (data.safe.len(), data.unsafe_.len());
    let total = m + n;
    let use_demo = cfg.rho > 0.0 && !data.demo.is_empty();
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = map.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut report = TrainReport {
        loss_total: Vec::with_capacity(cfg.epochs),
        loss_safe: Vec::with_capacity(cfg.epochs),
        loss_unsafe: Vec::with_capacity(cfg.epochs),
        loss_task: Vec::with_capacity(cfg.epochs),
        max_safe_violation: 0.0,
        min_unsafe_margin: 0.0,
        safe_satisfied: 0.0,
        unsafe_satisfied: 0.0,
        level_c: 0.0,
        ball_scale: 1.0,
        separated: false,
        wall_clock_seconds: 0.0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        adam.set_learning_rate(cfg.learning_rate_at(epoch));
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scale = total as f64 / chunk.len() as f64;
            let items: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    if i < m {
                        let (x, c) = &data.safe[i];
                        (x, *c, Side::Safe, scale / m as f64)
                    } else {
                        let (x, c) = &data.unsafe_[i - m];
                        (x, *c, Side::Unsafe, scale / n as f64)
                    }
                })
                .collect();
            let (mut loss, mut grad) = weighted_separation_grad(&map, &goal, &items, cfg.lambda);
            if use_demo {
                // One demonstration per batch, cycling through the set.
                let k = (epoch * order.len().div_ceil(cfg.batch_size) + batch) % data.demo.len();
                let (dl, dg) = demo_loss_grad_weighted(&map, &data.demo[k..k + 1], cfg.lambda, cfg.rho)?;
                loss += dl;
                for (g, d) in grad.iter_mut().zip(dg) {
                    *g += d;
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            adam.step(&mut params, &grad);
            map.set_params(&params);
        }
        let parts = separation_loss(&map, data, cfg.lambda);
        let task = if use_demo { demo_loss(&map, &data.demo, cfg.lambda)? } else { 0.0 };
        let total_loss = parts.total + cfg.rho * task;
        if !total_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        report.loss_total.push(total_loss);
        report.loss_safe.push(parts.safe);
        report.loss_unsafe.push(parts.unsafe_);
        report.loss_task.push(task);
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            log::info!(
                "epoch {:>5}: total {:.3e} safe {:.3e} unsafe {:.3e} task {:.3e}",
                epoch + 1,
                total_loss,
                parts.safe,
                parts.unsafe_,
                task
            );
        }
    }
    fill_margins(&map, data, cfg.lambda, &mut report);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((map, report))
}

fn fill_margins(map: &BiLipMap, data: &LabeledDatasets, lambda: f64, report: &mut TrainReport) {
    let safe_ex: Vec<f64> = data
        .safe
        .iter()
        .map(|(x, c)| lyapunov_value(map, x, lambda) - c)
        .collect();
    let unsafe_margin: Vec<f64> = data
        .unsafe_
        .iter()
        .map(|(x, _)| lyapunov_value(map, x, lambda) - data.c_bar)
        .collect();
    report.max_safe_violation = safe_ex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    report.min_unsafe_margin = unsafe_margin.iter().copied().fold(f64::INFINITY, f64::min);
    report.safe_satisfied = safe_ex.iter().filter(|&&e| e <= 0.0).count() as f64 / safe_ex.len().max(1) as f64;
    report.unsafe_satisfied =
        unsafe_margin.iter().filter(|&&e| e >= 0.0).count() as f64 / unsafe_margin.len().max(1) as f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub level_c: f64,
    pub ball_scale: f64,
    /// `max_i (V(x_i) - c)` over safe samples (before rescaling).
    pub max_safe_excess: f64,
    /// `min_j (V(x_j) - c)` over unsafe samples (before rescaling).
    pub min_unsafe_margin: f64,
    /// Strict separation of the data at level `c`.
    pub separated: bool,
}

/// Picks `c = c_bar + delta/2` and rescales `g` by `r = sqrt(2c/lambda)` so
/// that `{V = c}` maps onto the unit sphere.
pub fn calibrate_level(
    map: &BiLipMap,
    data: &LabeledDatasets,
    lambda: f64,
    delta: f64,
) -> (BiLipMap, Calibration) {
    let mut unit = map.clone();
    unit.set_ball_scale(1.0);
    let c = data.c_bar + 0.5 * delta;
    let max_safe_excess = data
        .safe
        .iter()
        .map(|(x, _)| lyapunov_value(&unit, x, lambda) - c)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_unsafe_margin = data
        .unsafe_
        .iter()
        .map(|(x, _)| lyapunov_value(&unit, x, lambda) - c)
        .fold(f64::INFINITY, f64::min);
    let separated = max_safe_excess <= 0.0 && min_unsafe_margin > 0.0;
    if !separated {
        log::warn!(
            "data not separated at level {c:.4}: safe excess {max_safe_excess:.3e}, unsafe margin {min_unsafe_margin:.3e}; \
             safety holds for the learned set only"
        );
    }
    let r = (2.0 * c / lambda).sqrt();
    unit.set_ball_scale(r);
    (
        unit,
        Calibration {
            level_c: c,
            ball_scale: r,
            max_safe_excess,
            min_unsafe_margin,
            separated,
        },
    )
}

/// Train, then calibrate; the report carries the calibration outcome.
pub fn train_and_calibrate(
    map: &BiLipMap,
    data: &LabeledDatasets,
    cfg: &TrainConfig,
) -> Result<(BiLipMap, TrainReport), TrainError> {
    let (trained, mut report) = train(map, data, cfg)?;
    let (calibrated, cal) = calibrate_level(&trained, data, cfg.lambda, data.delta);
    report.level_c = cal.level_c;
    report.ball_scale = cal.ball_scale;
    report.separated = cal.separated;
    Ok((calibrated, report))
}
