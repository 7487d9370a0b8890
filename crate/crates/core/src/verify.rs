//! Executable certificates.
//!
//! Each check samples the relevant inequality and reports its worst signed
//! margin. A check passes when `worst_margin >= -tolerance`. Algebraic
//! identities use an absolute tolerance of `1e-9`; integrated quantities
//! carry a multiplicative slack instead.
//!
//! With `h(x) = 1 - |g(x)|^2` and the natural field,
//! `dh/dt = -2 g^T G f = 2 lambda (|z|^2 - z^T z*)`, so
//! `dh/dt + 2 lambda h = 2 lambda (1 - z^T z*)`, which is nonnegative on
//! the unit ball.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilip::{BiLipMap, CertBounds, Diffeomorphism};
use crate::env::Environment;
use crate::error::FlowError;
use crate::flow::{self, FlowConfig, Trajectory};
use crate::StateVec;

/// Absolute tolerance for algebraic identities.
pub const ALGEBRAIC_TOL: f64 = 1e-9;
/// Multiplicative slack for quantities produced by numerical integration.
pub const INTEGRATION_SLACK: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub name: String,
    /// Smallest signed margin over all samples; negative means violated.
    pub worst_margin: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub violations: usize,
    pub first_violation: Option<usize>,
    pub seed: Option<u64>,
    /// Reported-only checks never fail a run.
    pub asserted: bool,
    pub pass: bool,
    pub detail: BTreeMap<String, f64>,
}

impl CertificateReport {
    fn from_margins(name: &str, margins: &[f64], tolerance: f64, seed: Option<u64>) -> Self {
        let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
        let is_bad = |m: f64| !(m >= -tolerance);
        Self {
            name: name.to_string(),
            worst_margin: worst,
            tolerance,
            samples: margins.len(),
            violations: margins.iter().filter(|&&m| is_bad(m)).count(),
            first_violation: margins.iter().position(|&m| is_bad(m)),
            seed,
            asserted: true,
            pass: !is_bad(worst),
            detail: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.detail.insert(key.to_string(), value);
        self
    }

    /// True unless the check is asserted and failed.
    pub fn ok(&self) -> bool {
        self.pass || !self.asserted
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{:<28} {} margin {:+.3e} (tol {:.1e}, {} samples, {} violations)",
            self.name,
            if self.pass { "PASS" } else if self.asserted { "FAIL" } else { "WARN" },
            self.worst_margin,
            self.tolerance,
            self.samples,
            self.violations
        )
    }
}

fn uniform_in_box(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> StateVec {
    StateVec::from_iterator(lo.len(), lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..=*b)))
}

/// Samples `pairs` point pairs in the box `[lo, hi]` and checks
/// `mu <= |g(x1) - g(x2)| / |x1 - x2| <= nu` with relative slack `1e-9`.
///
/// Half the pairs are independent uniform points, half are close pairs at
/// separation `1e-3` of the box diagonal, which probe the local Jacobian.
/// Maps without a certificate only report the sampled extrema.
pub fn check_bilip<D: Diffeomorphism + ?Sized>(
    map: &D,
    lo: &[f64],
    hi: &[f64],
    pairs: usize,
    seed: u64,
) -> CertificateReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diag = lo.iter().zip(hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    let points: Vec<(StateVec, StateVec)> = (0..pairs)
        .map(|k| {
            let a = uniform_in_box(&mut rng, lo, hi);
            let b = if k % 2 == 0 {
                uniform_in_box(&mut rng, lo, hi)
            } else {
                let dir = uniform_in_box(&mut rng, &vec![-1.0; lo.len()], &vec![1.0; lo.len()]);
                let dn = dir.norm().max(1e-12);
                &a + dir * (1e-3 * diag / dn)
            };
            (a, b)
        })
        .filter(|(a, b)| (a - b).norm() > 0.0)
        .collect();
    let ratios: Vec<f64> = points
        .par_iter()
        .map(|(a, b)| (map.forward(a) - map.forward(b)).norm() / (a - b).norm())
        .collect();
    let lo_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let report = match map.cert_bounds() {
        Some(b) => {
            let margins: Vec<f64> = ratios
                .iter()
                .map(|r| (r / b.mu - 1.0).min(1.0 - r / b.nu))
                .collect();
            CertificateReport::from_margins("bilipschitz", &margins, ALGEBRAIC_TOL, Some(seed))
                .with("mu", b.mu)
                .with("nu", b.nu)
        }
        None => {
            let finite = ratios.iter().all(|r| r.is_finite() && *r > 0.0);
            let mut r = CertificateReport::from_margins(
                "bilipschitz-empirical",
                &[if finite { 0.0 } else { f64::NEG_INFINITY }],
                ALGEBRAIC_TOL,
                Some(seed),
            );
            r.samples = ratios.len();
            r.asserted = false;
            r
        }
    };
    report.with("empirical_mu", lo_ratio).with("empirical_nu", hi_ratio)
}

/// Round trips `g(g^{-1}(z)) = z` and the observed contraction per block.
///
/// The margin is the smaller of `residual_tol - |g(g^{-1}(z)) - z|` and
/// `max_tau + 0.05 - contraction`.
pub fn check_inverse(map: &BiLipMap, zs: &[StateVec], tol: f64, max_iter: usize, residual_tol: f64) -> CertificateReport {
    let max_tau = map.taus().fold(0.0, f64::max);
    let results: Vec<Result<(f64, f64, usize), String>> = zs
        .par_iter()
        .map(|z| {
            map.inverse_with_stats(z, tol, max_iter)
                .map(|(x, s)| {
                    let resid = (map.forward(&x) - z).norm();
                    (resid, s.max_contraction, s.iterations.iter().copied().max().unwrap_or(0))
                })
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut worst_resid: f64 = 0.0;
    let mut worst_contraction: f64 = 0.0;
    let mut worst_iters = 0usize;
    let margins: Vec<f64> = results
        .iter()
        .map(|r| match r {
            Ok((resid, c, it)) => {
                worst_resid = worst_resid.max(*resid);
                worst_contraction = worst_contraction.max(*c);
                worst_iters = worst_iters.max(*it);
                (residual_tol - resid).min(max_tau + 0.05 - c)
            }
            Err(_) => f64::NEG_INFINITY,
        })
        .collect();
    CertificateReport::from_margins("inverse", &margins, 0.0, None)
        .with("max_residual", worst_resid)
        .with("max_contraction", worst_contraction)
        .with("max_block_iterations", worst_iters as f64)
}

/// Barrier decay `dh/dt >= -2 lambda h` for samples inside the learned set
/// and goals in the ball. Samples with `|g(x)| > 1` are skipped and counted.
pub fn check_barrier<D: Diffeomorphism + ?Sized>(
    map: &D,
    lambda: f64,
    samples: &[StateVec],
    goals: &[StateVec],
) -> Result<CertificateReport, FlowError> {
    let inside: Vec<&StateVec> = samples.iter().filter(|x| map.forward(x).norm() <= 1.0).collect();
    let zstars: Vec<StateVec> = goals.iter().map(|g| map.forward(g)).collect();
    let margins = inside
        .par_iter()
        .map(|x| {
            let (z, g) = map.forward_jacobian(x);
            let h = 1.0 - z.norm_squared();
            zstars
                .iter()
                .map(|zs| {
                    let f = flow::natural_field_z(map, x, zs, lambda)?;
                    let hdot = -2.0 * z.dot(&(&g * f));
                    Ok(hdot + 2.0 * lambda * h)
                })
                .collect::<Result<Vec<f64>, FlowError>>()
        })
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    Ok(CertificateReport::from_margins("barrier-decay", &margins, ALGEBRAIC_TOL, None)
        .with("skipped_outside", (samples.len() - inside.len()) as f64)
        .with("goals", goals.len() as f64))
}

/// `dh/dt > 0` where `|g(x)| > 1`: the flow points back into the set.
/// Samples with `|g(x)| <= 1` are skipped.
pub fn check_barrier_exterior<D: Diffeomorphism + ?Sized>(
    map: &D,
    lambda: f64,
    samples: &[StateVec],
    goals: &[StateVec],
) -> Result<CertificateReport, FlowError> {
    let outside: Vec<&StateVec> = samples.iter().filter(|x| map.forward(x).norm() > 1.0).collect();
    let zstars: Vec<StateVec> = goals.iter().map(|g| map.forward(g)).collect();
    let margins = outside
        .par_iter()
        .map(|x| {
            let (z, g) = map.forward_jacobian(x);
            zstars
                .iter()
                .map(|zs| {
                    let f = flow::natural_field_z(map, x, zs, lambda)?;
                    Ok(-2.0 * z.dot(&(&g * f)))
                })
                .collect::<Result<Vec<f64>, FlowError>>()
        })
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    let mut r = CertificateReport::from_margins("barrier-exterior", &margins, 0.0, None)
        .with("skipped_inside", (samples.len() - outside.len()) as f64);
    // Strict inequality.
    r.pass = r.pass && r.worst_margin > 0.0;
    Ok(r)
}

/// `|x(t) - x*| <= (nu/mu) e^{-lambda t} |x0 - x*| (1 + 1e-6)` at every sample.
pub fn check_convergence(trajs: &[Trajectory], bounds: &CertBounds, lambda: f64) -> CertificateReport {
    let mut margins = Vec::new();
    for tr in trajs {
        let e0 = (&tr.states[0] - &tr.goal).norm();
        for (t, x) in tr.times.iter().zip(&tr.states) {
            let bound = bounds.distortion * (-lambda * t).exp() * e0 * (1.0 + 1e-6);
            margins.push(bound - (x - &tr.goal).norm());
        }
    }
    CertificateReport::from_margins("exponential-convergence", &margins, ALGEBRAIC_TOL, None)
        .with("trajectories", trajs.len() as f64)
        .with("distortion", bounds.distortion)
}

/// `|g(x(t))| <= 1 + tol` along every trajectory.
pub fn check_learned_safety<D: Diffeomorphism + ?Sized>(map: &D, trajs: &[Trajectory], tol: f64) -> CertificateReport {
    let norms: Vec<f64> = trajs
        .par_iter()
        .flat_map_iter(|tr| tr.states.iter().map(|x| map.forward(x).norm()).collect::<Vec<_>>())
        .collect();
    let margins: Vec<f64> = norms.iter().map(|n| 1.0 - n).collect();
    CertificateReport::from_margins("learned-set-safety", &margins, tol, None)
        .with("max_z_norm", norms.iter().copied().fold(0.0, f64::max))
}

/// `|f| <= 2 lambda / mu` over the grid (points with `|g| > 1` skipped)
/// times goals, with relative slack `1e-9`.
pub fn check_velocity<D: Diffeomorphism + ?Sized>(
    map: &D,
    bounds: &CertBounds,
    cfg: &FlowConfig,
    grid: &[StateVec],
    goals: &[StateVec],
) -> Result<CertificateReport, FlowError> {
    let bound = 2.0 * cfg.lambda / bounds.mu;
    let speeds = field_speeds(map, grid, goals, |x, zs| flow::natural_field_z(map, x, zs, cfg.lambda))?;
    let margins: Vec<f64> = speeds.iter().map(|s| 1.0 - s / bound).collect();
    let max_speed = speeds.iter().copied().fold(0.0, f64::max);
    Ok(CertificateReport::from_margins("velocity-bound", &margins, ALGEBRAIC_TOL, None)
        .with("bound", bound)
        .with("max_speed", max_speed))
}

/// Finite-time field speed within `[lambda/nu, lambda/mu]` outside the
/// deadzone, with relative slack `1e-9`.
pub fn check_finite_time_band<D: Diffeomorphism + ?Sized>(
    map: &D,
    bounds: &CertBounds,
    cfg: &FlowConfig,
    grid: &[StateVec],
    goals: &[StateVec],
) -> Result<CertificateReport, FlowError> {
    let (lo, hi) = (cfg.lambda / bounds.nu, cfg.lambda / bounds.mu);
    let speeds = field_speeds(map, grid, goals, |x, zs| {
        if (map.forward(x) - zs).norm() <= cfg.eps_ft {
            Ok(StateVec::from_element(x.len(), f64::NAN))
        } else {
            flow::finite_time_field_z(map, x, zs, cfg)
        }
    })?;
    let margins: Vec<f64> = speeds
        .iter()
        .filter(|s| !s.is_nan())
        .map(|s| (s / lo - 1.0).min(1.0 - s / hi))
        .collect();
    Ok(CertificateReport::from_margins("finite-time-band", &margins, ALGEBRAIC_TOL, None)
        .with("lower", lo)
        .with("upper", hi)
        .with("deadzone_skipped", (speeds.len() - margins.len()) as f64))
}

fn field_speeds<D, F>(map: &D, grid: &[StateVec], goals: &[StateVec], field: F) -> Result<Vec<f64>, FlowError>
where
    D: Diffeomorphism + ?Sized,
    F: Fn(&StateVec, &StateVec) -> Result<StateVec, FlowError> + Sync,
{
    let zstars: Vec<StateVec> = goals.iter().map(|g| map.forward(g)).collect();
    let inside: Vec<&StateVec> = grid.iter().filter(|x| map.forward(x).norm() <= 1.0).collect();
    Ok(inside
        .par_iter()
        .map(|x| zstars.iter().map(|zs| field(x, zs).map(|f| f.norm())).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?
        .concat())
}

/// Tracking error of a moving-goal rollout against
/// `(nu/mu) (|e(0)| e^{-lambda t} + b/lambda)` with 2% slack.
pub fn check_tracking(traj: &Trajectory, bounds: &CertBounds, lambda: f64, b: f64) -> CertificateReport {
    let errs = traj.errors();
    let e0 = errs[0].norm();
    let margins: Vec<f64> = traj
        .times
        .iter()
        .zip(&errs)
        .map(|(t, e)| {
            let bound = bounds.distortion * (e0 * (-lambda * t).exp() + b / lambda);
            bound * (1.0 + INTEGRATION_SLACK) - e.norm()
        })
        .collect();
    CertificateReport::from_margins("tracking-error", &margins, 0.0, None)
        .with("speed_bound", b)
        .with("max_error", errs.iter().map(|e| e.norm()).fold(0.0, f64::max))
}

/// Safety against the true environment. Reported, not asserted: the
/// guarantee concerns the learned set, and agreement with the real one
/// depends on data coverage.
///
/// The margin is the fraction of fully safe trajectories minus `min_rate`.
pub fn check_safety_env(env: &Environment, trajs: &[Trajectory], min_rate: f64) -> CertificateReport {
    let mut safe_samples = 0usize;
    let mut total_samples = 0usize;
    let mut safe_trajs = 0usize;
    let mut first: Option<(usize, usize)> = None;
    for (k, tr) in trajs.iter().enumerate() {
        let mut all = true;
        for (i, x) in tr.states.iter().enumerate() {
            total_samples += 1;
            if env.is_safe(x) {
                safe_samples += 1;
            } else {
                all = false;
                first.get_or_insert((k, i));
            }
        }
        safe_trajs += usize::from(all);
    }
    let rate = safe_trajs as f64 / trajs.len().max(1) as f64;
    let mut r = CertificateReport::from_margins("true-env-safety", &[rate - min_rate], 0.0, None);
    r.samples = total_samples;
    r.violations = total_samples - safe_samples;
    r.first_violation = first.map(|(k, _)| k);
    r.asserted = false;
    let r = r
        .with("trajectory_safe_rate", rate)
        .with("sample_safe_rate", safe_samples as f64 / total_samples.max(1) as f64);
    match first {
        Some((k, i)) => r.with("first_bad_trajectory", k as f64).with("first_bad_sample", i as f64),
        None => r,
    }
}

/// Shear-map counterexample: some goal on the search grid sends the plain
/// gradient flow outside the unit disk while the natural flow stays in.
pub fn check_example1(
    goal_angles: usize,
    start_angles: usize,
    t_end: f64,
    cfg: &FlowConfig,
) -> Result<(CertificateReport, flow::Example1Report), FlowError> {
    let (rep, _) = flow::find_shear_exit(goal_angles, start_angles, t_end, cfg)?;
    let margins = [rep.gradient_flow_max_z_norm - 1.0, 1e-6 - (rep.natural_flow_max_z_norm - 1.0)];
    let mut r = CertificateReport::from_margins("example1-counterexample", &margins, 0.0, None)
        .with("gradient_flow_max_z_norm", rep.gradient_flow_max_z_norm)
        .with("natural_flow_max_z_norm", rep.natural_flow_max_z_norm);
    r.pass = r.pass && rep.gradient_flow_exits;
    Ok((r, rep))
}

/// Uniform samples of the unit ball in Z-space pulled back through `g`.
pub fn ball_preimage_samples(
    map: &BiLipMap,
    count: usize,
    radius: f64,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<StateVec>, FlowError> {
    let n = crate::bilip::Diffeomorphism::dim(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zs = Vec::with_capacity(count);
    while zs.len() < count {
        let z = uniform_in_box(&mut rng, &vec![-radius; n], &vec![radius; n]);
        if z.norm() <= radius {
            zs.push(z);
        }
    }
    zs.par_iter()
        .enumerate()
        .map(|(index, z)| {
            map.inverse(z, tol, max_iter)
                .map_err(|source| FlowError::Sample { index, source })
        })
        .collect()
}

/// Z-space grid of the square `[-1, 1]^2` restricted to the unit disk and
/// pulled back through `g`. Two-dimensional maps only.
pub fn ball_grid_preimage(map: &BiLipMap, per_side: usize, tol: f64, max_iter: usize) -> Result<Vec<StateVec>, FlowError> {
    let step = 2.0 / (per_side.max(2) - 1) as f64;
    let zs: Vec<StateVec> = (0..per_side)
        .flat_map(|i| (0..per_side).map(move |j| StateVec::from_row_slice(&[-1.0 + i as f64 * step, -1.0 + j as f64 * step])))
        .filter(|z| z.norm() <= 1.0)
        .collect();
    zs.par_iter()
        .enumerate()
        .map(|(index, z)| {
            map.inverse(z, tol, max_iter)
                .map_err(|source| FlowError::Sample { index, source })
        })
        .collect()
}

/// Uniform samples of the shell `r_in < |z| <= r_out` pulled back through `g`.
pub fn shell_preimage_samples(
    map: &BiLipMap,
    count: usize,
    r_in: f64,
    r_out: f64,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<StateVec>, FlowError> {
    let n = crate::bilip::Diffeomorphism::dim(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zs = Vec::with_capacity(count);
    while zs.len() < count {
        let z = uniform_in_box(&mut rng, &vec![-r_out; n], &vec![r_out; n]);
        let r = z.norm();
        if r > r_in && r <= r_out {
            zs.push(z);
        }
    }
    zs.par_iter()
        .enumerate()
        .map(|(index, z)| {
            map.inverse(z, tol, max_iter)
                .map_err(|source| FlowError::Sample { index, source })
        })
        .collect()
}

/// Sample sizes and seeds for [`run_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub lambda: f64,
    pub seed: u64,
    pub bilip_pairs: usize,
    pub inverse_samples: usize,
    pub barrier_samples: usize,
    pub exterior_samples: usize,
    pub goals: usize,
    pub rollouts: usize,
    pub rollout_samples: usize,
    /// Points per side of the Z-space velocity grid (2-D maps); other
    /// dimensions use `grid_per_side^2` random ball samples.
    pub grid_per_side: usize,
    /// Radius of the circular goal path in Z-space.
    pub tracking_radius: f64,
    /// Angular speed of the goal path in units of lambda.
    pub tracking_rate: f64,
    pub env_safety_rate: f64,
    pub example1: bool,
}

impl SuiteConfig {
    pub fn full(lambda: f64, seed: u64) -> Self {
        Self {
            lambda,
            seed,
            bilip_pairs: 100_000,
            inverse_samples: 10_000,
            barrier_samples: 10_000,
            exterior_samples: 1_000,
            goals: 10,
            rollouts: 100,
            rollout_samples: 200,
            grid_per_side: 100,
            tracking_radius: 0.5,
            tracking_rate: 0.2,
            env_safety_rate: 0.95,
            example1: true,
        }
    }
}

/// Everything [`run_suite`] produced, for reuse by plotting and tests.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub reports: Vec<CertificateReport>,
    pub rollouts: Vec<Trajectory>,
    pub tracking: Trajectory,
}

impl SuiteOutcome {
    pub fn all_ok(&self) -> bool {
        self.reports.iter().all(CertificateReport::ok)
    }

    pub fn get(&self, name: &str) -> Option<&CertificateReport> {
        self.reports.iter().find(|r| r.name == name)
    }
}

/// Bounding box of `points`, widened by `pad` of its extent on every side.
pub fn padded_bounds(points: &[StateVec], pad: f64) -> (Vec<f64>, Vec<f64>) {
    let n = points[0].len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for p in points {
        for i in 0..n {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    for i in 0..n {
        let w = (hi[i] - lo[i]).max(1e-9) * pad;
        lo[i] -= w;
        hi[i] += w;
    }
    (lo, hi)
}

/// Runs every certificate on `map`. The bi-Lipschitz region is the
/// inflated workspace of `env` when given, otherwise the padded bounding
/// box of the learned set. True-environment safety needs `env`.
pub fn run_suite(map: &BiLipMap, env: Option<&Environment>, cfg: &SuiteConfig) -> Result<SuiteOutcome, FlowError> {
    let flow_cfg = FlowConfig::new(cfg.lambda);
    let (tol, it) = (flow_cfg.tol, flow_cfg.max_iter);
    let bounds = map.cert_bounds();
    let n = crate::bilip::Diffeomorphism::dim(map);
    let seed = cfg.seed;
    let mut reports = Vec::new();

    let goals = ball_preimage_samples(map, cfg.goals, 1.0, seed.wrapping_add(1), tol, it)?;
    let inside = ball_preimage_samples(map, cfg.barrier_samples, 1.0, seed.wrapping_add(2), tol, it)?;

    let (lo, hi) = match env {
        Some(e) if n == 2 => {
            let r = e.sampling_region();
            (r.min.to_vec(), r.max.to_vec())
        }
        _ => padded_bounds(&inside, 0.1),
    };
    reports.push(check_bilip(map, &lo, &hi, cfg.bilip_pairs, seed.wrapping_add(3)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let zs: Vec<StateVec> = (0..cfg.inverse_samples)
        .map(|_| uniform_in_box(&mut rng, &vec![-1.5; n], &vec![1.5; n]))
        .collect();
    reports.push(check_inverse(map, &zs, tol, it, 1e-8));

    reports.push(check_barrier(map, cfg.lambda, &inside, &goals)?);
    let outside = shell_preimage_samples(map, cfg.exterior_samples, 1.0, 2.0, seed.wrapping_add(5), tol, it)?;
    reports.push(check_barrier_exterior(map, cfg.lambda, &outside, &goals)?);

    let ends = ball_preimage_samples(map, 2 * cfg.rollouts, 1.0, seed.wrapping_add(6), tol, it)?;
    let t_end = 5.0 / cfg.lambda;
    let m = cfg.rollout_samples.max(2);
    let times: Vec<f64> = (0..m).map(|i| t_end * i as f64 / (m - 1) as f64).collect();
    let rollouts = ends
        .par_chunks(2)
        .map(|p| flow::rollout_analytic(map, &p[0], &p[1], &flow_cfg, &times))
        .collect::<Result<Vec<_>, _>>()?;
    reports.push(check_learned_safety(map, &rollouts, 1e-6));
    reports.push(check_convergence(&rollouts, &bounds, cfg.lambda));
    if let Some(e) = env {
        reports.push(check_safety_env(e, &rollouts, cfg.env_safety_rate));
    }

    let grid = if n == 2 {
        ball_grid_preimage(map, cfg.grid_per_side, tol, it)?
    } else {
        ball_preimage_samples(map, cfg.grid_per_side.pow(2), 1.0, seed.wrapping_add(7), tol, it)?
    };
    reports.push(check_velocity(map, &bounds, &flow_cfg, &grid, &goals)?);
    reports.push(check_finite_time_band(map, &bounds, &flow_cfg, &grid, &goals)?);

    let tracking = tracking_run(map, cfg, &flow_cfg)?;
    let path_speed = tracking.1;
    let tracking = tracking.0;
    reports.push(check_tracking(&tracking, &bounds, cfg.lambda, path_speed));
    let mut ls = check_learned_safety(map, std::slice::from_ref(&tracking), 1e-6);
    ls.name = "tracking-learned-safety".to_string();
    reports.push(ls);

    if cfg.example1 {
        reports.push(check_example1(24, 48, 8.0, &FlowConfig::new(1.0))?.0);
    }
    Ok(SuiteOutcome { reports, rollouts, tracking })
}

/// Moving goal on a circle in Z-space, pulled back at 400 waypoints per
/// revolution, tracked from the preimage of the origin with RK4 at step
/// `1e-3 / lambda`. Returns the rollout and the measured path speed.
fn tracking_run(map: &BiLipMap, cfg: &SuiteConfig, flow_cfg: &FlowConfig) -> Result<(Trajectory, f64), FlowError> {
    let n = crate::bilip::Diffeomorphism::dim(map);
    let omega = cfg.tracking_rate * cfg.lambda;
    let t_end = 5.0 / cfg.lambda;
    let count = ((400.0 * omega * t_end / std::f64::consts::TAU).ceil() as usize).max(50);
    let times: Vec<f64> = (0..=count).map(|k| t_end * k as f64 / count as f64).collect();
    let points = times
        .iter()
        .enumerate()
        .map(|(index, &t)| {
            let mut z = StateVec::zeros(n);
            z[0] = cfg.tracking_radius * (omega * t).cos();
            if n > 1 {
                z[1] = cfg.tracking_radius * (omega * t).sin();
            }
            map.inverse(&z, flow_cfg.tol, flow_cfg.max_iter)
                .map_err(|source| FlowError::Sample { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let path = flow::WaypointPath::new(times, points)?;
    let b = path.max_speed();
    let x0 = map.inverse(&StateVec::zeros(n), flow_cfg.tol, flow_cfg.max_iter)?;
    let step = flow_cfg.with_step(1e-3 / cfg.lambda);
    Ok((flow::tracking_rollout(map, &x0, &path, t_end, &step)?, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilip::{state, BiLipConfig};
    use crate::env::Obstacle;
    use crate::flow::{rollout_analytic, Method};
    use crate::shear::ShearMap;

    fn identity() -> BiLipMap {
        BiLipMap::identity(2, &BiLipConfig::default())
    }

    fn traj(states: Vec<StateVec>, goal: StateVec) -> Trajectory {
        Trajectory {
            times: (0..states.len()).map(|i| i as f64).collect(),
            states,
            goal,
            goal_samples: None,
            lambda: 1.0,
            tol: 1e-9,
            method: Method::Analytic,
        }
    }

    #[test]
    fn identity_ratios_are_one() {
        let r = check_bilip(&identity(), &[-1.0, -1.0], &[1.0, 1.0], 200, 3);
        assert!(r.pass);
        assert!((r.detail["empirical_mu"] - 1.0).abs() < 1e-12);
        assert!((r.detail["empirical_nu"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shear_reports_finite_extrema() {
        let r = check_bilip(&ShearMap, &[-1.0, -1.0], &[1.0, 1.0], 2000, 1);
        assert!(!r.asserted);
        let (lo, hi) = (r.detail["empirical_mu"], r.detail["empirical_nu"]);
        assert!(lo > 0.0 && hi.is_finite() && lo < 1.0 && hi > 1.0);
    }

    #[test]
    fn barrier_margin_at_origin_is_two_lambda() {
        let mut m = identity();
        m.set_goal_center(&state(&[0.0, 0.0]));
        let r = check_barrier(&m, 1.5, &[state(&[0.0, 0.0])], &[state(&[0.3, -0.4])]).unwrap();
        assert!((r.worst_margin - 3.0).abs() < 1e-12);
    }

    #[test]
    fn barrier_at_goal_has_zero_derivative() {
        let m = identity();
        let x = state(&[0.2, 0.5]);
        let r = check_barrier(&m, 1.0, &[x.clone()], &[x.clone()]).unwrap();
        let h = 1.0 - x.norm_squared();
        assert!((r.worst_margin - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn exterior_points_flow_inwards() {
        let m = identity();
        let pts = vec![state(&[1.5, 0.0]), state(&[0.0, -1.1]), state(&[0.3, 0.2])];
        let r = check_barrier_exterior(&m, 1.0, &pts, &[state(&[0.9, 0.0])]).unwrap();
        assert!(r.pass && r.worst_margin > 0.0);
        assert_eq!(r.samples, 2);
    }

    #[test]
    fn identity_convergence_is_tight() {
        let m = identity();
        let cfg = FlowConfig::new(1.0);
        let times: Vec<f64> = (0..50).map(|i| 0.1 * i as f64).collect();
        let tr = rollout_analytic(&m, &state(&[0.8, 0.1]), &state(&[-0.3, 0.2]), &cfg, &times).unwrap();
        // Exact constants of the identity; the certified ones are looser.
        let r = check_convergence(&[tr], &CertBounds::new(1.0, 1.0), 1.0);
        assert!(r.pass);
        assert!(r.worst_margin.abs() < 1e-6);
    }

    #[test]
    fn stationary_trajectory_has_zero_error() {
        let g = state(&[0.1, 0.1]);
        let tr = traj(vec![g.clone(); 4], g);
        let r = check_convergence(&[tr], &CertBounds::new(1.0, 1.0), 1.0);
        assert_eq!(r.worst_margin, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn identity_velocity_supremum_is_two_lambda() {
        let m = identity();
        let grid = vec![state(&[1.0, 0.0]), state(&[0.0, 0.5])];
        let goals = vec![state(&[-1.0, 0.0])];
        let r = check_velocity(&m, &CertBounds::new(1.0, 1.0), &FlowConfig::new(1.0), &grid, &goals).unwrap();
        assert!((r.detail["max_speed"] - 2.0).abs() < 1e-12);
        assert!(r.pass && r.worst_margin.abs() < 1e-12);
    }

    #[test]
    fn finite_time_band_on_identity() {
        let m = identity();
        let grid = vec![state(&[0.5, 0.0]), state(&[0.0, 0.0])];
        let r = check_finite_time_band(&m, &m.cert_bounds(), &FlowConfig::new(2.0), &grid, &[state(&[0.0, 0.0])]).unwrap();
        assert!(r.pass);
        assert_eq!(r.samples, 1);
        assert_eq!(r.detail["deadzone_skipped"], 1.0);
    }

    #[test]
    fn env_safety_reports_first_offender() {
        let env = Environment::preset("corridor-v1").unwrap();
        let goal = state(&[0.45, 0.6]);
        let good = traj(vec![goal.clone(); 3], goal.clone());
        let Obstacle::Rect { min, max } = env.obstacles()[0] else { panic!() };
        let inside = state(&[0.5 * (min[0] + max[0]), 0.5 * (min[1] + max[1])]);
        let bad = traj(vec![goal.clone(), inside, goal.clone()], goal);
        let r = check_safety_env(&env, &[good.clone()], 0.95);
        assert_eq!(r.detail["trajectory_safe_rate"], 1.0);
        let r = check_safety_env(&env, &[good, bad], 0.95);
        assert_eq!(r.first_violation, Some(1));
        assert_eq!(r.detail["first_bad_sample"], 1.0);
        assert_eq!(r.violations, 1);
        assert!(!r.pass && r.ok());
    }

    #[test]
    fn report_pass_matches_margin() {
        let r = CertificateReport::from_margins("x", &[0.5, -1e-10], 1e-9, None);
        assert!(r.pass);
        let r = CertificateReport::from_margins("x", &[0.5, -2e-9], 1e-9, None);
        assert!(!r.pass);
        assert_eq!(r.first_violation, Some(1));
    }
}
