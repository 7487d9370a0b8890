//! Certified bi-Lipschitz diffeomorphism.
//!
//! The map is `g(x) = (s * F(x) - shift) / r` where `F` alternates exactly
//! orthogonal blocks `y = Q x` (Cayley transform of a skew-symmetric
//! matrix) with residual blocks `y = x + W2 tanh(W1 x + b1) + b2`.
//!
//! Residual weights are parameterized as `W1 = V1` and
//! `W2 = tau * V2 / (|V1|_F * sqrt(1 + |V2|_F^2))`, so that
//! `|W2|_2 |W1|_2 <= |W2|_F |W1|_F < tau` for every raw parameter value.
//! Each residual block is therefore `(1 - tau, 1 + tau)` bi-Lipschitz, and
//! the whole map satisfies
//!
//! ```text
//! (s/r) prod(1 - tau_k) |x1 - x2| <= |g(x1) - g(x2)| <= (s/r) prod(1 + tau_k) |x1 - x2|.
//! ```
//!
//! Residual blocks invert by Banach iteration `x <- y - r(x)`, orthogonal
//! blocks by transpose.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::BiLipError;
use crate::StateVec;

/// Floor inside `|V1|_F` so the rescaling never divides by zero.
const NORM_FLOOR: f64 = 1e-12;

pub const DEFAULT_INVERSE_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 200;

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Certified Lipschitz bounds `mu <= |dg| / |dx| <= nu`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CertBounds {
    pub mu: f64,
    pub nu: f64,
    pub distortion: f64,
}

impl CertBounds {
    pub fn new(mu: f64, nu: f64) -> Self {
        Self {
            mu,
            nu,
            distortion: nu / mu,
        }
    }
}

/// Anything usable as the coordinate change of a goal-conditioned flow.
pub trait Diffeomorphism: Sync {
    fn dim(&self) -> usize;
    fn forward(&self, x: &StateVec) -> StateVec;
    fn jacobian(&self, x: &StateVec) -> DMatrix<f64>;
    fn inverse(&self, z: &StateVec, tol: f64, max_iter: usize) -> Result<StateVec, BiLipError>;

    /// Value and Jacobian in one pass.
    fn forward_jacobian(&self, x: &StateVec) -> (StateVec, DMatrix<f64>) {
        (self.forward(x), self.jacobian(x))
    }

    /// Certified bounds, if the map carries any.
    fn cert_bounds(&self) -> Option<CertBounds> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BiLipConfig {
    /// Number of (orthogonal, residual) block pairs.
    pub pairs: usize,
    pub width: usize,
    pub tau: f64,
}

impl Default for BiLipConfig {
    fn default() -> Self {
        Self {
            pairs: 4,
            width: 64,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthBlock {
    n: usize,
    /// Strict upper triangle of the skew generator, row-major.
    skew: Vec<f64>,
    q: Vec<f64>,
}

impl OrthBlock {
    pub fn new(n: usize, skew: Vec<f64>) -> Result<Self, BiLipError> {
        if skew.len() != n * (n - 1) / 2 {
            return Err(BiLipError::InvalidModel(format!(
                "orthogonal block needs {} skew entries, got {}",
                n * (n - 1) / 2,
                skew.len()
            )));
        }
        let mut b = Self {
            n,
            skew,
            q: vec![0.0; n * n],
        };
        b.refresh();
        Ok(b)
    }

    pub fn skew(&self) -> &[f64] {
        &self.skew
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.q)
    }

    fn generator(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut a = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                a[(i, j)] = self.skew[k];
                a[(j, i)] = -self.skew[k];
                k += 1;
            }
        }
        a
    }

    fn refresh(&mut self) {
        let n = self.n;
        let a = self.generator();
        let eye = DMatrix::<f64>::identity(n, n);
        // I - A is invertible for skew A (eigenvalues 1 - i w).
        let q = (&eye - &a)
            .lu()
            .solve(&(&eye + &a))
            .expect("I - A is nonsingular for skew-symmetric A");
        for i in 0..n {
            for j in 0..n {
                self.q[i * n + j] = q[(i, j)];
            }
        }
    }

    /// Pulls a cotangent on `Q` back to the skew parameters.
    fn skew_grad(&self, q_bar: &[f64], out: &mut [f64]) {
        let n = self.n;
        let a = self.generator();
        let eye = DMatrix::<f64>::identity(n, n);
        let q = self.matrix();
        let qb = DMatrix::from_row_slice(n, n, q_bar);
        // dQ = (I - A)^{-1} dA (Q + I)  =>  A_bar = (I - A)^{-T} Q_bar (Q + I)^T
        let m = &qb * (&q + &eye).transpose();
        let a_bar = (&eye - &a)
            .transpose()
            .lu()
            .solve(&m)
            .expect("I - A is nonsingular for skew-symmetric A");
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                out[k] += a_bar[(i, j)] - a_bar[(j, i)];
                k += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    n: usize,
    width: usize,
    tau: f64,
    /// `width x n`, row-major. Used directly as `W1`.
    v1: Vec<f64>,
    b1: Vec<f64>,
    /// `n x width`, row-major raw parameter of `W2`.
    v2: Vec<f64>,
    b2: Vec<f64>,
    w2: Vec<f64>,
    n1: f64,
    q2: f64,
}

impl ResBlock {
    pub fn new(
        n: usize,
        width: usize,
        tau: f64,
        v1: Vec<f64>,
        b1: Vec<f64>,
        v2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self, BiLipError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(BiLipError::InvalidModel(format!("tau {tau} outside (0, 1)")));
        }
        if v1.len() != width * n || b1.len() != width || v2.len() != n * width || b2.len() != n {
            return Err(BiLipError::InvalidModel("residual block shape mismatch".into()));
        }
        let mut b = Self {
            n,
            width,
            tau,
            v1,
            b1,
            v2,
            b2,
            w2: vec![0.0; n * width],
            n1: 0.0,
            q2: 0.0,
        };
        b.refresh();
        Ok(b)
    }

    /// Rebuilds a block from its effective weights by inverting the `W2`
    /// rescaling. Fails unless `|W1|_F |W2|_F < tau`.
    pub fn from_effective(
        n: usize,
        width: usize,
        tau: f64,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self, BiLipError> {
        if w2.len() != n * width {
            return Err(BiLipError::InvalidModel("residual block shape mismatch".into()));
        }
        let n1 = (w1.iter().map(|v| v * v).sum::<f64>() + NORM_FLOOR * NORM_FLOOR).sqrt();
        let w2f = w2.iter().map(|v| v * v).sum::<f64>().sqrt();
        // |W2|_F = tau a / n1 with a = |V2| / sqrt(1 + |V2|^2) in [0, 1).
        let a = w2f * n1 / tau;
        if !(a < 1.0) {
            return Err(BiLipError::InvalidModel(format!(
                "residual block violates its Lipschitz budget: |W1||W2| = {:.6} >= tau = {tau}",
                w2f * n1
            )));
        }
        let q2 = 1.0 / (1.0 - a * a).sqrt();
        let c = n1 * q2 / tau;
        let v2 = w2.iter().map(|w| w * c).collect();
        Self::new(n, width, tau, w1, b1, v2, b2)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        (&self.v1, &self.b1, &self.v2, &self.b2)
    }

    /// Effective output weights `W2` (`n x width`, row-major).
    pub fn w2_effective(&self) -> &[f64] {
        &self.w2
    }

    /// Certified Lipschitz constant of the residual branch, `< tau`.
    pub fn lipschitz_bound(&self) -> f64 {
        let w1f = self.v1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w2f = self.w2.iter().map(|v| v * v).sum::<f64>().sqrt();
        w1f * w2f
    }

    fn refresh(&mut self) {
        self.n1 = (self.v1.iter().map(|v| v * v).sum::<f64>() + NORM_FLOOR * NORM_FLOOR).sqrt();
        self.q2 = (1.0 + self.v2.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let c = self.tau / (self.n1 * self.q2);
        for (w, v) in self.w2.iter_mut().zip(&self.v2) {
            *w = c * v;
        }
    }

    /// Hidden activations `tanh(W1 x + b1)`.
    fn hidden(&self, x: &[f64], act: &mut [f64]) {
        let n = self.n;
        for j in 0..self.width {
            let row = &self.v1[j * n..(j + 1) * n];
            let u = self.b1[j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            act[j] = u.tanh();
        }
    }

    /// Residual branch `W2 a + b2` for activations `a`.
    fn branch(&self, act: &[f64], out: &mut [f64]) {
        let w = self.width;
        for i in 0..self.n {
            let row = &self.w2[i * w..(i + 1) * w];
            out[i] = self.b2[i] + row.iter().zip(act).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn residual(&self, x: &[f64], act: &mut [f64], out: &mut [f64]) {
        self.hidden(x, act);
        self.branch(act, out);
    }

    /// `I + W2 diag(1 - a^2) W1`.
    fn jacobian(&self, act: &[f64]) -> Vec<f64> {
        let (n, w) = (self.n, self.width);
        let mut j = vec![0.0; n * n];
        for i in 0..n {
            j[i * n + i] = 1.0;
        }
        for h in 0..w {
            let d = 1.0 - act[h] * act[h];
            for i in 0..n {
                let c = self.w2[i * w + h] * d;
                if c == 0.0 {
                    continue;
                }
                for b in 0..n {
                    j[i * n + b] += c * self.v1[h * n + b];
                }
            }
        }
        j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Orth(OrthBlock),
    Res(ResBlock),
}

impl Block {
    fn num_params(&self) -> usize {
        match self {
            Block::Orth(o) => o.skew.len(),
            Block::Res(r) => r.v1.len() + r.b1.len() + r.v2.len() + r.b2.len(),
        }
    }
}

/// Gradient with respect to effective (constrained) weights, before the
/// pull-back through the parameterization.
#[derive(Debug, Clone)]
enum BlockGrad {
    Orth { q: Vec<f64> },
    Res { w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64> },
}

#[derive(Debug, Clone)]
struct EffGrad {
    blocks: Vec<BlockGrad>,
    log_scale: f64,
}

/// Per-block record of a forward pass.
struct Tape {
    inputs: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// Iteration diagnostics from [`BiLipMap::inverse_with_stats`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InverseStats {
    /// Iterations used by each residual block, in inversion order.
    pub iterations: Vec<usize>,
    /// Largest observed ratio of successive fixed-point step sizes.
    pub max_contraction: f64,
}

/// The learnable map. See the module docs for the parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLipMap {
    n: usize,
    blocks: Vec<Block>,
    log_scale: f64,
    shift: Vec<f64>,
    ball_scale: f64,
    goal: Option<Vec<f64>>,
}

impl BiLipMap {
    /// Identity map: orthogonal generators and residual weights all zero.
    pub fn identity(n: usize, cfg: &BiLipConfig) -> Self {
        let mut blocks = Vec::with_capacity(2 * cfg.pairs);
        for _ in 0..cfg.pairs {
            blocks.push(Block::Orth(OrthBlock::new(n, vec![0.0; n * (n - 1) / 2]).unwrap()));
            blocks.push(Block::Res(
                ResBlock::new(
                    n,
                    cfg.width,
                    cfg.tau,
                    vec![0.0; cfg.width * n],
                    vec![0.0; cfg.width],
                    vec![0.0; n * cfg.width],
                    vec![0.0; n],
                )
                .expect("identity block is well formed"),
            ));
        }
        Self {
            n,
            blocks,
            log_scale: 0.0,
            shift: vec![0.0; n],
            ball_scale: 1.0,
            goal: None,
        }
    }

    /// Random initialization adapted to a box-shaped input domain.
    ///
    /// Hidden units get random directions with slopes between 1 and 8 per
    /// domain diagonal, and offsets that put each unit's transition through
    /// a random domain point. Output weights start at zero, so the initial
    /// map is a product of rotations.
    pub fn random(
        cfg: &BiLipConfig,
        domain_min: &[f64],
        domain_max: &[f64],
        seed: u64,
    ) -> Self {
        let n = domain_min.len();
        assert_eq!(n, domain_max.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diag = domain_min
            .iter()
            .zip(domain_max)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
            .max(f64::EPSILON);
        let mut map = Self::identity(n, cfg);
        for k in 0..map.blocks.len() {
            match &mut map.blocks[k] {
                Block::Orth(o) => {
                    for s in o.skew.iter_mut() {
                        *s = standard_normal(&mut rng);
                    }
                    o.refresh();
                }
                Block::Res(_) => {
                    let mut v1 = vec![0.0; cfg.width * n];
                    let mut b1 = vec![0.0; cfg.width];
                    for j in 0..cfg.width {
                        let dir: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
                        let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
                        let slope = rng.gen_range(1.0..8.0) / diag;
                        let p: Vec<f64> = (0..n)
                            .map(|i| rng.gen_range(domain_min[i]..=domain_max[i]))
                            .collect();
                        // Image of the domain point under the blocks built so far.
                        let p = map.blocks[..k]
                            .iter()
                            .fold(p, |acc, b| apply_block(b, &acc));
                        let mut dot = 0.0;
                        for i in 0..n {
                            v1[j * n + i] = slope * dir[i] / len;
                            dot += v1[j * n + i] * p[i];
                        }
                        b1[j] = -dot;
                    }
                    let Block::Res(r) = &mut map.blocks[k] else { unreachable!() };
                    r.v1 = v1;
                    r.b1 = b1;
                    r.refresh();
                }
            }
        }
        map
    }

    pub fn from_parts(
        n: usize,
        blocks: Vec<Block>,
        out_scale: f64,
        shift: Vec<f64>,
        ball_scale: f64,
        goal: Option<Vec<f64>>,
    ) -> Result<Self, BiLipError> {
        if !(out_scale > 0.0 && out_scale.is_finite()) {
            return Err(BiLipError::InvalidModel(format!("out_scale {out_scale} must be positive")));
        }
        if !(ball_scale > 0.0 && ball_scale.is_finite()) {
            return Err(BiLipError::InvalidModel(format!("ball_scale {ball_scale} must be positive")));
        }
        if shift.len() != n || goal.as_ref().is_some_and(|g| g.len() != n) {
            return Err(BiLipError::Dimension {
                expected: n,
                got: shift.len(),
            });
        }
        for b in &blocks {
            let bn = match b {
                Block::Orth(o) => o.n,
                Block::Res(r) => r.n,
            };
            if bn != n {
                return Err(BiLipError::Dimension { expected: n, got: bn });
            }
        }
        Ok(Self {
            n,
            blocks,
            log_scale: out_scale.ln(),
            shift,
            ball_scale,
            goal,
        })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn out_scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn set_out_scale(&mut self, s: f64) {
        assert!(s > 0.0 && s.is_finite(), "out_scale must be positive");
        self.log_scale = s.ln();
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn ball_scale(&self) -> f64 {
        self.ball_scale
    }

    pub fn goal(&self) -> Option<StateVec> {
        self.goal.as_ref().map(|g| StateVec::from_row_slice(g))
    }

    pub fn taus(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().filter_map(|b| match b {
            Block::Res(r) => Some(r.tau),
            Block::Orth(_) => None,
        })
    }

    /// `mu = (s/r) prod(1 - tau_k)`, `nu = (s/r) prod(1 + tau_k)`.
    pub fn cert_bounds(&self) -> CertBounds {
        let c = self.out_scale() / self.ball_scale;
        let lo: f64 = self.taus().map(|t| 1.0 - t).product();
        let hi: f64 = self.taus().map(|t| 1.0 + t).product();
        CertBounds::new(c * lo, c * hi)
    }

    /// Re-centres the map so that `forward(goal) = 0`.
    pub fn set_goal_center(&mut self, goal: &StateVec) {
        assert_eq!(goal.len(), self.n);
        let y = self.compose(goal.as_slice());
        let s = self.out_scale();
        self.shift = y.iter().map(|v| s * v).collect();
        self.goal = Some(goal.iter().copied().collect());
    }

    /// Recomputes the shift for the stored goal after a parameter update.
    pub fn recenter(&mut self) {
        if let Some(g) = self.goal.clone() {
            self.set_goal_center(&StateVec::from_vec(g));
        }
    }

    pub fn set_ball_scale(&mut self, r: f64) {
        assert!(r > 0.0 && r.is_finite(), "ball scale must be positive");
        self.ball_scale = r;
    }

    fn compose(&self, x: &[f64]) -> Vec<f64> {
        self.blocks.iter().fold(x.to_vec(), |acc, b| apply_block(b, &acc))
    }

    fn finish(&self, y: &[f64]) -> StateVec {
        let s = self.out_scale();
        let r = self.ball_scale;
        StateVec::from_iterator(self.n, y.iter().zip(&self.shift).map(|(y, sh)| (s * y - sh) / r))
    }

    fn tape(&self, x: &[f64]) -> Tape {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut acts = Vec::with_capacity(self.blocks.len());
        let mut cur = x.to_vec();
        for b in &self.blocks {
            let next = match b {
                Block::Orth(o) => {
                    acts.push(Vec::new());
                    mat_vec(&o.q, self.n, &cur)
                }
                Block::Res(r) => {
                    let mut a = vec![0.0; r.width];
                    let mut out = vec![0.0; self.n];
                    r.residual(&cur, &mut a, &mut out);
                    for (o, c) in out.iter_mut().zip(&cur) {
                        *o += c;
                    }
                    acts.push(a);
                    out
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Tape {
            inputs,
            acts,
            output: cur,
        }
    }

    fn block_jacobians(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .zip(&tape.acts)
            .map(|(b, a)| match b {
                Block::Orth(o) => o.q.clone(),
                Block::Res(r) => r.jacobian(a),
            })
            .collect()
    }

    /// Jacobian of the block composition `F` (without `s/r`).
    fn compose_jacobian(&self, tape: &Tape) -> Vec<f64> {
        let n = self.n;
        let mut p = identity(n);
        for j in self.block_jacobians(tape) {
            p = mat_mul(&j, &p, n);
        }
        p
    }

    /// Inverse with per-block iteration diagnostics.
    pub fn inverse_with_stats(
        &self,
        z: &StateVec,
        tol: f64,
        max_iter: usize,
    ) -> Result<(StateVec, InverseStats), BiLipError> {
        if z.len() != self.n {
            return Err(BiLipError::Dimension {
                expected: self.n,
                got: z.len(),
            });
        }
        assert!(tol > 0.0, "tolerance must be positive");
        let s = self.out_scale();
        let r = self.ball_scale;
        let mut y: Vec<f64> = z.iter().zip(&self.shift).map(|(z, sh)| (r * z + sh) / s).collect();
        // Error in block k's output is amplified by at most the Lipschitz
        // constant of the later blocks times s/r.
        let n_res = self.taus().count().max(1) as f64;
        let amp = self.cert_bounds().nu;
        let block_tol = tol / (amp * n_res);
        let mut stats = InverseStats::default();
        let mut act = vec![0.0; self.blocks.iter().map(|b| match b {
            Block::Res(r) => r.width,
            Block::Orth(_) => 0,
        }).max().unwrap_or(0)];
        let mut res = vec![0.0; self.n];
        for (idx, b) in self.blocks.iter().enumerate().rev() {
            match b {
                Block::Orth(o) => y = mat_t_vec(&o.q, self.n, &y),
                Block::Res(rb) => {
                    let mut x = y.clone();
                    let mut prev_step = f64::NAN;
                    let mut iters = 0;
                    loop {
                        if iters >= max_iter {
                            return Err(BiLipError::NonConvergence {
                                block: idx,
                                iterations: iters,
                                residual: prev_step,
                            });
                        }
                        iters += 1;
                        rb.residual(&x, &mut act[..rb.width], &mut res);
                        let mut step2 = 0.0;
                        for i in 0..self.n {
                            let nx = y[i] - res[i];
                            step2 += (nx - x[i]) * (nx - x[i]);
                            x[i] = nx;
                        }
                        let step = step2.sqrt();
                        let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if prev_step.is_finite() && prev_step > 1e-10 * scale {
                            stats.max_contraction = stats.max_contraction.max(step / prev_step);
                        }
                        prev_step = step;
                        // The step equals the fixed-point residual of the previous iterate;
                        // the new iterate's residual is smaller by the contraction factor.
                        if step <= block_tol {
                            break;
                        }
                    }
                    stats.iterations.push(iters);
                    y = x;
                }
            }
        }
        Ok((StateVec::from_vec(y), stats))
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Block::num_params).sum::<usize>() + 1
    }

    /// Flat raw parameter vector: per block (skew | V1, b1, V2, b2), then
    /// `log(out_scale)`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            match b {
                Block::Orth(o) => p.extend_from_slice(&o.skew),
                Block::Res(r) => {
                    p.extend_from_slice(&r.v1);
                    p.extend_from_slice(&r.b1);
                    p.extend_from_slice(&r.v2);
                    p.extend_from_slice(&r.b2);
                }
            }
        }
        p.push(self.log_scale);
        p
    }

    /// Loads a flat parameter vector and refreshes derived weights. The
    /// shift is recomputed when a goal is set.
    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[off..off + dst.len()]);
            off += dst.len();
        };
        for b in &mut self.blocks {
            match b {
                Block::Orth(o) => {
                    take(&mut o.skew);
                    o.refresh();
                }
                Block::Res(r) => {
                    take(&mut r.v1);
                    take(&mut r.b1);
                    take(&mut r.v2);
                    take(&mut r.b2);
                    r.refresh();
                }
            }
        }
        self.log_scale = p[p.len() - 1];
        self.recenter();
    }

    fn zero_grad(&self) -> EffGrad {
        EffGrad {
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Orth(o) => BlockGrad::Orth {
                        q: vec![0.0; o.q.len()],
                    },
                    Block::Res(r) => BlockGrad::Res {
                        w1: vec![0.0; r.v1.len()],
                        b1: vec![0.0; r.b1.len()],
                        w2: vec![0.0; r.w2.len()],
                        b2: vec![0.0; r.b2.len()],
                    },
                })
                .collect(),
            log_scale: 0.0,
        }
    }

    /// Reverse pass through `F` for output cotangent `ybar`; accumulates
    /// effective-weight gradients and returns the input cotangent.
    fn vjp_compose(&self, tape: &Tape, ybar: &[f64], grad: &mut EffGrad) -> Vec<f64> {
        let mut cur = ybar.to_vec();
        for k in (0..self.blocks.len()).rev() {
            cur = self.vjp_block(k, &tape.inputs[k], &tape.acts[k], &cur, grad);
        }
        cur
    }

    fn vjp_block(&self, k: usize, x: &[f64], act: &[f64], ybar: &[f64], grad: &mut EffGrad) -> Vec<f64> {
        let n = self.n;
        match (&self.blocks[k], &mut grad.blocks[k]) {
            (Block::Orth(o), BlockGrad::Orth { q }) => {
                for i in 0..n {
                    for j in 0..n {
                        q[i * n + j] += ybar[i] * x[j];
                    }
                }
                mat_t_vec(&o.q, n, ybar)
            }
            (Block::Res(r), BlockGrad::Res { w1, b1, w2, b2 }) => {
                let w = r.width;
                let mut xbar = ybar.to_vec();
                for i in 0..n {
                    b2[i] += ybar[i];
                }
                for h in 0..w {
                    let mut abar = 0.0;
                    for i in 0..n {
                        w2[i * w + h] += ybar[i] * act[h];
                        abar += r.w2[i * w + h] * ybar[i];
                    }
                    let ubar = abar * (1.0 - act[h] * act[h]);
                    if ubar == 0.0 {
                        continue;
                    }
                    b1[h] += ubar;
                    for b in 0..n {
                        w1[h * n + b] += ubar * x[b];
                        xbar[b] += r.v1[h * n + b] * ubar;
                    }
                }
                xbar
            }
            _ => unreachable!("gradient layout mirrors blocks"),
        }
    }

    /// Pulls a cotangent `jbar` on block `k`'s Jacobian back to its weights
    /// and input.
    fn jac_vjp_block(&self, k: usize, x: &[f64], act: &[f64], jbar: &[f64], grad: &mut EffGrad) -> Vec<f64> {
        let n = self.n;
        match (&self.blocks[k], &mut grad.blocks[k]) {
            (Block::Orth(_), BlockGrad::Orth { q }) => {
                for (qi, ji) in q.iter_mut().zip(jbar) {
                    *qi += ji;
                }
                vec![0.0; n]
            }
            (Block::Res(r), BlockGrad::Res { w1, b1, w2, .. }) => {
                // J = I + W2 D W1, D = diag(1 - a^2), a = tanh(W1 x + b1).
                let w = r.width;
                let mut xbar = vec![0.0; n];
                for h in 0..w {
                    let d = 1.0 - act[h] * act[h];
                    // (W2^T Jbar)_{h, b} and (Jbar W1^T)_{i, h}
                    let mut dbar = 0.0;
                    for i in 0..n {
                        let mut jw = 0.0;
                        for b in 0..n {
                            jw += jbar[i * n + b] * r.v1[h * n + b];
                        }
                        w2[i * w + h] += jw * d;
                        dbar += r.w2[i * w + h] * jw;
                    }
                    for b in 0..n {
                        let mut wj = 0.0;
                        for i in 0..n {
                            wj += r.w2[i * w + h] * jbar[i * n + b];
                        }
                        w1[h * n + b] += d * wj;
                    }
                    // d(1 - tanh^2 u)/du = -2 a (1 - a^2)
                    let ubar = dbar * (-2.0 * act[h] * d);
                    if ubar == 0.0 {
                        continue;
                    }
                    b1[h] += ubar;
                    for b in 0..n {
                        w1[h * n + b] += ubar * x[b];
                        xbar[b] += r.v1[h * n + b] * ubar;
                    }
                }
                xbar
            }
            _ => unreachable!("gradient layout mirrors blocks"),
        }
    }

    /// Converts effective-weight gradients into the flat raw layout of
    /// [`BiLipMap::params`].
    fn raw_grad(&self, grad: &EffGrad) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        let mut off = 0;
        for (b, g) in self.blocks.iter().zip(&grad.blocks) {
            match (b, g) {
                (Block::Orth(o), BlockGrad::Orth { q }) => {
                    o.skew_grad(q, &mut out[off..off + o.skew.len()]);
                    off += o.skew.len();
                }
                (Block::Res(r), BlockGrad::Res { w1, b1, w2, b2 }) => {
                    // W2 = tau V2 / (n1 q2)
                    let dot: f64 = r.v2.iter().zip(w2).map(|(v, g)| v * g).sum();
                    let c = r.tau / r.n1;
                    let v1_coef = -r.tau * dot / (r.n1 * r.n1 * r.n1 * r.q2);
                    for i in 0..r.v1.len() {
                        out[off + i] = w1[i] + v1_coef * r.v1[i];
                    }
                    off += r.v1.len();
                    out[off..off + b1.len()].copy_from_slice(b1);
                    off += b1.len();
                    let q3 = r.q2 * r.q2 * r.q2;
                    for i in 0..r.v2.len() {
                        out[off + i] = c * (w2[i] / r.q2 - dot * r.v2[i] / q3);
                    }
                    off += r.v2.len();
                    out[off..off + b2.len()].copy_from_slice(b2);
                    off += b2.len();
                }
                _ => unreachable!("gradient layout mirrors blocks"),
            }
        }
        out[off] = grad.log_scale;
        out
    }

    /// Accumulates the gradient of `cot . g(x)` (shift held fixed).
    fn accumulate_output_grad(&self, x: &[f64], cot: &[f64], grad: &mut EffGrad) {
        let tape = self.tape(x);
        let c = self.out_scale() / self.ball_scale;
        let ybar: Vec<f64> = cot.iter().map(|v| c * v).collect();
        self.vjp_compose(&tape, &ybar, grad);
        grad.log_scale += c * cot.iter().zip(&tape.output).map(|(a, b)| a * b).sum::<f64>();
    }

    /// Gradient of `cot . g(x)` with respect to every raw parameter, with
    /// the shift held fixed.
    pub fn param_gradient(&self, x: &StateVec, cotangent: &StateVec) -> Vec<f64> {
        let mut g = self.zero_grad();
        self.accumulate_output_grad(x.as_slice(), cotangent.as_slice(), &mut g);
        self.raw_grad(&g)
    }

    /// Batched goal-centred gradient: `sum_i cot_i . (g(x_i) - g(goal))`.
    /// This is the gradient of a loss evaluated on a map whose shift tracks
    /// the goal.
    pub fn centered_param_gradient(&self, goal: &StateVec, items: &[(&StateVec, StateVec)]) -> Vec<f64> {
        let mut g = self.zero_grad();
        let mut total = vec![0.0; self.n];
        for (x, cot) in items {
            self.accumulate_output_grad(x.as_slice(), cot.as_slice(), &mut g);
            for (t, c) in total.iter_mut().zip(cot.iter()) {
                *t -= c;
            }
        }
        self.accumulate_output_grad(goal.as_slice(), &total, &mut g);
        self.raw_grad(&g)
    }

    /// Gradient of `<jbar, G(x)>` (Frobenius) with respect to the raw
    /// parameters, where `G = dg/dx`.
    pub fn jacobian_param_gradient(&self, x: &StateVec, jbar: &DMatrix<f64>) -> Vec<f64> {
        let mut g = self.zero_grad();
        self.accumulate_jacobian_grad(x.as_slice(), jbar, &mut g);
        self.raw_grad(&g)
    }

    fn accumulate_jacobian_grad(&self, x: &[f64], jbar: &DMatrix<f64>, grad: &mut EffGrad) {
        let n = self.n;
        let tape = self.tape(x);
        let js = self.block_jacobians(&tape);
        let c = self.out_scale() / self.ball_scale;
        // Products of the blocks before k.
        let mut prefix = Vec::with_capacity(js.len() + 1);
        prefix.push(identity(n));
        for j in &js {
            let p = mat_mul(j, prefix.last().unwrap(), n);
            prefix.push(p);
        }
        let jf = prefix.last().unwrap();
        let cmat: Vec<f64> = (0..n * n).map(|idx| c * jbar[(idx / n, idx % n)]).collect();
        grad.log_scale += jf.iter().zip(&cmat).map(|(a, b)| a * b).sum::<f64>();
        let mut suffix = identity(n);
        let mut xbar = vec![0.0; n];
        for k in (0..js.len()).rev() {
            // jbar_k = A^T C P_k^T with A the product of later blocks.
            let t = mat_mul(&transpose(&suffix, n), &cmat, n);
            let jk_bar = mat_mul(&t, &transpose(&prefix[k], n), n);
            let mut next = self.vjp_block(k, &tape.inputs[k], &tape.acts[k], &xbar, grad);
            let extra = self.jac_vjp_block(k, &tape.inputs[k], &tape.acts[k], &jk_bar, grad);
            for (a, b) in next.iter_mut().zip(extra) {
                *a += b;
            }
            suffix = mat_mul(&suffix, &js[k], n);
            xbar = next;
        }
    }

    /// Gradient of `<jbar, G(x)> + cot_x . g(x) + cot_star . g(x_star)` in
    /// one pass; used by the demonstration loss.
    pub(crate) fn field_param_gradient(
        &self,
        x: &StateVec,
        jbar: &DMatrix<f64>,
        cot_x: &StateVec,
        x_star: &StateVec,
        cot_star: &StateVec,
        acc: &mut Vec<f64>,
    ) {
        let mut g = self.zero_grad();
        self.accumulate_jacobian_grad(x.as_slice(), jbar, &mut g);
        self.accumulate_output_grad(x.as_slice(), cot_x.as_slice(), &mut g);
        self.accumulate_output_grad(x_star.as_slice(), cot_star.as_slice(), &mut g);
        let raw = self.raw_grad(&g);
        if acc.is_empty() {
            *acc = raw;
        } else {
            for (a, r) in acc.iter_mut().zip(raw) {
                *a += r;
            }
        }
    }

    /// Batched `(g(x), G(x))` without the trait-object indirection.
    pub fn eval(&self, x: &StateVec) -> (StateVec, DMatrix<f64>) {
        let tape = self.tape(x.as_slice());
        let jf = self.compose_jacobian(&tape);
        let c = self.out_scale() / self.ball_scale;
        let g = DMatrix::from_row_slice(self.n, self.n, &jf) * c;
        (self.finish(&tape.output), g)
    }
}

impl Diffeomorphism for BiLipMap {
    fn dim(&self) -> usize {
        self.n
    }

    fn forward(&self, x: &StateVec) -> StateVec {
        assert_eq!(x.len(), self.n, "state dimension");
        self.finish(&self.compose(x.as_slice()))
    }

    fn jacobian(&self, x: &StateVec) -> DMatrix<f64> {
        self.eval(x).1
    }

    fn forward_jacobian(&self, x: &StateVec) -> (StateVec, DMatrix<f64>) {
        self.eval(x)
    }

    fn inverse(&self, z: &StateVec, tol: f64, max_iter: usize) -> Result<StateVec, BiLipError> {
        self.inverse_with_stats(z, tol, max_iter).map(|(x, _)| x)
    }

    fn cert_bounds(&self) -> Option<CertBounds> {
        Some(BiLipMap::cert_bounds(self))
    }
}

fn apply_block(b: &Block, x: &[f64]) -> Vec<f64> {
    match b {
        Block::Orth(o) => mat_vec(&o.q, o.n, x),
        Block::Res(r) => {
            let mut a = vec![0.0; r.width];
            let mut out = vec![0.0; r.n];
            r.residual(x, &mut a, &mut out);
            out.iter().zip(x).map(|(o, x)| o + x).collect()
        }
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(m: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            out[j] += m[i * n + j] * x[i];
        }
    }
    out
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

/// Convenience constructor for a state vector.
pub fn state(v: &[f64]) -> StateVec {
    DVector::from_row_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cfg() -> BiLipConfig {
        BiLipConfig {
            pairs: 2,
            width: 8,
            tau: 0.5,
        }
    }

    /// Random map with nonzero output weights so every code path is live.
    fn random_live(n: usize, seed: u64) -> BiLipMap {
        let mut map = BiLipMap::random(&small_cfg(), &vec![-1.0; n], &vec![1.0; n], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut p = map.params();
        for v in p.iter_mut() {
            *v += 0.5 * standard_normal(&mut rng);
        }
        let last = p.len() - 1;
        p[last] = 0.3;
        map.set_params(&p);
        map
    }

    #[test]
    fn identity_map_is_identity() {
        let map = BiLipMap::identity(2, &BiLipConfig::default());
        let x = state(&[0.3, -1.7]);
        assert_eq!(map.forward(&x), x);
        assert_relative_eq!(map.jacobian(&x), DMatrix::identity(2, 2));
        let (back, stats) = map.inverse_with_stats(&x, 1e-9, 200).unwrap();
        assert_eq!(back, x);
        assert!(stats.iterations.iter().all(|&i| i == 1));
    }

    #[test]
    fn single_pair_bounds() {
        let cfg = BiLipConfig {
            pairs: 1,
            width: 4,
            tau: 0.5,
        };
        let b = BiLipMap::identity(2, &cfg).cert_bounds();
        assert_eq!((b.mu, b.nu), (0.5, 1.5));
        assert_eq!(b.distortion, 3.0);
    }

    #[test]
    fn goal_center_and_ball_scale() {
        let mut map = random_live(2, 1);
        let goal = state(&[0.2, 0.4]);
        map.set_goal_center(&goal);
        assert!(map.forward(&goal).norm() < 1e-14);
        let before = map.cert_bounds();
        map.set_ball_scale(2.0);
        let after = map.cert_bounds();
        assert_relative_eq!(after.mu, before.mu / 2.0);
        assert_relative_eq!(after.nu, before.nu / 2.0);
        assert_relative_eq!(after.distortion, before.distortion);
        assert!(map.forward(&goal).norm() < 1e-14);
    }

    #[test]
    fn residual_branch_stays_under_budget() {
        let map = random_live(3, 2);
        for b in map.blocks() {
            if let Block::Res(r) = b {
                assert!(r.lipschitz_bound() < r.tau());
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let map = random_live(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = state(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let j = map.jacobian(&x);
            let h = 1e-5;
            for c in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let fd = (map.forward(&xp) - map.forward(&xm)) / (2.0 * h);
                for r in 0..2 {
                    let err = (fd[r] - j[(r, c)]).abs() / j.norm();
                    assert!(err < 1e-6, "entry ({r},{c}) rel err {err}");
                }
            }
        }
    }

    #[test]
    fn metric_eigenvalues_within_certified_band() {
        let map = random_live(2, 4);
        let b = map.cert_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let x = state(&[rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let g = map.jacobian(&x);
            let m = g.transpose() * &g;
            let eig = m.symmetric_eigenvalues();
            for e in eig.iter() {
                assert!(*e >= b.mu * b.mu * (1.0 - 1e-12));
                assert!(*e <= b.nu * b.nu * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn inverse_contracts_at_most_tau() {
        let map = random_live(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let z = state(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let (x, stats) = map.inverse_with_stats(&z, 1e-10, 200).unwrap();
            assert!((map.forward(&x) - &z).norm() <= 1e-10);
            assert!(stats.max_contraction <= 0.5 + 1e-6, "{}", stats.max_contraction);
        }
    }

    #[test]
    fn inverse_reports_nonconvergence() {
        let map = random_live(2, 6);
        let err = map.inverse(&state(&[1.0, 1.0]), 1e-9, 1).unwrap_err();
        assert!(matches!(err, BiLipError::NonConvergence { iterations: 1, .. }));
    }

    fn fd_param_grad(map: &BiLipMap, f: impl Fn(&BiLipMap) -> f64) -> Vec<f64> {
        let p = map.params();
        let h = 1e-5;
        (0..p.len())
            .map(|i| {
                let mut m = map.clone();
                let mut q = p.clone();
                q[i] += h;
                m.set_params(&q);
                let fp = f(&m);
                q[i] -= 2.0 * h;
                m.set_params(&q);
                let fm = f(&m);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64], rel: f64) {
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        let err = analytic
            .iter()
            .zip(fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err / scale <= rel, "relative gradient error {}", err / scale);
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let map = random_live(2, 7);
        let x = state(&[0.4, -0.3]);
        let analytic = map.param_gradient(&x, &map.forward(&x));
        let fd = fd_param_grad(&map, |m| 0.5 * m.forward(&x).norm_squared());
        assert_grad_close(&analytic, &fd, 1e-4);
    }

    #[test]
    fn param_gradient_zero_cotangent_and_linearity() {
        let map = random_live(2, 8);
        let x1 = state(&[0.1, 0.2]);
        let x2 = state(&[-0.5, 0.7]);
        let zero = map.param_gradient(&x1, &state(&[0.0, 0.0]));
        assert!(zero.iter().all(|v| *v == 0.0));
        let c = state(&[0.3, -1.1]);
        let g1 = map.param_gradient(&x1, &c);
        let g2 = map.param_gradient(&x2, &c);
        let mut gb = map.zero_grad();
        map.accumulate_output_grad(x1.as_slice(), c.as_slice(), &mut gb);
        map.accumulate_output_grad(x2.as_slice(), c.as_slice(), &mut gb);
        let batch = map.raw_grad(&gb);
        for i in 0..batch.len() {
            assert_relative_eq!(batch[i], g1[i] + g2[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn centered_gradient_tracks_shift() {
        let mut map = random_live(2, 12);
        let goal = state(&[0.3, 0.1]);
        map.set_goal_center(&goal);
        let x = state(&[-0.6, 0.5]);
        let z = map.forward(&x);
        let analytic = map.centered_param_gradient(&goal, &[(&x, z)]);
        let fd = fd_param_grad(&map, |m| 0.5 * m.forward(&x).norm_squared());
        assert_grad_close(&analytic, &fd, 1e-4);
    }

    #[test]
    fn jacobian_gradient_matches_finite_differences() {
        let map = random_live(2, 13);
        let x = state(&[0.25, -0.4]);
        let jbar = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, 1.3, 0.4]);
        let analytic = map.jacobian_param_gradient(&x, &jbar);
        let fd = fd_param_grad(&map, |m| m.jacobian(&x).component_mul(&jbar).sum());
        assert_grad_close(&analytic, &fd, 1e-4);
    }

    #[test]
    fn orthogonal_blocks_are_exact() {
        let o = OrthBlock::new(3, vec![0.3, -1.2, 2.5]).unwrap();
        let q = o.matrix();
        assert_relative_eq!(q.transpose() * &q, DMatrix::identity(3, 3), epsilon = 1e-13);
        assert!(q.determinant() > 0.0);
    }
}
