//! Objective, gradient and batch gradient descent with Armijo backtracking and
//! Barzilai-Borwein step proposals.
//!
//! `J(θ) = ½ g(θ)ᵀ Σ g(θ) − ⟨g(θ), c⟩ + s_Y/2 + λ/2 Ω(θ)`, where `Ω` is the
//! squared norm or, on the FD path, the γ-space penalty. Linear models have
//! `g(θ) = θ`; factorization machines keep each interaction block as a sum of
//! `rank` outer products of per-feature factor blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fd::{FdContext, FdError};
use crate::gram::{dot, norm2, GramError, GramSystem};

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("line search made no progress after {halvings} halvings at iteration {iteration}")]
    LineSearchStall { iteration: usize, halvings: usize },
    #[error("objective is not finite at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Gram(#[from] GramError),
    #[error(transparent)]
    Fd(#[from] FdError),
}

pub const MAX_HALVINGS: usize = 50;
pub const FIRST_STEP: f64 = 1e-3;
pub const ARMIJO_SLACK_ULPS: f64 = 64.0;
/// Gradient norms below this many ulps of `‖c‖` are rounding noise.
pub const GRAD_FLOOR_ULPS: f64 = 1024.0;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;

/// Interaction block `(a, b)` of a factorization machine.
#[derive(Debug, Clone)]
struct FamaPair {
    comp: usize,
    a: usize,
    b: usize,
    /// Slot of the `a` / `b` factor block for every interaction slot.
    ia: Vec<u32>,
    ib: Vec<u32>,
}

/// Parameter layout of a factorization machine: the intercept and feature
/// blocks exactly as in the Gram layout, then `rank` copies of every feature
/// block holding the factors.
#[derive(Debug, Clone)]
pub struct Fama {
    pub rank: usize,
    direct_dim: usize,
    factor_offsets: Vec<usize>,
    factor_dim: usize,
    pairs: Vec<FamaPair>,
}

impl Fama {
    pub fn new(system: &GramSystem, rank: usize) -> Fama {
        let comps = &system.components;
        let layout = &system.layout;
        let features: Vec<usize> = (0..comps.len()).filter(|&i| comps[i].factors.len() == 1).collect();
        assert!(
            comps.iter().enumerate().all(|(i, h)| (h.factors.len() <= 1) == (i <= features.len())),
            "intercept and features precede interactions"
        );
        let direct_dim = layout.offsets[features.len() + 1];
        let mut factor_offsets = Vec::with_capacity(features.len());
        let mut factor_dim = 0;
        for &f in &features {
            factor_offsets.push(factor_dim);
            factor_dim += layout.domains[f].len();
        }
        let feature_of = |v| features.iter().position(|&f| comps[f].factors[0] == v).expect("interaction of features");
        let pairs = (features.len() + 1..comps.len())
            .map(|comp| {
                let (a, b) = (feature_of(comps[comp].factors[0]), feature_of(comps[comp].factors[1]));
                let dom = &layout.domains[comp];
                let project = |fi: usize| -> Vec<u32> {
                    let fdom = &layout.domains[features[fi]];
                    let cols: Vec<usize> =
                        fdom.cat.iter().map(|v| dom.cat.iter().position(|w| w == v).expect("factor key in pair key")).collect();
                    (0..dom.len())
                        .map(|s| {
                            let key: Vec<u32> = cols.iter().map(|&c| dom.key(s)[c]).collect();
                            fdom.position(&key).expect("pair key projects into factor domain") as u32
                        })
                        .collect()
                };
                FamaPair { comp, a, b, ia: project(a), ib: project(b) }
            })
            .collect();
        Fama { rank, direct_dim, factor_offsets, factor_dim, pairs }
    }

    fn dim(&self) -> usize {
        self.direct_dim + self.rank * self.factor_dim
    }

    fn factor(&self, l: usize, f: usize) -> usize {
        self.direct_dim + l * self.factor_dim + self.factor_offsets[f]
    }

    fn g(&self, system: &GramSystem, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; system.dim()];
        g[..self.direct_dim].copy_from_slice(&theta[..self.direct_dim]);
        for p in &self.pairs {
            let out = &mut g[system.layout.range(p.comp)];
            for l in 0..self.rank {
                let (fa, fb) = (self.factor(l, p.a), self.factor(l, p.b));
                for (s, o) in out.iter_mut().enumerate() {
                    *o += theta[fa + p.ia[s] as usize] * theta[fb + p.ib[s] as usize];
                }
            }
        }
        g
    }

    /// `(∂g/∂θ)ᵀ q`.
    fn pullback(&self, system: &GramSystem, theta: &[f64], q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        out[..self.direct_dim].copy_from_slice(&q[..self.direct_dim]);
        for p in &self.pairs {
            let qp = &q[system.layout.range(p.comp)];
            for l in 0..self.rank {
                let (fa, fb) = (self.factor(l, p.a), self.factor(l, p.b));
                for (s, &qs) in qp.iter().enumerate() {
                    let (ua, ub) = (fa + p.ia[s] as usize, fb + p.ib[s] as usize);
                    out[ua] += qs * theta[ub];
                    out[ub] += qs * theta[ua];
                }
            }
        }
        out
    }

    /// Zero feature weights, small seeded noise in the factors.
    pub fn initial_theta(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.dim()];
        for x in &mut theta[self.direct_dim..] {
            *x = rng.gen_range(-0.01..=0.01);
        }
        theta
    }

    /// Factor block `l` of feature `f` (feature position among components 1..).
    pub fn factor_block<'t>(&self, theta: &'t [f64], l: usize, f: usize, len: usize) -> &'t [f64] {
        let at = self.factor(l, f);
        &theta[at..at + len]
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Linear,
    Fama(Fama),
}

#[derive(Debug, Clone, Copy)]
pub enum Penalty<'a> {
    Ridge,
    Fd(&'a FdContext),
}

#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub system: &'a GramSystem,
    pub model: Model,
    pub penalty: Penalty<'a>,
    pub lambda: f64,
}

impl<'a> Objective<'a> {
    pub fn linear(system: &'a GramSystem, lambda: f64) -> Self {
        Objective { system, model: Model::Linear, penalty: Penalty::Ridge, lambda }
    }

    pub fn fama(system: &'a GramSystem, rank: usize, lambda: f64) -> Self {
        Objective { system, model: Model::Fama(Fama::new(system, rank)), penalty: Penalty::Ridge, lambda }
    }

    pub fn with_fd(mut self, ctx: &'a FdContext) -> Self {
        self.penalty = Penalty::Fd(ctx);
        self
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            Model::Linear => self.system.dim(),
            Model::Fama(f) => f.dim(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.model, Model::Linear)
    }

    pub fn initial_theta(&self, seed: u64) -> Vec<f64> {
        match &self.model {
            Model::Linear => vec![0.0; self.dim()],
            Model::Fama(f) => f.initial_theta(seed),
        }
    }

    pub fn g(&self, theta: &[f64]) -> Vec<f64> {
        match &self.model {
            Model::Linear => theta.to_vec(),
            Model::Fama(f) => f.g(self.system, theta),
        }
    }

    /// `Ω(θ)` and `½ ∂Ω/∂θ`.
    pub fn penalty(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), SolverError> {
        match self.penalty {
            Penalty::Ridge => Ok((norm2(theta), theta.to_vec())),
            Penalty::Fd(ctx) => Ok(ctx.penalty_and_grad(&self.system.layout, theta)?),
        }
    }

    fn check(&self, theta: &[f64]) -> Result<(), SolverError> {
        if theta.len() == self.dim() {
            Ok(())
        } else {
            Err(GramError::LayoutMismatch { expected: self.dim(), got: theta.len() }.into())
        }
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64, SolverError> {
        self.check(theta)?;
        let g = self.g(theta);
        let sg = self.system.sigma_times(&g)?;
        let (omega, _) = self.penalty(theta)?;
        Ok(0.5 * dot(&g, &sg) - dot(&g, self.system.c()) + 0.5 * self.system.s_y() + 0.5 * self.lambda * omega)
    }

    pub fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), SolverError> {
        self.check(theta)?;
        let g = self.g(theta);
        let sg = self.system.sigma_times(&g)?;
        let (omega, half) = self.penalty(theta)?;
        let j = 0.5 * dot(&g, &sg) - dot(&g, self.system.c()) + 0.5 * self.system.s_y() + 0.5 * self.lambda * omega;
        let q: Vec<f64> = sg.iter().zip(self.system.c()).map(|(s, c)| s - c).collect();
        let mut grad = match &self.model {
            Model::Linear => q,
            Model::Fama(f) => f.pullback(self.system, theta, &q),
        };
        for (x, h) in grad.iter_mut().zip(&half) {
            *x += self.lambda * h;
        }
        Ok((j, grad))
    }

    pub fn grad(&self, theta: &[f64]) -> Result<Vec<f64>, SolverError> {
        Ok(self.value_and_grad(theta)?.1)
    }
}

/// Inner products fixed for one line search of a linear model. `p_d` is the
/// half penalty gradient applied to `d` (`d` itself for ridge).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineTerms {
    pub theta_sigma_d: f64,
    pub d_sigma_d: f64,
    pub c_d: f64,
    pub theta_p_d: f64,
    pub d_p_d: f64,
    pub d_norm2: f64,
}

impl LineTerms {
    pub fn new(theta: &[f64], d: &[f64], sigma_d: &[f64], p_d: &[f64], c: &[f64]) -> Self {
        LineTerms {
            theta_sigma_d: dot(theta, sigma_d),
            d_sigma_d: dot(d, sigma_d),
            c_d: dot(c, d),
            theta_p_d: dot(theta, p_d),
            d_p_d: dot(d, p_d),
            d_norm2: norm2(d),
        }
    }

    /// `J(θ − αd) − J(θ)`.
    pub fn delta(&self, alpha: f64, lambda: f64) -> f64 {
        -alpha * self.theta_sigma_d + 0.5 * alpha * alpha * self.d_sigma_d + alpha * self.c_d
            + 0.5 * lambda * (-2.0 * alpha * self.theta_p_d + alpha * alpha * self.d_p_d)
    }
}

/// True when step `α` lacks sufficient decrease, i.e.
/// `J(θ − αd) ≥ J(θ) − α/2 ‖d‖² + slack`, decided from precomputed inner
/// products only.
pub fn armijo_fast_check(t: &LineTerms, alpha: f64, lambda: f64, slack: f64) -> bool {
    alpha * t.theta_sigma_d - 0.5 * alpha * alpha * t.d_sigma_d - alpha * t.c_d + lambda * alpha * t.theta_p_d
        - 0.5 * lambda * alpha * alpha * t.d_p_d
        + slack
        <= 0.5 * alpha * t.d_norm2
}

/// Rounding allowance for the sufficient-decrease test at objective `j`.
/// A Barzilai-Borwein step can land exactly on the Armijo boundary, and
/// without the allowance the outcome there depends on summation order.
pub fn armijo_slack(j: f64, s_y: f64) -> f64 {
    ARMIJO_SLACK_ULPS * f64::EPSILON * j.abs().max(s_y.abs()).max(1.0)
}

/// Gradient at `θ − αd` for a linear model: `d − α (Σd + λ p_d)`.
pub fn next_grad_linear(d: &[f64], sigma_d: &[f64], p_d: &[f64], alpha: f64, lambda: f64) -> Vec<f64> {
    d.iter().zip(sigma_d).zip(p_d).map(|((d, s), p)| d - alpha * (s + lambda * p)).collect()
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tolerance: f64,
    /// Closed-form line search for linear models.
    pub fast_path: bool,
    /// On the fast path, advance J and the gradient by their update formulas
    /// instead of one fresh evaluation per iteration. Saves a Σ product but
    /// accumulates rounding that Barzilai-Borwein steps amplify.
    pub gradient_recurrence: bool,
    pub record_iterates: bool,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: crate::catalog::DEFAULT_MAX_ITERS,
            tolerance: crate::catalog::DEFAULT_TOLERANCE,
            fast_path: true,
            gradient_recurrence: false,
            record_iterates: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Every accepted iterate, the starting point first, when requested.
    pub iterates: Vec<Vec<f64>>,
    pub halvings: usize,
    /// Σ products evaluated inside backtracking loops.
    pub backtrack_sigma_products: usize,
}

/// Barzilai-Borwein proposal `⟨s,s⟩/⟨s,y⟩`, falling back to twice the last
/// accepted step when the curvature estimate is not positive.
fn bb_step(s: &[f64], y: &[f64], last: f64) -> f64 {
    let sy = dot(s, y);
    let alpha = if sy > 0.0 { norm2(s) / sy } else { 2.0 * last };
    if alpha.is_finite() {
        alpha.clamp(STEP_MIN, STEP_MAX)
    } else {
        STEP_MAX
    }
}

pub fn bgd_train(obj: &Objective, opts: &SolverOptions) -> Result<TrainResult, SolverError> {
    let theta0 = obj.initial_theta(opts.seed);
    bgd_from(obj, theta0, opts)
}

pub fn bgd_from(obj: &Objective, mut theta: Vec<f64>, opts: &SolverOptions) -> Result<TrainResult, SolverError> {
    let fast = opts.fast_path && obj.is_linear();
    let lambda = obj.lambda;
    let (mut j, mut d) = obj.value_and_grad(&theta)?;
    let mut result = TrainResult {
        theta: Vec::new(),
        objective: j,
        iterations: 0,
        converged: false,
        iterates: Vec::new(),
        halvings: 0,
        backtrack_sigma_products: 0,
    };
    if opts.record_iterates {
        result.iterates.push(theta.clone());
    }
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut last_alpha = FIRST_STEP;
    let grad_floor = GRAD_FLOOR_ULPS * f64::EPSILON * norm2(obj.system.c()).sqrt();

    for iter in 0..opts.max_iters {
        let d_norm2 = norm2(&d);
        if d_norm2 == 0.0 {
            result.converged = true;
            break;
        }
        let alpha0 = match &prev {
            None => FIRST_STEP,
            Some((s, y)) => bb_step(s, y, last_alpha),
        };
        let mut alpha = alpha0;
        let slack = armijo_slack(j, obj.system.s_y());

        let (next_theta, next_j, next_d);
        if fast {
            let sigma_d = obj.system.sigma_times(&d)?;
            let (_, p_d) = obj.penalty(&d)?;
            let terms = LineTerms::new(&theta, &d, &sigma_d, &p_d, obj.system.c());
            let before = obj.system.sigma_products();
            let mut halvings = 0;
            while armijo_fast_check(&terms, alpha, lambda, slack) {
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    return stalled(result, theta, j, Stall { iteration: iter, halvings, alpha0, d_norm2 });
                }
                alpha *= 0.5;
            }
            result.backtrack_sigma_products += obj.system.sigma_products() - before;
            result.halvings += halvings;
            next_theta = step(&theta, &d, alpha);
            if opts.gradient_recurrence {
                next_j = j + terms.delta(alpha, lambda);
                next_d = next_grad_linear(&d, &sigma_d, &p_d, alpha, lambda);
            } else {
                let (jn, dn) = obj.value_and_grad(&next_theta)?;
                next_j = jn;
                next_d = dn;
            }
        } else {
            let before = obj.system.sigma_products();
            let mut halvings = 0;
            let accepted = loop {
                let trial = step(&theta, &d, alpha);
                let jt = obj.value(&trial)?;
                if jt < j - 0.5 * alpha * d_norm2 + slack {
                    break trial;
                }
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    result.backtrack_sigma_products += obj.system.sigma_products() - before;
                    return stalled(result, theta, j, Stall { iteration: iter, halvings, alpha0, d_norm2 });
                }
                alpha *= 0.5;
            };
            result.backtrack_sigma_products += obj.system.sigma_products() - before;
            result.halvings += halvings;
            let (jn, dn) = obj.value_and_grad(&accepted)?;
            next_theta = accepted;
            next_j = jn;
            next_d = dn;
        }
        if !next_j.is_finite() {
            return Err(SolverError::NonFinite(iter));
        }
        debug_assert!(next_j <= j + 1e-12 * j.abs().max(1.0), "objective increased: {j} -> {next_j}");

        let s: Vec<f64> = next_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next_d.iter().zip(&d).map(|(a, b)| a - b).collect();
        let change = norm2(&s).sqrt() / norm2(&theta).sqrt().max(1.0);
        theta = next_theta;
        j = next_j;
        d = next_d;
        last_alpha = alpha;
        prev = Some((s, y));
        result.iterations = iter + 1;
        if opts.record_iterates {
            result.iterates.push(theta.clone());
        }
        log::trace!("iter {} J={j:.12e} alpha={alpha:.3e} change={change:.3e}", iter + 1);
        // a short Barzilai-Borwein step alone says little about stationarity
        let stationary = norm2(&d).sqrt() < opts.tolerance.max(grad_floor);
        if change < opts.tolerance && stationary {
            result.converged = true;
            break;
        }
    }
    result.objective = j;
    result.theta = theta;
    Ok(result)
}

fn step(theta: &[f64], d: &[f64], alpha: f64) -> Vec<f64> {
    theta.iter().zip(d).map(|(t, d)| t - alpha * d).collect()
}

/// Halving ran out. When the decrease demanded at the first proposal is
/// already below the rounding noise of `J`, the iterate is stationary to
/// working precision and counts as converged.
fn stalled(mut result: TrainResult, theta: Vec<f64>, j: f64, stall: Stall) -> Result<TrainResult, SolverError> {
    if 0.5 * stall.alpha0 * stall.d_norm2 <= 64.0 * f64::EPSILON * j.abs().max(1.0) {
        result.converged = true;
        result.objective = j;
        result.theta = theta;
        result.halvings += stall.halvings;
        return Ok(result);
    }
    Err(SolverError::LineSearchStall { iteration: stall.iteration, halvings: stall.halvings })
}

struct Stall {
    iteration: usize,
    halvings: usize,
    alpha0: f64,
    d_norm2: f64,
}
