//! Norm-bounded adversarial perturbations.
//!
//! All attacks are untargeted: they ascend the loss of the true label.
//! FGM and FGSM take a single normalized (resp. sign) gradient step of
//! length ε. PGD repeats `r` such steps of size α from δ₀ = 0, projecting
//! back onto the ε-ball after each one. The λ-optimal attack has no budget;
//! it solves `λ·δ = ∇ₓ ℓ(h(x + δ), y)` by Banach iteration, which contracts
//! whenever the smoothness constant κ of `ℓ∘h` is below λ.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity;
use crate::error::{Error, Result};
use crate::linalg::{project_l2, project_linf, Vector};
use crate::nn::{Loss, Network};

/// Gradients with a smaller L2 norm are treated as zero.
pub const ZERO_GRADIENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgm,
    Fgsm,
    PgdL2,
    PgdLinf,
    LambdaOpt,
}

impl AttackMethod {
    /// Norm in which the budget is measured; `None` for the λ-optimal attack.
    pub fn norm(&self) -> Option<NormKind> {
        match self {
            AttackMethod::Fgm | AttackMethod::PgdL2 => Some(NormKind::L2),
            AttackMethod::Fgsm | AttackMethod::PgdLinf => Some(NormKind::Linf),
            AttackMethod::LambdaOpt => None,
        }
    }

    pub fn is_iterative(&self) -> bool {
        matches!(self, AttackMethod::PgdL2 | AttackMethod::PgdLinf)
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Fgm => "fgm",
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::PgdL2 => "pgd-l2",
            AttackMethod::PgdLinf => "pgd-linf",
            AttackMethod::LambdaOpt => "lambda-opt",
        })
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "fgm" => Ok(AttackMethod::Fgm),
            "fgsm" => Ok(AttackMethod::Fgsm),
            "pgd-l2" => Ok(AttackMethod::PgdL2),
            "pgd-linf" => Ok(AttackMethod::PgdLinf),
            "lambda-opt" => Ok(AttackMethod::LambdaOpt),
            _ => Err(Error::InvalidArgument(format!("unknown attack `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    Linf,
}

impl NormKind {
    pub fn of(&self, v: &[f64]) -> f64 {
        match self {
            NormKind::L2 => crate::linalg::l2(v),
            NormKind::Linf => v.iter().fold(0.0, |a, x| a.max(x.abs())),
        }
    }
}

/// PGD step size: either fixed, or the rule `α = 1.5·ε/r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Rule,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    /// Absolute budget ε.
    pub epsilon: f64,
    /// PGD iterations `r`.
    pub steps: usize,
    pub step_size: StepSize,
    /// Penalty weight of the λ-optimal attack.
    pub lambda: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iters: usize,
}

impl AttackSpec {
    fn base(method: AttackMethod, epsilon: f64) -> Self {
        AttackSpec {
            method,
            epsilon,
            steps: 1,
            step_size: StepSize::Rule,
            lambda: 1.0,
            fixed_point_tol: 1e-10,
            fixed_point_max_iters: 500,
        }
    }

    pub fn fgm(epsilon: f64) -> Self {
        Self::base(AttackMethod::Fgm, epsilon)
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::base(AttackMethod::Fgsm, epsilon)
    }

    pub fn pgd_l2(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            steps,
            ..Self::base(AttackMethod::PgdL2, epsilon)
        }
    }

    pub fn pgd_linf(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            steps,
            ..Self::base(AttackMethod::PgdLinf, epsilon)
        }
    }

    pub fn lambda_opt(lambda: f64) -> Self {
        AttackSpec {
            lambda,
            ..Self::base(AttackMethod::LambdaOpt, 0.0)
        }
    }

    pub fn with_step_size(mut self, step_size: StepSize) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// The PGD step α actually used.
    pub fn resolved_step_size(&self) -> f64 {
        match self.step_size {
            StepSize::Fixed(a) => a,
            StepSize::Rule => 1.5 * self.epsilon / self.steps.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack budget must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.method.is_iterative() && self.steps == 0 {
            return Err(Error::InvalidArgument("PGD needs at least one step".into()));
        }
        if let StepSize::Fixed(a) = self.step_size {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidArgument(format!("bad PGD step size {a}")));
            }
        }
        if self.method == AttackMethod::LambdaOpt {
            if !(self.lambda > 0.0 && self.lambda.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "lambda must be positive, got {}",
                    self.lambda
                )));
            }
            if !(self.fixed_point_tol > 0.0) || self.fixed_point_max_iters == 0 {
                return Err(Error::InvalidArgument(
                    "fixed-point iteration needs tol > 0 and max_iters >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-feature box the perturbed input is clipped to, when the data declares one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        BoxDomain {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    /// Returns `clip(x + δ) − x`.
    fn clip_delta(&self, x: &[f64], delta: Vector) -> Vector {
        x.iter()
            .zip(delta.iter())
            .enumerate()
            .map(|(i, (xi, di))| (xi + di).clamp(self.lo[i], self.hi[i]) - xi)
            .collect::<Vec<_>>()
            .into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub delta: Vector,
    pub loss_before: f64,
    pub loss_after: f64,
    pub converged: bool,
    pub iterations_used: usize,
}

fn finish(
    net: &Network,
    loss: Loss,
    x: &[f64],
    y: usize,
    loss_before: f64,
    delta: Vector,
    converged: bool,
    iterations_used: usize,
) -> Result<AttackResult> {
    let loss_after = net.loss(loss, &delta.add(x), y)?;
    Ok(AttackResult {
        delta,
        loss_before,
        loss_after,
        converged,
        iterations_used,
    })
}

fn clip(domain: Option<&BoxDomain>, x: &[f64], delta: Vector) -> Vector {
    match domain {
        Some(d) => d.clip_delta(x, delta),
        None => delta,
    }
}

fn l2_direction(g: &[f64]) -> Vector {
    let n = crate::linalg::l2(g);
    if n < ZERO_GRADIENT {
        Vector::zeros(g.len())
    } else {
        g.iter().map(|v| v / n).collect::<Vec<_>>().into()
    }
}

fn sign_direction(g: &[f64]) -> Vector {
    g.iter()
        .map(|v| {
            if *v > 0.0 {
                1.0
            } else if *v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect::<Vec<_>>()
        .into()
}

fn check_budget(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("budget must be >= 0, got {eps}")));
    }
    Ok(())
}

/// Fast gradient method: `δ = ε·g/‖g‖₂`.
pub fn fgm(net: &Network, loss: Loss, x: &[f64], y: usize, eps: f64) -> Result<AttackResult> {
    fgm_in(net, loss, x, y, eps, None)
}

pub fn fgm_in(
    net: &Network,
    loss: Loss,
    x: &[f64],
    y: usize,
    eps: f64,
    domain: Option<&BoxDomain>,
) -> Result<AttackResult> {
    check_budget(eps)?;
    let (before, g) = net.loss_and_input_gradient(loss, x, y)?;
    let delta = clip(domain, x, l2_direction(&g).scale(eps));
    finish(net, loss, x, y, before, delta, true, 1)
}

/// Fast gradient sign method: `δ_b = ε·sign(g_b)` with `sign(0) = 0`.
pub fn fgsm(net: &Network, loss: Loss, x: &[f64], y: usize, eps: f64) -> Result<AttackResult> {
    fgsm_in(net, loss, x, y, eps, None)
}

pub fn fgsm_in(
    net: &Network,
    loss: Loss,
    x: &[f64],
    y: usize,
    eps: f64,
    domain: Option<&BoxDomain>,
) -> Result<AttackResult> {
    check_budget(eps)?;
    let (before, g) = net.loss_and_input_gradient(loss, x, y)?;
    let delta = clip(domain, x, sign_direction(&g).scale(eps));
    finish(net, loss, x, y, before, delta, true, 1)
}

/// Projected gradient ascent from δ₀ = 0 for `spec.steps` iterations.
pub fn pgd(
    net: &Network,
    loss: Loss,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
    domain: Option<&BoxDomain>,
) -> Result<AttackResult> {
    spec.validate()?;
    let l2 = match spec.method {
        AttackMethod::PgdL2 => true,
        AttackMethod::PgdLinf => false,
        other => {
            return Err(Error::InvalidArgument(format!(
                "pgd called with method {other}"
            )))
        }
    };
    let eps = spec.epsilon;
    let alpha = spec.resolved_step_size();
    let mut delta = Vector::zeros(x.len());
    let mut before = f64::NAN;
    for step in 0..spec.steps {
        let (value, g) = net.loss_and_input_gradient(loss, &delta.add(x), y)?;
        if step == 0 {
            before = value;
        }
        let moved = if l2 {
            project_l2(&delta.axpy(alpha, &l2_direction(&g)), eps)
        } else {
            project_linf(&delta.axpy(alpha, &sign_direction(&g)), eps)
        };
        delta = clip(domain, x, moved);
    }
    finish(net, loss, x, y, before, delta, true, spec.steps)
}

/// Outcome of the Banach iteration `δ ← ∇(x + δ)/λ`.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub delta: Vector,
    pub converged: bool,
    pub iterations: usize,
    /// `‖δ_{t+1} − δ_t‖₂` for every iteration performed.
    pub gaps: Vec<f64>,
}

/// Iterates `δ_{t+1} = grad(x + δ_t)/λ` from `init` until successive iterates
/// are within `tol`, or `max_iters` is reached.
pub fn solve_fixed_point<G>(
    grad: G,
    x: &[f64],
    lambda: f64,
    init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<FixedPoint>
where
    G: Fn(&[f64]) -> Result<Vector>,
{
    if init.len() != x.len() {
        return Err(Error::Dimension("initial perturbation has the wrong size".into()));
    }
    let mut delta = Vector::from(init);
    let mut gaps = Vec::new();
    for it in 1..=max_iters {
        let next = grad(&delta.add(x))?.scale(1.0 / lambda);
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("fixed-point iterate {it}")));
        }
        let gap = next.sub(&delta).norm_l2();
        gaps.push(gap);
        delta = next;
        if gap <= tol {
            return Ok(FixedPoint {
                delta,
                converged: true,
                iterations: it,
                gaps,
            });
        }
    }
    Ok(FixedPoint {
        delta,
        converged: false,
        iterations: max_iters,
        gaps,
    })
}

/// The λ-optimal perturbation, i.e. the maximizer of
/// `ℓ(h(x + δ), y) − (λ/2)‖δ‖²`, started from δ₀ = 0.
///
/// Refuses when the certified smoothness constant κ is not below λ.
pub fn lambda_optimal(
    net: &Network,
    loss: Loss,
    x: &[f64],
    y: usize,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<AttackResult> {
    lambda_optimal_from(net, loss, x, y, lambda, &vec![0.0; x.len()], tol, max_iters)
}

#[allow(clippy::too_many_arguments)]
pub fn lambda_optimal_from(
    net: &Network,
    loss: Loss,
    x: &[f64],
    y: usize,
    lambda: f64,
    init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<AttackResult> {
    let spec = AttackSpec {
        fixed_point_tol: tol,
        fixed_point_max_iters: max_iters,
        ..AttackSpec::lambda_opt(lambda)
    };
    spec.validate()?;
    let kappa = capacity::kappa(net, loss)?;
    if kappa >= lambda {
        return Err(Error::Contraction { kappa, lambda });
    }
    let before = net.loss(loss, x, y)?;
    let fp = solve_fixed_point(
        |u| net.input_gradient(loss, u, y),
        x,
        lambda,
        init,
        tol,
        max_iters,
    )?;
    finish(net, loss, x, y, before, fp.delta, fp.converged, fp.iterations)
}

/// Runs the attack described by `spec` against `net` at `(x, y)`.
pub fn attack(
    spec: &AttackSpec,
    net: &Network,
    loss: Loss,
    x: &[f64],
    y: usize,
    domain: Option<&BoxDomain>,
) -> Result<AttackResult> {
    spec.validate()?;
    match spec.method {
        AttackMethod::Fgm => fgm_in(net, loss, x, y, spec.epsilon, domain),
        AttackMethod::Fgsm => fgsm_in(net, loss, x, y, spec.epsilon, domain),
        AttackMethod::PgdL2 | AttackMethod::PgdLinf => pgd(net, loss, x, y, spec, domain),
        AttackMethod::LambdaOpt => lambda_optimal(
            net,
            loss,
            x,
            y,
            spec.lambda,
            spec.fixed_point_tol,
            spec.fixed_point_max_iters,
        ),
    }
}

/// Perturbations for a batch of samples, computed in parallel and returned in
/// input order.
pub fn attack_batch(
    spec: &AttackSpec,
    net: &Network,
    loss: Loss,
    samples: &[(&[f64], usize)],
    domain: Option<&BoxDomain>,
) -> Result<Vec<Vector>> {
    samples
        .par_iter()
        .map(|(x, y)| attack(spec, net, loss, x, *y, domain).map(|r| r.delta))
        .collect()
}
