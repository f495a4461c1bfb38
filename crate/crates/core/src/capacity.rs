//! Smoothness and norm-based capacity quantities of a (substitute, target)
//! pair, the generalization-bound value built from them, and numerical
//! checks of the three perturbation inequalities they rest on.
//!
//! Layer `i` contributes `σ_i = ‖W_i‖₂` (power iteration) and a constant for
//! the activation applied after it. With prefix products
//! `p_i = ∏_{j≤i} γ_j σ_j`:
//!
//! * `L_w = ∏ lip_i σ_i`
//! * `κ   = (Σ_i p_i) · p_L`
//! * `R_w = (Σ_i p_i) · (Σ_i (‖W_iᵀ‖_{2,1}/σ_i)^{2/3})^{3/2}`
//! * `R_V = (∏ ξ_i σ_i) · (same sum over the target layers)^{3/2}`

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{lambda_optimal, lambda_optimal_from};
use crate::error::{Error, Result};
use crate::linalg::{norm_2_1, spectral_norm, svd_bruteforce, Matrix, BRUTEFORCE_LIMIT};
use crate::nn::{Loss, Network};

/// Power-iteration tolerance for every norm entering a capacity quantity.
pub const NORM_TOL: f64 = 1e-12;
pub const NORM_MAX_ITERS: usize = 20_000;

/// Layers with a smaller spectral norm make the capacity ratios undefined.
pub const MIN_LAYER_NORM: f64 = 1e-12;

/// Spectral norm used by every capacity computation: exact for small
/// matrices, power iteration otherwise.
pub fn layer_norm(w: &Matrix) -> f64 {
    if w.rows() <= BRUTEFORCE_LIMIT && w.cols() <= BRUTEFORCE_LIMIT {
        if let Ok(s) = svd_bruteforce(w) {
            return s;
        }
    }
    spectral_norm(w, NORM_TOL, NORM_MAX_ITERS)
        .map(|e| e.value)
        .unwrap_or(0.0)
}

pub fn layer_norms(net: &Network) -> Vec<f64> {
    net.weights().map(layer_norm).collect()
}

/// `∏ lip_i ‖W_i‖₂`, the end-to-end Lipschitz constant of the network.
pub fn lipschitz_product(net: &Network) -> f64 {
    net.layers()
        .iter()
        .map(|l| l.activation.lipschitz() * layer_norm(&l.weights))
        .product()
}

/// Per-layer smoothness constants γ_i; refuses activations with unbounded
/// second derivative.
fn gammas(net: &Network) -> Result<Vec<f64>> {
    net.layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.activation.gamma().ok_or_else(|| {
                Error::Assumption(format!(
                    "substitute layer {i} uses {} whose smoothness is unbounded; \
                     smoothness-based quantities need a twice-differentiable activation",
                    l.activation
                ))
            })
        })
        .collect()
}

/// Prefix products `p_i = ∏_{j≤i} γ_j σ_j`.
pub fn prefix_products(net: &Network) -> Result<Vec<f64>> {
    let g = gammas(net)?;
    let mut acc = 1.0;
    Ok(layer_norms(net)
        .iter()
        .zip(g)
        .map(|(s, g)| {
            acc *= g * s;
            acc
        })
        .collect())
}

fn check_loss(loss: Loss) -> Result<()> {
    match (loss.lipschitz(), loss.smoothness()) {
        (Some(l), Some(s)) if l <= 1.0 && s <= 1.0 => Ok(()),
        _ => Err(Error::Assumption(format!(
            "loss `{loss}` must be 1-Lipschitz and 1-smooth in the logits \
             for smoothness-based quantities"
        ))),
    }
}

/// Smoothness constant of `x ↦ ℓ(net(x), y)`.
pub fn kappa(net: &Network, loss: Loss) -> Result<f64> {
    check_loss(loss)?;
    let p = prefix_products(net)?;
    Ok(p.iter().sum::<f64>() * p[p.len() - 1])
}

fn ratio_term(net: &Network, role: &str) -> Result<f64> {
    let mut sum = 0.0;
    for (i, w) in net.weights().enumerate() {
        let s = layer_norm(w);
        if s < MIN_LAYER_NORM {
            return Err(Error::Assumption(format!(
                "{role} layer {i} has spectral norm {s:e}; the capacity ratio is undefined"
            )));
        }
        sum += (norm_2_1(&w.transpose()) / s).powf(2.0 / 3.0);
    }
    Ok(sum.powf(1.5))
}

/// Norm-based capacity `R_w` of a substitute network.
pub fn capacity_substitute(net: &Network) -> Result<f64> {
    let lead: f64 = prefix_products(net)?.iter().sum();
    Ok(lead * ratio_term(net, "substitute")?)
}

/// Norm-based capacity `R_V` of a target network; only Lipschitz constants
/// are needed, so relu targets are allowed.
pub fn capacity_target(net: &Network) -> Result<f64> {
    Ok(lipschitz_product(net) * ratio_term(net, "target")?)
}

/// Inputs of the closed-form bound value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub loss_bound: f64,
    pub omega: f64,
    pub n: usize,
    pub data_norm_bound: f64,
    pub lipschitz: f64,
    pub lambda: f64,
    pub tau: f64,
    pub target_capacity: f64,
    pub capacity: f64,
    pub max_dim: usize,
}

impl BoundTerms {
    /// `c·√(ln(1/ω)/n) + (B + L_w/λ)(R_V + L_w R_w/τ²)·ln n·ln D/n`, with the
    /// hidden universal constant set to 1.
    pub fn value(&self) -> f64 {
        let n = self.n as f64;
        let first = self.loss_bound * ((1.0 / self.omega).ln() / n).sqrt();
        let second = (self.data_norm_bound + self.lipschitz / self.lambda)
            * (self.target_capacity + self.lipschitz * self.capacity / (self.tau * self.tau))
            * n.ln()
            * (self.max_dim as f64).ln()
            / n;
        first + second
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionFlags {
    /// Loss bounded with Lipschitz and smoothness constants at most 1.
    pub loss: bool,
    /// Substitute activations zero-fixed with finite smoothness.
    pub substitute: bool,
    /// Target activations zero-fixed and Lipschitz.
    pub target: bool,
    /// Some recorded constant exceeds 1 and enters κ as is.
    pub constants_exceed_one: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub substitute_norms: Vec<f64>,
    pub target_norms: Vec<f64>,
    pub kappa: f64,
    pub lipschitz: f64,
    pub capacity: f64,
    pub target_capacity: f64,
    pub data_norm_bound: f64,
    pub loss_bound: f64,
    pub tau: f64,
    pub lambda: f64,
    pub omega: f64,
    pub n: usize,
    pub max_dim: usize,
    /// `L_w · Σ_i p_i`.
    pub contraction_threshold: f64,
    /// `λ(1−τ) − contraction_threshold`.
    pub contraction_margin: f64,
    /// The condition with the full product inside the sum, `L_w·(L+1)·p_L`.
    pub full_product_threshold: f64,
    pub full_product_margin: f64,
    /// `None` when the contraction condition fails.
    pub bound_value: Option<f64>,
    /// The bound's universal constant is fixed to this value.
    pub bound_constant: f64,
    pub assumptions: AssumptionFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub data_norm_bound: f64,
    pub lambda: f64,
    pub tau: f64,
    pub omega: f64,
    pub n: usize,
}

/// Computes every capacity quantity for `(sub, tgt)` and, when the
/// contraction condition `λ(1−τ) ≥ L_w·Σ p_i` holds, the bound value.
pub fn generalization_bound(
    sub: &Network,
    tgt: &Network,
    loss: Loss,
    params: BoundParams,
) -> Result<CapacityReport> {
    let BoundParams {
        data_norm_bound,
        lambda,
        tau,
        omega,
        n,
    } = params;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::InvalidArgument(format!("omega must lie in (0, 1], got {omega}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if !(data_norm_bound >= 0.0 && data_norm_bound.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "data norm bound must be finite and >= 0, got {data_norm_bound}"
        )));
    }
    let loss_bound = loss.bound().ok_or_else(|| {
        Error::Assumption(format!("loss `{loss}` is unbounded; the bound needs a bounded loss"))
    })?;

    let mut diagnostics = Vec::new();
    let kappa = kappa(sub, loss)?;
    let gammas = gammas(sub)?;
    let prefix = prefix_products(sub)?;
    let lipschitz = lipschitz_product(sub);
    let capacity = capacity_substitute(sub)?;
    let target_capacity = capacity_target(tgt)?;

    let exceed = gammas.iter().any(|g| *g > 1.0)
        || loss.lipschitz().unwrap_or(f64::INFINITY) > 1.0
        || loss.smoothness().unwrap_or(f64::INFINITY) > 1.0;
    if exceed {
        diagnostics.push("a recorded activation or loss constant exceeds 1".to_string());
    }
    let target_ok = tgt.layers().iter().all(|l| l.activation.apply(0.0) == 0.0);
    if !target_ok {
        diagnostics.push("a target activation does not fix zero".to_string());
    }

    let prefix_sum: f64 = prefix.iter().sum();
    let contraction_threshold = lipschitz * prefix_sum;
    let contraction_margin = lambda * (1.0 - tau) - contraction_threshold;
    let full_product_threshold = lipschitz * prefix.len() as f64 * prefix[prefix.len() - 1];
    let full_product_margin = lambda * (1.0 - tau) - full_product_threshold;
    if contraction_margin < 0.0 {
        diagnostics.push(format!(
            "contraction condition fails: lambda*(1-tau) = {} < {}",
            lambda * (1.0 - tau),
            contraction_threshold
        ));
    }

    let max_dim = sub
        .weights()
        .chain(tgt.weights())
        .map(|w| w.rows().max(w.cols()))
        .max()
        .unwrap_or(1);
    let terms = BoundTerms {
        loss_bound,
        omega,
        n,
        data_norm_bound,
        lipschitz,
        lambda,
        tau,
        target_capacity,
        capacity,
        max_dim,
    };
    Ok(CapacityReport {
        substitute_norms: layer_norms(sub),
        target_norms: layer_norms(tgt),
        kappa,
        lipschitz,
        capacity,
        target_capacity,
        data_norm_bound,
        loss_bound,
        tau,
        lambda,
        omega,
        n,
        max_dim,
        contraction_threshold,
        contraction_margin,
        full_product_threshold,
        full_product_margin,
        bound_value: (contraction_margin >= 0.0).then(|| terms.value()),
        bound_constant: 1.0,
        assumptions: AssumptionFlags {
            loss: true,
            substitute: true,
            target: target_ok,
            constants_exceed_one: exceed,
            diagnostics,
        },
    })
}

/// Smallest λ with `λ(1−τ) ≥ L_w·Σ p_i` in floating point.
pub fn minimal_lambda(sub: &Network, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let threshold = lipschitz_product(sub) * prefix_products(sub)?.iter().sum::<f64>();
    let mut lambda = threshold / (1.0 - tau);
    while lambda * (1.0 - tau) < threshold {
        lambda = lambda.next_up();
    }
    Ok(lambda)
}

/// Outcome of checking one inequality `observed ≤ bound + slack`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub observed: f64,
    pub bound: f64,
    pub slack: f64,
    /// `observed / bound`, or 0 when both vanish.
    pub ratio: f64,
    pub holds: bool,
}

impl BoundCheck {
    fn new(observed: f64, bound: f64, slack: f64) -> Self {
        let ratio = if observed == 0.0 {
            0.0
        } else if bound == 0.0 {
            f64::INFINITY
        } else {
            observed / bound
        };
        BoundCheck {
            observed,
            bound,
            slack,
            ratio,
            holds: observed <= bound + slack,
        }
    }
}

/// Aggregate of a batch of checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub checks: Vec<BoundCheck>,
    pub max_ratio: f64,
    /// Indices of the failing instances.
    pub violations: Vec<usize>,
}

impl Verification {
    pub fn from_checks(checks: Vec<BoundCheck>) -> Self {
        let max_ratio = checks.iter().map(|c| c.ratio).fold(0.0, f64::max);
        let violations = checks
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.holds)
            .map(|(i, _)| i)
            .collect();
        Verification {
            checks,
            max_ratio,
            violations,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

const FIXED_POINT_MAX_ITERS: usize = 10_000;

/// Checks `‖δ*(x, y)‖₂ ≤ L_w/λ + tol` for the λ-optimal attack on every sample.
pub fn verify_attack_norm_bound(
    net: &Network,
    loss: Loss,
    lambda: f64,
    samples: &[(&[f64], usize)],
    tol: f64,
) -> Result<Verification> {
    let lw = lipschitz_product(net);
    let checks = samples
        .par_iter()
        .map(|(x, y)| {
            let r = lambda_optimal(net, loss, x, *y, lambda, tol, FIXED_POINT_MAX_ITERS)?;
            let mut c = BoundCheck::new(r.delta.norm_l2(), lw / lambda, tol);
            c.holds &= r.converged;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Verification::from_checks(checks))
}

/// `(L_w · Σ_{i≥k} p_i / σ_k) · ‖Δ_k‖₂`, the factor shared by both
/// weight-perturbation inequalities.
fn perturbation_factor(net: &Network, k: usize, delta_norm: f64) -> Result<f64> {
    let prefix = prefix_products(net)?;
    let sigma_k = layer_norm(&net.layers()[k].weights);
    if sigma_k < MIN_LAYER_NORM {
        return Err(Error::Assumption(format!("layer {k} has zero spectral norm")));
    }
    let tail: f64 = prefix[k..].iter().sum();
    Ok(lipschitz_product(net) * tail / sigma_k * delta_norm)
}

fn perturbed(net: &Network, k: usize, delta: &Matrix) -> Result<Network> {
    let w = net
        .layers()
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {k}")))?
        .weights
        .add(delta)?;
    net.with_layer_weights(k, w)
}

/// Checks `‖J(x; w) − J(x; w̃)‖₂ ≤ (L_w Σ_{i≥k} p_i / σ_k)·‖Δ_k‖₂` where `w̃`
/// adds `Δ_k` to layer `k`.
pub fn verify_jacobian_perturbation_bound(
    net: &Network,
    x: &[f64],
    k: usize,
    delta: &Matrix,
) -> Result<BoundCheck> {
    let other = perturbed(net, k, delta)?;
    let diff = net.input_jacobian(x)?.sub(&other.input_jacobian(x)?)?;
    let observed = layer_norm(&diff);
    let bound = perturbation_factor(net, k, layer_norm(delta))?;
    Ok(BoundCheck::new(observed, bound, 1e-9 * bound))
}

/// Checks `‖δ*_w(x,y) − δ*_w̃(x,y)‖₂ ≤ (L_w Σ_{i≥k} p_i)/(τ λ σ_k)·‖Δ_k‖₂`
/// with slack `2·tol`. Both networks must satisfy `κ ≤ λ(1−τ)`.
#[allow(clippy::too_many_arguments)]
pub fn verify_attack_perturbation_bound(
    net: &Network,
    loss: Loss,
    lambda: f64,
    tau: f64,
    x: &[f64],
    y: usize,
    k: usize,
    delta: &Matrix,
    tol: f64,
) -> Result<BoundCheck> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let other = perturbed(net, k, delta)?;
    for (name, n) in [("original", net), ("perturbed", &other)] {
        let kp = kappa(n, loss)?;
        if kp > lambda * (1.0 - tau) {
            return Err(Error::Assumption(format!(
                "{name} network has smoothness {kp} above lambda*(1-tau) = {}",
                lambda * (1.0 - tau)
            )));
        }
    }
    let a = lambda_optimal(net, loss, x, y, lambda, tol, FIXED_POINT_MAX_ITERS)?;
    let b = lambda_optimal_from(&other, loss, x, y, lambda, &a.delta, tol, FIXED_POINT_MAX_ITERS)?;
    let observed = a.delta.sub(&b.delta).norm_l2();
    let bound = perturbation_factor(net, k, layer_norm(delta))? / (tau * lambda);
    let mut c = BoundCheck::new(observed, bound, 2.0 * tol);
    c.holds &= a.converged && b.converged;
    Ok(c)
}
