//! Transferability and generalization measures of an attack scheme.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::nn::{Loss, Network};

/// A candidate target with an identifier used in reports.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub network: &'a Network,
}

/// An attack scheme `(x, y) ↦ δ`.
pub trait AttackScheme: Sync {
    fn perturb(&self, x: &[f64], y: usize) -> Result<Vector>;
}

impl<F> AttackScheme for F
where
    F: Fn(&[f64], usize) -> Result<Vector> + Sync,
{
    fn perturb(&self, x: &[f64], y: usize) -> Result<Vector> {
        self(x, y)
    }
}

/// The zero perturbation.
pub struct NoAttack;

impl AttackScheme for NoAttack {
    fn perturb(&self, x: &[f64], _y: usize) -> Result<Vector> {
        Ok(Vector::zeros(x.len()))
    }
}

/// `spec` run against a fixed substitute, clipped to the data's domain.
pub struct SubstituteAttack<'a> {
    pub substitute: &'a Network,
    pub spec: &'a AttackSpec,
    pub loss: Loss,
    pub domain: Option<&'a crate::attacks::BoxDomain>,
}

impl AttackScheme for SubstituteAttack<'_> {
    fn perturb(&self, x: &[f64], y: usize) -> Result<Vector> {
        attack(self.spec, self.substitute, self.loss, x, y, self.domain).map(|r| r.delta)
    }
}

fn perturbations(scheme: &dyn AttackScheme, data: &Dataset) -> Result<Vec<Vector>> {
    data.samples()
        .par_iter()
        .map(|(x, y)| scheme.perturb(x, *y))
        .collect()
}

/// Minimum over the pool of a target's mean loss on the perturbed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferLoss {
    pub value: f64,
    pub target: String,
}

/// `min_f (1/n) Σ ℓ(f(x_i + δ(x_i, y_i)), y_i)` over a finite candidate pool.
/// Ties go to the earliest candidate.
pub fn transfer_loss(
    scheme: &dyn AttackScheme,
    targets: &[Candidate<'_>],
    loss: Loss,
    data: &Dataset,
) -> Result<TransferLoss> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty target pool".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("transfer loss".into()));
    }
    let deltas = perturbations(scheme, data)?;
    let mut best: Option<TransferLoss> = None;
    for t in targets {
        let total = data
            .features()
            .iter()
            .zip(data.labels())
            .zip(&deltas)
            .map(|((x, y), d)| t.network.loss(loss, &d.add(x), *y))
            .sum::<Result<f64>>()?;
        let value = total / data.len() as f64;
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(TransferLoss {
                value,
                target: t.id.to_string(),
            });
        }
    }
    Ok(best.expect("nonempty pool"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferScore {
    pub empirical_transfer: f64,
    pub heldout_transfer: f64,
    /// `empirical_transfer − heldout_transfer`.
    pub gen_error: f64,
    pub empirical_target: String,
    pub heldout_target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineageCheck {
    /// Refuse overlapping splits.
    Enforce,
    /// Accept any pair of splits.
    Skip,
}

/// Generalization error of an attack scheme: its transfer loss on the data it
/// was designed on minus that on held-out data.
pub fn generalization_error(
    scheme: &dyn AttackScheme,
    targets: &[Candidate<'_>],
    loss: Loss,
    train: &Dataset,
    heldout: &Dataset,
    check: LineageCheck,
) -> Result<TransferScore> {
    if check == LineageCheck::Enforce && train.lineage().overlaps(heldout.lineage()) {
        return Err(Error::LineageOverlap(format!(
            "`{}` and `{}`",
            train.lineage().path,
            heldout.lineage().path
        )));
    }
    let e = transfer_loss(scheme, targets, loss, train)?;
    let h = transfer_loss(scheme, targets, loss, heldout)?;
    Ok(TransferScore {
        empirical_transfer: e.value,
        heldout_transfer: h.value,
        gen_error: e.value - h.value,
        empirical_target: e.target,
        heldout_target: h.target,
    })
}

/// Which samples count towards a transferability rate.
#[derive(Debug, Clone, Copy)]
pub enum Eligibility<'a> {
    /// The target classifies the clean sample correctly.
    CleanCorrect,
    /// Additionally both substitutes classify the clean sample correctly.
    IntersectionClean { other: &'a Network },
    /// Additionally each substitute classifies its own adversarial example
    /// correctly.
    IntersectionAdversarial { other: &'a Network },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EligibilityKind {
    CleanCorrectOnTarget,
    IntersectionClean,
    IntersectionAdversarial,
}

impl Eligibility<'_> {
    pub fn kind(&self) -> EligibilityKind {
        match self {
            Eligibility::CleanCorrect => EligibilityKind::CleanCorrectOnTarget,
            Eligibility::IntersectionClean { .. } => EligibilityKind::IntersectionClean,
            Eligibility::IntersectionAdversarial { .. } => EligibilityKind::IntersectionAdversarial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityRate {
    pub rate: f64,
    pub n_eligible: usize,
    pub n_fooled: usize,
    pub eligibility: EligibilityKind,
}

/// Fraction of eligible samples whose substitute-crafted perturbation makes
/// the target misclassify.
pub fn transferability_rate(
    sub: &Network,
    tgt: &Network,
    spec: &AttackSpec,
    loss: Loss,
    data: &Dataset,
    eligibility: Eligibility<'_>,
) -> Result<TransferabilityRate> {
    let domain = data.domain();
    let outcomes = data
        .samples()
        .par_iter()
        .map(|&(x, y)| -> Result<(bool, bool)> {
            if tgt.predict(x)? != y {
                return Ok((false, false));
            }
            let delta = attack(spec, sub, loss, x, y, domain)?.delta;
            let adv = delta.add(x);
            let eligible = match eligibility {
                Eligibility::CleanCorrect => true,
                Eligibility::IntersectionClean { other } => {
                    sub.predict(x)? == y && other.predict(x)? == y
                }
                Eligibility::IntersectionAdversarial { other } => {
                    let own = attack(spec, other, loss, x, y, domain)?.delta.add(x);
                    sub.predict(&adv)? == y && other.predict(&own)? == y
                }
            };
            Ok((eligible, eligible && tgt.predict(&adv)? != y))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_eligible = outcomes.iter().filter(|o| o.0).count();
    let n_fooled = outcomes.iter().filter(|o| o.1).count();
    if n_eligible == 0 {
        return Err(Error::EmptyDenominator);
    }
    Ok(TransferabilityRate {
        rate: n_fooled as f64 / n_eligible as f64,
        n_eligible,
        n_fooled,
        eligibility: eligibility.kind(),
    })
}

/// Fraction of samples whose argmax prediction equals the label; ties in the
/// logits go to the lowest class index.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("accuracy".into()));
    }
    let correct = data
        .samples()
        .par_iter()
        .map(|(x, y)| net.predict(x).map(|p| usize::from(p == *y)))
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy on the perturbed inputs `x + δ(x, y)`.
pub fn perturbed_accuracy(net: &Network, scheme: &dyn AttackScheme, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("accuracy".into()));
    }
    let deltas = perturbations(scheme, data)?;
    let correct = data
        .samples()
        .iter()
        .zip(&deltas)
        .map(|((x, y), d)| net.predict(&d.add(x)).map(|p| usize::from(p == *y)))
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len() as f64)
}

/// Mean loss of `net` on clean data.
pub fn mean_loss(net: &Network, loss: Loss, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("mean loss".into()));
    }
    let total = data
        .samples()
        .iter()
        .map(|(x, y)| net.loss(loss, x, *y))
        .sum::<Result<f64>>()?;
    Ok(total / data.len() as f64)
}
