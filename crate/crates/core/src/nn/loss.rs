use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Classification loss on raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½‖softmax(z) − onehot(y)‖²`.
    Brier,
    /// `−log softmax(z)_y`.
    CrossEntropy,
    /// Misclassification indicator; evaluation only.
    ZeroOne,
}

impl Loss {
    pub fn value(&self, logits: &[f64], label: usize) -> f64 {
        match self {
            Loss::Brier => {
                let s = softmax(logits);
                s.iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let r = p - if k == label { 1.0 } else { 0.0 };
                        r * r
                    })
                    .sum::<f64>()
                    * 0.5
            }
            Loss::CrossEntropy => log_sum_exp(logits) - logits[label],
            Loss::ZeroOne => {
                if argmax(logits) == label {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Gradient with respect to the logits.
    pub fn gradient(&self, logits: &[f64], label: usize) -> Result<Vector> {
        match self {
            Loss::Brier => {
                let s = softmax(logits);
                let r: Vec<f64> = s
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p - if k == label { 1.0 } else { 0.0 })
                    .collect();
                let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
                Ok(s.iter().zip(&r).map(|(p, rk)| p * (rk - sr)).collect::<Vec<_>>().into())
            }
            Loss::CrossEntropy => {
                let mut s = softmax(logits);
                s[label] -= 1.0;
                Ok(s.into())
            }
            Loss::ZeroOne => Err(Error::NotDifferentiable("zero_one")),
        }
    }

    /// Upper bound `c` on the loss value, `None` when unbounded.
    pub fn bound(&self) -> Option<f64> {
        match self {
            Loss::Brier | Loss::ZeroOne => Some(1.0),
            Loss::CrossEntropy => None,
        }
    }

    /// Recorded Lipschitz constant in the logits.
    ///
    /// Brier's sampled supremum is about 0.42; cross-entropy's gradient
    /// `softmax − onehot` has norm below √2.
    pub fn lipschitz(&self) -> Option<f64> {
        match self {
            Loss::Brier => Some(1.0),
            Loss::CrossEntropy => Some(std::f64::consts::SQRT_2),
            Loss::ZeroOne => None,
        }
    }

    /// Recorded smoothness (gradient Lipschitz) constant in the logits.
    ///
    /// Brier's sampled supremum is about 0.31; cross-entropy's Hessian
    /// `diag(s) − ssᵀ` has norm at most ½.
    pub fn smoothness(&self) -> Option<f64> {
        match self {
            Loss::Brier => Some(1.0),
            Loss::CrossEntropy => Some(0.5),
            Loss::ZeroOne => None,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Loss::ZeroOne)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Brier => "brier",
            Loss::CrossEntropy => "cross_entropy",
            Loss::ZeroOne => "zero_one",
        })
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brier" => Ok(Loss::Brier),
            "cross_entropy" | "ce" | "xent" => Ok(Loss::CrossEntropy),
            "zero_one" | "01" => Ok(Loss::ZeroOne),
            _ => Err(Error::InvalidArgument(format!("unknown loss `{s}`"))),
        }
    }
}
