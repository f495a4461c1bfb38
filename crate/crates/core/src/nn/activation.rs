use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise nonlinearity applied after a layer's weight matrix.
///
/// Every variant maps 0 to 0. Softplus is shifted and rescaled,
/// `φ(z) = (softplus(s·z) − ln 2) / s`, so that this holds and `φ'(0) = 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Softplus { scale: f64 },
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn softplus(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "softplus scale must be positive, got {scale}"
            )));
        }
        Ok(Activation::Softplus { scale })
    }

    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus { scale } => {
                (softplus(scale * z) - std::f64::consts::LN_2) / scale
            }
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// First derivative. For relu the subgradient at 0 is taken to be 0.
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus { scale } => sigmoid(scale * z),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn second_derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Softplus { scale } => {
                let s = sigmoid(scale * z);
                scale * s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    /// Bound on `|φ'|`.
    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    /// Bound on `|φ''|`; `None` when unbounded (relu).
    ///
    /// tanh's true bound is `4/(3√3) ≈ 0.77`; it is recorded as 1.
    pub fn smoothness(&self) -> Option<f64> {
        match *self {
            Activation::Softplus { scale } => Some(scale / 4.0),
            Activation::Tanh => Some(1.0),
            Activation::Relu => None,
            Activation::Identity => Some(0.0),
        }
    }

    /// The single constant `γ ≥ max(|φ'|, |φ''|)` used by the smoothness
    /// bounds, or `None` when the activation is not twice differentiable.
    pub fn gamma(&self) -> Option<f64> {
        self.smoothness().map(|s| s.max(self.lipschitz()))
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Softplus { scale } => write!(f, "softplus({scale})"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Relu => f.write_str("relu"),
            Activation::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    /// Accepts `tanh`, `relu`, `identity`, `softplus` (scale 1) and
    /// `softplus(<scale>)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            "softplus" => Activation::softplus(1.0),
            _ => {
                let scale = s
                    .strip_prefix("softplus(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown activation `{s}`")))?;
                Activation::softplus(scale)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const ALL: [Activation; 5] = [
        Activation::Softplus { scale: 1.0 },
        Activation::Softplus { scale: 3.0 },
        Activation::Tanh,
        Activation::Relu,
        Activation::Identity,
    ];

    #[test]
    fn every_activation_fixes_zero() {
        for a in ALL {
            assert!(a.apply(0.0).abs() < 1e-15, "{a} moves zero");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for a in ALL.iter().filter(|a| **a != Activation::Relu) {
            for &z in &[-2.3, -0.4, 0.0, 0.7, 3.1] {
                let fd = (a.apply(z + h) - a.apply(z - h)) / (2.0 * h);
                assert_relative_eq!(a.derivative(z), fd, epsilon = 1e-8, max_relative = 1e-6);
                let fd2 = (a.derivative(z + h) - a.derivative(z - h)) / (2.0 * h);
                assert_relative_eq!(a.second_derivative(z), fd2, epsilon = 1e-8, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn recorded_constants_bound_sampled_derivatives() {
        for a in ALL {
            for i in -400..=400 {
                let z = i as f64 * 0.025;
                assert!(a.derivative(z).abs() <= a.lipschitz() + 1e-12);
                if let Some(s) = a.smoothness() {
                    assert!(a.second_derivative(z).abs() <= s + 1e-12, "{a} at {z}");
                }
            }
        }
        assert_eq!(Activation::Relu.smoothness(), None);
        assert_eq!(Activation::Softplus { scale: 8.0 }.gamma(), Some(2.0));
    }

    #[test]
    fn relu_subgradient_at_zero() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn parses_names() {
        assert_eq!("tanh".parse::<Activation>().unwrap(), Activation::Tanh);
        assert_eq!(
            "softplus(2.5)".parse::<Activation>().unwrap(),
            Activation::Softplus { scale: 2.5 }
        );
        assert!("softplus(-1)".parse::<Activation>().is_err());
        assert!("gelu".parse::<Activation>().is_err());
        for a in ALL {
            assert_eq!(a.to_string().parse::<Activation>().unwrap(), a);
        }
    }
}
