//! Spectral capping of weight matrices and the early-stopping controller.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm_from, Matrix, Vector};
use crate::nn::Network;

/// Power-iteration tolerance used when capping.
///
/// Tight enough that the relative error of the estimate stays well inside the
/// `1e-5` slack promised for capped layers, even for slowly converging spectra.
pub const CAP_TOL: f64 = 1e-10;
pub const CAP_MAX_ITERS: usize = 5_000;

/// Upper limit `β` on each layer's spectral norm; `None` disables capping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectralCap {
    pub beta: Option<f64>,
}

impl SpectralCap {
    pub fn none() -> Self {
        SpectralCap { beta: None }
    }

    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || beta.is_nan() {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(SpectralCap {
            beta: beta.is_finite().then_some(beta),
        })
    }

    pub fn is_active(&self) -> bool {
        self.beta.is_some()
    }
}

impl fmt::Display for SpectralCap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.beta {
            Some(b) => write!(f, "{b}"),
            None => f.write_str("inf"),
        }
    }
}

impl FromStr for SpectralCap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "none" | "" => Ok(SpectralCap::none()),
            v => SpectralCap::new(
                v.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad beta `{v}`")))?,
            ),
        }
    }
}

fn cap_with(w: &Matrix, beta: f64, start: Option<&[f64]>, tol: f64) -> Result<(Matrix, Vector)> {
    let est = spectral_norm_from(w, start, tol, CAP_MAX_ITERS)?;
    let out = if est.value > beta {
        w.scale(beta / est.value)
    } else {
        w.clone()
    };
    Ok((out, est.right))
}

/// `W / max(1, ‖W‖₂/β)`.
pub fn normalize_layer(w: &Matrix, cap: SpectralCap, tol: f64) -> Result<Matrix> {
    match cap.beta {
        None => Ok(w.clone()),
        Some(beta) => cap_with(w, beta, None, tol).map(|(m, _)| m),
    }
}

/// Caps every layer independently.
pub fn normalize_network(net: &Network, cap: SpectralCap) -> Result<Network> {
    let mut out = net.clone();
    LayerCapper::new(cap, net.depth()).apply(&mut out)?;
    Ok(out)
}

/// Caps a network repeatedly during training, warm-starting each layer's
/// power iteration from the singular vector found at the previous call.
#[derive(Debug, Clone)]
pub struct LayerCapper {
    cap: SpectralCap,
    tol: f64,
    warm: Vec<Option<Vector>>,
}

impl LayerCapper {
    pub fn new(cap: SpectralCap, depth: usize) -> Self {
        LayerCapper {
            cap,
            tol: CAP_TOL,
            warm: vec![None; depth],
        }
    }

    pub fn apply(&mut self, net: &mut Network) -> Result<()> {
        let Some(beta) = self.cap.beta else {
            return Ok(());
        };
        for (layer, warm) in net.layers_mut().iter_mut().zip(self.warm.iter_mut()) {
            let (w, right) = cap_with(&layer.weights, beta, warm.as_deref(), self.tol)?;
            layer.weights = w;
            *warm = Some(right);
        }
        Ok(())
    }
}

/// Best-snapshot early stopping on a higher-is-better validation metric.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best_metric: f64,
    pub best_epoch: Option<usize>,
    pub snapshot: Option<Network>,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    epochs_seen: usize,
}

pub const DEFAULT_PATIENCE: usize = 10;

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_metric: f64::NEG_INFINITY,
            best_epoch: None,
            snapshot: None,
            epochs_since_improvement: 0,
            patience,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's model and metric; returns whether to stop.
    /// The snapshot changes only on strict improvement.
    pub fn step(&mut self, model: &Network, metric: f64) -> Result<bool> {
        if !metric.is_finite() {
            return Err(Error::NonFinite(format!("validation metric {metric}")));
        }
        self.epochs_seen += 1;
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = Some(self.epochs_seen);
            self.snapshot = Some(model.clone());
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        Ok(self.epochs_since_improvement >= self.patience)
    }
}

/// Functional form of [`EarlyStopState::step`].
pub fn early_stop_step(
    mut state: EarlyStopState,
    epoch_model: &Network,
    validation_metric: f64,
) -> Result<(EarlyStopState, bool)> {
    let stop = state.step(epoch_model, validation_metric)?;
    Ok((state, stop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd_bruteforce;
    use crate::nn::{Activation, Architecture};

    #[test]
    fn below_cap_is_untouched() {
        let w = Matrix::from_diag(&[0.8, 0.3]);
        let out = normalize_layer(&w, SpectralCap::new(1.0).unwrap(), 1e-10).unwrap();
        assert_eq!(out, w);
        let big = Matrix::from_diag(&[7.0, 3.0]);
        assert_eq!(normalize_layer(&big, SpectralCap::none(), 1e-10).unwrap(), big);
    }

    #[test]
    fn above_cap_is_rescaled() {
        let out =
            normalize_layer(&Matrix::from_diag(&[2.0, 1.0]), SpectralCap::new(1.0).unwrap(), 1e-12)
                .unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((out.get(1, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_linear_layer_output_scales() {
        let w = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let net = Network::from_weights(vec![w], Activation::Identity).unwrap();
        let capped = normalize_network(&net, SpectralCap::new(1.0).unwrap()).unwrap();
        let x = [0.7, -1.3];
        let a = net.forward(&x).unwrap();
        let b = capped.forward(&x).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u / 3.0 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn capped_layers_pass_the_exact_check() {
        let net = "5-8-8-3:tanh".parse::<Architecture>().unwrap().init(7);
        let scaled = Network::from_weights(
            net.weights().map(|w| w.scale(4.0)).collect(),
            Activation::Tanh,
        )
        .unwrap();
        let capped = normalize_network(&scaled, SpectralCap::new(1.0).unwrap()).unwrap();
        for w in capped.weights() {
            assert!(svd_bruteforce(w).unwrap() <= 1.0 + 1e-6);
        }
        let again = normalize_network(&capped, SpectralCap::new(1.0).unwrap()).unwrap();
        for (a, b) in again.weights().zip(capped.weights()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn cap_parsing() {
        assert_eq!("inf".parse::<SpectralCap>().unwrap(), SpectralCap::none());
        assert_eq!("1.5".parse::<SpectralCap>().unwrap().beta, Some(1.5));
        assert!("-2".parse::<SpectralCap>().is_err());
        assert!("0".parse::<SpectralCap>().is_err());
    }

    fn tagged(i: usize) -> Network {
        Network::from_weights(vec![Matrix::from_diag(&[i as f64 + 1.0])], Activation::Identity)
            .unwrap()
    }

    fn run(metrics: &[f64], patience: usize) -> (EarlyStopState, Option<usize>) {
        let mut s = EarlyStopState::new(patience);
        for (i, m) in metrics.iter().enumerate() {
            if s.step(&tagged(i), *m).unwrap() {
                return (s, Some(i + 1));
            }
        }
        (s, None)
    }

    #[test]
    fn improving_sequence_tracks_latest() {
        let (s, stopped) = run(&[0.5, 0.6, 0.7], 2);
        assert_eq!(stopped, None);
        assert_eq!(s.snapshot.unwrap(), tagged(2));
    }

    #[test]
    fn flat_sequence_keeps_first_and_stops() {
        let (s, stopped) = run(&[0.5, 0.5, 0.5], 2);
        assert_eq!(stopped, Some(3));
        assert_eq!(s.snapshot.unwrap(), tagged(0));
    }

    #[test]
    fn best_so_far_is_retained() {
        let (s, stopped) = run(&[0.5, 0.7, 0.6, 0.65], 10);
        assert_eq!(stopped, None);
        assert_eq!(s.best_epoch, Some(2));
        assert_eq!(s.snapshot.unwrap(), tagged(1));
        assert!(EarlyStopState::new(3).step(&tagged(0), f64::NAN).is_err());
    }
}
