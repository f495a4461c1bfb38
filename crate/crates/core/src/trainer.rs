//! Mini-batch training by empirical risk minimization or adversarial
//! training, with optional spectral capping and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackMethod, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::accuracy;
use crate::nn::{argmax, Architecture, Loss, Network};
use crate::specreg::{EarlyStopState, LayerCapper, SpectralCap};

pub use crate::data::{split_half, split_validation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps_hat: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => lr,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss: Loss,
    /// Present for adversarial training.
    pub adversarial: Option<AttackSpec>,
    pub spectral_cap: SpectralCap,
    pub early_stop: Option<EarlyStopConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            optimizer: Optimizer::default(),
            loss: Loss::CrossEntropy,
            adversarial: None,
            spectral_cap: SpectralCap::none(),
            early_stop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if !self.loss.is_differentiable() {
            return Err(Error::InvalidArgument(format!("cannot train on `{}`", self.loss)));
        }
        if let Some(spec) = &self.adversarial {
            spec.validate()?;
            if spec.method == AttackMethod::LambdaOpt {
                return Err(Error::InvalidArgument(
                    "adversarial training needs a norm-bounded attack".into(),
                ));
            }
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 || !(es.val_fraction > 0.0 && es.val_fraction < 1.0) {
                return Err(Error::InvalidArgument(
                    "early stopping needs patience >= 1 and a fraction in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses, at the (perturbed) inputs
    /// seen by each step.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    /// Epoch whose snapshot was returned under early stopping.
    pub best_epoch: Option<usize>,
    pub optimizer_steps: usize,
    pub attack_calls: usize,
    /// PGD step size α used by the training attack.
    pub attack_step_size: Option<f64>,
    /// When the spectral cap is enforced.
    pub cap_schedule: String,
}

/// Derives an independent seed for stream `k` of a run.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

enum State {
    Adam { m: Vec<Matrix>, v: Vec<Matrix>, t: i32 },
    Sgd { velocity: Vec<Matrix> },
}

impl State {
    fn new(opt: &Optimizer, net: &Network) -> Self {
        let zeros = || net.weights().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        match opt {
            Optimizer::Adam { .. } => State::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
            Optimizer::Sgd { .. } => State::Sgd { velocity: zeros() },
        }
    }

    fn step(&mut self, opt: &Optimizer, net: &mut Network, grads: &[Matrix]) {
        match (self, *opt) {
            (
                State::Adam { m, v, t },
                Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps_hat,
                },
            ) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((layer, g), m), v) in net.layers_mut().iter_mut().zip(grads).zip(m).zip(v) {
                    let w = layer.weights.data_mut();
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps_hat);
                    }
                }
            }
            (State::Sgd { velocity }, Optimizer::Sgd { lr, momentum }) => {
                for ((layer, g), vel) in net.layers_mut().iter_mut().zip(grads).zip(velocity) {
                    let w = layer.weights.data_mut();
                    let vel = vel.data_mut();
                    for i in 0..w.len() {
                        vel[i] = momentum * vel[i] + g.data()[i];
                        w[i] -= lr * vel[i];
                    }
                }
            }
            _ => unreachable!("optimizer state matches its configuration"),
        }
    }
}

/// Trains `arch` on `data`. Adversarial training is used when
/// `cfg.adversarial` is set; early stopping monitors `validation`.
/// `progress` is called once per completed epoch.
pub fn fit(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training data".into()));
    }
    if data.dim() != arch.input_dim() || data.classes() > arch.output_dim() {
        return Err(Error::Dimension(format!(
            "architecture {arch} does not fit {}-dimensional data with {} classes",
            data.dim(),
            data.classes()
        )));
    }
    if cfg.early_stop.is_some() && validation.is_none_or(|v| v.is_empty()) {
        return Err(Error::InvalidArgument("early stopping needs a validation set".into()));
    }

    let mut net = arch.init(derive_seed(cfg.seed, 0));
    let mut capper = LayerCapper::new(cfg.spectral_cap, net.depth());
    capper.apply(&mut net)?;
    let mut state = State::new(&cfg.optimizer, &net);
    let mut stopper = cfg.early_stop.map(|e| EarlyStopState::new(e.patience));

    let samples = data.samples();
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: None,
        optimizer_steps: 0,
        attack_calls: 0,
        attack_step_size: cfg
            .adversarial
            .as_ref()
            .filter(|s| s.method.is_iterative())
            .map(|s| s.resolved_step_size()),
        cap_schedule: if cfg.spectral_cap.is_active() {
            "after_every_step".into()
        } else {
            "none".into()
        },
    };

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let clean: Vec<(&[f64], usize)> = chunk.iter().map(|&i| samples[i]).collect();
            let inputs: Vec<(Vec<f64>, usize)> = match &cfg.adversarial {
                Some(spec) => {
                    let deltas = attack_batch(spec, &net, cfg.loss, &clean, data.domain())?;
                    report.attack_calls += clean.len();
                    clean
                        .iter()
                        .zip(deltas)
                        .map(|((x, y), d)| (d.add(x).into_inner(), *y))
                        .collect()
                }
                None => clean.iter().map(|(x, y)| (x.to_vec(), *y)).collect(),
            };
            let batch: Vec<(&[f64], usize)> =
                inputs.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
            for (x, y) in &batch {
                if argmax(&net.forward(x)?) == *y {
                    correct += 1;
                }
            }
            let (grads, mean) = net.weight_gradients(cfg.loss, &batch)?;
            if !mean.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    loss: mean,
                });
            }
            state.step(&cfg.optimizer, &mut net, &grads);
            if net.weights().any(|w| w.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    loss: mean,
                });
            }
            capper.apply(&mut net)?;
            report.optimizer_steps += 1;
            loss_sum += mean * batch.len() as f64;
        }
        let validation_accuracy = match validation {
            Some(v) if stopper.is_some() => Some(accuracy(&net, v)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            validation_accuracy,
        };
        progress(&record);
        report.epochs.push(record);
        report.stopped_epoch = epoch;
        if let (Some(s), Some(acc)) = (stopper.as_mut(), validation_accuracy) {
            if s.step(&net, acc)? {
                break;
            }
        }
    }
    if let Some(s) = stopper {
        report.best_epoch = s.best_epoch;
        if let Some(best) = s.snapshot {
            net = best;
        }
    }
    Ok((net, report))
}

fn own_validation(data: &Dataset, cfg: &TrainConfig) -> Result<Option<(Dataset, Dataset)>> {
    cfg.early_stop
        .map(|es| split_validation(data, es.val_fraction, derive_seed(cfg.seed, u64::MAX)))
        .transpose()
}

/// Trains by ERM or, when `cfg.adversarial` is set, adversarially. With early
/// stopping configured, a stratified validation part is held out of `data`.
pub fn train(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<(Network, TrainReport)> {
    match own_validation(data, cfg)? {
        Some((val, rest)) => fit(&rest, arch, cfg, Some(&val), progress),
        None => fit(data, arch, cfg, None, progress),
    }
}

/// Empirical risk minimization.
pub fn train_erm(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if cfg.adversarial.is_some() {
        return Err(Error::InvalidArgument(
            "train_erm called with an adversarial configuration".into(),
        ));
    }
    train(data, arch, cfg, |_| {})
}

/// Adversarial training: each step's loss is taken at `x + δ(x, y)` with `δ`
/// crafted against the current model.
pub fn train_adversarial(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if cfg.adversarial.is_none() {
        return Err(Error::InvalidArgument(
            "train_adversarial needs an attack configuration".into(),
        ));
    }
    train(data, arch, cfg, |_| {})
}
