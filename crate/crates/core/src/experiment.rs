//! The substitute/target transferability pipeline.
//!
//! 1. Split the data into train and test parts, then the train part into a
//!    substitute half and a target half.
//! 2. Train the substitute adversarially, optionally capped and early-stopped
//!    (the validation set is drawn from the test part).
//! 3. Train every target by ERM on the other half.
//! 4. Craft attacks on the substitute and measure accuracy gaps,
//!    transferability rates and the substitute's capacity report.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attacks::{AttackSpec, BoxDomain};
use crate::capacity::{generalization_bound, minimal_lambda, BoundParams, CapacityReport};
use crate::data::{
    data_norm_bound, gen_gaussian_mixture, load_csv, split_half, split_train_test,
    split_validation, write_csv, Dataset,
};
use crate::error::{Error, Result};
use crate::io::{save_model, write_kv};
use crate::metrics::{
    accuracy, generalization_error, perturbed_accuracy, transferability_rate, Candidate,
    Eligibility, LineageCheck, SubstituteAttack, TransferScore, TransferabilityRate,
};
use crate::nn::{Architecture, Loss, Network};
use crate::specreg::SpectralCap;
use crate::trainer::{
    derive_seed, fit, train, EarlyStopConfig, EpochRecord, Optimizer, TrainConfig, TrainReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Mixture {
        classes: usize,
        dim: usize,
        separation: f64,
        n: usize,
    },
    Csv {
        path: PathBuf,
        classes: Option<usize>,
        header: bool,
        domain: Option<(f64, f64)>,
    },
}

pub const DEFAULT_MIXTURE_SIZE: usize = 4000;

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Mixture {
                classes,
                dim,
                separation,
                n,
            } => gen_gaussian_mixture(*classes, *dim, *separation, *n, seed),
            DataSource::Csv {
                path,
                classes,
                header,
                domain,
            } => {
                let probe = load_csv(path, *classes, None, *header)?;
                let dom = domain.map(|(lo, hi)| BoxDomain::uniform(probe.dim(), lo, hi));
                probe.with_domain(dom)
            }
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Mixture {
                classes,
                dim,
                separation,
                n,
            } => write!(f, "gm:{classes}x{dim}:sep{separation}:n{n}"),
            DataSource::Csv { path, .. } => write!(f, "{}", path.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    /// `gm:<classes>x<dim>:sep<s>[:n<N>]`, or a CSV path.
    fn from_str(s: &str) -> Result<Self> {
        let Some(spec) = s.strip_prefix("gm:") else {
            return Ok(DataSource::Csv {
                path: PathBuf::from(s),
                classes: None,
                header: false,
                domain: None,
            });
        };
        let bad = || Error::InvalidArgument(format!("bad mixture spec `{s}`"));
        let mut parts = spec.split(':');
        let (classes, dim) = parts.next().and_then(|p| p.split_once('x')).ok_or_else(bad)?;
        let classes = classes.parse().map_err(|_| bad())?;
        let dim = dim.parse().map_err(|_| bad())?;
        let mut separation = None;
        let mut n = DEFAULT_MIXTURE_SIZE;
        for p in parts {
            if let Some(v) = p.strip_prefix("sep") {
                separation = Some(v.parse().map_err(|_| bad())?);
            } else if let Some(v) = p.strip_prefix('n') {
                n = v.parse().map_err(|_| bad())?;
            } else {
                return Err(bad());
            }
        }
        Ok(DataSource::Mixture {
            classes,
            dim,
            separation: separation.ok_or_else(bad)?,
            n,
        })
    }
}

/// Attack budget, either absolute or relative to the mean sample norm of the
/// substitute's training half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Budget {
    Relative { gamma: f64 },
    Absolute { epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub seed: u64,
    pub test_fraction: f64,
    pub substitute: Architecture,
    pub targets: Vec<Architecture>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Training and evaluation loss.
    pub loss: Loss,
    /// Attack used both for adversarial training and for crafting the
    /// transferred examples; its budget comes from `budget`.
    pub attack: AttackSpec,
    pub budget: Budget,
    pub spectral_cap: SpectralCap,
    /// Patience; early stopping is off when absent.
    pub early_stop: Option<usize>,
    pub val_fraction: f64,
    /// Also train an uncapped, non-early-stopped substitute for the
    /// intersection rates.
    pub baseline: bool,
    /// Bounded loss used for the capacity report.
    pub capacity_loss: Loss,
    pub tau: f64,
    pub omega: f64,
    /// Defaults to the smallest λ meeting the contraction condition.
    pub lambda: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Mixture {
                classes: 3,
                dim: 2,
                separation: 2.0,
                n: DEFAULT_MIXTURE_SIZE,
            },
            seed: 0,
            test_fraction: 0.5,
            substitute: "2-32-32-3:tanh".parse().expect("valid"),
            targets: vec![
                "2-16-16-3:tanh".parse().expect("valid"),
                "2-64-64-3:tanh".parse().expect("valid"),
            ],
            epochs: 100,
            batch_size: 128,
            optimizer: Optimizer::default(),
            loss: Loss::CrossEntropy,
            attack: AttackSpec::pgd_l2(0.0, 15),
            budget: Budget::Relative { gamma: 0.05 },
            spectral_cap: SpectralCap::none(),
            early_stop: None,
            val_fraction: 0.3,
            baseline: false,
            capacity_loss: Loss::Brier,
            tau: 0.5,
            omega: 0.05,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub substitute: usize,
    pub target: usize,
    pub evaluation: usize,
    pub validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteSummary {
    pub architecture: Architecture,
    pub spectral_cap: SpectralCap,
    pub early_stop: Option<usize>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Train accuracy minus test accuracy.
    pub accuracy_gap: f64,
    pub adversarial_train_accuracy: f64,
    pub adversarial_test_accuracy: f64,
    /// Adversarial train accuracy minus adversarial test accuracy, the
    /// generalization gap reported next to transferability rates.
    pub adversarial_accuracy_gap: f64,
    pub stopped_epoch: usize,
    pub best_epoch: Option<usize>,
    pub transfer: TransferScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub id: String,
    pub architecture: Architecture,
    pub test_accuracy: f64,
    /// `None` when no evaluation sample is eligible.
    pub transfer_rate: Option<TransferabilityRate>,
    pub baseline_transfer_rate: Option<TransferabilityRate>,
    pub intersection_clean: Option<TransferabilityRate>,
    pub intersection_adversarial: Option<TransferabilityRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub epsilon: f64,
    pub gamma: Option<f64>,
    pub mean_norm: f64,
    pub attack_step_size: Option<f64>,
    pub splits: SplitSizes,
    pub substitute: SubstituteSummary,
    pub baseline: Option<SubstituteSummary>,
    pub targets: Vec<TargetSummary>,
    pub capacity: Option<CapacityReport>,
    pub capacity_error: Option<String>,
    pub argmax_tie_break: String,
    pub cap_schedule: String,
}

/// Trained models and the datasets they were evaluated on.
pub struct ExperimentOutputs {
    pub report: ExperimentReport,
    pub substitute: Network,
    pub baseline: Option<Network>,
    pub targets: Vec<Network>,
    pub train_reports: Vec<(String, TrainReport)>,
    pub datasets: Vec<(String, Dataset)>,
}

/// Which phase a progress line belongs to.
#[derive(Debug, Clone, Copy)]
pub struct Progress<'a> {
    pub model: &'a str,
    pub epoch: &'a EpochRecord,
}

fn summarize(
    net: &Network,
    arch: &Architecture,
    cfg: &ExperimentConfig,
    spec: &AttackSpec,
    train: &Dataset,
    eval: &Dataset,
    pool: &[Candidate<'_>],
    report: &TrainReport,
    regularized: bool,
) -> Result<SubstituteSummary> {
    let scheme = SubstituteAttack {
        substitute: net,
        spec,
        loss: cfg.loss,
        domain: train.domain(),
    };
    let train_accuracy = accuracy(net, train)?;
    let test_accuracy = accuracy(net, eval)?;
    let adversarial_train_accuracy = perturbed_accuracy(net, &scheme, train)?;
    let adversarial_test_accuracy = perturbed_accuracy(net, &scheme, eval)?;
    Ok(SubstituteSummary {
        architecture: arch.clone(),
        spectral_cap: if regularized { cfg.spectral_cap } else { SpectralCap::none() },
        early_stop: if regularized { cfg.early_stop } else { None },
        train_accuracy,
        test_accuracy,
        accuracy_gap: train_accuracy - test_accuracy,
        adversarial_train_accuracy,
        adversarial_test_accuracy,
        adversarial_accuracy_gap: adversarial_train_accuracy - adversarial_test_accuracy,
        stopped_epoch: report.stopped_epoch,
        best_epoch: report.best_epoch,
        transfer: generalization_error(&scheme, pool, cfg.loss, train, eval, LineageCheck::Enforce)?,
    })
}

fn rate_or_none(r: Result<TransferabilityRate>) -> Result<Option<TransferabilityRate>> {
    match r {
        Ok(r) => Ok(Some(r)),
        Err(Error::EmptyDenominator) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs the pipeline. `progress` receives one call per training epoch.
pub fn run(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<ExperimentOutputs> {
    if cfg.targets.is_empty() {
        return Err(Error::InvalidArgument("at least one target architecture is needed".into()));
    }
    let data = cfg.data.load(cfg.seed).map_err(|e| e.in_stage("data"))?;
    let split = |e: Error| e.in_stage("split");
    let (train, test) =
        split_train_test(&data, cfg.test_fraction, derive_seed(cfg.seed, 1)).map_err(split)?;
    let (sub_half, tgt_half) = split_half(&train, derive_seed(cfg.seed, 2)).map_err(split)?;
    let (validation, eval) = match cfg.early_stop {
        Some(_) => {
            let (v, e) = split_validation(&test, cfg.val_fraction, derive_seed(cfg.seed, 3))
                .map_err(split)?;
            (Some(v), e)
        }
        None => (None, test),
    };

    let mean_norm = sub_half.mean_norm();
    let (epsilon, gamma) = match cfg.budget {
        Budget::Relative { gamma } => (gamma * mean_norm, Some(gamma)),
        Budget::Absolute { epsilon } => (epsilon, None),
    };
    let spec = cfg.attack.clone().with_epsilon(epsilon);
    let train_attack = if spec.method.norm().is_some() {
        spec.clone()
    } else {
        AttackSpec::pgd_l2(epsilon, 15)
    };

    let base = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        loss: cfg.loss,
        adversarial: Some(train_attack),
        spectral_cap: cfg.spectral_cap,
        early_stop: cfg.early_stop.map(|patience| EarlyStopConfig {
            patience,
            val_fraction: cfg.val_fraction,
        }),
        seed: derive_seed(cfg.seed, 10),
    };
    let train_stage = |e: Error| e.in_stage("train");
    let (substitute, sub_report) = fit(&sub_half, &cfg.substitute, &base, validation.as_ref(), |e| {
        progress(Progress {
            model: "substitute",
            epoch: e,
        })
    })
    .map_err(train_stage)?;

    let regularized = cfg.spectral_cap.is_active() || cfg.early_stop.is_some();
    let baseline = if cfg.baseline && regularized {
        let plain = TrainConfig {
            spectral_cap: SpectralCap::none(),
            early_stop: None,
            ..base.clone()
        };
        Some(
            fit(&sub_half, &cfg.substitute, &plain, None, |e| {
                progress(Progress {
                    model: "baseline",
                    epoch: e,
                })
            })
            .map_err(train_stage)?,
        )
    } else {
        None
    };

    let mut targets = Vec::new();
    let mut train_reports = vec![("substitute".to_string(), sub_report.clone())];
    if let Some((_, r)) = &baseline {
        train_reports.push(("baseline".into(), r.clone()));
    }
    for (i, arch) in cfg.targets.iter().enumerate() {
        let tc = TrainConfig {
            adversarial: None,
            spectral_cap: SpectralCap::none(),
            early_stop: None,
            seed: derive_seed(cfg.seed, 100 + i as u64),
            ..base.clone()
        };
        let id = format!("target{i}");
        let (net, r) = fit(&tgt_half, arch, &tc, None, |e| {
            progress(Progress {
                model: &id,
                epoch: e,
            })
        })
        .map_err(train_stage)?;
        train_reports.push((id, r));
        targets.push(net);
    }

    let ids: Vec<String> = (0..targets.len()).map(|i| format!("target{i}")).collect();
    let pool: Vec<Candidate<'_>> = ids
        .iter()
        .zip(&targets)
        .map(|(id, network)| Candidate { id, network })
        .collect();
    let evaluate = |e: Error| e.in_stage("evaluate");
    let summary = summarize(
        &substitute,
        &cfg.substitute,
        cfg,
        &spec,
        &sub_half,
        &eval,
        &pool,
        &sub_report,
        true,
    )
    .map_err(evaluate)?;
    let baseline_summary = baseline
        .as_ref()
        .map(|(net, r)| {
            summarize(net, &cfg.substitute, cfg, &spec, &sub_half, &eval, &pool, r, false)
        })
        .transpose()
        .map_err(evaluate)?;

    let mut target_summaries = Vec::new();
    for ((id, net), arch) in ids.iter().zip(&targets).zip(&cfg.targets) {
        let rate = |sub: &Network, el: Eligibility<'_>| {
            rate_or_none(transferability_rate(sub, net, &spec, cfg.loss, &eval, el))
        };
        let base_net = baseline.as_ref().map(|(n, _)| n);
        target_summaries.push(TargetSummary {
            id: id.clone(),
            architecture: arch.clone(),
            test_accuracy: accuracy(net, &eval).map_err(evaluate)?,
            transfer_rate: rate(&substitute, Eligibility::CleanCorrect).map_err(evaluate)?,
            baseline_transfer_rate: base_net
                .map(|b| rate(b, Eligibility::CleanCorrect))
                .transpose()
                .map_err(evaluate)?
                .flatten(),
            intersection_clean: base_net
                .map(|b| rate(&substitute, Eligibility::IntersectionClean { other: b }))
                .transpose()
                .map_err(evaluate)?
                .flatten(),
            intersection_adversarial: base_net
                .map(|b| rate(&substitute, Eligibility::IntersectionAdversarial { other: b }))
                .transpose()
                .map_err(evaluate)?
                .flatten(),
        });
    }

    let (capacity, capacity_error) = match capacity_report(cfg, &substitute, &targets[0], &sub_half)
    {
        Ok(r) => (Some(r), None),
        Err(e @ (Error::Assumption(_) | Error::InvalidArgument(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e.in_stage("capacity")),
    };

    let report = ExperimentReport {
        seed: cfg.seed,
        epsilon,
        gamma,
        mean_norm,
        attack_step_size: spec.method.is_iterative().then(|| spec.resolved_step_size()),
        splits: SplitSizes {
            substitute: sub_half.len(),
            target: tgt_half.len(),
            evaluation: eval.len(),
            validation: validation.as_ref().map_or(0, Dataset::len),
        },
        substitute: summary,
        baseline: baseline_summary,
        targets: target_summaries,
        capacity,
        capacity_error,
        argmax_tie_break: "lowest_index".into(),
        cap_schedule: sub_report.cap_schedule.clone(),
    };
    let mut datasets = vec![
        ("substitute_train".to_string(), sub_half),
        ("target_train".to_string(), tgt_half),
        ("evaluation".to_string(), eval),
    ];
    if let Some(v) = validation {
        datasets.push(("validation".into(), v));
    }
    Ok(ExperimentOutputs {
        report,
        substitute,
        baseline: baseline.map(|(n, _)| n),
        targets,
        train_reports,
        datasets,
    })
}

fn capacity_report(
    cfg: &ExperimentConfig,
    sub: &Network,
    tgt: &Network,
    train: &Dataset,
) -> Result<CapacityReport> {
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => minimal_lambda(sub, cfg.tau)?,
    };
    generalization_bound(
        sub,
        tgt,
        cfg.capacity_loss,
        BoundParams {
            data_norm_bound: data_norm_bound(train)?.spectral,
            lambda,
            tau: cfg.tau,
            omega: cfg.omega,
            n: train.len(),
        },
    )
}

/// Writes the resolved config, report, models, training reports and splits
/// into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, out: &ExperimentOutputs, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_kv(&dir.join("config.kv"), cfg)?;
    write_kv(&dir.join("report.kv"), &out.report)?;
    let echo = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    save_model(&dir.join("substitute.atl"), &out.substitute, &json!({"role": "substitute", "experiment": echo}))?;
    if let Some(b) = &out.baseline {
        save_model(&dir.join("baseline.atl"), b, &json!({"role": "baseline", "experiment": echo}))?;
    }
    for (i, t) in out.targets.iter().enumerate() {
        save_model(
            &dir.join(format!("target{i}.atl")),
            t,
            &json!({"role": format!("target{i}"), "experiment": echo}),
        )?;
    }
    for (name, r) in &out.train_reports {
        write_kv(&dir.join(format!("train_{name}.kv")), r)?;
    }
    for (name, d) in &out.datasets {
        write_csv(d, &dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

/// A single training run: one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub data: DataSource,
    pub seed: u64,
    pub architecture: Architecture,
    /// `train.seed` is ignored; the job seed is used.
    pub train: TrainConfig,
    /// Budget of `train.adversarial`, whose own epsilon is ignored.
    pub budget: Budget,
}

pub struct TrainOutputs {
    pub network: Network,
    pub report: TrainReport,
    /// Resolved attack budget for adversarial training.
    pub epsilon: Option<f64>,
}

impl TrainJob {
    pub fn run(&self, progress: impl FnMut(&EpochRecord)) -> Result<TrainOutputs> {
        let data = self.data.load(self.seed).map_err(|e| e.in_stage("data"))?;
        let mut cfg = self.train.clone();
        cfg.seed = self.seed;
        let epsilon = cfg.adversarial.as_mut().map(|spec| {
            let eps = match self.budget {
                Budget::Relative { gamma } => gamma * data.mean_norm(),
                Budget::Absolute { epsilon } => epsilon,
            };
            *spec = spec.clone().with_epsilon(eps);
            eps
        });
        let (network, report) =
            train(&data, &self.architecture, &cfg, progress).map_err(|e| e.in_stage("train"))?;
        Ok(TrainOutputs {
            network,
            report,
            epsilon,
        })
    }

    /// Writes `config.kv`, `model.atl` and `train_report.kv` into `dir`.
    pub fn write_outputs(&self, out: &TrainOutputs, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_kv(&dir.join("config.kv"), self)?;
        let echo = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        save_model(
            &dir.join("model.atl"),
            &out.network,
            &json!({"role": "trained", "job": echo, "epsilon": out.epsilon}),
        )?;
        write_kv(&dir.join("train_report.kv"), &out.report)
    }
}
