use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transferbound::capacity::{generalization_bound, minimal_lambda, BoundParams};
use transferbound::data::data_norm_bound;
use transferbound::experiment::{self, Budget, DataSource, ExperimentConfig, Progress, TrainJob};
use transferbound::io::{load_model, read_kv, to_kv, write_kv};
use transferbound::trainer::{EarlyStopConfig, EpochRecord};
use transferbound::{
    AttackMethod, AttackSpec, Architecture, Error, ErrorKind, ExperimentReport, Loss, Optimizer,
    SpectralCap, StepSize, TrainConfig,
};

#[derive(Parser)]
#[command(name = "transferbound", version, about = "Transferable adversarial examples and their capacity bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model by ERM, or adversarially with --attack.
    Train(TrainArgs),
    /// Run the substitute/target pipeline.
    Experiment(ExperimentArgs),
    /// Print the capacity report of a substitute/target pair.
    Bound(BoundArgs),
    /// Tabulate generalization gaps and transferability rates of experiment runs.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// `gm:<classes>x<dim>:sep<s>[:n<N>]` or a CSV file of features then label.
    #[arg(long)]
    data: Option<String>,
    /// Class count of a CSV dataset (default: largest label + 1).
    #[arg(long)]
    classes: Option<usize>,
    /// The CSV file starts with a header row.
    #[arg(long)]
    header: bool,
    /// Box domain `lo,hi` shared by every CSV feature.
    #[arg(long, value_parser = parse_domain)]
    domain: Option<(f64, f64)>,
}

#[derive(Args)]
struct TrainingArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// `ce` or `brier`.
    #[arg(long)]
    loss: Option<Loss>,
    /// Spectral cap per layer; `inf` disables it.
    #[arg(long)]
    beta: Option<SpectralCap>,
    /// Early stopping on validation accuracy, with optional patience.
    #[arg(long, num_args = 0..=1, default_missing_value = "10")]
    early_stop: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AttackArgs {
    /// fgm, fgsm, pgd-l2, pgd-linf or lambda-opt.
    #[arg(long)]
    attack: Option<AttackMethod>,
    /// Absolute budget.
    #[arg(long, conflicts_with = "gamma")]
    epsilon: Option<f64>,
    /// Budget relative to the mean sample norm.
    #[arg(long)]
    gamma: Option<f64>,
    /// PGD iterations.
    #[arg(long)]
    steps: Option<usize>,
    /// PGD step size (default 1.5·ε/steps).
    #[arg(long)]
    step_size: Option<f64>,
    /// Penalty weight of the λ-optimal attack and of the bound.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Architecture `d0-d1-...-dk:activation`.
    #[arg(long)]
    arch: Option<Architecture>,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// Resolved `config.kv` of an earlier run; other flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Substitute architecture.
    #[arg(long)]
    arch: Option<Architecture>,
    /// Target architecture; repeat for several targets.
    #[arg(long = "target")]
    targets: Vec<Architecture>,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// Share of the data held out for evaluation.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Also train an unregularized substitute for the intersection rates.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    /// Substitute model file.
    #[arg(long)]
    substitute: PathBuf,
    /// Target model file (default: the substitute).
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Seed of a generated dataset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Data-matrix norm bound, instead of --data.
    #[arg(long, requires = "n", conflicts_with = "data")]
    data_norm: Option<f64>,
    /// Sample count, instead of --data.
    #[arg(long)]
    n: Option<usize>,
    /// Default: the smallest λ satisfying the contraction condition.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.05)]
    omega: f64,
    #[arg(long, default_value = "brier")]
    loss: Loss,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment output directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

fn parse_domain(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err("need lo < hi".into())
    }
}

impl DataArgs {
    fn source(&self) -> Result<Option<DataSource>, Error> {
        let Some(spec) = &self.data else {
            return Ok(None);
        };
        let mut source: DataSource = spec.parse()?;
        if let DataSource::Csv {
            classes,
            header,
            domain,
            ..
        } = &mut source
        {
            *classes = self.classes;
            *header = self.header;
            *domain = self.domain;
        }
        Ok(Some(source))
    }
}

impl TrainingArgs {
    fn optimizer(&self, base: Optimizer) -> Result<Optimizer, Error> {
        let mut opt = match self.optimizer.as_deref() {
            None => base,
            Some("adam") => Optimizer::adam(base.lr()),
            Some("sgd") => Optimizer::sgd(base.lr(), 0.0),
            Some(other) => {
                return Err(Error::InvalidArgument(format!("unknown optimizer `{other}`")))
            }
        };
        match &mut opt {
            Optimizer::Adam { lr, .. } => {
                if self.momentum.is_some() {
                    return Err(Error::InvalidArgument("--momentum needs --optimizer sgd".into()));
                }
                *lr = self.lr.unwrap_or(*lr);
            }
            Optimizer::Sgd { lr, momentum } => {
                *lr = self.lr.unwrap_or(*lr);
                *momentum = self.momentum.unwrap_or(*momentum);
            }
        }
        Ok(opt)
    }

    fn apply(&self, cfg: &mut TrainConfig) -> Result<(), Error> {
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.optimizer = self.optimizer(cfg.optimizer)?;
        cfg.loss = self.loss.unwrap_or(cfg.loss);
        cfg.spectral_cap = self.beta.unwrap_or(cfg.spectral_cap);
        if let Some(patience) = self.early_stop {
            cfg.early_stop = Some(EarlyStopConfig {
                patience,
                val_fraction: 0.3,
            });
        }
        if let (Some(f), Some(es)) = (self.val_fraction, cfg.early_stop.as_mut()) {
            es.val_fraction = f;
        }
        Ok(())
    }
}

impl AttackArgs {
    fn budget(&self, base: Budget) -> Budget {
        match (self.epsilon, self.gamma) {
            (Some(epsilon), _) => Budget::Absolute { epsilon },
            (None, Some(gamma)) => Budget::Relative { gamma },
            (None, None) => base,
        }
    }

    /// `base` with every given flag applied; the method flag starts afresh.
    fn spec(&self, base: AttackSpec) -> AttackSpec {
        let mut spec = match self.attack {
            Some(m) if m != base.method => fresh_spec(m, base.steps),
            _ => base,
        };
        spec.steps = self.steps.unwrap_or(spec.steps);
        if let Some(a) = self.step_size {
            spec.step_size = StepSize::Fixed(a);
        }
        spec.lambda = self.lambda.unwrap_or(spec.lambda);
        spec
    }
}

const DEFAULT_STEPS: usize = 15;
const DEFAULT_GAMMA: f64 = 0.05;

fn fresh_spec(method: AttackMethod, steps: usize) -> AttackSpec {
    match method {
        AttackMethod::Fgm => AttackSpec::fgm(0.0),
        AttackMethod::Fgsm => AttackSpec::fgsm(0.0),
        AttackMethod::PgdL2 => AttackSpec::pgd_l2(0.0, steps),
        AttackMethod::PgdLinf => AttackSpec::pgd_linf(0.0, steps),
        AttackMethod::LambdaOpt => AttackSpec::lambda_opt(1.0),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn print_epoch(model: &str, total: usize, e: &EpochRecord) {
    let val = e
        .validation_accuracy
        .map_or(String::new(), |v| format!(" val_acc={v:.4}"));
    eprintln!(
        "[{model}] epoch {}/{total} loss={:.6} acc={:.4}{val}",
        e.epoch, e.train_loss, e.train_accuracy
    );
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut job = match &args.config {
        Some(path) => read_kv::<TrainJob>(path)?,
        None => TrainJob {
            data: args.data.source()?.ok_or_else(|| usage("--data is required"))?,
            seed: 0,
            architecture: args.arch.clone().ok_or_else(|| usage("--arch is required"))?,
            train: TrainConfig::default(),
            budget: Budget::Relative {
                gamma: DEFAULT_GAMMA,
            },
        },
    };
    if let Some(d) = args.data.source()? {
        job.data = d;
    }
    if let Some(a) = &args.arch {
        job.architecture = a.clone();
    }
    job.seed = args.training.seed.unwrap_or(job.seed);
    args.training.apply(&mut job.train)?;
    job.train.seed = job.seed;
    job.budget = args.attack.budget(job.budget);
    job.train.adversarial = match (&job.train.adversarial, args.attack.attack) {
        (Some(base), _) => Some(args.attack.spec(base.clone())),
        (None, Some(m)) => Some(args.attack.spec(fresh_spec(m, DEFAULT_STEPS))),
        (None, None) => None,
    };

    let total = job.train.epochs;
    let out = job.run(|e| print_epoch("model", total, e))?;
    job.write_outputs(&out, &args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn default_targets(sub: &Architecture) -> Result<Vec<Architecture>, Error> {
    [16, 64]
        .iter()
        .map(|&w| {
            Architecture::new(
                vec![sub.input_dim(), w, w, sub.output_dim()],
                sub.hidden,
            )
        })
        .collect()
}

fn resolve_experiment(args: &ExperimentArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => read_kv::<ExperimentConfig>(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = args.data.source()? {
        cfg.data = d;
    }
    if let Some(a) = &args.arch {
        cfg.substitute = a.clone();
        if args.targets.is_empty() && args.config.is_none() {
            cfg.targets = default_targets(a)?;
        }
    }
    if !args.targets.is_empty() {
        cfg.targets = args.targets.clone();
    }
    let t = &args.training;
    cfg.seed = t.seed.unwrap_or(cfg.seed);
    cfg.epochs = t.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = t.batch_size.unwrap_or(cfg.batch_size);
    cfg.optimizer = t.optimizer(cfg.optimizer)?;
    cfg.loss = t.loss.unwrap_or(cfg.loss);
    cfg.spectral_cap = t.beta.unwrap_or(cfg.spectral_cap);
    cfg.early_stop = t.early_stop.or(cfg.early_stop);
    cfg.val_fraction = t.val_fraction.unwrap_or(cfg.val_fraction);
    cfg.test_fraction = args.test_fraction.unwrap_or(cfg.test_fraction);
    cfg.baseline |= args.baseline;
    cfg.tau = args.tau.unwrap_or(cfg.tau);
    cfg.omega = args.omega.unwrap_or(cfg.omega);
    cfg.attack = args.attack.spec(cfg.attack.clone());
    cfg.budget = args.attack.budget(cfg.budget);
    cfg.lambda = args.attack.lambda.or(cfg.lambda);
    Ok(cfg)
}

fn fmt_rate(r: Option<&transferbound::TransferabilityRate>) -> String {
    r.map_or("n/a".into(), |r| format!("{:.4}", r.rate))
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), Error> {
    let cfg = resolve_experiment(&args)?;
    let total = cfg.epochs;
    let outputs = experiment::run(&cfg, |p: Progress<'_>| print_epoch(p.model, total, p.epoch))?;
    experiment::write_outputs(&cfg, &outputs, &args.out)?;
    print_table(&[(args.out.display().to_string(), outputs.report)])?;
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> Result<(), Error> {
    let sub = load_model(&args.substitute)?.network;
    let tgt = match &args.target {
        Some(p) => load_model(p)?.network,
        None => sub.clone(),
    };
    let (data_norm, n) = match (args.data.source()?, args.data_norm, args.n) {
        (Some(source), _, _) => {
            let data = source.load(args.seed)?;
            (data_norm_bound(&data)?.spectral, data.len())
        }
        (None, Some(b), Some(n)) => (b, n),
        _ => return Err(usage("give --data, or both --data-norm and --n")),
    };
    let lambda = match args.lambda {
        Some(l) => l,
        None => minimal_lambda(&sub, args.tau)?,
    };
    let report = generalization_bound(
        &sub,
        &tgt,
        args.loss,
        BoundParams {
            data_norm_bound: data_norm,
            lambda,
            tau: args.tau,
            omega: args.omega,
            n,
        },
    )?;
    print!("{}", to_kv(&report)?);
    if let Some(out) = &args.out {
        write_kv(out, &report)?;
    }
    Ok(())
}

fn print_table(runs: &[(String, ExperimentReport)]) -> Result<(), Error> {
    let targets = runs.iter().map(|(_, r)| r.targets.len()).max().unwrap_or(0);
    let mut header = vec![
        "run".to_string(),
        "beta".into(),
        "ES".into(),
        "Train Acc".into(),
        "Test Acc".into(),
        "Gen.Err.".into(),
        "eps_gen".into(),
    ];
    for i in 0..targets {
        header.push(format!("Transferability Rate(target{i})"));
    }
    let mut rows = vec![header];
    for (name, r) in runs {
        let mut push = |label: String, s: &experiment::SubstituteSummary, baseline: bool| {
            let mut row = vec![
                label,
                s.spectral_cap.to_string(),
                s.early_stop.map_or("-".into(), |p| p.to_string()),
                format!("{:.4}", s.adversarial_train_accuracy),
                format!("{:.4}", s.adversarial_test_accuracy),
                format!("{:.4}", s.adversarial_accuracy_gap),
                format!("{:.4}", s.transfer.gen_error),
            ];
            for t in &r.targets {
                let rate = if baseline {
                    t.baseline_transfer_rate.as_ref()
                } else {
                    t.transfer_rate.as_ref()
                };
                row.push(fmt_rate(rate));
            }
            rows.push(row);
        };
        push(name.clone(), &r.substitute, false);
        if let Some(b) = &r.baseline {
            push(format!("{name} (baseline)"), b, true);
        }
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r.get(c).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut stdout = std::io::stdout().lock();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        writeln!(stdout, "{}", line.join("  ").trim_end()).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let runs = args
        .runs
        .iter()
        .map(|dir| {
            let report: ExperimentReport = read_kv(&dir.join("report.kv"))?;
            Ok((dir.display().to_string(), report))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    print_table(&runs)
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
