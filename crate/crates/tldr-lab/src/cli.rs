//! Configuration and orchestration for the `tldr-lab` binary.
//!
//! Configuration comes from three layers, later ones winning: built-in
//! desk-scale defaults, an optional `key = value` config file (with `#`
//! comments; unknown keys are errors, duplicate keys warn and keep the last
//! value), and command-line flags. The output directory falls back to the
//! `TLDR_LAB_OUT` environment variable when neither flags nor file set it.
//!
//! All artifacts are CSVs and model checkpoints under the output directory;
//! runs are deterministic given the config, and `runtime_s` is recorded as 0
//! so that pinned-seed re-runs are bit-identical.

use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::attack::{
    attack_multitargeted, attack_point_ce, attack_point_rej, probe_config, PgdConfig,
    RejectionLoss,
};
use crate::data::{
    gen_gaussian_grid, load_adversarial_csv, save_adversarial_csv, split, Dataset,
    PerturbationSet,
};
use crate::defense::{
    make_selective, save_training_log, train_at, train_tldr, Decision, TldrConfig, TrainConfig,
};
use crate::eval::{
    err_transductive_rej, format_report, load_report, rejection_rates, save_report, EvalRecord,
};
use crate::numcore::Model;
use crate::parallel::{par_map_indexed, with_jobs};
use crate::theory::{
    check_delta_lemma, check_realizable_theorem, failure_fraction, save_trials_csv,
    DeltaLemmaInstance, IntervalPerturbation, RealizableCheck, ThresholdClass,
};
use crate::transduction::{
    gmsa_attack, save_gmsa_log, transfer_attack, AtLearner, EnsembleMode, GmsaConfig, Learner,
    TldrLearner, TransferConfig,
};
use crate::{seed_derive, Error, RealMatrix, Result};

/// Deterministic laboratory for robust learning with transduction and
/// rejection.
#[derive(Debug, Parser)]
#[command(name = "tldr-lab", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test CSVs.
    GenData,
    /// Train the configured defense and checkpoint the model.
    Train,
    /// Run the configured attack against the trained checkpoint.
    Attack,
    /// Run the greedy model-space attack against a retraining defender.
    Gmsa,
    /// Score an adversarial batch and append a report record.
    Evaluate,
    /// Monte Carlo verification of the theoretical guarantees.
    VerifyTheory,
    /// Sweep the rejection radius and the attack radius.
    Sweep,
    /// Print the collected evaluation report.
    Report,
}

/// Command-line flags; every flag overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Path to a `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Attack radius (l-infinity).
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Rejection radius; defaults to a quarter of the attack radius.
    #[arg(long = "epsilon-defense", global = true)]
    pub epsilon_defense: Option<f64>,
    /// Defense kind: at, at_rej, or tldr.
    #[arg(long, global = true)]
    pub defense: Option<String>,
    /// Attack kind: pgd_ce, pgd_rej, multi, transfer, gmsa_min, or gmsa_avg.
    #[arg(long, global = true)]
    pub attack: Option<String>,
    /// Ensemble mode for the model-space attack: min or avg.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Retrain/attack rounds of the model-space attack.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    At,
    AtRej,
    Tldr,
}

impl DefenseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseKind::At => "at",
            DefenseKind::AtRej => "at_rej",
            DefenseKind::Tldr => "tldr",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "at" => Ok(DefenseKind::At),
            "at_rej" => Ok(DefenseKind::AtRej),
            "tldr" => Ok(DefenseKind::Tldr),
            _ => Err(Error::Config(format!(
                "unknown defense {s:?} (expected at, at_rej, or tldr)"
            ))),
        }
    }

    /// Whether evaluation applies the rejection transform.
    pub fn selective(self) -> bool {
        self != DefenseKind::At
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    PgdCe,
    PgdRej,
    Multi,
    Transfer,
    GmsaMin,
    GmsaAvg,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::PgdCe => "pgd_ce",
            AttackKind::PgdRej => "pgd_rej",
            AttackKind::Multi => "multi",
            AttackKind::Transfer => "transfer",
            AttackKind::GmsaMin => "gmsa_min",
            AttackKind::GmsaAvg => "gmsa_avg",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pgd_ce" => Ok(AttackKind::PgdCe),
            "pgd_rej" => Ok(AttackKind::PgdRej),
            "multi" => Ok(AttackKind::Multi),
            "transfer" => Ok(AttackKind::Transfer),
            "gmsa_min" => Ok(AttackKind::GmsaMin),
            "gmsa_avg" => Ok(AttackKind::GmsaAvg),
            _ => Err(Error::Config(format!(
                "unknown attack {s:?} (expected pgd_ce, pgd_rej, multi, transfer, gmsa_min, or gmsa_avg)"
            ))),
        }
    }

    fn gmsa_mode(self) -> Option<EnsembleMode> {
        match self {
            AttackKind::GmsaMin => Some(EnsembleMode::Min),
            AttackKind::GmsaAvg => Some(EnsembleMode::Avg),
            _ => None,
        }
    }
}

/// Fully resolved run configuration. Defaults are desk-scale versions of the
/// reference image-classification setup: 2000 train / 200 test points, 10
/// epochs, 20-step PGD with step 0.02, attack radius 0.3, rejection radius a
/// quarter of that.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub epsilon: f64,
    pub epsilon_defense: f64,
    pub defense: DefenseKind,
    pub attack: AttackKind,
    pub mode: EnsembleMode,
    pub iterations: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub n_train: usize,
    pub m_test: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub warm_start_epochs: Option<usize>,
    pub lambda_prime: f64,
    pub attack_steps: usize,
    pub attack_step_size: f64,
    /// Optional external dataset CSVs; generated files in `out` otherwise.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

impl RunConfig {
    fn attack_ball(&self) -> PerturbationSet {
        PerturbationSet::linf(self.epsilon)
    }

    fn defense_ball(&self) -> PerturbationSet {
        PerturbationSet::linf(self.epsilon_defense)
    }

    fn pgd(&self) -> PgdConfig {
        PgdConfig {
            steps: self.attack_steps,
            step_size: self.attack_step_size,
            random_start: false,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            skip_connections: false,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            attack: self.pgd(),
            train_ball: self.attack_ball(),
            seed: self.seed,
        }
    }

    fn tldr_config(&self) -> TldrConfig {
        TldrConfig {
            lambda: self.lambda,
            warm_start_epochs: self.warm_start_epochs,
        }
    }

    fn train_csv(&self) -> PathBuf {
        self.train_data
            .clone()
            .unwrap_or_else(|| self.out.join("train.csv"))
    }

    fn test_csv(&self) -> PathBuf {
        self.test_data
            .clone()
            .unwrap_or_else(|| self.out.join("test.csv"))
    }

    fn model_path(&self) -> PathBuf {
        self.out
            .join(format!("model_{}_{}.tldr", self.defense.as_str(), self.seed))
    }

    fn adv_path(&self, attack: AttackKind) -> PathBuf {
        self.out
            .join(format!("adv_{}_{}.csv", attack.as_str(), self.seed))
    }

    fn report_path(&self) -> PathBuf {
        self.out.join("report.csv")
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epsilon: 0.3,
            epsilon_defense: 0.3 / 4.0,
            defense: DefenseKind::Tldr,
            attack: AttackKind::PgdRej,
            mode: EnsembleMode::Min,
            iterations: 10,
            seed: 0,
            jobs: 0,
            out: PathBuf::from("runs"),
            n_train: 2000,
            m_test: 200,
            classes: 10,
            dim: 2,
            separation: 3.0,
            sigma: 0.5,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            hidden: vec![32, 32],
            lambda: 0.176,
            warm_start_epochs: None,
            lambda_prime: 1.0,
            attack_steps: 20,
            attack_step_size: 0.02,
            train_data: None,
            test_data: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
}

/// Resolves the run configuration from defaults, an optional config file, and
/// command-line overrides (in that order of precedence, strongest last).
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut epsilon_defense: Option<f64> = None;
    let mut out_set = false;

    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if let Some(prev) = seen.insert(key.to_string(), lineno + 1) {
                eprintln!(
                    "warning: {}:{}: duplicate key {key:?} (previously line {prev}); last value wins",
                    path.display(),
                    lineno + 1
                );
            }
            match key {
                "epsilon" => cfg.epsilon = parse_num(key, value)?,
                "epsilon_defense" => epsilon_defense = Some(parse_num(key, value)?),
                "defense" => cfg.defense = DefenseKind::parse(value)?,
                "attack" => cfg.attack = AttackKind::parse(value)?,
                "mode" => cfg.mode = parse_mode(value)?,
                "iterations" => cfg.iterations = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "jobs" => cfg.jobs = parse_num(key, value)?,
                "out" => {
                    cfg.out = PathBuf::from(value);
                    out_set = true;
                }
                "n_train" => cfg.n_train = parse_num(key, value)?,
                "m_test" => cfg.m_test = parse_num(key, value)?,
                "classes" => cfg.classes = parse_num(key, value)?,
                "dim" => cfg.dim = parse_num(key, value)?,
                "separation" => cfg.separation = parse_num(key, value)?,
                "sigma" => cfg.sigma = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "hidden" => {
                    cfg.hidden = value
                        .split(',')
                        .map(|p| parse_num(key, p.trim()))
                        .collect::<Result<_>>()?;
                }
                "lambda" => cfg.lambda = parse_num(key, value)?,
                "warm_start_epochs" => cfg.warm_start_epochs = Some(parse_num(key, value)?),
                "lambda_prime" => cfg.lambda_prime = parse_num(key, value)?,
                "attack_steps" => cfg.attack_steps = parse_num(key, value)?,
                "attack_step_size" => cfg.attack_step_size = parse_num(key, value)?,
                "train_data" => cfg.train_data = Some(PathBuf::from(value)),
                "test_data" => cfg.test_data = Some(PathBuf::from(value)),
                _ => {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown key {key:?}",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
    }

    if let Some(v) = overrides.seed {
        cfg.seed = v;
    }
    if let Some(v) = overrides.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = overrides.epsilon_defense {
        epsilon_defense = Some(v);
    }
    if let Some(v) = &overrides.defense {
        cfg.defense = DefenseKind::parse(v)?;
    }
    if let Some(v) = &overrides.attack {
        cfg.attack = AttackKind::parse(v)?;
    }
    if let Some(v) = &overrides.mode {
        cfg.mode = parse_mode(v)?;
    }
    if let Some(v) = overrides.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = overrides.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = &overrides.out {
        cfg.out = v.clone();
        out_set = true;
    }
    if !out_set {
        if let Ok(env_out) = std::env::var("TLDR_LAB_OUT") {
            if !env_out.is_empty() {
                cfg.out = PathBuf::from(env_out);
            }
        }
    }

    cfg.epsilon_defense = epsilon_defense.unwrap_or(cfg.epsilon / 4.0);
    if !(cfg.epsilon_defense <= cfg.epsilon) {
        return Err(Error::Config(format!(
            "epsilon_defense ({}) must not exceed epsilon ({})",
            cfg.epsilon_defense, cfg.epsilon
        )));
    }
    if cfg.epsilon < 0.0 {
        return Err(Error::Config("epsilon must be >= 0".into()));
    }
    for referenced in [&cfg.train_data, &cfg.test_data].into_iter().flatten() {
        if !referenced.exists() {
            return Err(Error::Config(format!(
                "referenced file does not exist: {}",
                referenced.display()
            )));
        }
    }
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<EnsembleMode> {
    match s.to_ascii_lowercase().as_str() {
        "min" => Ok(EnsembleMode::Min),
        "avg" => Ok(EnsembleMode::Avg),
        _ => Err(Error::Config(format!(
            "unknown mode {s:?} (expected min or avg)"
        ))),
    }
}

/// Entry point used by the binary: resolves the config and dispatches.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = parse_config(cli.overrides.config.as_deref(), &cli.overrides)?;
    run_command(cli.command, &cfg)
}

/// Runs one subcommand against a resolved configuration.
pub fn run_command(command: Command, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    with_jobs(cfg.jobs, || match command {
        Command::GenData => cmd_gen_data(cfg),
        Command::Train => cmd_train(cfg),
        Command::Attack => cmd_attack(cfg),
        Command::Gmsa => cmd_gmsa(cfg, cfg.mode),
        Command::Evaluate => cmd_evaluate(cfg),
        Command::VerifyTheory => cmd_verify_theory(cfg),
        Command::Sweep => cmd_sweep(cfg),
        Command::Report => cmd_report(cfg),
    })
}

fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        Dataset::load_csv(&cfg.train_csv())?,
        Dataset::load_csv(&cfg.test_csv())?,
    ))
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let total = cfg.n_train + cfg.m_test;
    let per_class = total.div_ceil(cfg.classes);
    let full = gen_gaussian_grid(
        cfg.classes,
        cfg.separation,
        per_class,
        cfg.dim,
        cfg.sigma,
        seed_derive(cfg.seed, "gen", 0),
    )?;
    let (train, test) = split(&full, cfg.n_train, cfg.m_test, seed_derive(cfg.seed, "split", 0))?;
    train.save_csv(&cfg.out.join("train.csv"))?;
    test.save_csv(&cfg.out.join("test.csv"))?;
    println!(
        "wrote {} train and {} test rows ({} classes, dim {}) to {}",
        train.len(),
        test.len(),
        cfg.classes,
        cfg.dim,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (train, test) = load_split(cfg)?;
    let tc = cfg.train_config();
    let (model, log) = match cfg.defense {
        DefenseKind::At | DefenseKind::AtRej => train_at(&train, &tc)?,
        DefenseKind::Tldr => train_tldr(&train, &test.features, &tc, &cfg.tldr_config())?,
    };
    let model_path = cfg.model_path();
    model.save(&model_path)?;
    let log_path = cfg
        .out
        .join(format!("trainlog_{}_{}.csv", cfg.defense.as_str(), cfg.seed));
    save_training_log(&log_path, &log)?;
    println!(
        "trained {} (seed {}) -> {}",
        cfg.defense.as_str(),
        cfg.seed,
        model_path.display()
    );
    Ok(())
}

/// Verifies that every row of `adv` stays within the attack ball around its
/// clean counterpart (and the domain box, when the ball clips to one).
fn audit_feasibility(
    adv: &RealMatrix,
    clean: &RealMatrix,
    clean_index: &[usize],
    ball: &PerturbationSet,
) -> Result<()> {
    for (j, (row, &idx)) in adv.iter_rows().zip(clean_index.iter()).enumerate() {
        if idx >= clean.rows() {
            return Err(Error::InvalidArgument(format!(
                "adversarial row {j}: clean index {idx} out of range"
            )));
        }
        if !ball.contains(row, clean.row(idx)) {
            return Err(Error::InvalidArgument(format!(
                "adversarial row {j} leaves the radius-{} ball around clean point {idx}",
                ball.epsilon
            )));
        }
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.model_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "no checkpoint at {} (run `train` first)",
            path.display()
        )));
    }
    Model::load(&path)
}

fn cmd_attack(cfg: &RunConfig) -> Result<()> {
    if cfg.attack.gmsa_mode().is_some() {
        // Model-space attacks retrain the defender; same artifact layout.
        return cmd_gmsa(cfg, cfg.attack.gmsa_mode().expect("checked"));
    }
    let model = load_model(cfg)?;
    let (_, test) = load_split(cfg)?;
    let attack_ball = cfg.attack_ball();
    let defense_ball = cfg.defense_ball();
    let pgd = cfg.pgd();

    let (adv, perturbed) = match cfg.attack {
        AttackKind::Transfer => transfer_attack(
            &model,
            &test,
            &TransferConfig {
                attack_ball,
                attack: pgd,
                defense_ball,
                lambda_prime: cfg.lambda_prime,
                adaptive: true,
                multitargeted: true,
                seed: cfg.seed,
            },
        )?,
        kind => {
            let loss = RejectionLoss::new(defense_ball, cfg.lambda_prime, true);
            let rows: Vec<Result<Vec<f64>>> = par_map_indexed(test.len(), |j| {
                let x = test.features.row(j);
                let y = test.labels[j];
                let seed = seed_derive(cfg.seed, "cli-attack", j as u64);
                match kind {
                    AttackKind::PgdCe => attack_point_ce(&model, x, y, &attack_ball, &pgd, seed),
                    AttackKind::PgdRej => {
                        attack_point_rej(&model, x, y, &attack_ball, &pgd, &loss, seed)
                    }
                    AttackKind::Multi => attack_multitargeted(
                        &model,
                        x,
                        y,
                        &attack_ball,
                        &defense_ball,
                        &pgd,
                        &probe_config(defense_ball.epsilon),
                        seed,
                    ),
                    _ => unreachable!("transfer and gmsa handled above"),
                }
            });
            let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
            let adv = RealMatrix::from_rows(&rows)?;
            let perturbed = crate::eval::bitwise_perturbed(&adv, &test.features);
            (adv, perturbed)
        }
    };

    let clean_index: Vec<usize> = (0..test.len()).collect();
    audit_feasibility(&adv, &test.features, &clean_index, &attack_ball)?;
    let path = cfg.adv_path(cfg.attack);
    save_adversarial_csv(&path, &adv, &clean_index, &perturbed)?;
    println!(
        "attack {} wrote {} rows ({} perturbed) -> {}",
        cfg.attack.as_str(),
        adv.rows(),
        perturbed.iter().filter(|&&p| p).count(),
        path.display()
    );
    Ok(())
}

fn learner_for(cfg: &RunConfig) -> Box<dyn Learner> {
    match cfg.defense {
        DefenseKind::At | DefenseKind::AtRej => Box::new(AtLearner {
            cfg: cfg.train_config(),
        }),
        DefenseKind::Tldr => Box::new(TldrLearner {
            cfg: cfg.train_config(),
            tldr: cfg.tldr_config(),
        }),
    }
}

fn cmd_gmsa(cfg: &RunConfig, mode: EnsembleMode) -> Result<()> {
    let (train, test) = load_split(cfg)?;
    let gc = GmsaConfig {
        iterations: cfg.iterations,
        mode,
        attack_ball: cfg.attack_ball(),
        attack: cfg.pgd(),
        defense_ball: cfg.defense_ball(),
        lambda_prime: cfg.lambda_prime,
        adaptive: true,
        seed: cfg.seed,
    };
    let ckpt_dir = cfg.out.join(format!(
        "gmsa_{}_{}",
        mode.as_str().to_ascii_lowercase(),
        cfg.seed
    ));
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let learner = learner_for(cfg);
    let outcome = gmsa_attack(learner.as_ref(), &train, &test, &gc, Some(&ckpt_dir))?;

    let clean_index: Vec<usize> = (0..test.len()).collect();
    audit_feasibility(&outcome.adversarial, &test.features, &clean_index, &gc.attack_ball)?;
    let kind = match mode {
        EnsembleMode::Min => AttackKind::GmsaMin,
        EnsembleMode::Avg => AttackKind::GmsaAvg,
    };
    save_adversarial_csv(
        &cfg.adv_path(kind),
        &outcome.adversarial,
        &clean_index,
        &outcome.perturbed,
    )?;
    save_gmsa_log(
        &cfg.out.join(format!(
            "gmsalog_{}_{}.csv",
            mode.as_str().to_ascii_lowercase(),
            cfg.seed
        )),
        &outcome.log,
    )?;

    // Record the attack's own score: the best defender in the history is the
    // one the returned batch was measured against.
    let best = &outcome.models[outcome.best_iteration];
    let sc = make_selective(best.clone(), gc.defense_ball);
    let decisions = sc.predict_batch(&outcome.adversarial)?;
    let (p_rej_adv, p_rej_clean) = rejection_rates(&decisions, &outcome.perturbed);
    append_record(
        cfg,
        EvalRecord {
            defense: cfg.defense.as_str().to_string(),
            attack: kind.as_str().to_string(),
            mode: mode.as_str().to_string(),
            seed: cfg.seed,
            robust_accuracy: 1.0 - outcome.err_max,
            p_rej_adv,
            p_rej_clean,
            runtime_s: 0.0,
        },
    )?;
    println!(
        "gmsa {} reached err {:.4} at iteration {} over {} rounds",
        mode.as_str(),
        outcome.err_max,
        outcome.best_iteration,
        outcome.log.len()
    );
    Ok(())
}

fn append_record(cfg: &RunConfig, record: EvalRecord) -> Result<()> {
    let path = cfg.report_path();
    let mut records = if path.exists() {
        load_report(&path)?
    } else {
        Vec::new()
    };
    records.push(record);
    save_report(&path, &records)
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let (_, test) = load_split(cfg)?;
    let path = cfg.adv_path(cfg.attack);
    let (adv, clean_index, perturbed) = load_adversarial_csv(&path)?;
    // Feasibility re-audit on load: emitted batches must still be in-ball.
    audit_feasibility(&adv, &test.features, &clean_index, &cfg.attack_ball())?;

    let labels: Vec<usize> = clean_index.iter().map(|&i| test.labels[i]).collect();
    let (decisions, clean_decisions) = if cfg.defense.selective() {
        let sc = make_selective(model, cfg.defense_ball());
        (sc.predict_batch(&adv)?, sc.predict_batch(&test.features)?)
    } else {
        let plain = |m: &RealMatrix| -> Result<Vec<Decision>> {
            Ok(model.predict_batch(m)?.into_iter().map(Decision::Class).collect())
        };
        (plain(&adv)?, plain(&test.features)?)
    };
    let err = err_transductive_rej(&decisions, &labels, &perturbed);
    let (p_rej_adv, _) = rejection_rates(&decisions, &perturbed);
    let p_rej_clean =
        clean_decisions.iter().filter(|d| d.is_reject()).count() as f64 / test.len().max(1) as f64;
    let mode = cfg.attack.gmsa_mode().map_or("-", EnsembleMode::as_str);
    append_record(
        cfg,
        EvalRecord {
            defense: cfg.defense.as_str().to_string(),
            attack: cfg.attack.as_str().to_string(),
            mode: mode.to_string(),
            seed: cfg.seed,
            robust_accuracy: 1.0 - err,
            p_rej_adv,
            p_rej_clean,
            runtime_s: 0.0,
        },
    )?;
    println!(
        "{} vs {}: robust accuracy {:.4}, rejection rates adv {:.4} / clean {:.4}",
        cfg.defense.as_str(),
        cfg.attack.as_str(),
        1.0 - err,
        p_rej_adv,
        p_rej_clean
    );
    Ok(())
}

fn cmd_verify_theory(cfg: &RunConfig) -> Result<()> {
    let check = RealizableCheck {
        seed: cfg.seed,
        ..RealizableCheck::default()
    };
    let outcomes = check_realizable_theorem(&check)?;
    save_trials_csv(&cfg.out.join("theory_trials.csv"), &outcomes)?;
    let failure = failure_fraction(&outcomes);
    println!(
        "guarantee check: {} trials, bound {:.4}, failure fraction {:.4} (tolerated {:.2})",
        outcomes.len(),
        outcomes[0].bound,
        failure,
        check.delta
    );
    if outcomes.iter().any(|o| !o.domination_ok) {
        return Err(Error::InvalidArgument(
            "error-domination step violated in at least one trial".into(),
        ));
    }

    let class = ThresholdClass::grid(-1.0, 1.0, 201, true)?;
    let u = IntervalPerturbation::new(0.05);
    let instances: Vec<DeltaLemmaInstance> = (0..50)
        .map(|i| DeltaLemmaInstance::random(seed_derive(cfg.seed, "lemma", i)))
        .collect();
    let results = check_delta_lemma(&class, &u, &instances);
    let mut lemma_csv = String::from("instance,pass\n");
    for (i, ok) in results.iter().enumerate() {
        lemma_csv.push_str(&format!("{i},{}\n", *ok as u8));
    }
    let lemma_path = cfg.out.join("theory_lemma.csv");
    std::fs::write(&lemma_path, lemma_csv).map_err(|e| Error::io(&lemma_path, e))?;
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("rejection-set identity: {passed}/{} instances", results.len());

    if failure > check.delta {
        return Err(Error::InvalidArgument(format!(
            "failure fraction {failure} exceeds tolerance {}",
            check.delta
        )));
    }
    if passed != results.len() {
        return Err(Error::InvalidArgument(
            "rejection-set identity failed on at least one instance".into(),
        ));
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let (train, test) = load_split(cfg)?;
    let tc = cfg.train_config();
    let (model, _) = train_at(&train, &tc)?;
    let labels = &test.labels;
    let attack_ball = cfg.attack_ball();
    let pgd = cfg.pgd();

    let attack_ce = |ball: &PerturbationSet| -> Result<(RealMatrix, Vec<bool>)> {
        let rows: Vec<Result<Vec<f64>>> = par_map_indexed(test.len(), |j| {
            attack_point_ce(
                &model,
                test.features.row(j),
                labels[j],
                ball,
                &pgd,
                seed_derive(cfg.seed, "sweep-attack", j as u64),
            )
        });
        let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
        let adv = RealMatrix::from_rows(&rows)?;
        let perturbed = crate::eval::bitwise_perturbed(&adv, &test.features);
        Ok((adv, perturbed))
    };

    // Rejection-radius sweep: one fixed adversarial batch, varying rejection
    // radius of the selective classifier.
    let (adv, perturbed) = attack_ce(&attack_ball)?;
    let clean_index: Vec<usize> = (0..test.len()).collect();
    audit_feasibility(&adv, &test.features, &clean_index, &attack_ball)?;
    let mut out = String::from("epsilon_defense,robust_accuracy,p_rej_adv,p_rej_clean\n");
    for factor in [8.0, 4.0, 2.0, 1.0] {
        let radius = cfg.epsilon / factor;
        let sc = make_selective(model.clone(), PerturbationSet::linf(radius));
        let decisions = sc.predict_batch(&adv)?;
        let err = err_transductive_rej(&decisions, labels, &perturbed);
        let (p_rej_adv, _) = rejection_rates(&decisions, &perturbed);
        let clean_decisions = sc.predict_batch(&test.features)?;
        let p_rej_clean = clean_decisions.iter().filter(|d| d.is_reject()).count() as f64
            / test.len().max(1) as f64;
        out.push_str(&format!(
            "{radius},{},{p_rej_adv},{p_rej_clean}\n",
            1.0 - err
        ));
    }
    let path = cfg.out.join("sweep_rejection.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());

    // Attack-radius sweep: fixed rejection radius, growing attack budget.
    let sc = make_selective(model.clone(), cfg.defense_ball());
    let mut out = String::from("epsilon_attack,robust_accuracy,p_rej_adv,p_rej_clean\n");
    for factor in [0.25, 0.5, 1.0, 2.0] {
        let radius = cfg.epsilon * factor;
        let ball = PerturbationSet::linf(radius);
        let (adv, perturbed) = attack_ce(&ball)?;
        audit_feasibility(&adv, &test.features, &clean_index, &ball)?;
        let decisions = sc.predict_batch(&adv)?;
        let err = err_transductive_rej(&decisions, labels, &perturbed);
        let (p_rej_adv, p_rej_clean) = rejection_rates(&decisions, &perturbed);
        out.push_str(&format!(
            "{radius},{},{p_rej_adv},{p_rej_clean}\n",
            1.0 - err
        ));
    }
    let path = cfg.out.join("sweep_attack.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let path = cfg.report_path();
    let records = if path.exists() { load_report(&path)? } else { Vec::new() };
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no records in {}",
            cfg.out.display()
        )));
    }
    println!("{}", format_report(&records));
    Ok(())
}
