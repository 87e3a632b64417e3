//! Attacks against transductive defenses: the rejection-aware greedy model
//! space attack (GMSA) and the rejection-aware transfer attack.
//!
//! Both attacks target the full pipeline: the defender retrains on whatever
//! test batch it receives and then classifies it with the rejection
//! transform applied. GMSA iterates that loop, accumulating a history of
//! defender models and perturbing against the whole history; the transfer
//! attack perturbs once against a fixed surrogate.

use std::path::Path;

use crate::attack::{
    attack_multitargeted, attack_point_ce, attack_point_rej, probe_config, PgdConfig,
    RejectionLoss,
};
use crate::data::{Dataset, PerturbationSet};
use crate::defense::{make_selective, Decision};
use crate::eval::{bitwise_perturbed, err_transductive_rej, rejection_rates};
use crate::matrix::RealMatrix;
use crate::numcore::Model;
use crate::parallel::par_map_indexed;
use crate::{seed_derive, Error, Result};

/// A defender that retrains from scratch on the labeled train set plus the
/// (unlabeled, possibly perturbed) test batch it is handed.
pub trait Learner: Sync {
    fn fit(&self, train: &Dataset, test_features: &RealMatrix, seed: u64) -> Result<Model>;
    fn name(&self) -> &str;
}

/// Adversarial training; ignores the test batch.
pub struct AtLearner {
    pub cfg: crate::defense::TrainConfig,
}

impl Learner for AtLearner {
    fn fit(&self, train: &Dataset, _test: &RealMatrix, seed: u64) -> Result<Model> {
        let mut cfg = self.cfg.clone();
        cfg.seed = seed;
        Ok(crate::defense::train_at(train, &cfg)?.0)
    }

    fn name(&self) -> &str {
        "at"
    }
}

/// Transductive training on the received test batch.
pub struct TldrLearner {
    pub cfg: crate::defense::TrainConfig,
    pub tldr: crate::defense::TldrConfig,
}

impl Learner for TldrLearner {
    fn fit(&self, train: &Dataset, test: &RealMatrix, seed: u64) -> Result<Model> {
        let mut cfg = self.cfg.clone();
        cfg.seed = seed;
        Ok(crate::defense::train_tldr(train, test, &cfg, &self.tldr)?.0)
    }

    fn name(&self) -> &str {
        "tldr"
    }
}

/// How GMSA aggregates the rejection-aware loss over the model history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Maximize the worst case over the history (perturbations must fool
    /// every past model).
    Min,
    /// Maximize the average over the history.
    Avg,
}

impl EnsembleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleMode::Min => "MIN",
            EnsembleMode::Avg => "AVG",
        }
    }
}

/// Rejection-aware loss aggregated over a model history.
///
/// `Min` differentiates through the model attaining the minimum (lowest index
/// on ties); `Avg` averages values and gradients.
pub fn ensemble_value_grad(
    models: &[Model],
    mode: EnsembleMode,
    loss: &RejectionLoss,
    z: &[f64],
    y: usize,
) -> Result<(f64, Vec<f64>)> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("empty model history".into()));
    }
    match mode {
        EnsembleMode::Min => {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for m in models {
                let (v, g) = loss.value_grad(m, z, y)?;
                if best.as_ref().map_or(true, |(bv, _)| v < *bv) {
                    best = Some((v, g));
                }
            }
            Ok(best.expect("nonempty history"))
        }
        EnsembleMode::Avg => {
            let mut total = 0.0;
            let mut grad = vec![0.0; z.len()];
            for m in models {
                let (v, g) = loss.value_grad(m, z, y)?;
                total += v;
                for (a, b) in grad.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            let k = models.len() as f64;
            for a in grad.iter_mut() {
                *a /= k;
            }
            Ok((total / k, grad))
        }
    }
}

/// GMSA parameters.
#[derive(Debug, Clone)]
pub struct GmsaConfig {
    /// Number of retrain/attack rounds.
    pub iterations: usize,
    pub mode: EnsembleMode,
    /// Attack budget around each clean test point.
    pub attack_ball: PerturbationSet,
    pub attack: PgdConfig,
    /// Rejection radius of the defender's selective classifier, also used by
    /// the rejection-aware loss probe.
    pub defense_ball: PerturbationSet,
    /// Weight of the boundary-distance penalty in the rejection-aware loss.
    pub lambda_prime: f64,
    /// Drop the penalty on still-correctly-classified points.
    pub adaptive: bool,
    pub seed: u64,
}

impl GmsaConfig {
    pub fn new(attack_ball: PerturbationSet, defense_ball: PerturbationSet, seed: u64) -> Self {
        GmsaConfig {
            iterations: 10,
            mode: EnsembleMode::Min,
            attack_ball,
            attack: PgdConfig::default(),
            defense_ball,
            lambda_prime: 1.0,
            adaptive: true,
            seed,
        }
    }

    fn rejection_loss(&self) -> RejectionLoss {
        RejectionLoss {
            defense_ball: self.defense_ball,
            probe: probe_config(self.defense_ball.epsilon),
            lambda_prime: self.lambda_prime,
            adaptive: self.adaptive,
        }
    }
}

/// Per-iteration GMSA diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GmsaLogRow {
    pub iteration: usize,
    pub err_transductive_rej: f64,
    pub rejection_rate: f64,
    pub fraction_clean: f64,
}

/// Result of a GMSA run: the strongest test batch found and the history that
/// produced it.
#[derive(Debug)]
pub struct GmsaOutcome {
    /// The batch maximizing the defender's transductive rejection error.
    pub adversarial: RealMatrix,
    /// Bitwise perturbed flags for [`GmsaOutcome::adversarial`].
    pub perturbed: Vec<bool>,
    /// Error achieved by the returned batch.
    pub err_max: f64,
    pub best_iteration: usize,
    /// Defender models in training order.
    pub models: Vec<Model>,
    pub log: Vec<GmsaLogRow>,
}

/// Writes the per-iteration GMSA log as CSV.
pub fn save_gmsa_log(path: &Path, rows: &[GmsaLogRow]) -> Result<()> {
    let mut out = String::from("iteration,err_transductive_rej,rejection_rate,fraction_clean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration, r.err_transductive_rej, r.rejection_rate, r.fraction_clean
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Greedy model space attack against a retraining selective classifier.
///
/// Each round trains a fresh defender on the current candidate batch, scores
/// the batch against that defender (keeping the batch with the highest error
/// seen so far), and then, except after the last round, re-perturbs every
/// point against the whole model history and keeps the perturbed point only
/// when it hurts the newest defender at least as much as the clean point.
///
/// With one iteration this scores the clean batch against one defender and
/// performs no perturbation. Checkpoints of every defender model are written
/// to `checkpoint_dir` when given.
pub fn gmsa_attack(
    learner: &dyn Learner,
    train: &Dataset,
    test: &Dataset,
    cfg: &GmsaConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<GmsaOutcome> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let loss = cfg.rejection_loss();
    let clean = &test.features;
    let mut current = clean.clone();
    let mut models: Vec<Model> = Vec::with_capacity(cfg.iterations);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, RealMatrix, usize)> = None;

    for i in 0..cfg.iterations {
        let model = learner
            .fit(train, &current, seed_derive(cfg.seed, "gmsa-fit", i as u64))
            .map_err(|e| Error::LearnerFailed {
                iteration: i,
                message: e.to_string(),
            })?;
        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join(format!("gmsa_model_{i}.tldr")))?;
        }
        models.push(model);
        let sc = make_selective(models[i].clone(), cfg.defense_ball);
        let flags = bitwise_perturbed(&current, clean);
        let decisions = sc.predict_batch(&current)?;
        let err = err_transductive_rej(&decisions, &test.labels, &flags);
        let (rej_adv, rej_clean) = rejection_rates(&decisions, &flags);
        let n_adv = flags.iter().filter(|&&f| f).count();
        let rejection_rate = if flags.is_empty() {
            0.0
        } else {
            (rej_adv * n_adv as f64 + rej_clean * (flags.len() - n_adv) as f64)
                / flags.len() as f64
        };
        log.push(GmsaLogRow {
            iteration: i,
            err_transductive_rej: err,
            rejection_rate,
            fraction_clean: 1.0 - n_adv as f64 / flags.len().max(1) as f64,
        });
        if best.as_ref().map_or(true, |(b, _, _)| err > *b) {
            best = Some((err, current.clone(), i));
        }

        if i + 1 == cfg.iterations {
            break;
        }
        // Re-perturb against the whole history, then per point keep the
        // perturbation only if it hurts the newest model at least as much as
        // submitting the clean point would.
        let history = &models;
        let rows: Vec<Result<Vec<f64>>> = par_map_indexed(clean.rows(), |j| {
            let x = clean.row(j);
            let y = test.labels[j];
            let (z, _) = crate::attack::pgd_maximize(
                x,
                &cfg.attack_ball,
                &cfg.attack,
                seed_derive(cfg.seed, "gmsa-perturb", (i * 1_000_000 + j) as u64),
                |p| ensemble_value_grad(history, cfg.mode, &loss, p, y),
            )?;
            let newest = history.last().expect("nonempty history");
            let sc = make_selective(newest.clone(), cfg.defense_ball);
            let err_pert = match sc.predict(&z)? {
                Decision::Class(c) if c != y => 1.0,
                _ => 0.0,
            };
            let err_clean = match sc.predict(x)? {
                Decision::Class(c) if c == y => 0.0,
                _ => 1.0,
            };
            if err_pert < err_clean {
                Ok(x.to_vec())
            } else {
                Ok(z)
            }
        });
        let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
        current = RealMatrix::from_rows(&rows)?;
    }

    let (err_max, adversarial, best_iteration) = best.expect("at least one iteration");
    let perturbed = bitwise_perturbed(&adversarial, clean);
    Ok(GmsaOutcome {
        adversarial,
        perturbed,
        err_max,
        best_iteration,
        models,
        log,
    })
}

/// Transfer attack parameters.
#[derive(Debug, Clone)]
pub struct TransferConfig {
    pub attack_ball: PerturbationSet,
    pub attack: PgdConfig,
    pub defense_ball: PerturbationSet,
    pub lambda_prime: f64,
    pub adaptive: bool,
    /// Also try the multitargeted attack as a fallback probe.
    pub multitargeted: bool,
    pub seed: u64,
}

impl TransferConfig {
    pub fn new(attack_ball: PerturbationSet, defense_ball: PerturbationSet, seed: u64) -> Self {
        TransferConfig {
            attack_ball,
            attack: PgdConfig::default(),
            defense_ball,
            lambda_prime: 1.0,
            adaptive: true,
            multitargeted: true,
            seed,
        }
    }
}

/// One-shot attack against a fixed surrogate's selective classifier.
///
/// Per point: PGD on the rejection-aware loss, then fallback probes (plain
/// cross-entropy PGD, and optionally the multitargeted attack); the first
/// candidate misclassified-without-rejection by the surrogate wins. When
/// every candidate fails and the surrogate already errs on the clean point,
/// the clean point itself is submitted — under transductive scoring an
/// unperturbed point errs on misclassification *or* rejection, so the clean
/// point is then the stronger submission.
pub fn transfer_attack(
    surrogate: &Model,
    test: &Dataset,
    cfg: &TransferConfig,
) -> Result<(RealMatrix, Vec<bool>)> {
    let loss = RejectionLoss {
        defense_ball: cfg.defense_ball,
        probe: probe_config(cfg.defense_ball.epsilon),
        lambda_prime: cfg.lambda_prime,
        adaptive: cfg.adaptive,
    };
    let sc = make_selective(surrogate.clone(), cfg.defense_ball);
    let rows: Vec<Result<Vec<f64>>> = par_map_indexed(test.len(), |j| {
        let x = test.features.row(j);
        let y = test.labels[j];
        let seed = seed_derive(cfg.seed, "transfer", j as u64);
        let mut candidates = vec![attack_point_rej(
            surrogate,
            x,
            y,
            &cfg.attack_ball,
            &cfg.attack,
            &loss,
            seed,
        )?];
        candidates.push(attack_point_ce(
            surrogate,
            x,
            y,
            &cfg.attack_ball,
            &cfg.attack,
            seed,
        )?);
        if cfg.multitargeted {
            candidates.push(attack_multitargeted(
                surrogate,
                x,
                y,
                &cfg.attack_ball,
                &cfg.defense_ball,
                &cfg.attack,
                &loss.probe,
                seed,
            )?);
        }
        for z in &candidates {
            if matches!(sc.predict(z)?, Decision::Class(c) if c != y) {
                return Ok(z.clone());
            }
        }
        if sc.predict(x)? != Decision::Class(y) {
            return Ok(x.to_vec());
        }
        Ok(candidates.swap_remove(0))
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    let adversarial = RealMatrix::from_rows(&rows)?;
    let perturbed = bitwise_perturbed(&adversarial, &test.features);
    Ok((adversarial, perturbed))
}
