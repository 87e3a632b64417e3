//! Defenses: adversarial training, transductive training on the (unlabeled,
//! possibly attacked) test batch, and the rejection transform that turns a
//! trained model into a selective classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::attack::{boundary_probe, loss_db, probe_config, PgdConfig};
use crate::data::{Dataset, PerturbationSet};
use crate::matrix::RealMatrix;
use crate::numcore::{AdamState, Layer, Model, ParamGrads};
use crate::parallel::par_map_indexed;
use crate::{seed_derive, Error, Result};

/// Shared training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Hidden layer widths; the full architecture is
    /// `[input, hidden..., classes]`.
    pub hidden: Vec<usize>,
    pub skip_connections: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// PGD used to craft training-time adversarial examples.
    pub attack: PgdConfig,
    /// Perturbation set the defense trains against.
    pub train_ball: PerturbationSet,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![32, 32],
            skip_connections: false,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            attack: PgdConfig::default(),
            train_ball: PerturbationSet::linf(0.3),
            seed: 0,
        }
    }
}

/// Parameters of the transductive objective.
#[derive(Debug, Clone, Copy)]
pub struct TldrConfig {
    /// Weight of the test-batch consistency term.
    pub lambda: f64,
    /// Epochs trained with the test term disabled; `None` means half the
    /// total epoch budget.
    pub warm_start_epochs: Option<usize>,
}

impl Default for TldrConfig {
    fn default() -> Self {
        TldrConfig {
            lambda: 0.176,
            warm_start_epochs: None,
        }
    }
}

impl TldrConfig {
    pub fn effective_warm_start(&self, epochs: usize) -> usize {
        self.warm_start_epochs.unwrap_or(epochs / 2)
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub clean_loss: f64,
    pub robust_loss: f64,
    pub transductive_loss: f64,
    pub lambda: f64,
}

/// Writes the per-epoch log as CSV.
pub fn save_training_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut out = String::from("epoch,clean_loss,robust_loss,transductive_loss,lambda\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.clean_loss, r.robust_loss, r.transductive_loss, r.lambda
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn zero_grads(model: &Model) -> ParamGrads {
    model
        .layers()
        .iter()
        .map(|l| Layer {
            weight: RealMatrix::zeros(l.weight.rows(), l.weight.cols()),
            bias: vec![0.0; l.bias.len()],
        })
        .collect()
}

fn add_grads(acc: &mut ParamGrads, g: &ParamGrads, scale: f64) {
    for (a, b) in acc.iter_mut().zip(g.iter()) {
        for (av, &bv) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
            *av += scale * bv;
        }
        for (av, &bv) in a.bias.iter_mut().zip(b.bias.iter()) {
            *av += scale * bv;
        }
    }
}

/// Crafts a cross-entropy PGD adversarial example for every row of `batch`,
/// in parallel. Deterministic: the per-point attacks consume no RNG unless
/// `cfg.random_start` is set, in which case each point gets its own derived
/// stream.
pub fn adv_batch_ce(
    model: &Model,
    batch: &RealMatrix,
    labels: &[usize],
    ball: &PerturbationSet,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<RealMatrix> {
    let rows: Vec<Result<Vec<f64>>> = par_map_indexed(batch.rows(), |i| {
        crate::attack::attack_point_ce(
            model,
            batch.row(i),
            labels[i],
            ball,
            cfg,
            seed_derive(seed, "adv-batch", i as u64),
        )
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    RealMatrix::from_rows(&rows)
}

fn batch_ce(model: &Model, batch: &RealMatrix, labels: &[usize]) -> Result<f64> {
    let probs = crate::numcore::softmax(&model.forward(batch)?);
    crate::numcore::cross_entropy(&probs, labels)
}

/// Adversarial training: each minibatch is replaced by its PGD adversarial
/// counterpart before a standard cross-entropy Adam step.
pub fn train_at(train: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<TrainLogRow>)> {
    train_impl(train, None, cfg, &TldrConfig { lambda: 0.0, warm_start_epochs: Some(0) }, false)
}

/// Transductive training: the adversarial-training objective on the labeled
/// train set, plus clean cross-entropy, plus a weighted consistency term on
/// the unlabeled test batch. The test term pushes the model to keep its own
/// current predictions (recomputed every minibatch) stable over the
/// perturbation ball; it is disabled during the warm-start epochs.
pub fn train_tldr(
    train: &Dataset,
    test_features: &RealMatrix,
    cfg: &TrainConfig,
    tldr: &TldrConfig,
) -> Result<(Model, Vec<TrainLogRow>)> {
    train_impl(train, Some(test_features), cfg, tldr, true)
}

fn train_impl(
    train: &Dataset,
    test_features: Option<&RealMatrix>,
    cfg: &TrainConfig,
    tldr: &TldrConfig,
    clean_term: bool,
) -> Result<(Model, Vec<TrainLogRow>)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let mut dims = Vec::with_capacity(cfg.hidden.len() + 2);
    dims.push(train.dim());
    dims.extend_from_slice(&cfg.hidden);
    dims.push(train.num_classes);
    let mut model = Model::random(&dims, cfg.skip_connections, seed_derive(cfg.seed, "init", 0))?;
    let mut adam = AdamState::new(&model, cfg.learning_rate);
    let warm = tldr.effective_warm_start(cfg.epochs);
    let mut log = Vec::with_capacity(cfg.epochs);

    let n = train.len();
    let m = test_features.map_or(0, |t| t.rows());

    for epoch in 0..cfg.epochs {
        let lambda_eff = if epoch < warm { 0.0 } else { tldr.lambda };
        let use_test = lambda_eff != 0.0 && m > 0;

        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed_derive(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);

        // The test batch cycles through its own shuffled order; the stream is
        // only created when the test term is active, so warm-start epochs are
        // bit-identical to training without a test set.
        let test_order: Vec<usize> = if use_test {
            let mut t: Vec<usize> = (0..m).collect();
            let mut trng =
                ChaCha8Rng::seed_from_u64(seed_derive(cfg.seed, "test-shuffle", epoch as u64));
            t.shuffle(&mut trng);
            t
        } else {
            Vec::new()
        };
        let mut test_cursor = 0usize;

        let mut sums = (0.0, 0.0, 0.0); // clean, robust, transductive
        let mut batches = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.features.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let adv = adv_batch_ce(
                &model,
                &batch,
                &labels,
                &cfg.train_ball,
                &cfg.attack,
                seed_derive(cfg.seed, "train-attack", (epoch * 100_000 + b) as u64),
            )?;
            let mut grads = zero_grads(&model);
            let (robust_loss, g_adv) = model.grad_params_ce(&adv, &labels)?;
            add_grads(&mut grads, &g_adv, 1.0);
            let clean_loss = if clean_term {
                let (cl, g_clean) = model.grad_params_ce(&batch, &labels)?;
                add_grads(&mut grads, &g_clean, 1.0);
                cl
            } else {
                batch_ce(&model, &batch, &labels)?
            };
            let mut trans_loss = 0.0;
            if use_test {
                let test = test_features.expect("test set present when in use");
                let take = chunk.len().min(m);
                let idx: Vec<usize> = (0..take)
                    .map(|k| test_order[(test_cursor + k) % m])
                    .collect();
                test_cursor = (test_cursor + take) % m;
                let tb = test.select_rows(&idx);
                // Pseudo-labels from the current model, recomputed per batch.
                let pseudo = model.predict_batch(&tb)?;
                let tadv = adv_batch_ce(
                    &model,
                    &tb,
                    &pseudo,
                    &cfg.train_ball,
                    &cfg.attack,
                    seed_derive(cfg.seed, "test-attack", (epoch * 100_000 + b) as u64),
                )?;
                let (tl, g_test) = model.grad_params_ce(&tadv, &pseudo)?;
                add_grads(&mut grads, &g_test, lambda_eff);
                trans_loss = tl;
            }
            adam.step(&mut model, &grads);
            sums.0 += clean_loss;
            sums.1 += robust_loss;
            sums.2 += trans_loss;
            batches += 1.0;
        }
        log.push(TrainLogRow {
            epoch,
            clean_loss: sums.0 / batches,
            robust_loss: sums.1 / batches,
            transductive_loss: sums.2 / batches,
            lambda: lambda_eff,
        });
    }
    Ok((model, log))
}

/// Outcome of a selective classifier on one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Class(usize),
    Reject,
}

impl Decision {
    pub fn is_reject(self) -> bool {
        self == Decision::Reject
    }
}

/// How the rejection transform searches its ball for a boundary crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeStrategy {
    /// Gradient probe (the practical default).
    Pgd(PgdConfig),
    /// Exhaustive grid with the given number of points (1-D inputs only);
    /// used as an oracle in tests.
    Grid(usize),
}

/// A classifier that may abstain: it predicts with the base model, probes the
/// rejection ball for a point the base model classifies differently, and
/// rejects when one is found.
#[derive(Debug, Clone)]
pub struct SelectiveClassifier {
    pub base: Model,
    pub defense_ball: PerturbationSet,
    pub probe: ProbeStrategy,
}

/// Wraps a trained model with the rejection transform at the given radius
/// (conventionally a fraction of the attack budget).
pub fn make_selective(base: Model, defense_ball: PerturbationSet) -> SelectiveClassifier {
    let probe = ProbeStrategy::Pgd(probe_config(defense_ball.epsilon));
    SelectiveClassifier {
        base,
        defense_ball,
        probe,
    }
}

impl SelectiveClassifier {
    pub fn predict(&self, x: &[f64]) -> Result<Decision> {
        let y = self.base.predict(x)?;
        let probe = match self.probe {
            ProbeStrategy::Pgd(cfg) => boundary_probe(&self.base, x, &self.defense_ball, &cfg)?,
            ProbeStrategy::Grid(points) => {
                if x.len() != 1 {
                    return Err(Error::InvalidArgument(
                        "grid probe supports 1-D inputs only".into(),
                    ));
                }
                // Like the gradient probe, prefer grid points that flip the
                // prediction; among equals keep the larger surrogate value.
                let mut best = ball_grid_point(x[0], &self.defense_ball, points, 0);
                let mut best_v = loss_db(&self.base, &[best])?.0;
                let mut best_flipped = self.base.predict(&[best])? != y;
                for i in 1..points {
                    let p = ball_grid_point(x[0], &self.defense_ball, points, i);
                    let v = loss_db(&self.base, &[p])?.0;
                    let flipped = self.base.predict(&[p])? != y;
                    if (flipped && !best_flipped) || (flipped == best_flipped && v > best_v) {
                        best_v = v;
                        best = p;
                        best_flipped = flipped;
                    }
                }
                vec![best]
            }
        };
        if self.base.predict(&probe)? != y {
            Ok(Decision::Reject)
        } else {
            Ok(Decision::Class(y))
        }
    }

    /// Per-row decisions for a batch, computed in parallel.
    pub fn predict_batch(&self, batch: &RealMatrix) -> Result<Vec<Decision>> {
        par_map_indexed(batch.rows(), |i| self.predict(batch.row(i)))
            .into_iter()
            .collect()
    }
}

fn ball_grid_point(center: f64, ball: &PerturbationSet, points: usize, i: usize) -> f64 {
    let lo = center - ball.epsilon;
    let hi = center + ball.epsilon;
    let p = if points <= 1 {
        center
    } else {
        lo + (hi - lo) * i as f64 / (points - 1) as f64
    };
    ball.project(&[p], &[center])[0]
}
