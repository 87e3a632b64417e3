//! Brute-force verification of the realizable-case theory on 1-D threshold
//! classes, plus closed-form sample-complexity calculators.
//!
//! Everything here is exact by enumeration: the hypothesis family is a finite
//! grid of sign thresholds on the line, perturbations are closed intervals,
//! and every "for all perturbations" quantifier either collapses to interval
//! arithmetic (thresholds make that exact) or runs over a dense grid with a
//! one-grid-cell tolerance at interval endpoints. All logarithms in the bound
//! calculators are base 2.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::defense::Decision;
use crate::eval::err_transductive_rej;
use crate::parallel::par_map_indexed;
use crate::{seed_derive, Error, Result};

/// A sign threshold on the line: predicts `sign` for `x > threshold` and
/// `-sign` otherwise. Labels are in {-1, +1}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdHypothesis {
    pub threshold: f64,
    pub sign: i8,
}

impl ThresholdHypothesis {
    pub fn predict(&self, x: f64) -> i8 {
        if x > self.threshold {
            self.sign
        } else {
            -self.sign
        }
    }

    /// The prediction as a class index: -1 maps to 0, +1 maps to 1.
    pub fn class(&self, x: f64) -> usize {
        usize::from(self.predict(x) > 0)
    }

    /// True iff the prediction equals `y` on the whole closed interval
    /// `[z - eps, z + eps]`. Exact interval arithmetic.
    pub fn robustly_correct(&self, z: f64, y: i8, eps: f64) -> bool {
        if y == self.sign {
            z - eps > self.threshold
        } else {
            z + eps <= self.threshold
        }
    }

    /// True iff the prediction is constant on the closed interval
    /// `[z - eps, z + eps]` (the threshold lies outside `[z-eps, z+eps)`).
    pub fn constant_on(&self, z: f64, eps: f64) -> bool {
        self.threshold < z - eps || self.threshold >= z + eps
    }
}

/// A finite family of sign thresholds on a sorted grid.
#[derive(Debug, Clone)]
pub struct ThresholdClass {
    pub thresholds: Vec<f64>,
    pub both_signs: bool,
}

impl ThresholdClass {
    /// An evenly spaced grid of `count` thresholds on `[lo, hi]`.
    pub fn grid(lo: f64, hi: f64, count: usize, both_signs: bool) -> Result<Self> {
        if count < 2 || !(lo < hi) {
            return Err(Error::InvalidArgument(
                "threshold grid needs lo < hi and count >= 2".into(),
            ));
        }
        let thresholds = (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect();
        Ok(ThresholdClass {
            thresholds,
            both_signs,
        })
    }

    pub fn cell(&self) -> f64 {
        self.thresholds
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    pub fn hypotheses(&self) -> Vec<ThresholdHypothesis> {
        let mut out: Vec<ThresholdHypothesis> = self
            .thresholds
            .iter()
            .map(|&t| ThresholdHypothesis { threshold: t, sign: 1 })
            .collect();
        if self.both_signs {
            out.extend(self.thresholds.iter().map(|&t| ThresholdHypothesis {
                threshold: t,
                sign: -1,
            }));
        }
        out
    }
}

/// A closed interval perturbation of radius `epsilon`; symmetric, so its
/// inverse is itself and `U^k` has radius `k * epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalPerturbation {
    pub epsilon: f64,
}

impl IntervalPerturbation {
    pub fn new(epsilon: f64) -> Self {
        IntervalPerturbation { epsilon }
    }

    pub fn power(&self, k: f64) -> IntervalPerturbation {
        IntervalPerturbation {
            epsilon: self.epsilon * k,
        }
    }

    pub fn interval(&self, center: f64) -> (f64, f64) {
        (center - self.epsilon, center + self.epsilon)
    }
}

/// The set of hypotheses that are robustly correct on every train interval
/// and prediction-constant on every test interval, both at the radius of `u`.
/// Exact by enumeration.
pub fn delta_set(
    hypotheses: &[ThresholdHypothesis],
    u: &IntervalPerturbation,
    train_z: &[f64],
    train_y: &[i8],
    test_z: &[f64],
) -> Vec<ThresholdHypothesis> {
    delta_mask(hypotheses, u, train_z, train_y, test_z)
        .into_iter()
        .zip(hypotheses.iter())
        .filter_map(|(keep, h)| keep.then_some(*h))
        .collect()
}

fn delta_mask(
    hypotheses: &[ThresholdHypothesis],
    u: &IntervalPerturbation,
    train_z: &[f64],
    train_y: &[i8],
    test_z: &[f64],
) -> Vec<bool> {
    debug_assert_eq!(train_z.len(), train_y.len());
    hypotheses
        .iter()
        .map(|h| {
            train_z
                .iter()
                .zip(train_y.iter())
                .all(|(&z, &y)| h.robustly_correct(z, y, u.epsilon))
                && test_z.iter().all(|&z| h.constant_on(z, u.epsilon))
        })
        .collect()
}

/// A threshold hypothesis with the rejection transform applied: abstains
/// whenever the input is within `radius` of the threshold (closed ball).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectiveThreshold {
    pub h: ThresholdHypothesis,
    pub radius: f64,
}

impl SelectiveThreshold {
    pub fn decide(&self, x: f64) -> Decision {
        if (x - self.h.threshold).abs() <= self.radius {
            Decision::Reject
        } else {
            Decision::Class(self.h.class(x))
        }
    }
}

/// The rejection transform in closed form: reject iff the input is within
/// the radius of `u` from the threshold.
pub fn f_transform_exact(h: ThresholdHypothesis, u: &IntervalPerturbation) -> SelectiveThreshold {
    SelectiveThreshold {
        h,
        radius: u.epsilon,
    }
}

/// The set of possible intermediate perturbations between `x` and `z`:
/// `{x}` when `x == z`, otherwise the intersection `U1(x) ∩ U2^{-1}(z)`
/// (symmetric intervals, so the inverse is the same interval). `None` when
/// the intersection is empty.
pub fn ip_set(
    u1: &IntervalPerturbation,
    u2: &IntervalPerturbation,
    x: f64,
    z: f64,
) -> Option<(f64, f64)> {
    if x == z {
        return Some((x, x));
    }
    let (a_lo, a_hi) = u1.interval(x);
    let (b_lo, b_hi) = u2.interval(z);
    let lo = a_lo.max(b_lo);
    let hi = a_hi.min(b_hi);
    (lo <= hi).then_some((lo, hi))
}

/// Robust-error bound of the transductive rejection guarantee:
/// `(vc * log2(2n) + log2(1/delta)) / n`.
pub fn bound_realizable(n: usize, delta: f64, vc: usize) -> f64 {
    (vc as f64 * (2.0 * n as f64).log2() + (1.0 / delta).log2()) / n as f64
}

/// Minimal sample size for the realizable bound to reach `eps`:
/// `[2ε(C+D) + 1 + sqrt((2ε(C+D)+1)^2 - 4(C+D)^2 ε^2)] / (2ε^2)` with
/// `D = log2(1/delta)`.
pub fn bound_realizable_n(c_rdim: f64, delta: f64, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    if c_rdim < 0.0 {
        return Err(Error::InvalidArgument("c_rdim must be >= 0".into()));
    }
    let d = (1.0 / delta).log2();
    let cd = c_rdim + d;
    let b = 2.0 * eps * cd + 1.0;
    Ok((b + (b * b - 4.0 * cd * cd * eps * eps).sqrt()) / (2.0 * eps * eps))
}

/// Error guarantee with `n` train and `m` test points:
/// `(rdim * log2(n+m) + log2(1/delta)) / (m * log2(1 + m/n))`. Reduces to the
/// balanced realizable form when `n == m`. Reported as a value only; no
/// optimality in the n/m split is asserted.
pub fn bound_unbalanced(n: usize, m: usize, rdim: usize, delta: f64) -> f64 {
    (rdim as f64 * ((n + m) as f64).log2() + (1.0 / delta).log2())
        / (m as f64 * (1.0 + m as f64 / n as f64).log2())
}

/// Agnostic-case error scale for rejection-only learning:
/// `sqrt((2^vc_t + log2(1/delta)) / n)`, with the order constant taken as 1.
pub fn bound_agnostic_eps(vc_t: u32, delta: f64, n: usize) -> f64 {
    ((2f64.powi(vc_t as i32) + (1.0 / delta).log2()) / n as f64).sqrt()
}

/// Monte Carlo check of the transductive rejection guarantee.
#[derive(Debug, Clone)]
pub struct RealizableCheck {
    /// Train size; the test set has the same size.
    pub n: usize,
    pub delta: f64,
    /// Adversarial budget. The sampling clusters sit at ±0.5 with half-width
    /// 0.2, so the margin assumption holds with slack for budgets up to 0.1.
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for RealizableCheck {
    fn default() -> Self {
        RealizableCheck {
            n: 200,
            delta: 0.05,
            epsilon: 0.1,
            trials: 200,
            seed: 0,
        }
    }
}

/// One Monte Carlo trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub bound: f64,
    /// Worst error over the returned hypothesis set (0 when it is empty).
    pub achieved_err: f64,
    /// The learner found no hypothesis meeting its constraints and abstained.
    pub delta_empty: bool,
    pub pass: bool,
    /// Whether every returned hypothesis satisfied the error-domination step
    /// (rejection error on the perturbed batch bounded by the plain error at
    /// the intermediate perturbations).
    pub domination_ok: bool,
}

const CLUSTER_CENTER: f64 = 0.5;
const CLUSTER_HALF_WIDTH: f64 = 0.2;

fn sample_cluster_point(rng: &mut ChaCha8Rng) -> (f64, i8) {
    let y: i8 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let c = y as f64 * CLUSTER_CENTER;
    let x = c + rng.gen_range(-CLUSTER_HALF_WIDTH..=CLUSTER_HALF_WIDTH);
    (x, y)
}

/// Membership in the learner's constraint set for one received test point:
/// the prediction must be margin-constant (radius eps/3) at every
/// perturbation within 2*eps/3 of the point. For thresholds this collapses
/// exactly to keeping the threshold outside `[z - eps, z + eps)`; the grid
/// form is exercised in tests.
fn margin_constant(h: &ThresholdHypothesis, z: f64, eps: f64) -> bool {
    h.constant_on(z, eps)
}

/// Runs the Monte Carlo verification. Each trial samples fresh train/test
/// sets from two separated clusters, lets a grid adversary perturb every test
/// point to its error-maximizing position within the budget, builds the
/// constraint set (train-robust at a third of the budget, margin-constant
/// around each received point), applies the rejection transform at a third
/// of the budget, and records the worst transductive rejection error over
/// the set against the theoretical bound.
pub fn check_realizable_theorem(cfg: &RealizableCheck) -> Result<Vec<TrialOutcome>> {
    if cfg.n == 0 || cfg.trials == 0 || !(0.0 < cfg.delta && cfg.delta < 1.0) || cfg.epsilon < 0.0 {
        return Err(Error::InvalidArgument(
            "need n >= 1, trials >= 1, delta in (0,1), epsilon >= 0".into(),
        ));
    }
    let class = ThresholdClass::grid(-1.0, 1.0, 161, false)?;
    let hyps = class.hypotheses();
    let bound = bound_realizable(cfg.n, cfg.delta, 1);
    let eps = cfg.epsilon;
    let third = eps / 3.0;

    let outcomes = par_map_indexed(cfg.trials, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_derive(cfg.seed, "trial", trial as u64));
        let (train_x, train_y): (Vec<f64>, Vec<i8>) =
            (0..cfg.n).map(|_| sample_cluster_point(&mut rng)).unzip();
        let (test_x, test_y): (Vec<f64>, Vec<i8>) =
            (0..cfg.n).map(|_| sample_cluster_point(&mut rng)).unzip();

        // Hypotheses surviving the train constraint; candidates for both the
        // adversary's scoring and the final set.
        let feasible: Vec<&ThresholdHypothesis> = hyps
            .iter()
            .filter(|h| {
                train_x
                    .iter()
                    .zip(train_y.iter())
                    .all(|(&x, &y)| h.robustly_correct(x, y, third))
            })
            .collect();

        // Grid adversary: per point, the candidate within the budget on
        // which the most train-feasible selective hypotheses err.
        let test_z: Vec<f64> = test_x
            .iter()
            .zip(test_y.iter())
            .map(|(&x, &y)| {
                let mut best = x;
                let mut best_score = usize::MIN;
                for k in 0..=40 {
                    let z = x + eps * (k as f64 - 20.0) / 20.0;
                    let perturbed = z.to_bits() != x.to_bits();
                    let score = feasible
                        .iter()
                        .filter(|h| {
                            let d = f_transform_exact(***h, &IntervalPerturbation::new(third))
                                .decide(z);
                            trial_point_err(d, y, perturbed)
                        })
                        .count();
                    if score > best_score {
                        best_score = score;
                        best = z;
                    }
                }
                best
            })
            .collect();

        let delta: Vec<&ThresholdHypothesis> = feasible
            .iter()
            .filter(|h| test_z.iter().all(|&z| margin_constant(h, z, eps)))
            .copied()
            .collect();

        if delta.is_empty() {
            return TrialOutcome {
                trial,
                bound,
                achieved_err: 0.0,
                delta_empty: true,
                pass: true,
                domination_ok: true,
            };
        }

        let labels: Vec<usize> = test_y.iter().map(|&y| usize::from(y > 0)).collect();
        let perturbed: Vec<bool> = test_z
            .iter()
            .zip(test_x.iter())
            .map(|(z, x)| z.to_bits() != x.to_bits())
            .collect();
        // Intermediate perturbations a third of the way from clean to
        // received, used for the error-domination check.
        let intermediate: Vec<f64> = test_z
            .iter()
            .zip(test_x.iter())
            .map(|(&z, &x)| x + (z - x) / 3.0)
            .collect();

        let mut achieved = 0.0f64;
        let mut domination_ok = true;
        for h in &delta {
            let sc = f_transform_exact(**h, &IntervalPerturbation::new(third));
            let decisions: Vec<Decision> = test_z.iter().map(|&z| sc.decide(z)).collect();
            let err = err_transductive_rej(&decisions, &labels, &perturbed);
            let plain_err = intermediate
                .iter()
                .zip(test_y.iter())
                .filter(|(&q, &y)| h.predict(q) != y)
                .count() as f64
                / cfg.n as f64;
            if err > plain_err + 1e-12 {
                domination_ok = false;
            }
            achieved = achieved.max(err);
        }
        TrialOutcome {
            trial,
            bound,
            achieved_err: achieved,
            delta_empty: false,
            pass: achieved <= bound + 1e-12,
            domination_ok,
        }
    });
    Ok(outcomes)
}

fn trial_point_err(d: Decision, y: i8, perturbed: bool) -> bool {
    let correct = d == Decision::Class(usize::from(y > 0));
    if perturbed {
        !correct && d != Decision::Reject
    } else {
        !correct
    }
}

/// Fraction of non-abstaining trials whose achieved error exceeds the bound.
pub fn failure_fraction(outcomes: &[TrialOutcome]) -> f64 {
    let scored: Vec<&TrialOutcome> = outcomes.iter().filter(|o| !o.delta_empty).collect();
    if scored.is_empty() {
        return 0.0;
    }
    scored.iter().filter(|o| !o.pass).count() as f64 / scored.len() as f64
}

/// Fraction of trials on which the learner abstained.
pub fn abstention_fraction(outcomes: &[TrialOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.delta_empty).count() as f64 / outcomes.len() as f64
}

/// Writes the per-trial results as CSV.
pub fn save_trials_csv(path: &Path, outcomes: &[TrialOutcome]) -> Result<()> {
    let mut out = String::from("trial,bound,achieved_err,delta_empty,pass\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            o.trial,
            o.bound,
            o.achieved_err,
            o.delta_empty as u8,
            o.pass as u8
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One randomized instance of the rejection-set identity check.
#[derive(Debug, Clone)]
pub struct DeltaLemmaInstance {
    pub train_z: Vec<f64>,
    pub train_y: Vec<i8>,
    pub test_z: Vec<f64>,
}

impl DeltaLemmaInstance {
    /// Samples 1-3 train and 1-3 test points uniformly on [-1, 1] with
    /// random labels.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k_train = rng.gen_range(1..=3);
        let k_test = rng.gen_range(1..=3);
        let train_z: Vec<f64> = (0..k_train).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let train_y: Vec<i8> = (0..k_train)
            .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
            .collect();
        let test_z: Vec<f64> = (0..k_test).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DeltaLemmaInstance {
            train_z,
            train_y,
            test_z,
        }
    }
}

/// Checks, instance by instance, that intersecting the constraint set over a
/// dense grid of double-radius re-perturbations equals the constraint set at
/// triple radius. Set equality is up to one threshold-grid cell at interval
/// endpoints. Grid step is `epsilon / 100`.
pub fn check_delta_lemma(
    class: &ThresholdClass,
    u: &IntervalPerturbation,
    instances: &[DeltaLemmaInstance],
) -> Vec<bool> {
    let hyps = class.hypotheses();
    let eps = u.epsilon;
    instances
        .iter()
        .map(|inst| {
            let rej_mask: Vec<bool> = hyps
                .iter()
                .map(|h| {
                    inst.train_z
                        .iter()
                        .zip(inst.train_y.iter())
                        .all(|(&z, &y)| {
                            grid_points(z, 2.0 * eps, eps / 100.0)
                                .all(|zp| h.robustly_correct(zp, y, eps))
                        })
                        && inst.test_z.iter().all(|&z| {
                            grid_points(z, 2.0 * eps, eps / 100.0)
                                .all(|zp| h.constant_on(zp, eps))
                        })
                })
                .collect();
            let triple_mask = delta_mask(
                &hyps,
                &u.power(3.0),
                &inst.train_z,
                &inst.train_y,
                &inst.test_z,
            );
            masks_equal_with_boundary_slack(&hyps, &rej_mask, &triple_mask)
        })
        .collect()
}

/// Dense symmetric grid over `[center - radius, center + radius]` with the
/// given step (always includes both endpoints; a single point at radius 0).
fn grid_points(center: f64, radius: f64, step: f64) -> impl Iterator<Item = f64> {
    let count = if radius <= 0.0 || step <= 0.0 {
        0
    } else {
        (2.0 * radius / step).ceil() as usize
    };
    (0..=count).map(move |i| {
        if count == 0 {
            center
        } else {
            center - radius + 2.0 * radius * i as f64 / count as f64
        }
    })
}

/// Mask equality tolerating disagreements only at membership boundaries:
/// a disagreeing hypothesis is excused when an adjacent threshold (same
/// sign) changes membership in either mask.
fn masks_equal_with_boundary_slack(
    hyps: &[ThresholdHypothesis],
    a: &[bool],
    b: &[bool],
) -> bool {
    for i in 0..hyps.len() {
        if a[i] == b[i] {
            continue;
        }
        let at_boundary = [i.wrapping_sub(1), i + 1].iter().any(|&j| {
            hyps.get(j).map_or(false, |h| {
                h.sign == hyps[i].sign && (a.get(j) != Some(&a[i]) || b.get(j) != Some(&b[i]))
            })
        });
        if !at_boundary {
            return false;
        }
    }
    true
}

/// An explicit hypothesis family over a finite domain. Values are +1/-1 for
/// the two classes and 0 for abstention.
#[derive(Debug, Clone)]
pub struct FiniteHypothesisSet {
    /// One row per hypothesis, one column per domain point.
    pub labels: Vec<Vec<i8>>,
}

impl FiniteHypothesisSet {
    pub fn domain_size(&self) -> usize {
        self.labels.first().map_or(0, |r| r.len())
    }

    /// VC dimension by exhaustive shattering. A subset is shattered when
    /// every ±1 pattern on it is realized exactly (abstention realizes
    /// nothing). The search caps subset size at log2 of the family size,
    /// which no finite family can exceed.
    pub fn vc_dimension(&self) -> Result<usize> {
        let d = self.domain_size();
        if d > 20 {
            return Err(Error::InvalidArgument(format!(
                "domain of {d} points exceeds the exhaustive limit of 20"
            )));
        }
        if self.labels.is_empty() {
            return Ok(0);
        }
        let cap = (usize::BITS - 1 - self.labels.len().leading_zeros()) as usize; // floor(log2 |H|)
        let cap = cap.min(d);
        for k in (1..=cap).rev() {
            if self.some_subset_shattered(k) {
                return Ok(k);
            }
        }
        Ok(0)
    }

    fn some_subset_shattered(&self, k: usize) -> bool {
        let d = self.domain_size();
        let mut subset: Vec<usize> = (0..k).collect();
        loop {
            if self.shatters(&subset) {
                return true;
            }
            // Next k-combination of 0..d in lexicographic order.
            let mut i = k;
            loop {
                if i == 0 {
                    return false;
                }
                i -= 1;
                if subset[i] != i + d - k {
                    break;
                }
                if i == 0 {
                    return false;
                }
            }
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
        }
    }

    fn shatters(&self, subset: &[usize]) -> bool {
        let k = subset.len();
        let mut seen = vec![false; 1usize << k];
        let mut count = 0;
        for row in &self.labels {
            let mut sig = 0usize;
            let mut valid = true;
            for (bit, &j) in subset.iter().enumerate() {
                match row[j] {
                    1 => sig |= 1 << bit,
                    -1 => {}
                    _ => {
                        valid = false;
                        break;
                    }
                }
            }
            if valid && !seen[sig] {
                seen[sig] = true;
                count += 1;
                if count == 1usize << k {
                    return true;
                }
            }
        }
        false
    }
}

/// Transforms a selective family into the induced robust-loss family over
/// point/perturbation/label triples: the transformed value is +1 (an error)
/// when the clean prediction misses the label or the perturbed prediction is
/// a wrong class without abstention, else -1.
pub fn transform_rejection_loss(
    selective: &FiniteHypothesisSet,
    triples: &[(usize, usize, i8)],
) -> FiniteHypothesisSet {
    let labels = selective
        .labels
        .iter()
        .map(|row| {
            triples
                .iter()
                .map(|&(x, xp, y)| {
                    let clean_bad = row[x] != y;
                    let pert_bad = row[xp] != y && row[xp] != 0;
                    if clean_bad || pert_bad {
                        1
                    } else {
                        -1
                    }
                })
                .collect()
        })
        .collect();
    FiniteHypothesisSet { labels }
}
