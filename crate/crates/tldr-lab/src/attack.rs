//! Gradient-based attacks: PGD, the decision-boundary surrogate loss, the
//! rejection-aware loss, and the multitargeted attack.
//!
//! All attacks maximize an objective over a closed l∞ ball via sign-gradient
//! ascent with per-step projection, and return the best iterate seen (the
//! start point is evaluated first, so an attack can never be worse than no
//! attack under its own objective).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PerturbationSet;
use crate::numcore::{argmax, softmax, Model};
use crate::{Result};

/// Sign-gradient ascent parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Start from a uniform point in the ball instead of the center. Off by
    /// default so attacks consume no RNG and runs are reproducible without
    /// extra seed plumbing.
    pub random_start: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            steps: 20,
            step_size: 0.02,
            random_start: false,
        }
    }
}

/// The boundary-probe search inside the rejection radius: 10 sign steps of
/// size 0.15 x radius.
pub fn probe_config(epsilon_defense: f64) -> PgdConfig {
    PgdConfig {
        steps: 10,
        step_size: 0.15 * epsilon_defense,
        random_start: false,
    }
}

/// Which loss a gradient attack climbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackLoss {
    /// Plain cross-entropy against the true label.
    CrossEntropy,
    /// Cross-entropy plus a penalty for staying near the decision boundary,
    /// targeting classifiers that reject boundary-adjacent inputs.
    Rejection,
    /// Per-target optimization over every wrong class, keeping the best.
    MultiTargeted,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Maximizes `objective` over the ball around `center` by projected
/// sign-gradient ascent. Returns the best iterate and its objective value.
///
/// `steps = 0` returns the start point (after projection). The start point is
/// `center` unless `random_start` is set, in which case it is uniform in the
/// ball, drawn from a stream seeded by `seed`.
pub fn pgd_maximize<F>(
    center: &[f64],
    ball: &PerturbationSet,
    cfg: &PgdConfig,
    seed: u64,
    mut objective: F,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drawn: Vec<f64> = center
            .iter()
            .map(|&c| rng.gen_range(c - ball.epsilon..=c + ball.epsilon))
            .collect();
        ball.project(&drawn, center)
    } else {
        ball.project(center, center)
    };
    let (v0, mut grad) = objective(&x)?;
    let mut best = x.clone();
    let mut best_value = v0;
    for _ in 0..cfg.steps {
        for (xi, g) in x.iter_mut().zip(grad.iter()) {
            *xi += cfg.step_size * sign(*g);
        }
        x = ball.project(&x, center);
        let (v, g) = objective(&x)?;
        if v > best_value {
            best_value = v;
            best = x.clone();
        }
        grad = g;
    }
    Ok((best, best_value))
}

/// Boundary-distance surrogate: second-largest softmax probability minus the
/// largest, in [-1, 0]. Zero means the point sits on the decision boundary.
///
/// Returns the value and its gradient w.r.t. the input.
pub fn loss_db(model: &Model, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cache = model.forward_with_cache(&crate::RealMatrix::row_vector(x))?;
    let probs = softmax(cache.logits());
    let p = probs.row(0);
    let a = argmax(p);
    // Second-largest: argmax with `a` masked out (lowest index on ties).
    let mut b = usize::from(a == 0);
    for (i, &v) in p.iter().enumerate() {
        if i != a && v > p[b] {
            b = i;
        }
    }
    let value = p[b] - p[a];
    // d(p_b - p_a)/dlogit_k = p_b (δ_bk - p_k) - p_a (δ_ak - p_k).
    let mut dlogits = crate::RealMatrix::zeros(1, p.len());
    for (k, d) in dlogits.row_mut(0).iter_mut().enumerate() {
        let db = if k == b { 1.0 } else { 0.0 };
        let da = if k == a { 1.0 } else { 0.0 };
        *d = p[b] * (db - p[k]) - p[a] * (da - p[k]);
    }
    let (gin, _) = model.backward(&cache, &dlogits);
    Ok((value, gin.row(0).to_vec()))
}

/// Searches the rejection ball around `x` for a point witnessing a prediction
/// flip, ascending [`loss_db`].
///
/// The boundary surrogate is symmetric around the decision boundary, so plain
/// PGD on it may settle on the same side as `x` even when the ball crosses
/// the boundary; since the rejection rule only looks at whether the probe's
/// prediction differs, visited points that flip the prediction take priority
/// over unflipped points with a larger surrogate value.
pub fn boundary_probe(
    model: &Model,
    x: &[f64],
    defense_ball: &PerturbationSet,
    cfg: &PgdConfig,
) -> Result<Vec<f64>> {
    let base = model.predict(x)?;
    let mut cur = x.to_vec();
    let mut best = x.to_vec();
    let (mut best_v, _) = loss_db(model, x)?;
    let mut best_flipped = false;
    for _ in 0..cfg.steps {
        let (_, g) = loss_db(model, &cur)?;
        for (c, gi) in cur.iter_mut().zip(g.iter()) {
            *c += cfg.step_size * sign(*gi);
        }
        cur = defense_ball.project(&cur, x);
        let (v, _) = loss_db(model, &cur)?;
        let flipped = model.predict(&cur)? != base;
        if (flipped && !best_flipped) || (flipped == best_flipped && v > best_v) {
            best_v = v;
            best = cur.clone();
            best_flipped = flipped;
        }
    }
    Ok(best)
}

/// Parameters of the rejection-aware loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionLoss {
    /// Rejection ball searched by the boundary probe.
    pub defense_ball: PerturbationSet,
    /// Probe search parameters (see [`probe_config`]).
    pub probe: PgdConfig,
    /// Weight of the boundary-distance penalty.
    pub lambda_prime: f64,
    /// Drop the penalty whenever the point is already misclassified is the
    /// attacker's goal; the adaptive rule instead drops it when the point is
    /// still *correctly* classified, focusing the budget on crossing the
    /// boundary first.
    pub adaptive: bool,
}

impl RejectionLoss {
    pub fn new(defense_ball: PerturbationSet, lambda_prime: f64, adaptive: bool) -> Self {
        RejectionLoss {
            defense_ball,
            probe: probe_config(defense_ball.epsilon),
            lambda_prime,
            adaptive,
        }
    }

    /// Cross-entropy plus `lambda_prime` times the l∞ distance from `z` to its
    /// boundary probe. Larger values mean `z` is both misclassified and far
    /// from the boundary, i.e. likely to also evade rejection.
    ///
    /// The probe is treated as a constant under differentiation; the distance
    /// term contributes `lambda_prime * sign` on the single coordinate
    /// attaining the l∞ distance. With an effective weight of zero the result
    /// is bitwise identical to plain cross-entropy (no probe is computed).
    pub fn value_grad(&self, model: &Model, z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        let lambda_eff = if self.adaptive && model.predict(z)? == y {
            0.0
        } else {
            self.lambda_prime
        };
        if lambda_eff == 0.0 {
            return model.ce_value_grad_input(z, y);
        }
        let (ce, mut grad) = model.ce_value_grad_input(z, y)?;
        let probe = boundary_probe(model, z, &self.defense_ball, &self.probe)?;
        // l∞ distance and its attaining coordinate (lowest index on ties).
        let mut dist = 0.0;
        let mut at = 0;
        for (i, (&zi, &pi)) in z.iter().zip(probe.iter()).enumerate() {
            let d = (zi - pi).abs();
            if d > dist {
                dist = d;
                at = i;
            }
        }
        if dist > 0.0 {
            grad[at] += lambda_eff * sign(z[at] - probe[at]);
        }
        Ok((ce + lambda_eff * dist, grad))
    }
}

/// Attacks a single point of an inductive selective classifier: PGD on the
/// rejection-aware loss inside the attack ball.
pub fn attack_point_rej(
    model: &Model,
    x: &[f64],
    y: usize,
    attack_ball: &PerturbationSet,
    cfg: &PgdConfig,
    loss: &RejectionLoss,
    seed: u64,
) -> Result<Vec<f64>> {
    let (z, _) = pgd_maximize(x, attack_ball, cfg, seed, |p| loss.value_grad(model, p, y))?;
    Ok(z)
}

/// Attacks a single point with plain cross-entropy PGD.
pub fn attack_point_ce(
    model: &Model,
    x: &[f64],
    y: usize,
    attack_ball: &PerturbationSet,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let (z, _) = pgd_maximize(x, attack_ball, cfg, seed, |p| model.ce_value_grad_input(p, y))?;
    Ok(z)
}

/// Multitargeted attack: for every wrong class, finds the attack-ball point
/// whose whole rejection ball is confidently that class, then keeps the best
/// target.
///
/// Per target t the objective minimized is
/// `CE(p, t) + max over the rejection ball of CE(., t)`, where the inner max
/// is approximated by PGD; the gradient passes through the inner maximizer
/// (envelope rule). Returns the clean point unchanged for 1-class problems.
pub fn attack_multitargeted(
    model: &Model,
    x: &[f64],
    y: usize,
    attack_ball: &PerturbationSet,
    defense_ball: &PerturbationSet,
    outer: &PgdConfig,
    inner: &PgdConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let classes = model.num_classes();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for target in (0..classes).filter(|&t| t != y) {
        let target_seed = crate::seed_derive(seed, "multitarget", target as u64);
        let (p, neg_obj) = pgd_maximize(x, attack_ball, outer, target_seed, |p| {
            let (v1, g1) = model.ce_value_grad_input(p, target)?;
            let (z_inner, v2) = pgd_maximize(p, defense_ball, inner, 0, |z| {
                model.ce_value_grad_input(z, target)
            })?;
            let (_, g2) = model.ce_value_grad_input(&z_inner, target)?;
            let grad: Vec<f64> = g1.iter().zip(g2.iter()).map(|(a, b)| -(a + b)).collect();
            Ok((-(v1 + v2), grad))
        })?;
        let obj = -neg_obj;
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, p));
        }
    }
    Ok(best.map_or_else(|| x.to_vec(), |(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::RealMatrix;
    use crate::numcore::{cross_entropy, Layer};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// 1-D two-class linear model: logits = (w x, -w x); boundary at x = 0.
    fn line_model(w: f64) -> Model {
        Model::from_layers(
            vec![Layer {
                weight: RealMatrix::from_vec(2, 1, vec![w, -w]).unwrap(),
                bias: vec![0.0, 0.0],
            }],
            false,
        )
        .unwrap()
    }

    fn ce_at(model: &Model, x: f64, y: usize) -> f64 {
        let probs = softmax(&model.forward(&RealMatrix::row_vector(&[x])).unwrap());
        cross_entropy(&probs, &[y]).unwrap()
    }

    #[test]
    fn pgd_zero_steps_returns_start() {
        let ball = PerturbationSet::linf(0.1);
        let cfg = PgdConfig {
            steps: 0,
            ..PgdConfig::default()
        };
        let (z, v) = pgd_maximize(&[0.3, 0.4], &ball, &cfg, 0, |p| {
            Ok((p.iter().sum(), vec![1.0; p.len()]))
        })
        .unwrap();
        assert_eq!(z, vec![0.3, 0.4]);
        assert_abs_diff_eq!(v, 0.7);
    }

    #[test]
    fn pgd_finds_concave_maximum() {
        // f(x) = -(x - 0.05)^2 on [-0.1, 0.1]; optimum at 0.05, hit exactly
        // after two sign steps of 0.025 and retained as the best iterate.
        let ball = PerturbationSet::linf(0.1);
        let cfg = PgdConfig {
            steps: 10,
            step_size: 0.025,
            random_start: false,
        };
        let (z, v) = pgd_maximize(&[0.0], &ball, &cfg, 0, |p| {
            let d = p[0] - 0.05;
            Ok((-d * d, vec![-2.0 * d]))
        })
        .unwrap();
        assert_abs_diff_eq!(z[0], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pgd_never_worse_than_start() {
        // Objective decreasing away from the center: the best iterate must
        // stay the start point.
        let ball = PerturbationSet::linf(0.5);
        let (z, _) = pgd_maximize(&[0.2], &ball, &PgdConfig::default(), 0, |p| {
            let d = p[0] - 0.2;
            Ok((-d.abs(), vec![if d >= 0.0 { -1.0 } else { 1.0 }]))
        })
        .unwrap();
        assert_eq!(z, vec![0.2]);
    }

    proptest! {
        #[test]
        fn pgd_output_is_feasible(
            center in proptest::collection::vec(-1.0f64..1.0, 1..5),
            eps in 0.01f64..0.5,
            steps in 0usize..15,
            step in 0.001f64..0.3,
            rs in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let ball = PerturbationSet::linf_clipped(eps);
            let cfg = PgdConfig { steps, step_size: step, random_start: rs };
            let (z, _) = pgd_maximize(&center, &ball, &cfg, seed, |p| {
                Ok((p.iter().map(|v| v.sin()).sum(), p.iter().map(|v| v.cos()).collect()))
            }).unwrap();
            prop_assert!(ball.contains(&z, &ball.project(&center, &center)) || ball.contains(&z, &center));
            prop_assert!(z.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pgd_random_start_is_seeded() {
        let ball = PerturbationSet::linf(0.2);
        let cfg = PgdConfig {
            steps: 3,
            step_size: 0.05,
            random_start: true,
        };
        let f = |p: &[f64]| Ok((p[0], vec![1.0]));
        let (a, _) = pgd_maximize(&[0.0], &ball, &cfg, 7, f).unwrap();
        let (b, _) = pgd_maximize(&[0.0], &ball, &cfg, 7, f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_db_range_and_boundary_zero() {
        let model = line_model(4.0);
        // On the boundary the two probabilities tie: value 0.
        let (v, _) = loss_db(&model, &[0.0]).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        // Far from the boundary the value approaches -1.
        let (v, _) = loss_db(&model, &[10.0]).unwrap();
        assert!(v < -0.99 && v >= -1.0);
        for x in [-0.7, -0.1, 0.3, 2.0] {
            let (v, _) = loss_db(&model, &[x]).unwrap();
            assert!((-1.0..=0.0).contains(&v), "value {v} out of range");
        }
    }

    #[test]
    fn loss_db_gradient_matches_finite_differences() {
        let model = Model::random(&[3, 6, 4], false, 21).unwrap();
        let x = [0.2, -0.5, 0.8];
        let (_, g) = loss_db(&model, &x).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss_db(&model, &xp).unwrap().0 - loss_db(&model, &xm).unwrap().0) / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn boundary_probe_matches_grid_oracle() {
        // 1-D model, rejection radius 0.08 around x = 0.1: exhaustive grid
        // search over the interval gives the reachable boundary-loss maximum.
        let model = line_model(6.0);
        let ball = PerturbationSet::linf(0.08);
        let x = [0.1];
        let probe = boundary_probe(&model, &x, &ball, &probe_config(ball.epsilon)).unwrap();
        let got = loss_db(&model, &probe).unwrap().0;
        let oracle = (0..=1000)
            .map(|i| 0.1 - 0.08 + 0.16 * i as f64 / 1000.0)
            .map(|p| loss_db(&model, &[p]).unwrap().0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(ball.contains(&probe, &x));
        assert!(got >= oracle - 1e-3, "probe {got} vs grid oracle {oracle}");
    }

    #[test]
    fn rejection_loss_zero_weight_is_bitwise_ce() {
        let model = Model::random(&[2, 5, 3], false, 3).unwrap();
        let loss = RejectionLoss::new(PerturbationSet::linf(0.1), 0.0, false);
        let z = [0.4, -0.2];
        let (v, g) = loss.value_grad(&model, &z, 1).unwrap();
        let (ve, ge) = model.ce_value_grad_input(&z, 1).unwrap();
        assert_eq!(v.to_bits(), ve.to_bits());
        assert_eq!(
            g.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            ge.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejection_loss_adds_signed_penalty_on_one_coordinate() {
        // Misclassified point (so the adaptive rule keeps the penalty): the
        // gradient must differ from the CE gradient by ±lambda' on exactly
        // the coordinate attaining the probe distance.
        let model = line_model(5.0);
        let loss = RejectionLoss::new(PerturbationSet::linf(0.05), 0.7, true);
        let z = [0.2];
        let y = 1; // model predicts class 0 at x > 0, so this is wrong
        assert_eq!(model.predict(&z).unwrap(), 0);
        let (v, g) = loss.value_grad(&model, &z, y).unwrap();
        let (ce, gce) = model.ce_value_grad_input(&z, y).unwrap();
        let diff = g[0] - gce[0];
        assert_abs_diff_eq!(diff.abs(), 0.7, epsilon = 1e-12);
        assert!(v > ce);
        // Distance term: the probe moves toward the boundary (left), so z sits
        // to its right and the sign is positive.
        assert!(diff > 0.0);
    }

    #[test]
    fn rejection_loss_adaptive_rule_drops_penalty_when_correct() {
        let model = line_model(5.0);
        let z = [0.2];
        let y = 0; // correctly classified
        let adaptive = RejectionLoss::new(PerturbationSet::linf(0.05), 0.7, true);
        let (v, g) = adaptive.value_grad(&model, &z, y).unwrap();
        let (ve, ge) = model.ce_value_grad_input(&z, y).unwrap();
        assert_eq!(v.to_bits(), ve.to_bits());
        assert_eq!(g[0].to_bits(), ge[0].to_bits());
        // Without the adaptive rule the penalty stays.
        let fixed = RejectionLoss::new(PerturbationSet::linf(0.05), 0.7, false);
        let (vf, _) = fixed.value_grad(&model, &z, y).unwrap();
        assert!(vf > ve);
    }

    #[test]
    fn ce_attack_matches_grid_oracle_in_1d() {
        let model = line_model(3.0);
        let ball = PerturbationSet::linf(0.15);
        let x = [0.1];
        let cfg = PgdConfig {
            steps: 30,
            step_size: 0.02,
            random_start: false,
        };
        let z = attack_point_ce(&model, &x, 0, &ball, &cfg, 0).unwrap();
        let got = ce_at(&model, z[0], 0);
        let oracle = (0..=2000)
            .map(|i| 0.1 - 0.15 + 0.3 * i as f64 / 2000.0)
            .map(|p| ce_at(&model, p, 0))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(ball.contains(&z, &x));
        assert!(got >= oracle - 1e-6, "attack {got} vs oracle {oracle}");
    }

    #[test]
    fn rejection_attack_output_is_feasible() {
        let model = Model::random(&[2, 6, 3], false, 13).unwrap();
        let ball = PerturbationSet::linf_clipped(0.1);
        let loss = RejectionLoss::new(PerturbationSet::linf_clipped(0.025), 1.0, true);
        let x = [0.5, 0.6];
        let z = attack_point_rej(&model, &x, 0, &ball, &PgdConfig::default(), &loss, 1).unwrap();
        assert!(ball.contains(&z, &x));
        assert!(z.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn multitargeted_flips_an_easy_point() {
        // Correctly classified point near the boundary with a generous
        // budget: some wrong target must become reachable.
        let model = line_model(4.0);
        let ball = PerturbationSet::linf(0.3);
        let x = [0.05];
        assert_eq!(model.predict(&x).unwrap(), 0);
        let cfg = PgdConfig {
            steps: 25,
            step_size: 0.04,
            random_start: false,
        };
        let inner = probe_config(0.05);
        let def = PerturbationSet::linf(0.05);
        let z = attack_multitargeted(&model, &x, 0, &ball, &def, &cfg, &inner, 0).unwrap();
        assert!(ball.contains(&z, &x));
        assert_eq!(model.predict(&z).unwrap(), 1);
        // The whole rejection ball around z should stay class 1.
        assert_eq!(model.predict(&[z[0] - 0.05]).unwrap(), 1);
        assert_eq!(model.predict(&[z[0] + 0.05]).unwrap(), 1);
    }

    #[test]
    fn multitargeted_single_class_returns_clean() {
        let model = Model::random(&[2, 3, 1], false, 2).unwrap();
        let ball = PerturbationSet::linf(0.1);
        let z = attack_multitargeted(
            &model,
            &[0.1, 0.2],
            0,
            &ball,
            &PerturbationSet::linf(0.02),
            &PgdConfig::default(),
            &probe_config(0.02),
            0,
        )
        .unwrap();
        assert_eq!(z, vec![0.1, 0.2]);
    }
}
