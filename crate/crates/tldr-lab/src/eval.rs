//! Robust-error metrics for classifiers that may abstain, and experiment
//! reports.
//!
//! The central convention: rejecting a *clean* input always counts as an
//! error, while rejecting a *perturbed* input counts as a successful defense.
//! Whether an input "is perturbed" is decided by bitwise equality with the
//! clean point, so an attacker gains nothing by returning the clean input.

use std::path::Path;

use crate::defense::Decision;
use crate::matrix::RealMatrix;
use crate::{Error, Result};

/// Caveat attached to every human-readable report.
pub const CLEAN_REJECTION_CAVEAT: &str =
    "note: rejecting an unperturbed input counts as an error, so rejection \
     rates on clean data directly reduce the reported robust accuracy";

/// Marks each row of `maybe_perturbed` that differs bitwise from the
/// corresponding row of `clean`.
pub fn bitwise_perturbed(maybe_perturbed: &RealMatrix, clean: &RealMatrix) -> Vec<bool> {
    debug_assert_eq!(maybe_perturbed.rows(), clean.rows());
    (0..clean.rows())
        .map(|i| {
            maybe_perturbed
                .row(i)
                .iter()
                .zip(clean.row(i))
                .any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .collect()
}

/// Transductive robust error with rejection over a (possibly perturbed) test
/// batch.
///
/// A point is an error when it is unperturbed and the decision is anything
/// but its label (wrong class or rejection), or when it is perturbed and the
/// decision is a wrong class (rejection is fine).
pub fn err_transductive_rej(decisions: &[Decision], labels: &[usize], perturbed: &[bool]) -> f64 {
    debug_assert_eq!(decisions.len(), labels.len());
    debug_assert_eq!(decisions.len(), perturbed.len());
    if decisions.is_empty() {
        return 0.0;
    }
    let errors = decisions
        .iter()
        .zip(labels.iter().zip(perturbed.iter()))
        .filter(|(d, (&y, &p))| {
            if p {
                matches!(d, Decision::Class(c) if *c != y)
            } else {
                **d != Decision::Class(y)
            }
        })
        .count();
    errors as f64 / decisions.len() as f64
}

/// Transductive robust error *without* rejection semantics: any decision that
/// is not the correct class (including rejection) is an error.
pub fn err_transductive(decisions: &[Decision], labels: &[usize]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    let errors = decisions
        .iter()
        .zip(labels.iter())
        .filter(|(d, &y)| **d != Decision::Class(y))
        .count();
    errors as f64 / decisions.len() as f64
}

/// Inductive robust error with rejection: per point, an error when the
/// decision on the perturbed input is a wrong class, or the decision on the
/// clean input is anything but the correct class.
pub fn err_inductive_rej(
    decisions_adv: &[Decision],
    decisions_clean: &[Decision],
    labels: &[usize],
) -> f64 {
    debug_assert_eq!(decisions_adv.len(), labels.len());
    debug_assert_eq!(decisions_clean.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let errors = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let adv_wrong = matches!(decisions_adv[i], Decision::Class(c) if c != y);
            let clean_bad = decisions_clean[i] != Decision::Class(y);
            adv_wrong || clean_bad
        })
        .count();
    errors as f64 / labels.len() as f64
}

/// Rejection rates split by perturbed/clean status:
/// `(rate on perturbed points, rate on clean points)`. A split with no points
/// reports 0.
pub fn rejection_rates(decisions: &[Decision], perturbed: &[bool]) -> (f64, f64) {
    let mut rej = [0usize; 2];
    let mut tot = [0usize; 2];
    for (d, &p) in decisions.iter().zip(perturbed.iter()) {
        let side = usize::from(!p); // 0 = perturbed, 1 = clean
        tot[side] += 1;
        if d.is_reject() {
            rej[side] += 1;
        }
    }
    let rate = |r: usize, t: usize| if t == 0 { 0.0 } else { r as f64 / t as f64 };
    (rate(rej[0], tot[0]), rate(rej[1], tot[1]))
}

/// One evaluated (defense, attack) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub defense: String,
    pub attack: String,
    pub mode: String,
    pub seed: u64,
    pub robust_accuracy: f64,
    pub p_rej_adv: f64,
    pub p_rej_clean: f64,
    pub runtime_s: f64,
}

/// Picks the strongest attack: the record with the lowest robust accuracy.
/// Ties prefer `mode == "MIN"`, then the earliest record.
pub fn report_strongest(records: &[EvalRecord]) -> Option<&EvalRecord> {
    let mut best: Option<&EvalRecord> = None;
    for r in records {
        best = Some(match best {
            None => r,
            Some(b) => {
                if r.robust_accuracy < b.robust_accuracy
                    || (r.robust_accuracy == b.robust_accuracy
                        && r.mode == "MIN"
                        && b.mode != "MIN")
                {
                    r
                } else {
                    b
                }
            }
        });
    }
    best
}

/// Writes evaluation records as CSV.
pub fn save_report(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from(
        "defense,attack,mode,seed,robust_accuracy,p_rej_adv,p_rej_clean,runtime_s\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.defense,
            r.attack,
            r.mode,
            r.seed,
            r.robust_accuracy,
            r.p_rej_adv,
            r.p_rej_clean,
            r.runtime_s
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a CSV written by [`save_report`].
pub fn load_report(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: empty report", path.display())))?;
    if header != "defense,attack,mode,seed,robust_accuracy,p_rej_adv,p_rej_clean,runtime_s" {
        return Err(Error::InvalidArgument(format!(
            "{}: unexpected report header",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::InvalidArgument(format!(
                "{}: report row has {} fields",
                path.display(),
                parts.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::InvalidArgument(format!("{}: bad number: {e}", path.display())))
        };
        records.push(EvalRecord {
            defense: parts[0].to_string(),
            attack: parts[1].to_string(),
            mode: parts[2].to_string(),
            seed: parts[3].parse().map_err(|e| {
                Error::InvalidArgument(format!("{}: bad seed: {e}", path.display()))
            })?,
            robust_accuracy: num(parts[4])?,
            p_rej_adv: num(parts[5])?,
            p_rej_clean: num(parts[6])?,
            runtime_s: num(parts[7])?,
        });
    }
    Ok(records)
}

/// Renders a human-readable summary table plus the clean-rejection caveat.
pub fn format_report(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:<14} {:<5} {:>6} {:>10} {:>10} {:>12}\n",
        "defense", "attack", "mode", "seed", "rob_acc", "p_rej_adv", "p_rej_clean"
    ));
    for r in records {
        out.push_str(&format!(
            "{:<12} {:<14} {:<5} {:>6} {:>10.4} {:>10.4} {:>12.4}\n",
            r.defense, r.attack, r.mode, r.seed, r.robust_accuracy, r.p_rej_adv, r.p_rej_clean
        ));
    }
    if let Some(strongest) = report_strongest(records) {
        out.push_str(&format!(
            "strongest attack: {} (mode {}) with robust accuracy {:.4}\n",
            strongest.attack, strongest.mode, strongest.robust_accuracy
        ));
    }
    out.push_str(CLEAN_REJECTION_CAVEAT);
    out.push('\n');
    out
}
