use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{KwsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    /// Threshold of the selected operating point (may be ±∞).
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// One DET operating point: accept iff `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn check(positives: &[f64], negatives: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(KwsError::Validation(format!(
            "EER needs positives and negatives, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    if positives.iter().chain(negatives).any(|s| s.is_nan()) {
        return Err(KwsError::Validation("scores contain NaN".into()));
    }
    let mut p = positives.to_vec();
    let mut n = negatives.to_vec();
    p.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    Ok((p, n))
}

/// Candidate thresholds: every distinct score plus ±∞, ascending.
fn thresholds(p: &[f64], n: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = p.iter().chain(n).copied().collect();
    t.push(f64::NEG_INFINITY);
    t.push(f64::INFINITY);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// (false accepts, false rejects) at `t` over sorted score lists.
fn errors_at(p: &[f64], n: &[f64], t: f64) -> (usize, usize) {
    let fa = n.len() - n.partition_point(|&s| s < t);
    let fr = p.partition_point(|&s| s < t);
    (fa, fr)
}

/// Equal error rate under the finite-set sweep convention.
///
/// FAR(t) counts negatives with score ≥ t, FRR(t) positives with score < t.
/// The selected threshold minimizes |FAR − FRR| (compared exactly in integer
/// arithmetic), the lowest such threshold wins ties, and the EER is the mean
/// of FAR and FRR there.
pub fn compute_eer(positives: &[f64], negatives: &[f64]) -> Result<EerResult> {
    let (p, n) = check(positives, negatives)?;
    let (np, nn) = (p.len() as u128, n.len() as u128);
    let mut best: Option<(u128, f64, usize, usize)> = None;
    for t in thresholds(&p, &n) {
        let (fa, fr) = errors_at(&p, &n, t);
        let gap = (fa as u128 * np).abs_diff(fr as u128 * nn);
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, fa, fr));
        }
    }
    let (_, threshold, fa, fr) = best.expect("at least the two infinite thresholds");
    let far = fa as f64 / n.len() as f64;
    let frr = fr as f64 / p.len() as f64;
    Ok(EerResult {
        eer: (far + frr) / 2.0,
        threshold,
        far,
        frr,
    })
}

/// DET operating points ordered by decreasing threshold, from +∞ (FAR 0,
/// FRR 1) to −∞ (FAR 1, FRR 0).
pub fn det_curve(positives: &[f64], negatives: &[f64]) -> Result<Vec<DetPoint>> {
    let (p, n) = check(positives, negatives)?;
    let mut t = thresholds(&p, &n);
    t.reverse();
    Ok(t
        .into_iter()
        .map(|threshold| {
            let (fa, fr) = errors_at(&p, &n, threshold);
            DetPoint {
                threshold,
                far: fa as f64 / n.len() as f64,
                frr: fr as f64 / p.len() as f64,
            }
        })
        .collect())
}

/// Standard normal quantile with rates clamped to `[1e-6, 1 − 1e-6]` so the
/// endpoints stay plottable.
pub fn probit(rate: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(rate.clamp(1e-6, 1.0 - 1e-6))
}

/// `threshold,far,frr,probit_far,probit_frr` rows with a header line.
pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,far,frr,probit_far,probit_frr\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.threshold,
            p.far,
            p.frr,
            probit(p.far),
            probit(p.frr)
        ));
    }
    out
}
