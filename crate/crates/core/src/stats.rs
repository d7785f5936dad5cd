// SPDX-License-Identifier: MIT OR Apache-2.0

//! Effect sizes, bootstrap confidence intervals and ROC-family metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n − 1) sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standardised mean difference with the pooled (n − 1)-weighted standard
/// deviation.
pub fn cohens_d(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "cohens_d needs >= 2 samples per side, got {}/{}",
            pos.len(),
            neg.len()
        )));
    }
    let (n1, n2) = (pos.len() as f64, neg.len() as f64);
    let pooled_var =
        ((n1 - 1.0) * sample_variance(pos) + (n2 - 1.0) * sample_variance(neg)) / (n1 + n2 - 2.0);
    let pooled = pooled_var.sqrt();
    if !(pooled > 0.0) || !pooled.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Ok((mean(pos) - mean(neg)) / pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSizeReport {
    pub point_estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: usize,
    pub level: f64,
    pub significant: bool,
}

/// Linear-interpolated quantile of sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn percentile_ci(mut values: Vec<f64>, level: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&values, tail), quantile_sorted(&values, 1.0 - tail))
}

fn resample<'a>(xs: &'a [f64], rng: &mut ChaCha8Rng, buf: &'a mut Vec<f64>) -> &'a [f64] {
    buf.clear();
    buf.extend((0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]));
    buf
}

/// Percentile-bootstrap confidence interval for Cohen's d.
pub fn bootstrap_effect_size(
    pos: &[f64],
    neg: &[f64],
    trials: usize,
    level: f64,
    seed: u64,
) -> Result<EffectSizeReport> {
    if trials < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs >= 2 trials, got {trials}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must be in (0,1), got {level}")));
    }
    let point = cohens_d(pos, neg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bp, mut bn) = (Vec::new(), Vec::new());
    let mut ds = Vec::with_capacity(trials);
    for _ in 0..trials {
        let rp = resample(pos, &mut rng, &mut bp).to_vec();
        let rn = resample(neg, &mut rng, &mut bn);
        if let Ok(d) = cohens_d(&rp, rn) {
            ds.push(d);
        }
    }
    let failed = trials - ds.len();
    if failed * 2 > trials || ds.is_empty() {
        return Err(Error::Degenerate(format!("{failed}/{trials} bootstrap trials failed")));
    }
    let (ci_low, ci_high) = percentile_ci(ds, level);
    Ok(EffectSizeReport {
        point_estimate: point,
        ci_low,
        ci_high,
        trials,
        level,
        significant: !(ci_low <= 0.0 && 0.0 <= ci_high),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub auc_roc: f64,
    pub pr_auc: f64,
    pub eer: f64,
    /// Lowest score threshold whose false-positive rate is at most 1%.
    pub tau_at_1pct_fpr: f64,
    pub tpr_at_1pct_fpr: f64,
    /// `|μ_pos − μ_neg| / σ_neg`; `None` when σ_neg is zero or undefined.
    pub snr: Option<f64>,
}

/// Mann–Whitney AUC; tied pairs score one half.
pub fn auc_roc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> =
        pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Midranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

struct RocPoint {
    threshold: f64,
    tp: usize,
    fp: usize,
}

/// Operating points for "predict positive iff score >= threshold", one per
/// distinct score, by descending threshold.
fn roc_points(pos: &[f64], neg: &[f64]) -> Vec<RocPoint> {
    let mut all: Vec<(f64, bool)> =
        pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pts = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let thr = all[i].0;
        while i < all.len() && all[i].0 == thr {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(RocPoint { threshold: thr, tp, fp });
    }
    pts
}

pub fn classifier_metrics(pos: &[f64], neg: &[f64]) -> Result<ClassifierMetrics> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate(format!(
            "classifier metrics need both classes, got {} positive / {} negative",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("classifier scores".into()));
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let pts = roc_points(pos, neg);

    // Step-interpolated precision-recall area (average precision).
    let mut pr_auc = 0.0;
    let mut prev_recall = 0.0;
    for p in &pts {
        let recall = p.tp as f64 / np;
        let precision = p.tp as f64 / (p.tp + p.fp) as f64;
        pr_auc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }

    // EER: FPR − FNR rises from −1 (threshold +∞) to +1 (threshold −∞).
    let mut curve: Vec<(f64, f64)> = vec![(0.0, 1.0)];
    curve.extend(pts.iter().map(|p| (p.fp as f64 / nn, 1.0 - p.tp as f64 / np)));
    let mut eer = curve.last().map(|c| c.0).unwrap_or(0.0);
    for w in curve.windows(2) {
        let (f0, m0) = w[0];
        let (f1, m1) = w[1];
        let (d0, d1) = (f0 - m0, f1 - m1);
        if d0 == 0.0 {
            eer = f0;
            break;
        }
        if d1 >= 0.0 {
            let t = -d0 / (d1 - d0);
            eer = f0 + t * (f1 - f0);
            break;
        }
    }

    let mut tau = f64::INFINITY;
    let mut tpr_at = 0.0;
    for p in &pts {
        if p.fp as f64 / nn <= 0.01 {
            tau = p.threshold;
            tpr_at = p.tp as f64 / np;
        } else {
            break;
        }
    }
    if tau.is_infinite() {
        tau = pts[0].threshold + 1.0;
    }

    let snr = if neg.len() >= 2 {
        let sd = sample_variance(neg).sqrt();
        (sd > 0.0).then(|| (mean(pos) - mean(neg)).abs() / sd)
    } else {
        None
    };

    Ok(ClassifierMetrics {
        auc_roc: auc_roc(pos, neg),
        pr_auc,
        eer,
        tau_at_1pct_fpr: tau,
        tpr_at_1pct_fpr: tpr_at,
        snr,
    })
}

/// Percentile bootstrap CI of the AUC over resampled scores.
pub fn auc_bootstrap_ci(
    pos: &[f64],
    neg: &[f64],
    trials: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if pos.is_empty() || neg.is_empty() || trials < 2 {
        return Err(Error::Degenerate("auc bootstrap needs both classes and >= 2 trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bp, mut bn) = (Vec::new(), Vec::new());
    let aucs = (0..trials)
        .map(|_| {
            let rp = resample(pos, &mut rng, &mut bp).to_vec();
            auc_roc(&rp, resample(neg, &mut rng, &mut bn))
        })
        .collect();
    Ok(percentile_ci(aucs, level))
}
