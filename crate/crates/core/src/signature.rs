// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subject signatures: mean-difference directions against Gaussian
//! negatives, residual components, and per-layer validation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{oversample_by_subject, HasSubject, Oversample};
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::model::Submodule;
use crate::probe::ActivationRecord;
use crate::stats::{
    auc_bootstrap_ci, bootstrap_effect_size, classifier_metrics, cohens_d, mean, sample_variance, ClassifierMetrics,
    EffectSizeReport,
};
use crate::tensor::{dot, norm, Tensor};

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub direction: Vec<f64>,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub subject: String,
    pub layer: usize,
    pub submodule: Submodule,
    pub direction: Vec<f64>,
    pub effect: EffectSizeReport,
    pub residuals: Vec<Residual>,
    /// Mean and std of background projections onto `direction`, in the
    /// coordinates of raw (uncentred) activations.
    pub calib_mean: f64,
    pub calib_std: f64,
    pub neg_seed: u64,
}

impl Signature {
    pub fn id(&self) -> String {
        format!("{}/L{}/{}", self.subject, self.layer, self.submodule.name())
    }

    pub fn project(&self, x: &[f64]) -> f64 {
        dot(x, &self.direction)
    }

    pub fn z(&self, x: &[f64]) -> f64 {
        (self.project(x) - self.calib_mean) / self.calib_std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub trials: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { trials: 50, level: 0.95, seed: 0 }
    }
}

/// One Gaussian negative per positive: mean zero, per-dimension std matched
/// to the positives (floored at 1e-8).
pub fn make_negatives(pos: &[Vec<f64>], seed: u64) -> Result<Vec<Vec<f64>>> {
    if pos.len() < 2 {
        return Err(Error::InsufficientSamples(format!("need >= 2 positives, got {}", pos.len())));
    }
    let d = pos[0].len();
    if pos.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("positives have mixed lengths".into()));
    }
    let stds: Vec<f64> = (0..d)
        .map(|j| {
            let col: Vec<f64> = pos.iter().map(|p| p[j]).collect();
            sample_variance(&col).sqrt().max(STD_FLOOR)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = stds.iter().map(|&s| Normal::new(0.0, s).expect("finite std")).collect();
    Ok((0..pos.len()).map(|_| dists.iter().map(|n| n.sample(&mut rng)).collect()).collect())
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, x) in m.iter_mut().zip(r) {
            *a += x;
        }
    }
    for a in &mut m {
        *a /= rows.len() as f64;
    }
    m
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Primary direction `normalize(mean(pos) − mean(neg))` with its bootstrap
/// effect size and background calibration.
pub fn mine_primary(
    subject: &str,
    layer: usize,
    submodule: Submodule,
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    boot: &BootstrapConfig,
) -> Result<Signature> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::InsufficientSamples("mining needs >= 2 vectors per side".into()));
    }
    let mp = column_mean(pos);
    let mn = column_mean(neg);
    if mp.len() != mn.len() {
        return Err(Error::Shape("positive and negative widths differ".into()));
    }
    let mut dir: Vec<f64> = mp.iter().zip(&mn).map(|(a, b)| a - b).collect();
    let n = normalize(&mut dir);
    // Differences at the negatives' noise floor are not a signal either.
    let floor = 1e-10f64.max(10.0 * STD_FLOOR * (dir.len() as f64).sqrt());
    if !(n >= floor) {
        return Err(Error::NoSignal(n));
    }
    let sp: Vec<f64> = pos.iter().map(|x| dot(x, &dir)).collect();
    let sn: Vec<f64> = neg.iter().map(|x| dot(x, &dir)).collect();
    let effect = bootstrap_effect_size(&sp, &sn, boot.trials, boot.level, boot.seed)?;
    let calib_std = sample_variance(&sn).sqrt();
    if !(calib_std > 0.0) {
        return Err(Error::Degenerate("background projections have zero spread".into()));
    }
    Ok(Signature {
        subject: subject.to_string(),
        layer,
        submodule,
        direction: dir,
        effect,
        residuals: Vec::new(),
        calib_mean: mean(&sn),
        calib_std,
        neg_seed: 0,
    })
}

/// Directions beyond the primary one.
///
/// Both sets are projected off the primary direction, pooled, centred and
/// decomposed by SVD. The signed mean difference along any such component
/// is zero by construction, so a component is scored by Cohen's d on the
/// magnitude of the projections (subject structure such as a bimodal split
/// shows up as larger magnitudes than isotropic noise). Components are
/// oriented so the positives' mean projection is non-negative.
pub fn mine_residuals(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    primary: &Signature,
    effect_threshold: f64,
    max_components: usize,
) -> Result<Vec<Residual>> {
    if max_components == 0 || effect_threshold == f64::INFINITY || pos.len() < 2 || neg.len() < 2 {
        return Ok(Vec::new());
    }
    let d = &primary.direction;
    let off = |x: &Vec<f64>| {
        let p = dot(x, d);
        x.iter().zip(d).map(|(a, b)| a - p * b).collect::<Vec<f64>>()
    };
    let rp: Vec<Vec<f64>> = pos.iter().map(off).collect();
    let rn: Vec<Vec<f64>> = neg.iter().map(off).collect();
    let all: Vec<Vec<f64>> = rp.iter().chain(&rn).cloned().collect();
    let mu = column_mean(&all);
    let centred: Vec<f64> = all.iter().flat_map(|r| r.iter().zip(&mu).map(|(a, b)| a - b)).collect();
    let m = Tensor::matrix(all.len(), d.len(), centred)?;
    let s = svd(&m)?;
    let scale = s.singular_values.first().copied().unwrap_or(0.0);

    let mut kept: Vec<Residual> = Vec::new();
    for (i, &sigma) in s.singular_values.iter().enumerate() {
        if kept.len() == max_components || sigma <= scale * 1e-10 {
            break;
        }
        let mut v = s.vt.row(i).to_vec();
        for basis in std::iter::once(d).chain(kept.iter().map(|r| &r.direction)) {
            for _ in 0..2 {
                let p = dot(&v, basis);
                for (x, b) in v.iter_mut().zip(basis) {
                    *x -= p * b;
                }
            }
        }
        if normalize(&mut v) < 1e-6 {
            continue;
        }
        let ap: Vec<f64> = rp.iter().map(|x| (dot(x, &v) - dot(&mu, &v)).abs()).collect();
        let an: Vec<f64> = rn.iter().map(|x| (dot(x, &v) - dot(&mu, &v)).abs()).collect();
        let effect = match cohens_d(&ap, &an) {
            Ok(e) => e,
            Err(Error::ZeroVariance) => continue,
            Err(e) => return Err(e),
        };
        if effect >= effect_threshold {
            if mean(&rp.iter().map(|x| dot(x, &v)).collect::<Vec<_>>()) < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            kept.push(Residual { direction: v, effect });
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    #[serde(default = "default_threshold")]
    pub effect_threshold: f64,
    #[serde(default = "default_components")]
    pub max_components: usize,
    #[serde(default = "default_oversample")]
    pub oversample: Oversample,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    0.8
}
fn default_components() -> usize {
    3
}
fn default_oversample() -> Oversample {
    Oversample::Max
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            effect_threshold: default_threshold(),
            max_components: default_components(),
            oversample: default_oversample(),
            bootstrap: BootstrapConfig::default(),
            seed: 0,
        }
    }
}

impl HasSubject for ActivationRecord {
    fn subject(&self) -> &str {
        &self.subject
    }
}

fn group_key(r: &ActivationRecord) -> (usize, Submodule) {
    (r.layer, r.submodule)
}

/// Negative-sample seed for one (layer, sub-module) group.
pub fn group_seed(seed: u64, layer: usize, sub: Submodule) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(((layer as u64) << 8) | sub as u64)
}

/// Mines one signature per (layer, sub-module) for `subject`.
///
/// Activations are centred on the subject-balanced corpus mean of their
/// group before the contrast with zero-mean negatives, so the direction
/// points at what distinguishes the subject rather than at the shared
/// activation offset. The centre is folded back into `calib_mean`, so
/// [`Signature::z`] applies to raw activations.
pub fn mine_subject(records: &[ActivationRecord], subject: &str, cfg: &MineConfig) -> Result<Vec<Signature>> {
    let mut groups: BTreeMap<(usize, Submodule), Vec<&ActivationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(group_key(r)).or_default().push(r);
    }
    if !records.iter().any(|r| r.subject == subject) {
        return Err(Error::InsufficientSamples(format!("no activation records for subject {subject:?}")));
    }
    let mut out = Vec::new();
    for ((layer, sub), recs) in groups {
        let owned: Vec<ActivationRecord> = recs.iter().map(|r| (*r).clone()).collect();
        let balanced = oversample_by_subject(&owned, cfg.oversample, cfg.seed)?;
        let all: Vec<Vec<f64>> = balanced.iter().map(|r| r.vector_f64()).collect();
        let centre = column_mean(&all);
        let pos: Vec<Vec<f64>> = recs
            .iter()
            .filter(|r| r.subject == subject)
            .map(|r| r.vector_f64().iter().zip(&centre).map(|(a, b)| a - b).collect())
            .collect();
        let neg_seed = group_seed(cfg.seed, layer, sub);
        let neg = make_negatives(&pos, neg_seed)?;
        let mut sig = mine_primary(subject, layer, sub, &pos, &neg, &cfg.bootstrap)?;
        sig.residuals = mine_residuals(&pos, &neg, &sig, cfg.effect_threshold, cfg.max_components)?;
        sig.calib_mean += dot(&centre, &sig.direction);
        sig.neg_seed = neg_seed;
        out.push(sig);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    #[default]
    OtherSubjects,
    SyntheticNegatives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerValidation {
    pub subject: String,
    pub layer: usize,
    pub submodule: Submodule,
    pub metrics: ClassifierMetrics,
    pub auc_ci: (f64, f64),
    pub cohens_d: Option<f64>,
    pub n_leak: usize,
    pub n_control: usize,
}

/// Scores every record by its projection onto the matching signature and
/// reports separability of the subject's records from the controls.
pub fn validate_layerwise(
    records: &[ActivationRecord],
    signatures: &[Signature],
    controls: ControlSource,
    boot: &BootstrapConfig,
) -> Result<Vec<LayerValidation>> {
    let mut out = Vec::new();
    for sig in signatures {
        let group: Vec<&ActivationRecord> =
            records.iter().filter(|r| r.layer == sig.layer && r.submodule == sig.submodule).collect();
        let leak: Vec<f64> =
            group.iter().filter(|r| r.subject == sig.subject).map(|r| sig.project(&r.vector_f64())).collect();
        let control: Vec<f64> = match controls {
            ControlSource::OtherSubjects => {
                group.iter().filter(|r| r.subject != sig.subject).map(|r| sig.project(&r.vector_f64())).collect()
            }
            ControlSource::SyntheticNegatives => {
                let normal = Normal::new(sig.calib_mean, sig.calib_std).expect("positive calibration std");
                let mut rng = ChaCha8Rng::seed_from_u64(sig.neg_seed);
                (0..leak.len()).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        if control.is_empty() {
            return Err(Error::InsufficientSamples(format!("layer {} has no control records", sig.layer)));
        }
        let metrics = classifier_metrics(&leak, &control)?;
        let auc_ci = auc_bootstrap_ci(&leak, &control, boot.trials.max(2), boot.level, boot.seed)?;
        out.push(LayerValidation {
            subject: sig.subject.clone(),
            layer: sig.layer,
            submodule: sig.submodule,
            metrics,
            auc_ci,
            cohens_d: cohens_d(&leak, &control).ok(),
            n_leak: leak.len(),
            n_control: control.len(),
        });
    }
    Ok(out)
}

/// The `k` best layers for one sub-module: AUC first, then Cohen's d, then
/// the lower layer index.
pub fn top_layers(validation: &[LayerValidation], submodule: Submodule, k: usize) -> Vec<usize> {
    let mut rows: Vec<&LayerValidation> = validation.iter().filter(|v| v.submodule == submodule).collect();
    rows.sort_by(|a, b| {
        b.metrics
            .auc_roc
            .total_cmp(&a.metrics.auc_roc)
            .then(b.cohens_d.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.cohens_d.unwrap_or(f64::NEG_INFINITY)))
            .then(a.layer.cmp(&b.layer))
    });
    rows.into_iter().take(k).map(|v| v.layer).collect()
}

pub fn write_signatures(path: &Path, sigs: &[Signature]) -> Result<()> {
    crate::io::write_jsonl(path, sigs)
}

pub fn read_signatures(path: &Path) -> Result<Vec<Signature>> {
    let sigs: Vec<Signature> = crate::io::read_jsonl(path)?;
    for s in &sigs {
        if (norm(&s.direction) - 1.0).abs() > 1e-6 || !(s.calib_std > 0.0) {
            return Err(Error::Format(format!("signature {} violates its invariants", s.id())));
        }
    }
    Ok(sigs)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn two_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (3usize..10).prop_flat_map(|d| {
            let row = move || prop::collection::vec(-3.0f64..3.0, d);
            (prop::collection::vec(row(), 3..12), prop::collection::vec(row(), 3..12))
        })
    }

    fn shifted(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().enumerate().map(|(i, x)| x + if i == 0 { 4.0 } else { 0.0 }).collect()).collect()
    }

    proptest! {
        #[test]
        fn swapping_labels_negates_the_direction((pos, neg) in two_sets()) {
            let pos = shifted(&pos);
            let boot = BootstrapConfig { trials: 20, ..Default::default() };
            let a = mine_primary("s", 0, Submodule::Down, &pos, &neg, &boot).unwrap();
            let b = mine_primary("s", 0, Submodule::Down, &neg, &pos, &boot).unwrap();
            for (x, y) in a.direction.iter().zip(&b.direction) {
                prop_assert_eq!(*x, -*y);
            }
            let fixed_a: Vec<f64> = pos.iter().map(|x| a.project(x)).collect();
            let fixed_b: Vec<f64> = neg.iter().map(|x| a.project(x)).collect();
            let d = cohens_d(&fixed_a, &fixed_b).unwrap();
            prop_assert!((cohens_d(&fixed_b, &fixed_a).unwrap() + d).abs() <= 1e-12 * d.abs().max(1.0));
        }

        #[test]
        fn residuals_are_orthonormal_to_primary((pos, neg) in two_sets()) {
            let pos = shifted(&pos);
            let boot = BootstrapConfig { trials: 10, ..Default::default() };
            let p = mine_primary("s", 0, Submodule::Down, &pos, &neg, &boot).unwrap();
            let res = mine_residuals(&pos, &neg, &p, f64::NEG_INFINITY, 4).unwrap();
            let mut basis = vec![p.direction.clone()];
            basis.extend(res.iter().map(|r| r.direction.clone()));
            for (i, u) in basis.iter().enumerate() {
                prop_assert!((norm(u) - 1.0).abs() < 1e-9);
                for v in &basis[i + 1..] {
                    prop_assert!(dot(u, v).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn positive_rescaling_keeps_separability((pos, neg) in two_sets(), c in 0.01f64..100.0) {
            let pos = shifted(&pos);
            let boot = BootstrapConfig { trials: 10, ..Default::default() };
            let scale = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().map(|x| c * x).collect()).collect::<Vec<Vec<f64>>>();
            let a = mine_primary("s", 0, Submodule::Down, &pos, &neg, &boot).unwrap();
            let b = mine_primary("s", 0, Submodule::Down, &scale(&pos), &scale(&neg), &boot).unwrap();
            for (x, y) in a.direction.iter().zip(&b.direction) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let score = |s: &Signature, rows: &[Vec<f64>]| rows.iter().map(|x| s.project(x)).collect::<Vec<f64>>();
            let ma = classifier_metrics(&score(&a, &pos), &score(&a, &neg)).unwrap();
            let mb = classifier_metrics(&score(&b, &scale(&pos)), &score(&b, &scale(&neg))).unwrap();
            prop_assert!((ma.auc_roc - mb.auc_roc).abs() < 1e-9);
            prop_assert!((ma.eer - mb.eer).abs() < 1e-9);
        }
    }
}
