// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gated rank-one suppression capsules: `h' = h + α_eff ⟨h, d⟩ d`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Suppressor, ToyModel};
use crate::probe::{resize, AlignMode};
use crate::signature::Signature;
use crate::tensor::{dot, norm, sigmoid};

pub const CAPSULE_VERSION: u32 = 1;
const HEADER_LINE: &str = "CAPSULE v";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleMeta {
    pub effect_size: f64,
    pub source_signature: String,
    /// Width of the signature before alignment.
    pub signature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub subject: String,
    pub target_layers: Vec<usize>,
    pub direction: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub k: f64,
    pub calib_mean: f64,
    pub calib_std: f64,
    pub align_mode: AlignMode,
    pub meta: CapsuleMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub tau: f64,
    pub k: f64,
    pub alpha_init: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { tau: 3.0, k: 1.6, alpha_init: -1.0 }
    }
}

/// Maps NaN to 0 and ±∞ to ±1.
pub fn sanitize(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            if x.is_nan() {
                0.0
            } else if x.is_infinite() {
                x.signum()
            } else {
                x
            }
        })
        .collect()
}

/// Sanitises, resizes to `d_hidden` and renormalises. Also returns the norm
/// before renormalisation.
pub fn align_signature(direction: &[f64], d_hidden: usize, mode: AlignMode) -> Result<(Vec<f64>, f64)> {
    let clean = sanitize(direction);
    let mut v = resize(&clean, d_hidden, mode)?;
    let n = norm(&v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("signature direction is zero after alignment".into()));
    }
    if (n - 1.0).abs() > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok((v, n))
}

impl Capsule {
    /// Builds a capsule from a signature mined at `sig.layer`.
    ///
    /// Calibration is rescaled by the alignment's norm change so that `z`
    /// reads the same on the hidden width as on the signature width.
    pub fn forge(sig: &Signature, d_hidden: usize, mode: AlignMode, gate: &GateConfig) -> Result<Self> {
        let (direction, n) = align_signature(&sig.direction, d_hidden, mode)?;
        let c = Self {
            subject: sig.subject.clone(),
            target_layers: vec![sig.layer],
            direction,
            alpha: gate.alpha_init,
            tau: gate.tau,
            k: gate.k,
            calib_mean: sig.calib_mean / n,
            calib_std: sig.calib_std / n,
            align_mode: mode,
            meta: CapsuleMeta {
                effect_size: sig.effect.point_estimate,
                source_signature: sig.id(),
                signature_dim: sig.direction.len(),
                created_at: std::env::var("SOURCE_DATE_EPOCH").ok(),
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if (norm(&self.direction) - 1.0).abs() > 1e-6 || self.direction.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("capsule direction must be a finite unit vector".into()));
        }
        if !(self.tau > 0.0) || !(self.k > 0.0) {
            return Err(Error::InvalidArgument("capsule tau and k must be positive".into()));
        }
        if !(self.calib_std > 0.0) {
            return Err(Error::InvalidArgument("capsule calib_std must be positive".into()));
        }
        Ok(())
    }

    pub fn z(&self, h: &[f64]) -> f64 {
        (dot(h, &self.direction) - self.calib_mean) / self.calib_std
    }

    /// `α · σ(k (z − τ))`.
    pub fn gate(&self, z: f64) -> f64 {
        self.alpha * sigmoid(self.k * (z - self.tau))
    }

    /// Applies the operator to one hidden vector. Ungated uses `α` directly;
    /// gated reads `z` from `h` itself.
    pub fn apply(&self, h: &[f64], gated: bool) -> Result<Vec<f64>> {
        if h.len() != self.direction.len() {
            return Err(Error::Shape(format!(
                "hidden vector has {} entries, capsule expects {}",
                h.len(),
                self.direction.len()
            )));
        }
        if !(self.calib_std > 0.0) {
            return Err(Error::InvalidArgument("capsule calib_std must be positive".into()));
        }
        let a = if gated { self.gate(self.z(h)) } else { self.alpha };
        Ok(rank_one(h, &self.direction, a))
    }

    fn suppressor(&self, layer: usize) -> Suppressor {
        Suppressor {
            tag: self.subject.clone(),
            layer,
            direction: self.direction.clone(),
            alpha: self.alpha,
            tau: self.tau,
            k: self.k,
            calib_mean: self.calib_mean,
            calib_std: self.calib_std,
            gated: true,
        }
    }

    /// Hooks the gated operator onto every target layer's MLP output.
    pub fn install(&self, model: &mut ToyModel) -> Result<()> {
        self.validate()?;
        let mut done = Vec::new();
        for &l in &self.target_layers {
            if let Err(e) = model.install_suppressor(self.suppressor(l)) {
                for &u in &done {
                    model.remove_suppressor(&self.subject, u);
                }
                return Err(e);
            }
            done.push(l);
        }
        Ok(())
    }

    /// Detaches the hooks installed by [`Capsule::install`].
    pub fn remove(&self, model: &mut ToyModel) -> usize {
        self.target_layers.iter().filter(|&&l| model.remove_suppressor(&self.subject, l)).count()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Header<'a> {
            subject: &'a str,
            target_layers: &'a [usize],
            alpha: f64,
            tau: f64,
            k: f64,
            calib_mean: f64,
            calib_std: f64,
            align_mode: AlignMode,
            dim: usize,
            meta: &'a CapsuleMeta,
        }
        let header = serde_json::to_string(&Header {
            subject: &self.subject,
            target_layers: &self.target_layers,
            alpha: self.alpha,
            tau: self.tau,
            k: self.k,
            calib_mean: self.calib_mean,
            calib_std: self.calib_std,
            align_mode: self.align_mode,
            dim: self.direction.len(),
            meta: &self.meta,
        })?;
        let mut out = format!("{HEADER_LINE}{CAPSULE_VERSION}\n{header}\n").into_bytes();
        for x in &self.direction {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a capsule file. The checksum is verified before anything is
    /// interpreted, then the version.
    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Format(format!("{what}: too short for a capsule")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum(what.to_string()));
        }
        let nl = body.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format(format!("{what}: no header")))?;
        let first = std::str::from_utf8(&body[..nl]).map_err(|_| Error::Format(format!("{what}: bad header")))?;
        let version: u32 = first
            .strip_prefix(HEADER_LINE)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("{what}: not a capsule file")))?;
        if version != CAPSULE_VERSION {
            return Err(Error::Version { found: version, expected: CAPSULE_VERSION });
        }
        let rest = &body[nl + 1..];
        let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format(format!("{what}: no header")))?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            subject: String,
            target_layers: Vec<usize>,
            alpha: f64,
            tau: f64,
            k: f64,
            calib_mean: f64,
            calib_std: f64,
            align_mode: AlignMode,
            dim: usize,
            meta: CapsuleMeta,
        }
        let h: Header = serde_json::from_slice(&rest[..nl2])?;
        let payload = &rest[nl2 + 1..];
        if payload.len() != h.dim * 8 {
            return Err(Error::Format(format!("{what}: payload has {} bytes, expected {}", payload.len(), h.dim * 8)));
        }
        let raw: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let direction = if raw.iter().all(|x| x.is_finite()) {
            raw
        } else {
            log::warn!("{what}: non-finite direction entries sanitised");
            align_signature(&raw, h.dim, h.align_mode)?.0
        };
        let c = Self {
            subject: h.subject,
            target_layers: h.target_layers,
            direction,
            alpha: h.alpha,
            tau: h.tau,
            k: h.k,
            calib_mean: h.calib_mean,
            calib_std: h.calib_std,
            align_mode: h.align_mode,
            meta: h.meta,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Two-column summary: effect size, dimensions, min/max/mean and the
    /// first five entries of the direction.
    pub fn summary(&self) -> String {
        let d = &self.direction;
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let first: Vec<String> = d.iter().take(5).map(|x| format!("{x:.4}")).collect();
        let rows = [
            ("Effect Size", format!("{:.4}", self.meta.effect_size)),
            ("Dimensions", format!("({},)", d.len())),
            ("Min/Max/Mean", format!("{min:.4} / {max:.4} / {mean:.4}")),
            ("First 5 Values", format!("[{}]", first.join(", "))),
        ];
        let mut out = format!("{:<16}{}\n", "Metric", "Value");
        for (k, v) in rows {
            out.push_str(&format!("{k:<16}{v}\n"));
        }
        out
    }
}

/// `h + a ⟨h, d⟩ d`.
pub fn rank_one(h: &[f64], d: &[f64], a: f64) -> Vec<f64> {
    let p = dot(h, d);
    h.iter().zip(d).map(|(x, di)| x + a * p * di).collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn unit_and_h() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..24).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0f64..1.0, n).prop_filter("non-zero", |v| norm(v) > 1e-3),
                prop::collection::vec(-5.0f64..5.0, n),
            )
        })
    }

    fn normalized(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn capsule(d: Vec<f64>, alpha: f64) -> Capsule {
        Capsule {
            subject: "s".into(),
            target_layers: vec![0],
            direction: d,
            alpha,
            tau: 1.0,
            k: 1.6,
            calib_mean: 0.2,
            calib_std: 0.7,
            align_mode: AlignMode::Truncate,
            meta: CapsuleMeta { effect_size: 1.0, source_signature: "s/L0/down".into(), signature_dim: 0, created_at: None },
        }
    }

    proptest! {
        #[test]
        fn change_lies_in_the_span_of_d((d, h) in unit_and_h(), alpha in -2.0f64..2.0, gated in any::<bool>()) {
            let d = normalized(&d);
            let c = capsule(d.clone(), alpha);
            let out = c.apply(&h, gated).unwrap();
            let delta: Vec<f64> = out.iter().zip(&h).map(|(a, b)| a - b).collect();
            let p = dot(&delta, &d);
            let off: f64 = delta.iter().zip(&d).map(|(x, u)| (x - p * u).powi(2)).sum::<f64>().sqrt();
            prop_assert!(off <= 1e-6 * norm(&h).max(1e-12));
            let a_eff = if gated { c.gate(c.z(&h)) } else { alpha };
            let want = (1.0 + a_eff) * dot(&h, &d);
            prop_assert!((dot(&out, &d) - want).abs() <= 1e-6 * norm(&h).max(1e-12));
        }

        #[test]
        fn gate_magnitude_grows_with_z(alpha in -3.0f64..-0.01, z1 in -20.0f64..20.0, dz in 0.0f64..10.0) {
            let c = capsule(vec![1.0, 0.0], alpha);
            prop_assert!(c.gate(z1 + dz).abs() >= c.gate(z1).abs());
        }

        #[test]
        fn orthogonal_capsules_commute(h in prop::collection::vec(-5.0f64..5.0, 6), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut d1 = vec![0.0; 6];
            let mut d2 = vec![0.0; 6];
            d1[1] = 0.6;
            d1[4] = 0.8;
            d2[2] = 1.0;
            let (c1, c2) = (capsule(d1, a), capsule(d2, b));
            let x = c2.apply(&c1.apply(&h, false).unwrap(), false).unwrap();
            let y = c1.apply(&c2.apply(&h, false).unwrap(), false).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
