//! Entropy-weighted fusion of slow and fast learner logits.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Convex combination weighted by softmax of negated entropies.
    #[default]
    Entropy,
    /// Plain sum of logits.
    Add,
    /// Elementwise maximum of logits.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    /// Sharpness of the entropy-to-weight softmax.
    pub gamma: f64,
    pub mode: AggregationMode,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig { gamma: 1.0, mode: AggregationMode::Entropy }
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Natural-log Shannon entropy, with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    contract!(!p.is_empty(), "entropy of an empty distribution");
    contract!(p.iter().all(|v| *v >= 0.0 && v.is_finite()), "probabilities must be finite and nonnegative");
    let total: f64 = p.iter().sum();
    contract!((total - 1.0).abs() <= 1e-9, "probabilities sum to {total}, not 1");
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// `(α_slow, α_fast) = softmax(−γ·H_slow, −γ·H_fast)`.
pub fn aggregation_weights(h_slow: f64, h_fast: f64, gamma: f64) -> (f64, f64) {
    let (a, b) = (-gamma * h_slow, -gamma * h_fast);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    let slow = ea / s;
    (slow, 1.0 - slow)
}

pub fn aggregate_logits(z_slow: &[f64], z_fast: &[f64], weights: (f64, f64), mode: AggregationMode) -> Result<Vec<f64>> {
    contract!(z_slow.len() == z_fast.len(), "logit lengths differ: {} vs {}", z_slow.len(), z_fast.len());
    let out = z_slow.iter().zip(z_fast).map(|(s, f)| match mode {
        AggregationMode::Entropy => weights.0 * s + weights.1 * f,
        AggregationMode::Add => s + f,
        AggregationMode::Max => s.max(*f),
    });
    Ok(out.collect())
}

/// Fuses both learners' logits under `cfg`.
pub fn fuse(z_slow: &[f64], z_fast: &[f64], cfg: &AggregationConfig) -> Result<Vec<f64>> {
    let weights = match cfg.mode {
        AggregationMode::Entropy => {
            let hs = entropy(&softmax(z_slow))?;
            let hf = entropy(&softmax(z_fast))?;
            aggregation_weights(hs, hf, cfg.gamma)
        }
        _ => (0.5, 0.5),
    };
    aggregate_logits(z_slow, z_fast, weights, cfg.mode)
}

/// Class prediction for one sample. Session 1 (or an absent fast learner)
/// uses the slow logits alone.
pub fn predict(z_slow: &[f64], z_fast: Option<&[f64]>, cfg: &AggregationConfig, session: usize) -> Result<usize> {
    match z_fast {
        Some(zf) if session > 1 => Ok(argmax(&fuse(z_slow, zf, cfg)?)),
        _ => Ok(argmax(z_slow)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(entropy(&[0.6, 0.6]).is_err());
        assert!(entropy(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(aggregation_weights(0.7, 0.7, 1.0), (0.5, 0.5));
        assert_eq!(aggregation_weights(0.1, 2.0, 0.0), (0.5, 0.5));
        let (s, f) = aggregation_weights(0.0, 2f64.ln(), 1.0);
        assert!((s - 2.0 / 3.0).abs() < 1e-15 && (f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn combination_examples() {
        let (zs, zf) = ([1.0, -2.0, 3.0], [0.5, 4.0, -1.0]);
        assert_eq!(aggregate_logits(&zs, &zf, (1.0, 0.0), AggregationMode::Entropy).unwrap(), zs.to_vec());
        assert_eq!(aggregate_logits(&zs, &zf, (0.5, 0.5), AggregationMode::Entropy).unwrap(), vec![0.75, 1.0, 1.0]);
        assert_eq!(aggregate_logits(&zs, &zf, (0.5, 0.5), AggregationMode::Add).unwrap(), vec![1.5, 2.0, 2.0]);
        assert_eq!(aggregate_logits(&zs, &zf, (0.5, 0.5), AggregationMode::Max).unwrap(), vec![1.0, 4.0, 3.0]);
        assert!(aggregate_logits(&zs, &zf[..2], (0.5, 0.5), AggregationMode::Add).is_err());
    }

    #[test]
    fn session_one_ignores_fast() {
        let cfg = AggregationConfig::default();
        let zs = [0.1, 0.9];
        let zf = [5.0, -5.0];
        assert_eq!(predict(&zs, Some(&zf), &cfg, 1).unwrap(), 1);
        assert_eq!(predict(&zs, None, &cfg, 3).unwrap(), 1);
        assert_eq!(predict(&zs, Some(&zf), &AggregationConfig { mode: AggregationMode::Add, ..cfg }, 2).unwrap(), 0);
    }

    #[test]
    fn identical_logits_agree_under_every_mode() {
        let z = [0.3, 2.0, 2.0, -1.0];
        for mode in [AggregationMode::Entropy, AggregationMode::Add, AggregationMode::Max] {
            assert_eq!(predict(&z, Some(&z), &AggregationConfig { gamma: 1.0, mode }, 2).unwrap(), 1);
        }
    }

    #[test]
    fn hard_selection_follows_confident_learner() {
        let mut rng = Rng::new(77);
        let cfg = AggregationConfig { gamma: 1e3, mode: AggregationMode::Entropy };
        let mut checked = 0;
        while checked < 200 {
            let zs: Vec<f64> = (0..5).map(|_| 4.0 * rng.normal()).collect();
            let zf: Vec<f64> = (0..5).map(|_| 4.0 * rng.normal()).collect();
            let hs = entropy(&softmax(&zs)).unwrap();
            let hf = entropy(&softmax(&zf)).unwrap();
            if hs >= hf - 0.1 {
                continue;
            }
            let fused = fuse(&zs, &zf, &cfg).unwrap();
            assert!(fused.iter().zip(&zs).all(|(a, b)| (a - b).abs() <= 1e-6 * (1.0 + b.abs()) + 1e-6));
            assert_eq!(predict(&zs, Some(&zf), &cfg, 2).unwrap(), argmax(&zs));
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn weights_form_a_convex_pair(hs in 0.0f64..10.0, hf in 0.0f64..10.0, gamma in 0.0f64..50.0, shift in -5.0f64..5.0) {
            let (a, b) = aggregation_weights(hs, hf, gamma);
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            let (a2, b2) = aggregation_weights(hs + shift.abs(), hf + shift.abs(), gamma);
            prop_assert!((a - a2).abs() <= 1e-12 && (b - b2).abs() <= 1e-12);
        }

        #[test]
        fn weight_decreases_with_own_entropy(hs in 0.0f64..5.0, hf in 0.0f64..5.0, bump in 0.01f64..1.0, gamma in 0.1f64..5.0) {
            let (a, _) = aggregation_weights(hs, hf, gamma);
            let (a2, _) = aggregation_weights(hs + bump, hf, gamma);
            prop_assert!(a2 < a);
        }

        #[test]
        fn entropy_fusion_stays_between_inputs(zs in prop::collection::vec(-10.0f64..10.0, 4), zf in prop::collection::vec(-10.0f64..10.0, 4), gamma in 0.0f64..10.0) {
            let fused = fuse(&zs, &zf, &AggregationConfig { gamma, mode: AggregationMode::Entropy }).unwrap();
            for i in 0..4 {
                let lo = zs[i].min(zf[i]) - 1e-12;
                let hi = zs[i].max(zf[i]) + 1e-12;
                prop_assert!(fused[i] >= lo && fused[i] <= hi);
            }
        }
    }
}
