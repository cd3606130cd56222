//! Adaptive temporal masking.
//!
//! Per-feature importance is tracked with exponential moving averages of
//! activation magnitude and reconstruction contribution; their product is
//! the importance score. Each step a threshold `θ = μ + c·σ` over the scores
//! sets a drop probability `p_j = 1 − exp(−r (θ − s_j)/θ)` (clamped to
//! `[0, 1]`), a Bernoulli mask is drawn from it, and the `min_keep` most
//! important features are always kept.

use std::fmt;

use ndarray::{Array1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Threshold below which `θ` is treated as zero and nothing is masked.
pub const THETA_EPS: f64 = 1e-12;

/// EMA state for every latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTracker {
    pub mag_ema: Array1<f32>,
    pub recon_ema: Array1<f32>,
    /// Fraction of samples where the feature fires; diagnostic only.
    pub freq_ema: Array1<f32>,
    pub beta: f64,
    pub step: u64,
}

impl ImportanceTracker {
    pub fn new(n: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config("beta", format!("must be in (0, 1), got {beta}")));
        }
        Ok(Self {
            mag_ema: Array1::zeros(n),
            recon_ema: Array1::zeros(n),
            freq_ema: Array1::zeros(n),
            beta,
            step: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.mag_ema.len()
    }

    /// Folds one batch into the averages. `features` are post-activation,
    /// pre-mask values; `recon_grad_features` is `∂L_recon/∂f`.
    pub fn update<F: Real>(&mut self, features: ArrayView2<F>, recon_grad_features: ArrayView2<F>) -> Result<()> {
        let n = self.n();
        if features.ncols() != n || recon_grad_features.dim() != features.dim() {
            return Err(Error::Shape(format!(
                "tracker has {n} features, got {:?} and {:?}",
                features.dim(),
                recon_grad_features.dim()
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("features"));
        }
        if recon_grad_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("recon_grad_features"));
        }
        let rows = features.nrows() as f64;
        let (beta, keep) = (self.beta, 1.0 - self.beta);
        for j in 0..n {
            let col = features.index_axis(Axis(1), j);
            let mag = col.iter().map(|v| v.as_f64().abs()).sum::<f64>() / rows;
            let fired = col.iter().filter(|v| **v > F::zero()).count() as f64 / rows;
            let contrib = recon_grad_features
                .index_axis(Axis(1), j)
                .iter()
                .map(|v| v.as_f64().abs())
                .sum::<f64>()
                / rows;
            self.mag_ema[j] = (beta * self.mag_ema[j] as f64 + keep * mag) as f32;
            self.recon_ema[j] = (beta * self.recon_ema[j] as f64 + keep * contrib) as f32;
            self.freq_ema[j] = (beta * self.freq_ema[j] as f64 + keep * fired) as f32;
        }
        self.step += 1;
        Ok(())
    }

    /// `magnitude EMA ⊙ reconstruction EMA`.
    pub fn importance(&self) -> Vec<f64> {
        self.mag_ema
            .iter()
            .zip(self.recon_ema.iter())
            .map(|(&m, &r)| m as f64 * r as f64)
            .collect()
    }
}

/// `mean(scores) + c · std(scores)` with the population standard deviation.
pub fn threshold(scores: &[f64], c: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let len = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / len;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / len;
    mean + c * var.sqrt()
}

/// Per-feature drop probabilities.
pub fn mask_probabilities(scores: &[f64], theta: f64, r: f64) -> Vec<f64> {
    if theta <= THETA_EPS {
        return vec![0.0; scores.len()];
    }
    scores
        .iter()
        .map(|s| (1.0 - (-r * (theta - s) / theta).exp()).clamp(0.0, 1.0))
        .collect()
}

/// Indices of the `count` highest scores, ties broken by lower index.
pub fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Keep feature `j` iff a uniform draw exceeds `p_j`; draws happen in index
/// order. The `min_keep` highest-scoring features are then forced on.
pub fn sample_mask<R: Rng + ?Sized>(p: &[f64], scores: &[f64], min_keep: usize, rng: &mut R) -> Vec<bool> {
    let mut mask: Vec<bool> = p.iter().map(|&pj| rng.random::<f64>() > pj).collect();
    for j in top_indices(scores, min_keep.min(scores.len())) {
        mask[j] = true;
    }
    mask
}

/// Deterministic inference mask: keep iff the drop probability is below 1/2.
pub fn eval_mask(tracker: &ImportanceTracker, schedule: &MaskSchedule) -> Vec<bool> {
    let scores = tracker.importance();
    let theta = threshold(&scores, schedule.c_base);
    mask_probabilities(&scores, theta, schedule.r)
        .iter()
        .map(|&p| p < 0.5)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Normal,
    Pruning,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Normal => "normal",
            Phase::Pruning => "pruning",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "normal" => Ok(Phase::Normal),
            "pruning" => Ok(Phase::Pruning),
            other => Err(Error::config("phase", format!("unknown phase `{other}`"))),
        }
    }
}

/// Warmup, threshold multipliers and pruning cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSchedule {
    /// EMA decay of the importance tracker.
    pub beta: f64,
    /// Steps with no masking at all.
    pub warmup_steps: u64,
    /// Pruning phases recur every `prune_period` steps after warmup...
    pub prune_period: u64,
    /// ...and last `prune_duration` steps.
    pub prune_duration: u64,
    pub c_base: f64,
    pub c_prune: f64,
    /// Sharpness of the drop-probability curve.
    pub r: f64,
    pub min_keep: usize,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            beta: 0.99,
            warmup_steps: 1000,
            prune_period: 1000,
            prune_duration: 100,
            c_base: 0.0,
            c_prune: 1.0,
            r: 0.5,
            min_keep: 32,
        }
    }
}

impl MaskSchedule {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config("beta", format!("must be in (0, 1), got {}", self.beta)));
        }
        if !(self.prune_duration > 0 && self.prune_duration < self.prune_period) {
            return Err(Error::config(
                "prune_duration",
                format!("need 0 < prune_duration < prune_period ({})", self.prune_period),
            ));
        }
        if !(self.c_prune > self.c_base) {
            return Err(Error::config("c_prune", "must exceed c_base"));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::config("r", "must be > 0"));
        }
        if self.min_keep == 0 || self.min_keep > n {
            return Err(Error::config(
                "min_keep",
                format!("must be in 1..={n}, got {}", self.min_keep),
            ));
        }
        Ok(())
    }

    /// Phase and threshold multiplier at `step`. Pruning windows are
    /// measured from the end of warmup.
    pub fn state(&self, step: u64) -> (Phase, f64) {
        if step < self.warmup_steps {
            return (Phase::Warmup, self.c_base);
        }
        if (step - self.warmup_steps) % self.prune_period < self.prune_duration {
            (Phase::Pruning, self.c_prune)
        } else {
            (Phase::Normal, self.c_base)
        }
    }
}

/// Everything decided about masking for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMask {
    pub phase: Phase,
    pub theta: f64,
    pub mask: Vec<bool>,
}

impl StepMask {
    pub fn masked_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| !m).count() as f64 / self.mask.len().max(1) as f64
    }
}

/// Computes the mask for `step` from the tracker's current state.
pub fn plan_step<R: Rng + ?Sized>(
    tracker: &ImportanceTracker,
    schedule: &MaskSchedule,
    step: u64,
    rng: &mut R,
) -> StepMask {
    let (phase, c) = schedule.state(step);
    let scores = tracker.importance();
    let theta = threshold(&scores, c);
    let mask = match phase {
        Phase::Warmup => vec![true; scores.len()],
        _ => {
            let p = mask_probabilities(&scores, theta, schedule.r);
            sample_mask(&p, &scores, schedule.min_keep, rng)
        }
    };
    StepMask { phase, theta, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn single_step_ema() {
        let mut t = ImportanceTracker::new(1, 0.99).unwrap();
        let f = Array2::from_elem((4, 1), 1.0f32);
        t.update(f.view(), f.view()).unwrap();
        assert!((t.mag_ema[0] - 0.01).abs() < 1e-7);
        assert!((t.freq_ema[0] - 0.01).abs() < 1e-7);
        assert_eq!(t.step, 1);
    }

    #[test]
    fn ema_converges_to_constant_input() {
        let mut t = ImportanceTracker::new(2, 0.99).unwrap();
        let f = Array2::from_shape_vec((2, 2), vec![0.5f32, 2.0, 0.5, 2.0]).unwrap();
        for _ in 0..1000 {
            t.update(f.view(), f.view()).unwrap();
        }
        // closed form: target · (1 − β^T)
        let expected = |target: f64| target * (1.0 - 0.99f64.powi(1000));
        assert!((t.mag_ema[0] as f64 - expected(0.5)).abs() < 1e-5);
        assert!((t.mag_ema[1] as f64 - 2.0).abs() < 1e-4);
        assert!((t.recon_ema[1] as f64 - expected(2.0)).abs() < 1e-5);
    }

    #[test]
    fn zero_batch_decays_by_beta() {
        let mut t = ImportanceTracker::new(3, 0.9).unwrap();
        t.mag_ema = Array1::from(vec![1.0f32, 0.5, 0.25]);
        let before = t.mag_ema.clone();
        let z = Array2::<f32>::zeros((5, 3));
        t.update(z.view(), z.view()).unwrap();
        for j in 0..3 {
            assert_eq!(t.mag_ema[j], (0.9 * before[j] as f64) as f32);
        }
    }

    #[test]
    fn tracker_rejects_nan_and_bad_shapes() {
        let mut t = ImportanceTracker::new(2, 0.9).unwrap();
        let mut f = Array2::<f32>::zeros((2, 2));
        f[[1, 1]] = f32::NAN;
        let ok = Array2::<f32>::zeros((2, 2));
        assert!(matches!(t.update(f.view(), ok.view()), Err(Error::Numeric { .. })));
        let wide = Array2::<f32>::zeros((2, 3));
        assert!(t.update(wide.view(), wide.view()).is_err());
        assert_eq!(t.step, 0);
        assert!(ImportanceTracker::new(2, 1.0).is_err());
    }

    #[test]
    fn importance_is_elementwise_product() {
        let mut t = ImportanceTracker::new(2, 0.9).unwrap();
        t.mag_ema = Array1::from(vec![2.0f32, 0.0]);
        t.recon_ema = Array1::from(vec![3.0f32, 5.0]);
        assert_eq!(t.importance(), vec![6.0, 0.0]);
    }

    #[test]
    fn threshold_values() {
        let theta = threshold(&[1.0, 2.0, 3.0], 1.0);
        assert!((theta - (2.0 + (2.0f64 / 3.0).sqrt())).abs() < 1e-12);
        assert!((theta - 2.81650).abs() < 1e-5);
        assert_eq!(threshold(&[1.0, 2.0, 3.0], 0.0), 2.0);
        assert_eq!(threshold(&[4.0; 5], 3.0), 4.0);
    }

    #[test]
    fn probability_values() {
        let p = mask_probabilities(&[1.0, 0.0, 2.0], 1.0, 0.5);
        assert_eq!(p[0], 0.0);
        assert!((p[1] - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((p[1] - 0.39347).abs() < 1e-5);
        assert_eq!(p[2], 0.0);
        assert_eq!(mask_probabilities(&[0.0, 0.0], 0.0, 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn mask_floor_and_identity() {
        let scores = [0.1, 0.9, 0.5, 0.9, 0.2];
        let mut rng = stream(0, 0, 0);
        assert_eq!(sample_mask(&[0.0; 5], &scores, 1, &mut rng), vec![true; 5]);
        let m = sample_mask(&[1.0; 5], &scores, 3, &mut rng);
        assert_eq!(m, vec![false, true, true, true, false]);
        // ties between 1 and 3 resolve to the lower index
        let m = sample_mask(&[1.0; 5], &scores, 1, &mut rng);
        assert_eq!(m, vec![false, true, false, false, false]);
    }

    #[test]
    fn mask_is_reproducible() {
        let p = [0.3, 0.6, 0.1, 0.9];
        let s = [1.0, 2.0, 3.0, 4.0];
        let a = sample_mask(&p, &s, 1, &mut stream(4, 8, 2));
        let b = sample_mask(&p, &s, 1, &mut stream(4, 8, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_boundaries() {
        let s = MaskSchedule::default();
        assert_eq!(s.state(999).0, Phase::Warmup);
        assert_eq!(s.state(1000), (Phase::Pruning, 1.0));
        assert_eq!(s.state(1099), (Phase::Pruning, 1.0));
        assert_eq!(s.state(1100), (Phase::Normal, 0.0));
        assert_eq!(s.state(1000 + 550), (Phase::Normal, 0.0));
        assert_eq!(s.state(2000).0, Phase::Pruning);
    }

    #[test]
    fn schedule_validation() {
        let s = MaskSchedule::default();
        assert!(s.validate(256).is_ok());
        assert!(s.validate(16).is_err());
        let bad = MaskSchedule {
            prune_duration: 1000,
            ..MaskSchedule::default()
        };
        assert!(bad.validate(256).is_err());
    }

    #[test]
    fn warmup_plan_keeps_everything() {
        let mut t = ImportanceTracker::new(4, 0.9).unwrap();
        t.mag_ema = Array1::from(vec![1.0f32, 0.0, 0.0, 0.0]);
        t.recon_ema = Array1::from(vec![1.0f32; 4]);
        let s = MaskSchedule {
            min_keep: 1,
            ..MaskSchedule::default()
        };
        let plan = plan_step(&t, &s, 10, &mut stream(0, 0, 0));
        assert_eq!(plan.phase, Phase::Warmup);
        assert_eq!(plan.masked_fraction(), 0.0);
    }

    proptest! {
        #[test]
        fn probability_monotone_in_score(
            theta in 1e-6f64..10.0,
            r in 0.01f64..5.0,
            a in 0.0f64..20.0,
            b in 0.0f64..20.0,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p = mask_probabilities(&[lo, hi], theta, r);
            prop_assert!(p[0] >= p[1]);
            prop_assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        }

        #[test]
        fn permuting_scores_permutes_importance(mags in proptest::collection::vec(0.0f32..5.0, 6), shift in 0usize..6) {
            let mut t = ImportanceTracker::new(6, 0.9).unwrap();
            t.mag_ema = Array1::from(mags.clone());
            t.recon_ema = Array1::from_shape_fn(6, |j| j as f32 + 0.5);
            let base = t.importance();
            let perm: Vec<usize> = (0..6).map(|j| (j + shift) % 6).collect();
            let mut u = t.clone();
            u.mag_ema = perm.iter().map(|&j| t.mag_ema[j]).collect();
            u.recon_ema = perm.iter().map(|&j| t.recon_ema[j]).collect();
            let permuted = u.importance();
            for (i, &j) in perm.iter().enumerate() {
                prop_assert_eq!(permuted[i], base[j]);
            }
        }

        #[test]
        fn ema_contraction(
            init in 0.0f32..100.0,
            inputs in proptest::collection::vec(0.0f32..3.0, 1..50),
        ) {
            let beta = 0.9;
            let mut t = ImportanceTracker::new(1, beta).unwrap();
            t.mag_ema[0] = init;
            let bound = inputs.iter().cloned().fold(0.0f32, f32::max) as f64;
            for &v in &inputs {
                let f = Array2::from_elem((1, 1), v);
                t.update(f.view(), f.view()).unwrap();
            }
            let limit = bound + beta.powi(inputs.len() as i32) * init as f64;
            prop_assert!(t.mag_ema[0] as f64 <= limit * (1.0 + 1e-6) + 1e-6);
            prop_assert!((0.0..=1.0).contains(&t.freq_ema[0]));
        }
    }
}
