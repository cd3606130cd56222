//! Reconstruction, sparsity, density and downstream metrics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};

/// Lower edges of the log10-frequency histogram bins; the last bin is
/// `[-1, 0]` inclusive.
pub const DENSITY_BIN_EDGES: [f64; 6] = [-6.0, -5.0, -4.0, -3.0, -2.0, -1.0];

/// Features firing on fewer than this fraction of samples count as rare.
pub const RARE_FREQUENCY: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    pub mse: f64,
    pub cosine: f64,
    pub explained_variance: f64,
    /// Mean of `‖x̂‖ / ‖x‖`.
    pub l2_ratio: f64,
    /// Samples with `‖x‖ = 0` (or `‖x̂‖ = 0` for cosine), skipped where
    /// undefined.
    pub zero_norm_samples: usize,
}

fn check_pair(x: &ArrayView2<f64>, x_hat: &ArrayView2<f64>) -> Result<()> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "x is {:?} but x_hat is {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Shape(format!("need at least 2 samples, got {}", x.nrows())));
    }
    Ok(())
}

pub fn reconstruction_metrics(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<Reconstruction> {
    check_pair(&x, &x_hat)?;
    let count = x.nrows();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let (mut sse, mut sst) = (0.0, 0.0);
    let (mut cos_sum, mut cos_count) = (0.0, 0usize);
    let (mut ratio_sum, mut ratio_count) = (0.0, 0usize);
    let mut zero = 0;
    for (a, b) in x.outer_iter().zip(x_hat.outer_iter()) {
        let (mut dot, mut aa, mut bb, mut err) = (0.0, 0.0, 0.0, 0.0);
        for ((&u, &v), &mu) in a.iter().zip(b.iter()).zip(mean.iter()) {
            dot += u * v;
            aa += u * u;
            bb += v * v;
            err += (u - v) * (u - v);
            sst += (u - mu) * (u - mu);
        }
        sse += err;
        let (na, nb) = (aa.sqrt(), bb.sqrt());
        if na > 0.0 {
            ratio_sum += nb / na;
            ratio_count += 1;
            if nb > 0.0 {
                cos_sum += dot / (na * nb);
                cos_count += 1;
            } else {
                zero += 1;
            }
        } else {
            zero += 1;
        }
    }
    let explained_variance = if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN };
    let avg = |s: f64, c: usize| if c > 0 { s / c as f64 } else { f64::NAN };
    Ok(Reconstruction {
        mse: sse / count as f64,
        cosine: avg(cos_sum, cos_count),
        explained_variance,
        l2_ratio: avg(ratio_sum, ratio_count),
        zero_norm_samples: zero,
    })
}

/// Mean per-sample count of positive entries and mean per-sample L1 norm.
pub fn sparsity_metrics(features: ArrayView2<f64>) -> (f64, f64) {
    let count = features.nrows().max(1) as f64;
    let (mut l0, mut l1) = (0usize, 0.0);
    for row in features.outer_iter() {
        for &v in row {
            if v > 0.0 {
                l0 += 1;
            }
            l1 += v.abs();
        }
    }
    (l0 as f64 / count, l1 / count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDensity {
    pub frequency: Vec<f64>,
    /// Counts over [`DENSITY_BIN_EDGES`]; dead features are not binned.
    pub histogram: Vec<usize>,
    pub dead_count: usize,
    pub rare_count: usize,
}

/// Accumulates firing counts over batches of features.
#[derive(Debug, Clone)]
pub struct DensityCounter {
    fires: Vec<u64>,
    samples: u64,
}

impl DensityCounter {
    pub fn new(n: usize) -> Self {
        Self {
            fires: vec![0; n],
            samples: 0,
        }
    }

    pub fn update(&mut self, features: ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.fires.len() {
            return Err(Error::Shape(format!(
                "density counter has {} features, batch has {}",
                self.fires.len(),
                features.ncols()
            )));
        }
        for row in features.outer_iter() {
            for (c, &v) in self.fires.iter_mut().zip(row) {
                if v > 0.0 {
                    *c += 1;
                }
            }
        }
        self.samples += features.nrows() as u64;
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureDensity> {
        if self.samples == 0 {
            return Err(Error::Shape("feature density needs at least one sample".into()));
        }
        let frequency: Vec<f64> = self.fires.iter().map(|&c| c as f64 / self.samples as f64).collect();
        let mut histogram = vec![0; DENSITY_BIN_EDGES.len()];
        let (mut dead_count, mut rare_count) = (0, 0);
        for &f in &frequency {
            if f == 0.0 {
                dead_count += 1;
                continue;
            }
            if f < RARE_FREQUENCY {
                rare_count += 1;
            }
            let bin = DENSITY_BIN_EDGES.iter().rposition(|&e| f.log10() >= e).unwrap_or(0);
            histogram[bin] += 1;
        }
        Ok(FeatureDensity {
            frequency,
            histogram,
            dead_count,
            rare_count,
        })
    }
}

pub fn feature_density(features: ArrayView2<f64>) -> Result<FeatureDensity> {
    let mut counter = DensityCounter::new(features.ncols());
    counter.update(features)?;
    counter.finish()
}

/// Random linear softmax classifier standing in for a downstream model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHead {
    /// `vocab × d`, standard normal entries.
    pub w_head: Array2<f64>,
}

pub const DEFAULT_VOCAB: usize = 32;

impl SyntheticHead {
    pub fn new(d: usize, vocab: usize, seed: u64) -> Result<Self> {
        if d == 0 || vocab < 2 {
            return Err(Error::config(
                "head_vocab",
                format!("need vocab >= 2 and d >= 1, got {vocab} and {d}"),
            ));
        }
        let mut rng = stream(seed, domain::HEAD, 0);
        let w_head = Array2::from_shape_simple_fn((vocab, d), || StandardNormal.sample(&mut rng));
        Ok(Self { w_head })
    }

    pub fn vocab(&self) -> usize {
        self.w_head.nrows()
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w_head.t())
    }

    /// Argmax class on each row of `x`, ties to the lowest class.
    pub fn teacher_labels(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.logits(x)
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn mean_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| -log_softmax(row)[y])
        .sum();
    total / labels.len() as f64
}

fn mean_kl(p_logits: &Array2<f64>, q_logits: &Array2<f64>) -> f64 {
    let total: f64 = p_logits
        .outer_iter()
        .zip(q_logits.outer_iter())
        .map(|(p, q)| {
            let (lp, lq) = (log_softmax(p), log_softmax(q));
            lp.iter().zip(lq.iter()).map(|(&a, &b)| a.exp() * (a - b)).sum::<f64>()
        })
        .sum();
    total / p_logits.nrows() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Downstream {
    pub ce_score: Option<f64>,
    pub kl_score: Option<f64>,
    /// Why a score is missing.
    pub note: Option<String>,
    pub h_orig: f64,
    pub h_recon: f64,
    pub h_zero: f64,
}

/// CE score `(H* − H₀)/(H_orig − H₀)` and KL score `1 − KL*/KL₀` where the
/// subscripts denote evaluating the head on `x`, `x̂` and the zero vector.
pub fn downstream_scores(
    head: &SyntheticHead,
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    labels: &[usize],
) -> Result<Downstream> {
    if x.dim() != x_hat.dim() || x.nrows() != labels.len() || x.nrows() == 0 {
        return Err(Error::Shape(format!(
            "x {:?}, x_hat {:?}, {} labels",
            x.dim(),
            x_hat.dim(),
            labels.len()
        )));
    }
    if x.ncols() != head.w_head.ncols() {
        return Err(Error::Shape(format!(
            "head expects d = {}, got {}",
            head.w_head.ncols(),
            x.ncols()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= head.vocab()) {
        return Err(Error::Shape(format!("label {bad} outside vocab {}", head.vocab())));
    }
    let orig = head.logits(x);
    let recon = head.logits(x_hat);
    let zero = head.logits(Array2::zeros(x.dim()).view());
    let h_orig = mean_cross_entropy(&orig, labels);
    let h_recon = mean_cross_entropy(&recon, labels);
    let h_zero = mean_cross_entropy(&zero, labels);
    let kl_recon = mean_kl(&orig, &recon);
    let kl_zero = mean_kl(&orig, &zero);

    let mut notes = Vec::new();
    let ce_score = if h_orig != h_zero {
        // `+ 0.0` turns a -0.0 at the zero anchor into 0.0
        Some((h_recon - h_zero) / (h_orig - h_zero) + 0.0)
    } else {
        notes.push("ce_score undefined: H_orig equals H_0");
        None
    };
    let kl_score = if kl_zero > 0.0 {
        Some(1.0 - kl_recon / kl_zero)
    } else {
        notes.push("kl_score undefined: KL_0 is zero");
        None
    };
    Ok(Downstream {
        ce_score,
        kl_score,
        note: (!notes.is_empty()).then(|| notes.join("; ")),
        h_orig,
        h_recon,
        h_zero,
    })
}

/// All unsupervised metrics for one run. Field names are the report keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsupReport {
    pub mse: f64,
    pub cosine: f64,
    pub explained_variance: f64,
    /// `‖x̂‖ / ‖x‖`.
    pub l2_ratio: f64,
    pub l0_mean: f64,
    pub l1_mean: f64,
    pub ce_score: Option<f64>,
    pub kl_score: Option<f64>,
    pub dead_feature_count: usize,
    pub rare_feature_count: usize,
    pub density_histogram: Vec<usize>,
    pub zero_norm_samples: usize,
    pub notes: Vec<String>,
}

pub fn unsup_report(
    x: ArrayView2<f64>,
    x_hat: ArrayView2<f64>,
    features: ArrayView2<f64>,
    head: &SyntheticHead,
) -> Result<UnsupReport> {
    let rec = reconstruction_metrics(x, x_hat)?;
    let (l0_mean, l1_mean) = sparsity_metrics(features);
    let density = feature_density(features)?;
    let labels = head.teacher_labels(x);
    let down = downstream_scores(head, x, x_hat, &labels)?;
    let mut notes = Vec::new();
    if rec.zero_norm_samples > 0 {
        notes.push(format!(
            "{} zero-norm samples excluded from cosine/l2_ratio",
            rec.zero_norm_samples
        ));
    }
    notes.extend(down.note);
    Ok(UnsupReport {
        mse: rec.mse,
        cosine: rec.cosine,
        explained_variance: rec.explained_variance,
        l2_ratio: rec.l2_ratio,
        l0_mean,
        l1_mean,
        ce_score: down.ce_score,
        kl_score: down.kl_score,
        dead_feature_count: density.dead_count,
        rare_feature_count: density.rare_count,
        density_histogram: density.histogram,
        zero_norm_samples: rec.zero_norm_samples,
        notes,
    })
}
