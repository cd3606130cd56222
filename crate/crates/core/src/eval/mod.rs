//! Evaluation of a trained run on the held-out split.

pub mod probing;
pub mod unsup;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{CodeMatrix, GroundTruthDictionary};
use crate::error::{Error, Result};
use crate::sae::{self, ActivationKind, SaeParams};
use crate::trainer::RunArtifacts;

pub use probing::{AbsorptionConfig, AbsorptionReport, ProbeConfig, ProbeTask, SparseProbeReport};
pub use unsup::{SyntheticHead, UnsupReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub head_vocab: usize,
    pub k_sparse: usize,
    pub absorption: AbsorptionConfig,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            head_vocab: unsup::DEFAULT_VOCAB,
            k_sparse: 1,
            absorption: AbsorptionConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_vocab < 2 {
            return Err(Error::config("head_vocab", "must be at least 2"));
        }
        if self.k_sparse < 1 {
            return Err(Error::config("k_sparse", "must be at least 1"));
        }
        if self.probe.iterations == 0 || !(self.probe.step > 0.0) || !(self.probe.l2_penalty >= 0.0) {
            return Err(Error::config(
                "probe",
                "need iterations >= 1, step > 0, l2_penalty >= 0",
            ));
        }
        self.absorption.validate()
    }
}

/// An autoencoder frozen for evaluation, in double precision.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub params: SaeParams<f64>,
    pub kind: ActivationKind<f64>,
    /// 0/1 inference mask.
    pub mask: Array1<f64>,
}

impl EvalModel {
    pub fn from_run(run: &RunArtifacts) -> Self {
        Self {
            params: run.params.cast(),
            kind: run.kind.cast(),
            mask: run.eval_mask().mapv(|v| v as f64),
        }
    }

    pub fn features(&self, x: ArrayView2<f64>) -> Array2<f64> {
        sae::encode(&self.params, x, &self.kind) * &self.mask
    }

    pub fn reconstruct(&self, features: ArrayView2<f64>) -> Array2<f64> {
        sae::decode(&self.params, features)
    }
}

/// One binary task per parent feature: is the parent active?
pub fn parent_tasks(dict: &GroundTruthDictionary, codes: &CodeMatrix) -> Vec<ProbeTask> {
    dict.parents()
        .into_iter()
        .map(|p| ProbeTask {
            feature: p,
            labels: codes.active(p),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub unsup: UnsupReport,
    pub absorption: AbsorptionReport,
    pub sparse_probing: SparseProbeReport,
}

/// Computes every metric for `model` on `x` (with ground-truth `codes`).
pub fn evaluate(
    model: &EvalModel,
    x: ArrayView2<f64>,
    codes: &CodeMatrix,
    dict: &GroundTruthDictionary,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Evaluation> {
    cfg.validate()?;
    if x.ncols() != model.params.d() {
        return Err(Error::Shape(format!(
            "model has d = {}, data has {}",
            model.params.d(),
            x.ncols()
        )));
    }
    if codes.codes.nrows() != x.nrows() || codes.codes.ncols() != dict.atom_count() {
        return Err(Error::Shape("codes do not match activations or dictionary".into()));
    }
    let features = model.features(x);
    let x_hat = model.reconstruct(features.view());
    let head = SyntheticHead::new(x.ncols(), cfg.head_vocab, seed)?;
    let unsup = unsup::unsup_report(x, x_hat.view(), features.view(), &head)?;

    let tasks = parent_tasks(dict, codes);
    let w_dec = model.params.w_dec.view();
    let absorption = probing::absorption_report(
        probing::AbsorptionInputs {
            x,
            features: features.view(),
            w_dec,
        },
        &tasks,
        &cfg.absorption,
        &cfg.probe,
        seed,
    )?;
    let sparse_probing = probing::sparse_probe_report(features.view(), &tasks, cfg.k_sparse, &cfg.probe, seed)?;
    Ok(Evaluation {
        unsup,
        absorption,
        sparse_probing,
    })
}
