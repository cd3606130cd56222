//! Run reports and multi-run comparison tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::probing::{AbsorptionReport, SparseProbeReport};
use crate::eval::{Evaluation, UnsupReport};
use crate::trainer::Arch;

pub const SCHEMA_VERSION: u32 = 1;

/// What was evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunIdentity {
    pub arch: Arch,
    pub seed: u64,
    pub d: usize,
    pub n: usize,
    pub total_steps: u64,
    pub config_hash: String,
    pub dataset_hash: String,
}

/// Published numbers for a model of the same architecture trained on a
/// large language model. Carried as annotations only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValues {
    pub absorption: f64,
    pub mse: f64,
    pub cosine: f64,
    pub kl_score: f64,
    pub ce_score: f64,
    pub explained_variance: f64,
    pub l0: f64,
    pub l1: f64,
    pub sparse_probing_top1: f64,
}

impl ReferenceValues {
    pub fn for_arch(arch: Arch) -> Self {
        let v = match arch {
            Arch::Atm => [0.0068, 0.5508, 0.9727, 0.9965, 0.9967, 0.9102, 3280.0, 1704.0, 0.7161],
            Arch::Topk => [0.1402, 2.53125, 0.875, 0.9565, 0.9556, 0.6016, 40.0, 366.0, 0.7698],
            Arch::Jumprelu => [0.0114, 1.6719, 0.9297, 0.9945, 0.9951, 0.7344, 2666.0, 4832.0, 0.7154],
            Arch::Vanilla => [0.0161, 0.0898, 0.9961, 0.9996, 1.0, 0.9844, 8724.0, 12544.0, 0.6379],
        };
        Self {
            absorption: v[0],
            mse: v[1],
            cosine: v[2],
            kl_score: v[3],
            ce_score: v[4],
            explained_variance: v[5],
            l0: v[6],
            l1: v[7],
            sparse_probing_top1: v[8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Unix seconds; the only field that varies between identical runs.
    pub generated_at: u64,
    pub run: RunIdentity,
    pub unsup: UnsupReport,
    pub absorption: AbsorptionReport,
    pub sparse_probing: SparseProbeReport,
    pub reference: ReferenceValues,
}

impl MetricsReport {
    pub fn new(run: RunIdentity, eval: Evaluation, generated_at: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            generated_at,
            reference: ReferenceValues::for_arch(run.arch),
            run,
            unsup: eval.unsup,
            absorption: eval.absorption,
            sparse_probing: eval.sparse_probing,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::format(0, e.to_string()))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                0,
                format!("unsupported report schema {}", report.schema_version),
            ));
        }
        Ok(report)
    }

    /// The comparison metrics, in table order.
    pub fn metric_values(&self) -> [(&'static str, Option<f64>); 9] {
        let u = &self.unsup;
        [
            ("absorption", self.absorption.mean),
            ("mse", Some(u.mse)),
            ("cosine", Some(u.cosine)),
            ("kl_score", u.kl_score),
            ("ce_score", u.ce_score),
            ("explained_variance", Some(u.explained_variance)),
            ("l0", Some(u.l0_mean)),
            ("l1", Some(u.l1_mean)),
            ("sparse_probing_top1", self.sparse_probing.mean_top1),
        ]
    }
}

pub const METRIC_NAMES: [&str; 9] = [
    "absorption",
    "mse",
    "cosine",
    "kl_score",
    "ce_score",
    "explained_variance",
    "l0",
    "l1",
    "sparse_probing_top1",
];

/// One row per metric, one column per report in argument order. Column
/// headers are `<arch>_seed<seed>`; missing values are empty cells.
pub fn compare_csv(reports: &[MetricsReport]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::config(
            "reports",
            format!("need at least 2 reports, got {}", reports.len()),
        ));
    }
    let hash = &reports[0].run.dataset_hash;
    if let Some(other) = reports.iter().find(|r| &r.run.dataset_hash != hash) {
        return Err(Error::config(
            "dataset_hash",
            format!("reports use different datasets ({hash} vs {})", other.run.dataset_hash),
        ));
    }
    let mut out = String::from("metric");
    for r in reports {
        out.push_str(&format!(",{}_seed{}", r.run.arch, r.run.seed));
    }
    out.push('\n');
    let rows: Vec<_> = reports.iter().map(|r| r.metric_values()).collect();
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        out.push_str(name);
        for row in &rows {
            out.push(',');
            if let Some(v) = row[i].1 {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    Ok(out)
}
