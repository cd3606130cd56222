//! Synthetic activation datasets with a known sparse dictionary.
//!
//! Atoms are random unit directions in `R^d`. A subset of atoms is grouped
//! into disjoint `(child, parent)` pairs: whenever a child is active in a
//! sample its parent is active too, which is exactly the structure that
//! invites feature absorption in a sparse autoencoder.

mod io;

pub use io::{
    dataset_hash, decode_matrix, encode_matrix, read_matrix, write_matrix, DatasetMetadata, DATASET_FILES,
    METADATA_FILE, TEST_CODES_FILE, TEST_FILE, TRAIN_CODES_FILE, TRAIN_FILE,
};

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};

/// Range of a nonzero code coefficient.
pub const COEF_MIN: f64 = 0.5;
pub const COEF_MAX: f64 = 2.0;

/// Largest per-atom activation probability after rescaling.
const MAX_RATE: f64 = 0.99;

/// `child ⇒ parent`: a sample with the child active always has the parent active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Implication {
    pub child: usize,
    pub parent: usize,
}

/// Default activation probabilities per atom role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseRates {
    pub parent: f64,
    pub child: f64,
    pub other: f64,
}

impl Default for BaseRates {
    fn default() -> Self {
        Self {
            parent: 0.15,
            child: 0.08,
            other: 0.05,
        }
    }
}

/// Unit-norm atoms (columns of a `d × m` matrix) plus the implication pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthDictionary {
    pub atoms: Array2<f64>,
    pub implications: Vec<Implication>,
    pub base_rates: Vec<f64>,
    pub seed: u64,
}

impl GroundTruthDictionary {
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn parents(&self) -> Vec<usize> {
        self.implications.iter().map(|imp| imp.parent).collect()
    }

    /// Checks every structural invariant; used after loading from disk.
    pub fn validate(&self) -> Result<()> {
        let m = self.atom_count();
        if self.dim() == 0 || m == 0 {
            return Err(Error::config("atoms", "dictionary must be non-empty"));
        }
        for (j, col) in self.atoms.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::config("atoms", format!("column {j} has norm {norm}")));
            }
        }
        if self.base_rates.len() != m {
            return Err(Error::config(
                "base_rates",
                format!("expected {m} entries, found {}", self.base_rates.len()),
            ));
        }
        if let Some(r) = self.base_rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::config("base_rates", format!("rate {r} outside (0, 1)")));
        }
        let mut seen = std::collections::HashSet::new();
        for imp in &self.implications {
            if imp.child >= m || imp.parent >= m {
                return Err(Error::config("implications", format!("{imp:?} out of range")));
            }
            if imp.child == imp.parent {
                return Err(Error::config("implications", format!("{imp:?} is a self loop")));
            }
            if !seen.insert(*imp) {
                return Err(Error::config("implications", format!("duplicate pair {imp:?}")));
            }
        }
        if has_cycle(m, &self.implications) {
            return Err(Error::config("implications", "implication graph has a cycle"));
        }
        Ok(())
    }
}

fn has_cycle(m: usize, implications: &[Implication]) -> bool {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut adj = vec![Vec::new(); m];
    for imp in implications {
        adj[imp.child].push(imp.parent);
    }
    let mut state = vec![0u8; m];
    for start in 0..m {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some((node, next)) = stack.pop() {
            if next < adj[node].len() {
                stack.push((node, next + 1));
                let to = adj[node][next];
                match state[to] {
                    1 => return true,
                    0 => {
                        state[to] = 1;
                        stack.push((to, 0));
                    }
                    _ => {}
                }
            } else {
                state[node] = 2;
            }
        }
    }
    false
}

/// Nonnegative atom coefficients, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub codes: Array2<f64>,
}

impl CodeMatrix {
    /// Number of active atoms in each row.
    pub fn row_l0(&self) -> Vec<usize> {
        self.codes
            .axis_iter(Axis(0))
            .map(|row| row.iter().filter(|&&c| c > 0.0).count())
            .collect()
    }

    /// Whether atom `j` is active in each row.
    pub fn active(&self, j: usize) -> Vec<bool> {
        self.codes.column(j).iter().map(|&c| c > 0.0).collect()
    }
}

/// A `count × d` matrix of activation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub data: Array2<f64>,
}

impl ActivationBatch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "activation batch must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("activations"));
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }
}

/// Draws a dictionary with default base rates.
pub fn build_dictionary(d: usize, m: usize, pairs: usize, seed: u64) -> Result<GroundTruthDictionary> {
    build_dictionary_with_rates(d, m, pairs, seed, BaseRates::default())
}

pub fn build_dictionary_with_rates(
    d: usize,
    m: usize,
    pairs: usize,
    seed: u64,
    rates: BaseRates,
) -> Result<GroundTruthDictionary> {
    if d < 2 {
        return Err(Error::config("d", format!("must be at least 2, got {d}")));
    }
    if m < 1 {
        return Err(Error::config("atoms", "must be at least 1"));
    }
    if 2 * pairs > m {
        return Err(Error::config(
            "pairs",
            format!("{pairs} implication pairs need {} atoms, only {m} available", 2 * pairs),
        ));
    }
    for (field, r) in [
        ("parent_rate", rates.parent),
        ("child_rate", rates.child),
        ("other_rate", rates.other),
    ] {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::config(field, format!("{r} outside (0, 1)")));
        }
    }

    let mut rng = stream(seed, domain::DICTIONARY, 0);
    let mut atoms = Array2::<f64>::zeros((d, m));
    for mut col in atoms.axis_iter_mut(Axis(1)) {
        loop {
            col.mapv_inplace(|_| rng.sample(StandardNormal));
            let norm = col.dot(&col).sqrt();
            if norm > 1e-8 {
                col /= norm;
                break;
            }
        }
    }

    let mut order: Vec<usize> = (0..m).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let implications: Vec<Implication> = order
        .chunks_exact(2)
        .take(pairs)
        .map(|c| Implication {
            child: c[0],
            parent: c[1],
        })
        .collect();

    let mut base_rates = vec![rates.other; m];
    for imp in &implications {
        base_rates[imp.child] = rates.child;
        base_rates[imp.parent] = rates.parent;
    }

    Ok(GroundTruthDictionary {
        atoms,
        implications,
        base_rates,
        seed,
    })
}

fn rates_at(base: &[f64], alpha: f64) -> Vec<f64> {
    base.iter().map(|b| (alpha * b).min(MAX_RATE)).collect()
}

/// Expected row L0 after implication closure, conditioned on the row being
/// nonzero (empty rows are redrawn).
fn expected_l0(dict: &GroundTruthDictionary, q: &[f64]) -> f64 {
    let mut in_pair = vec![false; q.len()];
    let mut total = 0.0;
    for imp in &dict.implications {
        in_pair[imp.child] = true;
        in_pair[imp.parent] = true;
        let (qc, qp) = (q[imp.child], q[imp.parent]);
        total += qc + 1.0 - (1.0 - qc) * (1.0 - qp);
    }
    total += q.iter().zip(&in_pair).filter(|(_, &p)| !p).map(|(q, _)| q).sum::<f64>();
    let p_empty: f64 = q.iter().map(|q| 1.0 - q).product();
    total / (1.0 - p_empty)
}

/// Per-atom activation probabilities rescaled so that the expected number of
/// active atoms per (closed, nonzero) row equals `s_mean`.
pub fn activation_rates(dict: &GroundTruthDictionary, s_mean: f64) -> Result<Vec<f64>> {
    let base = &dict.base_rates;
    let min_base = base.iter().cloned().fold(f64::INFINITY, f64::min);
    let alpha_max = MAX_RATE / min_base;
    let lo_l0 = expected_l0(dict, &rates_at(base, 1e-9));
    let hi_l0 = expected_l0(dict, &rates_at(base, alpha_max));
    if !(s_mean >= lo_l0 && s_mean <= hi_l0) {
        return Err(Error::config(
            "s_mean",
            format!("{s_mean} outside the achievable range [{lo_l0:.3}, {hi_l0:.3}]"),
        ));
    }
    let (mut lo, mut hi) = (1e-9, alpha_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_l0(dict, &rates_at(base, mid)) < s_mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(rates_at(base, 0.5 * (lo + hi)))
}

/// Samples training codes (stream `CODES_TRAIN`).
pub fn sample_codes(dict: &GroundTruthDictionary, count: usize, s_mean: f64, seed: u64) -> Result<CodeMatrix> {
    sample_codes_in_stream(dict, count, s_mean, seed, domain::CODES_TRAIN)
}

pub(crate) fn sample_codes_in_stream(
    dict: &GroundTruthDictionary,
    count: usize,
    s_mean: f64,
    seed: u64,
    stream_domain: u64,
) -> Result<CodeMatrix> {
    if count < 1 {
        return Err(Error::config("count", "must be at least 1"));
    }
    if !(s_mean >= 1.0) {
        return Err(Error::config("s_mean", format!("must be at least 1, got {s_mean}")));
    }
    let q = activation_rates(dict, s_mean)?;
    let m = dict.atom_count();
    let mut codes = Array2::<f64>::zeros((count, m));
    for (i, mut row) in codes.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = stream(seed, stream_domain, i as u64);
        loop {
            for (j, c) in row.iter_mut().enumerate() {
                *c = if rng.random::<f64>() < q[j] {
                    rng.random_range(COEF_MIN..=COEF_MAX)
                } else {
                    0.0
                };
            }
            for imp in &dict.implications {
                if row[imp.child] > 0.0 && row[imp.parent] == 0.0 {
                    row[imp.parent] = rng.random_range(COEF_MIN..=COEF_MAX);
                }
            }
            if row.iter().any(|&c| c > 0.0) {
                break;
            }
        }
    }
    Ok(CodeMatrix { codes })
}

/// `codes · atomsᵀ` plus i.i.d. Gaussian noise (stream `NOISE_TRAIN`).
pub fn render_activations(
    dict: &GroundTruthDictionary,
    codes: &CodeMatrix,
    noise_sigma: f64,
    seed: u64,
) -> Result<ActivationBatch> {
    render_in_stream(dict, codes, noise_sigma, seed, domain::NOISE_TRAIN)
}

pub(crate) fn render_in_stream(
    dict: &GroundTruthDictionary,
    codes: &CodeMatrix,
    noise_sigma: f64,
    seed: u64,
    stream_domain: u64,
) -> Result<ActivationBatch> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma", format!("must be >= 0, got {noise_sigma}")));
    }
    if codes.codes.ncols() != dict.atom_count() {
        return Err(Error::Shape(format!(
            "codes have {} columns, dictionary has {} atoms",
            codes.codes.ncols(),
            dict.atom_count()
        )));
    }
    let mut data = codes.codes.dot(&dict.atoms.t());
    if noise_sigma > 0.0 {
        for (i, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
            let mut rng = stream(seed, stream_domain, i as u64);
            for v in row.iter_mut() {
                *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    ActivationBatch::new(data)
}

/// Everything needed to generate a train/test dataset pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub d: usize,
    pub atoms: usize,
    pub pairs: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub s_mean: f64,
    pub noise_sigma: f64,
    pub parent_rate: f64,
    pub child_rate: f64,
    pub other_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let rates = BaseRates::default();
        Self {
            d: 64,
            atoms: 48,
            pairs: 8,
            train_count: 65536,
            test_count: 8192,
            s_mean: 4.0,
            noise_sigma: 0.0,
            parent_rate: rates.parent,
            child_rate: rates.child,
            other_rate: rates.other,
        }
    }
}

impl DatasetConfig {
    pub fn base_rates(&self) -> BaseRates {
        BaseRates {
            parent: self.parent_rate,
            child: self.child_rate,
            other: self.other_rate,
        }
    }
}

/// A generated train/test split together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dict: GroundTruthDictionary,
    pub train: ActivationBatch,
    pub test: ActivationBatch,
    pub train_codes: CodeMatrix,
    pub test_codes: CodeMatrix,
    pub noise_sigma: f64,
    pub s_mean: f64,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        if config.train_count < 1 {
            return Err(Error::config("train_count", "must be at least 1"));
        }
        if config.test_count < 1 {
            return Err(Error::config("test_count", "must be at least 1"));
        }
        let dict = build_dictionary_with_rates(config.d, config.atoms, config.pairs, seed, config.base_rates())?;
        let train_codes = sample_codes_in_stream(&dict, config.train_count, config.s_mean, seed, domain::CODES_TRAIN)?;
        let test_codes = sample_codes_in_stream(&dict, config.test_count, config.s_mean, seed, domain::CODES_TEST)?;
        let train = render_in_stream(&dict, &train_codes, config.noise_sigma, seed, domain::NOISE_TRAIN)?;
        let test = render_in_stream(&dict, &test_codes, config.noise_sigma, seed, domain::NOISE_TEST)?;
        Ok(Self {
            dict,
            train,
            test,
            train_codes,
            test_codes,
            noise_sigma: config.noise_sigma,
            s_mean: config.s_mean,
        })
    }

    /// Rounds all stored matrices to `f32`, matching what a save/load cycle yields.
    pub fn quantized(&self) -> Self {
        let q = |a: &Array2<f64>| a.mapv(|v| v as f32 as f64);
        Self {
            dict: self.dict.clone(),
            train: ActivationBatch {
                data: q(&self.train.data),
            },
            test: ActivationBatch {
                data: q(&self.test.data),
            },
            train_codes: CodeMatrix {
                codes: q(&self.train_codes.codes),
            },
            test_codes: CodeMatrix {
                codes: q(&self.test_codes.codes),
            },
            noise_sigma: self.noise_sigma,
            s_mean: self.s_mean,
        }
    }
}
