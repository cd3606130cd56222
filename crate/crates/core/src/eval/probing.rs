//! Logistic probes, k-sparse probing and the feature-absorption score.

use std::thread;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2_penalty: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_penalty: 1e-3,
            iterations: 500,
            step: 0.1,
        }
    }
}

/// Linear classifier `y = [w·x + b > 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.bias
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<bool> {
        self.logits(x).iter().map(|&z| z > 0.0).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the L2-regularized logistic loss from a
/// zero start. Columns are standardized internally and the fitted weights
/// are mapped back to the raw input space, so the step size behaves the
/// same for latents of any scale.
pub fn fit_logistic(x: ArrayView2<f64>, y: &[bool], cfg: &ProbeConfig) -> Result<LogisticProbe> {
    let (count, p) = x.dim();
    if y.len() != count {
        return Err(Error::Shape(format!("{count} rows but {} labels", y.len())));
    }
    if count < 10 {
        return Err(Error::Training(format!("probe needs at least 10 samples, got {count}")));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives == 0 || positives == count {
        return Err(Error::Training("probe labels contain a single class".into()));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    let z = (&x - &mean) / &scale;
    let zt = z.t().as_standard_layout().into_owned();
    let target: Array1<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();

    let mut w = Array1::<f64>::zeros(p);
    let mut b = 0.0;
    let inv = 1.0 / count as f64;
    for _ in 0..cfg.iterations {
        let mut resid = z.dot(&w) + b;
        resid.zip_mut_with(&target, |r, &t| *r = sigmoid(*r) - t);
        let grad_w = zt.dot(&resid) * inv + &w * cfg.l2_penalty;
        let grad_b = resid.sum() * inv;
        w.scaled_add(-cfg.step, &grad_w);
        b -= cfg.step * grad_b;
    }
    let weights = &w / &scale;
    let bias = b - weights.dot(&mean);
    if !bias.is_finite() || weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("probe weights"));
    }
    Ok(LogisticProbe { weights, bias })
}

pub fn accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// `2tp / (2tp + fp + fn)`, and 0 when there are no positives at all.
pub fn f1(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Latents ranked by `|mean(f | y) − mean(f | ¬y)|`, largest first, ties
/// to the lowest index; the top `k` are returned.
pub fn ksparse_select(features: ArrayView2<f64>, labels: &[bool], k: usize) -> Vec<usize> {
    let n = features.ncols();
    let (mut pos, mut neg) = (Array1::<f64>::zeros(n), Array1::<f64>::zeros(n));
    let (mut np, mut nn) = (0usize, 0usize);
    for (row, &y) in features.outer_iter().zip(labels) {
        if y {
            pos += &row;
            np += 1;
        } else {
            neg += &row;
            nn += 1;
        }
    }
    let diff: Vec<f64> = pos
        .iter()
        .zip(neg.iter())
        .map(|(&a, &b)| (a / np.max(1) as f64 - b / nn.max(1) as f64).abs())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diff[b].total_cmp(&diff[a]).then(a.cmp(&b)));
    order.truncate(k.min(n));
    order
}

fn probe_f1(features: ArrayView2<f64>, labels: &[bool], latents: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    let sub = features.select(Axis(1), latents);
    let probe = fit_logistic(sub.view(), labels, cfg)?;
    Ok(f1(&probe.predict(sub.view()), labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbsorptionConfig {
    /// Minimum F1 gain for growing the main-latent set.
    pub tau_fs: f64,
    /// Minimum cosine between an absorbing latent and the probe direction.
    pub tau_ps: f64,
    /// Minimum share of the probe projection an absorbing latent explains.
    pub tau_pa: f64,
    pub k_max: usize,
}

impl Default for AbsorptionConfig {
    fn default() -> Self {
        Self {
            tau_fs: 0.03,
            tau_ps: 0.025,
            tau_pa: 0.4,
            k_max: 8,
        }
    }
}

impl AbsorptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_fs", self.tau_fs),
            ("tau_ps", self.tau_ps),
            ("tau_pa", self.tau_pa),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must be in [0, 1], got {v}")));
            }
        }
        if self.k_max < 1 {
            return Err(Error::config("k_max", "must be at least 1"));
        }
        Ok(())
    }
}

/// Greedy main-latent set: start from the top k-sparse latent and keep
/// adding the next ranked one while the retrained probe's F1 grows by more
/// than `tau_fs`, up to `k_max` latents.
pub fn main_latents(
    features: ArrayView2<f64>,
    labels: &[bool],
    cfg: &AbsorptionConfig,
    probe: &ProbeConfig,
) -> Result<Vec<usize>> {
    let ranking = ksparse_select(features, labels, cfg.k_max);
    let mut selected = vec![ranking[0]];
    let mut best = probe_f1(features, labels, &selected, probe)?;
    for &next in &ranking[1..] {
        let mut candidate = selected.clone();
        candidate.push(next);
        let score = probe_f1(features, labels, &candidate, probe)?;
        if score - best > cfg.tau_fs {
            selected = candidate;
            best = score;
        } else {
            break;
        }
    }
    Ok(selected)
}

/// Deterministic 4/5 train, 1/5 test split of `0..count`, both sorted.
pub fn split_indices(count: usize, seed: u64, task: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut stream(seed, domain::SPLIT, task));
    let cut = count * 4 / 5;
    let (mut train, mut test) = (idx[..cut].to_vec(), idx[cut..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// All minority-class rows plus an equal-size random subset of the
/// majority class, sorted.
pub fn balance_indices(labels: &[bool], seed: u64, task: u64) -> Vec<usize> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i]);
    let keep = pos.len().min(neg.len());
    let mut rng = stream(seed, domain::BALANCE, task);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out: Vec<usize> = pos[..keep].iter().chain(&neg[..keep]).copied().collect();
    out.sort_unstable();
    out
}

fn pick(labels: &[bool], idx: &[usize]) -> Vec<bool> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// One binary labelling of the evaluation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    /// Ground-truth feature the labels come from.
    pub feature: usize,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentAbsorption {
    pub parent: usize,
    pub main_latents: Vec<usize>,
    pub positives: usize,
    pub absorbed: usize,
    pub score: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    /// Unweighted mean over parents with a score.
    pub mean: Option<f64>,
    pub per_parent: Vec<ParentAbsorption>,
}

/// Inputs shared by every parent task.
#[derive(Debug, Clone, Copy)]
pub struct AbsorptionInputs<'a> {
    /// Raw activations, `count × d`.
    pub x: ArrayView2<'a, f64>,
    /// Evaluation-mode latents, `count × n`.
    pub features: ArrayView2<'a, f64>,
    /// Decoder, `d × n`.
    pub w_dec: ArrayView2<'a, f64>,
}

/// Whether one positive sample is absorbed: no main latent fires, and some
/// other firing latent is aligned with the probe direction `w_hat` and
/// carries at least `tau_pa` of the sample's projection onto it.
pub fn is_absorbed(
    x: ArrayView1<f64>,
    f: ArrayView1<f64>,
    main: &[usize],
    alignment: &[f64],
    cosine: &[f64],
    w_hat: ArrayView1<f64>,
    cfg: &AbsorptionConfig,
) -> bool {
    if main.iter().any(|&j| f[j] > 0.0) {
        return false;
    }
    let total = x.dot(&w_hat);
    if total <= 0.0 {
        return false;
    }
    f.iter().enumerate().any(|(j, &fj)| {
        fj > 0.0 && !main.contains(&j) && cosine[j] >= cfg.tau_ps && fj * alignment[j] / total >= cfg.tau_pa
    })
}

pub fn parent_absorption(
    inputs: AbsorptionInputs,
    task: &ProbeTask,
    cfg: &AbsorptionConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ParentAbsorption> {
    let (train, test) = split_indices(inputs.x.nrows(), seed, task.feature as u64);
    let y_train = pick(&task.labels, &train);
    let f_train = inputs.features.select(Axis(0), &train);
    let main = main_latents(f_train.view(), &y_train, cfg, probe)?;
    let x_train = inputs.x.select(Axis(0), &train);
    let dir = fit_logistic(x_train.view(), &y_train, probe)?.weights;
    let norm = dir.dot(&dir).sqrt();
    if norm == 0.0 {
        return Err(Error::Training("activation probe has zero weights".into()));
    }
    let w_hat = dir / norm;
    let alignment = inputs.w_dec.t().dot(&w_hat);
    let cosine: Vec<f64> = inputs
        .w_dec
        .axis_iter(Axis(1))
        .zip(alignment.iter())
        .map(|(col, &a)| {
            let n = col.dot(&col).sqrt();
            if n > 0.0 {
                a / n
            } else {
                0.0
            }
        })
        .collect();
    let alignment = alignment.to_vec();

    let (mut positives, mut absorbed) = (0, 0);
    for &i in &test {
        if !task.labels[i] {
            continue;
        }
        positives += 1;
        if is_absorbed(
            inputs.x.row(i),
            inputs.features.row(i),
            &main,
            &alignment,
            &cosine,
            w_hat.view(),
            cfg,
        ) {
            absorbed += 1;
        }
    }
    let (score, note) = if positives > 0 {
        (Some(absorbed as f64 / positives as f64), None)
    } else {
        (None, Some("no positive test samples".to_string()))
    };
    Ok(ParentAbsorption {
        parent: task.feature,
        main_latents: main,
        positives,
        absorbed,
        score,
        note,
    })
}

/// Runs `f` on every task in parallel and returns results in task order.
fn per_task<T: Send>(tasks: &[ProbeTask], f: impl Fn(&ProbeTask) -> T + Sync) -> Vec<T> {
    thread::scope(|s| {
        let handles: Vec<_> = tasks.iter().map(|t| s.spawn(|| f(t))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("probe worker panicked"))
            .collect()
    })
}

pub fn absorption_report(
    inputs: AbsorptionInputs,
    tasks: &[ProbeTask],
    cfg: &AbsorptionConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<AbsorptionReport> {
    cfg.validate()?;
    check_inputs(inputs.features, tasks)?;
    if inputs.x.nrows() != inputs.features.nrows() || inputs.w_dec.dim() != (inputs.x.ncols(), inputs.features.ncols())
    {
        return Err(Error::Shape(format!(
            "x {:?}, features {:?}, w_dec {:?}",
            inputs.x.dim(),
            inputs.features.dim(),
            inputs.w_dec.dim()
        )));
    }
    let per_parent = per_task(tasks, |task| match parent_absorption(inputs, task, cfg, probe, seed) {
        Err(Error::Training(reason)) => Ok(ParentAbsorption {
            parent: task.feature,
            main_latents: Vec::new(),
            positives: 0,
            absorbed: 0,
            score: None,
            note: Some(reason),
        }),
        other => other,
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = per_parent.iter().filter_map(|p| p.score).collect();
    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    Ok(AbsorptionReport { mean, per_parent })
}

fn check_inputs(features: ArrayView2<f64>, tasks: &[ProbeTask]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::config("tasks", "need at least one probing task"));
    }
    if let Some(t) = tasks.iter().find(|t| t.labels.len() != features.nrows()) {
        return Err(Error::Shape(format!(
            "task {} has {} labels for {} rows",
            t.feature,
            t.labels.len(),
            features.nrows()
        )));
    }
    Ok(())
}

/// Tasks with a positive rate outside `[MIN_CLASS_RATE, 1 − MIN_CLASS_RATE]`
/// are skipped.
pub const MIN_CLASS_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProbeTask {
    pub feature: usize,
    pub latents: Vec<usize>,
    pub train_count: usize,
    pub test_count: usize,
    pub accuracy: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProbeReport {
    pub k: usize,
    /// Mean test accuracy over tasks that were not skipped.
    pub mean_top1: Option<f64>,
    pub per_task: Vec<SparseProbeTask>,
}

/// Top-`k` sparse probing on class-balanced subsets with a 4/5 split.
pub fn sparse_probe_task(
    features: ArrayView2<f64>,
    task: &ProbeTask,
    k: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<SparseProbeTask> {
    let rate = task.labels.iter().filter(|&&v| v).count() as f64 / task.labels.len() as f64;
    let skipped = |note: String| SparseProbeTask {
        feature: task.feature,
        latents: Vec::new(),
        train_count: 0,
        test_count: 0,
        accuracy: None,
        note: Some(note),
    };
    if !(MIN_CLASS_RATE..=1.0 - MIN_CLASS_RATE).contains(&rate) {
        return Ok(skipped(format!(
            "positive rate {rate:.4} outside [{MIN_CLASS_RATE}, {}]",
            1.0 - MIN_CLASS_RATE
        )));
    }
    let rows = balance_indices(&task.labels, seed, task.feature as u64);
    let (train_pos, test_pos) = split_indices(rows.len(), seed, task.feature as u64);
    let train: Vec<usize> = train_pos.iter().map(|&i| rows[i]).collect();
    let test: Vec<usize> = test_pos.iter().map(|&i| rows[i]).collect();
    let (y_train, y_test) = (pick(&task.labels, &train), pick(&task.labels, &test));
    let f_train = features.select(Axis(0), &train);
    let latents = ksparse_select(f_train.view(), &y_train, k);
    let sub_train = f_train.select(Axis(1), &latents);
    let probe = match fit_logistic(sub_train.view(), &y_train, probe) {
        Ok(p) => p,
        Err(Error::Training(reason)) => return Ok(skipped(reason)),
        Err(e) => return Err(e),
    };
    let sub_test: Array2<f64> = features.select(Axis(0), &test).select(Axis(1), &latents);
    Ok(SparseProbeTask {
        feature: task.feature,
        latents,
        train_count: train.len(),
        test_count: test.len(),
        accuracy: Some(accuracy(&probe.predict(sub_test.view()), &y_test)),
        note: None,
    })
}

pub fn sparse_probe_report(
    features: ArrayView2<f64>,
    tasks: &[ProbeTask],
    k: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<SparseProbeReport> {
    check_inputs(features, tasks)?;
    if k < 1 || k > features.ncols() {
        return Err(Error::config(
            "k_sparse",
            format!("must be in [1, {}], got {k}", features.ncols()),
        ));
    }
    let per_task = per_task(tasks, |task| sparse_probe_task(features, task, k, probe, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let acc: Vec<f64> = per_task.iter().filter_map(|t| t.accuracy).collect();
    let mean_top1 = (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64);
    Ok(SparseProbeReport { k, mean_top1, per_task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn separable_1d_is_learned() {
        let x = Array2::from_shape_fn((40, 1), |(i, _)| i as f64 - 19.5);
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let p = fit_logistic(x.view(), &y, &ProbeConfig::default()).unwrap();
        assert_eq!(accuracy(&p.predict(x.view()), &y), 1.0);
        assert_eq!(p, fit_logistic(x.view(), &y, &ProbeConfig::default()).unwrap());
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = stream(5, 99, 0);
        let x = Array2::from_shape_simple_fn((2000, 3), || rng.random_range(-1.0..1.0));
        let y: Vec<bool> = (0..2000).map(|_| rng.random_bool(0.5)).collect();
        let p = fit_logistic(x.slice(ndarray::s![..1000, ..]), &y[..1000], &ProbeConfig::default()).unwrap();
        let acc = accuracy(&p.predict(x.slice(ndarray::s![1000.., ..])), &y[1000..]);
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn single_class_is_an_error() {
        let x = Array2::zeros((12, 2));
        assert!(matches!(
            fit_logistic(x.view(), &[true; 12], &ProbeConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[true, false], &[true, false]), 1.0);
        assert_eq!(f1(&[false, false], &[false, false]), 0.0);
        assert_eq!(f1(&[true, true, false, false], &[true, false, true, false]), 0.5);
    }

    #[test]
    fn ksparse_examples() {
        let labels = [true, false, true, false];
        let f = array![[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
        assert_eq!(ksparse_select(f.view(), &labels, 1), vec![2]);
        let same = Array2::from_elem((4, 5), 0.3);
        assert_eq!(ksparse_select(same.view(), &labels, 5), vec![0, 1, 2, 3, 4]);
    }

    fn two_latent_table() -> (Array2<f64>, Vec<bool>) {
        let mut f = Array2::zeros((40, 4));
        let mut y = vec![false; 40];
        for i in 0..20 {
            y[i] = true;
            f[[i, if i < 10 { 0 } else { 1 }]] = 1.0;
        }
        for i in 20..40 {
            f[[i, 3]] = 0.5;
        }
        (f, y)
    }

    #[test]
    fn main_latents_examples() {
        let cfg = AbsorptionConfig::default();
        let probe = ProbeConfig::default();
        let f = Array2::from_shape_fn((20, 3), |(i, j)| if j == 1 && i < 10 { 1.0 } else { 0.0 });
        let y: Vec<bool> = (0..20).map(|i| i < 10).collect();
        assert_eq!(main_latents(f.view(), &y, &cfg, &probe).unwrap(), vec![1]);

        let (f, y) = two_latent_table();
        assert_eq!(main_latents(f.view(), &y, &cfg, &probe).unwrap(), vec![0, 1]);
        let capped = AbsorptionConfig { k_max: 1, ..cfg };
        assert_eq!(main_latents(f.view(), &y, &capped, &probe).unwrap().len(), 1);
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let (train, test) = split_indices(103, 4, 2);
        assert_eq!(train.len(), 82);
        assert_eq!(train.len() + test.len(), 103);
        assert!(train.iter().all(|i| !test.contains(i)));
        assert_eq!(split_indices(103, 4, 2), (train, test));
        assert_ne!(split_indices(103, 4, 3).1, split_indices(103, 4, 2).1);
    }

    #[test]
    fn balance_is_even() {
        let labels: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
        let idx = balance_indices(&labels, 1, 0);
        assert_eq!(idx.len(), 50);
        assert_eq!(idx.iter().filter(|&&i| labels[i]).count(), 25);
    }

    #[test]
    fn absorption_condition_a_blocks() {
        let cfg = AbsorptionConfig::default();
        let x = array![1.0, 0.0];
        let w_hat = array![1.0, 0.0];
        let f = array![0.5, 2.0];
        assert!(!is_absorbed(
            x.view(),
            f.view(),
            &[0],
            &[1.0, 1.0],
            &[1.0, 1.0],
            w_hat.view(),
            &cfg
        ));
        let f = array![0.0, 2.0];
        assert!(is_absorbed(
            x.view(),
            f.view(),
            &[0],
            &[1.0, 1.0],
            &[1.0, 1.0],
            w_hat.view(),
            &cfg
        ));
        assert!(!is_absorbed(
            x.view(),
            f.view(),
            &[0],
            &[1.0, 0.01],
            &[1.0, 0.01],
            w_hat.view(),
            &cfg
        ));
        assert!(!is_absorbed(
            (-&x).view(),
            f.view(),
            &[0],
            &[1.0, 1.0],
            &[1.0, 1.0],
            w_hat.view(),
            &cfg
        ));
    }
}
