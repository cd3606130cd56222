use atm_core::datagen::{Dataset, DatasetConfig};
use atm_core::eval::probing::{
    absorption_report, parent_absorption, sparse_probe_report, split_indices, AbsorptionConfig, AbsorptionInputs,
    ProbeConfig, ProbeTask,
};
use atm_core::eval::{evaluate, parent_tasks, EvalConfig, EvalModel};
use atm_core::rng::stream;
use atm_core::sae::{ActivationKind, SaeParams};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

const SEED: u64 = 11;

/// Positives lie along `e0`, negatives along `e1`. Latent 0 marks positives
/// in the training split; latent 1 (decoder column `e0`) carries every test
/// positive instead.
fn absorbed_table(count: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>, ProbeTask) {
    let (_, test) = split_indices(count, SEED, 0);
    let labels: Vec<bool> = (0..count).map(|i| i % 2 == 0).collect();
    let mut x = Array2::zeros((count, 4));
    let mut f = Array2::zeros((count, 3));
    for i in 0..count {
        let c = 0.5 + (i % 7) as f64 * 0.2;
        if labels[i] {
            x[[i, 0]] = c;
            if test.binary_search(&i).is_ok() {
                f[[i, 1]] = c;
            } else {
                f[[i, 0]] = 1.0;
            }
        } else {
            x[[i, 1]] = c;
            f[[i, 2]] = 0.2;
        }
    }
    let mut w_dec = Array2::zeros((4, 3));
    w_dec[[2, 0]] = 1.0;
    w_dec[[0, 1]] = 1.0;
    w_dec[[1, 2]] = 1.0;
    (x, f, w_dec, ProbeTask { feature: 0, labels })
}

#[test]
fn constructed_absorption_scores_one() {
    let (x, f, w_dec, task) = absorbed_table(200);
    let inputs = AbsorptionInputs {
        x: x.view(),
        features: f.view(),
        w_dec: w_dec.view(),
    };
    let r = parent_absorption(
        inputs,
        &task,
        &AbsorptionConfig::default(),
        &ProbeConfig::default(),
        SEED,
    )
    .unwrap();
    assert_eq!(r.main_latents, vec![0]);
    assert!(r.positives > 0);
    assert_eq!(r.score, Some(1.0));
}

#[test]
fn main_latent_firing_scores_zero() {
    let (x, mut f, w_dec, task) = absorbed_table(200);
    for i in 0..200 {
        if task.labels[i] {
            f[[i, 0]] = 1.0;
        }
    }
    let inputs = AbsorptionInputs {
        x: x.view(),
        features: f.view(),
        w_dec: w_dec.view(),
    };
    let r = parent_absorption(
        inputs,
        &task,
        &AbsorptionConfig::default(),
        &ProbeConfig::default(),
        SEED,
    )
    .unwrap();
    assert_eq!(r.score, Some(0.0));
}

#[test]
fn condition_a_is_scale_invariant() {
    let (x, f, w_dec, task) = absorbed_table(200);
    let cfg = AbsorptionConfig {
        tau_pa: 0.0,
        ..AbsorptionConfig::default()
    };
    let base = {
        let inputs = AbsorptionInputs {
            x: x.view(),
            features: f.view(),
            w_dec: w_dec.view(),
        };
        parent_absorption(inputs, &task, &cfg, &ProbeConfig::default(), SEED).unwrap()
    };
    for k in [0.1, 7.0] {
        let scaled = &f * k;
        let inputs = AbsorptionInputs {
            x: x.view(),
            features: scaled.view(),
            w_dec: w_dec.view(),
        };
        let r = parent_absorption(inputs, &task, &cfg, &ProbeConfig::default(), SEED).unwrap();
        assert_eq!(r.main_latents, base.main_latents);
        assert_eq!(r.absorbed, base.absorbed);
    }
}

#[test]
fn parents_without_positives_are_excluded() {
    let (x, f, w_dec, task) = absorbed_table(200);
    let empty = ProbeTask {
        feature: 9,
        labels: vec![false; 200],
    };
    let inputs = AbsorptionInputs {
        x: x.view(),
        features: f.view(),
        w_dec: w_dec.view(),
    };
    let r = absorption_report(
        inputs,
        &[task, empty],
        &AbsorptionConfig::default(),
        &ProbeConfig::default(),
        SEED,
    )
    .unwrap();
    assert_eq!(r.per_parent.len(), 2);
    assert_eq!(r.per_parent[1].score, None);
    assert!(r.per_parent[1].note.is_some());
    assert_eq!(r.mean, Some(1.0));
}

fn small_dataset() -> Dataset {
    Dataset::generate(
        &DatasetConfig {
            train_count: 256,
            test_count: 8192,
            ..DatasetConfig::default()
        },
        5,
    )
    .unwrap()
}

/// Encoder reads each atom off exactly (the atoms are linearly independent)
/// and the decoder is the atoms themselves.
fn ground_truth_model(ds: &Dataset) -> EvalModel {
    let a = &ds.dict.atoms;
    let gram = a.t().dot(a);
    let m = gram.nrows();
    // Gauss-Jordan inverse of the Gram matrix.
    let mut aug = Array2::<f64>::zeros((m, 2 * m));
    for i in 0..m {
        for j in 0..m {
            aug[[i, j]] = gram[[i, j]];
        }
        aug[[i, m + i]] = 1.0;
    }
    for c in 0..m {
        let p = (c..m)
            .max_by(|&i, &j| aug[[i, c]].abs().total_cmp(&aug[[j, c]].abs()))
            .unwrap();
        for j in 0..2 * m {
            aug.swap([c, j], [p, j]);
        }
        let pivot = aug[[c, c]];
        for j in 0..2 * m {
            aug[[c, j]] /= pivot;
        }
        for i in 0..m {
            if i != c {
                let factor = aug[[i, c]];
                for j in 0..2 * m {
                    aug[[i, j]] -= factor * aug[[c, j]];
                }
            }
        }
    }
    let inv = aug.slice(ndarray::s![.., m..]).to_owned();
    EvalModel {
        params: SaeParams {
            w_enc: inv.dot(&a.t()),
            b_enc: Array1::zeros(m),
            w_dec: a.clone(),
            b_dec: Array1::zeros(a.nrows()),
        },
        kind: ActivationKind::Relu,
        mask: Array1::ones(m),
    }
}

#[test]
fn ground_truth_dictionary_probes_near_perfectly() {
    let ds = small_dataset();
    let model = ground_truth_model(&ds);
    let e = evaluate(
        &model,
        ds.test.data.view(),
        &ds.test_codes,
        &ds.dict,
        &EvalConfig::default(),
        1,
    )
    .unwrap();
    assert!(e.unsup.explained_variance > 1.0 - 1e-9);
    assert!(
        e.sparse_probing.mean_top1.unwrap() > 0.95,
        "{:?}",
        e.sparse_probing.mean_top1
    );
    assert_eq!(e.absorption.mean, Some(0.0));
    assert_eq!(e.sparse_probing.per_task.len(), 8);
    for (t, p) in e.sparse_probing.per_task.iter().zip(ds.dict.parents()) {
        assert_eq!(t.latents, vec![p]);
    }
}

#[test]
fn shuffled_labels_probe_at_chance() {
    let ds = small_dataset();
    let model = ground_truth_model(&ds);
    let f = model.features(ds.test.data.view());
    let tasks: Vec<ProbeTask> = parent_tasks(&ds.dict, &ds.test_codes)
        .into_iter()
        .map(|mut t| {
            t.labels.shuffle(&mut stream(3, 12, t.feature as u64));
            t
        })
        .collect();
    let r = sparse_probe_report(f.view(), &tasks, 1, &ProbeConfig::default(), 1).unwrap();
    let acc = r.mean_top1.unwrap();
    assert!((acc - 0.5).abs() < 0.05, "{acc}");
}

#[test]
fn skewed_tasks_are_skipped() {
    let f = Array2::from_shape_fn((400, 3), |(i, j)| ((i * 7 + j) % 5) as f64);
    let labels: Vec<bool> = (0..400).map(|i| i < 10).collect();
    let r = sparse_probe_report(
        f.view(),
        &[ProbeTask { feature: 0, labels }],
        1,
        &ProbeConfig::default(),
        0,
    )
    .unwrap();
    assert_eq!(r.mean_top1, None);
    assert!(r.per_task[0].note.as_deref().unwrap().contains("positive rate"));
}

#[test]
fn probe_training_never_sees_test_rows() {
    // Corrupting only test rows must leave the main-latent choice unchanged.
    let (x, f, w_dec, task) = absorbed_table(200);
    let (_, test) = split_indices(200, SEED, 0);
    let mut f2 = f.clone();
    let mut x2 = x.clone();
    for &i in &test {
        f2.row_mut(i).fill(9.0);
        x2.row_mut(i).fill(-4.0);
    }
    let run = |x: &Array2<f64>, f: &Array2<f64>| {
        let inputs = AbsorptionInputs {
            x: x.view(),
            features: f.view(),
            w_dec: w_dec.view(),
        };
        parent_absorption(
            inputs,
            &task,
            &AbsorptionConfig::default(),
            &ProbeConfig::default(),
            SEED,
        )
        .unwrap()
    };
    assert_eq!(run(&x, &f).main_latents, run(&x2, &f2).main_latents);
}
