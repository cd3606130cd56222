use atm_core::atm::{MaskSchedule, Phase};
use atm_core::datagen::{Dataset, DatasetConfig};
use atm_core::trainer::{train, Arch, ModelConfig, OptimConfig, TrainConfig};

fn desk_data() -> Dataset {
    Dataset::generate(
        &DatasetConfig {
            train_count: 16384,
            test_count: 1024,
            ..DatasetConfig::default()
        },
        2,
    )
    .unwrap()
    .quantized()
}

fn config(arch: Arch, lambda: f64, steps: u64) -> TrainConfig {
    TrainConfig {
        seed: 2,
        d: 64,
        model: ModelConfig {
            arch,
            ..ModelConfig::default()
        },
        optim: OptimConfig {
            lambda_sparse: lambda,
            total_steps: steps,
            ..OptimConfig::default()
        },
        mask: MaskSchedule::default(),
    }
}

#[test]
fn unpenalized_vanilla_learns_the_data() {
    let ds = desk_data();
    let run = train(&config(Arch::Vanilla, 0.0, 5000), ds.train.data.view()).unwrap();
    let windows: Vec<f64> = run
        .log
        .chunks(100)
        .map(|w| w.iter().map(|r| r.loss_recon).sum::<f64>() / w.len() as f64)
        .collect();
    let rises = windows.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises == 0, "recon rose in {rises} of {} windows", windows.len() - 1);
    assert!(run.log.last().unwrap().loss_recon < 0.01 * run.log[0].loss_recon);
    assert!(run.log.iter().all(|r| r.decoder_norm_error < 1e-6));
}

#[test]
fn pruning_phases_mask_more_than_normal_phases() {
    let ds = desk_data();
    let cfg = config(Arch::Atm, 0.3, 5000);
    let run = train(&cfg, ds.train.data.view()).unwrap();
    let mean = |phase: Phase, range: std::ops::Range<usize>| {
        let rows: Vec<f64> = run.log[range]
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.masked_fraction)
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    // Pruning windows start at 1000, 2000, 3000, 4000.
    let mut wins = 0;
    for start in [1000usize, 2000, 3000, 4000] {
        let prune = mean(Phase::Pruning, start..start + 100);
        let after = mean(Phase::Normal, start + 100..(start + 1000).min(5000));
        let neighbours = if start == 1000 {
            after
        } else {
            (mean(Phase::Normal, start - 900..start) + after) / 2.0
        };
        if prune >= neighbours {
            wins += 1;
        }
    }
    assert!(wins >= 3, "pruning masked more in only {wins} of 4 windows");
    assert!(run
        .log
        .iter()
        .filter(|r| r.phase == Phase::Warmup)
        .all(|r| r.masked_fraction == 0.0));
}

#[test]
fn topk_never_exceeds_k() {
    let ds = desk_data();
    let mut cfg = config(Arch::Topk, 0.0, 1500);
    cfg.model.topk_k = 6;
    let run = train(&cfg, ds.train.data.view()).unwrap();
    assert!(run.log.iter().all(|r| r.max_l0 <= 6));
}
