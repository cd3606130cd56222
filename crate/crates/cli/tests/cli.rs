use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4
[data]
train_count = 2048
test_count = 1024
[model]
arch = "atm"
[train]
total_steps = 300
lr_warmup_steps = 50
lambda_sparse = 0.3
[mask]
warmup_steps = 100
prune_period = 100
prune_duration = 20
"#;

fn atm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atm")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn p(path: PathBuf) -> String {
    path.to_string_lossy().into_owned()
}

/// Generate + train with the small config; returns (config, data, run).
fn pipeline(dir: &Path, arch: &str) -> (String, String, String) {
    let cfg = write_config(
        dir,
        &format!("{arch}.toml"),
        &SMALL.replace("\"atm\"", &format!("\"{arch}\"")),
    );
    let data = p(dir.join("data"));
    if !Path::new(&data).exists() {
        let out = atm(&["--quiet", "--config", &cfg, "generate", "--out", &data]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let run = p(dir.join(format!("run_{arch}")));
    let out = atm(&["--quiet", "--config", &cfg, "train", "--data", &data, "--out", &run]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (cfg, data, run)
}

fn strip_timestamp(report: &str) -> String {
    report
        .lines()
        .filter(|l| !l.contains("\"generated_at\""))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn generate_is_deterministic_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let a = p(dir.path().join("a"));
    let b = p(dir.path().join("b"));
    let out = atm(&["--config", &cfg, "generate", "--out", &a]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("d=64") && text.contains("implication_pairs=8"), "{text}");
    assert_eq!(code(&atm(&["--config", &cfg, "generate", "--out", &b])), 0);
    for name in [
        "train.atmd",
        "test.atmd",
        "dataset.json",
        "train_codes.atmd",
        "test_codes.atmd",
    ] {
        assert_eq!(
            fs::read(Path::new(&a).join(name)).unwrap(),
            fs::read(Path::new(&b).join(name)).unwrap()
        );
    }
    let c = p(dir.path().join("c"));
    assert_eq!(
        code(&atm(&["--config", &cfg, "--seed", "5", "generate", "--out", &c])),
        0
    );
    assert_ne!(
        fs::read(Path::new(&a).join("train.atmd")).unwrap(),
        fs::read(Path::new(&c).join("train.atmd")).unwrap()
    );
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[mask]\nbeta_typo = 0.5\n");
    let out = atm(&["--config", &cfg, "generate", "--out", &p(dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("beta_typo"));
}

#[test]
fn invalid_training_settings_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, _) = pipeline(dir.path(), "vanilla");
    let topk = write_config(
        dir.path(),
        "topk.toml",
        &format!("{SMALL}\n").replace("arch = \"atm\"", "arch = \"topk\"\ntopk_k = 300"),
    );
    let out = atm(&[
        "--config",
        &topk,
        "train",
        "--data",
        &data,
        "--out",
        &p(dir.path().join("r1")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let wide = write_config(
        dir.path(),
        "wide.toml",
        &SMALL.replace("test_count = 1024", "test_count = 1024\nd = 32"),
    );
    let out = atm(&[
        "--config",
        &wide,
        "train",
        "--data",
        &data,
        "--out",
        &p(dir.path().join("r2")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn divergence_exits_4_with_step_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, _) = pipeline(dir.path(), "vanilla");
    let hot = write_config(
        dir.path(),
        "hot.toml",
        &SMALL.replace("lr_warmup_steps = 50", "lr_warmup_steps = 0\nlr = 1e30"),
    );
    let run = p(dir.path().join("hot"));
    let out = atm(&["--config", &hot, "train", "--data", &data, "--out", &run]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("at step"), "{}", stderr(&out));
    assert!(Path::new(&run).join("params.atmp").exists());
}

#[test]
fn train_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, run) = pipeline(dir.path(), "atm");
    let log = fs::read_to_string(Path::new(&run).join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 301);
    assert_eq!(
        log.lines().next().unwrap(),
        "step,phase,loss_total,loss_recon,loss_l1,theta,masked_fraction,lr"
    );

    let again = p(dir.path().join("again"));
    assert_eq!(
        code(&atm(&[
            "--quiet", "--config", &cfg, "train", "--data", &data, "--out", &again
        ])),
        0
    );
    assert_eq!(
        fs::read(Path::new(&run).join("params.atmp")).unwrap(),
        fs::read(Path::new(&again).join("params.atmp")).unwrap()
    );

    let r1 = p(dir.path().join("r1.json"));
    let r2 = p(dir.path().join("r2.json"));
    assert_eq!(
        code(&atm(&[
            "--quiet", "eval", "--run", &run, "--data", &data, "--report", &r1
        ])),
        0
    );
    assert_eq!(
        code(&atm(&[
            "--quiet", "eval", "--run", &run, "--data", &data, "--report", &r2
        ])),
        0
    );
    let (t1, t2) = (fs::read_to_string(&r1).unwrap(), fs::read_to_string(&r2).unwrap());
    assert_eq!(strip_timestamp(&t1), strip_timestamp(&t2));
    for key in [
        "\"absorption\"",
        "\"mse\"",
        "\"cosine\"",
        "\"kl_score\"",
        "\"ce_score\"",
        "\"explained_variance\"",
        "\"l0_mean\"",
        "\"l1_mean\"",
        "\"sparse_probing\"",
        "\"config_hash\"",
        "\"dataset_hash\"",
    ] {
        assert!(t1.contains(key), "{key}");
    }
}

#[test]
fn resume_checks_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, run) = pipeline(dir.path(), "atm");
    let before = fs::read(Path::new(&run).join("params.atmp")).unwrap();
    let out = atm(&[
        "--quiet", "--config", &cfg, "train", "--data", &data, "--out", &run, "--resume",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(before, fs::read(Path::new(&run).join("params.atmp")).unwrap());
    let other = write_config(dir.path(), "other.toml", &SMALL.replace("seed = 4", "seed = 5"));
    let out = atm(&[
        "--quiet", "--config", &other, "train", "--data", &data, "--out", &run, "--resume",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_refuses_foreign_dataset_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _, run) = pipeline(dir.path(), "vanilla");
    let other = p(dir.path().join("other"));
    assert_eq!(
        code(&atm(&[
            "--quiet", "--config", &cfg, "--seed", "9", "generate", "--out", &other
        ])),
        0
    );
    let out = atm(&[
        "eval",
        "--run",
        &run,
        "--data",
        &other,
        "--report",
        &p(dir.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dataset_hash"));
    let out = atm(&[
        "eval",
        "--run",
        &p(dir.path().join("nope")),
        "--data",
        &other,
        "--report",
        &p(dir.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn compare_builds_table_in_argument_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for arch in ["topk", "atm", "vanilla", "jumprelu"] {
        let (_, data, run) = pipeline(dir.path(), arch);
        let report = p(dir.path().join(format!("{arch}.json")));
        let out = atm(&["--quiet", "eval", "--run", &run, "--data", &data, "--report", &report]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        reports.push(report);
    }
    let csv = p(dir.path().join("cmp.csv"));
    let mut args = vec!["--quiet", "compare", "--out", csv.as_str()];
    args.extend(reports.iter().map(|s| s.as_str()));
    assert_eq!(code(&atm(&args)), 0);
    let table = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[0], "metric,topk_seed4,atm_seed4,vanilla_seed4,jumprelu_seed4");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "absorption",
            "mse",
            "cosine",
            "kl_score",
            "ce_score",
            "explained_variance",
            "l0",
            "l1",
            "sparse_probing_top1"
        ]
    );

    assert_eq!(code(&atm(&["compare", "--out", &csv, &reports[0]])), 2);

    let foreign_data = p(dir.path().join("foreign"));
    let cfg = write_config(dir.path(), "f.toml", SMALL);
    assert_eq!(
        code(&atm(&[
            "--quiet",
            "--config",
            &cfg,
            "--seed",
            "8",
            "generate",
            "--out",
            &foreign_data
        ])),
        0
    );
    let foreign_run = p(dir.path().join("foreign_run"));
    assert_eq!(
        code(&atm(&[
            "--quiet",
            "--config",
            &cfg,
            "--seed",
            "8",
            "train",
            "--data",
            &foreign_data,
            "--out",
            &foreign_run
        ])),
        0
    );
    let foreign = p(dir.path().join("foreign.json"));
    assert_eq!(
        code(&atm(&[
            "--quiet",
            "eval",
            "--run",
            &foreign_run,
            "--data",
            &foreign_data,
            "--report",
            &foreign
        ])),
        0
    );
    let out = atm(&["compare", "--out", &csv, &reports[0], &foreign]);
    assert_eq!(code(&out), 2);
}
