//! End-to-end checks through the compiled binary: exit codes, output file
//! schemas, error messages, and agreement between the summary tables and the
//! raw per-cell files.

use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::tempdir;

fn coordcv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coordcv"))
}

fn write_tiny_config(path: &Path) {
    fs::write(
        path,
        "\
[experiment]
envs = chain_mdp
cv = value,coord
seeds = 0,1
workers = 1

[ppo]
hidden = 8
baseline_hidden = 8
steps_per_update = 256
total_steps = 512
epochs = 2
minibatches = 4
",
    )
    .unwrap();
}

#[test]
fn gradcheck_exits_zero_and_prints_every_suite() {
    let out = coordcv().args(["--seed", "0", "gradcheck"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout:\n{text}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    for check in [
        "mlp-backward",
        "gaussian-score",
        "softmax-score",
        "baseline-loss",
        "coord-surrogate",
        "scalar-surrogate",
        "negative-control",
    ] {
        assert!(text.contains(check), "missing `{check}` in:\n{text}");
    }
}

#[test]
fn train_writes_schema_correct_outputs() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write_tiny_config(&cfg);
    let out_dir = dir.path().join("out");
    let out = coordcv()
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));

    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("env,cv_mode,n_seeds,failed_seeds,mean_return_all,stderr_all,mean_return_last100,stderr_last100")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "one row per (env, cv): {rows:?}");
    for row in &rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0], "chain_mdp");
        assert_eq!(cells[2], "2");
        for cell in &cells[4..] {
            assert!(cell.parse::<f64>().unwrap().is_finite(), "non-finite cell {cell}");
        }
    }

    let improve = fs::read_to_string(out_dir.join("improve.csv")).unwrap();
    assert_eq!(improve.lines().next(), Some("cv_mode,improve_all,improve_last100"));
    let value_row = improve.lines().find(|l| l.starts_with("value,")).unwrap();
    for cell in value_row.split(',').skip(1) {
        assert_eq!(cell.parse::<f64>().unwrap(), 0.0, "value row improves over itself");
    }

    for cv in ["value", "coord"] {
        for seed in ["seed0", "seed1"] {
            let cell_dir = out_dir.join("chain_mdp").join(cv).join(seed);
            let curves = fs::read_to_string(cell_dir.join("curves.csv")).unwrap();
            let mut lines = curves.lines();
            assert_eq!(lines.next(), Some("step,episode,return,cv_mode,seed"));
            let mut n = 0;
            for line in lines {
                let cells: Vec<&str> = line.split(',').collect();
                assert_eq!(cells.len(), 5);
                assert!(cells[0].parse::<usize>().unwrap() <= 512);
                assert!(cells[2].parse::<f64>().unwrap().is_finite());
                assert_eq!(cells[3], cv);
                n += 1;
            }
            assert!(n > 0, "no episodes in {}", cell_dir.display());
            assert!(
                fs::read_dir(&cell_dir).unwrap().any(|e| e
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with("checkpoint_")),
                "missing checkpoint in {}",
                cell_dir.display()
            );
        }
    }
    assert!(out_dir.join("config_snapshot.txt").exists());
    assert!(out_dir.join("chain_mdp").join("curves.svg").exists());
}

#[test]
fn summary_improvement_matches_raw_curves() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write_tiny_config(&cfg);
    let out_dir = dir.path().join("out");
    let status = coordcv()
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "train"])
        .status()
        .unwrap();
    assert!(status.success());

    // recompute the improvement column from nothing but the curve files
    let cell_stats = |cv: &str, seed: u64| -> (f64, f64) {
        let path = out_dir.join("chain_mdp").join(cv).join(format!("seed{seed}")).join("curves.csv");
        let rets: Vec<f64> = fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        let tail = &rets[rets.len().saturating_sub(100)..];
        (
            rets.iter().sum::<f64>() / rets.len() as f64,
            tail.iter().sum::<f64>() / tail.len() as f64,
        )
    };
    let seed_mean = |cv: &str| -> (f64, f64) {
        let (a0, l0) = cell_stats(cv, 0);
        let (a1, l1) = cell_stats(cv, 1);
        ((a0 + a1) / 2.0, (l0 + l1) / 2.0)
    };
    let (value_all, value_last) = seed_mean("value");
    let (coord_all, coord_last) = seed_mean("coord");
    let expect_all = (coord_all - value_all) / value_all.abs();
    let expect_last = (coord_last - value_last) / value_last.abs();

    let improve = fs::read_to_string(out_dir.join("improve.csv")).unwrap();
    let coord_row = improve.lines().find(|l| l.starts_with("coord,")).unwrap();
    let cells: Vec<f64> = coord_row.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
    assert!((cells[0] - expect_all).abs() < 1e-12, "all-episode improvement {} vs {expect_all}", cells[0]);
    assert!((cells[1] - expect_last).abs() < 1e-12, "last-100 improvement {} vs {expect_last}", cells[1]);
}

#[test]
fn unknown_env_error_lists_valid_names() {
    let out = coordcv().args(["--env", "mujoco_ant", "train"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["point_mass", "pendulum", "chain_mdp"] {
        assert!(err.contains(name), "error should list `{name}`:\n{err}");
    }
}

#[test]
fn missing_checkpoint_error_names_the_fix() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    fs::write(
        &cfg,
        format!(
            "[experiment]\nenvs = chain_mdp\nseeds = 0\n\n[case_study]\ncheckpoint = {}\n",
            dir.path().join("nope").join("checkpoint_99").display()
        ),
    )
    .unwrap();
    let out = coordcv()
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(), "case-study"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not found"), "{err}");
    assert!(err.contains("coordcv train"), "remediation should name the train command:\n{err}");
}

#[test]
fn unknown_config_key_is_rejected_with_its_name() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    fs::write(&cfg, "[ppo]\nlearning_rate = 0.01\n").unwrap();
    let out = coordcv().args(["--config", cfg.to_str().unwrap(), "train"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ppo.learning_rate"), "{err}");
}

#[test]
fn cv_flag_restricts_the_grid() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    write_tiny_config(&cfg);
    let out_dir = dir.path().join("out");
    let status = coordcv()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--cv",
            "scalar",
            "--seed",
            "1",
            "train",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("chain_mdp,scalar,1,0,"), "{}", rows[0]);
    assert!(out_dir.join("chain_mdp").join("scalar").join("seed1").join("curves.csv").exists());
}

#[test]
fn sweep_covers_the_grid_and_tags_rows() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    fs::write(
        &cfg,
        "\
[experiment]
envs = chain_mdp
cv = scalar
seeds = 0
workers = 1

[ppo]
hidden = 8
baseline_hidden = 8
steps_per_update = 256
total_steps = 512
epochs = 2
minibatches = 4

[sweep]
lambda = 0,1
rho = 0,0.1
",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = coordcv()
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "sweep"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("env,lambda,rho,cv_mode,mean_return_all,mean_return_last100,stderr"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4, "2 lambdas x 2 rhos: {rows:?}");
    for (lambda, rho) in [("0", "0"), ("0", "0.1"), ("1", "0"), ("1", "0.1")] {
        assert!(
            rows.iter().any(|r| r.starts_with(&format!("chain_mdp,{lambda},{rho},scalar,"))),
            "missing cell lambda={lambda} rho={rho}:\n{rows:?}"
        );
    }
    for row in &rows {
        for cell in row.split(',').skip(4) {
            assert!(cell.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn case_study_writes_all_rows_and_histograms() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("cfg.ini");
    fs::write(
        &cfg,
        "\
[experiment]
envs = chain_mdp
cv = value
seeds = 0
workers = 1

[ppo]
hidden = 8
baseline_hidden = 8
steps_per_update = 256
total_steps = 512
epochs = 2
minibatches = 4

[case_study]
fit_steps = 400
eval_steps = 400
ref_multiple = 2
budget_updates = 2
bins = 10
fit_epochs = 4
fit_minibatches = 4
mse_chunks = 5
",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = coordcv()
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "case-study"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));

    let case = fs::read_to_string(out_dir.join("case_study.csv")).unwrap();
    let mut lines = case.lines();
    assert_eq!(lines.next(), Some("cv_mode,variance,ci_lo,ci_hi,mse,n_eval"));
    let rows: Vec<&str> = lines.collect();
    let order: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(order, ["none", "value", "value_refit", "scalar", "layer", "coord"]);
    for row in &rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 6);
        let var: f64 = cells[1].parse().unwrap();
        let lo: f64 = cells[2].parse().unwrap();
        let hi: f64 = cells[3].parse().unwrap();
        assert!(lo <= var && var <= hi, "CI must bracket the point estimate: {row}");
        assert_eq!(cells[5], "400");
    }
    for stem in ["hist_per_sample", "hist_per_coord"] {
        let hist = fs::read_to_string(out_dir.join(format!("{stem}.csv"))).unwrap();
        assert_eq!(hist.lines().next(), Some("bin_lo,bin_hi,count"));
        assert_eq!(hist.lines().count(), 11, "10 bins plus header");
        assert!(out_dir.join(format!("{stem}.svg")).exists());
    }

    // a second invocation reuses the checkpoint the first one trained
    let out2 = coordcv()
        .args(["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "case-study"])
        .output()
        .unwrap();
    assert!(out2.status.success());
    let text = String::from_utf8_lossy(&out2.stdout);
    assert!(text.contains("loading checkpoint"), "{text}");
}
