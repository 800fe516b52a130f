//! Experiment drivers behind the CLI: the (env, cv, seed) training grid,
//! the frozen-policy variance case study, the (lambda, rho) ablation sweep,
//! and the finite-difference audit, plus the plumbing they share (key = value
//! config files, CSV tables, SVG plots).
//!
//! Every output is deterministic for a fixed seed and config: cells run in a
//! worker pool but are internally seeded, results are written by the main
//! thread in a fixed order, and floats print in shortest round-trip form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::baseline_fit::{fit, BaselineNet, FitConfig};
use crate::envs::{compute_targets, make_env, Collector, RolloutBatch};
use crate::error::{Error, Result};
use crate::estimators::{mse_vs_reference, pg_estimate, trace_variance, BaselineValues, CvMode};
use crate::gradcheck::{run_all, GradCheckReport};
use crate::linalg::{mean, sample_variance};
use crate::policy::{score_matrix, LazyScores, Policy};
use crate::ppo::{AnyPolicy, PpoConfig, Trainer, TrainHooks};
use crate::rng::rng_from;
use crate::stats::Histogram;

pub const CURVES_HEADER: &str = "step,episode,return,cv_mode,seed";
pub const CASE_HEADER: &str = "cv_mode,variance,ci_lo,ci_hi,mse,n_eval";
pub const SWEEP_HEADER: &str = "env,lambda,rho,cv_mode,mean_return_all,mean_return_last100,stderr";
pub const SUMMARY_HEADER: &str =
    "env,cv_mode,n_seeds,failed_seeds,mean_return_all,stderr_all,mean_return_last100,stderr_last100";
pub const IMPROVE_HEADER: &str = "cv_mode,improve_all,improve_last100";
pub const HIST_HEADER: &str = "bin_lo,bin_hi,count";

// ─── Config files ────────────────────────────────────────────────────────────

/// Parsed `key = value` file with `[section]` headers. Lines starting with
/// `#` or `;` are comments; keys keep file order within their section.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::InvalidConfig(format!("line {}: unclosed section header", lineno + 1)))?;
                sections.push((name.trim().to_string(), Vec::new()));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1)))?;
            let section = sections
                .last_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: key outside any [section]", lineno + 1)))?;
            section.1.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(ConfigFile { sections })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn entries(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.sections
            .iter()
            .flat_map(|(sec, kvs)| kvs.iter().map(move |(k, v)| (sec.as_str(), k.as_str(), v.as_str())))
    }
}

fn parse_one<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for {section}.{key}")))
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|s| parse_one(section, key, s.trim())).collect()
}

pub fn parse_cv_mode(s: &str) -> Result<CvMode> {
    match s {
        "value" => Ok(CvMode::Value),
        "scalar" => Ok(CvMode::Scalar),
        "layer" => Ok(CvMode::Layer),
        "coord" => Ok(CvMode::Coord),
        _ => Err(Error::InvalidConfig(format!(
            "unknown cv mode `{s}`; valid: value, scalar, layer, coord"
        ))),
    }
}

// ─── Experiment configuration ────────────────────────────────────────────────

/// Knobs for the frozen-policy case study. Sample sizes default to a desk
/// scale that still separates the estimator families cleanly.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseStudyConfig {
    pub fit_steps: usize,
    pub eval_steps: usize,
    /// reference sample = ref_multiple * eval_steps
    pub ref_multiple: usize,
    /// training budget, in updates, when no checkpoint exists yet
    pub budget_updates: usize,
    pub bins: usize,
    pub fit_epochs: usize,
    pub fit_minibatches: usize,
    pub mse_chunks: usize,
    /// explicit checkpoint path; bypasses the conventional location
    pub checkpoint: Option<PathBuf>,
    /// overwrite the Gaussian head's log_std after loading (degenerate runs)
    pub force_log_std: Option<f64>,
}

impl Default for CaseStudyConfig {
    fn default() -> Self {
        CaseStudyConfig {
            fit_steps: 10_000,
            eval_steps: 10_000,
            ref_multiple: 3,
            budget_updates: 50,
            bins: 40,
            fit_epochs: 40,
            fit_minibatches: 32,
            mse_chunks: 10,
            checkpoint: None,
            force_log_std: None,
        }
    }
}

/// Everything a command needs: the cell grid, the PPO template each cell
/// copies, the sweep grid, and output plumbing.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub envs: Vec<String>,
    pub cv_modes: Vec<CvMode>,
    pub seeds: Vec<u64>,
    pub ppo: PpoConfig,
    pub grid_lambda: Vec<f64>,
    pub grid_rho: Vec<f64>,
    pub out_dir: PathBuf,
    /// worker threads for independent cells; 0 picks one per core
    pub workers: usize,
    pub case: CaseStudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            envs: vec!["point_mass".to_string()],
            cv_modes: vec![CvMode::Value, CvMode::Scalar, CvMode::Layer, CvMode::Coord],
            seeds: vec![0, 1, 2, 3],
            ppo: PpoConfig::default(),
            grid_lambda: vec![0.0, 0.1, 1.0],
            grid_rho: vec![0.0, 0.1],
            out_dir: PathBuf::from("out"),
            workers: 0,
            case: CaseStudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn apply_file(&mut self, file: &ConfigFile) -> Result<()> {
        for (sec, key, value) in file.entries() {
            self.apply_entry(sec, key, value)?;
        }
        Ok(())
    }

    fn apply_entry(&mut self, sec: &str, key: &str, value: &str) -> Result<()> {
        match (sec, key) {
            ("experiment", "env") | ("experiment", "envs") => {
                self.envs = value.split(',').map(|s| s.trim().to_string()).collect();
            }
            ("experiment", "cv") => {
                self.cv_modes = value.split(',').map(|s| parse_cv_mode(s.trim())).collect::<Result<_>>()?;
            }
            ("experiment", "seeds") => self.seeds = parse_list(sec, key, value)?,
            ("experiment", "out") => self.out_dir = PathBuf::from(value),
            ("experiment", "workers") => self.workers = parse_one(sec, key, value)?,

            ("ppo", "gamma") => self.ppo.gamma = parse_one(sec, key, value)?,
            ("ppo", "gae_lambda") => self.ppo.gae_lambda = parse_one(sec, key, value)?,
            ("ppo", "clip_eps") => self.ppo.clip_eps = parse_one(sec, key, value)?,
            ("ppo", "epochs") => self.ppo.epochs = parse_one(sec, key, value)?,
            ("ppo", "minibatches") => self.ppo.minibatches = parse_one(sec, key, value)?,
            ("ppo", "lr") => self.ppo.lr = parse_one(sec, key, value)?,
            ("ppo", "anneal_lr") => self.ppo.anneal_lr = parse_one(sec, key, value)?,
            ("ppo", "vf_coef") => self.ppo.vf_coef = parse_one(sec, key, value)?,
            ("ppo", "ent_coef") => self.ppo.ent_coef = parse_one(sec, key, value)?,
            ("ppo", "max_grad_norm") => self.ppo.max_grad_norm = parse_one(sec, key, value)?,
            ("ppo", "steps_per_update") => self.ppo.steps_per_update = parse_one(sec, key, value)?,
            ("ppo", "total_steps") => self.ppo.total_steps = parse_one(sec, key, value)?,
            ("ppo", "hidden") => self.ppo.hidden = parse_list(sec, key, value)?,
            ("ppo", "baseline_hidden") => self.ppo.baseline_hidden = parse_list(sec, key, value)?,
            ("ppo", "normalize_obs") => self.ppo.normalize_obs = parse_one(sec, key, value)?,
            ("ppo", "norm_adv") => self.ppo.norm_adv = parse_one(sec, key, value)?,
            ("ppo", "per_column_adv_norm") => self.ppo.per_column_adv_norm = parse_one(sec, key, value)?,
            ("ppo", "independent_sample") => self.ppo.independent_sample = parse_one(sec, key, value)?,

            ("fit", "lambda") => self.ppo.fit.lambda = parse_one(sec, key, value)?,
            ("fit", "rho") => self.ppo.fit.rho = parse_one(sec, key, value)?,
            ("fit", "epochs") => self.ppo.fit.epochs = parse_one(sec, key, value)?,
            ("fit", "minibatches") => self.ppo.fit.minibatches = parse_one(sec, key, value)?,
            ("fit", "lr") => self.ppo.fit.lr = parse_one(sec, key, value)?,
            ("fit", "max_grad_norm") => self.ppo.fit.max_grad_norm = parse_one(sec, key, value)?,
            ("fit", "full_batch_norm") => self.ppo.fit.full_batch_norm = parse_one(sec, key, value)?,

            ("case_study", "fit_steps") => self.case.fit_steps = parse_one(sec, key, value)?,
            ("case_study", "eval_steps") => self.case.eval_steps = parse_one(sec, key, value)?,
            ("case_study", "ref_multiple") => self.case.ref_multiple = parse_one(sec, key, value)?,
            ("case_study", "budget_updates") => self.case.budget_updates = parse_one(sec, key, value)?,
            ("case_study", "bins") => self.case.bins = parse_one(sec, key, value)?,
            ("case_study", "fit_epochs") => self.case.fit_epochs = parse_one(sec, key, value)?,
            ("case_study", "fit_minibatches") => self.case.fit_minibatches = parse_one(sec, key, value)?,
            ("case_study", "mse_chunks") => self.case.mse_chunks = parse_one(sec, key, value)?,
            ("case_study", "checkpoint") => self.case.checkpoint = Some(PathBuf::from(value)),
            ("case_study", "force_log_std") => self.case.force_log_std = Some(parse_one(sec, key, value)?),

            ("sweep", "lambda") => self.grid_lambda = parse_list(sec, key, value)?,
            ("sweep", "rho") => self.grid_rho = parse_list(sec, key, value)?,

            _ => return Err(Error::InvalidConfig(format!("unknown config key `{sec}.{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("need at least one seed".to_string()));
        }
        if self.envs.is_empty() {
            return Err(Error::InvalidConfig("need at least one environment".to_string()));
        }
        for env in &self.envs {
            make_env(env)?;
        }
        if self.cv_modes.is_empty() {
            return Err(Error::InvalidConfig("need at least one cv mode".to_string()));
        }
        self.ppo.validate()
    }

    /// Resolved values in the same format the parser reads, for the sidecar
    /// snapshot written next to every output.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# resolved configuration");
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "envs = {}", self.envs.join(","));
        let cv: Vec<&str> = self.cv_modes.iter().map(|c| c.as_str()).collect();
        let _ = writeln!(s, "cv = {}", cv.join(","));
        let _ = writeln!(s, "seeds = {}", join_display(&self.seeds));
        let _ = writeln!(s, "out = {}", self.out_dir.display());
        let _ = writeln!(s, "workers = {}", self.workers);
        let p = &self.ppo;
        let _ = writeln!(s, "\n[ppo]");
        let _ = writeln!(s, "gamma = {}", p.gamma);
        let _ = writeln!(s, "gae_lambda = {}", p.gae_lambda);
        let _ = writeln!(s, "clip_eps = {}", p.clip_eps);
        let _ = writeln!(s, "epochs = {}", p.epochs);
        let _ = writeln!(s, "minibatches = {}", p.minibatches);
        let _ = writeln!(s, "lr = {}", p.lr);
        let _ = writeln!(s, "anneal_lr = {}", p.anneal_lr);
        let _ = writeln!(s, "vf_coef = {}", p.vf_coef);
        let _ = writeln!(s, "ent_coef = {}", p.ent_coef);
        let _ = writeln!(s, "max_grad_norm = {}", p.max_grad_norm);
        let _ = writeln!(s, "steps_per_update = {}", p.steps_per_update);
        let _ = writeln!(s, "total_steps = {}", p.total_steps);
        let _ = writeln!(s, "hidden = {}", join_display(&p.hidden));
        let _ = writeln!(s, "baseline_hidden = {}", join_display(&p.baseline_hidden));
        let _ = writeln!(s, "normalize_obs = {}", p.normalize_obs);
        let _ = writeln!(s, "norm_adv = {}", p.norm_adv);
        let _ = writeln!(s, "per_column_adv_norm = {}", p.per_column_adv_norm);
        let _ = writeln!(s, "independent_sample = {}", p.independent_sample);
        let f = &p.fit;
        let _ = writeln!(s, "\n[fit]");
        let _ = writeln!(s, "lambda = {}", f.lambda);
        let _ = writeln!(s, "rho = {}", f.rho);
        let _ = writeln!(s, "epochs = {}", f.epochs);
        let _ = writeln!(s, "minibatches = {}", f.minibatches);
        let _ = writeln!(s, "lr = {}", f.lr);
        let _ = writeln!(s, "max_grad_norm = {}", f.max_grad_norm);
        let _ = writeln!(s, "full_batch_norm = {}", f.full_batch_norm);
        let c = &self.case;
        let _ = writeln!(s, "\n[case_study]");
        let _ = writeln!(s, "fit_steps = {}", c.fit_steps);
        let _ = writeln!(s, "eval_steps = {}", c.eval_steps);
        let _ = writeln!(s, "ref_multiple = {}", c.ref_multiple);
        let _ = writeln!(s, "budget_updates = {}", c.budget_updates);
        let _ = writeln!(s, "bins = {}", c.bins);
        let _ = writeln!(s, "fit_epochs = {}", c.fit_epochs);
        let _ = writeln!(s, "fit_minibatches = {}", c.fit_minibatches);
        let _ = writeln!(s, "mse_chunks = {}", c.mse_chunks);
        if let Some(ck) = &c.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", ck.display());
        }
        if let Some(ls) = c.force_log_std {
            let _ = writeln!(s, "force_log_std = {ls}");
        }
        let _ = writeln!(s, "\n[sweep]");
        let _ = writeln!(s, "lambda = {}", join_display(&self.grid_lambda));
        let _ = writeln!(s, "rho = {}", join_display(&self.grid_rho));
        s
    }
}

fn join_display<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// CLI flag values; `None` keeps the file or default value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub env: Option<String>,
    pub cv: Option<CvMode>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub independent_sample: bool,
}

/// defaults, then the config file, then CLI flags; flags always win
pub fn resolve_config(file: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = file {
        cfg.apply_file(&ConfigFile::from_path(path)?)?;
    }
    if let Some(s) = ov.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    if let Some(w) = ov.workers {
        cfg.workers = w;
    }
    if let Some(env) = &ov.env {
        cfg.envs = vec![env.clone()];
    }
    if let Some(cv) = ov.cv {
        cfg.cv_modes = vec![cv];
    }
    if let Some(l) = ov.lambda {
        cfg.ppo.fit.lambda = l;
        cfg.grid_lambda = vec![l];
    }
    if let Some(r) = ov.rho {
        cfg.ppo.fit.rho = r;
        cfg.grid_rho = vec![r];
    }
    if ov.independent_sample {
        cfg.ppo.independent_sample = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ─── CSV plumbing ────────────────────────────────────────────────────────────

/// Shortest round-trip decimal form; refuses NaN and infinities so no CSV
/// ever carries a non-finite cell.
fn fmt_f64(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::NonFinite { context: "csv cell".to_string(), index: 0 });
    }
    Ok(format!("{x}"))
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<(String, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

// ─── Training cells ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
struct CellSpec {
    env: String,
    cv: CvMode,
    seed: u64,
    lambda: f64,
    rho: f64,
    dir: PathBuf,
}

#[derive(Clone, Debug)]
struct CellOutcome {
    spec: CellSpec,
    /// (global env step at episode end, episode index, undiscounted return)
    episodes: Vec<(usize, usize, f64)>,
    error: Option<String>,
}

fn run_cell(spec: &CellSpec, base: &PpoConfig) -> CellOutcome {
    let mut cfg = base.clone();
    cfg.cv_mode = spec.cv;
    cfg.fit.lambda = spec.lambda;
    cfg.fit.rho = spec.rho;
    let mut episodes = Vec::new();
    let mut error = None;

    match Trainer::new(&spec.env, cfg, spec.seed) {
        Ok(mut trainer) => {
            let mut hooks = TrainHooks::none();
            while trainer.global_step() < trainer.cfg().total_steps {
                match trainer.step_update(&mut hooks) {
                    Ok(report) => {
                        episodes.extend(report.episodes.iter().map(|e| (e.global_step, e.episode, e.ret)));
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            if error.is_none() {
                if episodes.is_empty() {
                    error = Some("no completed episodes; raise total_steps past one horizon".to_string());
                } else if let Err(e) = fs::create_dir_all(&spec.dir).map_err(Error::from).and_then(|()| {
                    trainer.save_checkpoint(&spec.dir.join(format!("checkpoint_{}", trainer.global_step())))
                }) {
                    error = Some(e.to_string());
                }
            }
        }
        Err(e) => error = Some(e.to_string()),
    }
    CellOutcome { spec: spec.clone(), episodes, error }
}

fn run_cells(specs: &[CellSpec], base: &PpoConfig, workers: usize) -> Result<Vec<CellOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    Ok(pool.install(|| specs.par_iter().map(|s| run_cell(s, base)).collect()))
}

fn curves_rows(out: &CellOutcome) -> Result<Vec<String>> {
    out.episodes
        .iter()
        .map(|&(step, ep, ret)| Ok(format!("{step},{ep},{},{},{}", fmt_f64(ret)?, out.spec.cv.as_str(), out.spec.seed)))
        .collect()
}

/// all-episode mean and last-100-episode mean, or None without episodes
fn cell_stats(episodes: &[(usize, usize, f64)]) -> Option<(f64, f64)> {
    if episodes.is_empty() {
        return None;
    }
    let rets: Vec<f64> = episodes.iter().map(|e| e.2).collect();
    let tail = &rets[rets.len().saturating_sub(100)..];
    Some((mean(&rets), mean(tail)))
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (sample_variance(xs) / xs.len() as f64).sqrt())
}

// ─── cmd_train ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub env: String,
    pub cv: CvMode,
    pub n_seeds: usize,
    pub failed_seeds: usize,
    pub mean_all: f64,
    pub se_all: f64,
    pub mean_last: f64,
    pub se_last: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<SummaryRow>,
    /// per cv mode: mean over envs of (method - value) / |value|
    pub improve: Vec<(CvMode, f64, f64)>,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config_snapshot.txt"), cfg.snapshot())?;

    let mut specs = Vec::new();
    for env in &cfg.envs {
        for &cv in &cfg.cv_modes {
            for &seed in &cfg.seeds {
                specs.push(CellSpec {
                    env: env.clone(),
                    cv,
                    seed,
                    lambda: cfg.ppo.fit.lambda,
                    rho: cfg.ppo.fit.rho,
                    dir: cfg.out_dir.join(env).join(cv.as_str()).join(format!("seed{seed}")),
                });
            }
        }
    }
    let outcomes = run_cells(&specs, &cfg.ppo, cfg.workers)?;

    for out in &outcomes {
        write_csv(&out.spec.dir.join("curves.csv"), CURVES_HEADER, &curves_rows(out)?)?;
    }
    write_failures(&cfg.out_dir, &outcomes)?;

    let summary = summarize(cfg, &outcomes)?;
    write_summary(&cfg.out_dir, &summary)?;
    verify_improve(cfg, &summary)?;
    for env in &cfg.envs {
        write_env_svg(cfg, env, &outcomes)?;
    }
    print_summary(&summary);
    Ok(summary)
}

fn write_failures(out_dir: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let rows: Vec<String> = outcomes
        .iter()
        .filter_map(|o| {
            o.error.as_ref().map(|e| {
                format!("{},{},{},{}", o.spec.env, o.spec.cv.as_str(), o.spec.seed, e.replace(',', ";"))
            })
        })
        .collect();
    if !rows.is_empty() {
        write_csv(&out_dir.join("failures.csv"), "env,cv_mode,seed,error", &rows)?;
        for row in &rows {
            eprintln!("cell failed: {row}");
        }
    }
    Ok(())
}

fn summarize(cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Result<TrainSummary> {
    let mut per: BTreeMap<(String, &'static str), (Vec<f64>, Vec<f64>, usize, usize)> = BTreeMap::new();
    for out in outcomes {
        let key = (out.spec.env.clone(), out.spec.cv.as_str());
        let entry = per.entry(key).or_default();
        entry.2 += 1;
        match (out.error.is_none(), cell_stats(&out.episodes)) {
            (true, Some((all, last))) => {
                entry.0.push(all);
                entry.1.push(last);
            }
            _ => entry.3 += 1,
        }
    }

    let mut rows = Vec::new();
    for env in &cfg.envs {
        for &cv in &cfg.cv_modes {
            let Some((alls, lasts, n, failed)) = per.get(&(env.clone(), cv.as_str())) else { continue };
            if alls.is_empty() {
                continue;
            }
            let (mean_all, se_all) = mean_se(alls);
            let (mean_last, se_last) = mean_se(lasts);
            rows.push(SummaryRow {
                env: env.clone(),
                cv,
                n_seeds: *n,
                failed_seeds: *failed,
                mean_all,
                se_all,
                mean_last,
                se_last,
            });
        }
    }

    let improve = improve_columns(cfg, &rows);
    Ok(TrainSummary { rows, improve })
}

/// Mean over envs of (method - value) / |value|, per cv mode, for both the
/// all-episode and last-100 means. Empty when no value row survived.
fn improve_columns(cfg: &ExperimentConfig, rows: &[SummaryRow]) -> Vec<(CvMode, f64, f64)> {
    let value_by_env: BTreeMap<&str, (f64, f64)> = rows
        .iter()
        .filter(|r| r.cv == CvMode::Value)
        .map(|r| (r.env.as_str(), (r.mean_all, r.mean_last)))
        .collect();
    if value_by_env.is_empty() {
        return Vec::new();
    }
    let mut improve = Vec::new();
    for &cv in &cfg.cv_modes {
        let mut alls = Vec::new();
        let mut lasts = Vec::new();
        for r in rows.iter().filter(|r| r.cv == cv) {
            if let Some(&(va, vl)) = value_by_env.get(r.env.as_str()) {
                if va != 0.0 && vl != 0.0 {
                    alls.push((r.mean_all - va) / va.abs());
                    lasts.push((r.mean_last - vl) / vl.abs());
                }
            }
        }
        if !alls.is_empty() {
            improve.push((cv, mean(&alls), mean(&lasts)));
        }
    }
    improve
}

fn write_summary(out_dir: &Path, summary: &TrainSummary) -> Result<()> {
    let mut rows = Vec::new();
    for r in &summary.rows {
        rows.push(format!(
            "{},{},{},{},{},{},{},{}",
            r.env,
            r.cv.as_str(),
            r.n_seeds,
            r.failed_seeds,
            fmt_f64(r.mean_all)?,
            fmt_f64(r.se_all)?,
            fmt_f64(r.mean_last)?,
            fmt_f64(r.se_last)?
        ));
    }
    write_csv(&out_dir.join("summary.csv"), SUMMARY_HEADER, &rows)?;
    if !summary.improve.is_empty() {
        let mut irows = Vec::new();
        for (cv, all, last) in &summary.improve {
            irows.push(format!("{},{},{}", cv.as_str(), fmt_f64(*all)?, fmt_f64(*last)?));
        }
        write_csv(&out_dir.join("improve.csv"), IMPROVE_HEADER, &irows)?;
    }
    Ok(())
}

fn print_summary(summary: &TrainSummary) {
    println!("{:<12} {:<8} {:>5} {:>18} {:>18}", "env", "cv", "seeds", "mean return (all)", "mean return (100)");
    for r in &summary.rows {
        let seeds = if r.failed_seeds > 0 {
            format!("{}/{}", r.n_seeds - r.failed_seeds, r.n_seeds)
        } else {
            format!("{}", r.n_seeds)
        };
        println!(
            "{:<12} {:<8} {:>5} {:>11.2} ±{:<5.2} {:>11.2} ±{:<5.2}",
            r.env,
            r.cv.as_str(),
            seeds,
            r.mean_all,
            r.se_all,
            r.mean_last,
            r.se_last
        );
    }
    for (cv, all, last) in &summary.improve {
        println!("improve vs value  {:<8} all {:+.1}%  last100 {:+.1}%", cv.as_str(), all * 100.0, last * 100.0);
    }
}

/// Recomputes the improvement column from the raw curve files and insists it
/// matches what the summary pass produced from memory.
pub fn verify_improve(cfg: &ExperimentConfig, summary: &TrainSummary) -> Result<()> {
    let disk = improve_from_disk(cfg)?;
    if disk.len() != summary.improve.len() {
        return Err(Error::InvalidConfig(format!(
            "improve verification: {} rows recomputed from disk vs {} in summary",
            disk.len(),
            summary.improve.len()
        )));
    }
    for ((cv_a, all_a, last_a), (cv_b, all_b, last_b)) in disk.iter().zip(&summary.improve) {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        if cv_a != cv_b || !close(*all_a, *all_b) || !close(*last_a, *last_b) {
            return Err(Error::InvalidConfig(format!(
                "improve verification mismatch for {}: disk ({all_a}, {last_a}) vs summary ({all_b}, {last_b})",
                cv_a.as_str()
            )));
        }
    }
    Ok(())
}

/// Independent pass: parse every curves.csv back and rebuild the improvement
/// column from nothing but the files.
fn improve_from_disk(cfg: &ExperimentConfig) -> Result<Vec<(CvMode, f64, f64)>> {
    let mut stats: BTreeMap<(String, &'static str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for env in &cfg.envs {
        for &cv in &cfg.cv_modes {
            for &seed in &cfg.seeds {
                let path = cfg.out_dir.join(env).join(cv.as_str()).join(format!("seed{seed}")).join("curves.csv");
                if !path.exists() {
                    continue;
                }
                let (header, rows) = read_csv(&path)?;
                if header != CURVES_HEADER {
                    return Err(Error::InvalidConfig(format!("unexpected header in {}", path.display())));
                }
                let rets: Vec<f64> = rows
                    .iter()
                    .map(|r| parse_one::<f64>("curves", "return", &r[2]))
                    .collect::<Result<_>>()?;
                if rets.is_empty() {
                    continue;
                }
                let tail = &rets[rets.len().saturating_sub(100)..];
                let entry = stats.entry((env.clone(), cv.as_str())).or_default();
                entry.0.push(mean(&rets));
                entry.1.push(mean(tail));
            }
        }
    }

    let mut value_by_env: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for ((env, cv), (alls, lasts)) in &stats {
        if *cv == CvMode::Value.as_str() {
            value_by_env.insert(env.clone(), (mean(alls), mean(lasts)));
        }
    }
    if value_by_env.is_empty() {
        return Ok(Vec::new());
    }
    let mut improve = Vec::new();
    for &cv in &cfg.cv_modes {
        let mut alls = Vec::new();
        let mut lasts = Vec::new();
        for env in &cfg.envs {
            let (Some((ma, ml)), Some(&(va, vl))) = (
                stats.get(&(env.clone(), cv.as_str())).map(|(a, l)| (mean(a), mean(l))),
                value_by_env.get(env.as_str()),
            ) else {
                continue;
            };
            if va != 0.0 && vl != 0.0 {
                alls.push((ma - va) / va.abs());
                lasts.push((ml - vl) / vl.abs());
            }
        }
        if !alls.is_empty() {
            improve.push((cv, mean(&alls), mean(&lasts)));
        }
    }
    Ok(improve)
}

// ─── cmd_sweep ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub env: String,
    pub lambda: f64,
    pub rho: f64,
    pub cv: CvMode,
    pub mean_all: f64,
    pub mean_last: f64,
    pub stderr: f64,
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    if cfg.grid_lambda.is_empty() || cfg.grid_rho.is_empty() {
        return Err(Error::InvalidConfig("sweep needs non-empty lambda and rho grids".to_string()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config_snapshot.txt"), cfg.snapshot())?;

    let mut specs = Vec::new();
    for env in &cfg.envs {
        for &lambda in &cfg.grid_lambda {
            for &rho in &cfg.grid_rho {
                for &cv in &cfg.cv_modes {
                    for &seed in &cfg.seeds {
                        specs.push(CellSpec {
                            env: env.clone(),
                            cv,
                            seed,
                            lambda,
                            rho,
                            dir: cfg
                                .out_dir
                                .join("sweep")
                                .join(env)
                                .join(cv.as_str())
                                .join(format!("lam{lambda}_rho{rho}"))
                                .join(format!("seed{seed}")),
                        });
                    }
                }
            }
        }
    }
    let outcomes = run_cells(&specs, &cfg.ppo, cfg.workers)?;
    for out in &outcomes {
        write_csv(&out.spec.dir.join("curves.csv"), CURVES_HEADER, &curves_rows(out)?)?;
    }
    write_failures(&cfg.out_dir, &outcomes)?;

    let mut grouped: BTreeMap<(String, String, String, &'static str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for out in &outcomes {
        if out.error.is_some() {
            continue;
        }
        let Some((all, last)) = cell_stats(&out.episodes) else { continue };
        let key = (
            out.spec.env.clone(),
            format!("{}", out.spec.lambda),
            format!("{}", out.spec.rho),
            out.spec.cv.as_str(),
        );
        let entry = grouped.entry(key).or_default();
        entry.0.push(all);
        entry.1.push(last);
    }

    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for env in &cfg.envs {
        for &lambda in &cfg.grid_lambda {
            for &rho in &cfg.grid_rho {
                for &cv in &cfg.cv_modes {
                    let key = (env.clone(), format!("{lambda}"), format!("{rho}"), cv.as_str());
                    let Some((alls, lasts)) = grouped.get(&key) else { continue };
                    let (mean_all, _) = mean_se(alls);
                    let (mean_last, stderr) = mean_se(lasts);
                    csv_rows.push(format!(
                        "{},{},{},{},{},{},{}",
                        env,
                        key.1,
                        key.2,
                        cv.as_str(),
                        fmt_f64(mean_all)?,
                        fmt_f64(mean_last)?,
                        fmt_f64(stderr)?
                    ));
                    rows.push(SweepRow { env: env.clone(), lambda, rho, cv, mean_all, mean_last, stderr });
                }
            }
        }
    }
    write_csv(&cfg.out_dir.join("sweep.csv"), SWEEP_HEADER, &csv_rows)?;

    println!("{:<12} {:>7} {:>5} {:<8} {:>12} {:>12} {:>8}", "env", "lambda", "rho", "cv", "mean(all)", "mean(100)", "se");
    for r in &rows {
        println!(
            "{:<12} {:>7} {:>5} {:<8} {:>12.2} {:>12.2} {:>8.2}",
            r.env,
            r.lambda,
            r.rho,
            r.cv.as_str(),
            r.mean_all,
            r.mean_last,
            r.stderr
        );
    }
    Ok(rows)
}

// ─── cmd_case_study ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CaseRow {
    pub cv: &'static str,
    pub variance: f64,
    pub ci: (f64, f64),
    pub mse: f64,
    pub mse_se: f64,
    pub n_eval: usize,
}

#[derive(Clone, Debug)]
pub struct CaseStudyReport {
    pub env: String,
    pub checkpoint_step: usize,
    pub fit_steps: usize,
    pub eval_steps: usize,
    pub rows: Vec<CaseRow>,
    pub hist_per_sample: Histogram,
    pub hist_per_coord: Histogram,
}

/// Frozen-policy comparison of the control variate families: collects fit,
/// eval, and reference samples on three separate rng streams, refits each
/// baseline family on the fit sample, and reports trace variance with its
/// chi-square CI plus MSE against the large-sample reference gradient.
pub fn cmd_case_study(cfg: &ExperimentConfig) -> Result<CaseStudyReport> {
    let env = cfg.envs.first().cloned().expect("validated non-empty");
    let seed = cfg.seeds[0];
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config_snapshot.txt"), cfg.snapshot())?;

    let mut trainer = obtain_trainer(cfg, &env, seed)?;
    let checkpoint_step = trainer.global_step();
    let mut policy = trainer.policy().clone();
    if let Some(ls) = cfg.case.force_log_std {
        match &mut policy {
            AnyPolicy::Gaussian(g) => {
                let log_std = vec![ls; g.action_dim()];
                g.set_log_std(&log_std);
            }
            AnyPolicy::Softmax(_) => {
                return Err(Error::InvalidConfig("force_log_std applies only to Gaussian policies".to_string()))
            }
        }
    }
    let critic = trainer.critic().clone();
    let normalizer = trainer.collector_mut().normalizer.clone();

    let rollout = |steps: usize, tag: &str| -> Result<RolloutBatch> {
        let mut collector = Collector::new(make_env(&env)?);
        collector.normalizer = normalizer.clone();
        let mut rng = rng_from(seed, tag);
        let (mut batch, _) = collector.collect(&policy, steps, &mut rng);
        compute_targets(&mut batch, |s| critic.infer_scalar(s), cfg.ppo.gamma, cfg.ppo.gae_lambda);
        Ok(batch)
    };

    println!("case study on {env} at step {checkpoint_step}: collecting samples");
    let fit_batch = rollout(cfg.case.fit_steps, "case-fit")?;
    let eval_batch = rollout(cfg.case.eval_steps, "case-eval")?;
    let ref_batch = rollout(cfg.case.eval_steps * cfg.case.ref_multiple, "case-ref")?;

    let fit_scores = score_matrix(&policy, &fit_batch.states, &fit_batch.actions)?;
    let fit_template = FitConfig {
        lambda: cfg.ppo.fit.lambda,
        rho: cfg.ppo.fit.rho,
        epochs: cfg.case.fit_epochs,
        minibatches: cfg.case.fit_minibatches,
        lr: cfg.ppo.fit.lr,
        max_grad_norm: cfg.ppo.fit.max_grad_norm,
        full_batch_norm: cfg.ppo.fit.full_batch_norm,
    };
    let fit_family = |mode: CvMode, lambda: f64, tag: &str| -> Result<BaselineNet> {
        let mut rng = rng_from(seed, tag);
        let mut net =
            BaselineNet::new(policy.obs_dim(), &cfg.ppo.baseline_hidden, mode, policy.layout().clone(), &mut rng)?;
        let fc = FitConfig { lambda, ..fit_template.clone() };
        fit(&mut net, &fit_batch.states, &fit_batch.q_targets, &fit_scores, &fc, &mut rng)?;
        Ok(net)
    };
    println!("refitting baselines on {} steps", fit_batch.len());
    let refit = fit_family(CvMode::Scalar, 1.0, "case-refit")?;
    let scalar = fit_family(CvMode::Scalar, fit_template.lambda, "case-scalar")?;
    let layer = fit_family(CvMode::Layer, fit_template.lambda, "case-layer")?;
    let coord = fit_family(CvMode::Coord, fit_template.lambda, "case-coord")?;
    drop(fit_scores);

    let lazy_ref = LazyScores::new(&policy, &ref_batch.states, &ref_batch.actions);
    let ref_grad = pg_estimate(
        &lazy_ref,
        &ref_batch.q_targets,
        &BaselineValues::PerSample(ref_batch.value_preds.clone()),
    )?;

    let eval_scores = score_matrix(&policy, &eval_batch.states, &eval_batch.actions)?;
    let n_eval = eval_batch.len();
    let baselines: Vec<(&'static str, BaselineValues)> = vec![
        ("none", BaselineValues::Zero { n: n_eval }),
        ("value", BaselineValues::PerSample(eval_batch.value_preds.clone())),
        ("value_refit", BaselineValues::PerSample(eval_batch.states.iter().map(|s| refit.predict(s)[0]).collect())),
        ("scalar", scalar.baseline_values(&eval_batch.states)),
        ("layer", layer.baseline_values(&eval_batch.states)),
        ("coord", coord.baseline_values(&eval_batch.states)),
    ];
    let mut rows = Vec::new();
    for (name, bv) in &baselines {
        let (variance, ci) = trace_variance(&eval_scores, &eval_batch.q_targets, bv)?;
        let (mse, mse_se) = mse_vs_reference(&eval_scores, &eval_batch.q_targets, bv, &ref_grad, cfg.case.mse_chunks)?;
        rows.push(CaseRow { cv: name, variance, ci, mse, mse_se, n_eval });
    }

    let d = policy.param_count();
    let mut per_sample = vec![0.0; n_eval];
    let mut per_coord = vec![0.0; d];
    for i in 0..n_eval {
        let row = eval_scores.row(i);
        let mut acc = 0.0;
        for (j, &u) in row.iter().enumerate() {
            acc += u * u;
            per_coord[j] += u * u;
        }
        per_sample[i] = acc / d as f64;
    }
    for v in &mut per_coord {
        *v /= n_eval as f64;
    }
    let hist_per_sample = Histogram::from_values(&per_sample, cfg.case.bins);
    let hist_per_coord = Histogram::from_values(&per_coord, cfg.case.bins);

    let mut csv_rows = Vec::new();
    for r in &rows {
        csv_rows.push(format!(
            "{},{},{},{},{},{}",
            r.cv,
            fmt_f64(r.variance)?,
            fmt_f64(r.ci.0)?,
            fmt_f64(r.ci.1)?,
            fmt_f64(r.mse)?,
            r.n_eval
        ));
    }
    write_csv(&cfg.out_dir.join("case_study.csv"), CASE_HEADER, &csv_rows)?;
    write_histogram(&cfg.out_dir, "hist_per_sample", "mean squared score per sample", &hist_per_sample)?;
    write_histogram(&cfg.out_dir, "hist_per_coord", "mean squared score per coordinate", &hist_per_coord)?;

    println!("{:<12} {:>14} {:>26} {:>14}", "cv", "variance", "95% CI", "mse");
    for r in &rows {
        println!(
            "{:<12} {:>14.4} [{:>11.4}, {:>11.4}] {:>14.6}",
            r.cv, r.variance, r.ci.0, r.ci.1, r.mse
        );
    }
    Ok(CaseStudyReport {
        env,
        checkpoint_step,
        fit_steps: fit_batch.len(),
        eval_steps: n_eval,
        rows,
        hist_per_sample,
        hist_per_coord,
    })
}

/// Loads the newest conventional checkpoint, or an explicit one, or trains a
/// value-CV policy in place for the configured update budget.
fn obtain_trainer(cfg: &ExperimentConfig, env: &str, seed: u64) -> Result<Trainer> {
    if let Some(path) = &cfg.case.checkpoint {
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} not found; run `coordcv train --env {env} --seed {seed}` first, or drop the case_study checkpoint key to train in place",
                path.display()
            )));
        }
        return Trainer::load_checkpoint(path);
    }
    let conventional = cfg.out_dir.join(env).join("value").join(format!("seed{seed}"));
    if let Some(path) = newest_checkpoint(&conventional)? {
        println!("loading checkpoint {}", path.display());
        return Trainer::load_checkpoint(&path);
    }

    let mut ppo = cfg.ppo.clone();
    ppo.cv_mode = CvMode::Value;
    ppo.total_steps = cfg.case.budget_updates * ppo.steps_per_update;
    println!("no checkpoint under {}; training {} updates in place", conventional.display(), cfg.case.budget_updates);
    let mut trainer = Trainer::new(env, ppo, seed)?;
    let mut hooks = TrainHooks::none();
    while trainer.global_step() < trainer.cfg().total_steps {
        trainer.step_update(&mut hooks)?;
    }
    fs::create_dir_all(&conventional)?;
    trainer.save_checkpoint(&conventional.join(format!("checkpoint_{}", trainer.global_step())))?;
    Ok(trainer)
}

fn newest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|s| s.to_str()) else { continue };
            if let Some(step) = name.strip_prefix("checkpoint_").and_then(|s| s.parse::<usize>().ok()) {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn write_histogram(out_dir: &Path, stem: &str, title: &str, hist: &Histogram) -> Result<()> {
    let mut rows = Vec::new();
    for (k, &count) in hist.counts.iter().enumerate() {
        let (lo, hi) = hist.bin_edges(k);
        rows.push(format!("{},{},{count}", fmt_f64(lo)?, fmt_f64(hi)?));
    }
    write_csv(&out_dir.join(format!("{stem}.csv")), HIST_HEADER, &rows)?;
    fs::write(out_dir.join(format!("{stem}.svg")), svg_histogram(title, hist))?;
    Ok(())
}

// ─── cmd_gradcheck ───────────────────────────────────────────────────────────

/// Runs the finite-difference audit and prints the per-check table. The
/// caller turns `all_pass` into the process exit code.
pub fn cmd_gradcheck(seed: u64) -> GradCheckReport {
    let report = run_all(seed);
    println!("{report}");
    report
}

// ─── Learning-curve plots ────────────────────────────────────────────────────

pub const PLOT_POINTS: usize = 512;
pub const SMOOTH_WINDOW: usize = 15;

/// Nearest-previous resampling of an event series onto `n` evenly spaced
/// points over [0, x_hi]. Before the first event the first value holds.
fn resample_step(points: &[(f64, f64)], n: usize, x_hi: f64) -> Vec<(f64, f64)> {
    assert!(!points.is_empty() && n >= 2);
    let mut out = Vec::with_capacity(n);
    let mut idx = 0;
    for k in 0..n {
        let x = x_hi * k as f64 / (n - 1) as f64;
        while idx + 1 < points.len() && points[idx + 1].0 <= x {
            idx += 1;
        }
        let y = if points[idx].0 > x { points[0].1 } else { points[idx].1 };
        out.push((x, y));
    }
    out
}

/// Centered moving average; the window shrinks symmetrically at the edges.
fn smooth_window(points: &mut [(f64, f64)], window: usize) {
    let n = points.len();
    if n == 0 || window <= 1 {
        return;
    }
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let half = window / 2;
    for i in 0..n {
        let r = half.min(i).min(n - 1 - i);
        let slice = &ys[i - r..=i + r];
        points[i].1 = slice.iter().sum::<f64>() / slice.len() as f64;
    }
}

fn write_env_svg(cfg: &ExperimentConfig, env: &str, outcomes: &[CellOutcome]) -> Result<()> {
    let mut series = Vec::new();
    let x_hi = outcomes
        .iter()
        .filter(|o| o.spec.env == env)
        .flat_map(|o| o.episodes.last().map(|e| e.0 as f64))
        .fold(0.0, f64::max);
    if x_hi <= 0.0 {
        return Ok(());
    }
    for &cv in &cfg.cv_modes {
        let mut curves = Vec::new();
        for out in outcomes.iter().filter(|o| o.spec.env == env && o.spec.cv == cv && o.error.is_none()) {
            let pts: Vec<(f64, f64)> = out.episodes.iter().map(|&(s, _, r)| (s as f64, r)).collect();
            if !pts.is_empty() {
                curves.push(resample_step(&pts, PLOT_POINTS, x_hi));
            }
        }
        if curves.is_empty() {
            continue;
        }
        let mut avg: Vec<(f64, f64)> = curves[0].clone();
        for curve in &curves[1..] {
            for (a, b) in avg.iter_mut().zip(curve) {
                a.1 += b.1;
            }
        }
        for a in &mut avg {
            a.1 /= curves.len() as f64;
        }
        smooth_window(&mut avg, SMOOTH_WINDOW);
        series.push((cv.as_str().to_string(), avg));
    }
    if !series.is_empty() {
        let svg = svg_line_plot(&format!("{env}: episodic return"), "env steps", "return", &series);
        fs::write(cfg.out_dir.join(env).join("curves.svg"), svg)?;
    }
    Ok(())
}

// ─── SVG rendering ───────────────────────────────────────────────────────────

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const SVG_W: f64 = 860.0;
const SVG_H: f64 = 520.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

fn svg_header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        SVG_W / 2.0
    );
    s
}

fn svg_axes(s: &mut String, x_label: &str, y_label: &str, x_rng: (f64, f64), y_rng: (f64, f64)) {
    let (x0, y0) = (MARGIN_L, SVG_H - MARGIN_B);
    let (x1, y1) = (SVG_W - MARGIN_R, MARGIN_T);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y0 - f * (y0 - y1);
        let xv = x_rng.0 + f * (x_rng.1 - x_rng.0);
        let yv = y_rng.0 + f * (y_rng.1 - y_rng.0);
        let _ = writeln!(
            s,
            r#"<text x="{px}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{xv:.3}</text>"#,
            y0 + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{yv:.3}</text>"#,
            x0 - 6.0,
            py + 4.0
        );
        if k > 0 {
            let _ = writeln!(s, r##"<line x1="{x0}" y1="{py}" x2="{x1}" y2="{py}" stroke="#dddddd"/>"##);
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{x_label}</text>"#,
        (x0 + x1) / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = svg_header(title);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if all.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif">no data</text></svg>"#, SVG_W / 2.0, SVG_H / 2.0);
        return s;
    }
    let x_min = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut y_min = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut y_max = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    let y_rng = (y_min - pad, y_max + pad);
    let x_rng = (x_min, if x_max > x_min { x_max } else { x_min + 1.0 });
    svg_axes(&mut s, x_label, y_label, x_rng, y_rng);

    let px = |x: f64| MARGIN_L + (x - x_rng.0) / (x_rng.1 - x_rng.0) * (SVG_W - MARGIN_L - MARGIN_R);
    let py = |y: f64| (SVG_H - MARGIN_B) - (y - y_rng.0) / (y_rng.1 - y_rng.0) * (SVG_H - MARGIN_T - MARGIN_B);
    for (idx, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let mut d = String::new();
        for (x, y) in pts {
            let _ = write!(d, "{:.2},{:.2} ", px(*x), py(*y));
        }
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
        let ly = MARGIN_T + 16.0 * idx as f64 + 12.0;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/>"#, MARGIN_L + 10.0, ly - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12">{label}</text>"#,
            MARGIN_L + 28.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn svg_histogram(title: &str, hist: &Histogram) -> String {
    let mut s = svg_header(title);
    let max_count = hist.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    svg_axes(&mut s, "value", "count", (hist.lo, hist.hi), (0.0, max_count));
    let n_bins = hist.counts.len() as f64;
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    for (k, &count) in hist.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let h = count as f64 / max_count * plot_h;
        let x = MARGIN_L + k as f64 / n_bins * plot_w;
        let y = SVG_H - MARGIN_B - h;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="#1f77b4" stroke="white" stroke-width="0.5"/>"##,
            plot_w / n_bins
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ENV_NAMES;
    use tempfile::tempdir;

    const SAMPLE: &str = "\
# comment
[experiment]
envs = chain_mdp, point_mass
cv = value, coord
seeds = 5,6
out = /tmp/xyz
workers = 2

[ppo]
gamma = 0.97
hidden = 8,8
total_steps = 4096

[fit]
lambda = 0.25
rho = 0.5

[case_study]
fit_steps = 2000
force_log_std = -10

[sweep]
lambda = 0,1
rho = 0
";

    #[test]
    fn config_file_fills_every_section() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file(&ConfigFile::parse(SAMPLE).unwrap()).unwrap();
        assert_eq!(cfg.envs, vec!["chain_mdp", "point_mass"]);
        assert_eq!(cfg.cv_modes, vec![CvMode::Value, CvMode::Coord]);
        assert_eq!(cfg.seeds, vec![5, 6]);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/xyz"));
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.ppo.gamma, 0.97);
        assert_eq!(cfg.ppo.hidden, vec![8, 8]);
        assert_eq!(cfg.ppo.total_steps, 4096);
        assert_eq!(cfg.ppo.fit.lambda, 0.25);
        assert_eq!(cfg.ppo.fit.rho, 0.5);
        assert_eq!(cfg.case.fit_steps, 2000);
        assert_eq!(cfg.case.force_log_std, Some(-10.0));
        assert_eq!(cfg.grid_lambda, vec![0.0, 1.0]);
        assert_eq!(cfg.grid_rho, vec![0.0]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_file(&ConfigFile::parse("[ppo]\nlearning_rate = 3e-4\n").unwrap()).unwrap_err();
        assert!(err.to_string().contains("ppo.learning_rate"), "{err}");
        assert!(ConfigFile::parse("[ppo\n").is_err());
        assert!(ConfigFile::parse("gamma = 0.9\n").is_err());
        assert!(ConfigFile::parse("[ppo]\ngamma\n").is_err());
        let err = cfg.apply_file(&ConfigFile::parse("[ppo]\ngamma = fast\n").unwrap()).unwrap_err();
        assert!(err.to_string().contains("ppo.gamma"), "{err}");
    }

    #[test]
    fn cli_flags_override_file_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.ini");
        fs::write(&path, SAMPLE).unwrap();
        let ov = Overrides {
            seed: Some(9),
            env: Some("pendulum".to_string()),
            cv: Some(CvMode::Scalar),
            lambda: Some(0.75),
            out: Some(dir.path().join("o")),
            ..Overrides::default()
        };
        let cfg = resolve_config(Some(&path), &ov).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.envs, vec!["pendulum"]);
        assert_eq!(cfg.cv_modes, vec![CvMode::Scalar]);
        assert_eq!(cfg.ppo.fit.lambda, 0.75);
        assert_eq!(cfg.grid_lambda, vec![0.75]);
        assert_eq!(cfg.grid_rho, vec![0.0]);
    }

    #[test]
    fn snapshot_roundtrips_through_the_parser() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file(&ConfigFile::parse(SAMPLE).unwrap()).unwrap();
        let mut reparsed = ExperimentConfig::default();
        reparsed.apply_file(&ConfigFile::parse(&cfg.snapshot()).unwrap()).unwrap();
        assert_eq!(cfg, reparsed);
    }

    #[test]
    fn non_finite_csv_cells_are_rejected() {
        assert!(fmt_f64(f64::NAN).is_err());
        assert!(fmt_f64(f64::INFINITY).is_err());
        assert_eq!(fmt_f64(0.1).unwrap(), "0.1");
    }

    #[test]
    fn resample_holds_the_previous_value() {
        let pts = vec![(10.0, 1.0), (20.0, 2.0), (30.0, 3.0)];
        let rs = resample_step(&pts, 7, 30.0);
        let ys: Vec<f64> = rs.iter().map(|p| p.1).collect();
        // x = 0, 5, 10, 15, 20, 25, 30
        assert_eq!(ys, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn smoothing_preserves_constants_and_flattens_spikes() {
        let mut flat: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 4.0)).collect();
        smooth_window(&mut flat, 15);
        assert!(flat.iter().all(|p| (p.1 - 4.0).abs() < 1e-12));

        let mut spike: Vec<(f64, f64)> = (0..21).map(|i| (i as f64, 0.0)).collect();
        spike[10].1 = 21.0;
        smooth_window(&mut spike, 15);
        assert!(spike[10].1 < 21.0 / 5.0, "peak {} not attenuated", spike[10].1);
    }

    #[test]
    fn improve_recomputation_matches_hand_values() {
        let dir = tempdir().unwrap();
        let cfg = ExperimentConfig {
            envs: vec!["chain_mdp".to_string()],
            cv_modes: vec![CvMode::Value, CvMode::Coord],
            seeds: vec![0],
            out_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        cfg.validate().unwrap();
        let cell = |cv: &str, rets: &[f64]| -> Vec<String> {
            rets.iter().enumerate().map(|(i, r)| format!("{},{},{},{cv},0", (i + 1) * 10, i + 1, r)).collect()
        };
        write_csv(
            &dir.path().join("chain_mdp/value/seed0/curves.csv"),
            CURVES_HEADER,
            &cell("value", &[2.0, 4.0]),
        )
        .unwrap();
        write_csv(
            &dir.path().join("chain_mdp/coord/seed0/curves.csv"),
            CURVES_HEADER,
            &cell("coord", &[3.0, 6.0]),
        )
        .unwrap();
        let improve = improve_from_disk(&cfg).unwrap();
        // value mean 3.0, coord mean 4.5: improvement (4.5 - 3) / 3 = 0.5
        assert_eq!(improve.len(), 2);
        assert_eq!(improve[0].0, CvMode::Value);
        assert!(improve[0].1.abs() < 1e-15 && improve[0].2.abs() < 1e-15);
        assert_eq!(improve[1].0, CvMode::Coord);
        assert!((improve[1].1 - 0.5).abs() < 1e-12, "{}", improve[1].1);
        assert!((improve[1].2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_env_error_names_the_valid_ones() {
        let cfg = ExperimentConfig { envs: vec!["walker".to_string()], ..ExperimentConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        for name in ENV_NAMES {
            assert!(err.contains(name), "error `{err}` misses {name}");
        }
    }
}
