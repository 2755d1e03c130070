//! Experiment harness: multi-seed training runs, periodic noiseless
//! evaluation, CSV metrics, cross-seed aggregation, and plot-data emission.
//!
//! Per-seed metrics files use the fixed header
//! `step,eval_mean,eval_std,alpha,entropy,critic1_loss,critic2_loss,critic3_loss,policy_loss,wall_ms`;
//! fields a variant does not produce stay empty. Raw metrics are never
//! smoothed on disk; smoothing happens only in the emitted plot series.

use crate::agent::{train, AgentConfig, AgentState, TrainError, TrainObserver, UpdateDiagnostics};
use crate::checkpoint;
use crate::envs::{make_env, Env, EnvError};
use crate::nets::ActorNet;
use crate::policy::deterministic_action;
use crate::replay::RingBuffer;
use crate::rng::split_seed;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

/// Default trial seeds.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 200, 872, 2359, 6574];

pub const CSV_HEADER: &str =
    "step,eval_mean,eval_std,alpha,entropy,critic1_loss,critic2_loss,critic3_loss,policy_loss,wall_ms";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("seed {seed} failed: {message}")]
    SeedFailed { seed: u64, message: String },
}

/// Full description of one experiment.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: String,
    pub agent: AgentConfig,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
    /// Moving-average window for the emitted plot series (1 = raw only).
    pub smooth_window: usize,
    /// Record real wall time in the CSV. Off by default so identical configs
    /// produce byte-identical outputs; timing is the one volatile column.
    pub wall_clock: bool,
}

impl RunConfig {
    pub fn new(env: impl Into<String>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            env: env.into(),
            agent: AgentConfig::default(),
            total_steps: 30_000,
            seeds: DEFAULT_SEEDS.to_vec(),
            eval_interval: 5_000,
            eval_episodes: 20,
            out_dir: out_dir.into(),
            smooth_window: 1,
            wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if let Err(e) = make_env(&self.env) {
            return Err(HarnessError::InvalidConfig(e.to_string()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("seed list is empty".into()));
        }
        if self.eval_interval == 0 {
            return Err(HarnessError::InvalidConfig(
                "eval_interval must be > 0".into(),
            ));
        }
        if self.eval_episodes == 0 {
            return Err(HarnessError::InvalidConfig(
                "eval_episodes must be > 0".into(),
            ));
        }
        if self.smooth_window == 0 {
            return Err(HarnessError::InvalidConfig(
                "smooth_window must be >= 1".into(),
            ));
        }
        self.agent.validate().map_err(HarnessError::InvalidConfig)?;
        Ok(())
    }
}

/// One evaluation row as written to the per-seed CSV.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: u64,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub alpha: f64,
    pub entropy: Option<f64>,
    pub critic_losses: [Option<f64>; 3],
    pub policy_loss: Option<f64>,
    pub wall_ms: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.eval_mean,
            self.eval_std,
            self.alpha,
            fmt_opt(self.entropy),
            fmt_opt(self.critic_losses[0]),
            fmt_opt(self.critic_losses[1]),
            fmt_opt(self.critic_losses[2]),
            fmt_opt(self.policy_loss),
            self.wall_ms,
        )
    }
}

/// Undiscounted return of the noiseless policy over `episodes` episodes.
/// Returns the mean and population standard deviation.
pub fn evaluate(
    actor: &ActorNet,
    env: &mut dyn Env,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64), EnvError> {
    assert!(episodes >= 1);
    let bounds = env.spec().bounds.clone();
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset(split_seed(seed, 0xe7a1_0000 + ep as u64));
        let mut total = 0.0;
        loop {
            let states = crate::diffcore::DiffArray::row(obs);
            let (mu, _) = actor.forward_values(&states);
            let action = deterministic_action(mu.data(), &bounds);
            let out = env.step(&action)?;
            total += out.reward;
            obs = out.obs;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Mean and population standard deviation (divisor n).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Left-edge moving average: element i averages the last min(i+1, window)
/// values.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for i in 0..series.len() {
        acc += series[i];
        if i >= window {
            acc -= series[i - window];
        }
        out.push(acc / window.min(i + 1) as f64);
    }
    out
}

/// Observer that evaluates on a cadence and appends CSV rows.
struct SeedRun<'a> {
    seed: u64,
    env_name: &'a str,
    eval_interval: u64,
    eval_episodes: usize,
    wall_clock: bool,
    started: Instant,
    writer: BufWriter<File>,
    latest: Option<UpdateDiagnostics>,
    // Policy losses only occur on delayed steps; report the most recent one.
    latest_policy_loss: Option<f64>,
    rows: Vec<MetricsRow>,
    fault: Option<HarnessError>,
}

impl TrainObserver for SeedRun<'_> {
    fn on_update(&mut self, _state: &AgentState, diag: &UpdateDiagnostics) {
        if diag.policy_loss.is_some() {
            self.latest_policy_loss = diag.policy_loss;
        }
        self.latest = Some(diag.clone());
    }

    fn on_step(&mut self, state: &AgentState, env_step: u64) {
        if self.fault.is_some() || !env_step.is_multiple_of(self.eval_interval) {
            return;
        }
        let result = (|| -> Result<MetricsRow, HarnessError> {
            let mut eval_env = make_env(self.env_name)?;
            let (eval_mean, eval_std) = evaluate(
                &state.actor,
                eval_env.as_mut(),
                self.eval_episodes,
                split_seed(self.seed, 0xe7a1 ^ env_step),
            )?;
            let wall_ms = if self.wall_clock {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            };
            let (critic_losses, entropy) = match &self.latest {
                Some(d) => (d.critic_losses, d.entropy),
                None => ([None; 3], None),
            };
            let policy_loss = self.latest_policy_loss;
            let row = MetricsRow {
                step: env_step,
                eval_mean,
                eval_std,
                alpha: state.alpha,
                entropy,
                critic_losses,
                policy_loss,
                wall_ms,
            };
            writeln!(self.writer, "{}", row.to_csv())?;
            self.writer.flush()?;
            Ok(row)
        })();
        match result {
            Ok(row) => self.rows.push(row),
            Err(e) => self.fault = Some(e),
        }
    }
}

/// Paths produced by one experiment.
#[derive(Debug)]
pub struct ExperimentOutputs {
    pub per_seed_csv: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub aggregate_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub plot_csv: PathBuf,
    /// (seed, max unsmoothed eval mean) per trial.
    pub max_returns: Vec<(u64, f64)>,
}

fn run_one_seed(config: &RunConfig, seed: u64) -> Result<Vec<MetricsRow>, HarnessError> {
    let csv_path = config.out_dir.join(format!("seed_{seed}.csv"));
    let mut writer = BufWriter::new(File::create(&csv_path)?);
    writeln!(writer, "{CSV_HEADER}")?;
    writer.flush()?;

    let mut env = make_env(&config.env)?;
    let mut state = AgentState::new(config.agent.clone(), env.spec(), seed);
    let mut buffer = RingBuffer::new(config.agent.replay_capacity);
    let mut observer = SeedRun {
        seed,
        env_name: &config.env,
        eval_interval: config.eval_interval,
        eval_episodes: config.eval_episodes,
        wall_clock: config.wall_clock,
        started: Instant::now(),
        writer,
        latest: None,
        latest_policy_loss: None,
        rows: Vec::new(),
        fault: None,
    };
    train(
        &mut state,
        env.as_mut(),
        &mut buffer,
        config.total_steps,
        seed,
        &mut observer,
    )?;
    if let Some(fault) = observer.fault {
        return Err(fault);
    }
    checkpoint::save(&state, &config.out_dir.join(format!("seed_{seed}.ckpt")))?;
    Ok(observer.rows)
}

/// Runs every seed (in parallel), then writes the aggregate, summary, and
/// plot files. A failing seed aborts after all threads finish; partial
/// outputs stay on disk next to an error manifest.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutputs, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;

    let results: Vec<(u64, Result<Vec<MetricsRow>, HarnessError>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| (seed, scope.spawn(move || run_one_seed(config, seed))))
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| {
                let res = h.join().unwrap_or_else(|_| {
                    Err(HarnessError::SeedFailed {
                        seed,
                        message: "seed thread panicked".into(),
                    })
                });
                (seed, res)
            })
            .collect()
    });

    let mut per_seed_rows: Vec<(u64, Vec<MetricsRow>)> = Vec::new();
    let mut failures: Vec<(u64, String)> = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(rows) => per_seed_rows.push((seed, rows)),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    if !failures.is_empty() {
        let manifest = config.out_dir.join("error_manifest.txt");
        let mut w = BufWriter::new(File::create(&manifest)?);
        for (seed, msg) in &failures {
            writeln!(w, "seed {seed}: {msg}")?;
        }
        w.flush()?;
        let (seed, message) = failures.remove(0);
        return Err(HarnessError::SeedFailed { seed, message });
    }

    write_outputs(config, &per_seed_rows)
}

fn write_outputs(
    config: &RunConfig,
    per_seed_rows: &[(u64, Vec<MetricsRow>)],
) -> Result<ExperimentOutputs, HarnessError> {
    // Aggregate over seeds at each step (all seeds share the eval cadence).
    let aggregate_csv = config.out_dir.join("aggregate.csv");
    let steps: Vec<u64> = per_seed_rows[0].1.iter().map(|r| r.step).collect();
    let mut aggregate: Vec<(u64, f64, f64)> = Vec::with_capacity(steps.len());
    {
        let mut w = BufWriter::new(File::create(&aggregate_csv)?);
        // Cross-seed mean and population std (divisor n) of the eval means.
        writeln!(w, "step,eval_mean,eval_std_population,n_seeds")?;
        for (i, &step) in steps.iter().enumerate() {
            let vals: Vec<f64> = per_seed_rows
                .iter()
                .map(|(_, rows)| {
                    assert_eq!(rows[i].step, step, "eval cadence mismatch across seeds");
                    rows[i].eval_mean
                })
                .collect();
            let (m, s) = mean_std(&vals);
            writeln!(w, "{step},{m},{s},{}", vals.len())?;
            aggregate.push((step, m, s));
        }
        w.flush()?;
    }

    // Per-trial maximum of the unsmoothed evaluation means.
    let summary_csv = config.out_dir.join("summary.csv");
    let mut max_returns = Vec::with_capacity(per_seed_rows.len());
    {
        let mut w = BufWriter::new(File::create(&summary_csv)?);
        writeln!(w, "seed,max_eval_mean")?;
        for (seed, rows) in per_seed_rows {
            // Runs shorter than the eval interval have no evaluations and
            // no summary row.
            if let Some(best) = rows.iter().map(|r| r.eval_mean).max_by(f64::total_cmp) {
                writeln!(w, "{seed},{best}")?;
                max_returns.push((*seed, best));
            }
        }
        w.flush()?;
    }

    // Tidy long-format plot data: per-seed series, the cross-seed mean and
    // std, and smoothed variants when a window is configured.
    let plot_csv = config.out_dir.join("plot.csv");
    {
        let mut w = BufWriter::new(File::create(&plot_csv)?);
        writeln!(w, "step,series,value")?;
        let mut emit = |name: &str, steps: &[u64], values: &[f64]| -> io::Result<()> {
            for (s, v) in steps.iter().zip(values) {
                writeln!(w, "{s},{name},{v}")?;
            }
            Ok(())
        };
        for (seed, rows) in per_seed_rows {
            let vals: Vec<f64> = rows.iter().map(|r| r.eval_mean).collect();
            emit(&format!("seed:{seed}"), &steps, &vals)?;
            if config.smooth_window > 1 {
                emit(
                    &format!("seed:{seed}:sma{}", config.smooth_window),
                    &steps,
                    &moving_average(&vals, config.smooth_window),
                )?;
            }
        }
        let means: Vec<f64> = aggregate.iter().map(|a| a.1).collect();
        let stds: Vec<f64> = aggregate.iter().map(|a| a.2).collect();
        emit("mean", &steps, &means)?;
        emit("std", &steps, &stds)?;
        if config.smooth_window > 1 {
            emit(
                &format!("mean:sma{}", config.smooth_window),
                &steps,
                &moving_average(&means, config.smooth_window),
            )?;
        }
        w.flush()?;
    }

    Ok(ExperimentOutputs {
        per_seed_csv: per_seed_rows
            .iter()
            .map(|(s, _)| config.out_dir.join(format!("seed_{s}.csv")))
            .collect(),
        checkpoints: per_seed_rows
            .iter()
            .map(|(s, _)| config.out_dir.join(format!("seed_{s}.ckpt")))
            .collect(),
        aggregate_csv,
        summary_csv,
        plot_csv,
        max_returns,
    })
}

/// Return statistics of a uniform-random policy: the oracle baseline for the
/// learning checks. Returns (mean, population std) over `episodes` episodes.
pub fn random_policy_baseline(
    env_name: &str,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64), HarnessError> {
    let mut env = make_env(env_name)?;
    let bounds = env.spec().bounds.clone();
    let mut rng = crate::rng::rng_from(seed, 0xba5e);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut total = 0.0;
        env.reset(split_seed(seed, 0xba5e_0000 + ep as u64));
        loop {
            let action = bounds.sample_uniform(&mut rng);
            let out = env.step(&action).map_err(HarnessError::Env)?;
            total += out.reward;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}
