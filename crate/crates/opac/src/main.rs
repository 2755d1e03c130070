//! Experiment CLI: multi-seed training, checkpoint evaluation, tabular
//! convergence runs, and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 run failure, 2 invalid configuration.

use clap::{Args, Parser, Subcommand};
use opac::agent::{AgentConfig, Variant};
use opac::checkpoint;
use opac::ensemble::TargetStrategy;
use opac::envs::make_env;
use opac::gradcheck;
use opac::harness::{evaluate, run_experiment, RunConfig, DEFAULT_SEEDS};
use opac::rng::split_seed;
use opac::tabular::{run_convergence_experiment, Schedule};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "opac",
    version,
    about = "Three-critic maximum-entropy actor-critic with SAC/TD3 baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train across seeds; writes per-seed CSVs, aggregate, summary, plot
    /// data, and checkpoints into --out.
    Train(Box<TrainArgs>),
    /// Roll out a checkpointed policy without noise and report the return.
    Eval(EvalArgs),
    /// Tabular triple-Q convergence run; emits sup-norm error CSV rows.
    Tabular(TabularArgs),
    /// Finite-difference gradient checks; nonzero exit on any failure.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Flat key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment name (pendulum, pointmass).
    #[arg(long)]
    env: Option<String>,
    /// Algorithm: opac, sac, or td3.
    #[arg(long)]
    algo: Option<String>,
    /// Target aggregation for opac: mean2 or median3.
    #[arg(long)]
    strategy: Option<String>,
    /// Total environment steps per seed.
    #[arg(long)]
    steps: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Polyak retention coefficient.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    policy_delay: Option<u64>,
    /// Minimum entropy target in nats (default: -action_dim).
    #[arg(long)]
    entropy_target: Option<f64>,
    /// Initial entropy temperature.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    actor_lr: Option<f64>,
    #[arg(long)]
    critic_lr: Option<f64>,
    #[arg(long)]
    alpha_lr: Option<f64>,
    /// Sets actor, critic, and alpha learning rates at once.
    #[arg(long)]
    lr: Option<f64>,
    /// Uniform-random warmup steps before any gradient update.
    #[arg(long)]
    start_steps: Option<u64>,
    #[arg(long)]
    update_every: Option<u64>,
    #[arg(long)]
    replay_capacity: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    hidden: Option<String>,
    /// Target-smoothing noise std (pre-scale units).
    #[arg(long)]
    smooth_sigma: Option<f64>,
    /// Target-smoothing noise clip (pre-scale units).
    #[arg(long)]
    smooth_clip: Option<f64>,
    /// Moving-average window for emitted plot series.
    #[arg(long)]
    smooth_window: Option<usize>,
    /// Record real wall time in wall_ms (breaks byte-for-byte reproducibility
    /// of reruns).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TabularArgs {
    /// mean2 or median3.
    #[arg(long, default_value = "median3")]
    strategy: String,
    #[arg(long, default_value_t = 6)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    actions: usize,
    #[arg(long, default_value_t = 200_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 1000)]
    record_every: usize,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    configs: usize,
    #[arg(long, default_value_t = 20_240)]
    seed: u64,
}

/// Failure that decides the process exit code.
enum CliError {
    /// Bad flags, bad config file, or invalid values: exit 2.
    Config(String),
    /// The run itself failed: exit 1.
    Run(String),
}

impl CliError {
    fn report(self) -> ExitCode {
        match self {
            CliError::Config(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            CliError::Run(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(*args),
        Command::Eval(args) => cmd_eval(args),
        Command::Tabular(args) => cmd_tabular(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => e.report(),
    }
}

/// Parse a flat `key = value` file (comments with '#', blank lines ok).
fn read_config_file(path: &PathBuf) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{}:{}: expected key = value, got '{raw}'",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_from<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|e| CliError::Config(format!("config key '{key}': {e}"))),
    }
}

fn parse_seed_list(raw: &str) -> Result<Vec<u64>, CliError> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("bad seed '{s}'")))
        })
        .collect()
}

fn parse_hidden_list(raw: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad hidden width '{s}'")))
        })
        .collect()
}

/// Merge config-file values under the command-line flags and build the run.
fn build_run_config(args: TrainArgs) -> Result<RunConfig, CliError> {
    let mut file = match &args.config {
        Some(path) => read_config_file(path)?,
        None => BTreeMap::new(),
    };

    // Flags win; file fills the gaps; defaults close the rest. File values
    // are parsed even when overridden so typos never pass silently.
    macro_rules! pick {
        ($flag:expr, $key:literal, $ty:ty) => {{
            let from_file = parse_from::<$ty>(&mut file, $key)?;
            match $flag {
                Some(v) => Some(v),
                None => from_file,
            }
        }};
    }

    let env = pick!(args.env, "env", String).unwrap_or_else(|| "pendulum".to_string());
    let algo = pick!(args.algo, "algo", String).unwrap_or_else(|| "opac".to_string());
    let variant: Variant = algo.parse().map_err(CliError::Config)?;
    let strategy = match pick!(args.strategy, "strategy", String) {
        Some(s) => {
            let parsed: TargetStrategy = s.parse().map_err(CliError::Config)?;
            if parsed == TargetStrategy::MinPair {
                return Err(CliError::Config(
                    "strategy is mean2 or median3; the two-critic rule is implied by sac/td3"
                        .into(),
                ));
            }
            parsed
        }
        None => TargetStrategy::MedianThree,
    };

    let seeds = match pick!(args.seeds, "seeds", String) {
        Some(raw) => parse_seed_list(&raw)?,
        None => DEFAULT_SEEDS.to_vec(),
    };
    let hidden = match pick!(args.hidden, "hidden", String) {
        Some(raw) => parse_hidden_list(&raw)?,
        None => vec![256, 256],
    };

    let lr = pick!(args.lr, "lr", f64);
    let defaults = AgentConfig::default();
    let agent = AgentConfig {
        variant,
        strategy,
        gamma: pick!(args.gamma, "gamma", f64).unwrap_or(defaults.gamma),
        tau: pick!(args.tau, "tau", f64).unwrap_or(defaults.tau),
        batch_size: pick!(args.batch_size, "batch-size", usize).unwrap_or(defaults.batch_size),
        policy_delay: pick!(args.policy_delay, "policy-delay", u64)
            .unwrap_or(defaults.policy_delay),
        entropy_target: pick!(args.entropy_target, "entropy-target", f64),
        initial_alpha: pick!(args.alpha, "alpha", f64).unwrap_or(defaults.initial_alpha),
        actor_lr: pick!(args.actor_lr, "actor-lr", f64)
            .or(lr)
            .unwrap_or(defaults.actor_lr),
        critic_lr: pick!(args.critic_lr, "critic-lr", f64)
            .or(lr)
            .unwrap_or(defaults.critic_lr),
        alpha_lr: pick!(args.alpha_lr, "alpha-lr", f64)
            .or(lr)
            .unwrap_or(defaults.alpha_lr),
        start_steps: pick!(args.start_steps, "start-steps", u64).unwrap_or(defaults.start_steps),
        update_every: pick!(args.update_every, "update-every", u64)
            .unwrap_or(defaults.update_every),
        replay_capacity: pick!(args.replay_capacity, "replay-capacity", usize)
            .unwrap_or(defaults.replay_capacity),
        hidden,
        smoothing_sigma: pick!(args.smooth_sigma, "smooth-sigma", f64)
            .unwrap_or(defaults.smoothing_sigma),
        smoothing_clip: pick!(args.smooth_clip, "smooth-clip", f64)
            .unwrap_or(defaults.smoothing_clip),
    };

    let out_from_file = file.remove("out").map(PathBuf::from);
    let wall_clock_from_file = parse_from::<bool>(&mut file, "wall-clock")?.unwrap_or(false);
    let config = RunConfig {
        env,
        agent,
        total_steps: pick!(args.steps, "steps", u64).unwrap_or(30_000),
        seeds,
        eval_interval: pick!(args.eval_interval, "eval-interval", u64).unwrap_or(5_000),
        eval_episodes: pick!(args.eval_episodes, "eval-episodes", usize).unwrap_or(20),
        out_dir: args
            .out
            .or(out_from_file)
            .unwrap_or_else(|| PathBuf::from("runs/latest")),
        smooth_window: pick!(args.smooth_window, "smooth-window", usize).unwrap_or(1),
        wall_clock: args.wall_clock || wall_clock_from_file,
    };

    if let Some(unknown) = file.keys().next() {
        return Err(CliError::Config(format!("unknown config key '{unknown}'")));
    }
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, CliError> {
    let config = build_run_config(args)?;
    config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "training {} ({}, strategy {}) for {} steps, seeds {:?} -> {}",
        config.env,
        config.agent.variant.name(),
        config.agent.effective_strategy().name(),
        config.total_steps,
        config.seeds,
        config.out_dir.display()
    );
    let outputs = run_experiment(&config).map_err(|e| CliError::Run(e.to_string()))?;
    for (seed, best) in &outputs.max_returns {
        println!("seed {seed}: max average return {best:.2}");
    }
    if outputs.max_returns.is_empty() {
        println!("run shorter than the evaluation interval; no evaluations recorded");
    } else {
        let maxes: Vec<f64> = outputs.max_returns.iter().map(|(_, m)| *m).collect();
        let (mean, std) = opac::harness::mean_std(&maxes);
        println!(
            "max average return over {} trials: {mean:.2} +- {std:.2}",
            maxes.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, CliError> {
    if args.episodes == 0 {
        return Err(CliError::Config("episodes must be >= 1".into()));
    }
    let ckpt = checkpoint::load(&args.checkpoint).map_err(|e| CliError::Run(e.to_string()))?;
    let mut env = make_env(&args.env).map_err(|e| CliError::Config(e.to_string()))?;
    let (mean, std) = evaluate(&ckpt.actor, env.as_mut(), args.episodes, args.seed)
        .map_err(|e| CliError::Run(e.to_string()))?;
    println!(
        "{}: return {mean:.2} +- {std:.2} over {} noiseless episodes (trained {} env steps)",
        args.env, args.episodes, ckpt.env_steps
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_tabular(args: TabularArgs) -> Result<ExitCode, CliError> {
    let strategy: TargetStrategy = args.strategy.parse().map_err(CliError::Config)?;
    if strategy == TargetStrategy::MinPair {
        return Err(CliError::Config("tabular runs use mean2 or median3".into()));
    }
    if args.states == 0 || args.actions == 0 || !(0.0..1.0).contains(&args.gamma) {
        return Err(CliError::Config(
            "states/actions must be positive and gamma in [0, 1)".into(),
        ));
    }
    if args.record_every == 0 || args.steps == 0 {
        return Err(CliError::Config(
            "steps and record-every must be positive".into(),
        ));
    }
    let mdp = opac::envs::random_mdp(args.seed, args.states, args.actions, args.gamma);
    let points = run_convergence_experiment(
        &mdp,
        strategy,
        &Schedule::default(),
        args.steps,
        args.record_every,
        split_seed(args.seed, 0x7ab),
    );

    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => {
            Box::new(std::fs::File::create(path).map_err(|e| CliError::Run(e.to_string()))?)
        }
        None => Box::new(std::io::stdout()),
    };
    let emit = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "step,sup_error_A,sup_error_B,sup_error_C,strategy,seed")?;
        for p in &points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.step,
                p.sup_error[0],
                p.sup_error[1],
                p.sup_error[2],
                strategy.name(),
                args.seed
            )?;
        }
        Ok(())
    };
    emit(out.as_mut()).map_err(|e| CliError::Run(e.to_string()))?;
    let last = points.last().expect("at least one checkpoint");
    eprintln!(
        "final sup errors after {} steps: A {:.4} B {:.4} C {:.4}",
        last.step, last.sup_error[0], last.sup_error[1], last.sup_error[2]
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, CliError> {
    if args.configs == 0 {
        return Err(CliError::Config("configs must be >= 1".into()));
    }
    let report = gradcheck::run_full_suite(args.configs, args.seed);
    println!(
        "gradcheck: {} configurations, max relative error {:.3e} (tolerance {:.0e})",
        report.configs_run,
        report.max_error,
        gradcheck::TOLERANCE
    );
    if report.passed() {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        for failure in &report.failures {
            eprintln!("gradcheck failure: {failure}");
        }
        Err(CliError::Run("gradient check failed".into()))
    }
}
