use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ncarq::harness::{self, equal_mean_sweep, loss_label, ExperimentConfig, Report};
use ncarq::learning::LearningSchedule;
use ncarq::policy::diff_policies;
use ncarq::{AggregationScheme, ChannelConfig, LossModel, Policy, SchemeKind, StateSpace};

#[derive(Parser)]
#[command(name = "ncarq", version, about = "Network-coded retransmission scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a policy at every loss point and write policy, value and checkpoint files.
    Learn(Common),
    /// Evaluate one policy source (baseline id, policy CSV, or `learn`).
    Eval(Common),
    /// Evaluate several policy sources side by side.
    Compare(Common),
    /// Run the exact small-system checks; exits nonzero if any check fails.
    Oracle(OracleArgs),
    /// List the states on which two policies disagree.
    Diff(DiffArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    /// Loss probability, or a comma-separated sweep.
    #[arg(long, value_delimiter = ',')]
    loss: Vec<f64>,
    /// Equal-mean differentiated sweep, e.g. `0.3:0,0.05,0.1` (mean:spreads).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    tte: Option<u8>,
    #[arg(long)]
    gamma: Option<f64>,
    /// notte, agg1, agg2 or oned.
    #[arg(long)]
    scheme: Option<SchemeKind>,
    /// Policy source(s): learn, uncoded, greedy, sg, msg, random, or a policy CSV.
    #[arg(long, value_delimiter = ',')]
    policy: Vec<String>,
    /// Evaluation slots per seed.
    #[arg(long)]
    slots: Option<u64>,
    /// Number of evaluation seeds.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Learning slots per phase.
    #[arg(long)]
    phase_slots: Option<u64>,
    #[arg(long)]
    max_phases: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 3)]
    users: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.25, 0.4])]
    loss: Vec<f64>,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Allow five users (about a million detailed states).
    #[arg(long)]
    allow_large: bool,
    /// Write the full JSON report into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiffArgs {
    /// Policy CSV, or `sg` / `msg` / `thr:<L>` (OneD threshold).
    left: String,
    right: String,
    #[arg(long, default_value_t = 5)]
    users: usize,
    #[arg(long)]
    tte: Option<u8>,
    #[arg(long, default_value = "notte")]
    scheme: SchemeKind,
}

fn build_config(args: &Common, default_policies: &[&str]) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig {
            channel: ChannelConfig::uniform(5, 0.25, None, 0.99, 1),
            scheme: SchemeKind::NoTte,
            policies: Vec::new(),
            losses: Vec::new(),
            schedule: LearningSchedule::default(),
            eval: Default::default(),
            out: None,
        },
    };
    if let Some(k) = args.users {
        config.channel.k = k;
    }
    if args.tte.is_some() {
        config.channel.tte = args.tte;
    }
    if let Some(g) = args.gamma {
        config.channel.gamma = g;
    }
    if let Some(s) = args.scheme {
        config.scheme = s;
    }
    if let Some(s) = args.seed {
        config.channel.seed = s;
    }
    if let Some(n) = args.slots {
        config.eval.slots = n;
    }
    if let Some(n) = args.seeds {
        config.eval.seeds = n;
    }
    if let Some(n) = args.phase_slots {
        config.schedule.slots_per_phase = n;
    }
    if let Some(n) = args.max_phases {
        config.schedule.max_phases = n;
        config.schedule.min_phases = config.schedule.min_phases.min(n);
    }
    if args.out.is_some() {
        config.out = args.out.clone();
    }
    match args.loss.as_slice() {
        [] => {}
        [p] => {
            config.channel.loss = LossModel::Uniform(*p);
            config.losses.clear();
        }
        many => {
            config.channel.loss = LossModel::Uniform(many[0]);
            config.losses = many.iter().map(|&p| LossModel::Uniform(p)).collect();
        }
    }
    if let Some(preset) = &args.preset {
        let (mean, spreads) = preset.split_once(':').context("preset must look like mean:spread,spread,...")?;
        let mean: f64 = mean.parse().context("preset mean")?;
        let spreads = spreads
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .context("preset spreads")?;
        config.losses = equal_mean_sweep(config.channel.k, mean, &spreads);
        config.channel.loss = config.losses[0].clone();
    }
    if !args.policy.is_empty() {
        config.policies = args.policy.clone();
    } else if config.policies.is_empty() || args.config.is_none() {
        config.policies = default_policies.iter().map(|s| s.to_string()).collect();
    }
    config.validate()?;
    Ok(config)
}

fn print_throughput(report: &Report) {
    println!("{:<12} {:<24} {:>10} {:>10}", "policy", "loss", "throughput", "stderr");
    for point in &report.points {
        for r in &point.results {
            println!(
                "{:<12} {:<24} {:>10.4} {:>10.4}",
                r.name,
                loss_label(&point.loss),
                r.throughput.mean,
                r.throughput.stderr
            );
        }
    }
}

fn print_policies(report: &Report) {
    for point in &report.points {
        let Some(l) = &point.learning else { continue };
        println!(
            "loss {}: {:?} after {} phases ({} slots)",
            loss_label(&point.loss),
            l.stop,
            l.phases,
            l.total_slots
        );
        for (i, state) in report.states.iter().enumerate() {
            println!("  {i:>3} {state:<18} action {} value {:.3}", l.actions[i], l.values[i]);
        }
    }
}

fn finish(report: &Report, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        for f in harness::write_report(report, dir)? {
            eprintln!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn named_policy(space: &StateSpace, name: &str) -> Result<Policy> {
    Ok(match name {
        "sg" => Policy::semi_greedy(space)?,
        "msg" => Policy::modified_semi_greedy(space)?,
        s if s.starts_with("thr:") => Policy::one_d_threshold(space, s[4..].parse().context("threshold")?)?,
        path => harness::read_policy_csv(space, Path::new(path)).with_context(|| format!("reading {path}"))?,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Learn(args) => {
            let mut config = build_config(&args, &["learn"])?;
            config.policies = vec!["learn".into()];
            let report = harness::run_experiment(&config)?;
            print_policies(&report);
            print_throughput(&report);
            finish(&report, config.out.as_deref())?;
        }
        Command::Eval(args) => {
            let config = build_config(&args, &["sg"])?;
            if config.policies.len() != 1 {
                bail!("eval takes one policy source; use compare for several");
            }
            let report = harness::run_experiment(&config)?;
            print_policies(&report);
            print_throughput(&report);
            finish(&report, config.out.as_deref())?;
        }
        Command::Compare(args) => {
            let tte = args.tte.is_some() || args.scheme.is_some_and(|s| s.needs_tte());
            let defaults: &[&str] = if tte {
                &["learn", "msg", "sg", "greedy", "uncoded"]
            } else {
                &["learn", "sg", "greedy", "uncoded"]
            };
            let config = build_config(&args, defaults)?;
            let report = harness::run_experiment(&config)?;
            print_throughput(&report);
            finish(&report, config.out.as_deref())?;
        }
        Command::Oracle(args) => {
            let report = harness::run_oracle_suite(args.users, &args.loss, args.gamma, args.allow_large)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(dir) = &args.out {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("oracle.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                eprintln!("wrote {}", path.display());
            }
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Diff(args) => {
            let space = AggregationScheme::new(args.scheme, args.users, args.tte)?.space();
            let left = named_policy(&space, &args.left)?;
            let right = named_policy(&space, &args.right)?;
            let diffs = diff_policies(&space, &left, &right)?;
            if diffs.is_empty() {
                println!("policies agree on all {} states", space.len());
            }
            for d in diffs {
                println!("{:>3} {:<18} {} vs {}", d.index, d.state, d.left.label(), d.right.label());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
