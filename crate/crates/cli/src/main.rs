use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rochico_core::config::{ExperimentConfig, Variant};
use rochico_core::output::{dump_intentions_csv, load_intention_dump, run_to_dir};
use rochico_core::trainer::{ablation_config, Trainer};
use rochico_core::Error;

/// Training and evaluation for dynamic-team cooperative agents.
#[derive(Parser, Debug)]
#[command(name = "rochico", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics, traces and checkpoints to --out.
    Train(TrainArgs),
    /// Greedy rollouts of a checkpoint; prints mean and standard deviation.
    Eval(EvalArgs),
    /// Train one ablation or baseline variant.
    Ablate(TrainArgs),
    /// Convert a run's intention dump to CSV.
    DumpIntentions(DumpArgs),
    /// Parse and validate a config, printing every resolved key.
    ValidateConfig(ConfigArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// A count N (seeds run.seed .. run.seed+N) or a comma list of seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// One of full, C, G, I, k1, k2, k3, idqn, qmix-rand.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    dump_intentions: bool,
    #[arg(long)]
    trace_teams: bool,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A count N (seeds 0..N) or a comma list of evaluation seeds.
    #[arg(long, default_value = "5")]
    seeds: String,
}

#[derive(Args, Debug)]
struct DumpArgs {
    /// Run directory written by `train --dump-intentions`.
    #[arg(long)]
    run: PathBuf,
    /// Directory for individual.csv and team.csv; defaults to the run.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut c = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    c.apply_overrides(&args.overrides)?;
    c.validate()?;
    Ok(c)
}

fn parse_seeds(spec: &str, base: u64) -> Result<Vec<u64>, Error> {
    let bad = || Error::usage(format!("--seeds expects a count or a comma list, got {spec:?}"));
    if spec.contains(',') {
        spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
    } else {
        let n: u64 = spec.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok((base..base + n).collect())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn train(args: &TrainArgs, forced: Option<Variant>) -> Result<(), Error> {
    let mut config = load_config(&args.config)?;
    let variant = match (forced, &args.variant) {
        (Some(v), _) => Some(v),
        (None, Some(v)) => Some(v.parse()?),
        (None, None) => None,
    };
    if let Some(v) = variant {
        config = ablation_config(&config, v);
    }
    config.run.dump_intentions |= args.dump_intentions;
    config.run.trace_teams |= args.trace_teams;
    config.validate()?;
    let seeds = match &args.seeds {
        Some(s) => Some(parse_seeds(s, config.run.seed)?),
        None => None,
    };
    match seeds {
        None => run_one(&config, &args.out, args.resume.as_deref()),
        Some(seeds) => {
            if args.resume.is_some() {
                return Err(Error::usage("--resume applies to a single run, not a seed list"));
            }
            let mut finals = Vec::new();
            for s in seeds {
                let mut c = config.clone();
                c.run.seed = s;
                let t = run_to_dir(&c, &args.out.join(format!("seed-{s}")), None)?;
                finals.push(t);
            }
            for t in &finals {
                println!("seed {}: {} episodes", t.config().run.seed, t.episode());
            }
            Ok(())
        }
    }
}

fn run_one(config: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<(), Error> {
    let t = run_to_dir(config, out, resume)?;
    println!(
        "trained {} episodes ({} variant, seed {}) into {}",
        t.episode(),
        t.config().run.variant,
        t.config().run.seed,
        out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Error> {
    let mut t = Trainer::load_checkpoint(&args.checkpoint)?;
    let seeds = parse_seeds(&args.seeds, 0)?;
    let mut rewards = Vec::new();
    for &s in &seeds {
        let r = t.evaluate(s)?;
        println!("seed {s}: {r:.4}");
        rewards.push(r);
    }
    let (mean, std) = mean_std(&rewards);
    println!("mean reward {mean:.4} ± {std:.4} over {} seeds", rewards.len());
    Ok(())
}

fn dump(args: &DumpArgs) -> Result<(), Error> {
    let d = load_intention_dump(&args.run)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    let rows = dump_intentions_csv(Some(&d), &out)?;
    println!("wrote {rows} intention rows to {}", out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Numeric { .. } => 3,
        Error::Io { .. } | Error::Format(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROCHICO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a, None),
        Command::Ablate(a) => match &a.variant {
            Some(v) => v.parse().and_then(|v| train(a, Some(v))),
            None => Err(Error::usage("ablate needs --variant")),
        },
        Command::Eval(a) => eval(a),
        Command::DumpIntentions(a) => dump(a),
        Command::ValidateConfig(a) => load_config(a).map(|c| print!("{}", c.to_text())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_count_and_list() {
        assert_eq!(parse_seeds("3", 10).unwrap(), vec![10, 11, 12]);
        assert_eq!(parse_seeds("4,9", 10).unwrap(), vec![4, 9]);
        assert!(parse_seeds("0", 0).is_err());
        assert!(parse_seeds("x", 0).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::numeric("decision", "nan")), 3);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 4);
    }
}
