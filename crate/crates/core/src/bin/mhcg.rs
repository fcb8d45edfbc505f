use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mhcg::game::AcceptanceMode;
use mhcg::harness::{
    load_config, pretrain_stage, prepare, read_metrics, rerun_from_manifest, run_experiment, ExperimentConfig,
    ExperimentId, Manifest, Method,
};
use mhcg::Error;

/// Metropolis-Hastings captioning game at desk scale.
#[derive(Parser)]
#[command(name = "mhcg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and pre-train the agents (cached under OUT/checkpoints).
    Pretrain(Common),
    /// Run an experiment: pre-training (cached), the game and the baselines.
    Play(PlayArgs),
    /// Check the caption chain against the enumerated target.
    Verify(VerifyArgs),
    /// Summarize a run directory; `--check` re-runs it and compares CSV bytes.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to every missing key.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset JSON-lines file to use instead of the generated world.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Args)]
struct PlayArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_experiment)]
    experiment: Option<ExperimentId>,
    /// Comma-separated method list.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_parser = parse_acceptance)]
    acceptance: Option<AcceptanceMode>,
    #[arg(long)]
    freeze_image_heads: bool,
    #[arg(long)]
    pool_size: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding manifest.json.
    dir: PathBuf,
    /// Re-run from the manifest into DIR/rerun and compare every CSV.
    #[arg(long)]
    check: bool,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_experiment(s: &str) -> Result<ExperimentId, String> {
    parse_enum(s)
}

fn parse_method(s: &str) -> Result<Method, String> {
    parse_enum(s)
}

fn parse_acceptance(s: &str) -> Result<AcceptanceMode, String> {
    parse_enum(s)
}

fn base_config(c: &Common) -> mhcg::Result<ExperimentConfig> {
    let mut config = match &c.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    if let Some(world) = &c.world {
        config.world = Some(world.clone());
    }
    Ok(config)
}

fn run(cli: Cli) -> mhcg::Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let config = base_config(&c)?;
            config.validate()?;
            let prepared = prepare(&config)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let ck = pretrain_stage(&config, &prepared, &config.out_dir)?;
            for (name, hash) in &ck.hashes {
                println!("{name}  {hash}");
            }
            Ok(())
        }
        Command::Play(p) => {
            let mut config = base_config(&p.common)?;
            if let Some(e) = p.experiment {
                config.experiment = e;
            }
            if let Some(m) = p.methods {
                config.methods = m;
            }
            if let Some(r) = p.rounds {
                config.game.rounds = r;
            }
            if let Some(a) = p.acceptance {
                config.game.acceptance = a;
            }
            if p.freeze_image_heads {
                config.game.freeze_image_heads = true;
            }
            if let Some(n) = p.pool_size {
                config.pool_size = n;
            }
            if config.experiment == ExperimentId::McmcVerify {
                return Err(Error::Config("use the verify subcommand for mcmc-verify".into()));
            }
            let manifest = run_experiment(&config)?;
            println!("{} written to {}", manifest.outputs.len(), config.out_dir.display());
            Ok(())
        }
        Command::Verify(v) => {
            let mut config = base_config(&v.common)?;
            config.experiment = ExperimentId::McmcVerify;
            if let Some(n) = v.pairs {
                config.verify.pairs = n;
            }
            if let Some(n) = v.steps {
                config.verify.steps = n;
            }
            if let Some(t) = v.threshold {
                config.verify.threshold = t;
            }
            run_experiment(&config)?;
            let report = std::fs::read_to_string(config.out_dir.join("verify.json"))?;
            println!("{report}");
            Ok(())
        }
        Command::Report(r) => report(&r.dir, r.check),
    }
}

fn report(dir: &std::path::Path, check: bool) -> mhcg::Result<()> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    println!("experiment {:?}, status {:?}", manifest.experiment, manifest.status);
    if let Some(e) = &manifest.error {
        println!("error: {e}");
    }
    let metrics_path = dir.join("metrics.csv");
    if metrics_path.exists() {
        let rows = read_metrics(std::fs::File::open(&metrics_path)?)?;
        println!("{:<16}{:<6}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}", "method", "agent", "OP", "OR", "OF1", "CP", "CR", "CF1", "cost");
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &rows {
            let k = (r.method.clone(), r.agent.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (method, agent) in keys {
            let get = |metric: &str| {
                rows.iter()
                    .find(|r| r.method == method && r.agent == agent && r.slice == "overall" && r.metric == metric)
                    .map_or(f64::NAN, |r| r.value)
            };
            println!(
                "{method:<16}{agent:<6}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.2}",
                get("OP"),
                get("OR"),
                get("OF1"),
                get("CP"),
                get("CR"),
                get("CF1"),
                get("decode_cost")
            );
        }
    }
    if let Some(path) = Some(dir.join("verify.json")).filter(|p| p.exists()) {
        println!("{}", std::fs::read_to_string(path)?);
    }
    if check {
        let results = rerun_from_manifest(&dir.join("manifest.json"), &dir.join("rerun"))?;
        let mut same = true;
        for (name, ok) in &results {
            println!("{name}: {}", if *ok { "identical" } else { "DIFFERS" });
            same &= ok;
        }
        if !same {
            return Err(Error::Verification("re-run outputs differ from the manifest".into()));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 3,
        Error::Verification(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
