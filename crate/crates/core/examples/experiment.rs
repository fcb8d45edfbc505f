//! Runs a reduced category experiment from a TOML config and prints the
//! overall CF1 of every method.
//!
//! Pass an output directory as the first argument to keep the files.

use mhcg::harness::{parse_config, read_metrics, run_experiment};

const CONFIG: &str = r#"
seed = 7
pool_size = 300

[game]
rounds = 10
"#;

fn main() -> mhcg::Result<()> {
    let mut config = parse_config(CONFIG)?;
    let tmp = tempfile::tempdir()?;
    config.out_dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().to_path_buf());
    let manifest = run_experiment(&config)?;
    println!("status {:?}, outputs:", manifest.status);
    for (name, hash) in &manifest.outputs {
        println!("  {name:<22} {}", &hash[..12]);
    }
    let rows = read_metrics(std::fs::File::open(config.out_dir.join("metrics.csv"))?)?;
    for r in rows.iter().filter(|r| r.slice == "overall" && r.metric == "CF1") {
        println!("{:<15} {:<4} CF1 {:.3}", r.method, r.agent, r.value);
    }
    Ok(())
}
