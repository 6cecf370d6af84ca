//! Runs a config over several seeds and prints the downstream accuracy.
//!
//! cargo run --release -p dpaf-core --example desk_run -- configs/desk.toml 0 1 2 3 4

use std::time::Instant;

use dpaf_core::config::RunConfig;
use dpaf_core::trainer::{evaluate_generator, run_pipeline};

fn main() -> dpaf_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: desk_run CONFIG [SEED...]");
    let base = RunConfig::load(path.as_ref())?;
    let mut seeds: Vec<u64> = args.map(|s| s.parse().expect("seed")).collect();
    if seeds.is_empty() {
        seeds.push(base.seed);
    }
    let (train, test) = base.datasets()?;
    let mut accs = Vec::new();
    for seed in seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        let t = Instant::now();
        let run = run_pipeline(&cfg, &train)?;
        let acc = evaluate_generator(&cfg, &run.generator, &test)?;
        println!("seed {seed}: eps {:.4} acc {acc:.3} ({:.1}s)", run.achieved_epsilon, t.elapsed().as_secs_f64());
        accs.push(acc);
    }
    accs.sort_by(f64::total_cmp);
    println!("median {:.3}", accs[accs.len() / 2]);
    Ok(())
}
