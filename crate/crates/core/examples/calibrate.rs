//! Desk-scale comparison of FedAF, its ablations and the baselines on blob data.
//!
//! `cargo run --release -p fedaf --example calibrate -- [seeds] [noise_sigma] [lambda_loc] [lambda_glob] [tau]`

use std::time::Instant;

use fedaf::data::synth_split;
use fedaf::partition::{dirichlet_partition, PartitionSpec};
use fedaf::{Algorithm, FederationConfig, ModelArchitecture};

fn env(key: &str, default: f32) -> f32 {
    std::env::var(key).map_or(default, |v| v.parse().unwrap())
}

fn desk_config(algorithm: Algorithm, seed: u64) -> FederationConfig {
    let arg = |i: usize, d: f32| std::env::args().nth(i).map_or(d, |s| s.parse().unwrap());
    let mut cfg = FederationConfig::new(algorithm);
    cfg.rounds = 5;
    cfg.ipc = 10;
    cfg.seed = seed;
    cfg.condense.steps = 200;
    cfg.condense.batch_real = 64;
    cfg.server.epochs = 100;
    cfg.server.batch_size = 256;
    cfg.server.lr = env("SERVER_LR", 0.01);
    cfg.condense.image_lr = env("IMAGE_LR", 1.0);
    cfg.condense.lambda_loc = arg(3, 1e-3);
    cfg.server.lambda_glob = arg(4, 2.0);
    cfg.server.tau = arg(5, 2.0);
    cfg.parallel_clients = false;
    cfg
}

fn main() -> fedaf::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(3, |s| s.parse().unwrap());
    let sigma: f32 = args.get(2).map_or(0.3, |s| s.parse().unwrap());
    let arch = ModelArchitecture::convnet((1, 8, 8), env("WIDTH", 16.0) as usize, 3);
    let variants: Vec<(&str, Box<dyn Fn(u64) -> FederationConfig>)> = vec![
        ("fedaf", Box::new(|s| desk_config(Algorithm::FedAf, s))),
        ("fedaf-no-cdc", Box::new(|s| FederationConfig { disable_cdc: true, ..desk_config(Algorithm::FedAf, s) })),
        ("fedaf-no-lgkm", Box::new(|s| FederationConfig { disable_lgkm: true, ..desk_config(Algorithm::FedAf, s) })),
        ("fedaf-gamma-0.2", Box::new(|s| {
            let mut c = desk_config(Algorithm::FedAf, s);
            c.condense.gamma = 0.2;
            c
        })),
        ("feddm", Box::new(|s| desk_config(Algorithm::FedDm, s))),
        ("fedavg", Box::new(|s| desk_config(Algorithm::FedAvg, s))),
    ];
    let only = std::env::var("VARIANTS").ok();
    for (name, make) in &variants {
        if only.as_ref().is_some_and(|o| !o.split(',').any(|v| v == *name)) {
            continue;
        }
        let start = Instant::now();
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let (train, test) = synth_split(3, 300, 300, 8, sigma, seed)?;
            let shards = dirichlet_partition(&train, &PartitionSpec::new(0.05, 4, seed))?;
            if std::env::var("SHOW").is_ok() {
                println!("{:?}", shards.iter().map(|s| s.class_counts.clone()).collect::<Vec<_>>());
            }
            let res = fedaf::federation::run_experiment(&make(seed), &arch, &train, &shards, &test)?;
            accs.push(res.final_accuracy());
        }
        let mean = accs.iter().sum::<f32>() / accs.len() as f32;
        println!("{name:16} mean {mean:.4} {accs:?} ({:.1}s)", start.elapsed().as_secs_f64());
    }
    Ok(())
}
