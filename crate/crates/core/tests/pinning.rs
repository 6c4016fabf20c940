use fedaf::condensation::{condense, dm_loss, init_condensed, ClientData, CondenseConfig};
use fedaf::data::synth_blobs;
use fedaf::federation::{local_train, LocalTrainConfig};
use fedaf::partition::{dirichlet_partition, ClientShard, PartitionSpec};
use fedaf::server::{evaluate, train_global, CondensedPool, ServerTrainConfig};
use fedaf::{ModelArchitecture, ModelParams};

fn whole(n: usize, classes: usize, per_class: usize) -> ClientShard {
    ClientShard { id: 0, indices: (0..n).collect(), class_counts: vec![per_class; classes] }
}

#[test]
fn linear_probe_separates_low_noise_blobs() {
    let ds = synth_blobs(3, 200, 8, 0.05, 1).unwrap();
    let arch = ModelArchitecture::mlp((1, 8, 8), vec![], 3);
    let client = ClientData::from_shard(&ds, &whole(ds.len(), 3, 200)).unwrap();
    let cfg = LocalTrainConfig { epochs: 20, batch_size: 32, lr: 0.05, ..LocalTrainConfig::default() };
    let (trained, _) = local_train(&ModelParams::init(&arch, 1).unwrap(), &client, &cfg, 0.0, 1).unwrap();
    let acc = evaluate(&trained, &ds).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn huge_alpha_gives_balanced_shards() {
    for seed in 0..3 {
        let ds = synth_blobs(2, 500, 4, 0.1, seed).unwrap();
        let shards = dirichlet_partition(&ds, &PartitionSpec::new(1e6, 2, seed)).unwrap();
        for s in &shards {
            assert!(s.len().abs_diff(500) <= 25, "seed {seed}: shard {} has {}", s.id, s.len());
        }
    }
}

#[test]
fn condensation_reduces_distribution_matching_loss() {
    let arch = ModelArchitecture::convnet((1, 8, 8), 8, 3);
    let cfg = CondenseConfig { steps: 200, batch_real: 64, lambda_loc: 0.0, ..CondenseConfig::default() };
    let mut decreased = 0;
    for seed in 0..20u64 {
        let ds = synth_blobs(3, 60, 8, 0.5, seed).unwrap();
        let client = ClientData::from_shard(&ds, &whole(ds.len(), 3, 60)).unwrap();
        let global = ModelParams::init(&arch, seed).unwrap();
        let mut set = init_condensed(&client, 5, seed).unwrap();
        let before = dm_loss(&global, &set.per_class, &client.per_class).unwrap();
        condense(&client, &mut set, &global, None, &cfg, seed).unwrap();
        let after = dm_loss(&global, &set.per_class, &client.per_class).unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 19, "decreased in {decreased}/20 runs");
}

#[test]
fn server_cross_entropy_falls_epoch_over_epoch() {
    let arch = ModelArchitecture::convnet((1, 8, 8), 8, 3);
    let cfg = ServerTrainConfig { epochs: 50, ..ServerTrainConfig::default() };
    let mut monotone = 0;
    for seed in 0..20u64 {
        let ds = synth_blobs(3, 40, 8, 0.5, seed).unwrap();
        let client = ClientData::from_shard(&ds, &whole(ds.len(), 3, 40)).unwrap();
        let set = init_condensed(&client, 5, seed).unwrap();
        let pool = CondensedPool::from_classes(set.per_class.clone()).unwrap();
        let (_, report) = train_global(&ModelParams::init(&arch, seed).unwrap(), &pool, None, &cfg, seed).unwrap();
        if report.epoch_ce.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 18, "monotone in {monotone}/20 runs");
}
