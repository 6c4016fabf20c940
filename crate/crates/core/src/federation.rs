//! Round orchestration for FedAF and the baselines, plus communication accounting.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class_matrix::ClassMatrix;
use crate::condensation::{
    build_payload, class_mean_logits, condense, init_condensed, ClientData, ClientPayload, CondenseConfig, CondensedSet,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{ModelArchitecture, ModelParams};
use crate::optim::SgdMomentum;
use crate::partition::ClientShard;
use crate::rng::{self, derive_seed, tag};
use crate::server::{self, CondensedPool, ServerTrainConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAf,
    FedDm,
    FedAvg,
    FedProx,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAf => "fedaf",
            Algorithm::FedDm => "feddm",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
        }
    }

    pub fn is_condensation_based(self) -> bool {
        matches!(self, Algorithm::FedAf | Algorithm::FedDm)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedaf" => Ok(Algorithm::FedAf),
            "feddm" => Ok(Algorithm::FedDm),
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            other => Err(Error::InvalidArgument(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Client-side training for the weight-averaging baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Proximal coefficient; only used by FedProx.
    pub mu: f32,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig { epochs: 10, batch_size: 64, lr: 0.01, momentum: 0.9, mu: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub ipc: usize,
    pub seed: u64,
    pub condense: CondenseConfig,
    pub server: ServerTrainConfig,
    pub local: LocalTrainConfig,
    /// Drop the collaborative condensation term and stop sending `V_k`.
    pub disable_cdc: bool,
    /// Drop the knowledge-matching term and stop sending `R_k`.
    pub disable_lgkm: bool,
    pub parallel_clients: bool,
}

impl FederationConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        FederationConfig {
            algorithm,
            rounds: 20,
            ipc: 50,
            seed: 0,
            condense: CondenseConfig::default(),
            server: ServerTrainConfig::default(),
            local: LocalTrainConfig::default(),
            disable_cdc: false,
            disable_lgkm: false,
            parallel_clients: true,
        }
    }

    pub fn cdc_active(&self) -> bool {
        self.algorithm == Algorithm::FedAf && !self.disable_cdc
    }

    pub fn lgkm_active(&self) -> bool {
        self.algorithm == Algorithm::FedAf && !self.disable_lgkm
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be at least 1".into()));
        }
        if self.algorithm.is_condensation_based() && self.ipc == 0 {
            return Err(Error::InvalidArgument("ipc must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.condense.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {}", self.condense.gamma)));
        }
        if self.server.tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.server.tau)));
        }
        if self.local.mu < 0.0 {
            return Err(Error::InvalidArgument(format!("mu must be non-negative, got {}", self.local.mu)));
        }
        Ok(())
    }
}

/// Byte sizes of everything that crosses the network.
pub mod comm {
    use super::*;

    pub const MIB: f64 = 1_048_576.0;
    pub const MB: f64 = 1_000_000.0;

    /// float32 weights.
    pub fn model_bytes(params: usize) -> usize {
        4 * params
    }

    /// One byte per pixel per channel.
    pub fn image_bytes(images: usize, shape: (usize, usize, usize)) -> usize {
        images * shape.0 * shape.1 * shape.2
    }

    /// A full `C × C` float32 class matrix.
    pub fn class_matrix_bytes(classes: usize) -> usize {
        4 * classes * classes
    }

    pub fn to_mib(bytes: usize) -> f64 {
        bytes as f64 / MIB
    }

    pub fn to_mb(bytes: usize) -> f64 {
        bytes as f64 / MB
    }

    pub fn payload_bytes(payload: &ClientPayload) -> usize {
        payload.upstream_bytes()
    }
}

/// Metrics of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub accuracy: f32,
    /// Per-client upstream bytes, ascending client id.
    pub upstream: Vec<usize>,
    /// Per-client downstream bytes, ascending client id.
    pub downstream: Vec<usize>,
    /// Per-client mean local loss.
    pub client_loss: Vec<f32>,
    /// Final-epoch server cross-entropy (condensation-based methods only).
    pub server_loss: Option<f32>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl RoundRecord {
    pub fn total_bytes(&self) -> usize {
        self.upstream.iter().sum::<usize>() + self.downstream.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub rounds: Vec<RoundRecord>,
    pub params: ModelParams,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f32 {
        self.rounds.last().map_or(f32::NAN, |r| r.accuracy)
    }

    pub fn best_accuracy(&self) -> f32 {
        self.rounds.iter().map(|r| r.accuracy).fold(f32::NAN, f32::max)
    }

    pub fn total_bytes(&self) -> usize {
        self.rounds.iter().map(RoundRecord::total_bytes).sum()
    }
}

/// Mutable state of a federation across rounds.
pub struct Federation {
    cfg: FederationConfig,
    clients: Vec<ClientData>,
    condensed: Vec<Option<CondensedSet>>,
    global: ModelParams,
    global_logits: Option<ClassMatrix>,
    test_images: Tensor,
    test_labels: Vec<usize>,
    round: usize,
}

impl Federation {
    pub fn new(
        cfg: FederationConfig,
        arch: &ModelArchitecture,
        train: &LabeledDataset,
        shards: &[ClientShard],
        test: &LabeledDataset,
    ) -> Result<Self> {
        cfg.validate()?;
        arch.validate()?;
        if arch.input != train.image_shape() || arch.classes != train.classes().max(test.classes()) {
            return Err(Error::InvalidArgument(format!(
                "model expects input {:?} and {} classes, data has {:?} and {}",
                arch.input,
                arch.classes,
                train.image_shape(),
                train.classes()
            )));
        }
        let mut clients = Vec::with_capacity(shards.len());
        for s in shards {
            let mut c = ClientData::from_shard(train, s)?;
            c.per_class.resize(arch.classes, None);
            clients.push(c);
        }
        if clients.is_empty() {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        let global = ModelParams::init(arch, cfg.seed)?;
        let (test_images, test_labels) = test.to_tensor()?;
        let condensed = vec![None; clients.len()];
        Ok(Federation { cfg, clients, condensed, global, global_logits: None, test_images, test_labels, round: 0 })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn global_logits(&self) -> Option<&ClassMatrix> {
        self.global_logits.as_ref()
    }

    pub fn condensed(&self) -> &[Option<CondensedSet>] {
        &self.condensed
    }

    pub fn clients(&self) -> &[ClientData] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Runs every client job, in parallel if configured, keeping client order.
    fn map_clients<T: Send>(&self, job: impl Fn(usize, &ClientData) -> Result<T> + Sync) -> Result<Vec<T>> {
        let wrap = |(k, c): (usize, &ClientData)| job(k, c).map_err(|e| Error::Client { client: c.id, source: Box::new(e) });
        if self.cfg.parallel_clients {
            self.clients.par_iter().enumerate().map(wrap).collect()
        } else {
            self.clients.iter().enumerate().map(wrap).collect()
        }
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        match self.cfg.algorithm {
            Algorithm::FedAf => self.run_fedaf_round(),
            Algorithm::FedDm => self.run_feddm_round(),
            Algorithm::FedAvg => self.run_fedavg_round(),
            Algorithm::FedProx => self.run_fedprox_round(),
        }
    }

    pub fn run_fedaf_round(&mut self) -> Result<RoundRecord> {
        let (cdc, lgkm) = (self.cfg.cdc_active(), self.cfg.lgkm_active());
        self.condensation_round(cdc, lgkm)
    }

    pub fn run_feddm_round(&mut self) -> Result<RoundRecord> {
        self.condensation_round(false, false)
    }

    pub fn run_fedavg_round(&mut self) -> Result<RoundRecord> {
        self.averaging_round(0.0)
    }

    pub fn run_fedprox_round(&mut self) -> Result<RoundRecord> {
        self.averaging_round(self.cfg.local.mu)
    }

    fn condensation_round(&mut self, cdc: bool, lgkm: bool) -> Result<RoundRecord> {
        let start = Instant::now();
        self.round += 1;
        let round = self.round as u64;
        let classes = self.global.arch().classes;
        let n = self.clients.len();
        let mut upstream = vec![0usize; n];
        let mut downstream = vec![comm::model_bytes(self.global.param_count()); n];

        // Before the first condensation the server has no V; clients upload
        // class-mean logits under the initial weights to seed it.
        if cdc && self.global_logits.is_none() {
            let global = &self.global;
            let rows = self.map_clients(|_, c| class_mean_logits(global, &c.per_class))?;
            self.global_logits = Some(server::average_rows(&rows)?.matrix);
            for (u, r) in upstream.iter_mut().zip(&rows) {
                *u += r.wire_bytes();
            }
        }
        if cdc {
            for d in &mut downstream {
                *d += comm::class_matrix_bytes(classes);
            }
        }

        let mut condense_cfg = self.cfg.condense.clone();
        if !cdc {
            condense_cfg.lambda_loc = 0.0;
        }
        let global = &self.global;
        let v = if cdc { self.global_logits.as_ref() } else { None };
        let (ipc, seed, tau) = (self.cfg.ipc, self.cfg.seed, self.cfg.server.tau);
        let prior = &self.condensed;
        let results = self.map_clients(|k, c| {
            let mut set = match &prior[k] {
                Some(s) => s.clone(),
                None => init_condensed(c, ipc, derive_seed(seed, &[tag::INIT_CONDENSED, c.id as u64]))?,
            };
            let report = condense(c, &mut set, global, v, &condense_cfg, derive_seed(seed, &[tag::CONDENSE, round, c.id as u64]))?;
            let payload = build_payload(c, &set, global, tau, cdc, lgkm)?;
            Ok((set, report.mean_loss, payload))
        })?;

        let mut payloads = Vec::with_capacity(n);
        let mut client_loss = Vec::with_capacity(n);
        for (k, (set, loss, payload)) in results.into_iter().enumerate() {
            upstream[k] += payload.upstream_bytes();
            self.condensed[k] = Some(set);
            client_loss.push(loss);
            payloads.push(payload);
        }

        if cdc {
            self.global_logits = Some(server::aggregate_mean_logits(&payloads)?.matrix);
        }
        let r = if lgkm { Some(server::aggregate_soft_labels(&payloads)?.matrix) } else { None };
        let pool = CondensedPool::from_payloads(&payloads, classes)?;
        let mut server_cfg = self.cfg.server.clone();
        if !lgkm {
            server_cfg.lambda_glob = 0.0;
        }
        let (params, report) =
            server::train_global(&self.global, &pool, r.as_ref(), &server_cfg, derive_seed(seed, &[tag::SERVER, round]))?;
        self.global = params;
        let accuracy = server::evaluate_tensor(&self.global, &self.test_images, &self.test_labels)?;
        Ok(RoundRecord {
            round: self.round,
            accuracy,
            upstream,
            downstream,
            client_loss,
            server_loss: report.epoch_ce.last().copied(),
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn averaging_round(&mut self, mu: f32) -> Result<RoundRecord> {
        let start = Instant::now();
        self.round += 1;
        let round = self.round as u64;
        let model_bytes = comm::model_bytes(self.global.param_count());
        let global = &self.global;
        let (local, seed) = (&self.cfg.local, self.cfg.seed);
        let results = self.map_clients(|_, c| {
            local_train(global, c, local, mu, derive_seed(seed, &[tag::LOCAL_TRAIN, round, c.id as u64]))
        })?;
        let sizes: Vec<usize> = self.clients.iter().map(ClientData::len).collect();
        let models: Vec<&ModelParams> = results.iter().map(|(p, _)| p).collect();
        self.global = weighted_average(&models, &sizes)?;
        let accuracy = server::evaluate_tensor(&self.global, &self.test_images, &self.test_labels)?;
        let n = self.clients.len();
        Ok(RoundRecord {
            round: self.round,
            accuracy,
            upstream: vec![model_bytes; n],
            downstream: vec![model_bytes; n],
            client_loss: results.iter().map(|(_, l)| *l).collect(),
            server_loss: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn run(&mut self) -> Result<RunResult> {
        self.run_with(|_| Ok(()))
    }

    /// Runs all remaining rounds, calling `on_round` after each.
    pub fn run_with(&mut self, mut on_round: impl FnMut(&RoundRecord) -> Result<()>) -> Result<RunResult> {
        let mut rounds = Vec::new();
        while self.round < self.cfg.rounds {
            let rec = self.run_round()?;
            on_round(&rec)?;
            rounds.push(rec);
        }
        Ok(RunResult { rounds, params: self.global.clone() })
    }
}

/// `Σ_k p_k w_k` with `p_k = n_k / Σ n`, accumulated in f64 in the given order.
pub fn weighted_average(models: &[&ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let first = *models.first().ok_or(Error::EmptySet)?;
    if models.len() != sizes.len() {
        return Err(Error::InvalidArgument("one size per model required".into()));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::EmptySet);
    }
    let mut acc: Vec<Vec<f64>> = first.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (m, &n) in models.iter().zip(sizes) {
        if m.arch() != first.arch() {
            return Err(Error::InvalidArgument("models differ in architecture".into()));
        }
        let p = n as f64 / total as f64;
        for (a, t) in acc.iter_mut().zip(m.tensors()) {
            for (x, &v) in a.iter_mut().zip(t.data()) {
                *x += p * v as f64;
            }
        }
    }
    let tensors = acc
        .into_iter()
        .zip(first.tensors())
        .map(|(a, t)| Tensor::new(t.shape().to_vec(), a.into_iter().map(|x| x as f32).collect()))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(first.arch().clone(), tensors)
}

/// Local SGD on a client's real data, minimizing cross-entropy plus
/// `μ/2 ‖w − w_global‖²` when `mu > 0`. Returns the weights and the mean batch loss.
pub fn local_train(
    global: &ModelParams,
    client: &ClientData,
    cfg: &LocalTrainConfig,
    mu: f32,
    seed: u64,
) -> Result<(ModelParams, f32)> {
    if client.is_empty() {
        return Err(Error::EmptySet);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let (images, labels) = client_tensor(client)?;
    let mut params = global.clone();
    let mut opt = SgdMomentum::for_params(cfg.lr, cfg.momentum, params.tensors())?;
    let mut rng = rng::stream(seed, &[tag::LOCAL_TRAIN]);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let arch = params.arch().clone();
    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true)?;
            let x = tape.constant(images.select_rows(idx)?)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = arch.logits(&mut tape, &vars, x)?;
            let mut loss = tape.cross_entropy(logits, &y)?;
            if mu > 0.0 {
                let mut terms = vec![(loss, 1.0)];
                for (&v, g) in vars.iter().zip(global.tensors()) {
                    let anchor = tape.constant(g.clone())?;
                    terms.push((tape.squared_l2(v, anchor)?, mu / 2.0));
                }
                loss = tape.scalar_combine(&terms)?;
            }
            loss_sum += tape.value(loss).item() as f64;
            batches += 1;
            let grads = tape.backward(loss)?;
            let g = vars.iter().map(|&v| grads.get(v)).collect::<Result<Vec<_>>>()?;
            opt.step(params.tensors_mut(), &g)?;
        }
    }
    let mean = if batches == 0 { f32::NAN } else { (loss_sum / batches as f64) as f32 };
    Ok((params, mean))
}

/// A client's real images in class order with their labels.
fn client_tensor(client: &ClientData) -> Result<(Tensor, Vec<usize>)> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for (c, t) in client.per_class.iter().enumerate() {
        if let Some(t) = t {
            parts.push(t);
            labels.extend(std::iter::repeat_n(c, t.rows()));
        }
    }
    Ok((Tensor::concat_rows(&parts)?, labels))
}

/// Partitions, builds and runs a federation in one call.
pub fn run_experiment(
    cfg: &FederationConfig,
    arch: &ModelArchitecture,
    train: &LabeledDataset,
    shards: &[ClientShard],
    test: &LabeledDataset,
) -> Result<RunResult> {
    Federation::new(cfg.clone(), arch, train, shards, test)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_conventions() {
        assert_eq!(comm::model_bytes(381_450), 1_525_800);
        assert_eq!(format!("{:.2}", comm::to_mib(comm::model_bytes(381_450))), "1.46");
        assert_eq!(comm::image_bytes(10, (1, 28, 28)), 7840);
        assert_eq!(comm::image_bytes(10, (3, 32, 32)), 30_720);
        assert_eq!(comm::class_matrix_bytes(10), 400);
        assert!((comm::to_mb(1_000_000) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_average_uses_sample_fractions() {
        let arch = ModelArchitecture::mlp((1, 1, 1), vec![], 1);
        let mut a = ModelParams::zeros(&arch).unwrap();
        let mut b = a.clone();
        a.get_mut("classifier.weight").unwrap().data_mut()[0] = 1.0;
        b.get_mut("classifier.weight").unwrap().data_mut()[0] = 4.0;
        let avg = weighted_average(&[&a, &b], &[3, 1]).unwrap();
        assert_eq!(avg.get("classifier.weight").unwrap().data(), &[1.75]);
        let same = weighted_average(&[&a, &a], &[5, 7]).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn parses_algorithm_names() {
        for a in [Algorithm::FedAf, Algorithm::FedDm, Algorithm::FedAvg, Algorithm::FedProx] {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("sgd".parse::<Algorithm>().is_err());
    }
}
