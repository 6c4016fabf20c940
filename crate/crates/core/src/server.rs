//! Server side: knowledge aggregation, training on pooled condensed data with
//! local-global knowledge matching, and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::class_matrix::ClassMatrix;
use crate::condensation::{ClientPayload, PerClass};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{ModelArchitecture, ModelParams};
use crate::optim::SgdMomentum;
use crate::rng::{self, tag};
use crate::tape::{floor_normalize, symmetric_kl_row, Tape, Var};
use crate::tensor::Tensor;

/// Per-class average of client rows plus how many clients contributed to each.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub matrix: ClassMatrix,
    pub contributors: Vec<usize>,
}

/// `V` and `R` as assembled by the server for one round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalKnowledge {
    pub mean_logits: Option<Aggregate>,
    pub soft_labels: Option<Aggregate>,
}

/// Averages each class row over the matrices that contain it, reducing in the
/// given order. Classes no matrix contains stay absent.
pub fn average_rows<'a>(matrices: impl IntoIterator<Item = &'a ClassMatrix>) -> Result<Aggregate> {
    let mut iter = matrices.into_iter().peekable();
    let first = iter.peek().ok_or(Error::EmptySet)?;
    let (classes, width) = (first.classes(), first.width());
    let mut sums = vec![vec![0.0f64; width]; classes];
    let mut contributors = vec![0usize; classes];
    for m in iter {
        if m.classes() != classes || m.width() != width {
            return Err(Error::InvalidArgument("class matrices differ in shape".into()));
        }
        for c in m.present() {
            contributors[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(m.row(c).unwrap()) {
                *s += v as f64;
            }
        }
    }
    let rows = sums
        .into_iter()
        .zip(&contributors)
        .map(|(s, &n)| (n > 0).then(|| s.iter().map(|&x| (x / n as f64) as f32).collect()))
        .collect();
    Ok(Aggregate { matrix: ClassMatrix::from_rows(width, rows)?, contributors })
}

fn sorted(payloads: &[ClientPayload]) -> Vec<&ClientPayload> {
    let mut v: Vec<&ClientPayload> = payloads.iter().collect();
    v.sort_by_key(|p| p.client);
    v
}

/// `v_c` averaged over the clients that own class `c`, in ascending client order.
pub fn aggregate_mean_logits(payloads: &[ClientPayload]) -> Result<Aggregate> {
    let ordered = sorted(payloads);
    let rows = ordered
        .iter()
        .map(|p| p.mean_logits.as_ref().ok_or_else(|| Error::InvalidArgument(format!("client {} sent no mean logits", p.client))))
        .collect::<Result<Vec<_>>>()?;
    average_rows(rows)
}

/// `r_c` averaged over the clients that own class `c`, in ascending client order.
pub fn aggregate_soft_labels(payloads: &[ClientPayload]) -> Result<Aggregate> {
    let ordered = sorted(payloads);
    let rows = ordered
        .iter()
        .map(|p| p.soft_labels.as_ref().ok_or_else(|| Error::InvalidArgument(format!("client {} sent no soft labels", p.client))))
        .collect::<Result<Vec<_>>>()?;
    average_rows(rows)
}

/// All received condensed images, grouped by class and flattened for training.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedPool {
    pub per_class: PerClass,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl CondensedPool {
    /// Dequantizes and concatenates payload images in ascending client order.
    pub fn from_payloads(payloads: &[ClientPayload], classes: usize) -> Result<Self> {
        let ordered = sorted(payloads);
        let mut per_class: PerClass = vec![None; classes];
        for (c, slot) in per_class.iter_mut().enumerate() {
            let parts: Vec<Tensor> = ordered.iter().filter_map(|p| p.condensed.dequantize(c)).collect();
            if !parts.is_empty() {
                let refs: Vec<&Tensor> = parts.iter().collect();
                *slot = Some(Tensor::concat_rows(&refs)?);
            }
        }
        Self::from_classes(per_class)
    }

    pub fn from_classes(per_class: PerClass) -> Result<Self> {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for (c, t) in per_class.iter().enumerate() {
            if let Some(t) = t {
                parts.push(t);
                labels.extend(std::iter::repeat_n(c, t.rows()));
            }
        }
        if parts.is_empty() {
            return Err(Error::EmptySet);
        }
        let images = Tensor::concat_rows(&parts)?;
        Ok(CondensedPool { per_class, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes_present(&self) -> Vec<usize> {
        (0..self.per_class.len()).filter(|&c| self.per_class[c].is_some()).collect()
    }
}

/// Records `[t_c]` for the given classes: softmax of the pooled class-mean logits at temperature `τ`.
pub fn record_global_soft_labels(
    tape: &mut Tape,
    arch: &ModelArchitecture,
    params: &[Var],
    pool: &CondensedPool,
    classes: &[usize],
    tau: f32,
) -> Result<Var> {
    let mut means = Vec::with_capacity(classes.len());
    for &c in classes {
        let imgs = pool.per_class.get(c).and_then(Option::as_ref).ok_or(Error::AbsentClass(c))?;
        let x = tape.constant(imgs.clone())?;
        let logits = arch.logits(tape, params, x)?;
        means.push(tape.mean_over_axis(logits, 0)?);
    }
    let stacked = tape.stack_rows(&means)?;
    tape.softmax(stacked, tau)
}

/// `t_c = softmax(mean_j f_w(x̃_c^j) / τ)` for every class in the pool.
pub fn global_soft_labels(params: &ModelParams, pool: &CondensedPool, tau: f32) -> Result<ClassMatrix> {
    let classes = pool.classes_present();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let t = record_global_soft_labels(&mut tape, params.arch(), &vars, pool, &classes, tau)?;
    let mut out = ClassMatrix::empty(pool.per_class.len(), params.arch().classes);
    for (i, &c) in classes.iter().enumerate() {
        out.set_row(c, tape.value(t).row(i).to_vec())?;
    }
    Ok(out)
}

/// Symmetric KL `½(KL(R‖T) + KL(T‖R))` averaged over the classes present in `r`.
pub fn lgkm_loss(r: &ClassMatrix, t: &ClassMatrix) -> Result<f32> {
    let classes = r.present();
    if classes.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut total = 0.0f64;
    for &c in &classes {
        let rr = floor_normalize(r.row(c).unwrap());
        let tr = floor_normalize(t.row(c).ok_or(Error::AbsentClass(c))?);
        total += 0.5 * symmetric_kl_row(&rr, &tr);
    }
    Ok((total / classes.len() as f64) as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Weight of the knowledge-matching term; zero disables it.
    pub lambda_glob: f32,
    /// Softmax temperature for soft labels.
    pub tau: f32,
    /// Apply the matching term on every batch instead of once per epoch.
    pub lgkm_every_batch: bool,
}

impl Default for ServerTrainConfig {
    fn default() -> Self {
        ServerTrainConfig {
            epochs: 500,
            batch_size: 256,
            lr: 1e-3,
            momentum: 0.9,
            lambda_glob: 0.01,
            tau: 2.0,
            lgkm_every_batch: false,
        }
    }
}

/// Per-epoch means of the training losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epoch_ce: Vec<f32>,
    pub epoch_lgkm: Vec<f32>,
}

/// Trains on the pooled condensed images with cross-entropy, adding
/// `λ_glob · LGKM(R, T(w))` once per epoch (on the first batch) or on every batch.
pub fn train_global(
    params: &ModelParams,
    pool: &CondensedPool,
    soft_labels: Option<&ClassMatrix>,
    cfg: &ServerTrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    if pool.is_empty() {
        return Err(Error::EmptySet);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut params = params.clone();
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    let lgkm = match soft_labels {
        Some(r) if cfg.lambda_glob != 0.0 => {
            let classes: Vec<usize> = r.present().into_iter().filter(|&c| pool.per_class.get(c).is_some_and(Option::is_some)).collect();
            if classes.is_empty() {
                None
            } else {
                Some((r.gather(&classes)?, classes))
            }
        }
        _ => None,
    };
    let mut opt = SgdMomentum::for_params(cfg.lr, cfg.momentum, params.tensors())?;
    let mut rng = rng::stream(seed, &[tag::SERVER]);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let arch = params.arch().clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0f64;
        let mut lgkm_sum = 0.0f64;
        let mut lgkm_count = 0usize;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, true)?;
            let x = tape.constant(pool.images.select_rows(idx)?)?;
            let labels: Vec<usize> = idx.iter().map(|&i| pool.labels[i]).collect();
            let logits = arch.logits(&mut tape, &vars, x)?;
            let ce = tape.cross_entropy(logits, &labels)?;
            ce_sum += tape.value(ce).item() as f64;
            let mut loss = ce;
            if let Some((r, classes)) = &lgkm {
                if b == 0 || cfg.lgkm_every_batch {
                    let t = record_global_soft_labels(&mut tape, &arch, &vars, pool, classes, cfg.tau)?;
                    let kl = tape.symmetric_kl(r, t)?;
                    lgkm_sum += tape.value(kl).item() as f64;
                    lgkm_count += 1;
                    loss = tape.scalar_combine(&[(ce, 1.0), (kl, cfg.lambda_glob)])?;
                }
            }
            let grads = tape.backward(loss)?;
            let g = vars.iter().map(|&v| grads.get(v)).collect::<Result<Vec<_>>>()?;
            opt.step(params.tensors_mut(), &g)?;
        }
        report.epoch_ce.push((ce_sum / batches.len() as f64) as f32);
        report.epoch_lgkm.push(if lgkm_count > 0 { (lgkm_sum / lgkm_count as f64) as f32 } else { 0.0 });
    }
    Ok((params, report))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate_tensor(params: &ModelParams, images: &Tensor, labels: &[usize]) -> Result<f32> {
    if labels.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..labels.len()).collect();
    for chunk in all.chunks(512) {
        let logits = params.forward_logits(&images.select_rows(chunk)?)?;
        for (row, &i) in logits.data().chunks(params.arch().classes).zip(chunk) {
            if argmax(row) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / labels.len() as f64) as f32)
}

pub fn evaluate(params: &ModelParams, test: &LabeledDataset) -> Result<f32> {
    let (x, y) = test.to_tensor()?;
    evaluate_tensor(params, &x, &y)
}
