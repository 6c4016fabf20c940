//! Client-side collaborative data condensation.
//!
//! A client learns `IPC` synthetic images per owned class by minimizing the
//! distribution-matching loss (squared distance between real and synthetic
//! class-mean features) plus `λ_loc` times the sliced Wasserstein distance
//! between the synthetic class-mean logits `u_{k,c}` and the global class-mean
//! logits `v_c`. It then uploads its condensed set, its real-data class-mean
//! logits `V_k` and the matching soft labels `R_k`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::class_matrix::ClassMatrix;
use crate::data::{quantize, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{ModelArchitecture, ModelParams};
use crate::optim::SgdMomentum;
use crate::partition::ClientShard;
use crate::rng::{self, derive_seed, tag, Rng};
use crate::swd::{draw_projections, SwdConfig};
use crate::tape::{softmax_row, Tape, Var};
use crate::tensor::Tensor;

/// One optional tensor per class; `None` means the class is not owned.
pub type PerClass = Vec<Option<Tensor>>;

/// A client's real data, normalized and grouped by class.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub per_class: PerClass,
}

impl ClientData {
    pub fn from_shard(ds: &LabeledDataset, shard: &ClientShard) -> Result<Self> {
        let per_class = (0..ds.classes())
            .map(|c| {
                let idx = shard.class_indices(ds, c);
                if idx.is_empty() {
                    Ok(None)
                } else {
                    ds.batch(&idx).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        Ok(ClientData { id: shard.id, per_class })
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn owned_classes(&self) -> Vec<usize> {
        owned(&self.per_class)
    }

    pub fn count(&self, class: usize) -> usize {
        self.per_class[class].as_ref().map_or(0, Tensor::rows)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        (0..self.classes()).map(|c| self.count(c)).collect()
    }

    pub fn len(&self) -> usize {
        self.class_counts().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn owned(per_class: &PerClass) -> Vec<usize> {
    (0..per_class.len()).filter(|&c| per_class[c].is_some()).collect()
}

/// Learnable synthetic images `S_k`: `IPC` images per owned class, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedSet {
    pub image_shape: (usize, usize, usize),
    pub per_class: PerClass,
}

impl CondensedSet {
    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn owned_classes(&self) -> Vec<usize> {
        owned(&self.per_class)
    }

    pub fn images_of(&self, class: usize) -> Option<&Tensor> {
        self.per_class.get(class).and_then(Option::as_ref)
    }

    pub fn image_count(&self) -> usize {
        self.per_class.iter().flatten().map(Tensor::rows).sum()
    }

    /// Byte-quantized copy for upload.
    pub fn quantize(&self) -> QuantizedSet {
        let per_class = self
            .per_class
            .iter()
            .map(|t| t.as_ref().map(|t| (t.rows(), t.data().iter().map(|&v| quantize(v)).collect())))
            .collect();
        QuantizedSet { image_shape: self.image_shape, per_class }
    }
}

/// Condensed images as transmitted: one byte per pixel per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedSet {
    pub image_shape: (usize, usize, usize),
    /// `(image count, pixel bytes)` per owned class.
    pub per_class: Vec<Option<(usize, Vec<u8>)>>,
}

impl QuantizedSet {
    pub fn image_count(&self) -> usize {
        self.per_class.iter().flatten().map(|(n, _)| n).sum()
    }

    pub fn wire_bytes(&self) -> usize {
        self.per_class.iter().flatten().map(|(_, b)| b.len()).sum()
    }

    /// Normalized images of one class.
    pub fn dequantize(&self, class: usize) -> Option<Tensor> {
        let (n, bytes) = self.per_class.get(class)?.as_ref()?;
        let (c, h, w) = self.image_shape;
        Tensor::new(vec![*n, c, h, w], bytes.iter().map(|&b| crate::data::normalize_byte(b)).collect()).ok()
    }

    /// As a labeled dataset (class-major order), e.g. for IDX export.
    pub fn to_dataset(&self) -> Result<LabeledDataset> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (c, entry) in self.per_class.iter().enumerate() {
            if let Some((n, bytes)) = entry {
                images.extend_from_slice(bytes);
                labels.extend(std::iter::repeat_n(c as u8, *n));
            }
        }
        LabeledDataset::new(images, self.image_shape, labels, self.per_class.len())
    }
}

/// What a client uploads after condensation. Raw client images cannot be
/// represented here: only the quantized condensed set and class statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPayload {
    pub client: usize,
    pub condensed: QuantizedSet,
    /// `V_k`: class-mean logits over the client's real data.
    pub mean_logits: Option<ClassMatrix>,
    /// `R_k`: temperature-softened `V_k`.
    pub soft_labels: Option<ClassMatrix>,
    pub class_counts: Vec<usize>,
}

impl ClientPayload {
    pub fn upstream_bytes(&self) -> usize {
        self.condensed.wire_bytes()
            + self.mean_logits.as_ref().map_or(0, ClassMatrix::wire_bytes)
            + self.soft_labels.as_ref().map_or(0, ClassMatrix::wire_bytes)
    }
}

/// `μ_c = (1/n_c) Σ_j h_w(x_c^j)` for every present class.
pub fn class_feature_means(params: &ModelParams, data: &PerClass) -> Result<PerClass> {
    data.iter()
        .map(|b| match b {
            None => Ok(None),
            Some(b) => {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape, false)?;
                let x = tape.constant(b.clone())?;
                let f = params.arch().features(&mut tape, &vars, x)?;
                let m = tape.mean_over_axis(f, 0)?;
                Ok(Some(tape.value(m).clone()))
            }
        })
        .collect()
}

/// Class-mean logits (`v_{k,c}` on real data, `u_{k,c}` on condensed data).
pub fn class_mean_logits(params: &ModelParams, data: &PerClass) -> Result<ClassMatrix> {
    let classes = params.arch().classes;
    let mut out = ClassMatrix::empty(data.len(), classes);
    for (c, b) in data.iter().enumerate() {
        if let Some(b) = b {
            let logits = params.forward_logits(b)?;
            let mut acc = vec![0.0f64; classes];
            for row in logits.data().chunks(classes) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            let n = logits.rows() as f64;
            out.set_row(c, acc.iter().map(|&s| (s / n) as f32).collect())?;
        }
    }
    Ok(out)
}

/// `r_{k,c} = softmax(v_{k,c} / τ)` for every present row.
pub fn soft_labels(mean_logits: &ClassMatrix, tau: f32) -> Result<ClassMatrix> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut out = ClassMatrix::empty(mean_logits.classes(), mean_logits.width());
    for c in mean_logits.present() {
        let mut row = Vec::with_capacity(mean_logits.width());
        softmax_row(mean_logits.row(c).unwrap(), tau, &mut row);
        out.set_row(c, row)?;
    }
    Ok(out)
}

/// Global inputs to the collaborative regularizer.
#[derive(Debug, Clone, Copy)]
pub struct CdcTerm<'a> {
    pub global_logits: &'a ClassMatrix,
    pub lambda: f32,
    pub swd: &'a SwdConfig,
    /// `[L, C]` unit directions; held fixed for one loss evaluation.
    pub directions: &'a Tensor,
}

/// Scalar handles of one local-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LocalLoss {
    pub dm: Var,
    pub cdc: Option<Var>,
    pub total: Var,
}

/// Records `L_DM + λ_loc Σ_c F(u_c, v_c)` on the tape over the owned classes of
/// `synthetic` (variables `[IPC, C, H, W]` per class). `real_means` are the
/// constant real-data feature means for the same weights.
pub fn record_local_loss(
    tape: &mut Tape,
    arch: &ModelArchitecture,
    params: &[Var],
    synthetic: &[Option<Var>],
    real_means: &PerClass,
    cdc: Option<CdcTerm<'_>>,
) -> Result<LocalLoss> {
    let classes: Vec<usize> = (0..synthetic.len()).filter(|&c| synthetic[c].is_some()).collect();
    if classes.is_empty() {
        return Err(Error::NoOwnedClasses);
    }
    let mut dm_terms = Vec::with_capacity(classes.len());
    let mut mean_logits = Vec::with_capacity(classes.len());
    for &c in &classes {
        let real = real_means.get(c).and_then(Option::as_ref).ok_or(Error::EmptyClass(c))?;
        let x = synthetic[c].unwrap();
        let f = arch.features(tape, params, x)?;
        let mu = tape.mean_over_axis(f, 0)?;
        let target = tape.constant(real.clone())?;
        dm_terms.push((tape.squared_l2(target, mu)?, 1.0));
        if cdc.is_some_and(|t| t.lambda != 0.0) {
            let logits = arch.classify(tape, params, f)?;
            mean_logits.push(tape.mean_over_axis(logits, 0)?);
        }
    }
    let dm = tape.scalar_combine(&dm_terms)?;
    let term = match cdc {
        Some(t) if t.lambda != 0.0 => t,
        _ => return Ok(LocalLoss { dm, cdc: None, total: dm }),
    };
    let cdc_var = if term.swd.pooled {
        let u = tape.stack_rows(&mean_logits)?;
        let v = tape.constant(term.global_logits.gather(&classes)?)?;
        tape.sliced_wasserstein(u, v, term.directions, term.swd.p)?
    } else {
        let mut parts = Vec::with_capacity(classes.len());
        for (&c, &u) in classes.iter().zip(&mean_logits) {
            let row = term.global_logits.row(c).ok_or(Error::AbsentClass(c))?;
            let v = tape.constant(Tensor::new(vec![row.len()], row.to_vec())?)?;
            parts.push((tape.sliced_wasserstein(u, v, term.directions, term.swd.p)?, 1.0));
        }
        tape.scalar_combine(&parts)?
    };
    let total = tape.scalar_combine(&[(dm, 1.0), (cdc_var, term.lambda)])?;
    Ok(LocalLoss { dm, cdc: Some(cdc_var), total })
}

fn bind_synthetic(tape: &mut Tape, set: &PerClass, trainable: bool) -> Result<Vec<Option<Var>>> {
    set.iter().map(|t| t.as_ref().map(|t| tape.leaf(t.clone(), trainable)).transpose()).collect()
}

fn restrict_to(real: &PerClass, syn: &PerClass) -> Result<()> {
    for c in owned(syn) {
        if real.get(c).and_then(Option::as_ref).is_none() {
            return Err(Error::EmptyClass(c));
        }
    }
    if owned(syn).is_empty() {
        return Err(Error::NoOwnedClasses);
    }
    Ok(())
}

/// `Σ_c ‖μ_c^real − μ_c^syn‖²` over the classes present in `synthetic`.
pub fn dm_loss(params: &ModelParams, synthetic: &PerClass, real: &PerClass) -> Result<f32> {
    restrict_to(real, synthetic)?;
    let real_means = class_feature_means(params, real)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let syn = bind_synthetic(&mut tape, synthetic, false)?;
    let loss = record_local_loss(&mut tape, params.arch(), &vars, &syn, &real_means, None)?;
    Ok(tape.value(loss.dm).item())
}

/// `L_DM + λ_loc Σ_c SWD(u_c(S), v_c)` with projection directions drawn from `seed`.
pub fn cdc_loss(
    params: &ModelParams,
    synthetic: &PerClass,
    real: &PerClass,
    global_logits: &ClassMatrix,
    lambda: f32,
    swd: &SwdConfig,
    seed: u64,
) -> Result<f32> {
    restrict_to(real, synthetic)?;
    let mut rng = rng::stream(seed, &[tag::PROJECTION]);
    let directions = draw_projections(swd.projections, params.arch().classes, &mut rng)?;
    let real_means = class_feature_means(params, real)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let syn = bind_synthetic(&mut tape, synthetic, false)?;
    let term = CdcTerm { global_logits, lambda, swd, directions: &directions };
    let loss = record_local_loss(&mut tape, params.arch(), &vars, &syn, &real_means, Some(term))?;
    Ok(tape.value(loss.total).item())
}

/// Initializes each owned class with `ipc` images, each the pixel average of `R`
/// randomly drawn real images of that class, `R = max(1, ⌊N_c / ipc⌋)`.
pub fn init_condensed(data: &ClientData, ipc: usize, seed: u64) -> Result<CondensedSet> {
    if ipc == 0 {
        return Err(Error::InvalidArgument("IPC must be at least 1".into()));
    }
    let owned = data.owned_classes();
    if owned.is_empty() {
        return Err(Error::NoOwnedClasses);
    }
    let mut rng = rng::stream(seed, &[tag::INIT_CONDENSED]);
    let mut per_class = vec![None; data.classes()];
    let mut image_shape = (0, 0, 0);
    for c in owned {
        let real = data.per_class[c].as_ref().unwrap();
        let s = real.shape();
        image_shape = (s[1], s[2], s[3]);
        per_class[c] = Some(average_init(real, ipc, None, &mut rng)?);
    }
    Ok(CondensedSet { image_shape, per_class })
}

/// `ipc` images, each averaging `draws` (default `max(1, n/ipc)`) rows of `real`.
pub fn average_init(real: &Tensor, ipc: usize, draws: Option<usize>, rng: &mut Rng) -> Result<Tensor> {
    let n = real.rows();
    let r = draws.unwrap_or((n / ipc).max(1)).max(1);
    let per = real.len() / n;
    let mut out = Vec::with_capacity(ipc * per);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..ipc {
        let picks: Vec<usize> = if r <= n {
            order.partial_shuffle(rng, r).0.to_vec()
        } else {
            (0..r).map(|_| rng.random_range(0..n)).collect()
        };
        let mut acc = vec![0.0f64; per];
        for &i in &picks {
            for (a, &v) in acc.iter_mut().zip(real.row(i)) {
                *a += v as f64;
            }
        }
        out.extend(acc.iter().map(|&s| ((s / r as f64) as f32).clamp(0.0, 1.0)));
    }
    let mut shape = real.shape().to_vec();
    shape[0] = ipc;
    Tensor::new(shape, out)
}

/// Condensation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondenseConfig {
    pub steps: usize,
    /// Cap on real images sampled per class per step.
    pub batch_real: usize,
    pub image_lr: f32,
    pub momentum: f32,
    /// Re-sampling coefficient γ: each step uses `γ·w + (1−γ)·w̃`.
    pub gamma: f32,
    /// Weight of the collaborative term; zero disables it.
    pub lambda_loc: f32,
    pub swd: SwdConfig,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            steps: 1000,
            batch_real: 256,
            image_lr: 1.0,
            momentum: 0.9,
            gamma: 0.9,
            lambda_loc: 1e-3,
            swd: SwdConfig::default(),
        }
    }
}

/// Loss trace of one condensation call.
#[derive(Debug, Clone, PartialEq)]
pub struct CondenseReport {
    /// DM loss at the first step (before its update).
    pub initial_dm: f32,
    /// DM loss at the last step (before its update).
    pub final_dm: f32,
    /// Mean total local loss over all steps.
    pub mean_loss: f32,
}

/// Epoch-style sampler: per-class shuffled order, reshuffled when exhausted.
struct ClassSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl ClassSampler {
    fn new(n: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        ClassSampler { order, cursor: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

/// Runs `cfg.steps` condensation updates on `set` against the fixed `global`
/// weights. Each step re-samples the backbone, draws a real batch per owned class,
/// evaluates the local loss (with the collaborative term when `global_logits` is
/// given and `λ_loc ≠ 0`), takes one momentum-SGD step on the pixels and clamps
/// them to `[0, 1]`.
pub fn condense(
    data: &ClientData,
    set: &mut CondensedSet,
    global: &ModelParams,
    global_logits: Option<&ClassMatrix>,
    cfg: &CondenseConfig,
    seed: u64,
) -> Result<CondenseReport> {
    let owned = set.owned_classes();
    if owned.is_empty() {
        return Err(Error::NoOwnedClasses);
    }
    for &c in &owned {
        if data.count(c) == 0 {
            return Err(Error::EmptyClass(c));
        }
    }
    if cfg.steps == 0 {
        return Ok(CondenseReport { initial_dm: f32::NAN, final_dm: f32::NAN, mean_loss: f32::NAN });
    }
    if cfg.batch_real == 0 {
        return Err(Error::InvalidArgument("batch_real must be at least 1".into()));
    }
    let mut batch_rng = rng::stream(seed, &[tag::REAL_BATCH]);
    let mut proj_rng = rng::stream(seed, &[tag::PROJECTION]);
    let mut samplers: Vec<Option<ClassSampler>> = (0..data.classes())
        .map(|c| owned.contains(&c).then(|| ClassSampler::new(data.count(c), &mut batch_rng)))
        .collect();
    let shapes: Vec<Vec<usize>> = owned.iter().map(|&c| set.per_class[c].as_ref().unwrap().shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = SgdMomentum::new(cfg.image_lr, cfg.momentum, &shape_refs)?;
    let use_cdc = cfg.lambda_loc != 0.0 && global_logits.is_some();
    let classes = global.arch().classes;

    let mut report = CondenseReport { initial_dm: 0.0, final_dm: 0.0, mean_loss: 0.0 };
    let mut loss_sum = 0.0f64;
    for step in 0..cfg.steps {
        let params = if cfg.gamma == 1.0 {
            global.clone()
        } else {
            global.resample(cfg.gamma, derive_seed(seed, &[tag::RESAMPLE, step as u64]))?
        };
        let mut real: PerClass = vec![None; data.classes()];
        for &c in &owned {
            let idx = samplers[c].as_mut().unwrap().next_batch(cfg.batch_real, &mut batch_rng);
            real[c] = Some(data.per_class[c].as_ref().unwrap().select_rows(&idx)?);
        }
        let real_means = class_feature_means(&params, &real)?;
        let directions = if use_cdc { Some(draw_projections(cfg.swd.projections, classes, &mut proj_rng)?) } else { None };

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false)?;
        let syn = bind_synthetic(&mut tape, &set.per_class, true)?;
        let term = match (&directions, global_logits) {
            (Some(d), Some(v)) => Some(CdcTerm { global_logits: v, lambda: cfg.lambda_loc, swd: &cfg.swd, directions: d }),
            _ => None,
        };
        let loss = record_local_loss(&mut tape, global.arch(), &vars, &syn, &real_means, term)?;
        let dm = tape.value(loss.dm).item();
        if step == 0 {
            report.initial_dm = dm;
        }
        report.final_dm = dm;
        loss_sum += tape.value(loss.total).item() as f64;

        let grads = tape.backward(loss.total)?;
        let grad_refs = owned.iter().map(|&c| grads.get(syn[c].unwrap())).collect::<Result<Vec<_>>>()?;
        let mut tensors: Vec<Tensor> = owned.iter().map(|&c| set.per_class[c].take().unwrap()).collect();
        opt.step(&mut tensors, &grad_refs)?;
        for (&c, mut t) in owned.iter().zip(tensors) {
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            set.per_class[c] = Some(t);
        }
    }
    report.mean_loss = (loss_sum / cfg.steps as f64) as f32;
    Ok(report)
}

/// Assembles the upload: quantized `S_k`, and optionally `V_k` (computed with the
/// broadcast weights on all of the client's real data) and `R_k = softmax(V_k/τ)`.
pub fn build_payload(
    data: &ClientData,
    set: &CondensedSet,
    global: &ModelParams,
    tau: f32,
    include_logits: bool,
    include_soft_labels: bool,
) -> Result<ClientPayload> {
    let (mean_logits, soft) = if include_logits || include_soft_labels {
        let v = class_mean_logits(global, &data.per_class)?;
        let r = if include_soft_labels { Some(soft_labels(&v, tau)?) } else { None };
        (include_logits.then_some(v), r)
    } else {
        (None, None)
    };
    Ok(ClientPayload {
        client: data.id,
        condensed: set.quantize(),
        mean_logits,
        soft_labels: soft,
        class_counts: data.class_counts(),
    })
}
