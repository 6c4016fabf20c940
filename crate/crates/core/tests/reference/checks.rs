//! Gradient and oracle checks shared by the core tests and the acceptance suite.
//! Each returns the measured errors so callers decide how to report them.

use fedaf::class_matrix::ClassMatrix;
use fedaf::condensation::{cdc_loss, class_feature_means, dm_loss, record_local_loss, CdcTerm, ClientPayload, PerClass, QuantizedSet};
use fedaf::rng::{self, tag, Rng};
use fedaf::server::{aggregate_mean_logits, aggregate_soft_labels, lgkm_loss, record_global_soft_labels, CondensedPool};
use fedaf::swd::{draw_projections, sliced_wasserstein_along, SwdConfig};
use fedaf::tape::Tape;
use fedaf::{ModelArchitecture, ModelParams, Tensor};
use rand::Rng as _;

use super::RefNet;

/// Step for probes that only move a few pre-activations.
pub const H: f64 = 1e-3;
/// Conv weights are shared across every spatial position, so a 1e-3 step
/// routinely carries some pre-activation across a ReLU kink; the f64 reference
/// keeps a much smaller step accurate.
pub const H_SHARED: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-5;

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-6)
}

fn central(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.random::<f32>())
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn random_set(rng: &mut Rng, shape: (usize, usize, usize), counts: &[usize]) -> PerClass {
    counts
        .iter()
        .map(|&n| (n > 0).then(|| random_tensor(&[n, shape.0, shape.1, shape.2], 0.0, 1.0, rng)))
        .collect()
}

fn to_ref(set: &PerClass) -> Vec<Option<(Vec<f64>, usize)>> {
    set.iter().map(|t| t.as_ref().map(|t| (to64(t), t.rows()))).collect()
}

/// Cross-entropy gradients of a two-layer MLP's parameters.
pub fn cross_entropy_gradients(seed: u64, probes: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[]);
    let arch = ModelArchitecture::mlp((1, 2, 3), vec![5], 4);
    let params = ModelParams::init(&arch, seed).unwrap();
    let x = random_tensor(&[6, 1, 2, 3], -1.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..6).map(|i| i % 4).collect();

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let logits = arch.logits(&mut tape, &vars, xv).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let x64 = to64(&x);
    (0..probes)
        .map(|probe| {
            let k = probe % params.tensors().len();
            let i = rng.random_range(0..params.tensors()[k].len());
            let fd = central(H, |d| {
                let mut net = RefNet::new(&params);
                net.w[k][i] += d;
                super::cross_entropy(&net.logits(&x64, 6), 4, &labels)
            });
            rel_err(grads.get(vars[k]).unwrap().data()[i] as f64, fd)
        })
        .collect()
}

/// Gradients of the local condensation loss with respect to synthetic pixels.
/// `lambda = 0` checks distribution matching alone; otherwise the collaborative
/// term is included with a fixed projection draw.
pub fn pixel_gradients(lambda: f32, seed: u64, probes: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[]);
    let arch = ModelArchitecture::convnet((1, 8, 8), 3, 3);
    let params = ModelParams::init(&arch, seed).unwrap();
    let syn = random_set(&mut rng, (1, 8, 8), &[2, 0, 2]);
    let real = random_set(&mut rng, (1, 8, 8), &[5, 0, 4]);
    let global = ClassMatrix::from_rows(
        3,
        (0..3).map(|_| Some((0..3).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())).collect(),
    )
    .unwrap();
    let swd = SwdConfig::default();
    let dirs = draw_projections(16, 3, &mut rng).unwrap();

    let real_means = class_feature_means(&params, &real).unwrap();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false).unwrap();
    let syn_vars: Vec<_> = syn.iter().map(|t| t.as_ref().map(|t| tape.leaf(t.clone(), true).unwrap())).collect();
    let term = (lambda != 0.0).then_some(CdcTerm { global_logits: &global, lambda, swd: &swd, directions: &dirs });
    let loss = record_local_loss(&mut tape, &arch, &vars, &syn_vars, &real_means, term).unwrap();
    let grads = tape.backward(loss.total).unwrap();

    let net = RefNet::new(&params);
    let real64 = to_ref(&real);
    let global64: Vec<Option<Vec<f64>>> = (0..3).map(|c| global.row(c).map(|r| r.iter().map(|&v| v as f64).collect())).collect();
    let dirs64 = to64(&dirs);
    (0..probes)
        .map(|probe| {
            let c = if probe % 2 == 0 { 0 } else { 2 };
            let i = rng.random_range(0..syn[c].as_ref().unwrap().len());
            let fd = central(H, |d| {
                let mut s = to_ref(&syn);
                s[c].as_mut().unwrap().0[i] += d;
                super::cdc_loss(&net, &s, &real64, &global64, lambda as f64, &dirs64, 2.0)
            });
            rel_err(grads.get(syn_vars[c].unwrap()).unwrap().data()[i] as f64, fd)
        })
        .collect()
}

/// Parameter gradients of the server objective `CE + λ·LGKM(R, T(w))`.
pub fn global_loss_gradients(lambda: f32, tau: f32, seed: u64, probes: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[]);
    let arch = ModelArchitecture::convnet((1, 8, 8), 3, 3);
    let params = ModelParams::init(&arch, seed).unwrap();
    let per_class = random_set(&mut rng, (1, 8, 8), &[3, 2, 3]);
    let pool = CondensedPool::from_classes(per_class.clone()).unwrap();
    let classes = [0usize, 1, 2];
    let r: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            let raw: Vec<f32> = (0..3).map(|_| rng.random::<f32>() + 0.05).collect();
            let s: f32 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let r_tensor = Tensor::new(vec![3, 3], r.concat()).unwrap();

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true).unwrap();
    let x = tape.constant(pool.images.clone()).unwrap();
    let logits = arch.logits(&mut tape, &vars, x).unwrap();
    let ce = tape.cross_entropy(logits, &pool.labels).unwrap();
    let t = record_global_soft_labels(&mut tape, &arch, &vars, &pool, &classes, tau).unwrap();
    let kl = tape.symmetric_kl(&r_tensor, t).unwrap();
    let loss = tape.scalar_combine(&[(ce, 1.0), (kl, lambda)]).unwrap();
    let grads = tape.backward(loss).unwrap();

    let x64 = to64(&pool.images);
    let groups: Vec<(usize, Vec<f64>, usize)> =
        per_class.iter().enumerate().map(|(c, t)| (c, to64(t.as_ref().unwrap()), t.as_ref().unwrap().rows())).collect();
    let r64: Vec<Vec<f64>> = r.iter().map(|row| row.iter().map(|&v| v as f64).collect()).collect();
    (0..probes)
        .map(|probe| {
            let k = probe % params.tensors().len();
            let i = rng.random_range(0..params.tensors()[k].len());
            let fd = central(H_SHARED, |d| {
                let mut net = RefNet::new(&params);
                net.w[k][i] += d;
                super::global_loss(&net, &x64, &pool.labels, &groups, &r64, lambda as f64, tau as f64)
            });
            rel_err(grads.get(vars[k]).unwrap().data()[i] as f64, fd)
        })
        .collect()
}

/// The full probe set, grouped by loss: `(name, relative errors)`.
pub fn gradient_suite() -> Vec<(&'static str, Vec<f64>)> {
    let ce = (0..3).flat_map(|s| cross_entropy_gradients(11 + s, 10)).collect();
    let dm = (0..3).flat_map(|s| pixel_gradients(0.0, s, 20)).collect();
    let cdc = (0..3).flat_map(|s| pixel_gradients(0.5, 100 + s, 20)).collect();
    let global = [(0.0, 1.0), (0.7, 2.0), (2.0, 1.0)]
        .into_iter()
        .enumerate()
        .flat_map(|(i, (l, t))| global_loss_gradients(l, t, 9 + i as u64, 24))
        .collect();
    vec![("cross_entropy", ce), ("dm_loss", dm), ("cdc_loss", cdc), ("global_loss", global)]
}

fn small_arch(rng: &mut Rng) -> ModelArchitecture {
    if rng.random::<bool>() {
        ModelArchitecture::convnet((1, 8, 8), rng.random_range(1..4), 3)
    } else {
        ModelArchitecture::mlp((1, 3, 3), vec![rng.random_range(2..6)], 3)
    }
}

/// Largest absolute gap of `(dm_loss, cdc_loss)` over `cases` random instances.
pub fn condensation_loss_oracle(cases: u64) -> (f64, f64) {
    let mut rng = rng::stream(21, &[]);
    let (mut dm_gap, mut cdc_gap) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let arch = small_arch(&mut rng);
        let params = ModelParams::init(&arch, case).unwrap();
        let net = RefNet::new(&params);
        let syn_counts: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
        let syn_counts = if syn_counts.iter().all(|&n| n == 0) { vec![1, 0, 2] } else { syn_counts };
        let real_counts: Vec<usize> = syn_counts.iter().map(|&n| if n > 0 { rng.random_range(1..5) } else { 0 }).collect();
        let syn = random_set(&mut rng, arch.input, &syn_counts);
        let real = random_set(&mut rng, arch.input, &real_counts);

        let dm = dm_loss(&params, &syn, &real).unwrap() as f64;
        dm_gap = dm_gap.max((dm - super::dm_loss(&net, &to_ref(&syn), &to_ref(&real))).abs());

        let rows: Vec<Option<Vec<f32>>> = (0..3).map(|_| Some((0..3).map(|_| rng.random::<f32>() - 0.5).collect())).collect();
        let global = ClassMatrix::from_rows(3, rows.clone()).unwrap();
        let swd = SwdConfig { projections: 8, ..SwdConfig::default() };
        let lambda = rng.random::<f32>();
        let got = cdc_loss(&params, &syn, &real, &global, lambda, &swd, case).unwrap() as f64;
        let dirs = draw_projections(8, 3, &mut rng::stream(case, &[tag::PROJECTION])).unwrap();
        let g64: Vec<Option<Vec<f64>>> = rows.iter().map(|r| r.as_ref().map(|r| r.iter().map(|&v| v as f64).collect())).collect();
        let want = super::cdc_loss(&net, &to_ref(&syn), &to_ref(&real), &g64, lambda as f64, &to64(&dirs), 2.0);
        cdc_gap = cdc_gap.max((got - want).abs());
    }
    (dm_gap, cdc_gap)
}

fn random_distribution(rng: &mut Rng, c: usize) -> Vec<f32> {
    let raw: Vec<f32> = (0..c).map(|_| rng.random::<f32>().powi(3)).collect();
    let s: f32 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Largest absolute gap of `lgkm_loss` over `cases` random instances, some with
/// classes absent from `R`.
pub fn lgkm_oracle(cases: u64) -> f64 {
    let mut rng = rng::stream(22, &[]);
    let mut gap = 0.0f64;
    for _ in 0..cases {
        let c = rng.random_range(2..6);
        let present: Vec<bool> = (0..c).map(|i| i == 0 || rng.random::<bool>()).collect();
        let r_rows: Vec<Option<Vec<f32>>> = present.iter().map(|&p| p.then(|| random_distribution(&mut rng, c))).collect();
        let t_rows: Vec<Option<Vec<f32>>> = (0..c).map(|_| Some(random_distribution(&mut rng, c))).collect();
        let r = ClassMatrix::from_rows(c, r_rows.clone()).unwrap();
        let t = ClassMatrix::from_rows(c, t_rows.clone()).unwrap();
        let got = lgkm_loss(&r, &t).unwrap() as f64;
        let (rr, tt): (Vec<Vec<f64>>, Vec<Vec<f64>>) = r_rows
            .iter()
            .zip(&t_rows)
            .filter_map(|(a, b)| {
                let a = a.as_ref()?;
                let b = b.as_ref().unwrap();
                Some((a.iter().map(|&v| v as f64).collect(), b.iter().map(|&v| v as f64).collect()))
            })
            .unzip();
        gap = gap.max((got - super::lgkm(&rr, &tt)).abs());
    }
    gap
}

/// `lgkm_loss` for `R = [0.5, 0.5]`, `T = [0.9, 0.1]`.
pub fn lgkm_hand_case() -> f64 {
    let r = ClassMatrix::from_rows(2, vec![Some(vec![0.5, 0.5])]).unwrap();
    let t = ClassMatrix::from_rows(2, vec![Some(vec![0.9, 0.1])]).unwrap();
    lgkm_loss(&r, &t).unwrap() as f64
}

fn payload(client: usize, v: ClassMatrix, r: ClassMatrix) -> ClientPayload {
    ClientPayload {
        client,
        condensed: QuantizedSet { image_shape: (1, 1, 1), per_class: vec![] },
        mean_logits: Some(v),
        soft_labels: Some(r),
        class_counts: vec![],
    }
}

/// Largest absolute gap of `(aggregate_mean_logits, aggregate_soft_labels)` over
/// `cases` instances submitted in reverse client order. A wrong contributor count
/// or a missing row counts as an infinite gap.
pub fn aggregation_oracle(cases: u64) -> (f64, f64) {
    let mut rng = rng::stream(23, &[]);
    let mut gaps = [0.0f64; 2];
    for _ in 0..cases {
        let (k, c) = (rng.random_range(1..6), rng.random_range(2..5));
        let mut payloads = Vec::new();
        let mut raw = Vec::new();
        for client in 0..k {
            let rows: Vec<Option<Vec<f32>>> =
                (0..c).map(|_| rng.random::<bool>().then(|| (0..c).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect())).collect();
            let soft: Vec<Option<Vec<f32>>> = rows.iter().map(|r| r.as_ref().map(|_| random_distribution(&mut rng, c))).collect();
            raw.push((rows.clone(), soft.clone()));
            payloads.push(payload(client, ClassMatrix::from_rows(c, rows).unwrap(), ClassMatrix::from_rows(c, soft).unwrap()));
        }
        payloads.reverse();
        let v = aggregate_mean_logits(&payloads).unwrap();
        let r = aggregate_soft_labels(&payloads).unwrap();
        for class in 0..c {
            for (which, agg) in [(0, &v), (1, &r)] {
                let owners: Vec<&Vec<f32>> = raw
                    .iter()
                    .filter_map(|(a, b)| if which == 0 { a[class].as_ref() } else { b[class].as_ref() })
                    .collect();
                let gap = if agg.contributors[class] != owners.len() {
                    f64::INFINITY
                } else {
                    match agg.matrix.row(class) {
                        None if owners.is_empty() => 0.0,
                        None => f64::INFINITY,
                        Some(_) if owners.is_empty() => f64::INFINITY,
                        Some(row) => (0..c)
                            .map(|j| {
                                let want = owners.iter().map(|o| o[j] as f64).sum::<f64>() / owners.len() as f64;
                                (row[j] as f64 - want).abs()
                            })
                            .fold(0.0, f64::max),
                    }
                };
                gaps[which] = gaps[which].max(gap);
            }
        }
    }
    (gaps[0], gaps[1])
}

/// Largest absolute gap of the sliced Wasserstein distance against the
/// common-grid expansion over `cases` random instances with `p ∈ {1, 2, 3}`.
pub fn swd_oracle(cases: usize) -> f64 {
    let mut rng = rng::stream(24, &[]);
    let mut gap = 0.0f64;
    for case in 0..cases {
        let d = rng.random_range(1..5);
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let p = [1.0f32, 2.0, 3.0][case % 3];
        let u = Tensor::from_fn(&[n, d], |_| rng.random::<f32>() * 2.0 - 1.0);
        let v = Tensor::from_fn(&[m, d], |_| rng.random::<f32>() * 2.0 - 1.0);
        let dirs = draw_projections(7, d, &mut rng).unwrap();
        let got = sliced_wasserstein_along(&u, &v, &dirs, p).unwrap() as f64;
        let want = super::swd(&to64(&u), n, &to64(&v), m, d, &to64(&dirs), p as f64);
        gap = gap.max((got - want).abs());
    }
    gap
}
