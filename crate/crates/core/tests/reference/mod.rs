//! Straightforward f64 re-implementations of the model and losses, written with
//! plain loops and no shared code, used as oracles by the tests.
#![allow(dead_code)]

pub mod checks;

use fedaf::{ArchKind, ModelArchitecture, ModelParams};

pub struct RefNet {
    pub arch: ModelArchitecture,
    pub w: Vec<Vec<f64>>,
}

impl RefNet {
    pub fn new(p: &ModelParams) -> Self {
        RefNet {
            arch: p.arch().clone(),
            w: p.tensors().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect(),
        }
    }

    /// `[n, feature_dim]` features of `n` images stored as `[n, c, h, w]`.
    pub fn features(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (c, h, w) = self.arch.input;
        match &self.arch.kind {
            ArchKind::Convnet { width } => {
                let (mut cur, mut ci, mut hh, mut ww) = (x.to_vec(), c, h, w);
                for blk in 0..3 {
                    let y = conv3x3(&cur, n, ci, hh, ww, &self.w[2 * blk], &self.w[2 * blk + 1], *width);
                    let y: Vec<f64> = y.into_iter().map(|v| v.max(0.0)).collect();
                    let (p, ph, pw) = avgpool(&y, n * width, hh, ww);
                    cur = p;
                    ci = *width;
                    hh = ph;
                    ww = pw;
                }
                cur
            }
            ArchKind::Mlp { hidden } => {
                let mut cur = x.to_vec();
                let mut din = c * h * w;
                for (i, &dout) in hidden.iter().enumerate() {
                    cur = affine(&cur, n, din, &self.w[2 * i], &self.w[2 * i + 1], dout)
                        .into_iter()
                        .map(|v| v.max(0.0))
                        .collect();
                    din = dout;
                }
                cur
            }
        }
    }

    pub fn classify(&self, f: &[f64], n: usize) -> Vec<f64> {
        let k = self.w.len();
        affine(f, n, self.arch.feature_dim(), &self.w[k - 2], &self.w[k - 1], self.arch.classes)
    }

    pub fn logits(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.classify(&self.features(x, n), n)
    }
}

pub fn conv3x3(x: &[f64], n: usize, ci: usize, h: usize, w: usize, k: &[f64], b: &[f64], co: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * co * h * w];
    for s in 0..n {
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * ci + c) * h + si as usize) * w + sj as usize];
                                acc += xv * k[((o * ci + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    y[((s * co + o) * h + i) * w + j] = acc;
                }
            }
        }
    }
    y
}

pub fn avgpool(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let at = |a: usize, b: usize| x[(p * h + a) * w + b];
                y[(p * oh + i) * ow + j] =
                    (at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1)) / 4.0;
            }
        }
    }
    (y, oh, ow)
}

pub fn affine(x: &[f64], n: usize, din: usize, wt: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for s in 0..n {
        for o in 0..dout {
            y[s * dout + o] = b[o] + (0..din).map(|i| x[s * din + i] * wt[o * din + i]).sum::<f64>();
        }
    }
    y
}

pub fn mean_rows(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    (0..d).map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `Σ_c ‖mean h(real_c) − mean h(syn_c)‖²`; each entry is `(pixels, count)`.
pub fn dm_loss(net: &RefNet, syn: &[Option<(Vec<f64>, usize)>], real: &[Option<(Vec<f64>, usize)>]) -> f64 {
    let d = net.arch.feature_dim();
    let mut total = 0.0;
    for (s, r) in syn.iter().zip(real) {
        if let (Some((sx, sn)), Some((rx, rn))) = (s, r) {
            let ms = mean_rows(&net.features(sx, *sn), *sn, d);
            let mr = mean_rows(&net.features(rx, *rn), *rn, d);
            total += sq_dist(&mr, &ms);
        }
    }
    total
}

/// Sliced Wasserstein distance via the common-grid expansion: each sorted
/// projection of `u` is repeated `m` times and of `v` `n` times, giving two
/// equally sized samples whose sorted pairing is the optimal 1-D coupling.
pub fn swd(u: &[f64], n: usize, v: &[f64], m: usize, d: usize, dirs: &[f64], p: f64) -> f64 {
    let l = dirs.len() / d;
    let mut total = 0.0;
    for k in 0..l {
        let th = &dirs[k * d..(k + 1) * d];
        let proj = |x: &[f64], cnt: usize, rep: usize| {
            let mut out: Vec<f64> = Vec::new();
            for i in 0..cnt {
                let z: f64 = (0..d).map(|j| x[i * d + j] * th[j]).sum();
                out.extend(std::iter::repeat_n(z, rep));
            }
            out.sort_by(f64::total_cmp);
            out
        };
        let (a, b) = (proj(u, n, m), proj(v, m, n));
        total += a.iter().zip(&b).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / a.len() as f64;
    }
    (total / l as f64).powf(1.0 / p)
}

/// DM plus `λ Σ_c SWD(u_c, v_c)` over per-class mean-logit singletons.
pub fn cdc_loss(
    net: &RefNet,
    syn: &[Option<(Vec<f64>, usize)>],
    real: &[Option<(Vec<f64>, usize)>],
    global: &[Option<Vec<f64>>],
    lambda: f64,
    dirs: &[f64],
    p: f64,
) -> f64 {
    let c = net.arch.classes;
    let mut reg = 0.0;
    for (s, g) in syn.iter().zip(global) {
        if let (Some((sx, sn)), Some(g)) = (s, g) {
            let u = mean_rows(&net.logits(sx, *sn), *sn, c);
            reg += swd(&u, 1, g, 1, c, dirs, p);
        }
    }
    dm_loss(net, syn, real) + lambda * reg
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn cross_entropy(logits: &[f64], c: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(&logits[i * c..(i + 1) * c], 1.0);
        total -= p[y].ln();
    }
    total / labels.len() as f64
}

fn floored(row: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = row.iter().map(|&x| x.max(1e-8)).collect();
    let s: f64 = r.iter().sum();
    r.into_iter().map(|x| x / s).collect()
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum()
}

/// Mean over rows of `½(KL(r‖t) + KL(t‖r))` after flooring at 1e-8.
pub fn lgkm(r: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, b) in r.iter().zip(t) {
        let (a, b) = (floored(a), floored(b));
        total += 0.5 * (kl(&a, &b) + kl(&b, &a));
    }
    total / r.len() as f64
}

/// `CE(w, S) + λ · LGKM(R, T(w))` with `T` over the classes listed in `classes`.
pub fn global_loss(
    net: &RefNet,
    x: &[f64],
    labels: &[usize],
    per_class: &[(usize, Vec<f64>, usize)],
    r: &[Vec<f64>],
    lambda: f64,
    tau: f64,
) -> f64 {
    let c = net.arch.classes;
    let ce = cross_entropy(&net.logits(x, labels.len()), c, labels);
    let t: Vec<Vec<f64>> = per_class
        .iter()
        .map(|(_, px, n)| softmax(&mean_rows(&net.logits(px, *n), *n, c), tau))
        .collect();
    ce + lambda * lgkm(r, &t)
}
