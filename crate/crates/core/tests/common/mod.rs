//! Independent reference implementations shared by the integration tests.
//! Plain nested `Vec`s and explicit loops, no use of the tape.

#![allow(dead_code)]

use mvhash::data::Labels;
use mvhash::model::{Fusion, ModelConfig, ModelParams};
use mvhash::nd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; n]; a.len()];
    for i in 0..a.len() {
        for j in 0..n {
            let mut s = 0.0;
            for (l, bl) in b.iter().enumerate() {
                s += a[i][l] * bl[j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let mut y = mm(x, &to_mat(w));
    for row in &mut y {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b.get(0, j);
        }
    }
    y
}

fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect())
        .collect()
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hash activations `h` and logits `y'`.
pub fn forward(params: &ModelParams, cfg: &ModelConfig, views: &[Tensor]) -> (Mat, Mat) {
    let ab = &cfg.ablation;
    let enabled = cfg.enabled_views();
    let mut gated: Vec<(usize, Mat)> = Vec::new();
    for &m in &enabled {
        let z = to_mat(&views[m]);
        let enc = &params.encoders[m];
        let hid = map(&affine(&z, &enc.hidden.w, &enc.hidden.b), relu);
        let e = map(&affine(&hid, &enc.out.w, &enc.out.b), f64::tanh);
        let c = if ab.use_gate {
            let g = if ab.shared_gate { &params.gates[0] } else { &params.gates[m] };
            let w = map(&affine(&e, &g.w, &g.b), logistic);
            zip(&w, &e, |a, b| a * b)
        } else {
            e
        };
        gated.push((m, c));
    }
    let s = gated[0].1.len();
    let a: Mat = match ab.fusion {
        Fusion::Concat => (0..s)
            .map(|i| gated.iter().flat_map(|(_, c)| c[i].clone()).collect())
            .collect(),
        Fusion::WeightedSum => {
            let mut acc = vec![vec![0.0; cfg.d]; s];
            for (m, c) in &gated {
                let p = if ab.use_adaptive { params.view_weights[*m].get(0, 0) } else { 1.0 };
                for i in 0..s {
                    for j in 0..cfg.d {
                        acc[i][j] += p * c[i][j];
                    }
                }
            }
            acc
        }
    };
    let g = if ab.use_dilation {
        let u = map(&affine(&a, &params.expand.w, &params.expand.b), relu);
        let back = affine(&u, &params.contract.w, &params.contract.b);
        zip(&back, &a, |x, y| x + y)
    } else {
        a
    };
    let h = map(&affine(&g, &params.hash.w, &params.hash.b), f64::tanh);
    let y = affine(&h, &params.classifier.w, &params.classifier.b);
    (h, y)
}

pub fn phi(dot: f64) -> f64 {
    2.0 / (1.0 + (-dot).exp()) - 1.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over ordered pairs of (cos(h_i, h_j) - phi(y_i . y_j))².
pub fn sim_loss(h: &Mat, y: &Mat, include_diagonal: bool) -> f64 {
    let s = h.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..s {
        for j in 0..s {
            if i == j && !include_diagonal {
                continue;
            }
            let cos = dot(&h[i], &h[j]) / (dot(&h[i], &h[i]).sqrt() * dot(&h[j], &h[j]).sqrt());
            let d = cos - phi(dot(&y[i], &y[j]));
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn clf_loss(pred: &Mat, y: &Mat) -> f64 {
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(y) {
        for (a, b) in p.iter().zip(t) {
            sum += (a - b) * (a - b);
        }
    }
    sum / pred.len() as f64
}

pub fn total_loss(params: &ModelParams, cfg: &ModelConfig, views: &[Tensor], labels: &Tensor, mu: f64) -> f64 {
    let (h, pred) = forward(params, cfg, views);
    let y = to_mat(labels);
    sim_loss(&h, &y, true) + mu * clf_loss(&pred, &y)
}

/// Rank by Hamming distance computed from the ±1 inner product, ties by
/// index, then AP straight from its definition over the full list.
pub fn average_precision(query: &[i8], bank: &[Vec<i8>], q_labels: &[u8], bank_labels: &Labels) -> f64 {
    let k = query.len() as i64;
    let mut order: Vec<(i64, usize)> = bank
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let ip: i64 = query.iter().zip(b).map(|(&x, &y)| (x as i64) * (y as i64)).sum();
            ((k - ip) / 2, i)
        })
        .collect();
    order.sort();
    let rel: Vec<bool> = order
        .iter()
        .map(|&(_, i)| bank_labels.row(i).iter().zip(q_labels).any(|(&a, &b)| a == 1 && b == 1))
        .collect();
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for r in 0..rel.len() {
        if rel[r] {
            let hits = rel[..=r].iter().filter(|&&x| x).count();
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / total as f64
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_labels(rng: &mut ChaCha8Rng, rows: usize, classes: usize, p: f64) -> Labels {
    let data = (0..rows * classes).map(|_| u8::from(rng.random_bool(p))).collect();
    Labels::new(rows, classes, data).unwrap()
}

pub fn random_bits(rng: &mut ChaCha8Rng, k: usize) -> Vec<i8> {
    (0..k).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect()
}

/// Random parameters, biases included, so the oracle sees nonzero values
/// everywhere.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let base = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    base.map(|_, t| random_tensor(&mut rng, t.rows(), t.cols(), 0.6))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
