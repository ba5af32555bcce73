//! Random batches and loop-by-loop reference implementations of the losses.
#![allow(dead_code)]

use make_core::corpus::KNOWLEDGE_SLOTS;
use make_core::losses::{EmbeddingBatch, LossConfig};
use make_core::Tensor;
use rand::Rng;

pub fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit visual and text rows, free-norm patches, knowledge slots always
/// valid, each subtext valid with probability `p_sub`.
pub fn random_batch(rng: &mut impl Rng, n: usize, k: usize, d: usize, hw: usize, p_sub: f64) -> EmbeddingBatch<f64> {
    let s = k + KNOWLEDGE_SLOTS;
    let visual: Vec<f64> = (0..n).flat_map(|_| unit(rng, d)).collect();
    let patches: Vec<f64> = (0..n * hw * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut mask = Vec::with_capacity(n * s);
    let mut texts = Vec::with_capacity(n * s * d);
    for _ in 0..n {
        for j in 0..s {
            let valid = j < KNOWLEDGE_SLOTS || rng.gen_bool(p_sub);
            mask.push(valid);
            if valid {
                texts.extend(unit(rng, d));
            } else {
                texts.extend(std::iter::repeat(0.0).take(d));
            }
        }
    }
    EmbeddingBatch::new(
        Tensor::from_vec(&[n, d], visual).unwrap(),
        Tensor::from_vec(&[n, hw, d], patches).unwrap(),
        Tensor::from_vec(&[n, s, d], texts).unwrap(),
        mask,
    )
    .unwrap()
}

pub fn dotp(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Diagnosis weights, one plain loop per sample.
pub fn naive_weights(b: &EmbeddingBatch<f64>) -> Vec<Vec<f64>> {
    let (n, s) = (b.n(), b.slots());
    let mut out = vec![vec![0.0; s]; n];
    for i in 0..n {
        for j in 0..KNOWLEDGE_SLOTS {
            out[i][j] = if b.valid(i, j) { 1.0 } else { 0.0 };
        }
        let mut max = 0.0f64;
        for j in KNOWLEDGE_SLOTS..s {
            if b.valid(i, j) {
                let r = dotp(b.text(i, 1), b.text(i, j)).max(1e-3);
                out[i][j] = r;
                max = max.max(r);
            }
        }
        for j in KNOWLEDGE_SLOTS..s {
            if b.valid(i, j) {
                out[i][j] /= max;
            }
        }
    }
    out
}

fn in_mkcl(cfg: &LossConfig, j: usize) -> bool {
    j == 0 || (j < KNOWLEDGE_SLOTS && cfg.knowledge_slots) || (j >= KNOWLEDGE_SLOTS && cfg.subtext_slots)
}

fn positive(b: &EmbeddingBatch<f64>, w: &[Vec<f64>], i: usize, j: usize) -> bool {
    b.valid(i, j) && w[i][j] > 0.0
}

pub fn naive_i2t(b: &EmbeddingBatch<f64>, w: &[Vec<f64>], tau: f64, cfg: &LossConfig) -> f64 {
    let (n, s) = (b.n(), b.slots());
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let mut logits = Vec::new();
        for k in 0..n {
            for m in 0..s {
                if positive(b, w, k, m) && in_mkcl(cfg, m) {
                    logits.push(dotp(b.visual_row(i), b.text(k, m)) / tau);
                }
            }
        }
        let lse = log_sum_exp(&logits);
        for j in 0..s {
            if positive(b, w, i, j) && in_mkcl(cfg, j) {
                num += w[i][j] * (lse - dotp(b.visual_row(i), b.text(i, j)) / tau);
                den += w[i][j];
            }
        }
    }
    num / den
}

/// Weighted text-to-image cross entropy against image rows `img`.
fn naive_text_to(b: &EmbeddingBatch<f64>, w: &[Vec<f64>], img: &[Vec<f64>], tau: f64, keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (n, s) = (b.n(), b.slots());
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..s {
            if positive(b, w, i, j) && keep(j) {
                let logits: Vec<f64> = (0..n).map(|k| dotp(b.text(i, j), &img[k]) / tau).collect();
                num += w[i][j] * (log_sum_exp(&logits) - logits[i]);
                den += w[i][j];
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn naive_t2i(b: &EmbeddingBatch<f64>, w: &[Vec<f64>], tau: f64, cfg: &LossConfig) -> f64 {
    let img: Vec<Vec<f64>> = (0..b.n()).map(|i| b.visual_row(i).to_vec()).collect();
    naive_text_to(b, w, &img, tau, |j| in_mkcl(cfg, j)).unwrap()
}

/// Softmax-pooled patches of each sample, unit length.
pub fn naive_enhanced(b: &EmbeddingBatch<f64>) -> Vec<Vec<f64>> {
    (0..b.n())
        .map(|i| {
            let scores: Vec<f64> = (0..b.hw()).map(|p| dotp(b.text(i, 0), b.patch(i, p))).collect();
            let lse = log_sum_exp(&scores);
            let mut e = vec![0.0; b.dim()];
            for p in 0..b.hw() {
                let z = (scores[p] - lse).exp();
                for (x, v) in e.iter_mut().zip(b.patch(i, p)) {
                    *x += z * v;
                }
            }
            let norm = dotp(&e, &e).sqrt();
            e.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn naive_slra(b: &EmbeddingBatch<f64>, w: &[Vec<f64>], tau: f64) -> Option<f64> {
    naive_text_to(b, w, &naive_enhanced(b), tau, |j| j >= KNOWLEDGE_SLOTS)
}

pub fn naive_total(b: &EmbeddingBatch<f64>, w: &[Vec<f64>], tau: f64, lambda: f64, cfg: &LossConfig) -> f64 {
    let mkcl = (naive_i2t(b, w, tau, cfg) + naive_t2i(b, w, tau, cfg)) / 2.0;
    match naive_slra(b, w, tau) {
        Some(s) if cfg.slra => mkcl + lambda * s,
        _ => mkcl,
    }
}

/// Symmetric InfoNCE over matched rows `v[i] ↔ t[i]`.
pub fn info_nce(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let n = v.len();
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| dotp(&v[i], &t[j]) / tau).collect();
        let col: Vec<f64> = (0..n).map(|j| dotp(&v[j], &t[i]) / tau).collect();
        a += log_sum_exp(&row) - row[i];
        b += log_sum_exp(&col) - col[i];
    }
    (a + b) / (2.0 * n as f64)
}

/// AUROC by counting pairs in integers.
pub fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (a, &la) in labels.iter().enumerate() {
        for (b, &lb) in labels.iter().enumerate() {
            if la && !lb {
                pairs += 1;
                twice_wins += match scores[a].partial_cmp(&scores[b]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (pairs > 0).then(|| twice_wins as f64 / (2 * pairs) as f64)
}

/// Recall@K by sorting each query's candidates, ties to the lower index.
pub fn sort_recall(sim: &[Vec<f64>], ks: &[usize]) -> Vec<f64> {
    let n = sim.len();
    let ranks: Vec<usize> = (0..n)
        .map(|q| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| sim[q][b].partial_cmp(&sim[q][a]).unwrap().then(a.cmp(&b)));
            order.iter().position(|&c| c == q).unwrap() + 1
        })
        .collect();
    ks.iter().map(|&k| ranks.iter().filter(|&&r| r <= k.min(n)).count() as f64 / n as f64).collect()
}
