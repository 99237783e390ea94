//! Independent reference implementations and generators shared by the
//! integration tests. Kept deliberately naive.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iava_core::evaluation::Answer;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn naive_mean(xs: &[f64]) -> f64 {
    let mut total = 0.0;
    for x in xs {
        total += x;
    }
    total / xs.len() as f64
}

pub fn naive_sigma(xs: &[f64]) -> f64 {
    let mu = naive_mean(xs);
    let mut acc = 0.0;
    for x in xs {
        acc += (x - mu) * (x - mu);
    }
    (acc / xs.len() as f64).sqrt()
}

pub fn naive_delta(att1: &[f64], att2: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..att1.len() {
        out.push(att2[k] - att1[k]);
    }
    out
}

/// Per-index check of the three selection conditions.
pub fn brute_force_selection(att1: &[f64], att2: &[f64], rank: usize, lambda: f64) -> Vec<usize> {
    let delta = naive_delta(att1, att2);
    let mut sorted = delta.clone();
    // insertion sort, independent of the library's sort
    for a in 1..sorted.len() {
        let mut b = a;
        while b > 0 && sorted[b - 1] > sorted[b] {
            sorted.swap(b - 1, b);
            b -= 1;
        }
    }
    let threshold = sorted[rank];
    let floor = naive_mean(att1) + lambda * naive_sigma(att1);
    let mut chosen = Vec::new();
    for j in 0..att1.len() {
        if delta[j] < 0.0 && delta[j] < threshold && att1[j] > floor {
            chosen.push(j);
        }
    }
    chosen
}

/// Attention-like vector. Some entries are drawn from a coarse grid so that
/// ties, zeros and exact threshold hits occur.
pub fn attention_like(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let coarse = rng.random_bool(0.3);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if coarse {
                f64::from(rng.random_range(0..5u8)) / 4.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    if rng.random_bool(0.5) {
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            return raw.iter().map(|x| x / total).collect();
        }
    }
    raw
}

/// Query-side vector correlated with `att1` so that a mix of gains and losses appears.
pub fn perturbed(rng: &mut impl Rng, att1: &[f64]) -> Vec<f64> {
    att1.iter()
        .map(|&x| {
            if rng.random_bool(0.2) {
                x
            } else {
                (x * rng.random_range(0.0..2.0)).max(0.0)
            }
        })
        .collect()
}

pub fn naive_log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
    v.iter().map(|x| x - m - z.ln()).collect()
}

pub fn naive_softmax(v: &[f64]) -> Vec<f64> {
    naive_log_softmax(v).iter().map(|x| x.exp()).collect()
}

/// Direct evaluation of softmax((1+a)·ls(base) − a·ls(neg)).
pub fn naive_contrastive(base: &[f64], neg: &[f64], alpha: f64) -> Vec<f64> {
    let lb = naive_log_softmax(base);
    let ln = naive_log_softmax(neg);
    let combined: Vec<f64> = lb.iter().zip(&ln).map(|(b, n)| (1.0 + alpha) * b - alpha * n).collect();
    naive_softmax(&combined)
}

pub fn logits(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_answers(rng: &mut impl Rng, n: usize) -> Vec<Answer> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { Answer::Yes } else { Answer::No })
        .collect()
}

/// (tp, fp, tn, fn) by explicit counting.
pub fn brute_force_confusion(preds: &[Answer], golds: &[Answer]) -> (usize, usize, usize, usize) {
    let count = |p: Answer, g: Answer| preds.iter().zip(golds).filter(|(&a, &b)| a == p && b == g).count();
    (
        count(Answer::Yes, Answer::Yes),
        count(Answer::Yes, Answer::No),
        count(Answer::No, Answer::No),
        count(Answer::No, Answer::Yes),
    )
}
