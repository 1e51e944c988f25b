//! Oracles written independently of the library code paths they check.
#![allow(dead_code)]

use std::collections::BTreeSet;

use glr_core::head::{weighted_ce_loss, ClassWeights, CosineHead};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Squared distance by plain indexing, f64, dimension order.
pub fn naive_squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut total = 0.0f64;
    for i in 0..a.len() {
        let diff = a[i] as f64 - b[i] as f64;
        total += diff * diff;
    }
    total
}

/// Full-sort kNN: every distance, sorted by (distance, id), first k kept.
pub fn naive_knn(
    query: &[f32],
    index_ids: &[String],
    index_rows: &[Vec<f32>],
    k: usize,
) -> Vec<(String, f64)> {
    let mut all: Vec<(f64, String)> = index_rows
        .iter()
        .zip(index_ids)
        .map(|(row, id)| (naive_squared_distance(query, row), id.clone()))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    all.into_iter()
        .take(k)
        .map(|(d, id)| (id, d.sqrt()))
        .collect()
}

/// AP@k by recounting the precision at every relevant cut-off.
pub fn direct_ap(predicted: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let n = predicted.len().min(k);
    let mut sum = 0.0;
    for j in 1..=n {
        if !relevant.contains(&predicted[j - 1]) {
            continue;
        }
        let hits_upto_j = predicted[..j]
            .iter()
            .filter(|p| relevant.contains(*p))
            .count();
        sum += hits_upto_j as f64 / j as f64;
    }
    sum / (relevant.len().min(k)) as f64
}

/// Loss of one sample computed from scratch: plain softmax, no max shift.
#[allow(clippy::needless_range_loop)]
pub fn naive_loss(
    head: &CosineHead<f64>,
    x: &[f32],
    label: usize,
    class_w: &[f64],
    sample_w: f64,
) -> f64 {
    let (d_in, d_emb, c) = (head.d_in(), head.d_emb(), head.num_classes());
    let mut z = vec![0.0; d_emb];
    for i in 0..d_in {
        for j in 0..d_emb {
            z[j] += x[i] as f64 * head.proj()[i * d_emb + j];
        }
    }
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let logits: Vec<f64> = (0..c)
        .map(|k| {
            let w = &head.prototypes()[k * d_emb..(k + 1) * d_emb];
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (zn * wn);
            head.scale() * cos
        })
        .collect();
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    let p = logits[label].exp() / denom;
    -sample_w * class_w[label] * p.ln()
}

/// Central finite differences of the library loss w.r.t. every parameter,
/// proj entries first, then prototypes.
pub fn finite_difference_grads(
    head: &CosineHead<f64>,
    x: &[f32],
    label: usize,
    class_w: &ClassWeights,
    sample_w: f64,
    h: f64,
) -> Vec<f64> {
    let loss_of = |proj: &[f64], protos: &[f64]| -> f64 {
        let probe = CosineHead::from_parts(
            head.d_in(),
            head.d_emb(),
            proj.to_vec(),
            protos.to_vec(),
            head.scale(),
        )
        .unwrap();
        let fwd = probe.forward(x).unwrap();
        weighted_ce_loss(&fwd.logits, label, class_w, sample_w).unwrap()
    };
    let proj = head.proj().to_vec();
    let protos = head.prototypes().to_vec();
    let mut out = Vec::with_capacity(proj.len() + protos.len());
    for i in 0..proj.len() {
        let (mut plus, mut minus) = (proj.clone(), proj.clone());
        plus[i] += h;
        minus[i] -= h;
        out.push((loss_of(&plus, &protos) - loss_of(&minus, &protos)) / (2.0 * h));
    }
    for i in 0..protos.len() {
        let (mut plus, mut minus) = (protos.clone(), protos.clone());
        plus[i] += h;
        minus[i] -= h;
        out.push((loss_of(&proj, &plus) - loss_of(&proj, &minus)) / (2.0 * h));
    }
    out
}

/// Relative error with a magnitude floor so entries that are analytically
/// ~0 are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Random small head with shapes bounded as in the gradient acceptance check.
pub fn random_small_head(
    rng: &mut ChaCha8Rng,
) -> (CosineHead<f64>, Vec<f32>, usize, ClassWeights, f64) {
    let d_in = rng.random_range(1..=8);
    let d_emb = rng.random_range(1..=6);
    let classes = rng.random_range(3..=7);
    let head = CosineHead::<f64>::init(d_in, d_emb, classes, rng.random()).unwrap();
    // Scale drawn independently so saturated and flat regimes both appear.
    let head = CosineHead::from_parts(
        d_in,
        d_emb,
        head.proj().to_vec(),
        head.prototypes().to_vec(),
        rng.random_range(0.5..16.0),
    )
    .unwrap();
    let x = loop {
        let x = random_vec(rng, d_in);
        if head.forward(&x).is_ok() {
            break x;
        }
    };
    let label = rng.random_range(0..classes);
    let counts: Vec<u64> = (0..classes).map(|_| rng.random_range(1..500)).collect();
    let cw = glr_core::head::class_weights(&counts).unwrap();
    let sample_w = rng.random_range(0.5..2.5);
    (head, x, label, cw, sample_w)
}

pub fn flatten(grads: &glr_core::head::HeadGradients) -> Vec<f64> {
    grads
        .proj
        .iter()
        .chain(&grads.prototypes)
        .copied()
        .collect()
}
