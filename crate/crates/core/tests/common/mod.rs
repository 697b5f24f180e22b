//! Brute-force metric implementations shared by the oracle tests.
#![allow(dead_code)]

use grle::eval::{rank, Judgements, RankedList};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 1000;

pub fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

pub fn dcg(rels: &[u32], k: usize) -> f64 {
    let mut s = 0.0;
    for (i, &r) in rels.iter().enumerate() {
        if i >= k {
            break;
        }
        s += (2f64.powf(r as f64) - 1.0) * std::f64::consts::LN_2 / (2.0 + i as f64).ln();
    }
    s
}

/// nDCG with the ideal ordering found by trying every arrangement of the
/// judged documents.
pub fn brute_ndcg(ranked: &[String], rel: &Judgements, k: usize) -> f64 {
    let got: Vec<u32> = ranked.iter().map(|d| rel.get(d).copied().unwrap_or(0)).collect();
    let judged: Vec<u32> = rel.values().copied().collect();
    let ideal = permutations(&judged)
        .iter()
        .map(|p| dcg(p, k))
        .fold(0.0, f64::max);
    if ideal == 0.0 {
        0.0
    } else {
        dcg(&got, k) / ideal
    }
}

/// Average precision from explicit prefix counts.
pub fn brute_ap(ranked: &[String], rel: &Judgements) -> f64 {
    let total = rel.values().filter(|&&r| r > 0).count();
    if total == 0 {
        return 0.0;
    }
    let is_rel = |d: &String| rel.get(d).is_some_and(|&r| r > 0);
    let mut sum = 0.0;
    for k in 1..=ranked.len() {
        if is_rel(&ranked[k - 1]) {
            let hits = ranked[..k].iter().filter(|d| is_rel(d)).count();
            sum += hits as f64 / k as f64;
        }
    }
    sum / total as f64
}

/// Rank of each value by counting smaller and equal values.
pub fn counted_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (counted_ranks(a), counted_ranks(b));
    let n = a.len() as f64;
    let (sa, sb) = (ra.iter().sum::<f64>(), rb.iter().sum::<f64>());
    let sab: f64 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
    let saa: f64 = ra.iter().map(|x| x * x).sum();
    let sbb: f64 = rb.iter().map(|x| x * x).sum();
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    (va > 1e-12 && vb > 1e-12).then(|| cov / (va * vb).sqrt())
}

pub fn instance(rng: &mut ChaCha8Rng) -> (RankedList, Judgements) {
    let n = rng.gen_range(1..8);
    let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    // Coarse scores so ties are common.
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
    let mut rel = Judgements::new();
    for id in &ids {
        if rng.gen_bool(0.5) {
            rel.insert(id.clone(), rng.gen_range(0..4));
        }
    }
    (rank("q", &ids, &scores), rel)
}
