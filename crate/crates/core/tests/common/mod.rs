//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use ccreid::evaluation::{EvalMode, EvalRecord};
use ccreid::network::{FeatureMap, Stream};
use rand::Rng;

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Clothing contrastive loss by explicit pairwise summation with plain
/// exponentials and no shared helpers.
pub fn ccl_oracle(f: &[Vec<f64>], ids: &[u32], clothes: &[u64], tau: f64, divisor: f64) -> f64 {
    let n = f.len();
    let sim = |i: usize, j: usize| f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && ids[j] == ids[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let neg_sum: f64 = (0..n).filter(|&j| ids[j] != ids[i]).map(|j| sim(i, j).exp()).sum();
        let mut inner = 0.0;
        for &p in &pos {
            let w = if clothes[p] == clothes[i] { 1.0 } else { 1.0 / divisor };
            let e = sim(i, p).exp();
            inner += w * (e / (e + neg_sum)).ln();
        }
        total += inner / pos.len() as f64;
    }
    if anchors == 0 {
        0.0
    } else {
        -total / anchors as f64
    }
}

/// Attention map by direct loops over a zero-padded pooled map.
pub fn attention_oracle(fa: &FeatureMap, weight: &[f64], bias: f64, k: usize) -> Vec<f64> {
    let (c, h, w) = (fa.channels, fa.height, fa.width);
    let r = k / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut padded = vec![vec![0.0; ph * pw]; 2];
    for y in 0..h {
        for x in 0..w {
            let vals: Vec<f64> = (0..c).map(|ch| fa.data[(ch * h + y) * w + x]).collect();
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = vals.iter().sum::<f64>() / c as f64;
            padded[0][(y + r) * pw + x + r] = max;
            padded[1][(y + r) * pw + x + r] = mean;
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut z = bias;
            for (ch, plane) in padded.iter().enumerate() {
                for ky in 0..k {
                    for kx in 0..k {
                        z += weight[ch * k * k + ky * k + kx] * plane[(y + ky) * pw + x + kx];
                    }
                }
            }
            out.push(1.0 / (1.0 + (-z).exp()));
        }
    }
    out
}

/// Feature map whose channel values at each position are well separated,
/// so small perturbations never change the channel argmax.
pub fn separated_map(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let mut data = vec![0.0; c * h * w];
    for i in 0..h * w {
        let mut levels: Vec<usize> = (0..c).collect();
        for j in (1..c).rev() {
            levels.swap(j, rng.gen_range(0..=j));
        }
        for ch in 0..c {
            data[ch * h * w + i] = -1.0 + 2.0 * levels[ch] as f64 / c as f64 + rng.gen_range(0.0..0.02);
        }
    }
    FeatureMap::new(c, h, w, data, Stream::Attention).unwrap()
}

/// Brute-force retrieval metrics: each positive's rank is counted directly
/// as the number of valid items ordered before it.
pub struct BruteMetrics {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluable: usize,
}

pub fn admissible(q: &EvalRecord, g: &EvalRecord, mode: EvalMode) -> (bool, bool) {
    let same_id = q.identity == g.identity;
    if same_id && q.camera == g.camera {
        return (false, false);
    }
    let ok = match mode {
        EvalMode::General => true,
        EvalMode::SameClothing => !same_id || q.clothing == g.clothing,
        EvalMode::ClothingChange => !same_id || q.clothing != g.clothing,
    };
    (ok, ok && same_id)
}

pub fn brute_metrics(d: &[Vec<f64>], query: &[EvalRecord], gallery: &[EvalRecord], mode: EvalMode) -> Option<BruteMetrics> {
    let mut cmc = vec![0.0; gallery.len()];
    let mut ap_sum = 0.0;
    let mut evaluable = 0;
    for (qi, q) in query.iter().enumerate() {
        let flags: Vec<(bool, bool)> = gallery.iter().map(|g| admissible(q, g, mode)).collect();
        let before = |a: usize, b: usize| d[qi][a] < d[qi][b] || (d[qi][a] == d[qi][b] && a < b);
        let mut ranks: Vec<usize> = (0..gallery.len())
            .filter(|&g| flags[g].1)
            .map(|g| (0..gallery.len()).filter(|&o| flags[o].0 && o != g && before(o, g)).count())
            .collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        evaluable += 1;
        for slot in cmc.iter_mut().skip(ranks[0]) {
            *slot += 1.0;
        }
        let ap: f64 = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64).sum::<f64>()
            / ranks.len() as f64;
        ap_sum += ap;
    }
    if evaluable == 0 {
        return None;
    }
    Some(BruteMetrics {
        cmc: cmc.into_iter().map(|v| v / evaluable as f64).collect(),
        map: ap_sum / evaluable as f64,
        evaluable,
    })
}

/// Largest-remainder apportionment with exact rational comparison of remainders.
pub fn largest_remainder_oracle(sizes: &[usize], budget: usize) -> Vec<usize> {
    let total: u128 = sizes.iter().map(|&s| s as u128).sum();
    let quotas: Vec<(u128, u128)> = sizes
        .iter()
        .map(|&s| {
            let num = budget as u128 * s as u128;
            (num / total, num % total)
        })
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.0 as usize).collect();
    let left = budget - counts.iter().sum::<usize>();
    let mut idx: Vec<usize> = (0..sizes.len()).collect();
    idx.sort_by(|&a, &b| quotas[b].1.cmp(&quotas[a].1).then(a.cmp(&b)));
    for &i in idx.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

/// Central-difference relative error with an absolute floor on the scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}
