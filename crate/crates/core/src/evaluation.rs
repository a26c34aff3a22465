//! Retrieval evaluation: cosine distances, protocol-dependent gallery
//! filtering, and CMC / mAP.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// L2-normalized feature (or all zeros when the raw feature vanished).
    pub feature: Vec<f64>,
    pub identity: u32,
    /// Identity-scoped clothing label.
    pub clothing: u32,
    pub camera: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Same-clothing and clothing-change ground truth both count.
    General,
    /// Only same-clothing ground truth counts.
    SameClothing,
    /// Only clothing-change ground truth counts.
    ClothingChange,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::General, EvalMode::SameClothing, EvalMode::ClothingChange];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::General => "general",
            EvalMode::SameClothing => "same-clothing",
            EvalMode::ClothingChange => "clothing-change",
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Self::General),
            "sc" | "same-clothing" => Ok(Self::SameClothing),
            "cc" | "clothing-change" => Ok(Self::ClothingChange),
            other => Err(Error::Argument(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    /// Drop gallery items sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
}

impl EvalProtocol {
    pub fn new(mode: EvalMode) -> Self {
        Self {
            mode,
            exclude_same_camera: true,
        }
    }
}

/// `d[q][g] = 1 - f_q . f_g`.
pub fn distance_matrix(query: &[EvalRecord], gallery: &[EvalRecord]) -> Result<Vec<Vec<f64>>> {
    let dim = query
        .first()
        .or(gallery.first())
        .map_or(0, |r| r.feature.len());
    if query.iter().chain(gallery).any(|r| r.feature.len() != dim) {
        return Err(Error::Argument("query and gallery features differ in dimension".into()));
    }
    Ok(query
        .iter()
        .map(|q| gallery.iter().map(|g| 1.0 - dot(&q.feature, &g.feature)).collect())
        .collect())
}

/// Which gallery items take part in ranking for `query`, and which of those are matches.
pub fn valid_gallery_mask(
    query: &EvalRecord,
    gallery: &[EvalRecord],
    protocol: &EvalProtocol,
) -> (Vec<bool>, Vec<bool>) {
    let mut valid = Vec::with_capacity(gallery.len());
    let mut positive = Vec::with_capacity(gallery.len());
    for g in gallery {
        let same_id = g.identity == query.identity;
        let same_clothes = same_id && g.clothing == query.clothing;
        let mut ok = !(protocol.exclude_same_camera && same_id && g.camera == query.camera);
        match protocol.mode {
            EvalMode::General => {}
            EvalMode::SameClothing => ok &= !(same_id && !same_clothes),
            EvalMode::ClothingChange => ok &= !same_clothes,
        }
        valid.push(ok);
        positive.push(ok && same_id);
    }
    (valid, positive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    /// `cmc[k]`: fraction of evaluable queries whose first match is within the top `k + 1`.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub evaluable_queries: usize,
    pub excluded_queries: usize,
}

impl EvalResult {
    /// CMC at rank `k` (1-based), saturating at the last computed rank.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[(k.max(1) - 1).min(n - 1)],
        }
    }
}

/// Per-query ranking outcome: 0-based positions of matches among valid items.
pub fn ranked_hits(distances: &[f64], valid: &[bool], positive: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).filter(|&g| valid[g]).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
        .iter()
        .enumerate()
        .filter(|(_, &g)| positive[g])
        .map(|(rank, _)| rank)
        .collect()
}

pub fn average_precision(hits: &[usize]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter()
        .enumerate()
        .map(|(found, &rank)| (found + 1) as f64 / (rank + 1) as f64)
        .sum::<f64>()
        / hits.len() as f64
}

pub fn cmc_map(
    distmat: &[Vec<f64>],
    query: &[EvalRecord],
    gallery: &[EvalRecord],
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol("query and gallery must be non-empty".into()));
    }
    if distmat.len() != query.len() || distmat.iter().any(|r| r.len() != gallery.len()) {
        return Err(Error::Argument(format!(
            "distance matrix is not {}x{}",
            query.len(),
            gallery.len()
        )));
    }
    let mut cmc = vec![0.0; gallery.len()];
    let mut ap_sum = 0.0;
    let mut evaluable = 0usize;
    for (q, row) in query.iter().zip(distmat) {
        let (valid, positive) = valid_gallery_mask(q, gallery, protocol);
        let hits = ranked_hits(row, &valid, &positive);
        let Some(&first) = hits.first() else {
            continue;
        };
        evaluable += 1;
        cmc[first..].iter_mut().for_each(|v| *v += 1.0);
        ap_sum += average_precision(&hits);
    }
    if evaluable == 0 {
        return Err(Error::Protocol(format!(
            "no query has a valid match under {} mode",
            protocol.mode.name()
        )));
    }
    let e = evaluable as f64;
    cmc.iter_mut().for_each(|v| *v /= e);
    Ok(EvalResult {
        mode: protocol.mode,
        cmc,
        map: ap_sum / e,
        evaluable_queries: evaluable,
        excluded_queries: query.len() - evaluable,
    })
}

/// Evaluates every requested mode on one distance matrix.
pub fn evaluate_modes(
    query: &[EvalRecord],
    gallery: &[EvalRecord],
    modes: &[EvalMode],
) -> Result<Vec<EvalResult>> {
    let d = distance_matrix(query, gallery)?;
    modes
        .iter()
        .map(|&m| cmc_map(&d, query, gallery, &EvalProtocol::new(m)))
        .collect()
}

/// Results file: one `[[result]]` table per mode, metrics in percent.
pub fn format_results(results: &[EvalResult]) -> String {
    let mut out = String::new();
    for r in results {
        let _ = writeln!(out, "[[result]]");
        let _ = writeln!(out, "mode = \"{}\"", r.mode.name());
        let _ = writeln!(out, "rank1 = {:.4}", 100.0 * r.rank(1));
        let _ = writeln!(out, "rank5 = {:.4}", 100.0 * r.rank(5));
        let _ = writeln!(out, "rank10 = {:.4}", 100.0 * r.rank(10));
        let _ = writeln!(out, "mAP = {:.4}", 100.0 * r.map);
        let _ = writeln!(out, "evaluable-queries = {}", r.evaluable_queries);
        let _ = writeln!(out, "excluded-queries = {}", r.excluded_queries);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(feature: Vec<f64>, identity: u32, clothing: u32, camera: u32) -> EvalRecord {
        EvalRecord {
            feature,
            identity,
            clothing,
            camera,
        }
    }

    #[test]
    fn distance_examples() {
        let a = rec(vec![1.0, 0.0], 0, 0, 0);
        let b = rec(vec![0.0, 1.0], 0, 0, 0);
        let d = distance_matrix(&[a.clone()], &[a.clone(), b]).unwrap();
        assert_eq!(d[0], vec![0.0, 1.0]);
        assert!(distance_matrix(&[a], &[rec(vec![1.0], 0, 0, 0)]).is_err());
    }

    #[test]
    fn protocol_filters() {
        let q = rec(vec![], 1, 0, 0);
        let gallery = vec![
            rec(vec![], 1, 0, 1), // same clothes
            rec(vec![], 1, 1, 1), // changed clothes
            rec(vec![], 2, 0, 1), // other identity
            rec(vec![], 1, 1, 0), // same camera
        ];
        let (v, p) = valid_gallery_mask(&q, &gallery, &EvalProtocol::new(EvalMode::ClothingChange));
        assert_eq!(v, vec![false, true, true, false]);
        assert_eq!(p, vec![false, true, false, false]);
        let (v, p) = valid_gallery_mask(&q, &gallery, &EvalProtocol::new(EvalMode::SameClothing));
        assert_eq!(v, vec![true, false, true, false]);
        assert_eq!(p, vec![true, false, false, false]);
        let (v, p) = valid_gallery_mask(&q, &gallery, &EvalProtocol::new(EvalMode::General));
        assert_eq!(v, vec![true, true, true, false]);
        assert_eq!(p, vec![true, true, false, false]);
    }

    #[test]
    fn single_perfect_query() {
        let q = vec![rec(vec![1.0, 0.0], 0, 0, 0)];
        let g = vec![rec(vec![1.0, 0.0], 0, 1, 1), rec(vec![0.0, 1.0], 1, 0, 1)];
        let r = evaluate_modes(&q, &g, &[EvalMode::General]).unwrap();
        assert_eq!(r[0].rank(1), 1.0);
        assert_eq!(r[0].map, 1.0);
    }

    #[test]
    fn ap_with_hits_at_one_and_three() {
        let d = vec![vec![0.1, 0.2, 0.3]];
        let q = vec![rec(vec![], 0, 0, 0)];
        let g = vec![rec(vec![], 0, 1, 1), rec(vec![], 1, 0, 1), rec(vec![], 0, 2, 1)];
        let r = cmc_map(&d, &q, &g, &EvalProtocol::new(EvalMode::General)).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let d = vec![vec![0.5, 0.5]];
        let q = vec![rec(vec![], 0, 0, 0)];
        let g = vec![rec(vec![], 1, 0, 1), rec(vec![], 0, 1, 1)];
        let r = cmc_map(&d, &q, &g, &EvalProtocol::new(EvalMode::General)).unwrap();
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(2), 1.0);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn queries_without_matches_are_excluded_or_rejected() {
        let d = vec![vec![0.1], vec![0.2]];
        let q = vec![rec(vec![], 0, 0, 0), rec(vec![], 5, 0, 0)];
        let g = vec![rec(vec![], 0, 1, 1)];
        let r = cmc_map(&d, &q, &g, &EvalProtocol::new(EvalMode::General)).unwrap();
        assert_eq!((r.evaluable_queries, r.excluded_queries), (1, 1));
        assert!(matches!(
            cmc_map(&d, &q, &g, &EvalProtocol::new(EvalMode::SameClothing)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn results_file_has_one_block_per_mode() {
        let q = vec![rec(vec![1.0, 0.0], 0, 0, 0)];
        let g = vec![rec(vec![1.0, 0.0], 0, 0, 1), rec(vec![0.6, 0.8], 0, 1, 1)];
        let rs = evaluate_modes(&q, &g, &EvalMode::ALL).unwrap();
        let text = format_results(&rs);
        assert_eq!(text.matches("[[result]]").count(), 3);
        let parsed: toml::Value = toml::from_str(&text).unwrap();
        assert_eq!(parsed["result"][2]["mode"].as_str(), Some("clothing-change"));
        assert_eq!(parsed["result"][0]["rank1"].as_float(), Some(100.0));
    }
}
