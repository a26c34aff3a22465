//! Training objectives: identity cross-entropy, the clothing contrastive loss
//! and the weighted overall loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature applied to feature similarities.
    pub tau: f64,
    /// Cross-clothing positive pairs are weighted by `1 / divisor`.
    #[serde(rename = "T")]
    pub divisor: f64,
    /// Weight of the contrastive term in the overall loss.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            divisor: 0.5,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.divisor > 0.0 && self.divisor.is_finite()) {
            return Err(Error::Config(format!("loss.T must be positive, got {}", self.divisor)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Weight of positive pair `(anchor, p)` given their clothing labels.
    #[inline]
    pub fn pair_weight(&self, anchor_clothing: u64, positive_clothing: u64) -> f64 {
        if anchor_clothing != positive_clothing {
            1.0 / self.divisor
        } else {
            1.0
        }
    }
}

/// Identity and global appearance label of every sample in a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels {
    pub identities: Vec<u32>,
    pub clothings: Vec<u64>,
}

impl BatchLabels {
    pub fn new(identities: Vec<u32>, clothings: Vec<u64>) -> Result<Self> {
        if identities.len() != clothings.len() {
            return Err(Error::Argument(format!(
                "{} identity labels but {} clothing labels",
                identities.len(),
                clothings.len()
            )));
        }
        Ok(Self {
            identities,
            clothings,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Mean softmax cross-entropy. Returns the loss and its gradient on the logits.
pub fn id_loss_with_grad(logits: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &t) in logits.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::Argument(format!(
                "label {t} out of range for {} classes",
                row.len()
            )));
        }
        let lse = log_sum_exp(row);
        total += lse - row[t];
        let mut g: Vec<f64> = row.iter().map(|z| (z - lse).exp() / n).collect();
        g[t] -= 1.0 / n;
        grads.push(g);
    }
    Ok((total / n, grads))
}

pub fn id_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    id_loss_with_grad(logits, targets).map(|(l, _)| l)
}

fn check_batch(features: &[Vec<f64>], labels: &BatchLabels) -> Result<()> {
    if features.is_empty() {
        return Err(Error::Argument("contrastive loss needs a non-empty batch".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Argument("features in a batch must share a dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite contrastive feature".into()));
    }
    Ok(())
}

/// Weighted supervised contrastive loss and its gradient on the features.
///
/// For each anchor `i` with at least one positive (same identity, `j != i`),
/// every positive `p` contributes `w_p * log(e^{s_ip} / (e^{s_ip} + Σ_n e^{s_in}))`
/// where `n` ranges over different-identity samples and `s = f_i . f_j / tau`.
/// Contributions are averaged over the positives, summed over anchors,
/// negated and divided by the number of anchors that had positives.
fn weighted_contrastive<W>(
    features: &[Vec<f64>],
    labels: &BatchLabels,
    tau: f64,
    weight: W,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)>
where
    W: Fn(usize, usize) -> f64,
{
    check_batch(features, labels)?;
    let n = features.len();
    let dim = features[0].len();
    let ids = &labels.identities;
    let sim: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dot(&features[i], &features[j]) / tau).collect())
        .collect();

    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && ids[j] == ids[i]))
        .collect();
    let mut grads = vec![vec![0.0; dim]; if want_grad { n } else { 0 }];
    if anchors.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / anchors.len() as f64;
    // d loss / d sim[i][j]
    let mut dsim = vec![vec![0.0; n]; if want_grad { n } else { 0 }];
    let mut total = 0.0;
    for &i in &anchors {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && ids[j] == ids[i]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| ids[j] != ids[i]).collect();
        let coef = 1.0 / positives.len() as f64;
        let mut anchor_sum = 0.0;
        let mut terms = Vec::with_capacity(negatives.len() + 1);
        for &p in &positives {
            terms.clear();
            terms.push(sim[i][p]);
            terms.extend(negatives.iter().map(|&j| sim[i][j]));
            let lse = log_sum_exp(&terms);
            let w = weight(i, p);
            anchor_sum += w * (sim[i][p] - lse);
            if want_grad {
                let g = scale * coef * w;
                dsim[i][p] -= g * (1.0 - (sim[i][p] - lse).exp());
                for &j in &negatives {
                    dsim[i][j] += g * (sim[i][j] - lse).exp();
                }
            }
        }
        total += coef * anchor_sum;
    }
    let loss = -total * scale;
    if want_grad {
        for i in 0..n {
            for j in 0..n {
                let g = dsim[i][j] / tau;
                if g == 0.0 {
                    continue;
                }
                for d in 0..dim {
                    grads[i][d] += g * features[j][d];
                    grads[j][d] += g * features[i][d];
                }
            }
        }
    }
    Ok((loss, grads))
}

pub fn clothing_contrastive_loss(
    features: &[Vec<f64>],
    labels: &BatchLabels,
    config: &LossConfig,
) -> Result<f64> {
    let c = &labels.clothings;
    weighted_contrastive(
        features,
        labels,
        config.tau,
        |i, p| config.pair_weight(c[i], c[p]),
        false,
    )
    .map(|(l, _)| l)
}

pub fn clothing_contrastive_loss_with_grad(
    features: &[Vec<f64>],
    labels: &BatchLabels,
    config: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let c = &labels.clothings;
    weighted_contrastive(
        features,
        labels,
        config.tau,
        |i, p| config.pair_weight(c[i], c[p]),
        true,
    )
}

/// The unweighted supervised contrastive loss (every pair weight 1).
pub fn supervised_contrastive_loss(features: &[Vec<f64>], labels: &BatchLabels, tau: f64) -> Result<f64> {
    weighted_contrastive(features, labels, tau, |_, _| 1.0, false).map(|(l, _)| l)
}

/// Overall objective: `id_main + id_attn + lambda * ccl`.
pub fn total_loss(id_main: f64, id_attn: f64, ccl: f64, config: &LossConfig) -> f64 {
    id_main + id_attn + config.lambda * ccl
}
