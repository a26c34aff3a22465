//! Dual-stream building blocks: the pooled-channel spatial attention that
//! transfers identity knowledge from the attention stream to the main stream,
//! the masked clothing-feature path, identity heads, and checkpoints.
//!
//! Every forward operation here has a matching `*_backward` returning
//! gradients for its inputs and parameters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::FeatureMask;
use crate::nn::BackboneConfig;
use crate::tensor::{dot, l2_normalize, l2_normalize_backward, sigmoid, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Main,
    Attention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub stream: Stream,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>, stream: Stream) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Argument("feature map dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Argument(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            stream,
        })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial mean per channel.
    pub fn global_average(&self) -> Vec<f64> {
        let p = self.plane() as f64;
        self.data.chunks(self.plane()).map(|c| c.iter().sum::<f64>() / p).collect()
    }
}

/// Spatial attention weights, one per feature-grid cell, each in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

/// Weights of the `2 -> 1` convolution over stacked channel-max / channel-mean maps.
#[derive(Debug, Clone, PartialEq)]
pub struct IktParams {
    pub kernel_size: usize,
    /// `[2, k, k]`: plane 0 convolves the channel-max map, plane 1 the channel-mean map.
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl IktParams {
    pub fn zeros(kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Argument(format!("kernel size {kernel_size} must be odd")));
        }
        Ok(Self {
            kernel_size,
            weight: vec![0.0; 2 * kernel_size * kernel_size],
            bias: 0.0,
        })
    }

    pub fn from_params(params: &ParamSet, prefix: &str) -> Result<Self> {
        let w = params.get(&format!("{prefix}.weight"));
        let k = *w.shape.last().unwrap_or(&0);
        if w.shape != [1, 2, k, k] || k % 2 == 0 {
            return Err(Error::Argument(format!("bad attention kernel shape {:?}", w.shape)));
        }
        Ok(Self {
            kernel_size: k,
            weight: w.data.clone(),
            bias: params.get(&format!("{prefix}.bias")).data[0],
        })
    }

    pub fn insert_into(&self, params: &mut ParamSet, prefix: &str) {
        let k = self.kernel_size;
        params.insert(
            format!("{prefix}.weight"),
            Tensor::from_vec(&[1, 2, k, k], self.weight.clone()).expect("kernel shape"),
        );
        params.insert(format!("{prefix}.bias"), Tensor::full(&[1], self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IktGrads {
    pub weight: Vec<f64>,
    pub bias: f64,
    /// Gradient with respect to the attention-stream feature map.
    pub features: Vec<f64>,
}

/// Channel-wise max and mean at every position, stacked as `[max; mean]`.
/// The argmax channel (first on ties) is returned for the backward pass.
pub fn channel_max_mean(fa: &FeatureMap) -> (Vec<f64>, Vec<usize>) {
    let p = fa.plane();
    let mut pooled = vec![0.0; 2 * p];
    let mut arg = vec![0usize; p];
    for i in 0..p {
        let mut best = fa.data[i];
        let mut best_c = 0;
        let mut sum = fa.data[i];
        for c in 1..fa.channels {
            let v = fa.data[c * p + i];
            sum += v;
            if v > best {
                best = v;
                best_c = c;
            }
        }
        pooled[i] = best;
        pooled[p + i] = sum / fa.channels as f64;
        arg[i] = best_c;
    }
    (pooled, arg)
}

/// Pre-activation logits of the attention map: 2-channel `k x k` convolution
/// with symmetric zero padding `k / 2`.
fn attention_logits(pooled: &[f64], h: usize, w: usize, params: &IktParams) -> Vec<f64> {
    let k = params.kernel_size;
    let r = (k / 2) as isize;
    let p = h * w;
    let mut z = vec![params.bias; p];
    for oh in 0..h {
        for ow in 0..w {
            let mut acc = 0.0;
            for ch in 0..2 {
                for kh in 0..k {
                    let ih = oh as isize + kh as isize - r;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = ow as isize + kw as isize - r;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        acc += params.weight[(ch * k + kh) * k + kw]
                            * pooled[ch * p + ih as usize * w + iw as usize];
                    }
                }
            }
            z[oh * w + ow] += acc;
        }
    }
    z
}

pub fn ikt_attention(fa: &FeatureMap, params: &IktParams) -> Result<AttentionMap> {
    if params.kernel_size % 2 == 0 {
        return Err(Error::Argument("attention kernel size must be odd".into()));
    }
    if !fa.is_finite() {
        return Err(Error::Numeric("attention-stream features contain non-finite values".into()));
    }
    let (pooled, _) = channel_max_mean(fa);
    let z = attention_logits(&pooled, fa.height, fa.width, params);
    Ok(AttentionMap {
        height: fa.height,
        width: fa.width,
        data: z.into_iter().map(sigmoid).collect(),
    })
}

/// Backward of [`ikt_attention`] given the forward output `att` and its gradient.
pub fn ikt_attention_backward(
    fa: &FeatureMap,
    params: &IktParams,
    att: &AttentionMap,
    d_att: &[f64],
) -> IktGrads {
    let (h, w, k) = (fa.height, fa.width, params.kernel_size);
    let p = h * w;
    let r = (k / 2) as isize;
    let (pooled, arg) = channel_max_mean(fa);
    let dz: Vec<f64> = att
        .data
        .iter()
        .zip(d_att)
        .map(|(a, g)| g * a * (1.0 - a))
        .collect();
    let mut dweight = vec![0.0; 2 * k * k];
    let mut dpooled = vec![0.0; 2 * p];
    for oh in 0..h {
        for ow in 0..w {
            let g = dz[oh * w + ow];
            if g == 0.0 {
                continue;
            }
            for ch in 0..2 {
                for kh in 0..k {
                    let ih = oh as isize + kh as isize - r;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = ow as isize + kw as isize - r;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let src = ch * p + ih as usize * w + iw as usize;
                        let wi = (ch * k + kh) * k + kw;
                        dweight[wi] += g * pooled[src];
                        dpooled[src] += g * params.weight[wi];
                    }
                }
            }
        }
    }
    let mut dfeat = vec![0.0; fa.data.len()];
    let inv_c = 1.0 / fa.channels as f64;
    for c in 0..fa.channels {
        for i in 0..p {
            dfeat[c * p + i] = dpooled[p + i] * inv_c;
        }
    }
    for i in 0..p {
        dfeat[arg[i] * p + i] += dpooled[i];
    }
    IktGrads {
        weight: dweight,
        bias: dz.iter().sum(),
        features: dfeat,
    }
}

/// Refines main-stream features: `out[c, h, w] = att[h, w] * fg[c, h, w]`.
pub fn apply_attention(att: &AttentionMap, fg: &FeatureMap) -> Result<FeatureMap> {
    if att.height != fg.height || att.width != fg.width {
        return Err(Error::Argument(format!(
            "attention map {}x{} does not match feature map {}x{}",
            att.height, att.width, fg.height, fg.width
        )));
    }
    let p = fg.plane();
    let mut data = fg.data.clone();
    for chunk in data.chunks_mut(p) {
        chunk.iter_mut().zip(&att.data).for_each(|(v, a)| *v *= a);
    }
    Ok(FeatureMap { data, ..fg.clone() })
}

/// Returns `(d_attention, d_features)`.
pub fn apply_attention_backward(att: &AttentionMap, fg: &FeatureMap, d_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = fg.plane();
    let mut d_att = vec![0.0; p];
    let mut d_fg = vec![0.0; fg.data.len()];
    for c in 0..fg.channels {
        for i in 0..p {
            let g = d_out[c * p + i];
            d_att[i] += g * fg.data[c * p + i];
            d_fg[c * p + i] = g * att.data[i];
        }
    }
    (d_att, d_fg)
}

/// Per-channel batch normalization state for the clothing-feature path.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn from_params(params: &ParamSet, buffers: &ParamSet, prefix: &str) -> Self {
        Self {
            gamma: params.get(&format!("{prefix}.gamma")).data.clone(),
            beta: params.get(&format!("{prefix}.beta")).data.clone(),
            running_mean: buffers.get(&format!("{prefix}.running_mean")).data.clone(),
            running_var: buffers.get(&format!("{prefix}.running_var")).data.clone(),
            eps: BN_EPS,
            momentum: 0.1,
        }
    }

    pub fn insert_into(&self, params: &mut ParamSet, buffers: &mut ParamSet, prefix: &str) {
        let c = self.channels();
        let t = |v: &Vec<f64>| Tensor::from_vec(&[c], v.clone()).expect("bn shape");
        params.insert(format!("{prefix}.gamma"), t(&self.gamma));
        params.insert(format!("{prefix}.beta"), t(&self.beta));
        buffers.insert(format!("{prefix}.running_mean"), t(&self.running_mean));
        buffers.insert(format!("{prefix}.running_var"), t(&self.running_var));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Saved state of a clothing-feature forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ClothingFeatureCache {
    masked: Vec<Vec<f64>>,
    normalized: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    mode: BnMode,
    masks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ClothingFeatureOutput {
    /// L2-normalized clothing features, one per sample.
    pub features: Vec<Vec<f64>>,
    /// True when every mask in the batch was empty.
    pub degenerate: bool,
    pub cache: ClothingFeatureCache,
}

/// Clothing features over a batch: mask product, per-channel batch
/// normalization, spatial mean, then L2 normalization (zero stays zero).
pub fn clothing_feature(
    frg: &[FeatureMap],
    masks: &[FeatureMask],
    bn: &mut BatchNorm,
    mode: BnMode,
) -> Result<ClothingFeatureOutput> {
    if frg.is_empty() {
        return Err(Error::Argument("clothing feature needs a non-empty batch".into()));
    }
    if frg.len() != masks.len() {
        return Err(Error::Argument("one clothing mask per feature map is required".into()));
    }
    let (c, h, w) = (frg[0].channels, frg[0].height, frg[0].width);
    if bn.channels() != c {
        return Err(Error::Argument(format!(
            "batch norm has {} channels, features have {c}",
            bn.channels()
        )));
    }
    for (f, m) in frg.iter().zip(masks) {
        if f.channels != c || f.height != h || f.width != w {
            return Err(Error::Argument("feature maps in a batch must share a shape".into()));
        }
        if m.height != h || m.width != w {
            return Err(Error::Argument(format!(
                "clothing mask {}x{} does not match feature map {h}x{w}",
                m.height, m.width
            )));
        }
    }
    let p = h * w;
    let n = frg.len();
    let degenerate = masks.iter().all(|m| m.data.iter().all(|&v| v == 0.0));
    if degenerate {
        log::warn!("all clothing masks in the batch are empty; clothing features collapse to the BN shift");
    }
    let masked: Vec<Vec<f64>> = frg
        .iter()
        .zip(masks)
        .map(|(f, m)| {
            let mut d = f.data.clone();
            for chunk in d.chunks_mut(p) {
                chunk.iter_mut().zip(&m.data).for_each(|(v, s)| *v *= s);
            }
            d
        })
        .collect();
    let (mean, var) = match mode {
        BnMode::Train => {
            let count = (n * p) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let s: f64 = masked.iter().map(|d| d[ch * p..(ch + 1) * p].iter().sum::<f64>()).sum();
                mean[ch] = s / count;
                let ss: f64 = masked
                    .iter()
                    .map(|d| d[ch * p..(ch + 1) * p].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                    .sum();
                var[ch] = ss / count;
            }
            let unbias = if n * p > 1 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean[ch];
                bn.running_var[ch] =
                    (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * var[ch] * unbias;
            }
            (mean, var)
        }
        BnMode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(n);
    let mut pooled = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for d in &masked {
        let mut xhat = vec![0.0; c * p];
        let mut pool = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..p {
                let xh = (d[ch * p + i] - mean[ch]) * inv_std[ch];
                xhat[ch * p + i] = xh;
                acc += bn.gamma[ch] * xh + bn.beta[ch];
            }
            pool[ch] = acc / p as f64;
        }
        features.push(l2_normalize(&pool));
        normalized.push(xhat);
        pooled.push(pool);
    }
    Ok(ClothingFeatureOutput {
        features,
        degenerate,
        cache: ClothingFeatureCache {
            masked,
            normalized,
            pooled,
            inv_std,
            mode,
            masks: masks.iter().map(|m| m.data.clone()).collect(),
        },
    })
}

#[derive(Debug, Clone)]
pub struct ClothingFeatureGrads {
    /// Gradient with respect to each input feature map.
    pub features: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn clothing_feature_backward(
    cache: &ClothingFeatureCache,
    bn: &BatchNorm,
    d_features: &[Vec<f64>],
) -> ClothingFeatureGrads {
    let n = cache.masked.len();
    let c = bn.channels();
    let p = cache.masks[0].len();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    // gradient w.r.t. normalized activations, per sample
    let mut dxhat: Vec<Vec<f64>> = Vec::with_capacity(n);
    for s in 0..n {
        let dpool = l2_normalize_backward(&cache.pooled[s], &d_features[s]);
        let mut dx = vec![0.0; c * p];
        for ch in 0..c {
            let g = dpool[ch] / p as f64;
            dbeta[ch] += dpool[ch];
            let xh = &cache.normalized[s][ch * p..(ch + 1) * p];
            dgamma[ch] += g * xh.iter().sum::<f64>();
            dx[ch * p..(ch + 1) * p].fill(g * bn.gamma[ch]);
        }
        dxhat.push(dx);
    }
    let mut dmasked: Vec<Vec<f64>> = vec![vec![0.0; c * p]; n];
    match cache.mode {
        BnMode::Eval => {
            for s in 0..n {
                for ch in 0..c {
                    for i in 0..p {
                        dmasked[s][ch * p + i] = dxhat[s][ch * p + i] * cache.inv_std[ch];
                    }
                }
            }
        }
        BnMode::Train => {
            let count = (n * p) as f64;
            for ch in 0..c {
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for s in 0..n {
                    for i in 0..p {
                        let g = dxhat[s][ch * p + i];
                        sum_d += g;
                        sum_dx += g * cache.normalized[s][ch * p + i];
                    }
                }
                for s in 0..n {
                    for i in 0..p {
                        let idx = ch * p + i;
                        dmasked[s][idx] = cache.inv_std[ch] / count
                            * (count * dxhat[s][idx] - sum_d - cache.normalized[s][idx] * sum_dx);
                    }
                }
            }
        }
    }
    let features = dmasked
        .into_iter()
        .zip(&cache.masks)
        .map(|(mut d, m)| {
            for chunk in d.chunks_mut(p) {
                chunk.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
            d
        })
        .collect();
    ClothingFeatureGrads {
        features,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Linear classifier over pooled features: `logits = weight * x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn from_params(params: &ParamSet, prefix: &str) -> Self {
        let w = params.get(&format!("{prefix}.weight"));
        Self {
            in_dim: w.shape[1],
            out_dim: w.shape[0],
            weight: w.data.clone(),
            bias: params.get(&format!("{prefix}.bias")).data.clone(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| self.bias[o] + dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], x))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityOutput {
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn identity_head(fm: &FeatureMap, head: &LinearHead) -> Result<IdentityOutput> {
    if head.in_dim != fm.channels {
        return Err(Error::Argument(format!(
            "head expects {} channels, feature map has {}",
            head.in_dim, fm.channels
        )));
    }
    if !fm.is_finite() {
        return Err(Error::Numeric("identity head input is not finite".into()));
    }
    let pooled = fm.global_average();
    let logits = head.logits(&pooled);
    Ok(IdentityOutput { pooled, logits })
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Gradient with respect to the feature map (spread uniformly by the pooling).
    pub features: Vec<f64>,
}

/// Backward of [`identity_head`] given gradients on the logits and,
/// optionally, directly on the pooled vector.
pub fn identity_head_backward(
    fm: &FeatureMap,
    head: &LinearHead,
    out: &IdentityOutput,
    d_logits: &[f64],
    d_pooled_extra: Option<&[f64]>,
) -> HeadGrads {
    let mut dw = vec![0.0; head.weight.len()];
    let mut dpool = d_pooled_extra.map_or_else(|| vec![0.0; head.in_dim], |d| d.to_vec());
    for o in 0..head.out_dim {
        let g = d_logits[o];
        if g == 0.0 {
            continue;
        }
        let row = o * head.in_dim;
        for i in 0..head.in_dim {
            dw[row + i] += g * out.pooled[i];
            dpool[i] += g * head.weight[row + i];
        }
    }
    let p = fm.plane();
    let mut dfeat = vec![0.0; fm.data.len()];
    for (ch, chunk) in dfeat.chunks_mut(p).enumerate() {
        chunk.fill(dpool[ch] / p as f64);
    }
    HeadGrads {
        weight: dw,
        bias: d_logits.to_vec(),
        features: dfeat,
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CCREIDCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    backbone: BackboneConfig,
    ikt_kernel_size: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extras: serde_json::Value,
}

/// Named tensors plus the configuration they were built from.
///
/// On disk: 8-byte magic, little-endian `u64` header length, a JSON header
/// (backbone config, attention kernel size, tensor table, free-form extras),
/// then the raw little-endian tensor data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub ikt_kernel_size: usize,
    pub tensors: BTreeMap<String, Tensor>,
    pub extras: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype,
                offset,
            });
            offset += t.numel() * dtype.width();
        }
        let header = CheckpointHeader {
            backbone: self.backbone.clone(),
            ikt_kernel_size: self.ikt_kernel_size,
            tensors: entries,
            extras: self.extras.clone(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + header_bytes.len() + offset);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for v in &t.data {
                match dtype {
                    DType::F32 => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                    DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16 + hlen;
        if bytes.len() < body_start {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let body = &bytes[body_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let width = e.dtype.width();
            let end = e.offset + n * width;
            if end > body.len() {
                return Err(Error::Checkpoint(format!("tensor '{}' runs past end of file", e.name)));
            }
            let raw = &body[e.offset..end];
            let data = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.insert(e.name, Tensor { shape: e.shape, data });
        }
        Ok(Self {
            backbone: header.backbone,
            ikt_kernel_size: header.ikt_kernel_size,
            tensors,
            extras: header.extras,
        })
    }

    /// Lists every tensor whose presence or shape differs from `expected`.
    pub fn shape_mismatches(&self, expected: &BTreeMap<String, Vec<usize>>) -> Vec<String> {
        let mut out = Vec::new();
        for (name, shape) in expected {
            match self.tensors.get(name) {
                None => out.push(format!("{name}: missing (expected {shape:?})")),
                Some(t) if &t.shape != shape => {
                    out.push(format!("{name}: found {:?}, expected {shape:?}", t.shape))
                }
                _ => {}
            }
        }
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                out.push(format!("{name}: unexpected"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(c, h, w, data, Stream::Attention).unwrap()
    }

    #[test]
    fn zero_kernel_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fa = random_map(&mut rng, 5, 4, 3);
        let att = ikt_attention(&fa, &IktParams::zeros(7).unwrap()).unwrap();
        assert!(att.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_increases_with_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fa = random_map(&mut rng, 3, 3, 3);
        let mut p = IktParams::zeros(3).unwrap();
        p.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.1..0.1));
        let mut prev: Option<Vec<f64>> = None;
        for b in [0.0, 5.0, 10.0] {
            p.bias = b;
            let a = ikt_attention(&fa, &p).unwrap().data;
            if let Some(prev) = &prev {
                assert!(a.iter().zip(prev).all(|(x, y)| x > y));
            }
            prev = Some(a);
        }
    }

    #[test]
    fn even_kernel_and_nan_rejected() {
        assert!(IktParams::zeros(4).is_err());
        let mut fa = FeatureMap::new(1, 1, 1, vec![f64::NAN], Stream::Attention).unwrap();
        assert!(matches!(
            ikt_attention(&fa, &IktParams::zeros(3).unwrap()),
            Err(Error::Numeric(_))
        ));
        fa.data[0] = 1.0;
        assert!(ikt_attention(&fa, &IktParams::zeros(3).unwrap()).is_ok());
    }

    #[test]
    fn apply_attention_identity_zero_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fg = random_map(&mut rng, 2, 3, 2);
        let ones = AttentionMap::filled(3, 2, 1.0);
        assert_eq!(apply_attention(&ones, &fg).unwrap().data, fg.data);
        let zeros = AttentionMap::filled(3, 2, 0.0);
        assert!(apply_attention(&zeros, &fg).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(apply_attention(&AttentionMap::filled(2, 2, 1.0), &fg).is_err());
    }

    #[test]
    fn clothing_feature_full_mask_is_normalized_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_map(&mut rng, 4, 2, 2);
        let mut bn = BatchNorm::new(4);
        let out = clothing_feature(
            std::slice::from_ref(&f),
            &[FeatureMask::filled(2, 2, 1.0)],
            &mut bn,
            BnMode::Eval,
        )
        .unwrap();
        let want = l2_normalize(&f.global_average());
        for (a, b) in out.features[0].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clothing_feature_empty_mask_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_map(&mut rng, 4, 2, 2);
        let mut bn = BatchNorm::new(4);
        let out = clothing_feature(&[f], &[FeatureMask::filled(2, 2, 0.0)], &mut bn, BnMode::Eval).unwrap();
        assert!(out.degenerate);
        assert!(out.features[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_argmax_matches_construction() {
        let fm = FeatureMap::new(3, 1, 1, vec![0.0, 1.0, 0.0], Stream::Main).unwrap();
        let mut weight = vec![0.0; 9];
        weight[2 * 3 + 1] = 1.0;
        let head = LinearHead {
            in_dim: 3,
            out_dim: 3,
            weight,
            bias: vec![0.0; 3],
        };
        let out = identity_head(&fm, &head).unwrap();
        let arg = out
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(arg, 2);
        let zero = LinearHead {
            in_dim: 3,
            out_dim: 3,
            weight: vec![0.0; 9],
            bias: vec![0.0; 3],
        };
        assert!(identity_head(&fm, &zero).unwrap().logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_f64_exact_and_f32_lossy() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("a.weight".to_string(), Tensor::from_vec(&[2, 2], vec![0.1, -0.2, 1e-9, 3.0]).unwrap());
        tensors.insert("b".to_string(), Tensor::zeros(&[3]));
        let ck = Checkpoint {
            backbone: BackboneConfig::small_conv(),
            ikt_kernel_size: 7,
            tensors,
            extras: serde_json::json!({"epoch": 3}),
        };
        let p = dir.path().join("x.ckpt");
        ck.save(&p, DType::F64).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        ck.save(&p, DType::F32).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.tensors["a.weight"].data[1], -0.2f32 as f64);
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
