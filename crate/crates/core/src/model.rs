//! Assembly of the two streams, the attention transfer and the clothing
//! feature path into trainable variants, with batch-level forward/backward.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelMap, RegionVocabulary, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::losses::{clothing_contrastive_loss_with_grad, id_loss_with_grad, BatchLabels, LossConfig};
use crate::masking::{apply_pixel_mask, clothing_region_mask, downsample_mask, FeatureMask, DEFAULT_FILL};
use crate::network::{
    apply_attention, apply_attention_backward, clothing_feature, clothing_feature_backward, identity_head,
    identity_head_backward, ikt_attention, ikt_attention_backward, AttentionMap, BatchNorm, BnMode, FeatureMap,
    IktParams, LinearHead, Stream,
};
use crate::nn::{Backbone, BackboneCache, BackboneConfig};
use crate::tensor::{l2_normalize, ParamSet, Tensor};

/// The five assemblies compared in the ablation, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Main stream with identity loss only.
    Baseline,
    /// Adds the attention stream and attention transfer.
    Ikt,
    /// Main stream plus the clothing path and contrastive loss (no attention).
    Cbd,
    /// Full model with every contrastive pair weighted 1.
    IfdCl,
    /// Full model.
    Ifd,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Ikt, Variant::Cbd, Variant::IfdCl, Variant::Ifd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ikt => "ikt",
            Variant::Cbd => "cbd",
            Variant::IfdCl => "ifd-cl",
            Variant::Ifd => "ifd",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ikt => "w/ IKT",
            Variant::Cbd => "w/ CBD",
            Variant::IfdCl => "IFD w/ CL",
            Variant::Ifd => "IFD",
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Ikt | Variant::IfdCl | Variant::Ifd)
    }

    pub fn has_clothing_path(self) -> bool {
        matches!(self, Variant::Cbd | Variant::IfdCl | Variant::Ifd)
    }

    /// Loss settings actually used by this variant.
    pub fn effective_loss(self, base: &LossConfig) -> LossConfig {
        match self {
            Variant::IfdCl => LossConfig {
                divisor: 1.0,
                ..*base
            },
            _ => *base,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant '{s}' (expected baseline, ikt, cbd, ifd-cl or ifd)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    /// Network input `(height, width)`.
    pub input: (usize, usize),
    pub num_classes: usize,
    pub ikt_kernel: usize,
}

/// Network-ready views of one sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Vec<f64>,
    pub masked: Vec<f64>,
    pub clothing_mask: FeatureMask,
    pub identity: u32,
    pub appearance: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Attention stream and its head only.
    AttentionOnly,
    /// Everything the variant contains.
    Joint,
}

/// Loss components of one step; `None` marks terms the variant or phase lacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub id_main: Option<f64>,
    pub id_attn: Option<f64>,
    pub ccl: Option<f64>,
    pub total: f64,
}

pub fn resize_rgb(img: &RgbImage, h: usize, w: usize) -> RgbImage {
    if img.height == h && img.width == w {
        return img.clone();
    }
    let mut out = RgbImage::filled(h, w, 0.0);
    let sy = img.height as f64 / h as f64;
    let sx = img.width as f64 / w as f64;
    for r in 0..h {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for c in 0..w {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            let (a, b, cc, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            let mut px = [0.0; 3];
            for k in 0..3 {
                px[k] = (1.0 - ty) * ((1.0 - tx) * a[k] + tx * b[k]) + ty * ((1.0 - tx) * cc[k] + tx * d[k]);
            }
            out.set_pixel(r, c, px);
        }
    }
    out
}

pub fn resize_labels(labels: &LabelMap, h: usize, w: usize) -> LabelMap {
    if labels.height == h && labels.width == w {
        return labels.clone();
    }
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = ((r as f64 + 0.5) * labels.height as f64 / h as f64) as usize;
        for c in 0..w {
            let sc = ((c as f64 + 0.5) * labels.width as f64 / w as f64) as usize;
            data.push(labels.get(sr.min(labels.height - 1), sc.min(labels.width - 1)));
        }
    }
    LabelMap::new(h, w, data).expect("sized")
}

/// Nearest-neighbour upscaling of an attention map to `height x width` pixels.
pub fn upscale_attention(att: &AttentionMap, height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let ar = (r * att.height / height).min(att.height - 1);
        for c in 0..width {
            let ac = (c * att.width / width).min(att.width - 1);
            out.push(att.data[ar * att.width + ac]);
        }
    }
    out
}

/// Mean upscaled attention over head pixels and over background pixels.
/// `None` when either region is absent from `labels`.
pub fn head_background_means(
    pixels: &[f64],
    labels: &LabelMap,
    vocab: &RegionVocabulary,
) -> Option<(f64, f64)> {
    let head = vocab.head_codes();
    let background = vocab.code("background")?;
    let (mut hs, mut hn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for (v, &code) in pixels.iter().zip(&labels.data) {
        if head.contains(&code) {
            hs += v;
            hn += 1;
        } else if code == background {
            bs += v;
            bn += 1;
        }
    }
    (hn > 0 && bn > 0).then(|| (hs / hn as f64, bs / bn as f64))
}

#[derive(Debug, Clone)]
struct SampleForward {
    fg: Option<FeatureMap>,
    main_cache: Option<BackboneCache>,
    fa: Option<FeatureMap>,
    attn_cache: Option<BackboneCache>,
    att: Option<AttentionMap>,
    frg: Option<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub main: Backbone,
    pub attention: Option<Backbone>,
    pub params: ParamSet,
    /// Non-trainable state (batch-norm running statistics).
    pub buffers: ParamSet,
}

const MAIN: &str = "main";
const ATTN: &str = "attn";
const IKT: &str = "ikt";
const CBD_BN: &str = "cbd.bn";

impl Model {
    /// Initializes every component from its own random stream of `seed`,
    /// so components shared between variants start identical.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.num_classes == 0 {
            return Err(Error::Argument("model needs at least one identity class".into()));
        }
        IktParams::zeros(spec.ikt_kernel)?;
        let main = Backbone::new(&spec.backbone, &format!("{MAIN}.backbone"), spec.input)?;
        let attention = if spec.variant.has_attention() {
            Some(Backbone::new(&spec.backbone, &format!("{ATTN}.backbone"), spec.input)?)
        } else {
            None
        };
        let c = spec.backbone.channels();
        // variance of the usual uniform(-1/sqrt(c), 1/sqrt(c)) linear init
        let head_std = 1.0 / (3.0 * c as f64).sqrt();
        let stream_rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        main.init_params(&mut params, &mut stream_rng(1));
        let mut head_rng = stream_rng(3);
        params.insert(
            format!("{MAIN}.head.weight"),
            Tensor::randn(&[spec.num_classes, c], head_std, &mut head_rng),
        );
        params.insert(format!("{MAIN}.head.bias"), Tensor::zeros(&[spec.num_classes]));
        if let Some(a) = &attention {
            a.init_params(&mut params, &mut stream_rng(2));
            let mut head_rng = stream_rng(4);
            params.insert(
                format!("{ATTN}.head.weight"),
                Tensor::randn(&[spec.num_classes, c], head_std, &mut head_rng),
            );
            params.insert(format!("{ATTN}.head.bias"), Tensor::zeros(&[spec.num_classes]));
            IktParams::zeros(spec.ikt_kernel)?.insert_into(&mut params, IKT);
        }
        if spec.variant.has_clothing_path() {
            BatchNorm::new(c).insert_into(&mut params, &mut buffers, CBD_BN);
        }
        Ok(Self {
            spec,
            main,
            attention,
            params,
            buffers,
        })
    }

    /// Rebuilds a model around existing parameters, checking every name and shape.
    pub fn from_parts(spec: ModelSpec, params: ParamSet, buffers: ParamSet) -> Result<Self> {
        let mut m = Self::new(spec, 0)?;
        let expected = m.params.shapes();
        let mut problems = Vec::new();
        for (name, shape) in &expected {
            match params.try_get(name) {
                None => problems.push(format!("{name}: missing (expected {shape:?})")),
                Some(t) if &t.shape != shape => problems.push(format!("{name}: found {:?}, expected {shape:?}", t.shape)),
                _ => {}
            }
        }
        for name in params.names() {
            if !expected.contains_key(&name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("shape mismatch:\n  {}", problems.join("\n  "))));
        }
        m.params = params;
        for (name, t) in buffers.iter() {
            if m.buffers.contains(name) {
                *m.buffers.get_mut(name) = t.clone();
            }
        }
        Ok(m)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.main.output.1, self.main.output.2)
    }

    /// Resizes to the network input, optionally mirrors, and derives the
    /// masked image and feature-resolution clothing mask.
    pub fn prepare(&self, sample: &Sample, vocab: &RegionVocabulary, flip: bool) -> Result<PreparedSample> {
        let (h, w) = self.spec.input;
        let mut image = resize_rgb(&sample.image, h, w);
        let mut labels = resize_labels(&sample.parsing, h, w);
        if flip {
            image = image.flipped();
            labels = labels.flipped();
        }
        let pixel = clothing_region_mask(&labels, vocab)?;
        let masked = apply_pixel_mask(&image, &pixel, DEFAULT_FILL);
        Ok(PreparedSample {
            image: image.to_chw(),
            masked: masked.to_chw(),
            clothing_mask: downsample_mask(&pixel, self.feature_size())?,
            identity: sample.identity,
            appearance: sample.appearance_id(),
        })
    }

    fn feature_map(&self, data: Vec<f64>, stream: Stream) -> Result<FeatureMap> {
        let (c, h, w) = self.main.output;
        FeatureMap::new(c, h, w, data, stream)
    }

    fn forward_sample(&self, s: &PreparedSample, phase: Phase, keep_cache: bool) -> Result<SampleForward> {
        let mut out = SampleForward {
            fg: None,
            main_cache: None,
            fa: None,
            attn_cache: None,
            att: None,
            frg: None,
        };
        if let Some(a) = &self.attention {
            let (fa, cache) = a.forward(&self.params, &s.masked)?;
            out.fa = Some(self.feature_map(fa, Stream::Attention)?);
            out.attn_cache = keep_cache.then_some(cache);
        }
        if phase == Phase::AttentionOnly {
            return Ok(out);
        }
        let (fg, cache) = self.main.forward(&self.params, &s.image)?;
        let fg = self.feature_map(fg, Stream::Main)?;
        out.main_cache = keep_cache.then_some(cache);
        if let Some(fa) = &out.fa {
            let ikt = IktParams::from_params(&self.params, IKT)?;
            let att = ikt_attention(fa, &ikt)?;
            out.frg = Some(apply_attention(&att, &fg)?);
            out.att = Some(att);
        } else {
            out.frg = Some(fg.clone());
        }
        out.fg = Some(fg);
        Ok(out)
    }

    /// Spatial attention map for one prepared sample (`None` without an attention stream).
    pub fn attention_map(&self, s: &PreparedSample) -> Result<Option<AttentionMap>> {
        Ok(self.forward_sample(s, Phase::Joint, false)?.att)
    }

    /// Retrieval feature: L2-normalized global average of the (attended) main-stream map.
    pub fn embed(&self, s: &PreparedSample) -> Result<Vec<f64>> {
        let f = self.forward_sample(s, Phase::Joint, false)?;
        let frg = f.frg.expect("joint forward produces main features");
        if !frg.is_finite() {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        Ok(l2_normalize(&frg.global_average()))
    }

    /// Identity logits of the attention stream, for variants that have one.
    pub fn attention_logits(&self, s: &PreparedSample) -> Result<Option<Vec<f64>>> {
        if self.attention.is_none() {
            return Ok(None);
        }
        let f = self.forward_sample(s, Phase::AttentionOnly, false)?;
        let head = LinearHead::from_params(&self.params, &format!("{ATTN}.head"));
        let out = identity_head(f.fa.as_ref().expect("attention forward"), &head)?;
        Ok(Some(out.logits))
    }

    /// Forward and backward over one batch. Returns the loss decomposition
    /// and gradients for every parameter (zeros where no gradient flows).
    /// Batch-norm running statistics are updated as a side effect.
    pub fn loss_and_grads(
        &mut self,
        batch: &[PreparedSample],
        classes: &[usize],
        loss_cfg: &LossConfig,
        phase: Phase,
    ) -> Result<(LossParts, ParamSet)> {
        if batch.is_empty() || batch.len() != classes.len() {
            return Err(Error::Argument("batch and class labels must be non-empty and aligned".into()));
        }
        if phase == Phase::AttentionOnly && self.attention.is_none() {
            return Err(Error::Argument(format!(
                "variant {} has no attention stream to pretrain",
                self.spec.variant.name()
            )));
        }
        let cfg = self.spec.variant.effective_loss(loss_cfg);
        let mut grads = self.params.zeros_like();
        let fwd: Vec<SampleForward> = batch
            .iter()
            .map(|s| self.forward_sample(s, phase, true))
            .collect::<Result<_>>()?;
        let n = batch.len();
        let (c, fh, fw) = self.main.output;
        let plane = fh * fw;

        // attention-stream identity loss
        let mut d_fa: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut id_attn = None;
        if self.attention.is_some() {
            let head = LinearHead::from_params(&self.params, &format!("{ATTN}.head"));
            let outs: Vec<_> = fwd
                .iter()
                .map(|f| identity_head(f.fa.as_ref().expect("attention forward"), &head))
                .collect::<Result<_>>()?;
            let logits: Vec<Vec<f64>> = outs.iter().map(|o| o.logits.clone()).collect();
            let (loss, dlogits) = id_loss_with_grad(&logits, classes)?;
            id_attn = Some(loss);
            for i in 0..n {
                let g = identity_head_backward(fwd[i].fa.as_ref().expect("fa"), &head, &outs[i], &dlogits[i], None);
                accumulate(&mut grads, &format!("{ATTN}.head.weight"), &g.weight);
                accumulate(&mut grads, &format!("{ATTN}.head.bias"), &g.bias);
                d_fa[i] = g.features;
            }
        }

        let mut id_main = None;
        let mut ccl = None;
        let mut d_frg: Vec<Vec<f64>> = vec![vec![0.0; c * plane]; n];
        if phase == Phase::Joint {
            let head = LinearHead::from_params(&self.params, &format!("{MAIN}.head"));
            let outs: Vec<_> = fwd
                .iter()
                .map(|f| identity_head(f.frg.as_ref().expect("frg"), &head))
                .collect::<Result<_>>()?;
            let logits: Vec<Vec<f64>> = outs.iter().map(|o| o.logits.clone()).collect();
            let (loss, dlogits) = id_loss_with_grad(&logits, classes)?;
            id_main = Some(loss);
            for i in 0..n {
                let g = identity_head_backward(fwd[i].frg.as_ref().expect("frg"), &head, &outs[i], &dlogits[i], None);
                accumulate(&mut grads, &format!("{MAIN}.head.weight"), &g.weight);
                accumulate(&mut grads, &format!("{MAIN}.head.bias"), &g.bias);
                d_frg[i] = g.features;
            }

            if self.spec.variant.has_clothing_path() {
                let mut bn = BatchNorm::from_params(&self.params, &self.buffers, CBD_BN);
                let maps: Vec<FeatureMap> = fwd.iter().map(|f| f.frg.clone().expect("frg")).collect();
                let masks: Vec<FeatureMask> = batch.iter().map(|s| s.clothing_mask.clone()).collect();
                let out = clothing_feature(&maps, &masks, &mut bn, BnMode::Train)?;
                let labels = BatchLabels::new(
                    batch.iter().map(|s| s.identity).collect(),
                    batch.iter().map(|s| s.appearance).collect(),
                )?;
                let (loss, dfeat) = clothing_contrastive_loss_with_grad(&out.features, &labels, &cfg)?;
                ccl = Some(loss);
                let dfeat: Vec<Vec<f64>> = dfeat
                    .into_iter()
                    .map(|v| v.into_iter().map(|x| x * cfg.lambda).collect())
                    .collect();
                let g = clothing_feature_backward(&out.cache, &bn, &dfeat);
                accumulate(&mut grads, &format!("{CBD_BN}.gamma"), &g.gamma);
                accumulate(&mut grads, &format!("{CBD_BN}.beta"), &g.beta);
                for (d, gf) in d_frg.iter_mut().zip(&g.features) {
                    d.iter_mut().zip(gf).for_each(|(a, b)| *a += b);
                }
                self.buffers.get_mut(&format!("{CBD_BN}.running_mean")).data = bn.running_mean;
                self.buffers.get_mut(&format!("{CBD_BN}.running_var")).data = bn.running_var;
            }

            // through the attention product into both streams
            for i in 0..n {
                let f = &fwd[i];
                let d_fg = if let (Some(att), Some(fa)) = (&f.att, &f.fa) {
                    let fg = f.fg.as_ref().expect("fg");
                    let (d_att, d_fg) = apply_attention_backward(att, fg, &d_frg[i]);
                    let ikt = IktParams::from_params(&self.params, IKT)?;
                    let g = ikt_attention_backward(fa, &ikt, att, &d_att);
                    accumulate(&mut grads, &format!("{IKT}.weight"), &g.weight);
                    accumulate(&mut grads, &format!("{IKT}.bias"), &[g.bias]);
                    d_fa[i].iter_mut().zip(&g.features).for_each(|(a, b)| *a += b);
                    d_fg
                } else {
                    std::mem::take(&mut d_frg[i])
                };
                self.main
                    .backward(&self.params, f.main_cache.as_ref().expect("cache"), d_fg, &mut grads);
            }
        }

        if let Some(a) = &self.attention {
            for (f, d) in fwd.iter().zip(d_fa) {
                a.backward(&self.params, f.attn_cache.as_ref().expect("cache"), d, &mut grads);
            }
        }

        let total = crate::losses::total_loss(
            id_main.unwrap_or(0.0),
            id_attn.unwrap_or(0.0),
            ccl.unwrap_or(0.0),
            &cfg,
        );
        Ok((
            LossParts {
                id_main,
                id_attn,
                ccl,
                total,
            },
            grads,
        ))
    }
}

fn accumulate(grads: &mut ParamSet, name: &str, g: &[f64]) {
    grads
        .get_mut(name)
        .data
        .iter_mut()
        .zip(g)
        .for_each(|(a, b)| *a += b);
}
