//! Layer kernels with hand-written backward passes and the backbone graphs
//! built from them. Activations are channel-major (`C x H x W`) buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        (in_h, in_w): (usize, usize),
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Argument("kernel and stride must be positive".into()));
        }
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::Argument(format!(
                "input {in_h}x{in_w} is smaller than the {k}x{k} kernel"
            )));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c, self.k, self.k]
    }
}

pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.positions();
    let mut col = vec![0.0; g.rows() * np];
    for ic in 0..g.in_c {
        let plane = &input[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ic * g.k + kh) * g.k + kw;
                let dst = &mut col[row * np..(row + 1) * np];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[oh * g.out_w + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column buffer back onto an input-shaped gradient.
pub fn col2im(dcol: &[f64], g: &ConvGeom, dinput: &mut [f64]) {
    let np = g.positions();
    for ic in 0..g.in_c {
        let plane = &mut dinput[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ic * g.k + kh) * g.k + kw;
                let src = &dcol[row * np..(row + 1) * np];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            plane[ih as usize * g.in_w + iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, im2col buffer)`.
pub fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let col = im2col(input, g);
    let np = g.positions();
    let mut out = vec![0.0; g.out_c * np];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(np).enumerate() {
            chunk.fill(b[oc]);
        }
    }
    gemm(
        g.out_c,
        g.rows(),
        np,
        weight,
        (g.rows(), 1),
        &col,
        (np, 1),
        1.0,
        &mut out,
    );
    (out, col)
}

/// Accumulates weight/bias gradients and returns the input gradient when asked.
pub fn conv2d_backward(
    dout: &[f64],
    col: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
    need_input: bool,
) -> Option<Vec<f64>> {
    let np = g.positions();
    let rows = g.rows();
    // dW[oc, r] += sum_p dout[oc, p] * col[r, p]
    gemm(g.out_c, np, rows, dout, (np, 1), col, (1, np), 1.0, dweight);
    if let Some(db) = dbias {
        for (oc, chunk) in dout.chunks(np).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
    }
    if !need_input {
        return None;
    }
    // dcol[r, p] = sum_oc W[oc, r] * dout[oc, p]
    let mut dcol = vec![0.0; rows * np];
    gemm(rows, g.out_c, np, weight, (1, rows), dout, (np, 1), 0.0, &mut dcol);
    let mut dinput = vec![0.0; g.in_c * g.in_h * g.in_w];
    col2im(&dcol, g, &mut dinput);
    Some(dinput)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(c: usize, (in_h, in_w): (usize, usize), k: usize, stride: usize, pad: usize) -> Result<Self> {
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::Argument(format!(
                "input {in_h}x{in_w} is smaller than the {k}x{k} pooling window"
            )));
        }
        Ok(Self {
            c,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }
}

/// Spatial max pooling; returns output and the flat input index of each maximum.
pub fn maxpool_forward(input: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.c * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for c in 0..g.c {
        let base = c * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for kh in 0..g.k {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    for kw in 0..g.k {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        let i = base + ih as usize * g.in_w + iw as usize;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SmallConv,
    Resnet50,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-conv" => Ok(Self::SmallConv),
            "resnet50" => Ok(Self::Resnet50),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Backbone description shared by both streams.
///
/// `small-conv`: one 3x3 conv + ReLU per stage, the first `log2(output_stride)`
/// stages with stride 2. `resnet50`: bottleneck ResNet with `blocks` per stage,
/// `widths` as bottleneck widths (output channels are 4x), per-channel affine
/// normalization in place of batch statistics, and the last stage's stride
/// chosen to reach `output_stride` (16 or 32).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub output_stride: usize,
    #[serde(default)]
    pub blocks: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::small_conv()
    }
}

impl BackboneConfig {
    pub fn small_conv() -> Self {
        Self {
            architecture: Architecture::SmallConv,
            widths: vec![16, 32, 64, 64],
            output_stride: 8,
            blocks: vec![],
        }
    }

    pub fn resnet50() -> Self {
        Self {
            architecture: Architecture::Resnet50,
            widths: vec![64, 128, 256, 512],
            output_stride: 16,
            blocks: vec![3, 4, 6, 3],
        }
    }

    /// Feature channels `C` of the final map.
    pub fn channels(&self) -> usize {
        let last = self.widths.last().copied().unwrap_or(0);
        match self.architecture {
            Architecture::SmallConv => last,
            Architecture::Resnet50 => 4 * last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("backbone widths must be non-empty and positive".into()));
        }
        if !self.output_stride.is_power_of_two() {
            return Err(Error::Config("output stride must be a power of two".into()));
        }
        match self.architecture {
            Architecture::SmallConv => {
                let halvings = self.output_stride.trailing_zeros() as usize;
                if halvings > self.widths.len() {
                    return Err(Error::Config(format!(
                        "output stride {} needs at least {halvings} stages",
                        self.output_stride
                    )));
                }
            }
            Architecture::Resnet50 => {
                if self.widths.len() != 4 || self.blocks.len() != 4 {
                    return Err(Error::Config("resnet needs 4 widths and 4 block counts".into()));
                }
                if self.output_stride != 16 && self.output_stride != 32 {
                    return Err(Error::Config("resnet output stride must be 16 or 32".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Conv {
        name: String,
        geom: ConvGeom,
        bias: bool,
    },
    /// Per-channel `x * weight + bias`.
    Affine {
        name: String,
        channels: usize,
        plane: usize,
    },
    Relu,
    MaxPool(PoolGeom),
    Bottleneck {
        main: Vec<Node>,
        shortcut: Vec<Node>,
    },
}

#[derive(Debug, Clone)]
enum NodeCache {
    Conv(Vec<f64>),
    Affine(Vec<f64>),
    Relu(Vec<f64>),
    MaxPool(Vec<usize>),
    Bottleneck {
        main: Vec<NodeCache>,
        shortcut: Vec<NodeCache>,
        out: Vec<f64>,
    },
}

/// Activations saved by a backbone forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    nodes: Vec<NodeCache>,
}

/// A feature extractor bound to one input size and one parameter prefix.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub prefix: String,
    pub input: (usize, usize),
    pub output: (usize, usize, usize),
    nodes: Vec<Node>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, prefix: &str, input: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let os = config.output_stride;
        if input.0 < os || input.1 < os || input.0 % os != 0 || input.1 % os != 0 {
            return Err(Error::Argument(format!(
                "input {}x{} must be a positive multiple of the output stride {os}",
                input.0, input.1
            )));
        }
        let (nodes, output) = match config.architecture {
            Architecture::SmallConv => small_conv_nodes(config, prefix, input)?,
            Architecture::Resnet50 => resnet_nodes(config, prefix, input)?,
        };
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            input,
            output,
            nodes,
        })
    }

    /// Adds freshly initialized parameters (He-normal convs, unit affines).
    pub fn init_params<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) {
        fn visit<R: Rng>(nodes: &[Node], params: &mut ParamSet, rng: &mut R) {
            for n in nodes {
                match n {
                    Node::Conv { name, geom, bias } => {
                        let fan_in = geom.rows() as f64;
                        params.insert(
                            format!("{name}.weight"),
                            Tensor::randn(&geom.weight_shape(), (2.0 / fan_in).sqrt(), rng),
                        );
                        if *bias {
                            params.insert(format!("{name}.bias"), Tensor::zeros(&[geom.out_c]));
                        }
                    }
                    Node::Affine { name, channels, .. } => {
                        params.insert(format!("{name}.weight"), Tensor::full(&[*channels], 1.0));
                        params.insert(format!("{name}.bias"), Tensor::zeros(&[*channels]));
                    }
                    Node::Bottleneck { main, shortcut } => {
                        visit(main, params, rng);
                        visit(shortcut, params, rng);
                    }
                    Node::Relu | Node::MaxPool(_) => {}
                }
            }
        }
        visit(&self.nodes, params, rng);
    }

    pub fn input_len(&self) -> usize {
        3 * self.input.0 * self.input.1
    }

    /// Runs the backbone on a `3 x H x W` image, returning the `C x h x w` map.
    pub fn forward(&self, params: &ParamSet, image_chw: &[f64]) -> Result<(Vec<f64>, BackboneCache)> {
        if image_chw.len() != self.input_len() {
            return Err(Error::Argument(format!(
                "backbone expects a 3x{}x{} image, got {} values",
                self.input.0,
                self.input.1,
                image_chw.len()
            )));
        }
        let (out, nodes) = run_forward(&self.nodes, params, image_chw.to_vec());
        Ok((out, BackboneCache { nodes }))
    }

    /// Accumulates parameter gradients into `grads`; the image gradient is not formed.
    pub fn backward(&self, params: &ParamSet, cache: &BackboneCache, dout: Vec<f64>, grads: &mut ParamSet) {
        run_backward(&self.nodes, &cache.nodes, params, dout, grads, false);
    }
}

fn small_conv_nodes(
    config: &BackboneConfig,
    prefix: &str,
    input: (usize, usize),
) -> Result<(Vec<Node>, (usize, usize, usize))> {
    let halvings = config.output_stride.trailing_zeros() as usize;
    let mut nodes = Vec::new();
    let (mut c, mut h, mut w) = (3, input.0, input.1);
    for (i, &width) in config.widths.iter().enumerate() {
        let stride = if i < halvings { 2 } else { 1 };
        let geom = ConvGeom::new(c, (h, w), width, 3, stride, 1)?;
        nodes.push(Node::Conv {
            name: format!("{prefix}.stage{i}.conv"),
            geom,
            bias: true,
        });
        nodes.push(Node::Relu);
        (c, h, w) = (width, geom.out_h, geom.out_w);
    }
    Ok((nodes, (c, h, w)))
}

fn resnet_nodes(
    config: &BackboneConfig,
    prefix: &str,
    input: (usize, usize),
) -> Result<(Vec<Node>, (usize, usize, usize))> {
    let mut nodes = Vec::new();
    let stem = ConvGeom::new(3, input, config.widths[0], 7, 2, 3)?;
    nodes.push(Node::Conv {
        name: format!("{prefix}.stem.conv"),
        geom: stem,
        bias: false,
    });
    nodes.push(Node::Affine {
        name: format!("{prefix}.stem.bn"),
        channels: stem.out_c,
        plane: stem.positions(),
    });
    nodes.push(Node::Relu);
    let pool = PoolGeom::new(stem.out_c, (stem.out_h, stem.out_w), 3, 2, 1)?;
    nodes.push(Node::MaxPool(pool));
    let (mut c, mut h, mut w) = (stem.out_c, pool.out_h, pool.out_w);
    let last_stride = if config.output_stride == 16 { 1 } else { 2 };
    for (li, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
        let stage_stride = match li {
            0 => 1,
            3 => last_stride,
            _ => 2,
        };
        for b in 0..count {
            let stride = if b == 0 { stage_stride } else { 1 };
            let name = format!("{prefix}.layer{}.{b}", li + 1);
            let out_c = 4 * width;
            let conv1 = ConvGeom::new(c, (h, w), width, 1, 1, 0)?;
            let conv2 = ConvGeom::new(width, (h, w), width, 3, stride, 1)?;
            let conv3 = ConvGeom::new(width, (conv2.out_h, conv2.out_w), out_c, 1, 1, 0)?;
            let affine = |n: &str, g: &ConvGeom| Node::Affine {
                name: format!("{name}.{n}"),
                channels: g.out_c,
                plane: g.positions(),
            };
            let conv = |n: &str, g: ConvGeom| Node::Conv {
                name: format!("{name}.{n}"),
                geom: g,
                bias: false,
            };
            let main = vec![
                conv("conv1", conv1),
                affine("bn1", &conv1),
                Node::Relu,
                conv("conv2", conv2),
                affine("bn2", &conv2),
                Node::Relu,
                conv("conv3", conv3),
                affine("bn3", &conv3),
            ];
            let shortcut = if stride != 1 || c != out_c {
                let down = ConvGeom::new(c, (h, w), out_c, 1, stride, 0)?;
                vec![conv("downsample.conv", down), affine("downsample.bn", &down)]
            } else {
                vec![]
            };
            nodes.push(Node::Bottleneck { main, shortcut });
            (c, h, w) = (out_c, conv2.out_h, conv2.out_w);
        }
    }
    Ok((nodes, (c, h, w)))
}

fn run_forward(nodes: &[Node], params: &ParamSet, mut x: Vec<f64>) -> (Vec<f64>, Vec<NodeCache>) {
    let mut caches = Vec::with_capacity(nodes.len());
    for node in nodes {
        match node {
            Node::Conv { name, geom, bias } => {
                let w = &params.get(&format!("{name}.weight")).data;
                let b = bias.then(|| params.get(&format!("{name}.bias")).data.as_slice());
                let (out, col) = conv2d_forward(&x, w, b, geom);
                caches.push(NodeCache::Conv(col));
                x = out;
            }
            Node::Affine { name, plane, .. } => {
                let w = &params.get(&format!("{name}.weight")).data;
                let b = &params.get(&format!("{name}.bias")).data;
                let input = x.clone();
                for (c, chunk) in x.chunks_mut(*plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = *v * w[c] + b[c]);
                }
                caches.push(NodeCache::Affine(input));
            }
            Node::Relu => {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
                caches.push(NodeCache::Relu(x.clone()));
            }
            Node::MaxPool(g) => {
                let (out, arg) = maxpool_forward(&x, g);
                caches.push(NodeCache::MaxPool(arg));
                x = out;
            }
            Node::Bottleneck { main, shortcut } => {
                let (mut y, main_c) = run_forward(main, params, x.clone());
                let (s, short_c) = if shortcut.is_empty() {
                    (x, vec![])
                } else {
                    run_forward(shortcut, params, x)
                };
                y.iter_mut().zip(&s).for_each(|(a, b)| *a = (*a + b).max(0.0));
                caches.push(NodeCache::Bottleneck {
                    main: main_c,
                    shortcut: short_c,
                    out: y.clone(),
                });
                x = y;
            }
        }
    }
    (x, caches)
}

fn run_backward(
    nodes: &[Node],
    caches: &[NodeCache],
    params: &ParamSet,
    mut dy: Vec<f64>,
    grads: &mut ParamSet,
    need_input: bool,
) -> Vec<f64> {
    for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        let need = need_input || i > 0;
        match (node, cache) {
            (Node::Conv { name, geom, bias }, NodeCache::Conv(col)) => {
                let w = &params.get(&format!("{name}.weight")).data;
                let mut dw = std::mem::take(&mut grads.get_mut(&format!("{name}.weight")).data);
                let dx = if *bias {
                    let mut db = std::mem::take(&mut grads.get_mut(&format!("{name}.bias")).data);
                    let dx = conv2d_backward(&dy, col, w, geom, &mut dw, Some(&mut db), need);
                    grads.get_mut(&format!("{name}.bias")).data = db;
                    dx
                } else {
                    conv2d_backward(&dy, col, w, geom, &mut dw, None, need)
                };
                grads.get_mut(&format!("{name}.weight")).data = dw;
                match dx {
                    Some(d) => dy = d,
                    None => return Vec::new(),
                }
            }
            (Node::Affine { name, plane, .. }, NodeCache::Affine(input)) => {
                let w = params.get(&format!("{name}.weight")).data.clone();
                {
                    let dw = &mut grads.get_mut(&format!("{name}.weight")).data;
                    for (c, (g, x)) in dy.chunks(*plane).zip(input.chunks(*plane)).enumerate() {
                        dw[c] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                {
                    let db = &mut grads.get_mut(&format!("{name}.bias")).data;
                    for (c, g) in dy.chunks(*plane).enumerate() {
                        db[c] += g.iter().sum::<f64>();
                    }
                }
                for (c, chunk) in dy.chunks_mut(*plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v *= w[c]);
                }
            }
            (Node::Relu, NodeCache::Relu(out)) => {
                dy.iter_mut().zip(out).for_each(|(g, o)| {
                    if *o <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            (Node::MaxPool(g), NodeCache::MaxPool(arg)) => {
                let mut dx = vec![0.0; g.c * g.in_h * g.in_w];
                for (o, &src) in arg.iter().enumerate() {
                    if src != usize::MAX {
                        dx[src] += dy[o];
                    }
                }
                dy = dx;
            }
            (
                Node::Bottleneck { main, shortcut },
                NodeCache::Bottleneck {
                    main: mc,
                    shortcut: sc,
                    out,
                },
            ) => {
                dy.iter_mut().zip(out).for_each(|(g, o)| {
                    if *o <= 0.0 {
                        *g = 0.0
                    }
                });
                let d_short = if shortcut.is_empty() {
                    dy.clone()
                } else {
                    run_backward(shortcut, sc, params, dy.clone(), grads, need)
                };
                let mut d_main = run_backward(main, mc, params, dy, grads, need);
                if !need {
                    return Vec::new();
                }
                d_main.iter_mut().zip(&d_short).for_each(|(a, b)| *a += b);
                dy = d_main;
            }
            _ => unreachable!("cache does not match node"),
        }
    }
    dy
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(input: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.out_c * g.positions()];
        for oc in 0..g.out_c {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = b[oc];
                    for ic in 0..g.in_c {
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < g.in_h && (iw as usize) < g.in_w {
                                    acc += w[((oc * g.in_c + ic) * g.k + kh) * g.k + kw]
                                        * input[(ic * g.in_h + ih as usize) * g.in_w + iw as usize];
                                }
                            }
                        }
                    }
                    out[(oc * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 3, 7), (2, 0, 1)] {
            let g = ConvGeom::new(3, (9, 6), 4, k, stride, pad).unwrap();
            let x = Tensor::randn(&[3 * 54], 1.0, &mut rng).data;
            let w = Tensor::randn(&g.weight_shape(), 1.0, &mut rng).data;
            let b = Tensor::randn(&[4], 1.0, &mut rng).data;
            let (out, _) = conv2d_forward(&x, &w, Some(&b), &g);
            let want = naive_conv(&x, &w, &b, &g);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn small_conv_shape_arithmetic() {
        let cfg = BackboneConfig::small_conv();
        let bb = Backbone::new(&cfg, "main.backbone", (64, 32)).unwrap();
        assert_eq!(bb.output, (64, 8, 4));
        assert!(Backbone::new(&cfg, "m", (60, 32)).is_err());
        assert!(Backbone::new(&cfg, "m", (4, 4)).is_err());
    }

    #[test]
    fn resnet50_layout() {
        let cfg = BackboneConfig::resnet50();
        let bb = Backbone::new(&cfg, "main.backbone", (64, 32)).unwrap();
        assert_eq!(bb.output, (2048, 4, 2));
        let mut p = ParamSet::new();
        bb.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        let convs = p.names().iter().filter(|n| n.ends_with("conv.weight") || n.contains(".conv")).count();
        // 1 stem + 16 blocks x 3 + 4 projection shortcuts
        assert_eq!(convs, 53);
        let n: usize = p.iter().map(|(_, t)| t.numel()).sum();
        // ResNet-50 without the fc layer and with affine-only normalization
        assert_eq!(n, 23_508_032);
    }
}
