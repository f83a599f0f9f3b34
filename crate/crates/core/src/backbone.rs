//! Residual-family feature pyramid encoder, fusion bottleneck and reversed
//! decoder.
//!
//! Parameter names follow the torchvision layout (`conv1`, `bn1`,
//! `layer1.0.conv1`, `layer1.0.downsample.0`, ...) so converted ImageNet
//! weights load without renaming. Only the first three residual stages are
//! built for the encoder.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, BatchNorm2d, BnCtx, BnPolicy, Builder, Conv2d, ConvTranspose2d, ParamStore};

pub const STAGE_STRIDES: [usize; 3] = [4, 8, 16];
/// Spatial stride of the bottleneck latent.
pub const LATENT_STRIDE: usize = 32;

/// Supported encoder architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    Resnet18,
    Resnet34,
    Resnet50,
    WideResnet50,
}

impl BackboneId {
    pub const ALL: [BackboneId; 4] = [
        BackboneId::Resnet18,
        BackboneId::Resnet34,
        BackboneId::Resnet50,
        BackboneId::WideResnet50,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneId::Resnet18 => "resnet18",
            BackboneId::Resnet34 => "resnet34",
            BackboneId::Resnet50 => "resnet50",
            BackboneId::WideResnet50 => "wide_resnet50",
        }
    }

    fn block(self) -> BlockKind {
        match self {
            BackboneId::Resnet18 | BackboneId::Resnet34 => BlockKind::Basic,
            BackboneId::Resnet50 | BackboneId::WideResnet50 => BlockKind::Bottleneck,
        }
    }

    fn encoder_blocks(self) -> [usize; 3] {
        match self {
            BackboneId::Resnet18 => [2, 2, 2],
            _ => [3, 4, 6],
        }
    }

    /// Decoder layers in emission order (deepest first).
    fn decoder_blocks(self) -> [usize; 3] {
        match self {
            BackboneId::Resnet18 => [2, 2, 2],
            _ => [3, 4, 6],
        }
    }

    fn fusion_blocks(self) -> usize {
        match self {
            BackboneId::Resnet18 => 2,
            _ => 3,
        }
    }

    fn width_factor(self) -> usize {
        match self {
            BackboneId::WideResnet50 => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(BackboneId::Resnet18),
            "resnet34" => Ok(BackboneId::Resnet34),
            "resnet50" => Ok(BackboneId::Resnet50),
            "wide_resnet50" | "wide_resnet50_2" => Ok(BackboneId::WideResnet50),
            other => Err(Error::Config(format!(
                "unknown backbone '{other}' (expected one of resnet18, resnet34, resnet50, wide_resnet50)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Architecture plus channel width. `base_channels` is 64 for the standard
/// networks; smaller values give narrow variants of the same topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: BackboneId,
    pub base_channels: usize,
}

impl BackboneSpec {
    pub fn new(id: BackboneId) -> Self {
        BackboneSpec {
            id,
            base_channels: 64,
        }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    fn expansion(&self) -> usize {
        self.id.block().expansion()
    }

    /// Channels of encoder stages 1..3.
    pub fn stage_channels(&self) -> [usize; 3] {
        let c = self.base_channels * self.expansion();
        [c, 2 * c, 4 * c]
    }

    pub fn latent_channels(&self) -> usize {
        8 * self.base_channels * self.expansion()
    }

    fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Three per-stage feature maps, each batched as (B, C, H, W).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.len() != 3 {
            return Err(Error::Shape(format!(
                "feature pyramid needs 3 stages, got {}",
                stages.len()
            )));
        }
        let mut prev: Option<(usize, usize, usize)> = None;
        for (k, s) in stages.iter().enumerate() {
            let (b, _, h, w) = s.dims4().map_err(|_| {
                Error::Shape(format!("stage {} must be (B, C, H, W), got {:?}", k + 1, s.dims()))
            })?;
            if let Some((pb, ph, pw)) = prev {
                if pb != b || ph != 2 * h || pw != 2 * w {
                    return Err(Error::Shape(format!(
                        "stage {} spatial size {h}x{w} does not halve previous {ph}x{pw}",
                        k + 1
                    )));
                }
            }
            prev = Some((b, h, w));
        }
        Ok(FeaturePyramid { stages })
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn stage(&self, k: usize) -> &Tensor {
        &self.stages[k]
    }

    pub fn strides(&self) -> [usize; 3] {
        STAGE_STRIDES
    }

    pub fn batch_size(&self) -> usize {
        self.stages[0].dims()[0]
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|s| s.dims().to_vec()).collect()
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            stages: self.stages.iter().map(Tensor::detach).collect(),
        }
    }
}

impl From<FeaturePyramid> for Vec<Tensor> {
    fn from(p: FeaturePyramid) -> Self {
        p.stages
    }
}

#[derive(Debug, Clone)]
enum ConvOp {
    Conv(Conv2d),
    Up(ConvTranspose2d),
}

impl ConvOp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ConvOp::Conv(c) => c.forward(x),
            ConvOp::Up(c) => c.forward(x),
        }
    }
}

/// Residual block: conv/bn pairs with ReLU between them, a projection
/// shortcut when shapes change, and a final ReLU after the sum.
#[derive(Debug, Clone)]
struct ResBlock {
    body: Vec<(ConvOp, BatchNorm2d)>,
    shortcut: Option<(ConvOp, BatchNorm2d)>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, ctx: BnCtx) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.body.len() - 1;
        for (i, (conv, bn)) in self.body.iter().enumerate() {
            h = bn.forward(&conv.forward(&h)?, ctx)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let identity = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, ctx)?,
            None => x.clone(),
        };
        Ok((h + identity)?.relu()?)
    }
}

fn conv_bn(
    b: &mut Builder<'_>,
    conv_name: &str,
    bn_name: &str,
    op: impl FnOnce(&mut Builder<'_>) -> Result<ConvOp>,
    out_ch: usize,
) -> Result<(ConvOp, BatchNorm2d)> {
    let conv = op(&mut b.pp(conv_name))?;
    let bn = BatchNorm2d::new(&mut b.pp(bn_name), out_ch)?;
    Ok((conv, bn))
}

/// Encoder-style block (torchvision BasicBlock / Bottleneck).
fn down_block(
    b: &mut Builder<'_>,
    kind: BlockKind,
    in_ch: usize,
    planes: usize,
    width_factor: usize,
    stride: usize,
) -> Result<ResBlock> {
    let out_ch = planes * kind.expansion();
    let body = match kind {
        BlockKind::Basic => vec![
            conv_bn(b, "conv1", "bn1", |b| Ok(ConvOp::Conv(Conv2d::new(b, in_ch, planes, 3, stride, 1)?)), planes)?,
            conv_bn(b, "conv2", "bn2", |b| Ok(ConvOp::Conv(Conv2d::new(b, planes, planes, 3, 1, 1)?)), planes)?,
        ],
        BlockKind::Bottleneck => {
            let width = planes * width_factor;
            vec![
                conv_bn(b, "conv1", "bn1", |b| Ok(ConvOp::Conv(Conv2d::new(b, in_ch, width, 1, 1, 0)?)), width)?,
                conv_bn(b, "conv2", "bn2", |b| Ok(ConvOp::Conv(Conv2d::new(b, width, width, 3, stride, 1)?)), width)?,
                conv_bn(b, "conv3", "bn3", |b| Ok(ConvOp::Conv(Conv2d::new(b, width, out_ch, 1, 1, 0)?)), out_ch)?,
            ]
        }
    };
    let shortcut = if stride != 1 || in_ch != out_ch {
        Some(conv_bn(
            b,
            "downsample.0",
            "downsample.1",
            |b| Ok(ConvOp::Conv(Conv2d::new(b, in_ch, out_ch, 1, stride, 0)?)),
            out_ch,
        )?)
    } else {
        None
    };
    Ok(ResBlock { body, shortcut })
}

/// Decoder block: the stride-2 convolution of the encoder block becomes a
/// 2x2 stride-2 transposed convolution.
fn up_block(
    b: &mut Builder<'_>,
    kind: BlockKind,
    in_ch: usize,
    planes: usize,
    width_factor: usize,
    stride: usize,
) -> Result<ResBlock> {
    let out_ch = planes * kind.expansion();
    let spatial = |b: &mut Builder<'_>, i: usize, o: usize| -> Result<ConvOp> {
        if stride == 2 {
            Ok(ConvOp::Up(ConvTranspose2d::new(b, i, o, 2)?))
        } else {
            Ok(ConvOp::Conv(Conv2d::new(b, i, o, 3, 1, 1)?))
        }
    };
    let body = match kind {
        BlockKind::Basic => vec![
            conv_bn(b, "conv1", "bn1", |b| spatial(b, in_ch, planes), planes)?,
            conv_bn(b, "conv2", "bn2", |b| Ok(ConvOp::Conv(Conv2d::new(b, planes, planes, 3, 1, 1)?)), planes)?,
        ],
        BlockKind::Bottleneck => {
            let width = planes * width_factor;
            vec![
                conv_bn(b, "conv1", "bn1", |b| Ok(ConvOp::Conv(Conv2d::new(b, in_ch, width, 1, 1, 0)?)), width)?,
                conv_bn(b, "conv2", "bn2", |b| spatial(b, width, width), width)?,
                conv_bn(b, "conv3", "bn3", |b| Ok(ConvOp::Conv(Conv2d::new(b, width, out_ch, 1, 1, 0)?)), out_ch)?,
            ]
        }
    };
    let shortcut = if stride != 1 || in_ch != out_ch {
        let op = |b: &mut Builder<'_>| -> Result<ConvOp> {
            if stride == 2 {
                Ok(ConvOp::Up(ConvTranspose2d::new(b, in_ch, out_ch, 2)?))
            } else {
                Ok(ConvOp::Conv(Conv2d::new(b, in_ch, out_ch, 1, 1, 0)?))
            }
        };
        Some(conv_bn(b, "upsample.0", "upsample.1", op, out_ch)?)
    } else {
        None
    };
    Ok(ResBlock { body, shortcut })
}

fn run_blocks(blocks: &[ResBlock], x: &Tensor, ctx: BnCtx) -> Result<Tensor> {
    let mut h = x.clone();
    for block in blocks {
        h = block.forward(&h, ctx)?;
    }
    Ok(h)
}

/// Every second element along `dim`, starting at `offset`, `n` elements.
fn strided(x: &Tensor, dim: usize, offset: usize, n: usize) -> Result<Tensor> {
    let x = x.narrow(dim, offset, 2 * n)?;
    let mut shape = x.dims().to_vec();
    shape[dim] = n;
    shape.insert(dim + 1, 2);
    Ok(x.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// 3x3 stride-2 max pool on an input already padded by one on each side,
/// built from strided views so it stays differentiable.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, hp, wp) = x.dims4()?;
    let (ho, wo) = ((hp - 3) / 2 + 1, (wp - 3) / 2 + 1);
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = strided(x, 2, dy, ho)?;
        for dx in 0..3 {
            let v = strided(&rows, 3, dx, wo)?;
            out = Some(match out {
                None => v,
                Some(acc) => acc.maximum(&v)?,
            });
        }
    }
    out.ok_or_else(|| Error::Shape("empty pooling window".into()))
}

/// First three stages of a residual network.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: BackboneSpec,
    stem: (Conv2d, BatchNorm2d),
    layers: [Vec<ResBlock>; 3],
}

impl Encoder {
    pub fn spec(&self) -> BackboneSpec {
        self.spec
    }

    pub fn forward(&self, x: &Tensor, ctx: BnCtx) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "encoder input must be (B, 3, H, W) with H, W divisible by {LATENT_STRIDE}, got {:?}",
                x.dims()
            )));
        }
        let (conv, bn) = &self.stem;
        let h = bn.forward(&conv.forward(x)?, ctx)?.relu()?;
        // post-ReLU activations are nonnegative, so zero padding is
        // equivalent to -inf padding for the max pool
        let h = max_pool_3x3_s2(&h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?)?;
        let s1 = run_blocks(&self.layers[0], &h, ctx)?;
        let s2 = run_blocks(&self.layers[1], &s1, ctx)?;
        let s3 = run_blocks(&self.layers[2], &s2, ctx)?;
        FeaturePyramid::new(vec![s1, s2, s3])
    }
}

pub fn build_encoder(spec: BackboneSpec, b: &mut Builder<'_>) -> Result<Encoder> {
    spec.validate()?;
    let kind = spec.id.block();
    let base = spec.base_channels;
    let stem = (
        Conv2d::new(&mut b.pp("conv1"), 3, base, 7, 2, 3)?,
        BatchNorm2d::new(&mut b.pp("bn1"), base)?,
    );
    let mut in_ch = base;
    let mut layers: [Vec<ResBlock>; 3] = Default::default();
    for (i, &n) in spec.id.encoder_blocks().iter().enumerate() {
        let planes = base << i;
        let stride = if i == 0 { 1 } else { 2 };
        let mut lb = b.pp(format!("layer{}", i + 1));
        for j in 0..n {
            let s = if j == 0 { stride } else { 1 };
            layers[i].push(down_block(&mut lb.pp(j), kind, in_ch, planes, spec.id.width_factor(), s)?);
            in_ch = planes * kind.expansion();
        }
    }
    Ok(Encoder { spec, stem, layers })
}

/// Fuses the three encoder stages into one stride-32 latent.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    down1: [(Conv2d, BatchNorm2d); 2],
    down2: (Conv2d, BatchNorm2d),
    blocks: Vec<ResBlock>,
}

impl Bottleneck {
    pub fn forward(&self, stages: &[Tensor], ctx: BnCtx) -> Result<Tensor> {
        if stages.len() != 3 {
            return Err(Error::Shape(format!(
                "bottleneck expects 3 stages, got {}",
                stages.len()
            )));
        }
        let dims: Vec<(usize, usize)> = stages
            .iter()
            .map(|s| s.dims4().map(|(_, _, h, w)| (h, w)))
            .collect::<candle_core::Result<_>>()?;
        if dims[0] != (2 * dims[1].0, 2 * dims[1].1) || dims[1] != (2 * dims[2].0, 2 * dims[2].1) {
            return Err(Error::Shape(format!(
                "bottleneck stages must halve in resolution, got {dims:?}"
            )));
        }
        let [(c1, b1), (c2, b2)] = &self.down1;
        let l1 = b1.forward(&c1.forward(&stages[0])?, ctx)?.relu()?;
        let l1 = b2.forward(&c2.forward(&l1)?, ctx)?.relu()?;
        let (c3, b3) = &self.down2;
        let l2 = b3.forward(&c3.forward(&stages[1])?, ctx)?.relu()?;
        let fused = Tensor::cat(&[&l1, &l2, &stages[2]], 1)?;
        run_blocks(&self.blocks, &fused, ctx)
    }
}

pub fn build_bottleneck(spec: BackboneSpec, b: &mut Builder<'_>) -> Result<Bottleneck> {
    spec.validate()?;
    let kind = spec.id.block();
    let [c1, c2, c3] = spec.stage_channels();
    let down1 = [
        (
            Conv2d::new(&mut b.pp("conv1"), c1, c2, 3, 2, 1)?,
            BatchNorm2d::new(&mut b.pp("bn1"), c2)?,
        ),
        (
            Conv2d::new(&mut b.pp("conv2"), c2, c3, 3, 2, 1)?,
            BatchNorm2d::new(&mut b.pp("bn2"), c3)?,
        ),
    ];
    let down2 = (
        Conv2d::new(&mut b.pp("conv3"), c2, c3, 3, 2, 1)?,
        BatchNorm2d::new(&mut b.pp("bn3"), c3)?,
    );
    let planes = 8 * spec.base_channels;
    let mut in_ch = 3 * c3;
    let mut blocks = Vec::new();
    let mut lb = b.pp("bn_layer");
    for j in 0..spec.id.fusion_blocks() {
        let s = if j == 0 { 2 } else { 1 };
        blocks.push(down_block(&mut lb.pp(j), kind, in_ch, planes, spec.id.width_factor(), s)?);
        in_ch = planes * kind.expansion();
    }
    Ok(Bottleneck { down1, down2, blocks })
}

/// Reversed encoder: latent -> stages 3, 2, 1.
#[derive(Debug, Clone)]
pub struct Decoder {
    layers: [Vec<ResBlock>; 3],
}

impl Decoder {
    /// Returns the reconstructed pyramid in encoder stage order.
    pub fn forward(&self, latent: &Tensor, ctx: BnCtx) -> Result<FeaturePyramid> {
        let d3 = run_blocks(&self.layers[0], latent, ctx)?;
        let d2 = run_blocks(&self.layers[1], &d3, ctx)?;
        let d1 = run_blocks(&self.layers[2], &d2, ctx)?;
        FeaturePyramid::new(vec![d1, d2, d3])
    }
}

pub fn build_decoder(spec: BackboneSpec, b: &mut Builder<'_>) -> Result<Decoder> {
    spec.validate()?;
    let kind = spec.id.block();
    let base = spec.base_channels;
    let mut in_ch = spec.latent_channels();
    let mut layers: [Vec<ResBlock>; 3] = Default::default();
    for (i, &n) in spec.id.decoder_blocks().iter().enumerate() {
        let planes = base << (2 - i);
        let mut lb = b.pp(format!("layer{}", i + 1));
        for j in 0..n {
            let s = if j == 0 { 2 } else { 1 };
            layers[i].push(up_block(&mut lb.pp(j), kind, in_ch, planes, spec.id.width_factor(), s)?);
            in_ch = planes * kind.expansion();
        }
    }
    Ok(Decoder { layers })
}

/// Where pretrained encoder weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightSource {
    /// A safetensors file with torchvision parameter names.
    Path(PathBuf),
    /// `registry:<name>` resolves to `$FEATRECON_WEIGHTS/<name>.safetensors`.
    Registry(String),
}

impl TryFrom<String> for WeightSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        match s.strip_prefix("registry:") {
            Some("") => Err(Error::Config("empty registry name".into())),
            Some(name) => Ok(WeightSource::Registry(name.to_string())),
            None => Ok(WeightSource::Path(PathBuf::from(s))),
        }
    }
}

impl From<WeightSource> for String {
    fn from(w: WeightSource) -> Self {
        match w {
            WeightSource::Path(p) => p.display().to_string(),
            WeightSource::Registry(n) => format!("registry:{n}"),
        }
    }
}

pub const WEIGHTS_DIR_ENV: &str = "FEATRECON_WEIGHTS";

impl WeightSource {
    pub fn resolve(&self) -> Result<PathBuf> {
        match self {
            WeightSource::Path(p) => Ok(p.clone()),
            WeightSource::Registry(name) => {
                let dir = std::env::var_os(WEIGHTS_DIR_ENV).ok_or_else(|| {
                    Error::Config(format!(
                        "weight registry entry '{name}' requires {WEIGHTS_DIR_ENV} to be set"
                    ))
                })?;
                Ok(Path::new(&dir).join(format!("{name}.safetensors")))
            }
        }
    }

    pub fn load(&self, device: &Device) -> Result<HashMap<String, Tensor>> {
        let path = self.resolve()?;
        if !path.is_file() {
            return Err(Error::Config(format!(
                "weight file {} does not exist",
                path.display()
            )));
        }
        Ok(candle_core::safetensors::load(&path, device)?)
    }
}

/// Which components the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableFlags {
    pub encoder: bool,
    pub bottleneck: bool,
    pub decoder: bool,
}

/// Encoder(s), bottleneck and decoder with their parameter stores.
///
/// `encoder` is the network whose features are reconstructed (and adapted
/// when trainable). `frozen` is the never-optimized pretrained copy used by
/// paired configurations.
#[derive(Debug)]
pub struct BackboneBundle {
    pub spec: BackboneSpec,
    pub encoder: Encoder,
    pub frozen: Option<Encoder>,
    pub bottleneck: Bottleneck,
    pub decoder: Decoder,
    /// Parameters of `encoder`, prefixed `encoder.`.
    pub encoder_store: ParamStore,
    /// Parameters of `frozen`, prefixed `frozen_encoder.`.
    pub frozen_store: Option<ParamStore>,
    /// Bottleneck (`bottleneck.`) and decoder (`decoder.`) parameters.
    pub new_store: ParamStore,
    pub trainable: TrainableFlags,
    pub bn_policy: BnPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleOptions {
    pub spec: BackboneSpec,
    pub paired: bool,
    pub optimize_encoder: bool,
    pub bn_policy: BnPolicy,
    pub seed: u64,
}

impl BackboneBundle {
    pub fn build(opts: &BundleOptions, weights: Option<&WeightSource>, device: &Device) -> Result<Self> {
        let mut rng = seeded_rng(opts.seed);
        let mut encoder_store = ParamStore::new(device);
        let encoder = build_encoder(opts.spec, &mut Builder::new(&mut encoder_store, &mut rng, "encoder"))?;
        if let Some(w) = weights {
            let tensors = w.load(device)?;
            let name = w.resolve()?.display().to_string();
            encoder_store.load_from(&tensors, "encoder.", "", &name)?;
        }
        let (frozen, frozen_store) = if opts.paired {
            let mut store = ParamStore::new(device);
            // throwaway generator: values are overwritten by the copy below
            let mut scratch = seeded_rng(0);
            let frozen = build_encoder(opts.spec, &mut Builder::new(&mut store, &mut scratch, "frozen_encoder"))?;
            store.copy_from(&encoder_store, "frozen_encoder.", "encoder.")?;
            (Some(frozen), Some(store))
        } else {
            (None, None)
        };
        let mut new_store = ParamStore::new(device);
        let bottleneck = build_bottleneck(opts.spec, &mut Builder::new(&mut new_store, &mut rng, "bottleneck"))?;
        let decoder = build_decoder(opts.spec, &mut Builder::new(&mut new_store, &mut rng, "decoder"))?;
        Ok(BackboneBundle {
            spec: opts.spec,
            encoder,
            frozen,
            bottleneck,
            decoder,
            encoder_store,
            frozen_store,
            new_store,
            trainable: TrainableFlags {
                encoder: opts.optimize_encoder,
                bottleneck: true,
                decoder: true,
            },
            bn_policy: opts.bn_policy,
        })
    }

    pub fn set_bn_policy(mut self, policy: BnPolicy) -> Self {
        self.bn_policy = policy;
        self
    }

    /// Brings the frozen copy in line with the current encoder weights.
    /// Used after estimating encoder statistics on target data when no
    /// pretrained weights are available.
    pub fn sync_frozen_from_encoder(&self) -> Result<()> {
        if let Some(store) = &self.frozen_store {
            store.copy_from(&self.encoder_store, "frozen_encoder.", "encoder.")?;
        }
        Ok(())
    }

    pub fn all_tensors(&self) -> HashMap<String, Tensor> {
        let mut all = self.encoder_store.tensors();
        if let Some(f) = &self.frozen_store {
            all.extend(f.tensors());
        }
        all.extend(self.new_store.tensors());
        all
    }

    pub fn load_all(&self, tensors: &HashMap<String, Tensor>, source_name: &str) -> Result<()> {
        self.encoder_store.load_from(tensors, "", "", source_name)?;
        if let Some(f) = &self.frozen_store {
            f.load_from(tensors, "", "", source_name)?;
        }
        self.new_store.load_from(tensors, "", "", source_name)
    }
}
