//! Generators, discriminators and the cross-scale fusion variants.
//!
//! One [`GeneratorBS`], one [`GeneratorSB`] and one discriminator per domain
//! are built once and reused at every scale; scale recurrence threads the
//! previous scale's output image and bottleneck features into the next call.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamStore, Tape, Var};
use crate::imaging::ImageBatch;
use crate::nn::{Conv2d, ConvTranspose2d, Ctx, Linear, INSTANCE_NORM_EPS};
use crate::saam::{bottleneck_width, Saam};
use crate::tensor::{self, Real, Tensor};

/// How the previous scale's features join the current scale's before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Add,
    Concat,
    ChannelAttention,
    SpatialAttention,
    Saam,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::None,
        FusionMode::Add,
        FusionMode::Concat,
        FusionMode::ChannelAttention,
        FusionMode::SpatialAttention,
        FusionMode::Saam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
            FusionMode::ChannelAttention => "channel_attention",
            FusionMode::SpatialAttention => "spatial_attention",
            FusionMode::Saam => "saam",
        }
    }

    /// Channel count entering the decoder for `c_feat` bottleneck channels.
    pub fn decoder_channels(self, c_feat: usize) -> usize {
        match self {
            FusionMode::None | FusionMode::Add => c_feat,
            _ => 2 * c_feat,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = FusionMode::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown fusion mode {s:?}; expected one of {}", valid.join(", ")))
        })
    }
}

/// Layer widths and depths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub image_channels: usize,
    /// Stem width of the deblurring generator; the bottleneck has 4× this.
    pub base_width: usize,
    pub residual_blocks: usize,
    pub reblur_width: usize,
    pub disc_width: usize,
    /// Stride-2 layers in each discriminator.
    pub disc_layers: usize,
    pub attention_reduction: usize,
    /// Multiplier on the initial weights of both generators' last layer;
    /// 0 starts them as exact identity maps.
    pub residual_init_gain: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_width: 64,
            residual_blocks: 9,
            reblur_width: 64,
            disc_width: 64,
            disc_layers: 3,
            attention_reduction: 16,
            residual_init_gain: 1.0,
        }
    }
}

impl ArchConfig {
    pub fn feature_channels(&self) -> usize {
        4 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.image_channels == 1 || self.image_channels == 3, "image_channels must be 1 or 3"),
            (self.base_width > 0, "base_width must be positive"),
            (self.reblur_width > 0, "reblur_width must be positive"),
            (self.disc_width > 0, "disc_width must be positive"),
            (self.disc_layers > 0, "disc_layers must be positive"),
            (self.attention_reduction > 0, "attention_reduction must be positive"),
            (self.residual_init_gain >= 0.0 && self.residual_init_gain.is_finite(), "residual_init_gain must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// conv → instance norm → ReLU → conv → instance norm, plus the input.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 0),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 0),
        }
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = cx.tape.reflect_pad(x, 1)?;
        let h = self.conv1.forward(cx, h)?;
        let h = cx.tape.instance_norm(h, INSTANCE_NORM_EPS)?;
        let h = cx.tape.relu(h);
        let h = cx.tape.reflect_pad(h, 1)?;
        let h = self.conv2.forward(cx, h)?;
        let h = cx.tape.instance_norm(h, INSTANCE_NORM_EPS)?;
        cx.tape.add(x, h)
    }
}

/// Squeeze-and-excitation gate from the lower-scale features alone.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub expand: Linear,
}

impl ChannelAttention {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ch: usize, reduction: usize) -> Self {
        let hidden = bottleneck_width(ch, reduction);
        Self {
            squeeze: Linear::new(store, rng, &format!("{name}.squeeze"), ch, hidden),
            expand: Linear::new(store, rng, &format!("{name}.expand"), hidden, ch),
        }
    }

    fn gate<T: Real>(&self, cx: &mut Ctx<T>, u_lo: Var) -> Result<Var> {
        let m = cx.tape.spatial_mean(u_lo)?;
        let h = self.squeeze.forward(cx, m)?;
        let h = cx.tape.relu(h);
        let g = self.expand.forward(cx, h)?;
        Ok(cx.tape.sigmoid(g))
    }
}

/// Per-pixel gate from channel-wise mean and max of the lower-scale features.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        Self { conv: Conv2d::new(store, rng, &format!("{name}.conv"), 2, 1, 7, 1, 3) }
    }

    fn gate<T: Real>(&self, cx: &mut Ctx<T>, u_lo: Var) -> Result<Var> {
        let avg = cx.tape.channel_mean(u_lo)?;
        let max = cx.tape.channel_max(u_lo)?;
        let pooled = cx.tape.concat(&[avg, max])?;
        let g = self.conv.forward(cx, pooled)?;
        Ok(cx.tape.sigmoid(g))
    }
}

/// Fusion block with whatever parameters the mode needs.
#[derive(Clone, Debug)]
pub enum Fusion {
    None,
    Add,
    Concat,
    ChannelAttention(ChannelAttention),
    SpatialAttention(SpatialAttention),
    Saam(Saam),
}

impl Fusion {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, mode: FusionMode, ch: usize, reduction: usize) -> Self {
        match mode {
            FusionMode::None => Fusion::None,
            FusionMode::Add => Fusion::Add,
            FusionMode::Concat => Fusion::Concat,
            FusionMode::ChannelAttention => Fusion::ChannelAttention(ChannelAttention::new(store, rng, name, ch, reduction)),
            FusionMode::SpatialAttention => Fusion::SpatialAttention(SpatialAttention::new(store, rng, name)),
            FusionMode::Saam => Fusion::Saam(Saam::new(store, rng, name, ch, reduction)),
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            Fusion::None => FusionMode::None,
            Fusion::Add => FusionMode::Add,
            Fusion::Concat => FusionMode::Concat,
            Fusion::ChannelAttention(_) => FusionMode::ChannelAttention,
            Fusion::SpatialAttention(_) => FusionMode::SpatialAttention,
            Fusion::Saam(_) => FusionMode::Saam,
        }
    }

    /// Fuse same-sized feature maps (`u_lo` already upsampled).
    pub fn fuse_aligned<T: Real>(&self, cx: &mut Ctx<T>, u_hi: Var, u_lo: Var) -> Result<Var> {
        if cx.tape.shape(u_hi) != cx.tape.shape(u_lo) {
            return Err(Error::Shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                cx.tape.shape(u_hi),
                cx.tape.shape(u_lo)
            )));
        }
        match self {
            Fusion::None => Ok(u_hi),
            Fusion::Add => cx.tape.add(u_hi, u_lo),
            Fusion::Concat => cx.tape.concat(&[u_hi, u_lo]),
            Fusion::ChannelAttention(ca) => {
                let g = ca.gate(cx, u_lo)?;
                let gated = cx.tape.channel_gate(u_lo, g)?;
                cx.tape.concat(&[u_hi, gated])
            }
            Fusion::SpatialAttention(sa) => {
                let g = sa.gate(cx, u_lo)?;
                let gated = cx.tape.spatial_gate(u_lo, g)?;
                cx.tape.concat(&[u_hi, gated])
            }
            Fusion::Saam(saam) => {
                let beta = saam.attention(cx, u_hi, u_lo)?;
                let gated = cx.tape.channel_gate(u_lo, beta)?;
                cx.tape.concat(&[u_hi, gated])
            }
        }
    }

    /// Fuse with half-resolution previous features, or with nothing at the
    /// coarsest scale (zeros stand in where the decoder expects `2C` channels).
    pub fn fuse<T: Real>(&self, cx: &mut Ctx<T>, u_hi: Var, prev: Option<Var>) -> Result<Var> {
        match (self, prev) {
            (Fusion::Saam(saam), Some(lo)) => saam.fuse(cx, u_hi, lo),
            (_, Some(lo)) => {
                let up = cx.tape.upsample2x(lo)?;
                self.fuse_aligned(cx, u_hi, up)
            }
            (Fusion::None | Fusion::Add, None) => Ok(u_hi),
            (_, None) => {
                let zeros = cx.tape.constant(Tensor::zeros(cx.tape.shape(u_hi)));
                cx.tape.concat(&[u_hi, zeros])
            }
        }
    }
}

/// Output image and bottleneck features of one scale, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct ScaleVars {
    pub image: Var,
    pub features: Var,
}

/// Output image and bottleneck features of one scale, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleState {
    pub image: ImageBatch,
    pub features: Tensor<f32>,
}

/// Encoder, residual chain and decoder of the deblurring generator.
#[derive(Clone, Debug)]
pub struct GeneratorBS {
    pub stem: Conv2d,
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub fusion: Fusion,
    pub up1: ConvTranspose2d,
    pub up2: ConvTranspose2d,
    pub head: Conv2d,
    channels: usize,
    feature_channels: usize,
}

impl GeneratorBS {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, arch: &ArchConfig, mode: FusionMode) -> Self {
        let (c, w) = (arch.image_channels, arch.base_width);
        let cf = arch.feature_channels();
        let p = |s: &str| format!("{name}.{s}");
        let stem = Conv2d::new(store, rng, &p("stem"), 2 * c, w, 7, 1, 0);
        let down1 = Conv2d::new(store, rng, &p("down1"), w, 2 * w, 3, 2, 1);
        let down2 = Conv2d::new(store, rng, &p("down2"), 2 * w, cf, 3, 2, 1);
        let blocks = (0..arch.residual_blocks).map(|i| ResidualBlock::new(store, rng, &p(&format!("res{i}")), cf)).collect();
        let fusion = Fusion::new(store, rng, &p("fusion"), mode, cf, arch.attention_reduction);
        let up1 = ConvTranspose2d::new(store, rng, &p("up1"), mode.decoder_channels(cf), 2 * w, 3, 2, 1, 1);
        let up2 = ConvTranspose2d::new(store, rng, &p("up2"), 2 * w, w, 3, 2, 1, 1);
        let head = Conv2d::new(store, rng, &p("head"), w, c, 7, 1, 0);
        head.scale_init(store, arch.residual_init_gain);
        Self { stem, down1, down2, blocks, fusion, up1, up2, head, channels: c, feature_channels: cf }
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.fusion.mode()
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    /// One scale: restore `input` given the previous (half-resolution) scale.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, input: Var, prev: Option<ScaleVars>) -> Result<ScaleVars> {
        let (n, c, h, w) = cx.tape.value(input).dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("generator expects {} channels, got {c}", self.channels)));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::Shape(format!("generator input must be a positive multiple of 4, got {h}×{w}")));
        }
        let guide = match prev {
            None => input,
            Some(p) => {
                if cx.tape.shape(p.image) != [n, c, h / 2, w / 2] {
                    return Err(Error::Shape(format!(
                        "previous scale image {:?} is not half of {:?}",
                        cx.tape.shape(p.image),
                        cx.tape.shape(input)
                    )));
                }
                let fs = [n, self.feature_channels, h / 8, w / 8];
                if cx.tape.shape(p.features) != fs {
                    return Err(Error::Shape(format!(
                        "previous scale features {:?}, expected {fs:?}",
                        cx.tape.shape(p.features)
                    )));
                }
                cx.tape.upsample2x(p.image)?
            }
        };
        let x = cx.tape.concat(&[input, guide])?;
        let x = cx.tape.reflect_pad(x, 3)?;
        let x = self.stem.forward(cx, x)?;
        let x = norm_relu(cx, x)?;
        let x = self.down1.forward(cx, x)?;
        let x = norm_relu(cx, x)?;
        let x = self.down2.forward(cx, x)?;
        let mut x = norm_relu(cx, x)?;
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        let features = x;

        let x = self.fusion.fuse(cx, features, prev.map(|p| p.features))?;
        let x = self.up1.forward(cx, x)?;
        let x = norm_relu(cx, x)?;
        let x = self.up2.forward(cx, x)?;
        let x = norm_relu(cx, x)?;
        let x = cx.tape.reflect_pad(x, 3)?;
        let x = self.head.forward(cx, x)?;
        let residual = cx.tape.tanh(x);
        let out = cx.tape.add(input, residual)?;
        let image = cx.tape.clamp(out, -1.0, 1.0);
        Ok(ScaleVars { image, features })
    }
}

fn norm_relu<T: Real>(cx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let x = cx.tape.instance_norm(x, INSTANCE_NORM_EPS)?;
    Ok(cx.tape.relu(x))
}

/// Four same-size 3×3 convolutions predicting a bounded residual.
#[derive(Clone, Debug)]
pub struct GeneratorSB {
    pub convs: [Conv2d; 4],
    channels: usize,
}

impl GeneratorSB {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, arch: &ArchConfig) -> Self {
        let (c, w) = (arch.image_channels, arch.reblur_width);
        let widths = [(c, w), (w, w), (w, w), (w, c)];
        let convs: [Conv2d; 4] = std::array::from_fn(|i| {
            let (cin, cout) = widths[i];
            Conv2d::new(store, rng, &format!("{name}.conv{}", i + 1), cin, cout, 3, 1, 0)
        });
        convs[3].scale_init(store, arch.residual_init_gain);
        Self { convs, channels: c }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, input: Var) -> Result<Var> {
        let (_, c, h, w) = cx.tape.value(input).dims4()?;
        if c != self.channels || h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "reblur generator expects {} channels and at least 2×2, got {:?}",
                self.channels,
                cx.tape.shape(input)
            )));
        }
        let mut x = input;
        for (i, conv) in self.convs.iter().enumerate() {
            x = cx.tape.reflect_pad(x, 1)?;
            x = conv.forward(cx, x)?;
            if i < 3 {
                x = cx.tape.relu(x);
            }
        }
        let residual = cx.tape.tanh(x);
        let out = cx.tape.add(input, residual)?;
        Ok(cx.tape.clamp(out, -1.0, 1.0))
    }
}

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
struct DiscLayer {
    conv: Conv2d,
    norm: bool,
    act: bool,
}

/// Fully convolutional patch discriminator emitting raw logits.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<DiscLayer>,
    channels: usize,
}

impl PatchDiscriminator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, arch: &ArchConfig) -> Self {
        let width = |i: usize| arch.disc_width * (1usize << i.min(3));
        let mut layers = Vec::with_capacity(arch.disc_layers + 2);
        let mut cin = arch.image_channels;
        for i in 0..=arch.disc_layers {
            let stride = if i < arch.disc_layers { 2 } else { 1 };
            let cout = width(i);
            let conv = Conv2d::new(store, rng, &format!("{name}.conv{i}"), cin, cout, 4, stride, 1);
            layers.push(DiscLayer { conv, norm: i > 0, act: true });
            cin = cout;
        }
        let head = Conv2d::new(store, rng, &format!("{name}.head"), cin, 1, 4, 1, 1);
        layers.push(DiscLayer { conv: head, norm: false, act: false });
        Self { layers, channels: arch.image_channels }
    }

    /// Side of the score map for a square input of side `size`, if non-empty.
    pub fn output_size(&self, size: usize) -> Option<usize> {
        self.layers.iter().try_fold(size, |s, l| tensor::conv_out(s, 4, l.conv.stride, l.conv.pad))
    }

    /// Input pixels seen by one score.
    pub fn receptive_field(&self) -> usize {
        self.layers.iter().rev().fold(1, |rf, l| (rf - 1) * l.conv.stride + 4)
    }

    /// Smallest square input producing a non-empty score map.
    pub fn min_input_size(&self) -> usize {
        (1..).find(|&s| self.output_size(s).is_some()).expect("some size works")
    }

    /// [`Self::min_input_size`] for a discriminator with `layers` stride-2 layers.
    pub fn min_input_for(layers: usize) -> usize {
        let strides: Vec<usize> = (0..layers).map(|_| 2).chain([1, 1]).collect();
        (1..)
            .find(|&s| strides.iter().try_fold(s, |s, &st| tensor::conv_out(s, 4, st, 1)).is_some())
            .expect("some size works")
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, input: Var) -> Result<Var> {
        let (_, c, h, w) = cx.tape.value(input).dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("discriminator expects {} channels, got {c}", self.channels)));
        }
        if self.output_size(h).is_none() || self.output_size(w).is_none() {
            return Err(Error::Shape(format!(
                "{h}×{w} input is smaller than the discriminator needs (minimum {0}×{0}, receptive field {1})",
                self.min_input_size(),
                self.receptive_field()
            )));
        }
        let mut x = input;
        for l in &self.layers {
            x = l.conv.forward(cx, x)?;
            if l.norm {
                x = cx.tape.instance_norm(x, INSTANCE_NORM_EPS)?;
            }
            if l.act {
                x = cx.tape.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }
}

/// Parameter-name prefixes of the four networks.
pub const G_BS: &str = "g_bs";
pub const G_SB: &str = "g_sb";
pub const D_S: &str = "d_s";
pub const D_B: &str = "d_b";

/// The four networks and their shared parameter store.
#[derive(Clone, Debug)]
pub struct Networks<T> {
    pub store: ParamStore<T>,
    pub arch: ArchConfig,
    pub g_bs: GeneratorBS,
    pub g_sb: GeneratorSB,
    pub d_s: PatchDiscriminator,
    pub d_b: PatchDiscriminator,
}

impl<T: Real> Networks<T> {
    /// Build and initialize all networks from one seed.
    pub fn new(arch: ArchConfig, fusion: FusionMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g_bs = GeneratorBS::new(&mut store, &mut rng, G_BS, &arch, fusion);
        let g_sb = GeneratorSB::new(&mut store, &mut rng, G_SB, &arch);
        let d_s = PatchDiscriminator::new(&mut store, &mut rng, D_S, &arch);
        let d_b = PatchDiscriminator::new(&mut store, &mut rng, D_B, &arch);
        Ok(Self { store, arch, g_bs, g_sb, d_s, d_b })
    }

    pub fn fusion(&self) -> FusionMode {
        self.g_bs.fusion_mode()
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.prefixed(&[G_BS, G_SB])
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.prefixed(&[D_S, D_B])
    }

    fn prefixed(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                let name = self.store.name(id);
                prefixes.iter().any(|p| name.strip_prefix(p).is_some_and(|r| r.starts_with('.')))
            })
            .collect()
    }

    /// Run the deblurring generator coarse-to-fine over `levels` (coarsest first).
    pub fn deblur_levels(&self, cx: &mut Ctx<T>, levels: &[Var]) -> Result<Vec<ScaleVars>> {
        let mut out: Vec<ScaleVars> = Vec::with_capacity(levels.len());
        for &b in levels {
            let s = self.g_bs.forward(cx, b, out.last().copied())?;
            out.push(s);
        }
        Ok(out)
    }
}

impl Networks<f32> {
    /// Deblur a pyramid (coarsest first) with frozen weights; one state per scale.
    pub fn deblur(&self, levels: &[ImageBatch]) -> Result<Vec<ScaleState>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = levels.iter().map(|l| tape.constant(l.tensor().clone())).collect();
        let mut cx = Ctx::frozen(&mut tape, &self.store);
        let states = self.deblur_levels(&mut cx, &vars)?;
        states
            .iter()
            .map(|s| {
                Ok(ScaleState {
                    image: ImageBatch::new(tape.value(s.image).clone())?,
                    features: tape.value(s.features).clone(),
                })
            })
            .collect()
    }

    /// Reblur an image with frozen weights.
    pub fn reblur(&self, image: &ImageBatch) -> Result<ImageBatch> {
        let mut tape = Tape::new();
        let x = tape.constant(image.tensor().clone());
        let y = self.g_sb.forward(&mut Ctx::frozen(&mut tape, &self.store), x)?;
        ImageBatch::new(tape.value(y).clone())
    }

    /// Raw patch scores from `D_S` (`sharp = true`) or `D_B`.
    pub fn discriminate(&self, image: &ImageBatch, sharp: bool) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.tensor().clone());
        let d = if sharp { &self.d_s } else { &self.d_b };
        let y = d.forward(&mut Ctx::frozen(&mut tape, &self.store), x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            image_channels: 3,
            base_width: 4,
            residual_blocks: 2,
            reblur_width: 4,
            disc_width: 4,
            disc_layers: 2,
            attention_reduction: 4,
            ..ArchConfig::default()
        }
    }

    fn image(n: usize, c: usize, s: usize, seed: u64) -> ImageBatch {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ImageBatch::new(Tensor::from_fn(&[n, c, s, s], |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) * 1.6 - 0.8
        }))
        .unwrap()
    }

    #[test]
    fn fusion_mode_parses_and_sizes_decoder() {
        for m in FusionMode::ALL {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
        }
        assert!("sum".parse::<FusionMode>().is_err());
        assert_eq!(FusionMode::None.decoder_channels(256), 256);
        assert_eq!(FusionMode::Add.decoder_channels(256), 256);
        assert_eq!(FusionMode::Saam.decoder_channels(256), 512);
        assert_eq!(FusionMode::SpatialAttention.decoder_channels(256), 512);
    }

    #[test]
    fn generator_shapes() {
        let arch = ArchConfig { base_width: 8, ..tiny() };
        let net = Networks::<f32>::new(arch, FusionMode::Saam, 0).unwrap();
        let states = net.deblur(&[image(1, 3, 32, 1), image(1, 3, 64, 2)]).unwrap();
        assert_eq!(states[0].features.shape(), &[1, 32, 8, 8]);
        assert_eq!(states[1].image.dims(), (1, 3, 64, 64));
        assert_eq!(states[1].features.shape(), &[1, 32, 16, 16]);
        let (lo, hi) = states[1].image.tensor().min_max();
        assert!(lo >= -1.0 && hi <= 1.0);
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        let net = Networks::<f32>::new(tiny(), FusionMode::Concat, 0).unwrap();
        assert!(net.deblur(&[image(1, 3, 30, 1)]).is_err());
        assert!(net.deblur(&[image(1, 1, 32, 1)]).is_err());
        // not a 2× ladder
        assert!(net.deblur(&[image(1, 3, 16, 1), image(1, 3, 64, 1)]).is_err());
    }

    #[test]
    fn add_with_zero_features_matches_none() {
        let a = Networks::<f32>::new(tiny(), FusionMode::Add, 5).unwrap();
        let b = Networks::<f32>::new(tiny(), FusionMode::None, 5).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        let run = |net: &Networks<f32>| {
            let mut tape = Tape::new();
            let x = tape.constant(image(1, 3, 32, 3).into_tensor());
            let pi = tape.constant(image(1, 3, 16, 4).into_tensor());
            let pf = tape.constant(Tensor::zeros(&[1, 16, 4, 4]));
            let s = net
                .g_bs
                .forward(&mut Ctx::frozen(&mut tape, &net.store), x, Some(ScaleVars { image: pi, features: pf }))
                .unwrap();
            tape.value(s.image).clone()
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn forced_open_channel_gate_is_plain_concat() {
        let mut net = Networks::<f64>::new(tiny(), FusionMode::ChannelAttention, 2).unwrap();
        let Fusion::ChannelAttention(ca) = net.g_bs.fusion.clone() else { unreachable!() };
        net.store.get_mut(ca.expand.weight).data_mut().fill(0.0);
        net.store.get_mut(ca.expand.bias.unwrap()).data_mut().fill(100.0);
        let concat = Fusion::Concat;
        let mut tape = Tape::new();
        let hi = tape.constant(image(2, 16, 4, 1).into_tensor().cast());
        let lo = tape.constant(image(2, 16, 4, 2).into_tensor().cast());
        let mut cx = Ctx::frozen(&mut tape, &net.store);
        let a = net.g_bs.fusion.fuse_aligned(&mut cx, hi, lo).unwrap();
        let b = concat.fuse_aligned(&mut cx, hi, lo).unwrap();
        assert_eq!(cx.tape.value(a), cx.tape.value(b));
        assert_eq!(cx.tape.shape(a), &[2, 32, 4, 4]);
    }

    #[test]
    fn add_of_zero_is_identity_and_shapes_are_checked() {
        let mut tape = Tape::<f32>::new();
        let store = ParamStore::new();
        let x_t = image(1, 8, 4, 1).into_tensor();
        let x = tape.constant(x_t.clone());
        let z = tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let other = tape.constant(Tensor::zeros(&[1, 8, 2, 2]));
        let mut cx = Ctx::frozen(&mut tape, &store);
        let y = Fusion::Add.fuse_aligned(&mut cx, x, z).unwrap();
        assert_eq!(cx.tape.value(y), &x_t);
        assert!(Fusion::Concat.fuse_aligned(&mut cx, x, other).is_err());
    }

    #[test]
    fn reblur_generator_is_small_and_shape_preserving() {
        let net = Networks::<f32>::new(tiny(), FusionMode::None, 0).unwrap();
        let out = net.reblur(&image(2, 3, 12, 1)).unwrap();
        assert_eq!(out.dims(), (2, 3, 12, 12));
        let full = Networks::<f32>::new(ArchConfig::default(), FusionMode::Saam, 0).unwrap();
        assert!(full.store.count(G_SB) < full.store.count(G_BS));
    }

    #[test]
    fn patch_discriminator_arithmetic() {
        let net = Networks::<f32>::new(ArchConfig { disc_layers: 3, ..tiny() }, FusionMode::None, 0).unwrap();
        assert_eq!(net.d_s.receptive_field(), 70);
        assert_eq!(net.d_s.output_size(256), Some(30));
        assert_eq!(net.d_s.output_size(128), Some(14));
        assert_eq!(net.d_s.output_size(16), None);
        assert_eq!(net.d_s.min_input_size(), PatchDiscriminator::min_input_for(3));
        assert_eq!(PatchDiscriminator::min_input_for(2), 12);
        let small = net.discriminate(&image(1, 3, 32, 1), true).unwrap();
        let big = net.discriminate(&image(1, 3, 64, 1), false).unwrap();
        assert_eq!(small.shape(), &[1, 1, 2, 2]);
        assert_eq!(big.shape(), &[1, 1, 6, 6]);
        let err = net.discriminate(&image(1, 3, 16, 1), true).unwrap_err().to_string();
        assert!(err.contains("receptive field"), "{err}");
    }

    #[test]
    fn parameter_groups_partition_the_store() {
        let net = Networks::<f32>::new(tiny(), FusionMode::Saam, 0).unwrap();
        let g = net.generator_params();
        let d = net.discriminator_params();
        assert_eq!(g.len() + d.len(), net.store.len());
        assert!(g.iter().all(|id| !d.contains(id)));
    }
}
