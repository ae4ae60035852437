//! Scale-adaptive attention: gate the channels of the previous scale's
//! features by how well their learned descriptors agree with the current
//! scale's, then stack the gated features under the current ones.
//!
//! For current-scale features `U_hi` and upsampled previous-scale features
//! `U_lo` (both `N×C×H×W`):
//!
//! ```text
//! v_hi = Φ_hi(mean_hw(U_hi))      v_lo = Φ_lo(mean_hw(U_lo))
//! β    = σ(v_hi ⊙ v_lo)           ∈ (0, 1)^{N×C}
//! out  = concat_c(U_hi, β ⊙ U_lo)
//! ```
//!
//! Channels whose descriptors share a sign receive β > 0.5.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{self, ParamStore, Var};
use crate::nn::{Ctx, Linear};
use crate::tensor::{Real, Tensor};

/// Per-channel spatial mean, `N×C×H×W → N×C`.
pub fn channel_mean<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>> {
    graph::spatial_mean(features)
}

/// `β = σ(v_hi ⊙ v_lo)` element-wise.
pub fn attention_coefficients<T: Real>(v_hi: &Tensor<T>, v_lo: &Tensor<T>) -> Result<Tensor<T>> {
    if v_hi.shape() != v_lo.shape() {
        return Err(Error::Shape(format!(
            "attention descriptors differ in shape: {:?} vs {:?}",
            v_hi.shape(),
            v_lo.shape()
        )));
    }
    Ok(v_hi.zip_map(v_lo, |a, b| graph::sigmoid(a * b)))
}

/// Two-layer bottleneck `C → C/r → C` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct AttentionTransform {
    pub squeeze: Linear,
    pub expand: Linear,
}

impl AttentionTransform {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = bottleneck_width(channels, reduction);
        Self {
            squeeze: Linear::new(store, rng, &format!("{name}.squeeze"), channels, hidden),
            expand: Linear::new(store, rng, &format!("{name}.expand"), hidden, channels),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<T>, v: Var) -> Result<Var> {
        let h = self.squeeze.forward(cx, v)?;
        let h = cx.tape.relu(h);
        self.expand.forward(cx, h)
    }
}

/// Hidden width of the attention bottleneck.
pub fn bottleneck_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// The scale-adaptive attention module: two independent transforms, one
/// per scale.
#[derive(Clone, Debug)]
pub struct Saam {
    pub phi_hi: AttentionTransform,
    pub phi_lo: AttentionTransform,
}

impl Saam {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, channels: usize, reduction: usize) -> Self {
        Self {
            phi_hi: AttentionTransform::new(store, rng, &format!("{name}.phi_hi"), channels, reduction),
            phi_lo: AttentionTransform::new(store, rng, &format!("{name}.phi_lo"), channels, reduction),
        }
    }

    /// β for two same-sized feature maps, `N×C`.
    pub fn attention<T: Real>(&self, cx: &mut Ctx<T>, u_hi: Var, u_lo: Var) -> Result<Var> {
        let m_hi = cx.tape.spatial_mean(u_hi)?;
        let m_lo = cx.tape.spatial_mean(u_lo)?;
        let v_hi = self.phi_hi.forward(cx, m_hi)?;
        let v_lo = self.phi_lo.forward(cx, m_lo)?;
        let agreement = cx.tape.mul(v_hi, v_lo)?;
        Ok(cx.tape.sigmoid(agreement))
    }

    /// Fuse current-scale features with half-resolution previous-scale
    /// features; returns `N×2C×H×W` whose first `C` channels are `u_hi`.
    pub fn fuse<T: Real>(&self, cx: &mut Ctx<T>, u_hi: Var, u_lo_raw: Var) -> Result<Var> {
        let (n, c, h, w) = cx.tape.value(u_hi).dims4()?;
        let (nl, cl, hl, wl) = cx.tape.value(u_lo_raw).dims4()?;
        if (nl, cl) != (n, c) || 2 * hl != h || 2 * wl != w {
            return Err(Error::Shape(format!(
                "attention inputs must share N and C with the lower scale at half size: {:?} vs {:?}",
                cx.tape.shape(u_hi),
                cx.tape.shape(u_lo_raw)
            )));
        }
        let u_lo = cx.tape.upsample2x(u_lo_raw)?;
        let beta = self.attention(cx, u_hi, u_lo)?;
        let attended = cx.tape.channel_gate(u_lo, beta)?;
        cx.tape.concat(&[u_hi, attended])
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let h = bottleneck_width(channels, reduction);
        2 * (channels * h + h + h * channels + channels)
    }
}
