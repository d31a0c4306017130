//! Training objectives for both stages: plain scalar versions for tests
//! and evaluation, tape versions for optimization.
//!
//! The perceptual distance uses a small frozen random-weight feature
//! extractor instead of a pretrained backbone. Its weights are derived
//! from a fixed seed baked into this file, so the loss is reproducible
//! everywhere without external files. The adversarial terms use the
//! hinge formulation with a three-layer patch discriminator.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::nn::{kaiming_uniform, Conv2d, ParamStore};
use crate::tensor::{avg_pool2_forward, conv2d_forward, Tape, Val};
use crate::types::{FlowField, Image, LabelMap, LossWeights, NUM_LABELS};
use crate::{Error, Result};

pub const SMOOTH_EPS: f64 = 1e-3;
pub const SMOOTH_ALPHA: f64 = 0.45;
const PERCEPTUAL_SEED: u64 = 0x7e2c_e11e;
const PERCEPTUAL_CH: usize = 8;

/// Mean absolute difference, optionally restricted to mask != 0 pixels.
/// An all-zero mask yields 0.
pub fn l1_loss(pred: &Image, target: &Image, mask: Option<&LabelMap>) -> Result<f64> {
    let (h, w) = pred.dims();
    if target.dims() != (h, w) {
        return Err(Error::DimMismatch(format!(
            "l1 inputs {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    if let Some(m) = mask {
        if m.dims() != (h, w) {
            return Err(Error::DimMismatch(format!("l1 mask {:?} vs {:?}", m.dims(), (h, w))));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| m.data[[y, x]] == 0) {
                continue;
            }
            for c in 0..3 {
                total += (pred.data[[c, y, x]] - target.data[[c, y, x]]).abs();
            }
            count += 3;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean per-pixel negative log-softmax of the target label.
pub fn cross_entropy_parsing(logits: &ArrayD<f64>, target: &LabelMap) -> Result<f64> {
    let s = logits.shape();
    let (h, w) = target.dims();
    if s.len() != 3 || s[0] != NUM_LABELS || s[1] != h || s[2] != w {
        return Err(Error::DimMismatch(format!(
            "parsing logits {:?} vs target {h}x{w}",
            s
        )));
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let t = target.data[[y, x]] as usize;
            if t >= NUM_LABELS {
                return Err(Error::UnknownLabel(target.data[[y, x]]));
            }
            let mut mx = f64::NEG_INFINITY;
            for c in 0..NUM_LABELS {
                mx = mx.max(logits[[c, y, x]]);
            }
            let mut z = 0.0;
            for c in 0..NUM_LABELS {
                z += (logits[[c, y, x]] - mx).exp();
            }
            total += z.ln() - (logits[[t, y, x]] - mx);
        }
    }
    Ok(total / (h * w) as f64)
}

/// Generalized Charbonnier second-order smoothness of a flow field:
/// mean over interior pixels, both channels, and four directions of
/// ((second difference)² + ε²)^0.45.
pub fn second_order_smooth(flow: &FlowField) -> Result<f64> {
    let (h, w) = flow.dims();
    if h < 3 || w < 3 {
        return Err(Error::InvalidArg(format!(
            "second_order_smooth needs at least 3x3, got {h}x{w}"
        )));
    }
    let mut t = Tape::new();
    let f = t.constant(flow.to_dyn());
    let v = t.charbonnier_second(f, SMOOTH_EPS, SMOOTH_ALPHA);
    Ok(t.scalar_value(v))
}

/// Frozen random-weight convolutional features at three scales. The
/// weights never train; both the plain and tape paths use them as
/// constants.
pub struct PerceptualExtractor {
    w1: ArrayD<f64>,
    b1: ArrayD<f64>,
    w2: ArrayD<f64>,
    b2: ArrayD<f64>,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        PerceptualExtractor {
            w1: kaiming_uniform(&mut rng, &[PERCEPTUAL_CH, 3, 3, 3], 0.2),
            b1: ArrayD::zeros(IxDyn(&[PERCEPTUAL_CH])),
            w2: kaiming_uniform(&mut rng, &[PERCEPTUAL_CH, PERCEPTUAL_CH, 3, 3], 0.2),
            b2: ArrayD::zeros(IxDyn(&[PERCEPTUAL_CH])),
        }
    }

    fn check_dims(h: usize, w: usize) -> Result<()> {
        if h < 4 || w < 4 {
            return Err(Error::InvalidArg(format!(
                "perceptual loss needs at least 4x4, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn features_plain_one(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let a = conv2d_forward(x, &self.w1, &self.b1, 1, 1);
        let a = a.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        let b = conv2d_forward(&a, &self.w2, &self.b2, 1, 1);
        b.mapv(|v| if v > 0.0 { v } else { 0.2 * v })
    }

    /// Features of the three-scale pyramid (full, half, quarter).
    pub fn features_plain(&self, x: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let half = avg_pool2_forward(x);
        let quarter = avg_pool2_forward(&half);
        vec![
            self.features_plain_one(x),
            self.features_plain_one(&half),
            self.features_plain_one(&quarter),
        ]
    }

    fn features_tape_one(&self, t: &mut Tape, x: Val) -> Val {
        let w1 = t.constant(self.w1.clone());
        let b1 = t.constant(self.b1.clone());
        let a = t.conv2d(x, w1, b1, 1, 1);
        let a = t.leaky_relu(a, 0.2);
        let w2 = t.constant(self.w2.clone());
        let b2 = t.constant(self.b2.clone());
        let b = t.conv2d(a, w2, b2, 1, 1);
        t.leaky_relu(b, 0.2)
    }

    /// Tape-side perceptual loss of a prediction node against a constant
    /// target. Target features are precomputed outside the tape.
    pub fn loss_tape(&self, t: &mut Tape, pred: Val, target: &ArrayD<f64>) -> Result<Val> {
        let s = t.value(pred).shape().to_vec();
        Self::check_dims(s[1], s[2])?;
        if target.shape() != s.as_slice() {
            return Err(Error::DimMismatch(format!(
                "perceptual inputs {:?} vs {:?}",
                s,
                target.shape()
            )));
        }
        let target_feats = self.features_plain(target);
        let mut scales = Vec::with_capacity(3);
        let mut cur = pred;
        for tf in target_feats {
            let f = self.features_tape_one(t, cur);
            scales.push((t.l1_masked(f, Arc::new(tf), None), 1.0));
            cur = t.avg_pool2(cur);
        }
        Ok(t.wsum(&scales))
    }
}

/// Plain three-scale perceptual distance between two images.
pub fn perceptual_loss(extractor: &PerceptualExtractor, pred: &Image, target: &Image) -> Result<f64> {
    let (h, w) = pred.dims();
    if target.dims() != (h, w) {
        return Err(Error::DimMismatch(format!(
            "perceptual inputs {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    PerceptualExtractor::check_dims(h, w)?;
    let fa = extractor.features_plain(&pred.to_dyn());
    let fb = extractor.features_plain(&target.to_dyn());
    let mut total = 0.0;
    for (a, b) in fa.iter().zip(fb.iter()) {
        let n = a.len();
        let mut s = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            s += (x - y).abs();
        }
        total += s / n as f64;
    }
    Ok(total)
}

/// Three stride-2 convolutions scoring overlapping patches.
pub struct PatchDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_ch: usize, width: usize) -> Self {
        PatchDiscriminator {
            c1: Conv2d::new(store, rng, &format!("{name}.c1"), in_ch, width, 3, 2, 1),
            c2: Conv2d::new(store, rng, &format!("{name}.c2"), width, width, 3, 2, 1),
            c3: Conv2d::new(store, rng, &format!("{name}.c3"), width, 1, 3, 1, 1),
        }
    }

    /// Zero-weight variant, useful for hinge arithmetic oracles.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_ch: usize, width: usize) -> Self {
        PatchDiscriminator {
            c1: Conv2d::zeroed(store, &format!("{name}.c1"), in_ch, width, 3, 2, 1),
            c2: Conv2d::zeroed(store, &format!("{name}.c2"), width, width, 3, 2, 1),
            c3: Conv2d::zeroed(store, &format!("{name}.c3"), width, 1, 3, 1, 1),
        }
    }

    pub fn score(&self, t: &mut Tape, store: &ParamStore, x: Val) -> Val {
        let a = self.c1.apply(t, store, x);
        let a = t.leaky_relu(a, 0.2);
        let b = self.c2.apply(t, store, a);
        let b = t.leaky_relu(b, 0.2);
        self.c3.apply(t, store, b)
    }
}

/// Hinge GAN pair on one tape: the generator term and the discriminator
/// term for one (real, fake) pair of nodes.
pub fn adversarial_pair(
    t: &mut Tape,
    disc: &PatchDiscriminator,
    store: &ParamStore,
    real: Val,
    fake: Val,
) -> Result<(Val, Val)> {
    if t.value(real).shape() != t.value(fake).shape() {
        return Err(Error::DimMismatch(format!(
            "adversarial inputs {:?} vs {:?}",
            t.value(real).shape(),
            t.value(fake).shape()
        )));
    }
    let d_real = disc.score(t, store, real);
    let d_fake = disc.score(t, store, fake);
    // disc: relu(1 - D(real)) + relu(1 + D(fake))
    let neg_real = t.scale(d_real, -1.0);
    let m_real = t.add_scalar(neg_real, 1.0);
    let m_real = t.relu(m_real);
    let m_real = t.mean_all(m_real);
    let p_fake = t.add_scalar(d_fake, 1.0);
    let p_fake = t.relu(p_fake);
    let p_fake = t.mean_all(p_fake);
    let disc_term = t.wsum(&[(m_real, 1.0), (p_fake, 1.0)]);
    // gen: -mean(D(fake))
    let mean_fake = t.mean_all(d_fake);
    let gen_term = t.scale(mean_fake, -1.0);
    Ok((gen_term, disc_term))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WarpLossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub mask_l1: f64,
    pub cross_entropy: f64,
    pub adversarial: f64,
    pub second_order: f64,
    pub total: f64,
}

fn ensure_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

/// Weighted stage-1 total from unweighted component values.
pub fn total_warp_loss(
    l1: f64,
    perceptual: f64,
    mask_l1: f64,
    cross_entropy: f64,
    adversarial: f64,
    second_order: f64,
    w: &LossWeights,
) -> Result<WarpLossReport> {
    for (name, v) in [
        ("l1", l1),
        ("perceptual", perceptual),
        ("mask_l1", mask_l1),
        ("cross_entropy", cross_entropy),
        ("adversarial", adversarial),
        ("second_order", second_order),
    ] {
        ensure_finite(name, v)?;
    }
    let total = l1
        + w.lambda_per_w * perceptual
        + w.lambda_m_w * mask_l1
        + w.lambda_ce * cross_entropy
        + w.lambda_adv_w * adversarial
        + w.lambda_sec * second_order;
    Ok(WarpLossReport { l1, perceptual, mask_l1, cross_entropy, adversarial, second_order, total })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GenLossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub mask_l1: f64,
    pub total: f64,
}

/// Weighted stage-2 total from unweighted component values.
pub fn total_gen_loss(
    l1: f64,
    perceptual: f64,
    adversarial: f64,
    mask_l1: f64,
    w: &LossWeights,
) -> Result<GenLossReport> {
    for (name, v) in [
        ("l1", l1),
        ("perceptual", perceptual),
        ("adversarial", adversarial),
        ("mask_l1", mask_l1),
    ] {
        ensure_finite(name, v)?;
    }
    let total =
        l1 + w.lambda_per_g * perceptual + w.lambda_adv * adversarial + w.lambda_m_g * mask_l1;
    Ok(GenLossReport { l1, perceptual, adversarial, mask_l1, total })
}
