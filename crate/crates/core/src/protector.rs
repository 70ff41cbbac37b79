//! Trainable protection pipeline: a feature encoder, a U-Net perturbation
//! generator working on the low-frequency wavelet band, a decoder that fuses
//! the perturbed bands back into an image, a small discriminator, and an
//! exact L∞ budget projection applied to the final pixel residual.

use crate::error::{Error, Result};
use crate::nn::{BufferSet, Conv2d, ConvBlock, DiffConvBlock, DownStage, Linear, SeResidual};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{
    concat_channels, global_avg_pool, upsample_nearest2x, Activation, Mode, ParamSet, Tensor,
};
use crate::wavelet::{dwt2, idwt2, split_fhigh, WaveletBands};

/// Base channel width when none is configured.
pub const DEFAULT_WIDTH: usize = 12;
/// Channel count at the decoder's fusion bottleneck.
pub const FUSION_CHANNELS: usize = 256;
/// Squeeze ratio of the encoder's channel-attention gate.
pub const SE_REDUCE: usize = 4;

/// How the decoder's fusion input is assembled from the band features.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FcatMode {
    /// concat(f_low + P, f_high, P): the perturbation rides on the low band
    /// and is also passed standalone. Default.
    PerturbedLow,
    /// concat(f_low, f_high, P): bands untouched, only the standalone copy
    /// of P carries the perturbation.
    RawLow,
}

/// Output of [`ProtectorModel::encode`].
pub struct EncodedFeatures<S: Scalar> {
    /// Full-resolution feature map, consumed again by the decoder.
    pub f_spatial: Tensor<S>,
    /// Low-frequency band of the features, half resolution.
    pub f_low: Tensor<S>,
    /// The three detail bands stacked on the channel axis, half resolution.
    pub f_high: Tensor<S>,
}

pub struct ProtectorModel<S: Scalar> {
    /// Encoder + generator + decoder parameters (one optimizer).
    pub params: ParamSet<S>,
    /// Discriminator parameters (its own optimizer; updates on either set
    /// can never touch the other).
    pub disc_params: ParamSet<S>,
    pub buffers: BufferSet<S>,
    pub disc_buffers: BufferSet<S>,
    pub fcat: FcatMode,
    /// Diagnostic mode: the decoder passes the encoder's high bands through
    /// unchanged and [`ProtectorModel::protect`] projects the pixel residual
    /// onto the 2×2-block-constant subspace before clamping, so the delivered
    /// perturbation lives in the low-frequency band by construction.
    pub low_band_only: bool,
    epsilon: f64,
    width: usize,
    // encoder
    enc_block: ConvBlock<S>,
    enc_res: SeResidual<S>,
    // perturbation generator (U-Net over the low band)
    gen_down1: DownStage<S>,
    gen_down2: DownStage<S>,
    gen_mid1: ConvBlock<S>,
    gen_mid2: ConvBlock<S>,
    gen_up1: ConvBlock<S>,
    gen_up2: ConvBlock<S>,
    gen_out: Conv2d<S>,
    // decoder
    dec_fuse1: ConvBlock<S>,
    dec_fuse2: ConvBlock<S>,
    dec_regroup: Conv2d<S>,
    dec_up1: DiffConvBlock<S>,
    dec_up2: DiffConvBlock<S>,
    dec_out: Conv2d<S>,
    // discriminator
    disc_conv1: Conv2d<S>,
    disc_block2: ConvBlock<S>,
    disc_block3: ConvBlock<S>,
    disc_head: Linear<S>,
}

/// Widest representable clamp band not exceeding 2ε once widened back to
/// f64, paired with the exact f64 limit the projection re-checks against.
pub(crate) fn budget_band<S: Scalar>(epsilon: f64) -> (S, f64) {
    let limit = 2.0 * epsilon;
    let mut band = S::lit(limit);
    if band.to_f64x() > limit {
        band = band.next_down();
    }
    (band, limit)
}

/// Orthogonal projection onto 2×2-block-constant signals (the span of the
/// low-frequency basis): every block is replaced by its mean. Differentiable;
/// the four pixels of a block come out bit-identical.
pub fn low_band_projection<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let bands = dwt2(x)?;
    let zero = Tensor::zeros(bands.hl.shape());
    idwt2(&WaveletBands { ll: bands.ll, hl: zero.clone(), lh: zero.clone(), hh: zero })
}

/// Prefix shape errors from inside a composite forward with the layer name.
fn layered<T>(layer: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape { op, detail } => Error::Shape { op, detail: format!("{layer}: {detail}") },
        other => other,
    })
}

impl<S: Scalar> ProtectorModel<S> {
    pub fn new(width: usize, epsilon: f64, seed: u64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1]")));
        }
        if width < SE_REDUCE || width % SE_REDUCE != 0 {
            return Err(Error::invalid(format!(
                "base width {width} must be a positive multiple of {SE_REDUCE}"
            )));
        }
        let w = width;
        let mut params = ParamSet::new();
        let mut buffers = BufferSet::new();
        let r = &mut rng::stream(seed, "protector-init", 0);
        let (p, b) = (&mut params, &mut buffers);

        let relu = Activation::Relu;
        let enc_block = ConvBlock::new(3, w, 3, 1, 1, relu, r, "enc.block", p, b)?;
        let enc_res = SeResidual::new(w, SE_REDUCE, r, "enc.res", p, b)?;

        let gen_down1 = DownStage::new(w, w, r, "gen.down1", p, b)?;
        let gen_down2 = DownStage::new(w, 2 * w, r, "gen.down2", p, b)?;
        let gen_mid1 = ConvBlock::new(2 * w, 2 * w, 3, 1, 1, relu, r, "gen.mid1", p, b)?;
        let gen_mid2 = ConvBlock::new(2 * w, 2 * w, 3, 1, 1, relu, r, "gen.mid2", p, b)?;
        let gen_up1 = ConvBlock::new(4 * w, 2 * w, 3, 1, 1, relu, r, "gen.up1", p, b)?;
        let gen_up2 = ConvBlock::new(3 * w, w, 3, 1, 1, relu, r, "gen.up2", p, b)?;
        let gen_out = Conv2d::new(w, w, 1, 1, 0, r, "gen.out", p)?;

        let dec_fuse1 = ConvBlock::new(5 * w, 2 * w, 3, 1, 1, relu, r, "dec.fuse1", p, b)?;
        let dec_fuse2 = ConvBlock::new(2 * w, FUSION_CHANNELS, 1, 1, 0, relu, r, "dec.fuse2", p, b)?;
        // plain conv: the four regrouped bands carry signed values
        let dec_regroup = Conv2d::new(FUSION_CHANNELS, 4 * w, 1, 1, 0, r, "dec.regroup", p)?;
        let dec_up1 = DiffConvBlock::new(2 * w, w, r, "dec.up1", p, b)?;
        let dec_up2 = DiffConvBlock::new(w, w, r, "dec.up2", p, b)?;
        let dec_out = Conv2d::new(w, 3, 3, 1, 1, r, "dec.out", p)?;

        let mut disc_params = ParamSet::new();
        let mut disc_buffers = BufferSet::new();
        let dr = &mut rng::stream(seed, "disc-init", 0);
        let (dp, db) = (&mut disc_params, &mut disc_buffers);
        let leaky = Activation::LeakyRelu;
        // first stage has no normalization on purpose
        let disc_conv1 = Conv2d::new(3, w, 4, 2, 1, dr, "disc.conv1", dp)?;
        let disc_block2 = ConvBlock::new(w, 2 * w, 4, 2, 1, leaky, dr, "disc.block2", dp, db)?;
        let disc_block3 = ConvBlock::new(2 * w, 4 * w, 4, 2, 1, leaky, dr, "disc.block3", dp, db)?;
        // zeroed head pins the initial judgement to sigmoid(0) = 0.5
        let disc_head = Linear::zeroed(4 * w, 1, "disc.head", dp)?;

        Ok(ProtectorModel {
            params,
            disc_params,
            buffers,
            disc_buffers,
            fcat: FcatMode::PerturbedLow,
            low_band_only: false,
            epsilon,
            width,
            enc_block,
            enc_res,
            gen_down1,
            gen_down2,
            gen_mid1,
            gen_mid2,
            gen_up1,
            gen_up2,
            gen_out,
            dec_fuse1,
            dec_fuse2,
            dec_regroup,
            dec_up1,
            dec_up2,
            dec_out,
            disc_conv1,
            disc_block2,
            disc_block3,
            disc_head,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Change the budget. Zero is allowed here — it degenerates
    /// [`ProtectorModel::protect`] to the identity and serves as a control —
    /// while the constructor insists on a strictly positive training budget.
    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
        }
        self.epsilon = epsilon;
        Ok(())
    }

    /// Ablation control: zero the generator's output layer so P ≡ 0.
    pub fn disable_perturbation(&self) {
        self.gen_out.zero_fill();
    }

    /// Feature extraction and band split. The input must be N×3×H×W with
    /// even H and W; values are expected in [−1, 1].
    pub fn encode(&self, x_t: &Tensor<S>, mode: Mode) -> Result<EncodedFeatures<S>> {
        let x_conv = layered("enc.block", self.enc_block.forward(x_t, mode))?;
        let x_res = layered("enc.res", self.enc_res.forward(&x_conv, mode))?;
        let (f_low, f_high) = split_fhigh(&dwt2(&x_res)?)?;
        Ok(EncodedFeatures { f_spatial: x_res, f_low, f_high })
    }

    /// U-Net over the low band: two pooled down stages, two bottleneck
    /// blocks, two upsample stages with skip concatenation, 1×1 projection,
    /// tanh. Output shape equals the input shape.
    pub fn generate_perturbation(&self, f_low: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let (_, _, h, w) = f_low.dims4("generate_perturbation")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "generate_perturbation",
                format!("low band {h}x{w} must be divisible by 4 (two pooling stages)"),
            ));
        }
        let (s1, d1) = layered("gen.down1", self.gen_down1.forward(f_low, mode))?;
        let (s2, d2) = layered("gen.down2", self.gen_down2.forward(&d1, mode))?;
        let mid = layered("gen.mid", {
            self.gen_mid1.forward(&d2, mode).and_then(|t| self.gen_mid2.forward(&t, mode))
        })?;
        let u1 = layered(
            "gen.up1",
            concat_channels(&[&upsample_nearest2x(&mid)?, &s2])
                .and_then(|t| self.gen_up1.forward(&t, mode)),
        )?;
        let u2 = layered(
            "gen.up2",
            concat_channels(&[&upsample_nearest2x(&u1)?, &s1])
                .and_then(|t| self.gen_up2.forward(&t, mode)),
        )?;
        Ok(layered("gen.out", self.gen_out.forward(&u2))?.tanh())
    }

    /// Fuse the perturbed bands back to image space: band concatenation,
    /// two fusion blocks into the 256-channel bottleneck, a linear band
    /// regroup, inverse wavelet, skip concatenation with the full-resolution
    /// features, two resize-convolution blocks, output conv, tanh.
    pub fn decode(&self, enc: &EncodedFeatures<S>, p: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let f_cat = match self.fcat {
            FcatMode::PerturbedLow => {
                layered("dec.cat", enc.f_low.add(p).and_then(|low| {
                    concat_channels(&[&low, &enc.f_high, p])
                }))?
            }
            FcatMode::RawLow => {
                layered("dec.cat", concat_channels(&[&enc.f_low, &enc.f_high, p]))?
            }
        };
        let fused = layered("dec.fuse", {
            self.dec_fuse1.forward(&f_cat, mode).and_then(|t| self.dec_fuse2.forward(&t, mode))
        })?;
        let bands4 = layered("dec.regroup", self.dec_regroup.forward(&fused))?;
        let w = self.width;
        let ll = bands4.slice_channels(0, w)?;
        let (hl, lh, hh) = if self.low_band_only {
            // diagnostic: ignore the regrouped high bands, pass the encoder's
            // own detail bands through unchanged
            (
                enc.f_high.slice_channels(0, w)?,
                enc.f_high.slice_channels(w, 2 * w)?,
                enc.f_high.slice_channels(2 * w, 3 * w)?,
            )
        } else {
            (
                bands4.slice_channels(w, 2 * w)?,
                bands4.slice_channels(2 * w, 3 * w)?,
                bands4.slice_channels(3 * w, 4 * w)?,
            )
        };
        let full = layered("dec.iwt", idwt2(&WaveletBands { ll, hl, lh, hh }))?;
        let joined = layered("dec.skip", concat_channels(&[&full, &enc.f_spatial]))?;
        let refined = layered("dec.up", {
            self.dec_up1.forward(&joined, mode).and_then(|t| self.dec_up2.forward(&t, mode))
        })?;
        Ok(layered("dec.out", self.dec_out.forward(&refined))?.tanh())
    }

    /// Full pipeline plus the exact budget projection: the per-pixel
    /// deviation of the result from `x_t` never exceeds 2ε in [−1, 1] units
    /// (ε in [0, 1] pixel units), at any training stage, checked in f64.
    /// The projection clamps with straight-through gradients and the result
    /// stays inside [−1, 1].
    pub fn protect(&self, x_t: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let enc = self.encode(x_t, mode)?;
        let p = self.generate_perturbation(&enc.f_low, mode)?;
        let x_raw = self.decode(&enc, &p, mode)?;
        let guided = if self.low_band_only {
            // project the residual before clamping: clamping a block-constant
            // signal keeps it block-constant, the reverse order would not
            x_t.add(&low_band_projection(&x_raw.sub(x_t)?)?)?
        } else {
            x_raw
        };
        let (band, limit) = budget_band::<S>(self.epsilon);
        guided.budget_project(x_t, band, limit)
    }

    /// Probability in (0, 1) that each image in the batch is unperturbed,
    /// shape N×1. Three stride-2 stages (no normalization on the first),
    /// global average pool, linear head, sigmoid.
    pub fn discriminate(&self, img: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let h = layered("disc.conv1", self.disc_conv1.forward(img))?
            .activation(Activation::LeakyRelu);
        let h = layered("disc.block2", self.disc_block2.forward(&h, mode))?;
        let h = layered("disc.block3", self.disc_block3.forward(&h, mode))?;
        Ok(layered("disc.head", global_avg_pool(&h).and_then(|g| self.disc_head.forward(&g)))?
            .sigmoid())
    }
}
