//! Differentiable face-swap stand-in: an identity encoder condenses the
//! source into a 64-dim vector, an attribute encoder keeps the target as a
//! spatial map, and a fusion decoder injects the identity via per-channel
//! affine modulation while reconstructing an image. Trained on synthetic
//! faces whose true identity/attribute factors are known, so identity
//! transfer is directly measurable.

use crate::dataio::{batch_tensor, render_face, Dataset, FaceSpec, Image};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, BufferSet, Conv2d, ConvBlock, Linear, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{
    concat_channels, global_avg_pool, upsample_nearest2x, Activation, Adam, Mode, Reduce,
    Tensor,
};

pub const ID_VECTOR_LEN: usize = 64;
const BATCH: usize = 8;
const LR: f64 = 1e-3;

/// Face-swap network plus two factor-regression heads used for supervision
/// and for measuring identity transfer.
pub struct SwapModel<S: Scalar> {
    pub params: ParamSet<S>,
    pub buffers: BufferSet<S>,
    id_conv1: Conv2d<S>,
    id_conv2: Conv2d<S>,
    id_conv3: Conv2d<S>,
    id_fc: Linear<S>,
    id_head: Linear<S>,
    at_block1: ConvBlock<S>,
    at_block2: ConvBlock<S>,
    at_block3: ConvBlock<S>,
    attr_head: Linear<S>,
    de_conv1: Conv2d<S>,
    de_bn1: BatchNorm2d<S>,
    fc_gamma: Linear<S>,
    fc_beta: Linear<S>,
    de_block2: ConvBlock<S>,
    de_block3: ConvBlock<S>,
    de_block4: ConvBlock<S>,
    de_out: Conv2d<S>,
}

impl<S: Scalar> SwapModel<S> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "swap-init", 0);
        let mut p = ParamSet::new();
        let mut b = BufferSet::new();
        let model = SwapModel {
            id_conv1: Conv2d::new(3, 8, 3, 2, 1, &mut r, "id.conv1", &mut p)?,
            id_conv2: Conv2d::new(8, 16, 3, 2, 1, &mut r, "id.conv2", &mut p)?,
            id_conv3: Conv2d::new(16, 32, 3, 2, 1, &mut r, "id.conv3", &mut p)?,
            id_fc: Linear::new(32, ID_VECTOR_LEN, &mut r, "id.fc", &mut p)?,
            id_head: Linear::new(ID_VECTOR_LEN, 8, &mut r, "id.head", &mut p)?,
            at_block1: ConvBlock::new(
                3,
                16,
                3,
                2,
                1,
                Activation::Relu,
                &mut r,
                "attr.block1",
                &mut p,
                &mut b,
            )?,
            at_block2: ConvBlock::new(
                16,
                32,
                3,
                2,
                1,
                Activation::Relu,
                &mut r,
                "attr.block2",
                &mut p,
                &mut b,
            )?,
            // Narrow, coarse attribute features: enough for colors, lighting
            // and expression, too little bandwidth to smuggle the target's
            // face geometry past the identity vector.
            at_block3: ConvBlock::new(
                32,
                8,
                3,
                2,
                1,
                Activation::Relu,
                &mut r,
                "attr.block3",
                &mut p,
                &mut b,
            )?,
            attr_head: Linear::new(8, 6, &mut r, "attr.head", &mut p)?,
            de_conv1: Conv2d::new(10, 48, 3, 1, 1, &mut r, "dec.conv1", &mut p)?,
            de_bn1: BatchNorm2d::new(48, "dec.bn1", &mut p, &mut b)?,
            fc_gamma: Linear::new(ID_VECTOR_LEN, 48, &mut r, "dec.gamma", &mut p)?,
            fc_beta: Linear::new(ID_VECTOR_LEN, 48, &mut r, "dec.beta", &mut p)?,
            de_block2: ConvBlock::new(
                48,
                24,
                3,
                1,
                1,
                Activation::Relu,
                &mut r,
                "dec.block2",
                &mut p,
                &mut b,
            )?,
            de_block3: ConvBlock::new(
                24,
                12,
                3,
                1,
                1,
                Activation::Relu,
                &mut r,
                "dec.block3",
                &mut p,
                &mut b,
            )?,
            de_block4: ConvBlock::new(
                12,
                12,
                3,
                1,
                1,
                Activation::Relu,
                &mut r,
                "dec.block4",
                &mut p,
                &mut b,
            )?,
            de_out: Conv2d::new(12, 3, 3, 1, 1, &mut r, "dec.out", &mut p)?,
            params: p,
            buffers: b,
        };
        Ok(model)
    }

    /// Source identity condensed to an N×64 vector.
    pub fn identity_vector(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.id_conv1.forward(x)?.relu();
        let h = self.id_conv2.forward(&h)?.relu();
        let h = self.id_conv3.forward(&h)?.relu();
        Ok(self.id_fc.forward(&global_avg_pool(&h)?)?.relu())
    }

    /// Predicted identity factors (normalized to [0, 1]), N×8.
    pub fn predict_identity(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.id_head.forward(&self.identity_vector(x)?)?.sigmoid())
    }

    fn attribute_features(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let h = self.at_block1.forward(x, mode)?;
        let h = self.at_block2.forward(&h, mode)?;
        self.at_block3.forward(&h, mode)
    }

    /// Predicted attribute factors (normalized to [0, 1]), N×6.
    pub fn predict_attributes(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let feats = self.attribute_features(x, mode)?;
        Ok(self
            .attr_head
            .forward(&global_avg_pool(&feats)?)?
            .sigmoid())
    }

    /// y = swap(source, target): the source's identity rendered in the
    /// target's context. Differentiable w.r.t. both inputs.
    pub fn swap(&self, x_src: &Tensor<S>, x_tgt: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        if x_src.shape() != x_tgt.shape() {
            return Err(Error::shape(
                "swap",
                format!("source {:?} vs target {:?}", x_src.shape(), x_tgt.shape()),
            ));
        }
        let z = self.identity_vector(x_src)?;
        let feats = self.attribute_features(x_tgt, mode)?;
        let fs = feats.shape().to_vec();
        let coords = coord_channels::<S>(fs[0], fs[2], fs[3]);
        let seeded = concat_channels(&[&feats, &coords])?;
        let h = self.de_bn1.forward(&self.de_conv1.forward(&seeded)?, mode)?;
        let scale = self.fc_gamma.forward(&z)?.affine(S::one(), S::one());
        let shift = self.fc_beta.forward(&z)?;
        let ones = Tensor::full(h.shape(), S::one());
        let h = h
            .mul_channels(&scale)?
            .add(&ones.mul_channels(&shift)?)?
            .relu();
        let h = self.de_block2.forward(&upsample_nearest2x(&h)?, mode)?;
        let h = self.de_block3.forward(&upsample_nearest2x(&h)?, mode)?;
        let h = self.de_block4.forward(&upsample_nearest2x(&h)?, mode)?;
        Ok(self.de_out.forward(&h)?.tanh())
    }
}

/// Constant x/y coordinate channels in [−1, 1], shape N×2×H×W; gives the
/// renderer-like decoder an absolute position reference.
fn coord_channels<S: Scalar>(n: usize, h: usize, w: usize) -> Tensor<S> {
    let mut out = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for _ in 0..h {
            for x in 0..w {
                out.push(S::lit(2.0 * (x as f64 + 0.5) / w as f64 - 1.0));
            }
        }
        for y in 0..h {
            let vy = S::lit(2.0 * (y as f64 + 0.5) / h as f64 - 1.0);
            out.extend(std::iter::repeat_n(vy, w));
        }
    }
    Tensor::from_vec(&[n, 2, h, w], out).expect("coordinate channels")
}

fn factor_targets<S: Scalar>(specs: &[&FaceSpec]) -> (Tensor<S>, Tensor<S>) {
    let mut ids = Vec::with_capacity(specs.len() * 8);
    let mut attrs = Vec::with_capacity(specs.len() * 6);
    for s in specs {
        ids.extend(s.identity.normalized().iter().map(|v| S::lit(*v)));
        attrs.extend(s.attributes.normalized().iter().map(|v| S::lit(*v)));
    }
    (
        Tensor::from_vec(&[specs.len(), 8], ids).expect("identity targets"),
        Tensor::from_vec(&[specs.len(), 6], attrs).expect("attribute targets"),
    )
}

fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let d = a.sub(b)?;
    Ok(d.mul(&d)?.reduce(Reduce::Mean))
}

fn mae<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(a.sub(b)?.reduce(Reduce::L1Norm))
}

/// Trains the swap network on a face dataset. Supervision combines
/// self-swap reconstruction, cross-swap reconstruction against the renderer's
/// ground truth for (source identity, target attributes), and factor
/// regression on both real and swapped images. Returns the model and the
/// per-epoch mean training loss.
pub fn train_surrogate<S: Scalar>(
    data: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<(SwapModel<S>, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train the swap model on no data"));
    }
    let model = SwapModel::<S>::new(seed)?;
    let mut opt = Adam::new(LR);
    let n = data.len();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        // step-decay schedule: the tail of training is spent polishing sharp
        // facial features, which stalls at a fixed step size
        let frac = epoch as f64 / epochs.max(1) as f64;
        opt.lr = LR * if frac >= 0.9 { 0.25 } else if frac >= 0.75 { 0.5 } else { 1.0 };
        let order = rng::permutation(&mut rng::stream(seed, "swap-order", epoch as u64), n);
        let partner = rng::permutation(&mut rng::stream(seed, "swap-pairs", epoch as u64), n);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(BATCH) {
            let src_items: Vec<&(Image, FaceSpec)> = chunk.iter().map(|&i| &data.items[i]).collect();
            let tgt_items: Vec<&(Image, FaceSpec)> =
                chunk.iter().map(|&i| &data.items[partner[i]]).collect();
            let x_src = batch_tensor::<S>(&src_items.iter().map(|p| &p.0).collect::<Vec<_>>())?;
            let x_tgt = batch_tensor::<S>(&tgt_items.iter().map(|p| &p.0).collect::<Vec<_>>())?;
            let cross_truth: Vec<Image> = src_items
                .iter()
                .zip(&tgt_items)
                .map(|(s, t)| render_face(&s.1.with_attributes(t.1.attributes), data.resolution))
                .collect::<Result<_>>()?;
            let x_cross = batch_tensor::<S>(&cross_truth.iter().collect::<Vec<_>>())?;
            let (src_ids, _) = factor_targets::<S>(&src_items.iter().map(|p| &p.1).collect::<Vec<_>>());
            let (_, tgt_attrs) =
                factor_targets::<S>(&tgt_items.iter().map(|p| &p.1).collect::<Vec<_>>());

            let y_self = model.swap(&x_src, &x_src, Mode::Train)?;
            let y_cross = model.swap(&x_src, &x_tgt, Mode::Train)?;
            let l_rec = mae(&y_self, &x_src)?
                .affine(S::lit(1.5), S::zero())
                .add(&mae(&y_cross, &x_cross)?.affine(S::lit(2.0), S::zero()))?;
            let l_id = mse(&model.predict_identity(&x_src)?, &src_ids)?
                .add(&mse(&model.predict_identity(&y_cross)?, &src_ids)?)?;
            let l_attr = mse(&model.predict_attributes(&x_tgt, Mode::Train)?, &tgt_attrs)?
                .add(&mse(&model.predict_attributes(&y_cross, Mode::Train)?, &tgt_attrs)?)?;
            let loss = l_rec.add(&l_id.affine(S::lit(0.5), S::zero()))?.add(
                &l_attr.affine(S::lit(0.5), S::zero()),
            )?;
            let val = loss.item()?.to_f64x();
            if !val.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite swap-training loss {val} at epoch {epoch}"
                )));
            }
            loss.backward()?;
            opt.step(&model.params)?;
            model.params.zero_grad();
            epoch_sum += val;
            batches += 1;
        }
        epoch_losses.push(epoch_sum / batches as f64);
    }
    Ok((model, epoch_losses))
}

/// Mean self-swap L1 reconstruction error over a split, in [0, 1] pixel
/// units (swap(x, x) should give back x).
pub fn self_swap_l1<S: Scalar>(model: &SwapModel<S>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty split"));
    }
    let mut total = 0.0;
    for chunk in data.items.chunks(BATCH) {
        let x = batch_tensor::<S>(&chunk.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        let y = model.swap(&x, &x, Mode::Eval)?;
        let l1 = y.sub(&x)?.reduce(Reduce::L1Norm).item()?.to_f64x();
        total += l1 / 2.0 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Fraction of swapped pairs whose regressed identity factors sit closer to
/// the source's true factors than to the target's. Pairs each image with its
/// successor in the split.
pub fn identity_transfer_rate<S: Scalar>(model: &SwapModel<S>, data: &Dataset) -> Result<f64> {
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid("identity transfer needs at least 2 images"));
    }
    let mut closer = 0usize;
    for i in 0..n {
        let (src_img, src_spec) = &data.items[i];
        let (tgt_img, tgt_spec) = &data.items[(i + 1) % n];
        let x_src = batch_tensor::<S>(&[src_img])?;
        let x_tgt = batch_tensor::<S>(&[tgt_img])?;
        let y = model.swap(&x_src, &x_tgt, Mode::Eval)?;
        let pred = model.predict_identity(&y)?.to_vec();
        let dist = |truth: [f64; 8]| -> f64 {
            pred.iter()
                .zip(truth)
                .map(|(p, t)| (p.to_f64x() - t).powi(2))
                .sum()
        };
        if dist(src_spec.identity.normalized()) < dist(tgt_spec.identity.normalized()) {
            closer += 1;
        }
    }
    Ok(closer as f64 / n as f64)
}

/// Mean L1 distance (in [0, 1] units) between swap outputs for clean versus
/// perturbed targets — the quantity the protector maximizes.
pub fn swap_shift<S: Scalar>(
    model: &SwapModel<S>,
    x_src: &Tensor<S>,
    x_tgt: &Tensor<S>,
    x_tgt_perturbed: &Tensor<S>,
) -> Result<f64> {
    let clean = model.swap(x_src, x_tgt, Mode::Eval)?;
    let shifted = model.swap(x_src, x_tgt_perturbed, Mode::Eval)?;
    Ok(shifted.sub(&clean)?.reduce(Reduce::L1Norm).item()?.to_f64x() / 2.0)
}
