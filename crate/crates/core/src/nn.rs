//! Layer vocabulary shared by the networks: seeded convolution / linear /
//! batch-norm layers plus the composite blocks (conv-bn-act, SE residual,
//! resize-convolution). Constructors register trainable tensors into a
//! [`ParamSet`] and running statistics into a [`BufferSet`] under dotted
//! names so checkpoints can address every piece of state.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    avg_pool2d, batch_norm2d, conv2d, fully_connected, global_avg_pool, upsample_nearest2x,
    Activation, BnStats, Mode, Tensor,
};
use rand_core::RngCore;
use std::sync::Arc;

pub use crate::tensor::ParamSet;

/// Named registry of batch-norm running statistics. Parameters updated by the
/// optimizer live in a [`ParamSet`]; these buffers change during forward
/// passes in train mode and must be checkpointed separately.
pub struct BufferSet<S: Scalar> {
    items: Vec<(String, Arc<BnStats<S>>)>,
}

impl<S: Scalar> BufferSet<S> {
    pub fn new() -> Self {
        BufferSet { items: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, stats: Arc<BnStats<S>>) -> Result<()> {
        let name = name.into();
        if self.items.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invalid(format!("duplicate buffer name {name}")));
        }
        self.items.push((name, stats));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<BnStats<S>>)> {
        self.items.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn get(&self, name: &str) -> Option<&Arc<BnStats<S>>> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    /// (mean, var) snapshot per buffer, in registration order.
    pub fn snapshot(&self) -> Vec<(String, Vec<S>, Vec<S>)> {
        self.items
            .iter()
            .map(|(n, s)| {
                (
                    n.clone(),
                    s.mean.lock().unwrap().clone(),
                    s.var.lock().unwrap().clone(),
                )
            })
            .collect()
    }

    pub fn restore(&self, name: &str, mean: &[S], var: &[S]) -> Result<()> {
        let stats = self
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown buffer {name}")))?;
        if mean.len() != stats.channels() || var.len() != stats.channels() {
            return Err(Error::Invalid(format!(
                "buffer {name} expects {} channels, got {}/{}",
                stats.channels(),
                mean.len(),
                var.len()
            )));
        }
        stats.mean.lock().unwrap().copy_from_slice(mean);
        stats.var.lock().unwrap().copy_from_slice(var);
        Ok(())
    }
}

impl<S: Scalar> Default for BufferSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn kaiming_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl RngCore) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng).with_grad()
}

/// 2D convolution layer with Kaiming-uniform weights and zero bias.
pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl RngCore,
        name: &str,
        params: &mut ParamSet<S>,
    ) -> Result<Self> {
        let weight = kaiming_uniform(&[out_c, in_c, k, k], in_c * k * k, rng);
        let bias = Tensor::zeros(&[out_c]).with_grad();
        params.add(format!("{name}.weight"), &weight)?;
        params.add(format!("{name}.bias"), &bias)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    /// Overwrite weight and bias with zeros (ablation control: forces the
    /// layer output to zero regardless of input).
    pub fn zero_fill(&self) {
        self.weight
            .set_data(vec![S::zero(); self.weight.numel()])
            .expect("weight zero fill");
        self.bias
            .set_data(vec![S::zero(); self.bias.numel()])
            .expect("bias zero fill");
    }
}

/// Batch normalization layer owning its running statistics.
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub stats: Arc<BnStats<S>>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(
        channels: usize,
        name: &str,
        params: &mut ParamSet<S>,
        buffers: &mut BufferSet<S>,
    ) -> Result<Self> {
        let gamma = Tensor::full(&[channels], S::one()).with_grad();
        let beta = Tensor::zeros(&[channels]).with_grad();
        params.add(format!("{name}.gamma"), &gamma)?;
        params.add(format!("{name}.beta"), &beta)?;
        let stats = Arc::new(BnStats::new(channels));
        buffers.add(format!("{name}.stats"), Arc::clone(&stats))?;
        Ok(BatchNorm2d { gamma, beta, stats })
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        batch_norm2d(x, &self.gamma, &self.beta, &self.stats, mode)
    }
}

/// Fully-connected layer; `zeroed` constructor pins the initial output to the
/// bias (used where a well-defined start value such as sigmoid(0) is wanted).
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(
        in_f: usize,
        out_f: usize,
        rng: &mut impl RngCore,
        name: &str,
        params: &mut ParamSet<S>,
    ) -> Result<Self> {
        let weight = kaiming_uniform(&[in_f, out_f], in_f, rng);
        let bias = Tensor::zeros(&[out_f]).with_grad();
        params.add(format!("{name}.weight"), &weight)?;
        params.add(format!("{name}.bias"), &bias)?;
        Ok(Linear { weight, bias })
    }

    pub fn zeroed(
        in_f: usize,
        out_f: usize,
        name: &str,
        params: &mut ParamSet<S>,
    ) -> Result<Self> {
        let weight = Tensor::zeros(&[in_f, out_f]).with_grad();
        let bias = Tensor::zeros(&[out_f]).with_grad();
        params.add(format!("{name}.weight"), &weight)?;
        params.add(format!("{name}.bias"), &bias)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        fully_connected(x, &self.weight, &self.bias)
    }
}

/// conv → batch norm → activation.
pub struct ConvBlock<S: Scalar> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
    pub act: Activation,
}

impl<S: Scalar> ConvBlock<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        act: Activation,
        rng: &mut impl RngCore,
        name: &str,
        params: &mut ParamSet<S>,
        buffers: &mut BufferSet<S>,
    ) -> Result<Self> {
        let conv = Conv2d::new(in_c, out_c, k, stride, pad, rng, &format!("{name}.conv"), params)?;
        let bn = BatchNorm2d::new(out_c, &format!("{name}.bn"), params, buffers)?;
        Ok(ConvBlock { conv, bn, act })
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.activation(self.act))
    }
}

/// Residual block with a squeeze-and-excitation gate: two conv-bn stages,
/// channel attention (global average pool → bottleneck FC pair → sigmoid),
/// identity skip, relu. The gate's second FC starts zeroed so every channel
/// is initially scaled by sigmoid(0) = 0.5.
pub struct SeResidual<S: Scalar> {
    pub conv1: Conv2d<S>,
    pub bn1: BatchNorm2d<S>,
    pub conv2: Conv2d<S>,
    pub bn2: BatchNorm2d<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> SeResidual<S> {
    pub fn new(
        channels: usize,
        reduce: usize,
        rng: &mut impl RngCore,
        name: &str,
        params: &mut ParamSet<S>,
        buffers: &mut BufferSet<S>,
    ) -> Result<Self> {
        let mid = (channels / reduce).max(1);
        Ok(SeResidual {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng, &format!("{name}.conv1"), params)?,
            bn1: BatchNorm2d::new(channels, &format!("{name}.bn1"), params, buffers)?,
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng, &format!("{name}.conv2"), params)?,
            bn2: BatchNorm2d::new(channels, &format!("{name}.bn2"), params, buffers)?,
            fc1: Linear::new(channels, mid, rng, &format!("{name}.fc1"), params)?,
            fc2: Linear::zeroed(mid, channels, &format!("{name}.fc2"), params)?,
        })
    }

    /// Channel gate in (0, 1) for a feature map, shape N×C.
    pub fn gate(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let squeezed = global_avg_pool(features)?;
        Ok(self.fc2.forward(&self.fc1.forward(&squeezed)?.relu())?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let branch = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let branch = self.bn2.forward(&self.conv2.forward(&branch)?, mode)?;
        let gated = branch.mul_channels(&self.gate(&branch)?)?;
        Ok(gated.add(x)?.relu())
    }
}

/// Resize-convolution block: nearest-neighbor upsample ×2, stride-2 conv,
/// batch norm, relu. The upsample/stride pair cancels, so resolution is
/// preserved while avoiding the checkerboard artifacts of transposed
/// convolutions.
pub struct DiffConvBlock<S: Scalar> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

impl<S: Scalar> DiffConvBlock<S> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        rng: &mut impl RngCore,
        name: &str,
        params: &mut ParamSet<S>,
        buffers: &mut BufferSet<S>,
    ) -> Result<Self> {
        Ok(DiffConvBlock {
            conv: Conv2d::new(in_c, out_c, 3, 2, 1, rng, &format!("{name}.conv"), params)?,
            bn: BatchNorm2d::new(out_c, &format!("{name}.bn"), params, buffers)?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let up = upsample_nearest2x(x)?;
        Ok(self.bn.forward(&self.conv.forward(&up)?, mode)?.relu())
    }
}

/// Downsampling stage used by the U-Net path: conv block then 2×2 mean pool.
pub struct DownStage<S: Scalar> {
    pub block: ConvBlock<S>,
}

impl<S: Scalar> DownStage<S> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        rng: &mut impl RngCore,
        name: &str,
        params: &mut ParamSet<S>,
        buffers: &mut BufferSet<S>,
    ) -> Result<Self> {
        Ok(DownStage {
            block: ConvBlock::new(
                in_c,
                out_c,
                3,
                1,
                1,
                Activation::Relu,
                rng,
                name,
                params,
                buffers,
            )?,
        })
    }

    /// Returns (skip features at input resolution, pooled features).
    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Tensor<S>)> {
        let skip = self.block.forward(x, mode)?;
        let down = avg_pool2d(&skip, 2)?;
        Ok((skip, down))
    }
}
