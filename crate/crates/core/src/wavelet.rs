//! One-level orthonormal 2-D Haar analysis/synthesis with named bands.
//!
//! [`dwt2`] halves each spatial extent and quadruples channels; the transform
//! is orthonormal, so it preserves energy exactly (up to rounding) and its
//! adjoint equals its inverse — which is also how the gradients flow.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, haar2_forward, haar2_inverse, Tensor};

/// The four subbands of one analysis level, each NxCxH/2xW/2.
#[derive(Debug)]
pub struct WaveletBands<S: Scalar> {
    /// Low-pass in both directions: the coarse image.
    pub ll: Tensor<S>,
    /// Horizontal detail (high-pass across rows).
    pub hl: Tensor<S>,
    /// Vertical detail.
    pub lh: Tensor<S>,
    /// Diagonal detail.
    pub hh: Tensor<S>,
}

/// Analyze NxCxHxW (H, W even) into four bands.
pub fn dwt2<S: Scalar>(x: &Tensor<S>) -> Result<WaveletBands<S>> {
    let stacked = haar2_forward(x)?;
    let c = x.shape()[1];
    Ok(WaveletBands {
        ll: stacked.slice_channels(0, c)?,
        hl: stacked.slice_channels(c, 2 * c)?,
        lh: stacked.slice_channels(2 * c, 3 * c)?,
        hh: stacked.slice_channels(3 * c, 4 * c)?,
    })
}

/// Synthesize the image back from four equally-shaped bands.
pub fn idwt2<S: Scalar>(bands: &WaveletBands<S>) -> Result<Tensor<S>> {
    for (name, band) in [("hl", &bands.hl), ("lh", &bands.lh), ("hh", &bands.hh)] {
        if band.shape() != bands.ll.shape() {
            return Err(Error::shape(
                "idwt2",
                format!(
                    "band {name} has shape {:?}, ll has {:?}",
                    band.shape(),
                    bands.ll.shape()
                ),
            ));
        }
    }
    let stacked = concat_channels(&[&bands.ll, &bands.hl, &bands.lh, &bands.hh])?;
    haar2_inverse(&stacked)
}

/// The low band plus the three detail bands stacked [HL | LH | HH] on the
/// channel axis — the layout the perturbation generator and decoder consume.
pub fn split_fhigh<S: Scalar>(bands: &WaveletBands<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let f_high = concat_channels(&[&bands.hl, &bands.lh, &bands.hh])?;
    Ok((bands.ll.clone(), f_high))
}
