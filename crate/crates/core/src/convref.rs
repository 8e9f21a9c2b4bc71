//! Naive reference convolutions used as the validation oracle.
//!
//! Cross-correlation (no kernel flip) with zero padding. Every output value
//! is accumulated from 0 over `(i, k_h, k_w)` in ascending order and the bias
//! is added last, so differently structured but algebraically identical
//! kernels produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::decouple::{ConvKernel, DecoupledKernel, Ordering};
use crate::error::{Error, Result};
use crate::tensor::{Tensor3, Tensor4};

/// Stride and zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride must be positive, got {:?}",
                self.stride
            )));
        }
        Ok(())
    }

    /// `floor((H + 2p - k) / s) + 1` per axis; errors when the kernel does
    /// not fit inside the padded input.
    pub fn output_hw(
        &self,
        in_hw: (usize, usize),
        kernel_hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = n + 2 * p;
            if padded < k || n == 0 {
                return Err(Error::Shape(format!(
                    "kernel {kernel_hw:?} with padding {:?} does not fit input {in_hw:?}",
                    self.padding
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(in_hw.0, kernel_hw.0, self.stride.0, self.padding.0)?,
            axis(in_hw.1, kernel_hw.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Regular convolution `y_o = Σ_i W_{o,i} * x_i (+ b_o)`.
pub fn conv_regular(x: &Tensor3, k: &ConvKernel) -> Result<Tensor3> {
    conv2d(x, k.weight(), k.bias(), k.spec()).map_err(|e| e.in_layer(k.name()))
}

/// Regular convolution on a bare weight tensor.
pub fn conv2d(x: &Tensor3, w: &Tensor4, bias: Option<&[f64]>, spec: ConvSpec) -> Result<Tensor3> {
    let [n_o, n_i, k_h, k_w] = w.shape();
    let [c, in_h, in_w] = x.shape();
    if c != n_i {
        return Err(Error::Shape(format!(
            "input has {c} channels, kernel expects {n_i}"
        )));
    }
    check_bias(bias, n_o)?;
    let (out_h, out_w) = spec.output_hw((in_h, in_w), (k_h, k_w))?;
    let mut y = Tensor3::zeros([n_o, out_h, out_w]);
    let wd = w.data();
    let xd = x.data();
    let out = y.data_mut();
    for o in 0..n_o {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for i in 0..n_i {
                    for ky in 0..k_h {
                        let Some(iy) = tap(oy, ky, spec.stride.0, spec.padding.0, in_h) else {
                            continue;
                        };
                        for kx in 0..k_w {
                            let Some(ix) = tap(ox, kx, spec.stride.1, spec.padding.1, in_w) else {
                                continue;
                            };
                            acc += wd[((o * n_i + i) * k_h + ky) * k_w + kx]
                                * xd[(i * in_h + iy) * in_w + ix];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[o];
                }
                out[(o * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Ok(y)
}

/// Per-channel spatial convolution with `d` of shape `(c, 1, k_h, k_w)`.
pub fn conv_depthwise(x: &Tensor3, d: &Tensor4, spec: ConvSpec) -> Result<Tensor3> {
    let [c, one, k_h, k_w] = d.shape();
    let [xc, in_h, in_w] = x.shape();
    if one != 1 || c != xc {
        return Err(Error::Shape(format!(
            "depthwise kernel {:?} does not match {xc} input channels",
            d.shape()
        )));
    }
    let (out_h, out_w) = spec.output_hw((in_h, in_w), (k_h, k_w))?;
    let mut y = Tensor3::zeros([c, out_h, out_w]);
    let dd = d.data();
    let xd = x.data();
    let out = y.data_mut();
    for ch in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for ky in 0..k_h {
                    let Some(iy) = tap(oy, ky, spec.stride.0, spec.padding.0, in_h) else {
                        continue;
                    };
                    for kx in 0..k_w {
                        let Some(ix) = tap(ox, kx, spec.stride.1, spec.padding.1, in_w) else {
                            continue;
                        };
                        acc += dd[(ch * k_h + ky) * k_w + kx] * xd[(ch * in_h + iy) * in_w + ix];
                    }
                }
                out[(ch * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Ok(y)
}

/// 1×1 channel mixing with `p` of shape `(n_o, n_i, 1, 1)`.
pub fn conv_pointwise(x: &Tensor3, p: &Tensor4) -> Result<Tensor3> {
    let [n_o, n_i, k_h, k_w] = p.shape();
    let [c, h, w] = x.shape();
    if k_h != 1 || k_w != 1 || n_i != c {
        return Err(Error::Shape(format!(
            "pointwise kernel {:?} does not match {c} input channels",
            p.shape()
        )));
    }
    let plane = h * w;
    let mut y = Tensor3::zeros([n_o, h, w]);
    let pd = p.data();
    let xd = x.data();
    let out = y.data_mut();
    for o in 0..n_o {
        for pos in 0..plane {
            let mut acc = 0.0;
            for i in 0..n_i {
                acc += pd[o * n_i + i] * xd[i * plane + pos];
            }
            out[o * plane + pos] = acc;
        }
    }
    Ok(y)
}

/// Sum of the separable blocks of `dk`, bias added once at the end.
pub fn conv_decoupled(x: &Tensor3, dk: &DecoupledKernel) -> Result<Tensor3> {
    let run = || -> Result<Tensor3> {
        let [n_o, n_i, _, _] = dk.source_shape();
        if x.channels() != n_i {
            return Err(Error::Shape(format!(
                "input has {} channels, kernel expects {n_i}",
                x.channels()
            )));
        }
        let mut sum: Option<Tensor3> = None;
        for block in dk.blocks() {
            let y = match dk.ordering() {
                Ordering::DwPw => {
                    let z = conv_depthwise(x, &block.depthwise, dk.spec())?;
                    conv_pointwise(&z, &block.pointwise)?
                }
                Ordering::PwDw => {
                    let z = conv_pointwise(x, &block.pointwise)?;
                    conv_depthwise(&z, &block.depthwise, dk.spec())?
                }
            };
            match sum.as_mut() {
                None => sum = Some(y),
                Some(acc) => acc.add_assign(&y)?,
            }
        }
        let mut y = sum.ok_or_else(|| Error::Shape("decoupled kernel has no blocks".into()))?;
        if let Some(b) = dk.bias() {
            check_bias(Some(b), n_o)?;
            let [_, h, w] = y.shape();
            for (o, chunk) in y.data_mut().chunks_mut(h * w).enumerate() {
                for v in chunk {
                    *v += b[o];
                }
            }
        }
        Ok(y)
    };
    run().map_err(|e| e.in_layer(dk.name()))
}

#[inline]
fn tap(out: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (out * stride + k).checked_sub(pad).filter(|&p| p < len)
}

fn check_bias(bias: Option<&[f64]>, n_o: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != n_o => Err(Error::Shape(format!(
            "bias has {} values for {n_o} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}
