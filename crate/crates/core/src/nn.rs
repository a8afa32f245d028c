//! Thin layer wrappers binding parameter ids to tape ops.

use crate::error::Result;
use crate::tensor::{Float, ParamBuilder, ParamId, ParamStore, Tape, Var};

/// `k×k` convolution, padding `k/2` unless overridden.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let (weight, bias) = pb.conv(name, c_out, c_in, k, bias)?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-channel `k×k` convolution.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Depthwise {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let (weight, bias) = pb.conv(name, channels, 1, k, bias)?;
        Ok(Depthwise {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.depthwise_conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Depthwise `k×k` followed by a pointwise `1×1`.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: Depthwise,
    pub pointwise: Conv,
}

impl SeparableConv {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        Ok(SeparableConv {
            depthwise: Depthwise::new(pb, &format!("{name}.dw"), c_in, k, 1, bias)?,
            pointwise: Conv::new(pb, &format!("{name}.pw"), c_in, c_out, 1, 1, bias)?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let d = self.depthwise.forward(tape, store, x)?;
        self.pointwise.forward(tape, store, d)
    }
}

/// Spatial extents of a `C×H×W` var.
pub fn hw<T: Float>(tape: &Tape<T>, v: Var) -> (usize, usize) {
    let s = tape.shape(v);
    (s[1], s[2])
}

pub fn channels<T: Float>(tape: &Tape<T>, v: Var) -> usize {
    tape.shape(v)[0]
}

/// `C×H×W → C×(H·W)`.
pub fn flatten<T: Float>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    tape.reshape(v, &[s[0], s[1] * s[2]])
}
