//! Residual block: SE gate, temporal shift with its 3x3 convolution, then the
//! 1x1 / 3x3 / 1x1 bottleneck, summed with the (projected) block input.

use crate::error::Result;
use crate::nn::{relu, relu_backward, Conv2d, Conv2dCache, Grads, ParamBuilder, ParamStore, RELU_GAIN};
use crate::tensor::Tensor;

use super::se::{SeCache, SqueezeExcite};
use super::shift::{temporal_shift, temporal_shift_backward, ShiftFraction};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub spec: BlockSpec,
    pub se: SqueezeExcite,
    pub shift: ShiftFraction,
    pub shift_conv: Conv2d,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub shortcut: Option<Conv2d>,
}

pub struct BlockCache {
    se: SeCache,
    shift_conv: Conv2dCache,
    shifted_act: Tensor,
    conv1: Conv2dCache,
    act1: Tensor,
    conv2: Conv2dCache,
    act2: Tensor,
    conv3: Conv2dCache,
    shortcut: Option<Conv2dCache>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        spec: BlockSpec,
        se_ratio: usize,
        shift: ShiftFraction,
    ) -> Result<Self> {
        shift.shifted_channels(spec.in_ch)?;
        let BlockSpec {
            in_ch,
            mid_ch,
            out_ch,
            stride,
        } = spec;
        let se = SqueezeExcite::new(&mut pb.pp("se"), in_ch, se_ratio)?;
        let shift_conv = Conv2d::new(&mut pb.pp("shift_conv"), in_ch, in_ch, 3, 1, 1, true, RELU_GAIN);
        let conv1 = Conv2d::new(&mut pb.pp("conv1"), in_ch, mid_ch, 1, 1, 0, true, RELU_GAIN);
        let conv2 = Conv2d::new(&mut pb.pp("conv2"), mid_ch, mid_ch, 3, stride, 1, true, RELU_GAIN);
        let conv3 = Conv2d::new(&mut pb.pp("conv3"), mid_ch, out_ch, 1, 1, 0, true, 1.0);
        let shortcut = (in_ch != out_ch || stride != 1)
            .then(|| Conv2d::new(&mut pb.pp("shortcut"), in_ch, out_ch, 1, stride, 0, true, 1.0));
        Ok(ResBlock {
            spec,
            se,
            shift,
            shift_conv,
            conv1,
            conv2,
            conv3,
            shortcut,
        })
    }

    /// `x` is `[clips * frames, H, W, in_ch]`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, frames: usize) -> Result<(Tensor, BlockCache)> {
        let (gated, se) = self.se.forward(ps, x)?;
        let shifted = temporal_shift(&gated, frames, self.shift)?;
        let (pre, shift_conv) = self.shift_conv.forward(ps, &shifted)?;
        let shifted_act = relu(&pre);
        let (pre, conv1) = self.conv1.forward(ps, &shifted_act)?;
        let act1 = relu(&pre);
        let (pre, conv2) = self.conv2.forward(ps, &act1)?;
        let act2 = relu(&pre);
        let (mut out, conv3) = self.conv3.forward(ps, &act2)?;
        let shortcut = match &self.shortcut {
            Some(proj) => {
                let (s, cache) = proj.forward(ps, x)?;
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        Ok((
            out,
            BlockCache {
                se,
                shift_conv,
                shifted_act,
                conv1,
                act1,
                conv2,
                act2,
                conv3,
                shortcut,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &BlockCache,
        dy: &Tensor,
        frames: usize,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let d = self.conv3.backward(ps, &cache.conv3, dy, grads)?;
        let d = relu_backward(&cache.act2, &d);
        let d = self.conv2.backward(ps, &cache.conv2, &d, grads)?;
        let d = relu_backward(&cache.act1, &d);
        let d = self.conv1.backward(ps, &cache.conv1, &d, grads)?;
        let d = relu_backward(&cache.shifted_act, &d);
        let d = self.shift_conv.backward(ps, &cache.shift_conv, &d, grads)?;
        let d = temporal_shift_backward(&d, frames, self.shift)?;
        let mut dx = self.se.backward(ps, &cache.se, &d, grads)?;
        match (&self.shortcut, &cache.shortcut) {
            (Some(proj), Some(c)) => dx.add_assign(&proj.backward(ps, c, dy, grads)?),
            _ => dx.add_assign(dy),
        }
        Ok(dx)
    }
}
