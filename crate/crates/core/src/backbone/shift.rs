//! Parameter-free temporal channel shift.
//!
//! With `k = C * fraction`, channels `[0, k)` of frame `t` take their values
//! from frame `t - 1` and channels `[k, 2k)` from frame `t + 1`; frames that
//! fall off either end of the clip contribute zeros. The remaining channels
//! pass through untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftFraction {
    pub num: usize,
    pub den: usize,
}

impl ShiftFraction {
    pub const EIGHTH: ShiftFraction = ShiftFraction { num: 1, den: 8 };

    /// Number of channels moved in each temporal direction.
    pub fn shifted_channels(self, channels: usize) -> Result<usize> {
        if self.den == 0 || !(channels * self.num).is_multiple_of(self.den) {
            return Err(Error::Config(format!(
                "{} channels x {}/{} is not an integer",
                channels, self.num, self.den
            )));
        }
        let k = channels * self.num / self.den;
        if k == 0 || 2 * k > channels {
            return Err(Error::Config(format!(
                "shift of {k} channels each way is invalid for {channels} channels"
            )));
        }
        Ok(k)
    }
}

impl Default for ShiftFraction {
    fn default() -> Self {
        Self::EIGHTH
    }
}

fn check(x: &Tensor, frames: usize) -> Result<(usize, usize, usize)> {
    let (b, h, w, c) = x.dims4()?;
    if frames == 0 || b % frames != 0 {
        return Err(Error::Shape(format!(
            "{b} frames do not split into clips of {frames}"
        )));
    }
    Ok((b / frames, h * w, c))
}

/// Shifts `x` (`[clips * frames, H, W, C]`, clip-major) along time.
pub fn temporal_shift(x: &Tensor, frames: usize, fraction: ShiftFraction) -> Result<Tensor> {
    let (clips, pixels, c) = check(x, frames)?;
    let k = fraction.shifted_channels(c)?;
    let xd = x.data();
    let mut out = x.clone();
    let od = out.data_mut();
    let frame_len = pixels * c;
    for n in 0..clips {
        for t in 0..frames {
            let dst = (n * frames + t) * frame_len;
            for p in 0..pixels {
                let o = dst + p * c;
                // forward-in-time: value from t-1
                if t > 0 {
                    let s = o - frame_len;
                    od[o..o + k].copy_from_slice(&xd[s..s + k]);
                } else {
                    od[o..o + k].iter_mut().for_each(|v| *v = 0.0);
                }
                // backward-in-time: value from t+1
                if t + 1 < frames {
                    let s = o + frame_len;
                    od[o + k..o + 2 * k].copy_from_slice(&xd[s + k..s + 2 * k]);
                } else {
                    od[o + k..o + 2 * k].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`temporal_shift`].
pub fn temporal_shift_backward(dy: &Tensor, frames: usize, fraction: ShiftFraction) -> Result<Tensor> {
    let (clips, pixels, c) = check(dy, frames)?;
    let k = fraction.shifted_channels(c)?;
    let dd = dy.data();
    let mut dx = dy.clone();
    let xd = dx.data_mut();
    let frame_len = pixels * c;
    for n in 0..clips {
        for t in 0..frames {
            let dst = (n * frames + t) * frame_len;
            for p in 0..pixels {
                let o = dst + p * c;
                if t + 1 < frames {
                    let s = o + frame_len;
                    xd[o..o + k].copy_from_slice(&dd[s..s + k]);
                } else {
                    xd[o..o + k].iter_mut().for_each(|v| *v = 0.0);
                }
                if t > 0 {
                    let s = o - frame_len;
                    xd[o + k..o + 2 * k].copy_from_slice(&dd[s + k..s + 2 * k]);
                } else {
                    xd[o + k..o + 2 * k].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    Ok(dx)
}
