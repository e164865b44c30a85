//! Squeeze-and-excitation channel gating.
//!
//! Per frame: spatial mean per channel (squeeze), then
//! `sigmoid(fc2(relu(fc1(z))))` with a `C -> C/ratio -> C` bottleneck
//! (excitation); the gates rescale every pixel of their channel.

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Grads, Linear, ParamBuilder, ParamStore, RELU_GAIN};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

pub struct SeCache {
    x: Tensor,
    z: Vec<f64>,
    h: Vec<f64>,
    gates: Vec<f64>,
}

impl SeCache {
    pub fn gates(&self) -> &[f64] {
        &self.gates
    }
}

impl SqueezeExcite {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Config(format!(
                "SE ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(SqueezeExcite {
            fc1: Linear::new(&mut pb.pp("fc1"), channels, hidden, RELU_GAIN),
            fc2: Linear::new(&mut pb.pp("fc2"), hidden, channels, 1.0),
            channels,
        })
    }

    /// Spatial average per frame and channel: `[frames, C]`.
    pub fn squeeze(x: &Tensor) -> Result<Vec<f64>> {
        let (b, h, w, c) = x.dims4()?;
        let pixels = h * w;
        let mut z = vec![0.0; b * c];
        for f in 0..b {
            let zf = &mut z[f * c..(f + 1) * c];
            for px in x.data()[f * pixels * c..(f + 1) * pixels * c].chunks_exact(c) {
                for (acc, v) in zf.iter_mut().zip(px) {
                    *acc += v;
                }
            }
            zf.iter_mut().for_each(|v| *v /= pixels as f64);
        }
        Ok(z)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, SeCache)> {
        let (b, _, _, c) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "SE built for {} channels, got {c}",
                self.channels
            )));
        }
        let z = Self::squeeze(x)?;
        let mut h = self.fc1.forward(ps, &z, b);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut gates = self.fc2.forward(ps, &h, b);
        gates.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut y = x.clone();
        let frame_len = y.len() / b.max(1);
        for (f, frame) in y.data_mut().chunks_exact_mut(frame_len.max(1)).enumerate() {
            let g = &gates[f * c..(f + 1) * c];
            for px in frame.chunks_exact_mut(c) {
                for (v, gi) in px.iter_mut().zip(g) {
                    *v *= gi;
                }
            }
        }
        Ok((
            y,
            SeCache {
                x: x.clone(),
                z,
                h,
                gates,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &SeCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (b, hh, ww, c) = cache.x.dims4()?;
        let pixels = hh * ww;
        let frame_len = pixels * c;
        let xd = cache.x.data();
        let dyd = dy.data();

        let mut dgate = vec![0.0; b * c];
        let mut dx = vec![0.0; xd.len()];
        for f in 0..b {
            let g = &cache.gates[f * c..(f + 1) * c];
            let dg = &mut dgate[f * c..(f + 1) * c];
            let base = f * frame_len;
            for p in 0..pixels {
                let o = base + p * c;
                for ch in 0..c {
                    dg[ch] += dyd[o + ch] * xd[o + ch];
                    dx[o + ch] = dyd[o + ch] * g[ch];
                }
            }
        }
        let dpre: Vec<f64> = dgate
            .iter()
            .zip(&cache.gates)
            .map(|(d, g)| d * g * (1.0 - g))
            .collect();
        let mut dh = self.fc2.backward(ps, &cache.h, &dpre, b, grads);
        for (d, &hv) in dh.iter_mut().zip(&cache.h) {
            if hv <= 0.0 {
                *d = 0.0;
            }
        }
        let dz = self.fc1.backward(ps, &cache.z, &dh, b, grads);
        for f in 0..b {
            let base = f * frame_len;
            for p in 0..pixels {
                let o = base + p * c;
                for ch in 0..c {
                    dx[o + ch] += dz[f * c + ch] / pixels as f64;
                }
            }
        }
        Tensor::from_vec(cache.x.shape(), dx)
    }
}
