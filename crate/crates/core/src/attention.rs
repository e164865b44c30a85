//! Post-norm transformer encoder over a `[T, d]` token sequence:
//! `y = LN(x + MHA(x))`, `z = LN(y + FFN(y))`, `FFN = W2 relu(W1 y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward_slice, Grads, Linear, ParamBuilder, ParamId, ParamStore, RELU_GAIN};
use crate::objective::softmax;
use crate::tensor::{gemm, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            ffn_dim: 512,
        }
    }
}

/// Per-row normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        LayerNorm {
            gamma: pb.constant("gamma", &[dim], 1.0),
            beta: pb.zeros("beta", &[dim]),
            dim,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let (g, b) = (ps.get(self.gamma).data(), ps.get(self.beta).data());
        let d = self.dim;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / d);
        for (r, row) in x.chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = g[j] * h + b[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &ParamStore, cache: &LayerNormCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let d = self.dim;
        let g = ps.get(self.gamma).data();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut dx = vec![0.0; dy.len()];
        for (r, dyr) in dy.chunks_exact(d).enumerate() {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dxh: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
            let m1 = dxh.iter().sum::<f64>() / d as f64;
            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dgamma[j] += dyr[j] * xh[j];
                dbeta[j] += dyr[j];
                dx[r * d + j] = cache.inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
            }
        }
        add_into(grads.get_mut(self.gamma), &dgamma);
        add_into(grads.get_mut(self.beta), &dbeta);
        dx
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    concat: Vec<f64>,
    /// Per head, `[T, T]` row-stochastic weights.
    weights: Vec<Vec<f64>>,
    tokens: usize,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Copies head `h` (columns `h*dh..(h+1)*dh`) of a `[T, d]` matrix.
fn head_cols(m: &[f64], t: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        out.extend_from_slice(&m[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn put_head_cols(dst: &mut [f64], src: &[f64], t: usize, d: usize, h: usize, dh: usize) {
    for r in 0..t {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(&mut pb.pp("q"), dim, dim, 1.0),
            k: Linear::new(&mut pb.pp("k"), dim, dim, 1.0),
            v: Linear::new(&mut pb.pp("v"), dim, dim, 1.0),
            out: Linear::new(&mut pb.pp("out"), dim, dim, 1.0),
            heads,
            dim,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> (Vec<f64>, AttentionCache) {
        let d = self.dim;
        let t = x.len() / d;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(ps, x, t);
        let k = self.k.forward(ps, x, t);
        let v = self.v.forward(ps, x, t);
        let mut concat = vec![0.0; t * d];
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                head_cols(&q, t, d, h, dh),
                head_cols(&k, t, d, h, dh),
                head_cols(&v, t, d, h, dh),
            );
            let mut s = vec![0.0; t * t];
            gemm(Mat::new(&qh, t, dh), Mat::new(&kh, t, dh).t(), &mut s, 0.0);
            let mut a = Vec::with_capacity(t * t);
            for row in s.chunks_exact(t) {
                let scaled: Vec<f64> = row.iter().map(|v| v * scale).collect();
                a.extend(softmax(&scaled));
            }
            let mut oh = vec![0.0; t * dh];
            gemm(Mat::new(&a, t, t), Mat::new(&vh, t, dh), &mut oh, 0.0);
            put_head_cols(&mut concat, &oh, t, d, h, dh);
            weights.push(a);
        }
        let y = self.out.forward(ps, &concat, t);
        (
            y,
            AttentionCache {
                x: x.to_vec(),
                q,
                k,
                v,
                concat,
                weights,
                tokens: t,
            },
        )
    }

    pub fn backward(&self, ps: &ParamStore, cache: &AttentionCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let d = self.dim;
        let t = cache.tokens;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.out.backward(ps, &cache.concat, dy, t, grads);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let doh = head_cols(&dconcat, t, d, h, dh);
            let qh = head_cols(&cache.q, t, d, h, dh);
            let kh = head_cols(&cache.k, t, d, h, dh);
            let vh = head_cols(&cache.v, t, d, h, dh);
            let mut da = vec![0.0; t * t];
            gemm(Mat::new(&doh, t, dh), Mat::new(&vh, t, dh).t(), &mut da, 0.0);
            let mut dvh = vec![0.0; t * dh];
            gemm(Mat::new(a, t, t).t(), Mat::new(&doh, t, dh), &mut dvh, 0.0);
            let mut ds = vec![0.0; t * t];
            for r in 0..t {
                let ar = &a[r * t..(r + 1) * t];
                let dar = &da[r * t..(r + 1) * t];
                let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                for c in 0..t {
                    ds[r * t + c] = ar[c] * (dar[c] - dot) * scale;
                }
            }
            let mut dqh = vec![0.0; t * dh];
            gemm(Mat::new(&ds, t, t), Mat::new(&kh, t, dh), &mut dqh, 0.0);
            let mut dkh = vec![0.0; t * dh];
            gemm(Mat::new(&ds, t, t).t(), Mat::new(&qh, t, dh), &mut dkh, 0.0);
            put_head_cols(&mut dq, &dqh, t, d, h, dh);
            put_head_cols(&mut dk, &dkh, t, d, h, dh);
            put_head_cols(&mut dv, &dvh, t, d, h, dh);
        }
        let mut dx = self.q.backward(ps, &cache.x, &dq, t, grads);
        add_into(&mut dx, &self.k.backward(ps, &cache.x, &dk, t, grads));
        add_into(&mut dx, &self.v.backward(ps, &cache.x, &dv, t, grads));
        dx
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

pub struct EncoderLayerCache {
    attn: AttentionCache,
    norm1: LayerNormCache,
    y: Vec<f64>,
    hidden: Vec<f64>,
    norm2: LayerNormCache,
}

impl EncoderLayerCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), dim, heads)?,
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim),
            ff1: Linear::new(&mut pb.pp("ff1"), dim, ffn_dim, RELU_GAIN),
            ff2: Linear::new(&mut pb.pp("ff2"), ffn_dim, dim, 1.0),
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> (Vec<f64>, EncoderLayerCache) {
        let t = x.len() / self.attn.dim;
        let (a, attn) = self.attn.forward(ps, x);
        let r1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let (y, norm1) = self.norm1.forward(ps, &r1);
        let mut hidden = self.ff1.forward(ps, &y, t);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let f = self.ff2.forward(ps, &hidden, t);
        let r2: Vec<f64> = y.iter().zip(&f).map(|(p, q)| p + q).collect();
        let (z, norm2) = self.norm2.forward(ps, &r2);
        (
            z,
            EncoderLayerCache {
                attn,
                norm1,
                y,
                hidden,
                norm2,
            },
        )
    }

    pub fn backward(&self, ps: &ParamStore, cache: &EncoderLayerCache, dz: &[f64], grads: &mut Grads) -> Vec<f64> {
        let t = dz.len() / self.attn.dim;
        let dr2 = self.norm2.backward(ps, &cache.norm2, dz, grads);
        let dhidden = self.ff2.backward(ps, &cache.hidden, &dr2, t, grads);
        let dhidden = relu_backward_slice(&cache.hidden, &dhidden);
        let mut dy = self.ff1.backward(ps, &cache.y, &dhidden, t, grads);
        add_into(&mut dy, &dr2);
        let dr1 = self.norm1.backward(ps, &cache.norm1, &dy, grads);
        let mut dx = self.attn.backward(ps, &cache.attn, &dr1, grads);
        add_into(&mut dx, &dr1);
        dx
    }
}

/// Stack of encoder layers; shape preserving.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub layers: Vec<EncoderLayer>,
    pub dim: usize,
}

impl TemporalEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, config: &EncoderConfig) -> Result<Self> {
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut pb.pp(&format!("layer{i}")), dim, config.heads, config.ffn_dim))
            .collect::<Result<_>>()?;
        Ok(TemporalEncoder { layers, dim })
    }

    /// `x` is `[T, dim]` flattened.
    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, Vec<EncoderLayerCache>)> {
        if x.is_empty() || !x.len().is_multiple_of(self.dim) {
            return Err(Error::Shape(format!("encoder input of {} values for width {}", x.len(), self.dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite encoder input".into()));
        }
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, c) = layer.forward(ps, &h);
            h = out;
            caches.push(c);
        }
        Ok((h, caches))
    }

    pub fn backward(&self, ps: &ParamStore, caches: &[EncoderLayerCache], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut d = dy.to_vec();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            d = layer.backward(ps, cache, &d, grads);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error, sample_coordinates};
    use crate::nn::init_rng;

    fn encoder(dim: usize, heads: usize) -> (ParamStore, TemporalEncoder) {
        let mut store = ParamStore::new();
        let mut rng = init_rng(11);
        let enc = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            let cfg = EncoderConfig { layers: 2, heads, ffn_dim: 12 };
            TemporalEncoder::new(&mut pb, dim, &cfg).unwrap()
        };
        (store, enc)
    }

    fn tokens(t: usize, d: usize) -> Vec<f64> {
        (0..t * d).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect()
    }

    #[test]
    fn shape_and_row_stochastic_weights() {
        let (store, enc) = encoder(8, 4);
        let x = tokens(5, 8);
        let (y, caches) = enc.forward(&store, &x).unwrap();
        assert_eq!(y.len(), x.len());
        for c in &caches {
            for w in c.attention().weights() {
                for row in w.chunks(5) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        assert!(MultiHeadAttention::new(&mut pb, 6, 4).is_err());
    }

    #[test]
    fn single_head_hand_computed() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let attn = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            MultiHeadAttention::new(&mut pb, 2, 1).unwrap()
        };
        let set = |s: &mut ParamStore, id: ParamId, v: &[f64]| s.get_mut(id).data_mut().copy_from_slice(v);
        // W stored [in, out]
        set(&mut store, attn.q.weight, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, attn.k.weight, &[2.0, 0.0, 0.0, 1.0]);
        set(&mut store, attn.v.weight, &[0.0, 1.0, 1.0, 0.0]);
        set(&mut store, attn.out.weight, &[1.0, 0.0, 0.0, 1.0]);
        for l in [&attn.q, &attn.k, &attn.v, &attn.out] {
            set(&mut store, l.bias, &[0.0, 0.0]);
        }
        let x = [1.0, 0.0, 0.0, 1.0];
        let (y, _) = attn.forward(&store, &x);
        // q1=(1,0) q2=(0,1); k1=(2,0) k2=(0,1); v1=(0,1) v2=(1,0)
        let s = 2f64.sqrt();
        let a1 = [(2.0 / s).exp(), 1.0];
        let a2 = [1.0, (1.0 / s).exp()];
        let n1 = a1[0] + a1[1];
        let n2 = a2[0] + a2[1];
        let want = [a1[1] / n1, a1[0] / n1, a2[1] / n2, a2[0] / n2];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let ln = LayerNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), 4);
        let (y, _) = ln.forward(&store, &[1.0, 2.0, 3.0, 4.0]);
        assert!(y.iter().sum::<f64>().abs() < 1e-12);
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.25 / (1.25 + LAYER_NORM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, enc) = encoder(8, 2);
        let x = tokens(4, 8);
        let proj: Vec<f64> = (0..32).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();
        let loss = |s: &ParamStore, x: &[f64]| -> f64 {
            let (y, _) = enc.forward(s, x).unwrap();
            y.iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let (_, caches) = enc.forward(&store, &x).unwrap();
        let mut grads = Grads::zeros_like(&store);
        let dx = enc.backward(&store, &caches, &proj, &mut grads);
        for (id, i) in sample_coordinates(&store, 40, 5) {
            let num = central_difference(&mut store, id, i, 1e-5, |s| loss(s, &x));
            let ana = grads.get(id).data()[i];
            assert!(relative_error(num, ana, 1e-6) <= 1e-4, "{num} vs {ana}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-5;
            let mut xm = x.clone();
            xm[i] -= 1e-5;
            let num = (loss(&store, &xp) - loss(&store, &xm)) / 2e-5;
            assert!(relative_error(num, dx[i], 1e-6) <= 1e-4, "input {i}: {num} vs {}", dx[i]);
        }
    }
}
