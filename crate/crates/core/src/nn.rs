//! Parameter storage and the elementary layers (dense, convolution, pooling,
//! rectifier) with hand-written backward passes.
//!
//! Layers hold [`ParamId`]s into a flat [`ParamStore`]. Forward passes borrow
//! the store immutably and return a cache; backward passes consume the cache
//! and accumulate into a [`Grads`] buffer aligned with the store. This keeps a
//! frozen model shareable across threads while each worker owns its gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replaces every value, checking names and shapes line up.
    pub fn load_values(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(Error::Checkpoint(
                "parameter names do not match the model layout".into(),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    self.names[i],
                    v.shape(),
                    self.values[i].shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    values: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            values: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.values[id.0].data_mut()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| v.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Creates named parameters with seeded fan-in-scaled initialisation.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, Tensor::full(shape, value))
    }

    /// Normal init with standard deviation `gain / sqrt(fan_in)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        let name = self.full_name(name);
        self.store
            .add(name, Tensor::from_vec(shape, data).expect("shape matches"))
    }
}

/// Deterministic generator used for weight initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// He gain for layers followed by a rectifier.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

// ---------------------------------------------------------------------------
// Dense

/// Affine map `y = x W + b` over rows; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, gain: f64) -> Self {
        let weight = pb.normal("weight", &[in_dim, out_dim], in_dim, gain);
        let bias = pb.zeros("bias", &[out_dim]);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x` is `[rows, in]`, flattened.
    pub fn forward(&self, ps: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let b = ps.get(self.bias).data();
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        gemm(
            Mat::new(x, rows, self.in_dim),
            Mat::new(ps.get(self.weight).data(), self.in_dim, self.out_dim),
            &mut y,
            1.0,
        );
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &[f64],
        dy: &[f64],
        rows: usize,
        grads: &mut Grads,
    ) -> Vec<f64> {
        gemm(
            Mat::new(x, rows, self.in_dim).t(),
            Mat::new(dy, rows, self.out_dim),
            grads.get_mut(self.weight),
            1.0,
        );
        let db = grads.get_mut(self.bias);
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; rows * self.in_dim];
        gemm(
            Mat::new(dy, rows, self.out_dim),
            Mat::new(ps.get(self.weight).data(), self.in_dim, self.out_dim).t(),
            &mut dx,
            0.0,
        );
        dx
    }
}

// ---------------------------------------------------------------------------
// Convolution (NHWC, im2col)

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[kernel, kernel, in_ch, out_ch]`
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct Conv2dCache {
    patches: Vec<f64>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        let weight = pb.normal("weight", &[kernel, kernel, in_ch, out_ch], fan_in, gain);
        let bias = bias.then(|| pb.zeros("bias", &[out_ch]));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn k_dim(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    fn im2col(&self, x: &Tensor) -> Result<(Vec<f64>, (usize, usize))> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, c
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!(
                "input {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        let (ho, wo) = self.out_hw(h, w);
        let kd = self.k_dim();
        let xd = x.data();
        let mut patches = vec![0.0; b * ho * wo * kd];
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for f in 0..b {
            let frame = &xd[f * h * w * c..(f + 1) * h * w * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((f * ho + oy) * wo + ox) * kd;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = (iy as usize * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            patches[dst..dst + c].copy_from_slice(&frame[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok((patches, (ho, wo)))
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, Conv2dCache)> {
        let (b, h, w, c) = x.dims4()?;
        let (patches, (ho, wo)) = self.im2col(x)?;
        let rows = b * ho * wo;
        let mut out = match self.bias {
            Some(bias) => {
                let bd = ps.get(bias).data();
                let mut o = Vec::with_capacity(rows * self.out_ch);
                for _ in 0..rows {
                    o.extend_from_slice(bd);
                }
                o
            }
            None => vec![0.0; rows * self.out_ch],
        };
        gemm(
            Mat::new(&patches, rows, self.k_dim()),
            Mat::new(ps.get(self.weight).data(), self.k_dim(), self.out_ch),
            &mut out,
            1.0,
        );
        let y = Tensor::from_vec(&[b, ho, wo, self.out_ch], out)?;
        Ok((
            y,
            Conv2dCache {
                patches,
                in_shape: (b, h, w, c),
                out_hw: (ho, wo),
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &Conv2dCache,
        dy: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (b, h, w, c) = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let rows = b * ho * wo;
        let kd = self.k_dim();
        if dy.shape() != [b, ho, wo, self.out_ch] {
            return Err(Error::Shape(format!(
                "conv backward got {:?}, expected {:?}",
                dy.shape(),
                [b, ho, wo, self.out_ch]
            )));
        }
        let dyd = dy.data();
        gemm(
            Mat::new(&cache.patches, rows, kd).t(),
            Mat::new(dyd, rows, self.out_ch),
            grads.get_mut(self.weight),
            1.0,
        );
        if let Some(bias) = self.bias {
            let db = grads.get_mut(bias);
            for row in dyd.chunks_exact(self.out_ch) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dpatches = vec![0.0; rows * kd];
        gemm(
            Mat::new(dyd, rows, self.out_ch),
            Mat::new(ps.get(self.weight).data(), kd, self.out_ch).t(),
            &mut dpatches,
            0.0,
        );
        // col2im
        let mut dx = vec![0.0; b * h * w * c];
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for f in 0..b {
            let frame = &mut dx[f * h * w * c..(f + 1) * h * w * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((f * ho + oy) * wo + ox) * kd;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = (iy as usize * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for (d, g) in frame[dst..dst + c].iter_mut().zip(&dpatches[src..src + c]) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[b, h, w, c], dx)
    }
}

// ---------------------------------------------------------------------------
// Max pooling

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
        let (b, h, w, c) = x.dims4()?;
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        let (ho, wo) = (o(h), o(w));
        let xd = x.data();
        let mut out = vec![f64::NEG_INFINITY; b * ho * wo * c];
        let mut argmax = vec![usize::MAX; out.len()];
        for f in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((f * ho + oy) * wo + ox) * c;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ibase = ((f * h + iy as usize) * w + ix as usize) * c;
                            for ch in 0..c {
                                let v = xd[ibase + ch];
                                // strict comparison: first maximum in scan order wins
                                if v > out[obase + ch] {
                                    out[obase + ch] = v;
                                    argmax[obase + ch] = ibase + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(&[b, ho, wo, c], out)?,
            MaxPoolCache {
                argmax,
                in_shape: (b, h, w, c),
            },
        ))
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Tensor) -> Tensor {
        let (b, h, w, c) = cache.in_shape;
        let mut dx = Tensor::zeros(&[b, h, w, c]);
        let dxd = dx.data_mut();
        for (&src, &g) in cache.argmax.iter().zip(dy.data()) {
            dxd[src] += g;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Backward through a rectifier given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Slice form of [`relu_backward`].
pub fn relu_backward_slice(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_conv(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        s: usize,
        p: usize,
        seed: u64,
    ) -> (ParamStore, Conv2d) {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let conv = Conv2d::new(&mut pb.pp("conv"), in_ch, out_ch, k, s, p, true, 1.0);
        // non-zero bias
        let b = conv.bias.unwrap();
        for (i, v) in store.get_mut(b).data_mut().iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.2;
        }
        (store, conv)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = init_rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], k: usize, s: usize, p: usize) -> Tensor {
        let (bt, h, wd, c) = x.dims4().unwrap();
        let co = b.len();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[bt, ho, wo, co]);
        for f in 0..bt {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..co {
                        let mut acc = b[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for i in 0..c {
                                    acc += x.data()[((f * h + iy as usize) * wd + ix as usize) * c + i]
                                        * w.data()[((ky * k + kx) * c + i) * co + o];
                                }
                            }
                        }
                        out.data_mut()[((f * ho + oy) * wo + ox) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0)] {
            let (store, conv) = store_with_conv(3, 5, k, s, p, 11);
            let x = random_tensor(&[2, 9, 8, 3], 5);
            let (y, _) = conv.forward(&store, &x).unwrap();
            let want = naive_conv(
                &x,
                store.get(conv.weight),
                store.get(conv.bias.unwrap()).data(),
                k,
                s,
                p,
            );
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12, "k={k} s={s}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let (mut store, conv) = store_with_conv(2, 3, 3, 2, 1, 3);
        let x = random_tensor(&[2, 5, 6, 2], 9);
        let r = {
            let (y, _) = conv.forward(&store, &x).unwrap();
            random_tensor(y.shape(), 77)
        };
        let loss = |store: &ParamStore, x: &Tensor| -> f64 {
            let (y, _) = conv.forward(store, x).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv.forward(&store, &x).unwrap();
        let mut grads = Grads::zeros_like(&store);
        let dx = conv.backward(&store, &cache, &r, &mut grads).unwrap();

        let h = 1e-5;
        for i in [0, 7, 13, 29, 53] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() < 1e-7);
        }
        for i in [0, 5, 17, 40] {
            let orig = store.get(conv.weight).data()[i];
            store.get_mut(conv.weight).data_mut()[i] = orig + h;
            let lp = loss(&store, &x);
            store.get_mut(conv.weight).data_mut()[i] = orig - h;
            let lm = loss(&store, &x);
            store.get_mut(conv.weight).data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - grads.get(conv.weight).data()[i]).abs() < 1e-7);
        }
        let db = grads.get(conv.bias.unwrap()).data()[1];
        let mut sum = 0.0;
        for (j, v) in r.data().iter().enumerate() {
            if j % 3 == 1 {
                sum += v;
            }
        }
        assert!((db - sum).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(1);
        let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 3, 1.0);
        let x = random_tensor(&[2, 4], 2);
        let r = random_tensor(&[2, 3], 3);
        let loss = |store: &ParamStore, x: &[f64]| -> f64 {
            lin.forward(store, x, 2).iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut grads = Grads::zeros_like(&store);
        let dx = lin.backward(&store, x.data(), r.data(), 2, &mut grads);
        let h = 1e-6;
        for i in 0..8 {
            let mut xp = x.data().to_vec();
            xp[i] += h;
            let mut xm = x.data().to_vec();
            xm[i] -= h;
            let num = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-8);
        }
        for i in 0..12 {
            let orig = store.get(lin.weight).data()[i];
            store.get_mut(lin.weight).data_mut()[i] = orig + h;
            let lp = loss(&store, x.data());
            store.get_mut(lin.weight).data_mut()[i] = orig - h;
            let lm = loss(&store, x.data());
            store.get_mut(lin.weight).data_mut()[i] = orig;
            assert!(((lp - lm) / (2.0 * h) - grads.get(lin.weight).data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn maxpool_picks_window_maximum_and_routes_gradient() {
        let x = Tensor::from_vec(&[1, 4, 4, 1], (0..16).map(|v| v as f64).collect()).unwrap();
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (y, cache) = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let dx = pool.backward(&cache, &Tensor::full(&[1, 2, 2, 1], 1.0));
        assert_eq!(dx.data()[5], 1.0);
        assert_eq!(dx.data()[15], 1.0);
        assert_eq!(dx.data().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
