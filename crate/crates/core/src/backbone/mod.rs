//! The MANet network: a ResNet-style bottleneck backbone whose blocks are
//! preceded by squeeze-and-excitation gating and a temporal channel shift,
//! plus the fine-class classifier and the joint-embedding projector.

mod block;
mod se;
mod shift;

pub use block::{BlockCache, BlockSpec, ResBlock};
pub use se::{SeCache, SqueezeExcite};
pub use shift::{temporal_shift, temporal_shift_backward, ShiftFraction};

use serde::{Deserialize, Serialize};

use crate::embedding::{Projector, ProjectorCache, EMBED_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    init_rng, relu, relu_backward, Conv2d, Conv2dCache, Grads, Linear, MaxPool2d, MaxPoolCache,
    ParamBuilder, ParamStore, RELU_GAIN,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Stem width `C`; stage `i` uses bottleneck width `C * 2^i` and output
    /// width `4C * 2^i`, so the final map has `32C` channels.
    pub base_width: usize,
    pub stage_blocks: [usize; 4],
    pub se_ratio: usize,
    pub shift_fraction: ShiftFraction,
    pub num_fine_classes: usize,
    pub embed_dim: usize,
    /// Hidden widths of the embedding projector; empty means a single affine map.
    pub projector_hidden: Vec<usize>,
    pub input_side: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 64,
            stage_blocks: [3, 4, 6, 3],
            se_ratio: 4,
            shift_fraction: ShiftFraction::EIGHTH,
            num_fine_classes: 52,
            embed_dim: EMBED_DIM,
            projector_hidden: Vec::new(),
            input_side: 224,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small CPU-friendly configuration: `C = 16`, one block per stage, 32px input.
    pub fn desk(num_fine_classes: usize) -> Self {
        ModelConfig {
            base_width: 16,
            stage_blocks: [1, 1, 1, 1],
            num_fine_classes,
            input_side: 32,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        32 * self.base_width
    }

    /// Block layout, stage by stage.
    pub fn block_plan(&self) -> Vec<Vec<BlockSpec>> {
        let c = self.base_width;
        let mut in_ch = c;
        (0..4)
            .map(|stage| {
                let mid = c << stage;
                let out = 4 * mid;
                
                (0..self.stage_blocks[stage])
                    .map(|j| {
                        let spec = BlockSpec {
                            in_ch,
                            mid_ch: mid,
                            out_ch: out,
                            stride: if j == 0 && stage > 0 { 2 } else { 1 },
                        };
                        in_ch = out;
                        spec
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_width == 0 || !self.base_width.is_multiple_of(8) {
            return bad(format!("base_width {} must be a positive multiple of 8", self.base_width));
        }
        if self.se_ratio == 0 || !self.base_width.is_multiple_of(self.se_ratio) {
            return bad(format!("se_ratio {} must divide base_width {}", self.se_ratio, self.base_width));
        }
        if self.stage_blocks.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.num_fine_classes == 0 {
            return bad("num_fine_classes must be positive".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.input_side < 32 || !self.input_side.is_multiple_of(32) {
            return bad(format!("input_side {} must be a multiple of 32", self.input_side));
        }
        for spec in self.block_plan().iter().flatten() {
            if spec.in_ch % self.se_ratio != 0 {
                return bad(format!("se_ratio {} must divide block width {}", self.se_ratio, spec.in_ch));
            }
            self.shift_fraction.shifted_channels(spec.in_ch)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

/// 7x7 stride-2 convolution, rectifier, 3x3 stride-2 max pool.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub pool: MaxPool2d,
}

pub struct StemCache {
    conv: Conv2dCache,
    act: Tensor,
    pool: MaxPoolCache,
}

impl Stem {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize) -> Self {
        Stem {
            conv: Conv2d::new(pb, 3, width, 7, 2, 3, true, RELU_GAIN),
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, StemCache)> {
        let (_, h, w, c) = x.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "stem expects [T, H, W, 3] with H, W divisible by 4, got {:?}",
                x.shape()
            )));
        }
        let (pre, conv) = self.conv.forward(ps, x)?;
        let act = relu(&pre);
        let (y, pool) = self.pool.forward(&act)?;
        Ok((y, StemCache { conv, act, pool }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &StemCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
        let d = self.pool.backward(&cache.pool, dy);
        let d = relu_backward(&cache.act, &d);
        self.conv.backward(ps, &cache.conv, &d, grads)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Stem,
    pub blocks: Vec<ResBlock>,
    pub feature_dim: usize,
}

pub struct BackboneCache {
    stem: StemCache,
    blocks: Vec<BlockCache>,
    out_shape: Vec<usize>,
}

impl BackboneCache {
    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(&mut pb.pp("stem"), config.base_width);
        let mut blocks = Vec::new();
        for (s, stage) in config.block_plan().into_iter().enumerate() {
            for (j, spec) in stage.into_iter().enumerate() {
                blocks.push(ResBlock::new(
                    &mut pb.pp(&format!("stage{}.{}", s + 1, j)),
                    spec,
                    config.se_ratio,
                    config.shift_fraction,
                )?);
            }
        }
        Ok(Backbone {
            stem,
            blocks,
            feature_dim: config.feature_dim(),
        })
    }

    /// Maps `[clips * frames, H, W, 3]` to `[clips * frames, H/32, W/32, 32C]`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, frames: usize) -> Result<(Tensor, BackboneCache)> {
        let (mut h, stem) = self.stem.forward(ps, x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(ps, &h, frames)?;
            caches.push(cache);
            h = next;
        }
        let out_shape = h.shape().to_vec();
        Ok((
            h,
            BackboneCache {
                stem,
                blocks: caches,
                out_shape,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &BackboneCache,
        dy: &Tensor,
        frames: usize,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let mut d = dy.clone();
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = block.backward(ps, c, &d, frames, grads)?;
        }
        self.stem.backward(ps, &cache.stem, &d, grads)
    }
}

/// Mean over every position of a `[.., C]` map.
pub fn global_average(map: &Tensor) -> Vec<f64> {
    let c = *map.shape().last().expect("non-empty shape");
    let positions = map.len() / c;
    let mut out = vec![0.0; c];
    for px in map.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= positions as f64);
    out
}

/// Adjoint of [`global_average`].
pub fn global_average_backward(shape: &[usize], dpooled: &[f64]) -> Tensor {
    let c = *shape.last().expect("non-empty shape");
    let mut d = Tensor::zeros(shape);
    let positions = d.len() / c;
    for px in d.data_mut().chunks_exact_mut(c) {
        for (o, g) in px.iter_mut().zip(dpooled) {
            *o = g / positions as f64;
        }
    }
    d
}

// ---------------------------------------------------------------------------

/// Backbone + classifier + embedding projector, with its own parameters.
#[derive(Clone, Debug)]
pub struct Manet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub classifier: Linear,
    pub projector: Projector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipOutput {
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

pub struct ManetCache {
    backbone: BackboneCache,
    pooled: Vec<f64>,
    projector: ProjectorCache,
    frames: usize,
}

impl Manet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(config.init_seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut pb.pp("backbone"), &config)?;
        let classifier = Linear::new(&mut pb.pp("classifier"), config.feature_dim(), config.num_fine_classes, 1.0);
        let projector = Projector::new(
            &mut pb.pp("projector"),
            config.feature_dim(),
            &config.projector_hidden,
            config.embed_dim,
        );
        Ok(Manet {
            config,
            store,
            backbone,
            classifier,
            projector,
        })
    }

    /// Final feature map and its spatio-temporal mean for one clip `[T, H, W, 3]`.
    pub fn forward_features(&self, clip: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let frames = clip.dims4()?.0;
        let (map, _) = self.backbone.forward(&self.store, clip, frames)?;
        let pooled = global_average(&map);
        Ok((map, pooled))
    }

    pub fn classify(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.classifier.in_dim {
            return Err(Error::Shape(format!(
                "classifier expects {} features, got {}",
                self.classifier.in_dim,
                pooled.len()
            )));
        }
        Ok(self.classifier.forward(&self.store, pooled, 1))
    }

    pub fn project(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        Ok(self.projector.forward(&self.store, pooled)?.0)
    }

    pub fn forward(&self, clip: &Tensor) -> Result<(ClipOutput, ManetCache)> {
        let frames = clip.dims4()?.0;
        let (map, backbone) = self.backbone.forward(&self.store, clip, frames)?;
        let pooled = global_average(&map);
        let logits = self.classifier.forward(&self.store, &pooled, 1);
        let (embedding, projector) = self.projector.forward(&self.store, &pooled)?;
        Ok((
            ClipOutput {
                pooled: pooled.clone(),
                logits,
                embedding,
            },
            ManetCache {
                backbone,
                pooled,
                projector,
                frames,
            },
        ))
    }

    /// Inference-only forward: logits for one clip.
    pub fn logits(&self, clip: &Tensor) -> Result<Vec<f64>> {
        let (_, pooled) = self.forward_features(clip)?;
        self.classify(&pooled)
    }

    /// Backpropagates loss gradients w.r.t. logits and (optionally) the
    /// projected embedding into `grads`.
    pub fn backward(
        &self,
        cache: &ManetCache,
        dlogits: &[f64],
        dembedding: Option<&[f64]>,
        grads: &mut Grads,
    ) -> Result<()> {
        let mut dpooled = self.classifier.backward(&self.store, &cache.pooled, dlogits, 1, grads);
        if let Some(de) = dembedding {
            let dp = self.projector.backward(&self.store, &cache.projector, de, grads)?;
            for (a, b) in dpooled.iter_mut().zip(dp) {
                *a += b;
            }
        }
        let dmap = global_average_backward(cache.backbone.out_shape(), &dpooled);
        self.backbone
            .backward(&self.store, &cache.backbone, &dmap, cache.frames, grads)?;
        Ok(())
    }
}
