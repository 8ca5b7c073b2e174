//! A small, randomly initialised U-Net of pre-norm transformer blocks.
//!
//! Scales run coarse-to-fine and back: each scale runs the first half of its
//! blocks on the way down (the deepest scale runs all of them), hands its
//! activations to an additive skip, and runs the rest on the way up after
//! nearest-neighbour upsampling. Token merging wraps every enabled block
//! component; see [`block`].

pub mod block;
pub mod flops;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::config::ToMeConfig;
use crate::error::{Error, Result};
use crate::partition::GridShape;
use crate::rng::{Purpose, Rng};
use crate::tensor::{layernorm_rows, matmul, Matrix};

pub use block::{Block, StepContext};
pub use flops::{block_flops, component_flops, flop_count, BlockFlops, ComponentFlops};
pub use trace::{BlockEval, ForwardTrace, PartitionRecord};

pub const LN_EPS: f32 = 1e-5;

/// A batch of token grids, one `tokens x channels` matrix per element.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    shape: GridShape,
    channels: usize,
    values: Vec<Matrix>,
}

impl TokenGrid {
    pub fn new(shape: GridShape, channels: usize, values: Vec<Matrix>) -> Result<Self> {
        if values.len() != shape.batch {
            return Err(Error::Shape(format!(
                "{} matrices for a batch of {}",
                values.len(),
                shape.batch
            )));
        }
        for (b, v) in values.iter().enumerate() {
            if v.shape() != (shape.tokens(), channels) {
                return Err(Error::Shape(format!(
                    "element {b} is {}x{}, expected {}x{channels}",
                    v.rows(),
                    v.cols(),
                    shape.tokens()
                )));
            }
            if !v.is_finite() {
                return Err(Error::Shape(format!("element {b} has non-finite values")));
            }
        }
        Ok(Self {
            shape,
            channels,
            values,
        })
    }

    pub fn zeros(shape: GridShape, channels: usize) -> Self {
        Self {
            shape,
            channels,
            values: vec![Matrix::zeros(shape.tokens(), channels); shape.batch],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.shape.tokens()
    }

    pub fn element(&self, b: usize) -> &Matrix {
        &self.values[b]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Matrix> {
        self.values
    }

    /// Stacks single-element grids of equal shape into one batch.
    pub fn stack(grids: &[&TokenGrid]) -> Result<TokenGrid> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero grids".into()))?;
        let mut values = Vec::new();
        for g in grids {
            if (g.shape.height, g.shape.width, g.channels)
                != (first.shape.height, first.shape.width, first.channels)
            {
                return Err(Error::Shape("stacked grids differ in shape".into()));
            }
            values.extend(g.values.iter().cloned());
        }
        let shape = GridShape {
            batch: values.len(),
            ..first.shape
        };
        TokenGrid::new(shape, first.channels, values)
    }

    pub fn split(&self) -> Vec<TokenGrid> {
        self.values
            .iter()
            .map(|v| TokenGrid {
                shape: GridShape {
                    batch: 1,
                    ..self.shape
                },
                channels: self.channels,
                values: vec![v.clone()],
            })
            .collect()
    }

    pub fn add(&self, other: &TokenGrid) -> Result<TokenGrid> {
        if self.shape != other.shape || self.channels != other.channels {
            return Err(Error::Shape("adding grids of different shape".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Ok(TokenGrid { values, ..*self })
    }

    fn map_elements(&self, f: impl Fn(&Matrix) -> Result<Matrix>) -> Result<TokenGrid> {
        let values = self.values.iter().map(f).collect::<Result<_>>()?;
        Ok(TokenGrid {
            values,
            ..*self
        })
    }

    /// Keeps the top-left token of every 2x2 cell.
    pub fn downsample(&self) -> Result<TokenGrid> {
        let (h, w) = (self.shape.height / 2, self.shape.width / 2);
        if h == 0 || w == 0 {
            return Err(Error::Shape("grid too small to downsample".into()));
        }
        let idx: Vec<usize> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (2 * y) * self.shape.width + 2 * x))
            .collect();
        let shape = GridShape {
            height: h,
            width: w,
            ..self.shape
        };
        let values = self
            .values
            .iter()
            .map(|v| crate::tensor::gather_rows(v, &idx))
            .collect::<Result<_>>()?;
        Ok(TokenGrid {
            shape,
            channels: self.channels,
            values,
        })
    }

    /// Repeats every token over a 2x2 cell.
    pub fn upsample(&self) -> Result<TokenGrid> {
        let (h, w) = (self.shape.height * 2, self.shape.width * 2);
        let idx: Vec<usize> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y / 2) * (w / 2) + x / 2))
            .collect();
        let shape = GridShape {
            height: h,
            width: w,
            ..self.shape
        };
        let values = self
            .values
            .iter()
            .map(|v| crate::tensor::gather_rows(v, &idx))
            .collect::<Result<_>>()?;
        Ok(TokenGrid {
            shape,
            channels: self.channels,
            values,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub height: usize,
    pub width: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub scales: Vec<ScaleSpec>,
    pub channels: usize,
    pub heads: usize,
    pub prompt_tokens: usize,
    pub weight_seed: u64,
}

/// Where a block sits in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSite {
    pub layer: usize,
    pub scale: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockSite {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

impl UNetSpec {
    /// `depth` scales halving from `height x width`, `blocks` blocks each.
    pub fn pyramid(
        height: usize,
        width: usize,
        depth: usize,
        blocks: usize,
        channels: usize,
        heads: usize,
    ) -> Self {
        let scales = (0..depth)
            .map(|s| ScaleSpec {
                height: height >> s,
                width: width >> s,
                blocks,
            })
            .collect();
        Self {
            scales,
            channels,
            heads,
            prompt_tokens: 8,
            weight_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales.is_empty() {
            return bad("a U-Net needs at least one scale".into());
        }
        if self.channels == 0 || self.heads == 0 || self.prompt_tokens == 0 {
            return bad("channels, heads and prompt_tokens must be positive".into());
        }
        if self.channels % self.heads != 0 {
            return bad(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            ));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.height == 0 || s.width == 0 || s.blocks == 0 {
                return bad(format!("scale {i} has a zero dimension"));
            }
            if i > 0 {
                let prev = self.scales[i - 1];
                if prev.height != 2 * s.height || prev.width != 2 * s.width {
                    return bad(format!(
                        "scale {i} ({}x{}) must halve scale {} ({}x{})",
                        s.height,
                        s.width,
                        i - 1,
                        prev.height,
                        prev.width
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn top_tokens(&self) -> usize {
        self.scales[0].height * self.scales[0].width
    }

    pub fn block_count(&self) -> usize {
        self.scales.iter().map(|s| s.blocks).sum()
    }

    fn down_blocks(&self, scale: usize) -> usize {
        let blocks = self.scales[scale].blocks;
        if scale + 1 == self.scales.len() {
            blocks
        } else {
            blocks.div_ceil(2)
        }
    }

    /// Every block in execution order.
    pub fn block_sites(&self) -> Vec<BlockSite> {
        let mut sites = Vec::with_capacity(self.block_count());
        let push = |scale: usize, count: usize, sites: &mut Vec<BlockSite>| {
            for _ in 0..count {
                sites.push(BlockSite {
                    layer: sites.len(),
                    scale,
                    height: self.scales[scale].height,
                    width: self.scales[scale].width,
                });
            }
        };
        for s in 0..self.scales.len() {
            push(s, self.down_blocks(s), &mut sites);
        }
        for s in (0..self.scales.len() - 1).rev() {
            push(s, self.scales[s].blocks - self.down_blocks(s), &mut sites);
        }
        sites
    }
}

/// Weights drawn once from `UNetSpec::weight_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    spec: UNetSpec,
    sites: Vec<BlockSite>,
    blocks: Vec<Block>,
    out_proj: Matrix,
}

/// Normal weights with standard deviation `1 / sqrt(rows)`.
pub(crate) fn init_weight(rng: &Rng, param: u64, layer: usize, rows: usize, cols: usize) -> Matrix {
    let mut stream = rng.stream(Purpose::Weights, param, layer as u64);
    let std = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (stream.normal() * std) as f32)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

pub fn init_unet(spec: &UNetSpec) -> Result<UNetModel> {
    spec.validate()?;
    let rng = Rng::new(spec.weight_seed);
    let sites = spec.block_sites();
    let blocks = sites
        .iter()
        .map(|site| Block::init(&rng, site.layer, spec.channels, spec.heads))
        .collect();
    let out_proj = init_weight(&rng, 99, usize::MAX, spec.channels, spec.channels);
    Ok(UNetModel {
        spec: spec.clone(),
        sites,
        blocks,
        out_proj,
    })
}

/// Sinusoidal step embedding, scaled down so it nudges rather than dominates.
pub fn step_embedding(step: usize, channels: usize) -> Vec<f32> {
    let half = channels / 2;
    let mut out = vec![0.0f32; channels];
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
        let angle = step as f64 * freq;
        out[i] = (0.1 * angle.sin()) as f32;
        out[half + i] = (0.1 * angle.cos()) as f32;
    }
    out
}

impl UNetModel {
    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn sites(&self) -> &[BlockSite] {
        &self.sites
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn top_shape(&self, batch: usize) -> GridShape {
        GridShape {
            batch,
            height: self.spec.scales[0].height,
            width: self.spec.scales[0].width,
        }
    }

    /// One noise prediction for every batch element. `prompts[b]` conditions
    /// element `b`; `ratio` is the merge ratio in force at `step`.
    pub fn forward(
        &self,
        x: &TokenGrid,
        prompts: &[Matrix],
        tome: &ToMeConfig,
        ratio: f64,
        step: usize,
        trace: &mut ForwardTrace,
    ) -> Result<TokenGrid> {
        let top = self.top_shape(x.shape().batch);
        if x.shape() != top || x.channels() != self.spec.channels {
            return Err(Error::Shape(format!(
                "input {}x{}x{} does not match the top scale {}x{}x{}",
                x.shape().height,
                x.shape().width,
                x.channels(),
                top.height,
                top.width,
                self.spec.channels
            )));
        }
        if prompts.len() != top.batch {
            return Err(Error::Shape(format!(
                "{} prompts for a batch of {}",
                prompts.len(),
                top.batch
            )));
        }
        for p in prompts {
            if p.shape() != (self.spec.prompt_tokens, self.spec.channels) {
                return Err(Error::Shape(format!(
                    "prompt is {}x{}, expected {}x{}",
                    p.rows(),
                    p.cols(),
                    self.spec.prompt_tokens,
                    self.spec.channels
                )));
            }
        }

        let temb = step_embedding(step, self.spec.channels);
        let mut h = x.map_elements(|v| v.add_row_broadcast(&temb))?;
        let mut skips = Vec::new();
        let mut sites = self.sites.iter();
        let mut run = |h: TokenGrid, scale: usize, count: usize, trace: &mut ForwardTrace| {
            let mut h = h;
            for _ in 0..count {
                let site = sites.next().expect("layout covers every block");
                debug_assert_eq!(site.scale, scale);
                let ctx = StepContext {
                    step,
                    layer: site.layer,
                    ratio,
                };
                h = self.blocks[site.layer].forward(&h, prompts, tome, &ctx, trace)?;
            }
            Ok::<_, Error>(h)
        };

        let depth = self.spec.scales.len();
        for s in 0..depth {
            if s > 0 {
                h = h.downsample()?;
            }
            h = run(h, s, self.spec.down_blocks(s), trace)?;
            if s + 1 < depth {
                skips.push(h.clone());
            }
        }
        for s in (0..depth - 1).rev() {
            h = h.upsample()?.add(&skips[s])?;
            let up = self.spec.scales[s].blocks - self.spec.down_blocks(s);
            h = run(h, s, up, trace)?;
        }
        h.map_elements(|v| matmul(&layernorm_rows(v, LN_EPS), &self.out_proj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> UNetSpec {
        UNetSpec {
            scales: vec![
                ScaleSpec {
                    height: 16,
                    width: 16,
                    blocks: 2,
                },
                ScaleSpec {
                    height: 8,
                    width: 8,
                    blocks: 2,
                },
            ],
            channels: 16,
            heads: 4,
            prompt_tokens: 4,
            weight_seed: 7,
        }
    }

    #[test]
    fn init_is_deterministic_and_counts_blocks() {
        let a = init_unet(&spec()).unwrap();
        let b = init_unet(&spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.blocks().len(), 4);
        let other = init_unet(&UNetSpec {
            weight_seed: 8,
            ..spec()
        })
        .unwrap();
        assert_ne!(a.blocks()[0], other.blocks()[0]);
    }

    #[test]
    fn block_sites_form_a_u() {
        let sites = spec().block_sites();
        let scales: Vec<usize> = sites.iter().map(|s| s.scale).collect();
        assert_eq!(scales, vec![0, 1, 1, 0]);
        let sites = UNetSpec::pyramid(32, 32, 3, 2, 16, 4).block_sites();
        let scales: Vec<usize> = sites.iter().map(|s| s.scale).collect();
        assert_eq!(scales, vec![0, 1, 2, 2, 1, 0]);
        assert!(sites.iter().enumerate().all(|(i, s)| s.layer == i));
    }

    #[test]
    fn validation_rejects_bad_pyramids() {
        let mut s = spec();
        s.scales[1].height = 7;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.heads = 3;
        assert!(s.validate().is_err());
        assert!(UNetSpec {
            scales: vec![],
            ..spec()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn resampling_round_trip() {
        let shape = GridShape::new(1, 4, 4).unwrap();
        let v = Matrix::from_vec(16, 1, (0..16).map(|i| i as f32).collect()).unwrap();
        let g = TokenGrid::new(shape, 1, vec![v]).unwrap();
        let down = g.downsample().unwrap();
        assert_eq!(down.element(0).data(), &[0.0, 2.0, 8.0, 10.0]);
        let up = down.upsample().unwrap();
        assert_eq!(up.shape(), shape);
        assert_eq!(&up.element(0).data()[..4], &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(up.downsample().unwrap(), down);
    }

    #[test]
    fn forward_preserves_shape() {
        let model = init_unet(&spec()).unwrap();
        let shape = model.top_shape(2);
        let x = TokenGrid::new(
            shape,
            16,
            vec![Matrix::repeat_row(&[0.5; 16], 256), Matrix::repeat_row(&[-0.5; 16], 256)],
        )
        .unwrap();
        let prompts = vec![Matrix::zeros(4, 16); 2];
        let mut trace = ForwardTrace::default();
        let out = model
            .forward(&x, &prompts, &ToMeConfig::default(), 0.5, 0, &mut trace)
            .unwrap();
        assert_eq!(out.shape(), shape);
        assert_eq!(out.channels(), 16);
        assert!(out.values().iter().all(Matrix::is_finite));
        // every block merges at min_tokens 1: one similarity pass each
        assert_eq!(trace.similarity_passes.len(), 4);
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let model = init_unet(&spec()).unwrap();
        let x = TokenGrid::zeros(GridShape::new(1, 8, 8).unwrap(), 16);
        let mut trace = ForwardTrace::default();
        assert!(model
            .forward(&x, &[Matrix::zeros(4, 16)], &ToMeConfig::default(), 0.5, 0, &mut trace)
            .is_err());
        let x = TokenGrid::zeros(model.top_shape(1), 16);
        assert!(model
            .forward(&x, &[Matrix::zeros(3, 16)], &ToMeConfig::default(), 0.5, 0, &mut trace)
            .is_err());
    }
}
