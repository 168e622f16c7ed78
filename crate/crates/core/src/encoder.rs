//! DenseNet feature extractor.
//!
//! Layout: stem convolution (48 maps by default) and 2×2 max pool, then
//! `num_blocks` dense blocks with a compressing transition between each
//! consecutive pair. Every convolution is followed by a rectifier. There is
//! no batch normalisation.
//!
//! A dense block of depth `D` and growth rate `K` repeats `D` times:
//! 1×1 bottleneck to `4K` maps, 3×3 convolution (padding 1) to `K` maps,
//! then concatenates the new maps onto its running input. A transition is a
//! 1×1 convolution to `⌊C · compression⌋` maps followed by 2×2 average
//! pooling with stride 2.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, PoolKind, Var};
use crate::params::{relu_bound, uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub growth_rate: usize,
    pub block_depth: usize,
    pub initial_channels: usize,
    pub num_blocks: usize,
    pub compression: Scalar,
    pub input_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            growth_rate: 16,
            block_depth: 16,
            initial_channels: 48,
            num_blocks: 3,
            compression: 0.5,
            input_channels: 1,
            stem_kernel: 3,
            stem_stride: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("encoder config: {m}")));
        if self.growth_rate < 1 {
            return bad("growth_rate must be ≥ 1");
        }
        if self.num_blocks < 1 {
            return bad("num_blocks must be ≥ 1");
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        if self.initial_channels < 1 || self.input_channels < 1 {
            return bad("channel counts must be ≥ 1");
        }
        if self.stem_kernel < 1 || self.stem_stride < 1 {
            return bad("stem kernel and stride must be ≥ 1");
        }
        for (_, out) in self.block_channels() {
            if self.compressed(out) < 1 {
                return bad("compression leaves a transition with no channels");
            }
        }
        Ok(())
    }

    fn compressed(&self, channels: usize) -> usize {
        (channels as Scalar * self.compression).floor() as usize
    }

    /// `(input, output)` channel counts of every dense block.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        let grow = self.block_depth * self.growth_rate;
        let mut plan = Vec::with_capacity(self.num_blocks);
        let mut c = self.initial_channels;
        for b in 0..self.num_blocks {
            if b > 0 {
                c = self.compressed(c);
            }
            plan.push((c, c + grow));
            c += grow;
        }
        plan
    }

    /// Channel count `C` of the feature grid.
    pub fn output_channels(&self) -> usize {
        self.block_channels().last().map(|&(_, out)| out).unwrap_or(0)
    }

    /// Input pixels per feature cell along each axis.
    pub fn downsample_factor(&self) -> usize {
        self.stem_stride * (1 << self.num_blocks)
    }
}

/// Encoder output: an `H×W×C` grid of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub features: Tensor,
    pub downsample_factor: usize,
}

impl FeatureGrid {
    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Convolution plus bias, followed by a rectifier.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (k, cin, cout): (usize, usize, usize),
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            uniform(&[k, k, cin, cout], relu_bound(k * k * cin), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, params[self.kernel.0], self.stride, self.padding)?;
        let y = g.add_bias(y, params[self.bias.0])?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseLayer {
    pub bottleneck: ConvLayer,
    pub conv: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        growth_rate: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let width = 4 * growth_rate;
        let layers = (0..depth)
            .map(|i| {
                let cin = in_channels + i * growth_rate;
                DenseLayer {
                    bottleneck: ConvLayer::new(
                        store,
                        &format!("{name}.layer{i}.bottleneck"),
                        (1, cin, width),
                        1,
                        0,
                        rng,
                    ),
                    conv: ConvLayer::new(
                        store,
                        &format!("{name}.layer{i}.conv"),
                        (3, width, growth_rate),
                        1,
                        1,
                        rng,
                    ),
                }
            })
            .collect();
        Self { layers }
    }

    /// Output keeps the spatial extents and adds `depth · K` channels.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let mut running = input;
        for layer in &self.layers {
            let b = layer.bottleneck.forward(g, params, running)?;
            let fresh = layer.conv.forward(g, params, b)?;
            running = g.concat_channels(&[running, fresh])?;
        }
        Ok(running)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Transition {
    pub conv: ConvLayer,
}

impl Transition {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: ConvLayer::new(store, name, (1, in_channels, out_channels), 1, 0, rng),
        }
    }

    /// Halves both spatial extents (floor).
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let (h, w, _) = g.value(input).hwc("transition")?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "transition",
                format!("spatial extents {h}×{w} too small for 2×2 pooling"),
            ));
        }
        let y = self.conv.forward(g, params, input)?;
        g.pool2d(y, PoolKind::Average, 2, 2)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: ConvLayer,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
}

impl Encoder {
    /// Registers every encoder parameter in `store` under the `encoder.` prefix.
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.stem_kernel;
        let stem = ConvLayer::new(
            store,
            "encoder.stem",
            (k, config.input_channels, config.initial_channels),
            config.stem_stride,
            k / 2,
            rng,
        );
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, (cin, cout)) in config.block_channels().into_iter().enumerate() {
            if b > 0 {
                let prev_out = blocks_out(config, b - 1);
                transitions.push(Transition::new(
                    store,
                    &format!("encoder.transition{b}"),
                    prev_out,
                    cin,
                    rng,
                ));
            }
            blocks.push(DenseBlock::new(
                store,
                &format!("encoder.block{b}"),
                cin,
                config.growth_rate,
                config.block_depth,
                rng,
            ));
            debug_assert_eq!(cin + config.block_depth * config.growth_rate, cout);
        }
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            transitions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Checks that `image` is `H×W×input_channels` with extents divisible by
    /// the downsample factor.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = image.hwc("encode")?;
        let f = self.config.downsample_factor();
        if c != self.config.input_channels {
            return Err(Error::shape(
                "encode",
                format!("image has {c} channels, encoder expects {}", self.config.input_channels),
            ));
        }
        if h < f || w < f {
            return Err(Error::shape(
                "encode",
                format!("image {h}×{w} too small for downsample factor {f}"),
            ));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(
                "encode",
                format!("image {h}×{w} not divisible by downsample factor {f}; pad it first"),
            ));
        }
        Ok(())
    }

    /// Records the encoder on `g`; returns the `H×W×C` feature grid node.
    pub fn forward(&self, g: &mut Graph, params: &[Var], image: Var) -> Result<Var> {
        self.check_image(g.value(image))?;
        let x = self.stem.forward(g, params, image)?;
        let mut x = g.pool2d(x, PoolKind::Max, 2, 2)?;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                x = self.transitions[b - 1].forward(g, params, x)?;
            }
            x = block.forward(g, params, x)?;
        }
        Ok(x)
    }

    /// Inference-only encoding with the weights in `store`.
    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<FeatureGrid> {
        let mut g = Graph::new();
        let params = store.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = self.forward(&mut g, &params, x)?;
        Ok(FeatureGrid {
            features: g.value(f).clone(),
            downsample_factor: self.config.downsample_factor(),
        })
    }
}

fn blocks_out(config: &EncoderConfig, b: usize) -> usize {
    config.block_channels()[b].1
}
