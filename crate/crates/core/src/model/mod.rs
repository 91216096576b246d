//! U-Net decoder on a MobileNetV2 encoder.
//!
//! The encoder is a 3×3 stride-2 stem followed by the inverted-residual plan.
//! Skip taps are taken at strides 2, 4, 8 and 16 (the stem output and the last
//! block of each later stride level) and the last block at stride 32 is the
//! bridge. Five decoder blocks upsample and fuse the taps from deep to
//! shallow; the fifth has no skip because nothing in the encoder runs at full
//! resolution. A 1×1 convolution and a sigmoid produce per-pixel foreground
//! probabilities.

mod config;
mod layers;
mod params;

pub use config::{
    scale_channels, BlockSpec, ModelConfig, DEFAULT_DECODER_CHANNELS, MOBILENET_V2_PLAN,
    STEM_CHANNELS,
};
pub use layers::{DecoderBlockLayout, ForwardContext, InvertedResidualLayout};
pub use params::{is_trainable_name, ModelParams, ParamKind, ParamSpec};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Activation, BatchNormMode, Conv2dParams, Float, Graph, Tensor, Var};

pub const STEM_PREFIX: &str = "encoder.stem";
pub const HEAD_PREFIX: &str = "head";

/// Skip feature maps at strides 2, 4, 8, 16 and the stride-32 bridge.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTaps {
    pub t1: Var,
    pub t2: Var,
    pub t3: Var,
    pub t4: Var,
    pub bridge: Var,
}

pub struct ForwardOutput {
    pub probs: Var,
    pub taps: EncoderTaps,
    /// Graph variable of every parameter used by the pass.
    pub param_vars: BTreeMap<String, Var>,
}

#[derive(Clone, Debug)]
pub struct UNetMobileNetV2 {
    config: ModelConfig,
    stem_channels: usize,
    blocks: Vec<InvertedResidualLayout>,
    /// Index into `blocks` of the t2, t3, t4 taps and the bridge.
    tap_blocks: [usize; 4],
    decoder: Vec<DecoderBlockLayout>,
}

impl UNetMobileNetV2 {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let stem_channels = config.scale_channels(STEM_CHANNELS);
        let mut blocks = Vec::new();
        let mut stride_of_block = Vec::new();
        let mut channels = stem_channels;
        let mut stride = 2;
        for (stage, spec) in config.encoder_plan.iter().enumerate() {
            let out = config.scale_channels(spec.out_channels);
            for rep in 0..spec.repeats {
                let s = if rep == 0 { spec.stride } else { 1 };
                stride *= s;
                let prefix = format!("encoder.stage{}.block{}", stage + 1, rep + 1);
                blocks.push(InvertedResidualLayout::new(
                    prefix,
                    channels,
                    spec.expansion,
                    out,
                    s,
                ));
                stride_of_block.push(stride);
                channels = out;
            }
        }
        let last_at = |target: usize| -> Result<usize> {
            stride_of_block
                .iter()
                .rposition(|&s| s == target)
                .ok_or_else(|| {
                    Error::Config(format!("encoder plan has no block at stride {target}"))
                })
        };
        let tap_blocks = [last_at(4)?, last_at(8)?, last_at(16)?, last_at(32)?];
        if tap_blocks[3] != blocks.len() - 1 {
            return Err(Error::Config("encoder plan must end at stride 32".into()));
        }

        let skip_channels = [
            blocks[tap_blocks[2]].out_channels,
            blocks[tap_blocks[1]].out_channels,
            blocks[tap_blocks[0]].out_channels,
            stem_channels,
            0,
        ];
        let mut decoder = Vec::new();
        let mut in_ch = blocks[tap_blocks[3]].out_channels;
        for (k, (&out, &skip)) in config
            .decoder_channels
            .iter()
            .zip(&skip_channels)
            .enumerate()
        {
            decoder.push(DecoderBlockLayout::new(
                format!("decoder.block{}", k + 1),
                in_ch,
                skip,
                out,
            ));
            in_ch = out;
        }
        Ok(Self {
            config,
            stem_channels,
            blocks,
            tap_blocks,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder_blocks(&self) -> &[InvertedResidualLayout] {
        &self.blocks
    }

    pub fn decoder_blocks(&self) -> &[DecoderBlockLayout] {
        &self.decoder
    }

    pub fn stem_channels(&self) -> usize {
        self.stem_channels
    }

    /// Channel counts of `(t1, t2, t3, t4, bridge)`.
    pub fn tap_channels(&self) -> [usize; 5] {
        [
            self.stem_channels,
            self.blocks[self.tap_blocks[0]].out_channels,
            self.blocks[self.tap_blocks[1]].out_channels,
            self.blocks[self.tap_blocks[2]].out_channels,
            self.blocks[self.tap_blocks[3]].out_channels,
        ]
    }

    /// Every tensor the network owns, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        params::conv_specs(
            &mut specs,
            STEM_PREFIX,
            [self.stem_channels, self.config.in_channels, 3, 3],
            false,
        );
        params::bn_specs(&mut specs, STEM_PREFIX, self.stem_channels);
        for block in &self.blocks {
            specs.extend(block.param_specs());
        }
        for block in &self.decoder {
            specs.extend(block.param_specs());
        }
        let last = *self.config.decoder_channels.last().expect("validated");
        params::conv_specs(&mut specs, HEAD_PREFIX, [1, last, 1, 1], true);
        specs
    }

    /// He-normal conv weights, zero head bias, BN gamma 1 / beta 0, running
    /// mean 0 / variance 1.
    pub fn init_params<T: Float>(&self, seed: u64) -> ModelParams<T> {
        ModelParams::init(&self.param_specs(), seed)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| s.kind.is_trainable())
            .map(ParamSpec::numel)
            .sum()
    }

    fn check_image<T: Float>(&self, image: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = image.dims4("forward")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                "channels",
                format!(
                    "model takes {} channels, image has {c}",
                    self.config.in_channels
                ),
            ));
        }
        let s = self.config.input_side;
        if h != s || w != s {
            return Err(Error::shape(
                "forward",
                "spatial",
                format!("model takes {s}×{s}, image is {h}×{w}"),
            ));
        }
        Ok(())
    }

    pub fn encoder_forward<T: Float>(
        &self,
        ctx: &mut ForwardContext<'_, T>,
        image: Var,
    ) -> Result<EncoderTaps> {
        self.check_image(ctx.graph.value(image))?;
        let t1 = ctx.conv_bn(
            image,
            STEM_PREFIX,
            Conv2dParams::same(3, 2),
            Some(Activation::Relu6),
        )?;
        let mut taps = [t1; 4];
        let mut x = t1;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            if let Some(slot) = self.tap_blocks.iter().position(|&b| b == i) {
                taps[slot] = x;
            }
        }
        Ok(EncoderTaps {
            t1,
            t2: taps[0],
            t3: taps[1],
            t4: taps[2],
            bridge: taps[3],
        })
    }

    fn forward_with<T: Float>(
        &self,
        ctx: &mut ForwardContext<'_, T>,
        image: Var,
    ) -> Result<(Var, EncoderTaps)> {
        let taps = self.encoder_forward(ctx, image)?;
        let skips = [
            Some(taps.t4),
            Some(taps.t3),
            Some(taps.t2),
            Some(taps.t1),
            None,
        ];
        let mut x = taps.bridge;
        for (block, skip) in self.decoder.iter().zip(skips) {
            x = block.forward(ctx, x, skip)?;
        }
        let logits = ctx.conv(x, HEAD_PREFIX, Conv2dParams::default(), true)?;
        Ok((ctx.graph.activation(logits, Activation::Sigmoid), taps))
    }

    /// Differentiable forward pass. In train mode the batch-norm running
    /// statistics in `params` are updated.
    pub fn forward<T: Float>(
        &self,
        graph: &mut Graph<T>,
        params: &mut ModelParams<T>,
        image: Var,
        mode: BatchNormMode,
    ) -> Result<ForwardOutput> {
        let (probs, taps, param_vars, updates) = {
            let mut ctx = ForwardContext::new(
                graph,
                params,
                mode,
                true,
                self.config.bn_momentum,
                self.config.bn_eps,
            );
            let (probs, taps) = self.forward_with(&mut ctx, image)?;
            let (vars, updates) = ctx.into_parts();
            (probs, taps, vars, updates)
        };
        for (name, tensor) in updates {
            params.insert(name, tensor);
        }
        Ok(ForwardOutput {
            probs,
            taps,
            param_vars,
        })
    }

    /// Eval-mode probabilities for an N×C×S×S batch, without gradients.
    pub fn predict<T: Float>(
        &self,
        params: &ModelParams<T>,
        images: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = graph.constant(images.clone());
        let mut ctx = ForwardContext::new(
            &mut graph,
            params,
            BatchNormMode::Eval,
            false,
            self.config.bn_momentum,
            self.config.bn_eps,
        );
        let (probs, _) = self.forward_with(&mut ctx, x)?;
        Ok(graph.value(probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights<T: Float>(params: &mut ModelParams<T>) {
        for (name, t) in params.iter_mut() {
            if name.ends_with(".weight") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    #[test]
    fn unit_expansion_block_with_zero_weights_is_identity() {
        let block = InvertedResidualLayout::new("b", 8, 1, 8, 1);
        assert!(block.has_residual());
        assert!(!block.has_expand());
        let mut params = ModelParams::<f64>::init(&block.param_specs(), 0);
        zero_weights(&mut params);
        let x = Tensor::<f64>::init(
            &[2, 8, 5, 5],
            crate::tensor::InitScheme::Uniform { lo: -1.0, hi: 1.0 },
            3,
        );
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = ForwardContext::new(&mut g, &params, BatchNormMode::Train, true, 0.1, 1e-5);
        let y = block.forward(&mut ctx, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn stride_two_disables_shortcut() {
        let block = InvertedResidualLayout::new("b", 24, 6, 24, 2);
        assert!(!block.has_residual());
        let block = InvertedResidualLayout::new("b", 16, 6, 24, 1);
        assert!(!block.has_residual());
    }

    #[test]
    fn expansion_block_shapes() {
        let block = InvertedResidualLayout::new("b", 16, 6, 24, 1);
        let specs = block.param_specs();
        let expand = specs.iter().find(|s| s.name == "b.expand.weight").unwrap();
        assert_eq!(expand.shape, vec![96, 16, 1, 1]);
        let params = ModelParams::<f32>::init(&specs, 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 16, 80, 80]));
        let mut ctx = ForwardContext::new(&mut g, &params, BatchNormMode::Eval, false, 0.1, 1e-5);
        let y = block.forward(&mut ctx, x).unwrap();
        assert_eq!(g.shape(y), &[1, 24, 80, 80]);
    }

    #[test]
    fn block_rejects_channel_mismatch() {
        let block = InvertedResidualLayout::new("b", 16, 6, 24, 1);
        let params = ModelParams::<f32>::init(&block.param_specs(), 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let mut ctx = ForwardContext::new(&mut g, &params, BatchNormMode::Eval, false, 0.1, 1e-5);
        let err = block.forward(&mut ctx, x).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn decoder_block_shapes_and_zero_weights() {
        let block = DecoderBlockLayout::new("d", 320, 96, 256);
        let specs = block.param_specs();
        assert_eq!(specs[0].shape, vec![256, 416, 3, 3]);
        let mut params = ModelParams::<f32>::init(&specs, 1);
        zero_weights(&mut params);
        let mut g = Graph::new();
        let x = g.constant(Tensor::init(
            &[1, 320, 10, 10],
            crate::tensor::InitScheme::Uniform { lo: 0.0, hi: 1.0 },
            1,
        ));
        let skip = g.constant(Tensor::ones(&[1, 96, 20, 20]));
        let mut ctx = ForwardContext::new(&mut g, &params, BatchNormMode::Train, true, 0.1, 1e-5);
        let y = block.forward(&mut ctx, x, Some(skip)).unwrap();
        assert_eq!(g.shape(y), &[1, 256, 20, 20]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_block_rejects_spatial_mismatch() {
        let block = DecoderBlockLayout::new("d", 8, 8, 8);
        let params = ModelParams::<f32>::init(&block.param_specs(), 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let skip = g.constant(Tensor::zeros(&[1, 8, 6, 6]));
        let mut ctx = ForwardContext::new(&mut g, &params, BatchNormMode::Eval, false, 0.1, 1e-5);
        let err = block.forward(&mut ctx, x, Some(skip)).unwrap_err();
        assert!(err.to_string().contains("spatial"), "{err}");
    }

    #[test]
    fn small_model_tap_channels() {
        let model = UNetMobileNetV2::new(ModelConfig::scaled(64, 0.25)).unwrap();
        assert_eq!(model.tap_channels(), [8, 8, 8, 24, 80]);
        let model = UNetMobileNetV2::new(ModelConfig::default()).unwrap();
        assert_eq!(model.tap_channels(), [32, 24, 32, 96, 320]);
        assert_eq!(
            model.decoder_blocks()[0].in_channels + model.decoder_blocks()[0].skip_channels,
            416
        );
    }

    #[test]
    fn init_params_deterministic_with_unit_gammas() {
        let model = UNetMobileNetV2::new(ModelConfig::scaled(64, 0.25)).unwrap();
        let a = model.init_params::<f32>(11);
        let b = model.init_params::<f32>(11);
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with(".bn.gamma") || name.ends_with(".running_var") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".bn.beta")
                || name.ends_with(".running_mean")
                || name.ends_with(".bias")
            {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        a.check_against(&model.param_specs()).unwrap();
    }

    #[test]
    fn rejects_wrong_input_side() {
        let model = UNetMobileNetV2::new(ModelConfig::scaled(64, 0.25)).unwrap();
        let params = model.init_params::<f32>(0);
        let err = model
            .predict(&params, &Tensor::zeros(&[1, 3, 32, 32]))
            .unwrap_err();
        assert!(err.to_string().contains("spatial"), "{err}");
    }
}
