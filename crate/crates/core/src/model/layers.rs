use std::collections::BTreeMap;

use super::params::{bn_specs, conv_specs, ModelParams, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Activation, BatchNormMode, Conv2dParams, Float, Graph, Tensor, Var};

/// Binds named parameters into a [`Graph`] as they are first used and
/// collects batch-norm running-stat updates produced in train mode.
pub struct ForwardContext<'a, T: Float> {
    pub graph: &'a mut Graph<T>,
    params: &'a ModelParams<T>,
    bound: BTreeMap<String, Var>,
    running_updates: BTreeMap<String, Tensor<T>>,
    mode: BatchNormMode,
    trainable: bool,
    bn_momentum: f64,
    bn_eps: f64,
}

impl<'a, T: Float> ForwardContext<'a, T> {
    /// `trainable` marks bound parameters as requiring gradients.
    pub fn new(
        graph: &'a mut Graph<T>,
        params: &'a ModelParams<T>,
        mode: BatchNormMode,
        trainable: bool,
        bn_momentum: f64,
        bn_eps: f64,
    ) -> Self {
        Self {
            graph,
            params,
            bound: BTreeMap::new(),
            running_updates: BTreeMap::new(),
            mode,
            trainable,
            bn_momentum,
            bn_eps,
        }
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&var) = self.bound.get(name) {
            return Ok(var);
        }
        let tensor = self.params.require(name)?.clone();
        let var = self.graph.leaf(tensor, self.trainable);
        self.bound.insert(name.to_owned(), var);
        Ok(var)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, params: Conv2dParams, bias: bool) -> Result<Var> {
        let weight = self.param(&format!("{prefix}.weight"))?;
        let bias = if bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.conv2d(x, weight, bias, params)
    }

    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.bn.gamma"))?;
        let beta = self.param(&format!("{prefix}.bn.beta"))?;
        let mean_name = format!("{prefix}.bn.running_mean");
        let var_name = format!("{prefix}.bn.running_var");
        let mut running_mean = self.params.require(&mean_name)?.clone();
        let mut running_var = self.params.require(&var_name)?.clone();
        let out = self.graph.batchnorm2d(
            x,
            gamma,
            beta,
            &mut running_mean,
            &mut running_var,
            self.mode,
            self.bn_momentum,
            self.bn_eps,
        )?;
        if self.mode == BatchNormMode::Train {
            self.running_updates.insert(mean_name, running_mean);
            self.running_updates.insert(var_name, running_var);
        }
        Ok(out)
    }

    /// conv (no bias) → batch norm → optional activation.
    pub fn conv_bn(
        &mut self,
        x: Var,
        prefix: &str,
        params: Conv2dParams,
        act: Option<Activation>,
    ) -> Result<Var> {
        let y = self.conv(x, prefix, params, false)?;
        let y = self.batchnorm(y, prefix)?;
        Ok(match act {
            Some(kind) => self.graph.activation(y, kind),
            None => y,
        })
    }

    /// Parameter name → graph variable for everything bound so far.
    pub fn into_parts(self) -> (BTreeMap<String, Var>, BTreeMap<String, Tensor<T>>) {
        (self.bound, self.running_updates)
    }
}

fn channels_of<T: Float>(graph: &Graph<T>, x: Var) -> usize {
    graph.shape(x).get(1).copied().unwrap_or(0)
}

/// Concrete channel plan of one inverted residual block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvertedResidualLayout {
    pub prefix: String,
    pub in_channels: usize,
    pub expansion: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl InvertedResidualLayout {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        expansion: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            expansion,
            hidden_channels: in_channels * expansion,
            out_channels,
            stride,
        }
    }

    pub fn has_expand(&self) -> bool {
        self.expansion != 1
    }

    /// Shortcut iff the block keeps both resolution and width.
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let p = &self.prefix;
        if self.has_expand() {
            conv_specs(
                &mut out,
                &format!("{p}.expand"),
                [self.hidden_channels, self.in_channels, 1, 1],
                false,
            );
            bn_specs(&mut out, &format!("{p}.expand"), self.hidden_channels);
        }
        conv_specs(
            &mut out,
            &format!("{p}.depthwise"),
            [self.hidden_channels, 1, 3, 3],
            false,
        );
        bn_specs(&mut out, &format!("{p}.depthwise"), self.hidden_channels);
        conv_specs(
            &mut out,
            &format!("{p}.project"),
            [self.out_channels, self.hidden_channels, 1, 1],
            false,
        );
        bn_specs(&mut out, &format!("{p}.project"), self.out_channels);
        out
    }

    /// expand 1×1 (when t > 1) + BN + relu6 → depthwise 3×3 + BN + relu6 →
    /// linear 1×1 projection + BN, plus the shortcut when applicable.
    pub fn forward<T: Float>(&self, ctx: &mut ForwardContext<'_, T>, x: Var) -> Result<Var> {
        let got = channels_of(ctx.graph, x);
        if got != self.in_channels {
            return Err(Error::shape(
                "inverted_residual",
                "channels",
                format!(
                    "{} expects {} input channels, got {got}",
                    self.prefix, self.in_channels
                ),
            ));
        }
        let p = &self.prefix;
        let mut h = x;
        if self.has_expand() {
            h = ctx.conv_bn(
                h,
                &format!("{p}.expand"),
                Conv2dParams::default(),
                Some(Activation::Relu6),
            )?;
        }
        h = ctx.conv_bn(
            h,
            &format!("{p}.depthwise"),
            Conv2dParams::depthwise(3, self.stride, self.hidden_channels),
            Some(Activation::Relu6),
        )?;
        h = ctx.conv_bn(h, &format!("{p}.project"), Conv2dParams::default(), None)?;
        if self.has_residual() {
            h = ctx.graph.add(h, x)?;
        }
        Ok(h)
    }
}

/// Upsample → concat skip → two (3×3 conv + BN + relu) layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderBlockLayout {
    pub prefix: String,
    pub in_channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
}

impl DecoderBlockLayout {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        skip_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            skip_channels,
            out_channels,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let p = &self.prefix;
        let first_in = self.in_channels + self.skip_channels;
        conv_specs(
            &mut out,
            &format!("{p}.conv1"),
            [self.out_channels, first_in, 3, 3],
            false,
        );
        bn_specs(&mut out, &format!("{p}.conv1"), self.out_channels);
        conv_specs(
            &mut out,
            &format!("{p}.conv2"),
            [self.out_channels, self.out_channels, 3, 3],
            false,
        );
        bn_specs(&mut out, &format!("{p}.conv2"), self.out_channels);
        out
    }

    pub fn forward<T: Float>(
        &self,
        ctx: &mut ForwardContext<'_, T>,
        x: Var,
        skip: Option<Var>,
    ) -> Result<Var> {
        let (_, c, h, w) = ctx.graph.value(x).dims4("decoder_block")?;
        if c != self.in_channels {
            return Err(Error::shape(
                "decoder_block",
                "channels",
                format!(
                    "{} expects {} input channels, got {c}",
                    self.prefix, self.in_channels
                ),
            ));
        }
        let mut y = ctx.graph.upsample2x(x)?;
        if let Some(skip) = skip {
            let (_, sc, sh, sw) = ctx.graph.value(skip).dims4("decoder_block")?;
            if sh != 2 * h || sw != 2 * w {
                return Err(Error::shape(
                    "decoder_block",
                    "spatial",
                    format!(
                        "{}: skip is {sh}×{sw}, expected {}×{}",
                        self.prefix,
                        2 * h,
                        2 * w
                    ),
                ));
            }
            if sc != self.skip_channels {
                return Err(Error::shape(
                    "decoder_block",
                    "channels",
                    format!(
                        "{} expects {} skip channels, got {sc}",
                        self.prefix, self.skip_channels
                    ),
                ));
            }
            y = ctx.graph.concat_channels(y, skip)?;
        } else if self.skip_channels != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} requires a skip input",
                self.prefix
            )));
        }
        let p = &self.prefix;
        let y = ctx.conv_bn(
            y,
            &format!("{p}.conv1"),
            Conv2dParams::same(3, 1),
            Some(Activation::Relu),
        )?;
        ctx.conv_bn(
            y,
            &format!("{p}.conv2"),
            Conv2dParams::same(3, 1),
            Some(Activation::Relu),
        )
    }
}
