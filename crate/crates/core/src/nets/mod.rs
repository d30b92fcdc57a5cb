//! Layer stacks for the selector and the reconstructor, the Adam optimizer
//! and the checkpoint format.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC,
};
pub use optim::{Adam, AdamConfig};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("spatial size {height}x{width} is not divisible by {factor}")]
    IndivisibleSpatial {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("layer {index} ({layer}): {reason}")]
    Layer {
        index: usize,
        layer: String,
        reason: String,
    },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One step of a network's forward definition.
///
/// Skip connections are expressed as a tiny stack machine: `SaveSkip(k)`
/// remembers the current activation in slot `k`, `AddSkip(k)` adds it back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Upsample2x,
    Flatten,
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
    SaveSkip(usize),
    AddSkip(usize),
}

impl Layer {
    fn conv(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        // kernel 3 keeps the size at stride 1; kernel 4 halves it at stride 2
        let padding = 1;
        Layer::Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Layer::Dense {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    fn label(&self) -> String {
        match self {
            Layer::Conv2d { name, .. } | Layer::Dense { name, .. } => name.clone(),
            other => format!("{other:?}"),
        }
    }

    /// Names, shapes and fan-in of the parameters this layer owns.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self {
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                vec![
                    (
                        format!("{name}.weight"),
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        fan_in,
                    ),
                    (format!("{name}.bias"), vec![*out_channels], fan_in),
                ]
            }
            Layer::Dense {
                name,
                inputs,
                outputs,
            } => vec![
                (format!("{name}.weight"), vec![*inputs, *outputs], *inputs),
                (format!("{name}.bias"), vec![*outputs], *inputs),
            ],
            _ => Vec::new(),
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Per-instance shape propagation through a layer stack. Returns the
/// output shape (without the batch axis).
pub fn infer_shape(input: &[usize], layers: &[Layer]) -> Result<Vec<usize>, NetError> {
    let mut shape = input.to_vec();
    let mut skips: Vec<Option<Vec<usize>>> = Vec::new();
    for (index, layer) in layers.iter().enumerate() {
        let fail = |reason: String| NetError::Layer {
            index,
            layer: layer.label(),
            reason,
        };
        shape = match layer {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(fail(format!("expected [C, H, W], got {shape:?}")));
                };
                if c != *in_channels {
                    return Err(fail(format!("expected {in_channels} channels, got {c}")));
                }
                let geom = crate::tensor::ConvGeometry::new(
                    &[1, c, h, w],
                    &[*out_channels, c, *kernel, *kernel],
                    *stride,
                    *padding,
                )
                .map_err(|e| fail(e.to_string()))?;
                vec![*out_channels, geom.out_h, geom.out_w]
            }
            Layer::Dense {
                inputs, outputs, ..
            } => {
                if shape != [*inputs] {
                    return Err(fail(format!("expected [{inputs}], got {shape:?}")));
                }
                vec![*outputs]
            }
            Layer::Relu => shape,
            Layer::Upsample2x => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(fail(format!("expected [C, H, W], got {shape:?}")));
                };
                vec![c, 2 * h, 2 * w]
            }
            Layer::Flatten => vec![shape.iter().product()],
            Layer::Unflatten {
                channels,
                height,
                width,
            } => {
                if shape.iter().product::<usize>() != channels * height * width {
                    return Err(fail(format!("cannot unflatten {shape:?}")));
                }
                vec![*channels, *height, *width]
            }
            Layer::SaveSkip(k) => {
                if skips.len() <= *k {
                    skips.resize(k + 1, None);
                }
                skips[*k] = Some(shape.clone());
                shape
            }
            Layer::AddSkip(k) => {
                let saved = skips.get(*k).cloned().flatten();
                if saved.as_ref() != Some(&shape) {
                    return Err(fail(format!(
                        "skip slot {k} holds {saved:?}, current activation is {shape:?}"
                    )));
                }
                shape
            }
        };
    }
    Ok(shape)
}

/// A parameterised layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    pub name: String,
    /// Per-instance input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub params: Vec<Param<S>>,
}

impl<S: Scalar> Network<S> {
    /// Validates the stack against `input_shape` and draws weights from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`; biases start at zero.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        rng: &mut dyn RngCore,
    ) -> Result<Self, NetError> {
        infer_shape(&input_shape, &layers)?;
        let mut params = Vec::new();
        for layer in &layers {
            for (pname, shape, fan_in) in layer.param_specs() {
                let value = if pname.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..bound)))
                };
                params.push(Param { name: pname, value });
            }
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            layers,
            params,
        })
    }

    /// Per-instance output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>, NetError> {
        infer_shape(&self.input_shape, &self.layers)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Records every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// Runs the stack on a batched input `[B, C, H, W]` using parameter
    /// handles from [`bind`](Self::bind) or [`bind_frozen`](Self::bind_frozen).
    pub fn forward(&self, tape: &mut Tape<S>, params: &[Var], input: Var) -> Result<Var, NetError> {
        if params.len() != self.params.len() {
            return Err(NetError::Invalid(format!(
                "{}: {} parameter handles for {} parameters",
                self.name,
                params.len(),
                self.params.len()
            )));
        }
        let batch = tape.shape(input).first().copied().unwrap_or(0);
        let mut x = input;
        let mut next = params.iter().copied();
        let mut skips: Vec<Option<Var>> = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            let wrap = |e: TensorError| NetError::Layer {
                index,
                layer: layer.label(),
                reason: e.to_string(),
            };
            x = match layer {
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    let y = tape.conv2d(x, w, *stride, *padding).map_err(wrap)?;
                    tape.channel_bias(y, b).map_err(wrap)?
                }
                Layer::Dense { .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    let y = tape.matmul(x, w).map_err(wrap)?;
                    tape.add(y, b).map_err(wrap)?
                }
                Layer::Relu => tape.relu(x).map_err(wrap)?,
                Layer::Upsample2x => tape.upsample2x(x).map_err(wrap)?,
                Layer::Flatten => {
                    let inner: usize = tape.shape(x)[1..].iter().product();
                    tape.reshape(x, vec![batch, inner]).map_err(wrap)?
                }
                Layer::Unflatten {
                    channels,
                    height,
                    width,
                } => tape
                    .reshape(x, vec![batch, *channels, *height, *width])
                    .map_err(wrap)?,
                Layer::SaveSkip(k) => {
                    if skips.len() <= *k {
                        skips.resize(k + 1, None);
                    }
                    skips[*k] = Some(x);
                    x
                }
                Layer::AddSkip(k) => {
                    let saved =
                        skips
                            .get(*k)
                            .copied()
                            .flatten()
                            .ok_or_else(|| NetError::Layer {
                                index,
                                layer: layer.label(),
                                reason: format!("skip slot {k} is empty"),
                            })?;
                    tape.add(x, saved).map_err(wrap)?
                }
            };
        }
        Ok(x)
    }

    /// Inference on a batch of inputs without recording gradients.
    pub fn predict(&self, input: &Tensor<S>) -> Result<Tensor<S>, NetError> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }

    /// Copies every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Whether the selector scores whole pixels or individual pixel-channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One score per pixel, shared by all channels.
    #[default]
    Pixel,
    /// One score per pixel and channel.
    Feature,
}

fn check_spatial(input_shape: &[usize]) -> Result<(usize, usize, usize), NetError> {
    let &[c, h, w] = input_shape else {
        return Err(NetError::Invalid(format!(
            "input shape must be [C, H, W], got {input_shape:?}"
        )));
    };
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(NetError::IndivisibleSpatial {
            height: h,
            width: w,
            factor: 4,
        });
    }
    Ok((c, h, w))
}

/// Layer stack of the selector: a two-level U-shaped encoder/decoder whose
/// head emits one logit per gated feature at the input resolution.
pub fn selector_layers(
    channels: usize,
    input_channels: usize,
    with_residual: bool,
    granularity: Granularity,
) -> Vec<Layer> {
    let (c, c2) = (channels, 2 * channels);
    let head_out = match granularity {
        Granularity::Pixel => 1,
        Granularity::Feature => input_channels,
    };
    let mut layers = vec![
        Layer::conv("enc1", input_channels, c, 3, 1),
        Layer::Relu,
        Layer::SaveSkip(0),
        Layer::conv("down1", c, c2, 4, 2),
        Layer::Relu,
        Layer::SaveSkip(1),
        Layer::conv("down2", c2, c2, 4, 2),
        Layer::Relu,
        Layer::conv("bottleneck", c2, c2, 3, 1),
        Layer::Relu,
        Layer::Upsample2x,
        Layer::conv("up1", c2, c2, 3, 1),
        Layer::Relu,
        Layer::AddSkip(1),
        Layer::Upsample2x,
        Layer::conv("up2", c2, c, 3, 1),
        Layer::Relu,
        Layer::AddSkip(0),
        Layer::Conv2d {
            name: "head".into(),
            in_channels: c,
            out_channels: head_out,
            kernel: 1,
            stride: 1,
            padding: 0,
        },
    ];
    if !with_residual {
        layers.retain(|l| !matches!(l, Layer::SaveSkip(_) | Layer::AddSkip(_)));
    }
    layers
}

/// Builds the selector network for inputs of shape `[C, H, W]`.
///
/// The head bias starts at zero and its weights are shrunk so the initial
/// logits sit near zero and initial scores near `tau(delta)`.
pub fn build_selector<S: Scalar>(
    channels: usize,
    input_shape: &[usize],
    with_residual: bool,
    granularity: Granularity,
    rng: &mut dyn RngCore,
) -> Result<Network<S>, NetError> {
    let (c, _, _) = check_spatial(input_shape)?;
    if channels == 0 {
        return Err(NetError::Invalid(
            "selector needs at least one channel".into(),
        ));
    }
    let layers = selector_layers(channels, c, with_residual, granularity);
    let mut net = Network::new("selector", input_shape.to_vec(), layers, rng)?;
    if let Some(head) = net.param_mut("head.weight") {
        head.value = head.value.map(|v| v * S::of(0.1));
    }
    Ok(net)
}

/// Layer stack of the reconstructor: conv encoder, dense bottleneck of
/// `latent_dim` units, conv decoder back to the input shape. With `skips`
/// the encoder activations are added back into the decoder at matching
/// resolutions.
pub fn reconstructor_layers(
    channels: usize,
    latent_dim: usize,
    input_shape: (usize, usize, usize),
    skips: bool,
) -> Vec<Layer> {
    let (cin, h, w) = input_shape;
    let (c, c2) = (channels, 2 * channels);
    let (h4, w4) = (h / 4, w / 4);
    let flat = c2 * h4 * w4;
    let mut layers = vec![
        Layer::conv("enc1", cin, c, 3, 1),
        Layer::Relu,
        Layer::SaveSkip(0),
        Layer::conv("enc2", c, c2, 4, 2),
        Layer::Relu,
        Layer::SaveSkip(1),
        Layer::conv("enc3", c2, c2, 4, 2),
        Layer::Relu,
        Layer::Flatten,
        Layer::dense("latent", flat, latent_dim),
        Layer::dense("expand", latent_dim, flat),
        Layer::Relu,
        Layer::Unflatten {
            channels: c2,
            height: h4,
            width: w4,
        },
        Layer::Upsample2x,
        Layer::conv("dec1", c2, c2, 3, 1),
        Layer::Relu,
        Layer::AddSkip(1),
        Layer::Upsample2x,
        Layer::conv("dec2", c2, c, 3, 1),
        Layer::Relu,
        Layer::AddSkip(0),
        Layer::conv("out", c, cin, 3, 1),
    ];
    if !skips {
        layers.retain(|l| !matches!(l, Layer::SaveSkip(_) | Layer::AddSkip(_)));
    }
    layers
}

/// Builds the downstream autoencoder for inputs of shape `[C, H, W]`.
pub fn build_reconstructor<S: Scalar>(
    channels: usize,
    latent_dim: usize,
    input_shape: &[usize],
    skips: bool,
    rng: &mut dyn RngCore,
) -> Result<Network<S>, NetError> {
    let dims = check_spatial(input_shape)?;
    if channels == 0 || latent_dim == 0 {
        return Err(NetError::Invalid(
            "reconstructor needs positive channel and latent sizes".into(),
        ));
    }
    let layers = reconstructor_layers(channels, latent_dim, dims, skips);
    let mut net = Network::new("reconstructor", input_shape.to_vec(), layers, rng)?;
    if let Some(out) = net.param_mut("out.weight") {
        out.value = out.value.map(|v| v * S::of(0.1));
    }
    Ok(net)
}
