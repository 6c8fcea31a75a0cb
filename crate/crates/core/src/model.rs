//! Sequential CNN classifiers built from plain convolutions, ALF blocks,
//! global average pooling and a final linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::block::{AlfBlock, AlfVars};
use crate::cost::{layer_cost, CostReport, LayerDesc, LayerKind};
use crate::error::{AlfError, Result};
use crate::factorizer::masked_count;
use crate::ops;
use crate::tensor::{Activation, ConvGeometry, Layout, Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl InputSpec {
    pub fn batch_dims(&self, n: usize) -> [usize; 4] {
        [n, self.height, self.width, self.channels]
    }
}

fn default_stride() -> usize {
    1
}

/// One entry of an architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    AlfConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
        /// Intermediate activation; falls back to the run-wide default.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inter_activation: Option<Activation>,
        /// Code width at construction; defaults to `out_channels`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        code_channels: Option<usize>,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Checks the channel chain and geometry; returns the per-sample output
    /// dims `[1, H, W, C]` after every layer.
    pub fn validate(&self) -> Result<Vec<[usize; 4]>> {
        let cfg = |msg: String| AlfError::Config(msg);
        let InputSpec {
            height,
            width,
            channels,
            classes,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 || classes == 0 {
            return Err(cfg("input dims and class count must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(cfg("architecture has no layers".into()));
        }
        let mut dims = [1, height, width, channels];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            dims = match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                }
                | LayerSpec::AlfConv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if *in_channels != dims[3] {
                        return Err(cfg(format!(
                            "layer {i}: in_channels {in_channels} but previous layer produces {}",
                            dims[3]
                        )));
                    }
                    if *out_channels == 0 {
                        return Err(cfg(format!("layer {i}: out_channels must be positive")));
                    }
                    if let LayerSpec::AlfConv {
                        code_channels: Some(code),
                        ..
                    } = layer
                    {
                        if *code == 0 || code > out_channels {
                            return Err(cfg(format!(
                                "layer {i}: code_channels {code} outside 1..={out_channels}"
                            )));
                        }
                    }
                    let geom = ConvGeometry::new(*kernel, *stride, *padding)
                        .map_err(|e| cfg(format!("layer {i}: {e}")))?;
                    let (ho, wo) = geom
                        .output_hw(dims[1], dims[2])
                        .map_err(|e| cfg(format!("layer {i}: {e}")))?;
                    [1, ho, wo, *out_channels]
                }
                LayerSpec::GlobalAvgPool => [1, 1, 1, dims[3]],
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let flat = dims[1] * dims[2] * dims[3];
                    if *in_features != flat {
                        return Err(cfg(format!(
                            "layer {i}: in_features {in_features} but previous layer produces {flat}"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(cfg(format!("layer {i}: out_features must be positive")));
                    }
                    [1, 1, 1, *out_features]
                }
            };
            shapes.push(dims);
        }
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features, .. }) if *out_features == classes => Ok(shapes),
            Some(LayerSpec::Linear { out_features, .. }) => Err(cfg(format!(
                "classifier produces {out_features} outputs for {classes} classes"
            ))),
            _ => Err(cfg("architecture must end in a linear classifier".into())),
        }
    }

    /// Predicted costs of every convolution when ALF layers are pruned at
    /// rate `pr`. Reads only the description.
    pub fn cost_report(&self, pr: f64) -> Result<CostReport> {
        let shapes = self.validate()?;
        let mut entries = Vec::new();
        for (i, (layer, out)) in self.layers.iter().zip(&shapes).enumerate() {
            let (kind, ci, co, k, code) = match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (LayerKind::Conv, *in_channels, *out_channels, *kernel, *out_channels),
                LayerSpec::AlfConv {
                    in_channels,
                    out_channels,
                    kernel,
                    code_channels,
                    ..
                } => {
                    let code = code_channels.unwrap_or(*out_channels);
                    (
                        LayerKind::Alf,
                        *in_channels,
                        *out_channels,
                        *kernel,
                        code - masked_count(pr, code),
                    )
                }
                _ => continue,
            };
            let desc = LayerDesc {
                id: format!("layer{i}"),
                kind,
                ci: ci as u64,
                co: co as u64,
                k: k as u64,
                ho: out[1] as u64,
                wo: out[2] as u64,
            };
            entries.push(layer_cost(&desc, code as u64)?);
        }
        Ok(CostReport::new(entries))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ConvLayer<T: Real = f32> {
    pub weights: Tensor4<T>,
    pub geom: ConvGeometry,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LinearLayer<T: Real = f32> {
    /// `1×1×in×out`, applied to the flattened NHWC features.
    pub weights: Tensor4<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub enum Layer<T: Real = f32> {
    Conv(ConvLayer<T>),
    Alf(AlfBlock<T>),
    GlobalAvgPool,
    Linear(LinearLayer<T>),
}

fn flatten<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, h, w, c] = x.dims();
    x.reshape([n, 1, 1, h * w * c])
}

/// Linear classifier over flattened NHWC features; shared with the deployed model.
pub(crate) fn linear_forward<T: Real>(x: &Tensor4<T>, weights: &Tensor4<T>) -> Result<Tensor4<T>> {
    ops::channel_matmul(&flatten(x)?, weights)
}

/// Handles produced by [`Model::record`].
#[derive(Debug, Clone)]
pub struct Recorded {
    pub logits: Var,
    /// One reconstruction loss per ALF layer, in layer order.
    pub reconstruction: Vec<Var>,
    /// Trainable parameters in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Model<T: Real = f32> {
    pub input: InputSpec,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Model<T> {
    /// Random initialization (He-normal for convolutions and the classifier).
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, default_inter: Activation, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let layer = match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => {
                    let std = (2.0 / (kernel * kernel * in_channels) as f64).sqrt();
                    Layer::Conv(ConvLayer {
                        weights: Tensor4::randn([kernel, kernel, in_channels, out_channels], std, Layout::Kkio, rng),
                        geom: ConvGeometry::new(kernel, stride, padding)?,
                        activation,
                    })
                }
                LayerSpec::AlfConv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    activation,
                    inter_activation,
                    code_channels,
                } => Layer::Alf(AlfBlock::init(
                    in_channels,
                    out_channels,
                    code_channels.unwrap_or(out_channels),
                    ConvGeometry::new(kernel, stride, padding)?,
                    inter_activation.unwrap_or(default_inter),
                    activation,
                    rng,
                )?),
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let std = (1.0 / in_features as f64).sqrt();
                    Layer::Linear(LinearLayer {
                        weights: Tensor4::randn([1, 1, in_features, out_features], std, Layout::Kkio, rng),
                    })
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            input: arch.input,
            layers,
        })
    }

    pub fn classes(&self) -> usize {
        self.input.classes
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let [_, h, w, c] = x.dims();
        if [h, w, c] != [self.input.height, self.input.width, self.input.channels] {
            return Err(AlfError::shape(format!(
                "model expects samples of {}×{}×{}, got {:?}",
                self.input.height,
                self.input.width,
                self.input.channels,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Training-mode inference: ALF layers run at full width with masked
    /// channels zeroed. Returns `[N,1,1,classes]` logits.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => ops::activation(&ops::conv2d_fast(&h, &c.weights, &c.geom)?, c.activation),
                Layer::Alf(b) => b.forward(&h)?,
                Layer::GlobalAvgPool => ops::global_avg_pool(&h),
                Layer::Linear(l) => linear_forward(&h, &l.weights)?,
            };
        }
        Ok(h)
    }

    /// Records the forward pass of `x` on `tape`, registering fresh
    /// parameter nodes.
    pub fn record(&self, tape: &mut Tape<T>, x: &Tensor4<T>) -> Result<Recorded> {
        let params = self.register(tape);
        self.record_with(tape, x, &params)
    }

    /// Adds every trainable array to `tape`, in [`Model::params`] order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Records the forward pass using the given parameter nodes, which must
    /// follow [`Model::params`] order and dims.
    pub fn record_with(&self, tape: &mut Tape<T>, x: &Tensor4<T>, params: &[Var]) -> Result<Recorded> {
        self.check_input(x)?;
        let expected = self.params().len();
        if params.len() != expected {
            return Err(AlfError::shape(format!(
                "model has {expected} parameter arrays, got {} nodes",
                params.len()
            )));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter count checked");
        let mut reconstruction = Vec::new();
        let mut h = tape.constant(x.clone());
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => {
                    let y = tape.conv2d(h, take(), c.geom)?;
                    tape.activation(y, c.activation)
                }
                Layer::Alf(b) => {
                    let vars = AlfVars {
                        w_ref: take(),
                        encoder: take(),
                        w_exp: take(),
                    };
                    let (y, rec) = b.record(tape, h, vars)?;
                    reconstruction.push(rec);
                    y
                }
                Layer::GlobalAvgPool => tape.global_avg_pool(h),
                Layer::Linear(_) => {
                    let [n, hh, ww, c] = tape.value(h).dims();
                    let flat = tape.reshape(h, [n, 1, 1, hh * ww * c])?;
                    tape.channel_matmul(flat, take())?
                }
            };
        }
        Ok(Recorded {
            logits: h,
            reconstruction,
            params: params.to_vec(),
        })
    }

    /// Trainable arrays in recording order.
    pub fn params(&self) -> Vec<&Tensor4<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.push(&c.weights),
                Layer::Alf(b) => out.extend(b.weights()),
                Layer::GlobalAvgPool => {}
                Layer::Linear(l) => out.push(&l.weights),
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.push(&mut c.weights),
                Layer::Alf(b) => out.extend(b.weights_mut()),
                Layer::GlobalAvgPool => {}
                Layer::Linear(l) => out.push(&mut l.weights),
            }
        }
        out
    }

    pub fn alf_blocks(&self) -> impl Iterator<Item = &AlfBlock<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Alf(b) => Some(b),
            _ => None,
        })
    }

    pub fn alf_blocks_mut(&mut self) -> impl Iterator<Item = &mut AlfBlock<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Alf(b) => Some(b),
            _ => None,
        })
    }

    /// Sum of the reconstruction losses of all ALF layers.
    pub fn reconstruction_loss(&self) -> f64 {
        self.alf_blocks().map(|b| b.reconstruction_loss()).sum()
    }

    /// Costs of every convolution under the current masks.
    pub fn cost_report(&self) -> Result<CostReport> {
        let mut dims = self.input.batch_dims(1);
        let mut entries = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (kind, w, geom, code) = match layer {
                Layer::Conv(c) => (LayerKind::Conv, &c.weights, c.geom, c.weights.channels()),
                Layer::Alf(b) => (LayerKind::Alf, b.w_ref(), b.geometry(), b.active_channels()),
                Layer::GlobalAvgPool => {
                    dims = [1, 1, 1, dims[3]];
                    continue;
                }
                Layer::Linear(l) => {
                    dims = [1, 1, 1, l.weights.channels()];
                    continue;
                }
            };
            let [k, _, ci, co] = w.dims();
            let (ho, wo) = geom.output_hw(dims[1], dims[2])?;
            let desc = LayerDesc {
                id: format!("layer{i}"),
                kind,
                ci: ci as u64,
                co: co as u64,
                k: k as u64,
                ho: ho as u64,
                wo: wo as u64,
            };
            entries.push(layer_cost(&desc, code as u64)?);
            dims = [1, ho, wo, co];
        }
        Ok(CostReport::new(entries))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            input: self.input,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(ConvLayer {
                        weights: c.weights.cast(),
                        geom: c.geom,
                        activation: c.activation,
                    }),
                    Layer::Alf(b) => Layer::Alf(b.cast()),
                    Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                    Layer::Linear(l) => Layer::Linear(LinearLayer {
                        weights: l.weights.cast(),
                    }),
                })
                .collect(),
        }
    }
}
