//! Deployment: compaction of trained ALF layers and the `ALF1` container.
//!
//! Compaction keeps only the active code channels, so a deployed ALF layer
//! holds a `K×K×Ci×C_code_eff` code bank and a `C_code_eff×Co` expansion.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "ALF1" | u32 version | u32 height | u32 width | u32 channels | u32 classes
//! u32 layer count
//! per layer:
//!   u8 kind | u32 K | u32 Ci | u32 C_code_eff | u32 Co | u32 stride | u32 padding
//!   u8 sigma_inter | u8 sigma
//!   u64 n1 | n1 × f32 first payload
//!   u64 n2 | n2 × f32 second payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Kinds: 0 ALF (code bank, expansion), 1 convolution (weights, empty;
//! `C_code_eff = Co`), 2 global average pool (all fields zero), 3 linear
//! (`K = 1`, `Ci` inputs, `Co` outputs, weights, empty). Activation codes:
//! 0 identity, 1 relu.

use std::path::Path;

use log::warn;

use crate::block::AlfBlock;
use crate::cost::{code_max, layer_cost, CostReport, LayerDesc, LayerKind};
use crate::error::{AlfError, Result};
use crate::model::{linear_forward, InputSpec, Layer, Model};
use crate::ops;
use crate::tensor::{Activation, ConvGeometry, Layout, Tensor4};

pub const MAGIC: &[u8; 4] = b"ALF1";
pub const FORMAT_VERSION: u32 = 1;

const KIND_ALF: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_POOL: u8 = 2;
const KIND_LINEAR: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DeployedAlf {
    /// `K×K×Ci×C_code_eff`.
    pub code: Tensor4<f32>,
    /// `1×1×C_code_eff×Co`.
    pub w_exp: Tensor4<f32>,
    pub geom: ConvGeometry,
    pub sigma_inter: Activation,
    pub sigma: Activation,
}

impl DeployedAlf {
    pub fn code_channels(&self) -> usize {
        self.code.channels()
    }

    pub fn forward(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let inter = ops::activation(&ops::conv2d_fast(x, &self.code, &self.geom)?, self.sigma_inter);
        Ok(ops::activation(&ops::pointwise_conv(&inter, &self.w_exp)?, self.sigma))
    }

    /// True when the layer stores at least as many parameters as the plain
    /// convolution it replaces.
    pub fn is_uneconomical(&self) -> bool {
        let [k, _, ci, cc] = self.code.dims();
        cc as u64 >= code_max(ci as u64, self.w_exp.channels() as u64, k as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeployedLayer {
    Alf(DeployedAlf),
    Conv {
        weights: Tensor4<f32>,
        geom: ConvGeometry,
        activation: Activation,
    },
    GlobalAvgPool,
    Linear {
        weights: Tensor4<f32>,
    },
}

/// Inference-only model with compacted ALF layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployedModel {
    pub input: InputSpec,
    pub layers: Vec<DeployedLayer>,
}

/// Drops masked code channels from `block`.
pub fn compact(block: &AlfBlock<f32>) -> Result<DeployedAlf> {
    let keep = block.active_indices();
    Ok(DeployedAlf {
        code: block.encode_filters().select_channels(&keep)?,
        w_exp: block.w_exp().select_matrix_rows(&keep)?,
        geom: block.geometry(),
        sigma_inter: block.sigma_inter(),
        sigma: block.sigma(),
    })
}

pub fn deploy(model: &Model<f32>) -> Result<DeployedModel> {
    let layers = model
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Conv(c) => DeployedLayer::Conv {
                    weights: c.weights.clone(),
                    geom: c.geom,
                    activation: c.activation,
                },
                Layer::Alf(b) => {
                    let layer = compact(b)?;
                    if layer.is_uneconomical() {
                        warn!(
                            "compacted ALF layer keeps {} code channels, not below its break-even width",
                            layer.code_channels()
                        );
                    }
                    DeployedLayer::Alf(layer)
                }
                Layer::GlobalAvgPool => DeployedLayer::GlobalAvgPool,
                Layer::Linear(l) => DeployedLayer::Linear {
                    weights: l.weights.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeployedModel {
        input: model.input,
        layers,
    })
}

impl DeployedModel {
    pub fn classes(&self) -> usize {
        self.input.classes
    }

    pub fn forward(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let [_, h, w, c] = x.dims();
        let i = &self.input;
        if [h, w, c] != [i.height, i.width, i.channels] {
            return Err(AlfError::shape(format!(
                "deployed model expects samples of {}×{}×{}, got {:?}",
                i.height,
                i.width,
                i.channels,
                x.dims()
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                DeployedLayer::Alf(a) => a.forward(&h)?,
                DeployedLayer::Conv {
                    weights,
                    geom,
                    activation,
                } => ops::activation(&ops::conv2d_fast(&h, weights, geom)?, *activation),
                DeployedLayer::GlobalAvgPool => ops::global_avg_pool(&h),
                DeployedLayer::Linear { weights } => linear_forward(&h, weights)?,
            };
        }
        Ok(h)
    }

    pub fn alf_layers(&self) -> impl Iterator<Item = &DeployedAlf> {
        self.layers.iter().filter_map(|l| match l {
            DeployedLayer::Alf(a) => Some(a),
            _ => None,
        })
    }

    /// Total stored coefficients.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                DeployedLayer::Alf(a) => a.code.len() + a.w_exp.len(),
                DeployedLayer::Conv { weights, .. } | DeployedLayer::Linear { weights } => weights.len(),
                DeployedLayer::GlobalAvgPool => 0,
            })
            .sum()
    }

    /// Costs of every convolution at the recorded input size.
    pub fn cost_report(&self) -> Result<CostReport> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut entries = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (kind, k, ci, co, geom, code) = match layer {
                DeployedLayer::Alf(a) => {
                    let [k, _, ci, cc] = a.code.dims();
                    (LayerKind::Alf, k, ci, a.w_exp.channels(), a.geom, cc)
                }
                DeployedLayer::Conv { weights, geom, .. } => {
                    let [k, _, ci, co] = weights.dims();
                    (LayerKind::Conv, k, ci, co, *geom, co)
                }
                DeployedLayer::GlobalAvgPool => {
                    (h, w) = (1, 1);
                    continue;
                }
                DeployedLayer::Linear { .. } => continue,
            };
            let (ho, wo) = geom.output_hw(h, w)?;
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
            (h, w) = (ho, wo);
        }
        Ok(CostReport::new(entries))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let i = &self.input;
        for v in [i.height, i.width, i.channels, i.classes, self.layers.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for layer in &self.layers {
            let empty: &[f32] = &[];
            let (kind, dims, acts, p1, p2): (u8, [usize; 6], [Activation; 2], &[f32], &[f32]) = match layer {
                DeployedLayer::Alf(a) => {
                    let [k, _, ci, cc] = a.code.dims();
                    (
                        KIND_ALF,
                        [k, ci, cc, a.w_exp.channels(), a.geom.stride, a.geom.padding],
                        [a.sigma_inter, a.sigma],
                        a.code.data(),
                        a.w_exp.data(),
                    )
                }
                DeployedLayer::Conv {
                    weights,
                    geom,
                    activation,
                } => {
                    let [k, _, ci, co] = weights.dims();
                    (
                        KIND_CONV,
                        [k, ci, co, co, geom.stride, geom.padding],
                        [Activation::Identity, *activation],
                        weights.data(),
                        empty,
                    )
                }
                DeployedLayer::GlobalAvgPool => (KIND_POOL, [0; 6], [Activation::Identity; 2], empty, empty),
                DeployedLayer::Linear { weights } => {
                    let [_, _, i, o] = weights.dims();
                    (KIND_LINEAR, [1, i, o, o, 1, 0], [Activation::Identity; 2], weights.data(), empty)
                }
            };
            out.push(kind);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(acts[0].code());
            out.push(acts[1].code());
            for payload in [p1, p2] {
                out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
                for v in payload {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a container. Checks run in order: magic, version, structure
    /// and payload sizes, finiteness, checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(AlfError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(AlfError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let at = r.pos;
        let mut dims = [0usize; 4];
        for v in &mut dims {
            *v = r.u32("input dims")? as usize;
        }
        if dims.contains(&0) {
            return Err(AlfError::format(at, format!("input dims {dims:?} contain a zero")));
        }
        let input = InputSpec {
            height: dims[0],
            width: dims[1],
            channels: dims[2],
            classes: dims[3],
        };
        let count = r.u32("layer count")?;
        let mut layers = Vec::new();
        for _ in 0..count {
            layers.push(r.layer()?);
        }
        if bytes.len() < r.pos + 4 {
            return Err(AlfError::format(r.pos, "truncated before checksum"));
        }
        if bytes.len() > r.pos + 4 {
            return Err(AlfError::format(r.pos + 4, "trailing bytes after checksum"));
        }
        let stored = r.u32("checksum")?;
        let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored != computed {
            return Err(AlfError::Checksum { stored, computed });
        }
        Ok(Self { input, layers })
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn import(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AlfError::format(self.pos, format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn activation(&mut self) -> Result<Activation> {
        let at = self.pos;
        let code = self.u8("activation code")?;
        Activation::from_code(code).ok_or_else(|| AlfError::format(at, format!("unknown activation code {code}")))
    }

    fn payload(&mut self, dims: [usize; 4]) -> Result<Tensor4<f32>> {
        let at = self.pos;
        let n = self.u64("payload length")?;
        let expected: usize = dims.iter().product();
        if n != expected as u64 {
            return Err(AlfError::format(
                at,
                format!("payload holds {n} values, dims {dims:?} need {expected}"),
            ));
        }
        let raw = self.take(expected * 4, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AlfError::NonFinite("container payload"));
        }
        Tensor4::from_vec(dims, data, Layout::Kkio)
    }

    fn layer(&mut self) -> Result<DeployedLayer> {
        let at = self.pos;
        let kind = self.u8("layer kind")?;
        let mut d = [0usize; 6];
        for v in &mut d {
            *v = self.u32("layer dims")? as usize;
        }
        let [k, ci, cc, co, stride, padding] = d;
        let sigma_inter = self.activation()?;
        let sigma = self.activation()?;
        let geom = |at| {
            ConvGeometry::new(k, stride, padding).map_err(|e| AlfError::format(at, e.to_string()))
        };
        let require = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(AlfError::format(at, msg.to_string())) };
        match kind {
            KIND_ALF => {
                require(k > 0 && ci > 0 && cc > 0 && co > 0, "ALF layer with a zero dimension")?;
                let g = geom(at)?;
                let code = self.payload([k, k, ci, cc])?;
                let w_exp = self.payload([1, 1, cc, co])?;
                Ok(DeployedLayer::Alf(DeployedAlf {
                    code,
                    w_exp,
                    geom: g,
                    sigma_inter,
                    sigma,
                }))
            }
            KIND_CONV => {
                require(k > 0 && ci > 0 && co > 0, "convolution with a zero dimension")?;
                require(cc == co, "convolution must record C_code_eff = Co")?;
                let g = geom(at)?;
                let weights = self.payload([k, k, ci, co])?;
                self.payload([0, 0, 0, 0])?;
                Ok(DeployedLayer::Conv {
                    weights,
                    geom: g,
                    activation: sigma,
                })
            }
            KIND_POOL => {
                require(d == [0; 6], "pooling layer with non-zero dims")?;
                self.payload([0, 0, 0, 0])?;
                self.payload([0, 0, 0, 0])?;
                Ok(DeployedLayer::GlobalAvgPool)
            }
            KIND_LINEAR => {
                require(k == 1 && stride == 1 && padding == 0 && cc == co, "malformed linear layer header")?;
                require(ci > 0 && co > 0, "linear layer with a zero dimension")?;
                let weights = self.payload([1, 1, ci, co])?;
                self.payload([0, 0, 0, 0])?;
                Ok(DeployedLayer::Linear { weights })
            }
            other => Err(AlfError::format(at, format!("unknown layer kind {other}"))),
        }
    }
}
