//! Checkpoint and fused-model files.
//!
//! A checkpoint is a directory: `manifest.json` (shapes, layer topology,
//! config echo, format version) plus one raw little-endian `f32` payload per
//! tensor, keyed by parameter name. Diffable, endian-pinned, and readable
//! from any language.
//!
//! A fused model is a single JSON document: every activation layer replaced
//! by its piecewise polynomial (with the branch-weight snapshot it was folded
//! from), all other parameters copied through, norms in inference form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::BnRunning;
use crate::error::{Error, Result};
use crate::layers::{BnState, BranchKind, RepActParams, RepActVariant};
use crate::model::{ActivationKind, ActivationLayer, Block, ModelSpec, TinyCnn};
use crate::piecewise::{PiecewisePoly, PolyDoc};
use crate::tensor::Tensor;
use crate::train::ExperimentConfig;

pub const MANIFEST_VERSION: u32 = 1;
pub const FUSED_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ExperimentConfig,
    model: ModelSpec,
    /// Trainable state of each adaptive activation slot, in block order;
    /// `None` for fixed baseline slots.
    activations: Vec<Option<ActState>>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActState {
    variant: RepActVariant,
    branches: Vec<BranchKind>,
    bn: Option<BnStateDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnStateDoc {
    momentum: f32,
    eps: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn write_payload(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_payload(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("expected {} bytes for shape {shape:?}, got {}", numel * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Every tensor in the checkpoint: trainable parameters plus the norm
/// running buffers, keyed by dotted name.
fn all_tensors(model: &TinyCnn<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = model
        .param_infos()
        .into_iter()
        .map(|p| (p.name, model.param_value(p.id)))
        .collect();
    for (i, block) in model.blocks.iter().enumerate() {
        let c = block.bn_running.mean.len();
        out.push((
            format!("block{i}.bn.running_mean"),
            Tensor::new(vec![c], block.bn_running.mean.clone()).expect("channel count > 0"),
        ));
        out.push((
            format!("block{i}.bn.running_var"),
            Tensor::new(vec![c], block.bn_running.var.clone()).expect("channel count > 0"),
        ));
        if let ActivationLayer::RepAct(act) = &block.act {
            if let Some(bn) = &act.bn {
                out.push((
                    format!("block{i}.act.bn.running_mean"),
                    Tensor::scalar(bn.running_mean),
                ));
                out.push((
                    format!("block{i}.act.bn.running_var"),
                    Tensor::scalar(bn.running_var),
                ));
            }
        }
    }
    out
}

pub fn save_checkpoint(dir: &Path, model: &TinyCnn<f32>, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = all_tensors(model);
    let params = tensors
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file: format!("{name}.bin"),
        })
        .collect();
    let activations = model
        .blocks
        .iter()
        .map(|b| match &b.act {
            ActivationLayer::Fixed(_) => None,
            ActivationLayer::RepAct(act) => Some(ActState {
                variant: act.variant,
                branches: act.branches.clone(),
                bn: act.bn.as_ref().map(|bn| BnStateDoc {
                    momentum: bn.momentum,
                    eps: bn.eps,
                }),
            }),
        })
        .collect();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: config.clone(),
        model: model.spec.clone(),
        activations,
        params,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path.clone(), e))?;
    for (name, tensor) in &tensors {
        write_payload(&dir.join(format!("{name}.bin")), tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TinyCnn<f32>, ExperimentConfig)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(manifest_path.clone(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path.clone(), 0, format!("manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            manifest_path.clone(),
            0,
            format!(
                "unsupported checkpoint format_version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            ),
        ));
    }
    manifest.model.validate()?;
    if manifest.activations.len() != manifest.model.blocks.len() {
        return Err(Error::format(
            manifest_path.clone(),
            0,
            "manifest activations do not match block count",
        ));
    }

    let lookup = |name: &str| -> Result<Tensor<f32>> {
        let entry = manifest
            .params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| {
                Error::format(manifest_path.clone(), 0, format!("missing parameter '{name}'"))
            })?;
        read_payload(&dir.join(&entry.file), &entry.shape)
    };

    let mut blocks = Vec::with_capacity(manifest.model.blocks.len());
    let mut in_c = manifest.model.input[0];
    for (i, spec) in manifest.model.blocks.iter().enumerate() {
        let conv_w = lookup(&format!("block{i}.conv.weight"))?;
        if conv_w.shape() != [spec.out_channels, in_c, spec.kernel, spec.kernel] {
            return Err(Error::format(
                manifest_path.clone(),
                0,
                format!("block{i}.conv.weight shape mismatch"),
            ));
        }
        let act = match &manifest.activations[i] {
            None => ActivationLayer::Fixed(match manifest.model.activation {
                ActivationKind::Relu => PiecewisePoly::relu(),
                _ => PiecewisePoly::hardswish(),
            }),
            Some(state) => {
                let alphas = lookup(&format!("block{i}.act.alphas"))?;
                let slope = lookup(&format!("block{i}.act.prelu_slope"))?;
                let bn = match &state.bn {
                    None => None,
                    Some(doc) => Some(BnState {
                        gamma: lookup(&format!("block{i}.act.bn.gamma"))?.item(),
                        beta: lookup(&format!("block{i}.act.bn.beta"))?.item(),
                        running_mean: lookup(&format!("block{i}.act.bn.running_mean"))?.item(),
                        running_var: lookup(&format!("block{i}.act.bn.running_var"))?.item(),
                        momentum: doc.momentum,
                        eps: doc.eps,
                    }),
                };
                let params = RepActParams {
                    alphas: alphas.data().to_vec(),
                    prelu_slope: slope.item(),
                    variant: state.variant,
                    bn,
                    branches: state.branches.clone(),
                };
                params.validate()?;
                ActivationLayer::RepAct(params)
            }
        };
        blocks.push(Block {
            conv_w,
            conv_b: lookup(&format!("block{i}.conv.bias"))?,
            spec: *spec,
            bn_gamma: lookup(&format!("block{i}.bn.gamma"))?,
            bn_beta: lookup(&format!("block{i}.bn.beta"))?,
            bn_running: BnRunning {
                mean: lookup(&format!("block{i}.bn.running_mean"))?.data().to_vec(),
                var: lookup(&format!("block{i}.bn.running_var"))?.data().to_vec(),
            },
            act,
        });
        in_c = spec.out_channels;
    }
    let model = TinyCnn {
        spec: manifest.model,
        blocks,
        fc_w: lookup("fc.weight")?,
        fc_b: lookup("fc.bias")?,
    };
    Ok((model, manifest.config))
}

// ---------------------------------------------------------------------------
// fused model document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedSource {
    /// Effective branch weights the poly was folded from (softmaxed for the
    /// gated variant, norm-scaled for the BN variant).
    pub alphas: Vec<f64>,
    pub prelu_slope: f64,
    /// Constant folded into every segment (0 unless a norm was absorbed).
    pub offset: f64,
    pub branches: Vec<BranchKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedActivation {
    pub layer: String,
    pub poly: PolyDoc,
    pub source: FusedSource,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FusedBlockParams {
    pub conv_weight: Vec<f32>,
    pub conv_bias: Vec<f32>,
    pub bn_gamma: Vec<f32>,
    pub bn_beta: Vec<f32>,
    pub bn_running_mean: Vec<f32>,
    pub bn_running_var: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FusedModel {
    pub format_version: u32,
    /// Marker distinguishing a fused export from a checkpoint.
    pub fused: bool,
    pub model: ModelSpec,
    pub activations: Vec<FusedActivation>,
    pub blocks: Vec<FusedBlockParams>,
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
}

impl FusedModel {
    pub fn from_model(model: &TinyCnn<f32>) -> Result<Self> {
        let mut activations = Vec::with_capacity(model.blocks.len());
        for (i, block) in model.blocks.iter().enumerate() {
            let layer = format!("block{i}.act");
            let (poly, source) = match &block.act {
                ActivationLayer::Fixed(poly) => {
                    let weights = match model.spec.activation {
                        ActivationKind::Relu => vec![0.0, 1.0, 0.0, 0.0],
                        _ => vec![0.0, 0.0, 0.0, 1.0],
                    };
                    (
                        poly.clone(),
                        FusedSource {
                            alphas: weights,
                            prelu_slope: 0.0,
                            offset: 0.0,
                            branches: crate::layers::DEFAULT_BRANCHES.to_vec(),
                        },
                    )
                }
                ActivationLayer::RepAct(act) => {
                    let poly = act.fuse()?;
                    let eff = act.effective_alphas()?;
                    let offset = match &act.bn {
                        Some(bn) => bn.folded_offset()? as f64,
                        None => 0.0,
                    };
                    (
                        poly,
                        FusedSource {
                            alphas: eff.iter().map(|&a| a as f64).collect(),
                            prelu_slope: act.prelu_slope as f64,
                            offset,
                            branches: act.branches.clone(),
                        },
                    )
                }
            };
            activations.push(FusedActivation {
                layer,
                poly: PolyDoc::from_poly(&poly),
                source,
            });
        }
        let blocks = model
            .blocks
            .iter()
            .map(|b| FusedBlockParams {
                conv_weight: b.conv_w.data().to_vec(),
                conv_bias: b.conv_b.data().to_vec(),
                bn_gamma: b.bn_gamma.data().to_vec(),
                bn_beta: b.bn_beta.data().to_vec(),
                bn_running_mean: b.bn_running.mean.clone(),
                bn_running_var: b.bn_running.var.clone(),
            })
            .collect();
        Ok(FusedModel {
            format_version: FUSED_FORMAT_VERSION,
            fused: true,
            model: model.spec.clone(),
            activations,
            blocks,
            fc_weight: model.fc_w.data().to_vec(),
            fc_bias: model.fc_b.data().to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fused model serialization");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: FusedModel = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, 0, format!("fused model: {e}")))?;
        if doc.format_version != FUSED_FORMAT_VERSION {
            return Err(Error::format(
                path,
                0,
                format!(
                    "unsupported fused format_version {} (expected {FUSED_FORMAT_VERSION})",
                    doc.format_version
                ),
            ));
        }
        if !doc.fused {
            return Err(Error::format(path, 0, "document is not a fused model"));
        }
        Ok(doc)
    }

    pub fn polys(&self) -> Result<Vec<(String, PiecewisePoly)>> {
        self.activations
            .iter()
            .map(|a| {
                Ok((
                    a.layer.clone(),
                    PolyDoc {
                        breakpoints: a.poly.breakpoints.clone(),
                        segments: a.poly.segments.clone(),
                        format_version: a.poly.format_version,
                    }
                    .into_poly()?,
                ))
            })
            .collect()
    }
}

/// True when `path` looks like a fused-model export (used to reject fusing
/// something that is already fused).
pub fn is_fused_model_file(path: &Path) -> bool {
    if !path.is_file() {
        return false;
    }
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("fused").and_then(|f| f.as_bool()))
        .unwrap_or(false)
}
