//! Small conv-net assembly: stacked conv → batch-norm → activation blocks,
//! global average pooling, and a linear classifier head. Every block's
//! activation slot holds either a fixed piecewise poly (the baselines) or a
//! trainable adaptive layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnRunning, RepActVars, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::layers::{Mode, RepActParams, RepActVariant, DEFAULT_BRANCHES};
use crate::piecewise::{PiecewisePoly, PwEval};
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Per-channel batch-norm constants for the conv blocks. (The one-channel
/// norm inside variant III pins its own eps of 1e-6.)
pub const BN2D_EPS: f64 = 1e-5;
pub const BN2D_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Hardswish,
    Relu,
    RepactI,
    RepactIi,
    RepactIii,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Hardswish => "hardswish",
            ActivationKind::Relu => "relu",
            ActivationKind::RepactI => "repact_i",
            ActivationKind::RepactIi => "repact_ii",
            ActivationKind::RepactIii => "repact_iii",
        }
    }

    pub fn repact_variant(self) -> Option<RepActVariant> {
        match self {
            ActivationKind::Hardswish | ActivationKind::Relu => None,
            ActivationKind::RepactI => Some(RepActVariant::I),
            ActivationKind::RepactIi => Some(RepActVariant::IiSoftmax),
            ActivationKind::RepactIii => Some(RepActVariant::IiiBn),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[C, H, W]` of one input example.
    pub input: [usize; 3],
    pub classes: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub activation: ActivationKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("model needs at least one conv block"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("model needs at least two classes"));
        }
        if self.input.contains(&0) {
            return Err(Error::invalid("input extents must be positive"));
        }
        let mut h = self.input[1];
        let mut w = self.input[2];
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::invalid(format!(
                    "block {i}: channels, kernel, and stride must be positive"
                )));
            }
            let ph = h + 2 * b.pad;
            let pw = w + 2 * b.pad;
            if ph < b.kernel || pw < b.kernel {
                return Err(Error::invalid(format!(
                    "block {i}: kernel {} does not fit {h}x{w} input with pad {}",
                    b.kernel, b.pad
                )));
            }
            h = (ph - b.kernel) / b.stride + 1;
            w = (pw - b.kernel) / b.stride + 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActivationLayer<T> {
    Fixed(PiecewisePoly),
    RepAct(RepActParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub spec: ConvBlockSpec,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub bn_running: BnRunning<T>,
    pub act: ActivationLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyCnn<T> {
    pub spec: ModelSpec,
    pub blocks: Vec<Block<T>>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

/// Stable identifier of one trainable tensor inside the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    ConvWeight(usize),
    ConvBias(usize),
    BnGamma(usize),
    BnBeta(usize),
    ActAlphas(usize),
    ActSlope(usize),
    ActBnGamma(usize),
    ActBnBeta(usize),
    FcWeight,
    FcBias,
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub id: ParamId,
    /// Dotted path, e.g. `block0.conv.weight`; also the checkpoint key.
    pub name: String,
    /// Conv/linear weights get L2 decay; activation and norm scalars do not.
    pub weight_decay: bool,
}

impl<T: Element> TinyCnn<T> {
    /// He-normal conv/linear weights, identity norms, evenly initialised
    /// activation weights; fully determined by `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |std: f64, rng: &mut ChaCha8Rng| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        };
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut in_c = spec.input[0];
        for b in &spec.blocks {
            let fan_in = in_c * b.kernel * b.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let conv_w = Tensor::from_fn(
                &[b.out_channels, in_c, b.kernel, b.kernel],
                |_| T::from_f64(normal(std, &mut rng)),
            )?;
            let act = match spec.activation.repact_variant() {
                None => ActivationLayer::Fixed(match spec.activation {
                    ActivationKind::Relu => PiecewisePoly::relu(),
                    _ => PiecewisePoly::hardswish(),
                }),
                Some(variant) => {
                    ActivationLayer::RepAct(RepActParams::init(variant, &DEFAULT_BRANCHES)?)
                }
            };
            blocks.push(Block {
                conv_w,
                conv_b: Tensor::zeros(&[b.out_channels])?,
                spec: *b,
                bn_gamma: Tensor::full(&[b.out_channels], T::one())?,
                bn_beta: Tensor::zeros(&[b.out_channels])?,
                bn_running: BnRunning::identity(b.out_channels),
                act,
            });
            in_c = b.out_channels;
        }
        let std = (2.0 / in_c as f64).sqrt();
        let fc_w = Tensor::from_fn(&[in_c, spec.classes], |_| T::from_f64(normal(std, &mut rng)))?;
        let fc_b = Tensor::zeros(&[spec.classes])?;
        Ok(TinyCnn {
            spec,
            blocks,
            fc_w,
            fc_b,
        })
    }

    /// Every trainable tensor in a fixed order. Checkpoints, the optimizer,
    /// the gradient checker, and the metrics log all follow this order.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let base = format!("block{i}");
            out.push(ParamInfo {
                id: ParamId::ConvWeight(i),
                name: format!("{base}.conv.weight"),
                weight_decay: true,
            });
            out.push(ParamInfo {
                id: ParamId::ConvBias(i),
                name: format!("{base}.conv.bias"),
                weight_decay: false,
            });
            out.push(ParamInfo {
                id: ParamId::BnGamma(i),
                name: format!("{base}.bn.gamma"),
                weight_decay: false,
            });
            out.push(ParamInfo {
                id: ParamId::BnBeta(i),
                name: format!("{base}.bn.beta"),
                weight_decay: false,
            });
            if let ActivationLayer::RepAct(act) = &block.act {
                out.push(ParamInfo {
                    id: ParamId::ActAlphas(i),
                    name: format!("{base}.act.alphas"),
                    weight_decay: false,
                });
                out.push(ParamInfo {
                    id: ParamId::ActSlope(i),
                    name: format!("{base}.act.prelu_slope"),
                    weight_decay: false,
                });
                if act.bn.is_some() {
                    out.push(ParamInfo {
                        id: ParamId::ActBnGamma(i),
                        name: format!("{base}.act.bn.gamma"),
                        weight_decay: false,
                    });
                    out.push(ParamInfo {
                        id: ParamId::ActBnBeta(i),
                        name: format!("{base}.act.bn.beta"),
                        weight_decay: false,
                    });
                }
            }
        }
        out.push(ParamInfo {
            id: ParamId::FcWeight,
            name: "fc.weight".to_string(),
            weight_decay: true,
        });
        out.push(ParamInfo {
            id: ParamId::FcBias,
            name: "fc.bias".to_string(),
            weight_decay: false,
        });
        out
    }

    /// Names of the adaptive activation layers, e.g. `block0.act`.
    pub fn repact_layer_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b.act, ActivationLayer::RepAct(_)))
            .map(|(i, _)| format!("block{i}.act"))
            .collect()
    }

    pub fn repact_params(&self, layer_index: usize) -> Option<&RepActParams<T>> {
        match &self.blocks.get(layer_index)?.act {
            ActivationLayer::RepAct(p) => Some(p),
            ActivationLayer::Fixed(_) => None,
        }
    }

    pub fn param_value(&self, id: ParamId) -> Tensor<T> {
        match id {
            ParamId::ConvWeight(i) => self.blocks[i].conv_w.clone(),
            ParamId::ConvBias(i) => self.blocks[i].conv_b.clone(),
            ParamId::BnGamma(i) => self.blocks[i].bn_gamma.clone(),
            ParamId::BnBeta(i) => self.blocks[i].bn_beta.clone(),
            ParamId::ActAlphas(i) => {
                let act = self.expect_repact(i);
                Tensor::new(vec![act.alphas.len()], act.alphas.clone())
                    .expect("alphas are non-empty")
            }
            ParamId::ActSlope(i) => Tensor::scalar(self.expect_repact(i).prelu_slope),
            ParamId::ActBnGamma(i) => {
                Tensor::scalar(self.expect_repact(i).bn.as_ref().expect("variant III").gamma)
            }
            ParamId::ActBnBeta(i) => {
                Tensor::scalar(self.expect_repact(i).bn.as_ref().expect("variant III").beta)
            }
            ParamId::FcWeight => self.fc_w.clone(),
            ParamId::FcBias => self.fc_b.clone(),
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let check = |have: &[usize], want: &[usize]| -> Result<()> {
            if have != want {
                return Err(Error::invalid(format!(
                    "parameter shape mismatch: expected {want:?}, got {have:?}"
                )));
            }
            Ok(())
        };
        match id {
            ParamId::ConvWeight(i) => {
                check(value.shape(), self.blocks[i].conv_w.shape())?;
                self.blocks[i].conv_w = value;
            }
            ParamId::ConvBias(i) => {
                check(value.shape(), self.blocks[i].conv_b.shape())?;
                self.blocks[i].conv_b = value;
            }
            ParamId::BnGamma(i) => {
                check(value.shape(), self.blocks[i].bn_gamma.shape())?;
                self.blocks[i].bn_gamma = value;
            }
            ParamId::BnBeta(i) => {
                check(value.shape(), self.blocks[i].bn_beta.shape())?;
                self.blocks[i].bn_beta = value;
            }
            ParamId::ActAlphas(i) => {
                let act = self.expect_repact_mut(i);
                if value.numel() != act.alphas.len() {
                    return Err(Error::invalid("alphas length mismatch"));
                }
                act.alphas = value.data().to_vec();
            }
            ParamId::ActSlope(i) => {
                self.expect_repact_mut(i).prelu_slope = value.item();
            }
            ParamId::ActBnGamma(i) => {
                self.expect_repact_mut(i).bn.as_mut().expect("variant III").gamma = value.item();
            }
            ParamId::ActBnBeta(i) => {
                self.expect_repact_mut(i).bn.as_mut().expect("variant III").beta = value.item();
            }
            ParamId::FcWeight => {
                check(value.shape(), self.fc_w.shape())?;
                self.fc_w = value;
            }
            ParamId::FcBias => {
                check(value.shape(), self.fc_b.shape())?;
                self.fc_b = value;
            }
        }
        Ok(())
    }

    fn expect_repact(&self, i: usize) -> &RepActParams<T> {
        match &self.blocks[i].act {
            ActivationLayer::RepAct(p) => p,
            ActivationLayer::Fixed(_) => unreachable!("param id only issued for adaptive layers"),
        }
    }

    fn expect_repact_mut(&mut self, i: usize) -> &mut RepActParams<T> {
        match &mut self.blocks[i].act {
            ActivationLayer::RepAct(p) => p,
            ActivationLayer::Fixed(_) => unreachable!("param id only issued for adaptive layers"),
        }
    }

    /// Record the forward pass on `tape`, reading every trainable tensor from
    /// `leaves` (one leaf per `param_infos()` entry, same order). Returns the
    /// logits node. Train mode updates the model's running norm buffers.
    pub fn build_logits(
        &mut self,
        tape: &mut Tape<T>,
        leaves: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let infos = self.param_infos();
        if infos.len() != leaves.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter leaves, got {}",
                infos.len(),
                leaves.len()
            )));
        }
        let leaf = |id: ParamId| -> Var {
            let idx = infos
                .iter()
                .position(|p| p.id == id)
                .expect("id issued by param_infos");
            leaves[idx]
        };
        let mut cursor = x;
        let eps = T::from_f64(BN2D_EPS);
        let momentum = T::from_f64(BN2D_MOMENTUM);
        for i in 0..self.blocks.len() {
            let conv_spec = ConvSpec {
                stride: self.blocks[i].spec.stride,
                pad: self.blocks[i].spec.pad,
            };
            let conv = tape.conv2d(
                cursor,
                leaf(ParamId::ConvWeight(i)),
                leaf(ParamId::ConvBias(i)),
                conv_spec,
            )?;
            let running = &mut self.blocks[i].bn_running;
            let normed = tape.batchnorm2d(
                conv,
                leaf(ParamId::BnGamma(i)),
                leaf(ParamId::BnBeta(i)),
                running,
                mode,
                eps,
                momentum,
            )?;
            cursor = match &mut self.blocks[i].act {
                ActivationLayer::Fixed(poly) => tape.pw_activation(normed, poly)?,
                ActivationLayer::RepAct(act) => {
                    let bn = act
                        .bn
                        .is_some()
                        .then(|| (leaf(ParamId::ActBnGamma(i)), leaf(ParamId::ActBnBeta(i))));
                    tape.repact(
                        normed,
                        RepActVars {
                            alphas: leaf(ParamId::ActAlphas(i)),
                            slope: leaf(ParamId::ActSlope(i)),
                            bn,
                        },
                        act,
                        mode,
                    )?
                }
            };
        }
        let pooled = tape.global_avg_pool(cursor)?;
        tape.linear(pooled, leaf(ParamId::FcWeight), leaf(ParamId::FcBias))
    }

    /// Fuse every activation slot to its inference-time piecewise form, in
    /// block order, paired with the layer name.
    pub fn fuse_activations(&self) -> Result<Vec<(String, PiecewisePoly)>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let poly = match &b.act {
                    ActivationLayer::Fixed(p) => p.clone(),
                    ActivationLayer::RepAct(p) => p.fuse()?,
                };
                Ok((format!("block{i}.act"), poly))
            })
            .collect()
    }

    /// Tape-free inference-mode logits. With `fused` set, every activation is
    /// evaluated from the given piecewise polys (block order) instead of its
    /// multi-branch form.
    pub fn forward_eval(&self, x: &Tensor<T>, fused: Option<&[PiecewisePoly]>) -> Result<Tensor<T>> {
        if let Some(polys) = fused {
            if polys.len() != self.blocks.len() {
                return Err(Error::invalid(format!(
                    "expected {} fused activations, got {}",
                    self.blocks.len(),
                    polys.len()
                )));
            }
        }
        let eps = T::from_f64(BN2D_EPS);
        let mut cursor = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let spec = ConvSpec {
                stride: block.spec.stride,
                pad: block.spec.pad,
            };
            cursor = kernels::conv2d_forward(&cursor, &block.conv_w, &block.conv_b, spec)?;
            cursor = kernels::batchnorm2d_apply(
                &cursor,
                &block.bn_gamma,
                &block.bn_beta,
                &block.bn_running.mean,
                &block.bn_running.var,
                eps,
            )?;
            cursor = match fused {
                Some(polys) => {
                    let ev = PwEval::<T>::new(&polys[i]);
                    let shape = cursor.shape().to_vec();
                    let mut data = cursor.into_data();
                    ev.map_in_place(&mut data);
                    Tensor::new(shape, data)?
                }
                None => match &block.act {
                    ActivationLayer::Fixed(poly) => {
                        let ev = PwEval::<T>::new(poly);
                        cursor.map(|v| ev.eval(v))
                    }
                    ActivationLayer::RepAct(act) => act.forward_inference(&cursor)?,
                },
            };
        }
        let pooled = kernels::global_avg_pool_forward(&cursor)?;
        kernels::linear_forward(&pooled, &self.fc_w, &self.fc_b)
    }
}
