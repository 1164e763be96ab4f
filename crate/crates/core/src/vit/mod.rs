//! A small Vision Transformer with class token, register tokens, resizable
//! positional embeddings and two dense heads.
//!
//! Token order inside the model is `[class, registers.., patches..]` with
//! patches in row-major order. Positional embeddings are added to the class
//! and patch tokens only; registers are position free.

mod features;
mod forward;
pub mod interp;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bench::ArtifactSpec;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub use features::FeatureGrid;
pub use forward::{Bound, NeighborhoodBias};
pub use interp::resize_pos_embed;

/// Standard deviation of freshly initialised register tokens.
pub const REGISTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Final-norm patch tokens after all blocks.
    #[default]
    Plain,
    /// Value path of the final block (value projection and output
    /// projection, no attention mixing, no MLP), then the final norm.
    ValueHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_registers: usize,
    pub head_mode: HeadMode,
    /// Gaussian neighbourhood bias on final-block patch attention.
    pub neighborhood_sigma: Option<f64>,
    pub layer_norm_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_registers: 0,
            head_mode: HeadMode::Plain,
            neighborhood_sigma: None,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.patch_size;
        if k == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image and patch extents must be positive".into()));
        }
        if self.image_height % k != 0 || self.image_width % k != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {k}",
                self.image_height, self.image_width
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        if let Some(s) = self.neighborhood_sigma {
            if !(s > 0.0) {
                return Err(Error::Config("neighborhood_sigma must be positive".into()));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Base token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// `m + 1 + (H/k)(W/k)`.
    pub fn sequence_len(&self) -> usize {
        self.num_registers + 1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * Image::CHANNELS
    }
}

/// Parameter groups addressable by an unlock mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    PatchEmbedding,
    PositionalEmbedding,
    ClassToken,
    Registers,
    Block(usize),
    FinalNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<S = f32> {
    pub ln1_weight: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    /// `[d, 3d]`, columns ordered q | k | v.
    pub qkv_weight: Tensor<S>,
    pub qkv_bias: Tensor<S>,
    pub proj_weight: Tensor<S>,
    pub proj_bias: Tensor<S>,
    pub ln2_weight: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub fc1_weight: Tensor<S>,
    pub fc1_bias: Tensor<S>,
    pub fc2_weight: Tensor<S>,
    pub fc2_bias: Tensor<S>,
}

const BLOCK_PARAM_NAMES: [&str; 12] = [
    "ln1.weight",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.weight",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<S: Scalar> Block<S> {
    fn tensors(&self) -> [&Tensor<S>; 12] {
        [
            &self.ln1_weight,
            &self.ln1_bias,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.ln2_weight,
            &self.ln2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 12] {
        [
            &mut self.ln1_weight,
            &mut self.ln1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_weight,
            &mut self.ln2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }
}

/// Named parameter view.
pub struct Param<'a, S> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a Tensor<S>,
}

pub struct ParamMut<'a, S> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a mut Tensor<S>,
}

/// Whether weight decay applies to a parameter of this name.
///
/// Registers, positional embeddings and norm parameters are exempt.
pub fn decays(name: &str) -> bool {
    !(name == "registers"
        || name == "pos_embed"
        || name == "cls_pos"
        || name.starts_with("norm.")
        || name.contains(".ln1.")
        || name.contains(".ln2."))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<S = f32> {
    pub config: ViTConfig,
    /// `[3k², d]`, rows indexed by `(dy * k + dx) * 3 + channel`.
    pub patch_weight: Tensor<S>,
    pub patch_bias: Tensor<S>,
    /// `[rows * cols, d]` over the base grid.
    pub pos_embed: Tensor<S>,
    pub cls_pos: Tensor<S>,
    pub cls_token: Tensor<S>,
    /// `[m, d]`; `None` when the model has no registers.
    pub registers: Option<Tensor<S>>,
    pub blocks: Vec<Block<S>>,
    pub norm_weight: Tensor<S>,
    pub norm_bias: Tensor<S>,
    /// Frozen grid-anchored perturbation baked into the forward pass. Not a
    /// parameter; copied verbatim into students.
    pub artifacts: Option<ArtifactSpec>,
}

fn normal_tensor<S: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| S::lit(dist.sample(rng)))
}

impl<S: Scalar> ViTModel<S> {
    /// Randomly initialised model. Linear weights use `N(0, 1/fan_in)`,
    /// embeddings `N(0, 0.02²)`, norms start at identity.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut r = rng::stream(seed, "vit-init");
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_weight = normal_tensor(&[config.patch_dim(), d], fan(config.patch_dim()), &mut r);
        let patch_bias = Tensor::zeros([d]);
        let pos_embed = normal_tensor(&[config.num_patches(), d], 0.02, &mut r);
        let cls_pos = normal_tensor(&[d], 0.02, &mut r);
        let cls_token = normal_tensor(&[d], 0.02, &mut r);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_weight: Tensor::ones([d]),
                ln1_bias: Tensor::zeros([d]),
                qkv_weight: normal_tensor(&[d, 3 * d], fan(d), &mut r),
                qkv_bias: Tensor::zeros([3 * d]),
                proj_weight: normal_tensor(&[d, d], fan(d), &mut r),
                proj_bias: Tensor::zeros([d]),
                ln2_weight: Tensor::ones([d]),
                ln2_bias: Tensor::zeros([d]),
                fc1_weight: normal_tensor(&[d, hidden], fan(d), &mut r),
                fc1_bias: Tensor::zeros([hidden]),
                fc2_weight: normal_tensor(&[hidden, d], fan(hidden), &mut r),
                fc2_bias: Tensor::zeros([d]),
            })
            .collect();
        let registers = (config.num_registers > 0).then(|| {
            let mut rr = rng::stream(seed, "register-init");
            normal_tensor(&[config.num_registers, d], REGISTER_INIT_STD, &mut rr)
        });
        Ok(Self {
            config,
            patch_weight,
            patch_bias,
            pos_embed,
            cls_pos,
            cls_token,
            registers,
            blocks,
            norm_weight: Tensor::ones([d]),
            norm_bias: Tensor::zeros([d]),
            artifacts: None,
        })
    }

    pub fn num_registers(&self) -> usize {
        self.registers.as_ref().map_or(0, |r| r.shape()[0])
    }

    /// All parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<Param<'_, S>> {
        let mut out = vec![
            Param { name: "patch_embed.weight".into(), group: ParamGroup::PatchEmbedding, tensor: &self.patch_weight },
            Param { name: "patch_embed.bias".into(), group: ParamGroup::PatchEmbedding, tensor: &self.patch_bias },
            Param { name: "pos_embed".into(), group: ParamGroup::PositionalEmbedding, tensor: &self.pos_embed },
            Param { name: "cls_pos".into(), group: ParamGroup::PositionalEmbedding, tensor: &self.cls_pos },
            Param { name: "cls_token".into(), group: ParamGroup::ClassToken, tensor: &self.cls_token },
        ];
        if let Some(r) = &self.registers {
            out.push(Param { name: "registers".into(), group: ParamGroup::Registers, tensor: r });
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_PARAM_NAMES.iter().zip(b.tensors()) {
                out.push(Param { name: format!("blocks.{i}.{name}"), group: ParamGroup::Block(i), tensor: t });
            }
        }
        out.push(Param { name: "norm.weight".into(), group: ParamGroup::FinalNorm, tensor: &self.norm_weight });
        out.push(Param { name: "norm.bias".into(), group: ParamGroup::FinalNorm, tensor: &self.norm_bias });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, S>> {
        let mut out = vec![
            ParamMut { name: "patch_embed.weight".into(), group: ParamGroup::PatchEmbedding, tensor: &mut self.patch_weight },
            ParamMut { name: "patch_embed.bias".into(), group: ParamGroup::PatchEmbedding, tensor: &mut self.patch_bias },
            ParamMut { name: "pos_embed".into(), group: ParamGroup::PositionalEmbedding, tensor: &mut self.pos_embed },
            ParamMut { name: "cls_pos".into(), group: ParamGroup::PositionalEmbedding, tensor: &mut self.cls_pos },
            ParamMut { name: "cls_token".into(), group: ParamGroup::ClassToken, tensor: &mut self.cls_token },
        ];
        if let Some(r) = &mut self.registers {
            out.push(ParamMut { name: "registers".into(), group: ParamGroup::Registers, tensor: r });
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_PARAM_NAMES.iter().zip(b.tensors_mut()) {
                out.push(ParamMut { name: format!("blocks.{i}.{name}"), group: ParamGroup::Block(i), tensor: t });
            }
        }
        out.push(ParamMut { name: "norm.weight".into(), group: ParamGroup::FinalNorm, tensor: &mut self.norm_weight });
        out.push(ParamMut { name: "norm.bias".into(), group: ParamGroup::FinalNorm, tensor: &mut self.norm_bias });
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Rebuild a model from `(name, tensor)` pairs in any order.
    pub fn from_named(config: ViTConfig, mut named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        for p in model.params_mut() {
            let pos = named
                .iter()
                .position(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name)))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            *p.tensor = t;
        }
        if let Some((n, _)) = named.first() {
            return Err(Error::Format(format!("unexpected parameter `{n}`")));
        }
        Ok(model)
    }

    pub fn cast<T: Scalar>(&self) -> ViTModel<T> {
        let c = |t: &Tensor<S>| t.cast::<T>();
        ViTModel {
            config: self.config.clone(),
            patch_weight: c(&self.patch_weight),
            patch_bias: c(&self.patch_bias),
            pos_embed: c(&self.pos_embed),
            cls_pos: c(&self.cls_pos),
            cls_token: c(&self.cls_token),
            registers: self.registers.as_ref().map(c),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_weight: c(&b.ln1_weight),
                    ln1_bias: c(&b.ln1_bias),
                    qkv_weight: c(&b.qkv_weight),
                    qkv_bias: c(&b.qkv_bias),
                    proj_weight: c(&b.proj_weight),
                    proj_bias: c(&b.proj_bias),
                    ln2_weight: c(&b.ln2_weight),
                    ln2_bias: c(&b.ln2_bias),
                    fc1_weight: c(&b.fc1_weight),
                    fc1_bias: c(&b.fc1_bias),
                    fc2_weight: c(&b.fc2_weight),
                    fc2_bias: c(&b.fc2_bias),
                })
                .collect(),
            norm_weight: c(&self.norm_weight),
            norm_bias: c(&self.norm_bias),
            artifacts: self.artifacts.clone(),
        }
    }

    /// Same weights with a different dense head.
    pub fn with_head_mode(mut self, mode: HeadMode) -> Self {
        self.config.head_mode = mode;
        self
    }

    pub fn with_neighborhood_sigma(mut self, sigma: Option<f64>) -> Self {
        self.config.neighborhood_sigma = sigma;
        self
    }
}

/// Student initialisation: exact copies of every teacher weight plus `m`
/// fresh register tokens drawn i.i.d. from `N(0, 0.02²)` under `seed`.
pub fn init_student_from_teacher<S: Scalar>(teacher: &ViTModel<S>, m: usize, seed: u64) -> ViTModel<S> {
    let mut student = teacher.clone();
    student.config.num_registers = m;
    student.registers = (m > 0).then(|| {
        let mut r = rng::stream(seed, "register-init");
        normal_tensor(&[m, teacher.config.embed_dim], REGISTER_INIT_STD, &mut r)
    });
    student
}

/// Flatten non-overlapping `k×k` patches into `[rows*cols, 3k²]`.
pub fn extract_patches<S: Scalar>(image: &Image, k: usize) -> Result<Tensor<S>> {
    if k == 0 || image.height() % k != 0 || image.width() % k != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible by patch size {k}",
            image.height(),
            image.width()
        )));
    }
    let (rows, cols) = (image.height() / k, image.width() / k);
    let pd = k * k * 3;
    let mut data = Vec::with_capacity(rows * cols * pd);
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..k {
                for dx in 0..k {
                    let px = image.pixel(pr * k + dy, pc * k + dx);
                    data.extend(px.iter().map(|&v| S::lit(f64::from(v))));
                }
            }
        }
    }
    Tensor::new([rows * cols, pd], data)
}
