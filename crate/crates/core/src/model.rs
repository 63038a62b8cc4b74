//! Attribute-prototype model: a small convolutional backbone `f`, a global
//! attribute head through `V` and a local attribute-attention head through the
//! pointwise kernel `CV`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input image channels.
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Output channels of each 3×3 convolution; the last entry is `C`.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Insert a 2× average downsample after the first convolution.
    #[serde(default = "default_true")]
    pub downsample: bool,
    /// Number of attributes `K`.
    #[serde(default = "default_attributes")]
    pub attributes: usize,
}

fn default_in_channels() -> usize {
    3
}
fn default_channels() -> Vec<usize> {
    vec![16, 32]
}
fn default_true() -> bool {
    true
}
fn default_attributes() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: default_in_channels(),
            channels: default_channels(),
            downsample: true,
            attributes: default_attributes(),
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.attributes == 0 || self.channels.contains(&0) {
            return Err(Error::Config("model channels and attributes must be >= 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one convolution layer".into()));
        }
        Ok(())
    }
}

/// Trainable weights. Tensors are listed in declaration order:
/// backbone convolutions, then `V`, then `CV`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[C_out, C_in, 3, 3]` per layer.
    pub backbone: Vec<Tensor>,
    /// Attribute projection, `[C, K]`.
    pub v: Tensor,
    /// Attention kernel, `[C, K]`.
    pub cv: Tensor,
}

impl ModelParams {
    /// Zero-mean uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init(seed: u64, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        let mut backbone = Vec::with_capacity(config.channels.len());
        let mut cin = config.in_channels;
        for &cout in &config.channels {
            backbone.push(uniform(&[cout, cin, 3, 3], cin * 9)?);
            cin = cout;
        }
        let (c, k) = (config.feature_channels(), config.attributes);
        let v = uniform(&[c, k], c)?;
        let cv = uniform(&[c, k], c)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            v,
            cv,
        })
    }

    /// Same architecture with every weight set to zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(0, config)?;
        p.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.backbone.iter().collect();
        out.push(&self.v);
        out.push(&self.cv);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.backbone.iter_mut().collect();
        out.push(&mut self.v);
        out.push(&mut self.cv);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.backbone.len()).map(|i| format!("conv{i}")).collect();
        out.push("V".into());
        out.push("CV".into());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records every parameter on `tape`; `trainable` decides whether the
    /// leaves request gradients.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars {
            backbone: self.backbone.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
            v: tape.leaf(self.v.clone(), trainable),
            cv: tape.leaf(self.cv.clone(), trainable),
        }
    }
}

/// Tape handles for a recorded [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub backbone: Vec<Var>,
    pub v: Var,
    pub cv: Var,
}

impl ParamVars {
    /// Same order as [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.backbone.clone();
        out.push(self.v);
        out.push(self.cv);
        out
    }
}

/// Class semantic vectors φ(y) stacked as rows, `[n_classes, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Semantics {
    rows: Tensor,
    transposed: Tensor,
}

impl Semantics {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::contract("semantics", "need at least one class and attribute"));
        }
        let k = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::dim("semantics", &[k], &[bad.len()]));
        }
        let n = rows.len();
        let flat = rows.concat();
        let mut t = vec![0.0; k * n];
        for (y, row) in rows.iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                t[a * n + y] = v;
            }
        }
        Ok(Self {
            rows: Tensor::new(vec![n, k], flat)?,
            transposed: Tensor::new(vec![k, n], t)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn num_attributes(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        let k = self.num_attributes();
        &self.rows.data()[class * k..(class + 1) * k]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows.map(|v| v * factor),
            transposed: self.transposed.map(|v| v * factor),
        }
    }

    /// Subset of rows in the given order.
    pub fn select(&self, classes: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = classes.iter().map(|&c| self.row(c).to_vec()).collect();
        Self::new(&rows)
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `x = f(I)`, `[C, H, W]`.
    pub featmaps: Var,
    /// `g(x)`, `[C]`.
    pub global_feat: Var,
    /// `g(x)ᵀ V`, `[K]`.
    pub attr_global: Var,
    /// `h(x)`, `[K, H, W]`.
    pub attn_maps: Var,
    /// Max-pooled attention, `[K]`.
    pub attr_local: Var,
    /// Compatibility `g(x)ᵀ V φ(y)` for every candidate class.
    pub class_scores: Var,
}

/// Concrete forward values, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub featmaps: Tensor,
    pub global_feat: Tensor,
    pub attr_global: Tensor,
    pub attn_maps: Tensor,
    pub attr_local: Tensor,
    pub class_scores: Tensor,
}

impl ForwardVars {
    pub fn outputs(&self, tape: &Tape) -> ForwardOutputs {
        ForwardOutputs {
            featmaps: tape.value(self.featmaps).clone(),
            global_feat: tape.value(self.global_feat).clone(),
            attr_global: tape.value(self.attr_global).clone(),
            attn_maps: tape.value(self.attn_maps).clone(),
            attr_local: tape.value(self.attr_local).clone(),
            class_scores: tape.value(self.class_scores).clone(),
        }
    }
}

/// Backbone `f`: 3×3 convolutions with a rectifier after each one and an
/// optional 2× downsample after the first.
pub fn backbone(tape: &mut Tape, image: Var, params: &ParamVars, config: &ModelConfig) -> Result<Var> {
    let mut x = image;
    for (i, &w) in params.backbone.iter().enumerate() {
        let c = tape.conv3x3(x, w)?;
        x = tape.relu(c);
        if i == 0 && config.downsample {
            x = tape.avg_pool2x2(x)?;
        }
    }
    Ok(x)
}

/// Heads applied to given feature maps: global pooling and projection through
/// `V`, class compatibilities against `semantics`, and the attention branch.
pub fn heads(tape: &mut Tape, featmaps: Var, params: &ParamVars, semantics: &Semantics) -> Result<ForwardVars> {
    let c = tape.shape(featmaps)[0];
    let k = tape.shape(params.v)[1];
    if semantics.num_attributes() != k {
        return Err(Error::dim("forward", &[k], &[semantics.num_attributes()]));
    }
    let global_feat = tape.avg_pool_spatial(featmaps)?;
    let row = tape.reshape(global_feat, &[1, c])?;
    let attr_row = tape.matmul(row, params.v)?;
    let attr_global = tape.reshape(attr_row, &[k])?;
    let phi_t = tape.constant(semantics.transposed.clone());
    let scores_row = tape.matmul(attr_row, phi_t)?;
    let class_scores = tape.reshape(scores_row, &[semantics.num_classes()])?;
    let attn_maps = tape.conv1x1(featmaps, params.cv)?;
    let attr_local = tape.max_pool_spatial(attn_maps)?;
    Ok(ForwardVars {
        featmaps,
        global_feat,
        attr_global,
        attn_maps,
        attr_local,
        class_scores,
    })
}

/// Full forward pass for one image already recorded on the tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    image: Var,
    params: &ParamVars,
    config: &ModelConfig,
    semantics: &Semantics,
) -> Result<ForwardVars> {
    let s = tape.shape(image);
    if s.len() != 3 || s[0] != config.in_channels {
        return Err(Error::dim("forward", s, &[config.in_channels]));
    }
    let feats = backbone(tape, image, params, config)?;
    heads(tape, feats, params, semantics)
}

/// Tape-free forward pass.
pub fn forward(image: &Image, params: &ModelParams, semantics: &Semantics) -> Result<ForwardOutputs> {
    let mut tape = Tape::new();
    let pv = params.record(&mut tape, false);
    let iv = tape.constant(image.to_tensor());
    let out = forward_on_tape(&mut tape, iv, &pv, &params.config, semantics)?;
    Ok(out.outputs(&tape))
}

/// Softmax over the cells of each attention slice.
pub fn spatial_softmax(attn_maps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(attn_maps.clone());
    let s = tape.spatial_softmax(v)?;
    Ok(tape.value(s).clone())
}
