//! Network assemblies: backbones, the classification head, the shared
//! encoder-decoder used for segmentation and inpainting, the contrastive
//! encoder with its momentum twin, and checkpoint files.

pub mod backbone;
pub mod checkpoint;
pub mod contrastive;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{concat_channels, crop_to, pad_to, split_channels};
use crate::nn::{
    default_init, join, Conv2d, Dropout, GlobalAvgPool, Linear, Mode, Param, Parameterized, Relu,
    Upsample2,
};
use crate::scalar::Scalar;

pub use backbone::{DenseNet121, TinyCnn, DENSENET121_FEATURES};
pub use contrastive::{momentum_update, ContrastiveEncoder, KeyQueue, MomentumPair, ProjectionHead, ProjectionKind, QueryParams};
pub use checkpoint::{
    compat_hash, load_checkpoint, load_classifier, load_encoder, load_encoder_decoder, load_full, load_meta, save_checkpoint, sidecar_path, transfer_encoder, CheckpointMeta,
    CheckpointRef, Stage,
};

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BackboneName {
    TinyCnn,
    DenseNet121,
    ResNet50,
    MobileNet,
    EfficientNet,
}

impl BackboneName {
    pub fn name(self) -> &'static str {
        match self {
            Self::TinyCnn => "tinyCnn",
            Self::DenseNet121 => "denseNet121",
            Self::ResNet50 => "resNet50",
            Self::MobileNet => "mobileNet",
            Self::EfficientNet => "efficientNet",
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::TinyCnn, Self::DenseNet121, Self::ResNet50, Self::MobileNet, Self::EfficientNet]
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct BackboneConfig {
    pub name: BackboneName,
    pub feature_dim: usize,
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: BackboneName::TinyCnn,
            feature_dim: 64,
            pretrained_weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn tiny(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.name {
            BackboneName::TinyCnn if self.feature_dim == 0 || self.feature_dim > 128 => Err(Error::Config(format!(
                "tinyCnn featureDim must be in 1..=128, got {}",
                self.feature_dim
            ))),
            BackboneName::DenseNet121 if self.feature_dim != DENSENET121_FEATURES => Err(Error::Config(format!(
                "denseNet121 has {DENSENET121_FEATURES} features, config asks for {}",
                self.feature_dim
            ))),
            BackboneName::TinyCnn | BackboneName::DenseNet121 => Ok(()),
            other => Err(Error::Config(format!(
                "backbone `{other}` is not available in this build (use tinyCnn or denseNet121)"
            ))),
        }
    }
}

/// A feature extractor behind one interface.
#[derive(Debug, Clone)]
pub enum Backbone<T> {
    Tiny(TinyCnn<T>),
    Dense(Box<DenseNet121<T>>),
}

/// Build a backbone and initialize its weights from `seed`.
pub fn build_backbone<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<Backbone<T>> {
    cfg.validate()?;
    let mut b = match cfg.name {
        BackboneName::TinyCnn => Backbone::Tiny(TinyCnn::new(cfg.feature_dim)),
        _ => Backbone::Dense(Box::default()),
    };
    b.init_params_under("encoder", seed, &default_init);
    Ok(b)
}

impl<T: Scalar> Backbone<T> {
    pub fn feature_dim(&self) -> usize {
        *self.scale_channels().last().expect("at least one scale")
    }

    /// Channels of each returned feature map, shallowest first.
    pub fn scale_channels(&self) -> Vec<usize> {
        match self {
            Self::Tiny(b) => b.scale_channels(),
            Self::Dense(b) => b.scale_channels(),
        }
    }

    /// Stride of the deepest feature map relative to the input.
    pub fn downsample_factor(&self) -> usize {
        match self {
            Self::Tiny(_) => 8,
            Self::Dense(_) => 32,
        }
    }

    /// Upsampling steps from the shallowest scale back to input resolution.
    pub fn stem_stride_steps(&self) -> usize {
        match self {
            Self::Tiny(_) => 0,
            Self::Dense(_) => 1,
        }
    }

    pub fn layer_names(&self) -> &'static [&'static str] {
        match self {
            Self::Tiny(_) => &["block1", "block2", "block3", "block4"],
            Self::Dense(_) => &["conv0", "denseblock1", "denseblock2", "denseblock3", "denseblock4"],
        }
    }

    /// Name of the deepest feature layer (the usual GradCAM target).
    pub fn last_layer(&self) -> &'static str {
        self.layer_names().last().expect("non-empty")
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: &Mode<'_>) -> Vec<Array4<T>> {
        match self {
            Self::Tiny(b) => b.forward(x, mode),
            Self::Dense(b) => b.forward(x, mode),
        }
    }

    /// Backpropagate per-scale gradients (`None` = no gradient at that scale).
    pub fn backward(&mut self, scale_grads: Vec<Option<Array4<T>>>) {
        match self {
            Self::Tiny(b) => b.backward(scale_grads),
            Self::Dense(b) => b.backward(scale_grads),
        }
    }

    /// Activation of a named layer from the last forward pass.
    pub fn activation(&self, name: &str) -> Option<&Array4<T>> {
        match self {
            Self::Tiny(b) => b.activation(name),
            Self::Dense(b) => b.activation(name),
        }
    }

    /// Gradient at a named layer from the last backward pass.
    pub fn activation_grad(&self, name: &str) -> Option<&Array4<T>> {
        match self {
            Self::Tiny(b) => b.activation_grad(name),
            Self::Dense(b) => b.activation_grad(name),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Self::Tiny(b) => b.visit(prefix, f),
            Self::Dense(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Self::Tiny(b) => b.visit_mut(prefix, f),
            Self::Dense(b) => b.visit_mut(prefix, f),
        }
    }
}

/// Global average pool → dropout → linear.
#[derive(Debug, Clone)]
pub struct ClassifierHead<T> {
    pool: GlobalAvgPool,
    dropout: Dropout<T>,
    pub linear: Linear<T>,
    pooled: Option<Array2<T>>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            pool: GlobalAvgPool::default(),
            dropout: Dropout::new(0.2),
            linear: Linear::new(feature_dim, num_classes),
            pooled: None,
        }
    }

    pub fn forward(&mut self, features: &Array4<T>, mode: &mut Mode<'_>) -> Array2<T> {
        let pooled = self.pool.forward(features);
        let h = self.dropout.forward(&pooled, mode);
        self.pooled = Some(pooled);
        self.linear.forward(&h)
    }

    pub fn backward(&mut self, d_logits: &Array2<T>) -> Array4<T> {
        let d = self.linear.backward(d_logits);
        self.pool.backward(&self.dropout.backward(&d))
    }

    /// Pooled feature vectors of the last forward pass.
    pub fn pooled(&self) -> Option<&Array2<T>> {
        self.pooled.as_ref()
    }
}

impl<T: Scalar> Parameterized<T> for ClassifierHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.linear.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.linear.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Backbone + classification head.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub encoder: Backbone<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(encoder: Backbone<T>, num_classes: usize, seed: u64) -> Self {
        let mut head = ClassifierHead::new(encoder.feature_dim(), num_classes);
        head.init_params_under("head", seed, &default_init);
        Self { encoder, head }
    }

    pub fn build(cfg: &BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(build_backbone(cfg, seed)?, num_classes, seed))
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: &mut Mode<'_>) -> Array2<T> {
        let feats = self.encoder.forward(x, mode);
        self.head.forward(feats.last().expect("scales"), mode)
    }

    pub fn backward(&mut self, d_logits: &Array2<T>) {
        let d = self.head.backward(d_logits);
        let mut grads = vec![None; self.encoder.scale_channels().len()];
        *grads.last_mut().expect("scales") = Some(d);
        self.encoder.backward(grads);
    }
}

impl<T: Scalar> Parameterized<T> for Classifier<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
struct UpStage<T> {
    conv: Conv2d<T>,
    relu: Relu<T>,
    up_channels: usize,
}

/// UNet-style decoder: upsample, concatenate the skip, 3x3 conv + ReLU, down
/// to the shallowest scale; then upsample to input size and apply a 1x1
/// single-channel output conv.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    stages: Vec<UpStage<T>>,
    final_upsamples: usize,
    pub out: Conv2d<T>,
    deep_channels: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(scale_channels: &[usize], final_upsamples: usize) -> Self {
        let n = scale_channels.len();
        let mut prev = scale_channels[n - 1];
        let mut stages = Vec::new();
        // stage i merges into scale i, deepest skip first
        for i in (0..n - 1).rev() {
            let out = (scale_channels[i] / 2).max(8);
            stages.push(UpStage {
                conv: Conv2d::new(prev + scale_channels[i], out, 3),
                relu: Relu::new(),
                up_channels: prev,
            });
            prev = out;
        }
        Self {
            stages,
            final_upsamples,
            out: Conv2d::new(prev, 1, 1),
            deep_channels: scale_channels[n - 1],
        }
    }

    pub fn forward(&mut self, feats: &[Array4<T>]) -> Array4<T> {
        let n = feats.len();
        let mut x = feats[n - 1].clone();
        for (stage, skip) in self.stages.iter_mut().zip(feats[..n - 1].iter().rev()) {
            let up = Upsample2::forward(&x);
            let up = pad_to(&up, skip.dim().2, skip.dim().3);
            x = stage.relu.forward(&stage.conv.forward(&concat_channels(&up, skip)));
        }
        for _ in 0..self.final_upsamples {
            x = Upsample2::forward(&x);
        }
        self.out.forward(&x)
    }

    /// Per-scale gradients for the encoder, shallowest first.
    pub fn backward(&mut self, d_out: &Array4<T>) -> Vec<Option<Array4<T>>> {
        let n = self.stages.len() + 1;
        let mut grads = vec![None; n];
        let mut d = self.out.backward(d_out, true).expect("input grad");
        for _ in 0..self.final_upsamples {
            d = Upsample2::backward(&d);
        }
        for (k, stage) in self.stages.iter_mut().enumerate().rev() {
            let scale = n - 2 - k;
            let dcat = stage.conv.backward(&stage.relu.backward(&d), true).expect("input grad");
            let (dup, dskip) = split_channels(&dcat, stage.up_channels);
            grads[scale] = Some(dskip);
            // undo the bottom/right padding applied after upsampling
            let (h, w) = (dup.dim().2 / 2 * 2, dup.dim().3 / 2 * 2);
            d = Upsample2::backward(&crop_to(&dup, h, w));
        }
        debug_assert_eq!(d.dim().1, self.deep_channels);
        grads[n - 1] = Some(d);
        grads
    }
}

impl<T: Scalar> Parameterized<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (k, s) in self.stages.iter().enumerate() {
            s.conv.visit(&join(prefix, &format!("up{}.conv", k + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.conv.visit_mut(&join(prefix, &format!("up{}.conv", k + 1)), f);
        }
    }
}

/// Outputs of the encoder-decoder: class logits (N, classes) and one
/// single-channel map per image (N, 1, H, W) at input resolution.
#[derive(Debug, Clone)]
pub struct MultiTaskOutput<T> {
    pub class_logits: Array2<T>,
    pub seg_logits: Array4<T>,
}

/// Shared encoder with a classification head on pooled deep features and a
/// decoder whose 1-channel output is a segmentation logit map (or an
/// inpainting reconstruction). Inputs whose sides are not multiples of the
/// encoder stride are zero-padded at the bottom/right and the output is
/// cropped back to the input size.
#[derive(Debug, Clone)]
pub struct EncoderDecoder<T> {
    pub encoder: Backbone<T>,
    pub decoder: Decoder<T>,
    pub head: ClassifierHead<T>,
    input_dims: (usize, usize),
    padded_dims: (usize, usize),
}

impl<T: Scalar> EncoderDecoder<T> {
    pub fn new(encoder: Backbone<T>, num_classes: usize, seed: u64) -> Self {
        let mut decoder = Decoder::new(&encoder.scale_channels(), encoder.stem_stride_steps());
        decoder.init_params_under("decoder", seed, &default_init);
        decoder.out.init_params_under("seg_head", seed, &default_init);
        let mut head = ClassifierHead::new(encoder.feature_dim(), num_classes);
        head.init_params_under("head", seed, &default_init);
        Self {
            encoder,
            decoder,
            head,
            input_dims: (0, 0),
            padded_dims: (0, 0),
        }
    }

    pub fn build(cfg: &BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(build_backbone(cfg, seed)?, num_classes, seed))
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: &mut Mode<'_>) -> MultiTaskOutput<T> {
        let (_, _, h, w) = x.dim();
        let f = self.encoder.downsample_factor();
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        self.input_dims = (h, w);
        self.padded_dims = (ph, pw);
        let feats = self.encoder.forward(&pad_to(x, ph, pw), mode);
        let class_logits = self.head.forward(feats.last().expect("scales"), mode);
        let seg = self.decoder.forward(&feats);
        MultiTaskOutput {
            class_logits,
            seg_logits: crop_to(&seg, h, w),
        }
    }

    /// Backpropagate either or both task gradients into the shared encoder.
    pub fn backward(&mut self, d_class: Option<&Array2<T>>, d_seg: Option<&Array4<T>>) {
        let n_scales = self.encoder.scale_channels().len();
        let mut grads: Vec<Option<Array4<T>>> = match d_seg {
            Some(d) => {
                let (ph, pw) = self.padded_dims;
                self.decoder.backward(&pad_to(d, ph, pw))
            }
            None => vec![None; n_scales],
        };
        if let Some(dc) = d_class {
            let d = self.head.backward(dc);
            let last = grads.last_mut().expect("scales");
            *last = Some(match last.take() {
                Some(g) => g + &d,
                None => d,
            });
        }
        self.encoder.backward(grads);
    }
}

impl<T: Scalar> Parameterized<T> for EncoderDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.decoder.out.visit(&join(prefix, "seg_head"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.decoder.out.visit_mut(&join(prefix, "seg_head"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
