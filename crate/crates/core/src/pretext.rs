//! Self-supervised sample construction: inpainting holes and contrastive view pairs.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ProjectionKind;
use crate::scalar::Scalar;
use crate::transforms::{moco_aug_pipeline, MocoVariant, ViewPairGenerator};

/// Side length of every mask size below is expressed at this resolution.
pub const REFERENCE_SIZE: usize = 224;
pub const TARGETED_SIZE_RANGE: (usize, usize) = (17, 32);
pub const CENTER_MASK_SIZE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSide {
    Left,
    Right,
    Center,
}

/// Rectangular hole `[x, x+w) × [y, y+h)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub side: MaskSide,
}

impl MaskSpec {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn overlaps(&self, other: &MaskSpec) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    pub fn fits(&self, size: (usize, usize)) -> bool {
        self.w > 0 && self.h > 0 && self.y + self.h <= size.0 && self.x + self.w <= size.1
    }
}

/// Inclusive pixel bounds of the region that approximates both lungs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Region {
    pub fn contains(&self, m: &MaskSpec) -> bool {
        m.y >= self.row0 && m.y + m.h - 1 <= self.row1 && m.x >= self.col0 && m.x + m.w - 1 <= self.col1
    }
}

/// Scale a length defined at the 224-pixel reference to an image dimension.
pub fn scale_to_reference(len: usize, dim: usize) -> usize {
    ((len * dim) as f64 / REFERENCE_SIZE as f64).round().max(1.0) as usize
}

/// Trim 10% from the left and right, 15% from the top and 20% from the bottom.
/// Fails when the region cannot hold a `min_mask × min_mask` square.
pub fn constraint_region(size: (usize, usize), min_mask: usize) -> Result<Region> {
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(Error::Validation(format!("image {h}x{w} is smaller than 32x32")));
    }
    let region = Region {
        row0: (15 * h).div_ceil(100),
        row1: 80 * h / 100,
        col0: (10 * w).div_ceil(100),
        col1: 90 * w / 100,
    };
    let rows = region.row1 + 1 - region.row0;
    let cols = region.col1 + 1 - region.col0;
    if rows < min_mask || cols < min_mask {
        return Err(Error::Validation(format!(
            "constraint region {rows}x{cols} cannot hold a {min_mask}x{min_mask} mask; shrink the masks"
        )));
    }
    Ok(region)
}

/// One square mask per lung, sides drawn uniformly from `size_range`
/// (inclusive, in pixels of this image). The left mask ends before `w/2`
/// and the right mask starts at or after it.
pub fn targeted_lung_masks(
    size: (usize, usize),
    size_range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(MaskSpec, MaskSpec)> {
    let (lo, hi) = size_range;
    if lo == 0 || lo > hi {
        return Err(Error::Validation(format!("invalid mask size range {size_range:?}")));
    }
    let region = constraint_region(size, hi)?;
    let w = size.1;
    let left_end = w / 2; // exclusive
    let right_start = w.div_ceil(2);
    if left_end < region.col0 + hi || region.col1 + 1 < right_start + hi {
        return Err(Error::Validation(format!(
            "lung halves of a {}x{} image cannot hold {hi}-pixel masks; shrink the masks",
            size.0, size.1
        )));
    }
    let mut draw = |side: MaskSide| {
        let s = rng.random_range(lo..=hi);
        let y = rng.random_range(region.row0..=region.row1 + 1 - s);
        let x = match side {
            MaskSide::Left => rng.random_range(region.col0..=left_end - s),
            _ => rng.random_range(right_start..=region.col1 + 1 - s),
        };
        MaskSpec { x, y, w: s, h: s, side }
    };
    let left = draw(MaskSide::Left);
    let right = draw(MaskSide::Right);
    Ok((left, right))
}

/// Centered mask; offsets are `floor((dim - mask) / 2)`.
pub fn center_mask(size: (usize, usize), mask: (usize, usize)) -> Result<MaskSpec> {
    let (h, w) = size;
    let (mh, mw) = mask;
    if mh == 0 || mw == 0 || mh > h || mw > w {
        return Err(Error::Validation(format!(
            "center mask {mh}x{mw} does not fit a {h}x{w} image"
        )));
    }
    Ok(MaskSpec {
        x: (w - mw) / 2,
        y: (h - mh) / 2,
        w: mw,
        h: mh,
        side: MaskSide::Center,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FillMode {
    /// Mean intensity of the training set.
    DatasetMean,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSample<T> {
    pub input: Array2<T>,
    pub target: Array2<T>,
    pub masks: Vec<MaskSpec>,
    pub loss_mask: Array2<T>,
}

/// Replace each (pairwise disjoint) mask region with `fill`.
pub fn make_inpaint_sample<T: Scalar>(
    pixels: ArrayView2<T>,
    masks: &[MaskSpec],
    fill: T,
) -> Result<InpaintSample<T>> {
    let dims = pixels.dim();
    for (i, m) in masks.iter().enumerate() {
        if !m.fits(dims) {
            return Err(Error::Validation(format!("mask {m:?} exceeds image {dims:?}")));
        }
        if let Some(o) = masks[i + 1..].iter().find(|o| m.overlaps(o)) {
            return Err(Error::Validation(format!("masks overlap: {m:?} and {o:?}")));
        }
    }
    let mut input = pixels.to_owned();
    let mut loss_mask = Array2::zeros(dims);
    for m in masks {
        input.slice_mut(s![m.y..m.y + m.h, m.x..m.x + m.w]).fill(fill);
        loss_mask.slice_mut(s![m.y..m.y + m.h, m.x..m.x + m.w]).fill(T::one());
    }
    Ok(InpaintSample {
        input,
        target: pixels.to_owned(),
        masks: masks.to_vec(),
        loss_mask,
    })
}

/// Two augmented views of one image from independent streams.
pub fn moco_pair<T: Scalar>(
    pixels: ArrayView2<T>,
    generator: &ViewPairGenerator,
    rng_q: &mut ChaCha8Rng,
    rng_k: &mut ChaCha8Rng,
) -> (Array2<T>, Array2<T>) {
    generator.views(pixels, rng_q, rng_k)
}

pub fn moco_pair_for<T: Scalar>(
    pixels: ArrayView2<T>,
    variant: MocoVariant,
    rng_q: &mut ChaCha8Rng,
    rng_k: &mut ChaCha8Rng,
) -> (Array2<T>, Array2<T>) {
    moco_pair(pixels, &moco_aug_pipeline(variant), rng_q, rng_k)
}

/// How inpainting holes are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MaskMode {
    /// One fixed square in the middle of the image.
    Center,
    /// One random square per lung inside the constraint region.
    TargetedCxr,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(Self::Center),
            "targetedCxr" => Ok(Self::TargetedCxr),
            _ => Err(Error::Config(format!("unknown mask mode `{s}` (center | targetedCxr)"))),
        }
    }
}

/// Draw the holes for one image of `size` (sizes scaled from the reference).
pub fn sample_masks(mode: MaskMode, size: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Vec<MaskSpec>> {
    let dim = size.0.min(size.1);
    match mode {
        MaskMode::Center => {
            let s = scale_to_reference(CENTER_MASK_SIZE, dim);
            Ok(vec![center_mask(size, (s, s))?])
        }
        MaskMode::TargetedCxr => {
            let range = (
                scale_to_reference(TARGETED_SIZE_RANGE.0, dim),
                scale_to_reference(TARGETED_SIZE_RANGE.1, dim),
            );
            let (l, r) = targeted_lung_masks(size, range, rng)?;
            Ok(vec![l, r])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct MocoConfig {
    pub variant: MocoVariant,
    pub queue_size: usize,
    pub momentum: f64,
    /// Defaults to the variant's temperature.
    pub temperature: Option<f64>,
    pub proj_dim: usize,
    /// Defaults to an MLP for `v2` and a linear layer otherwise.
    pub projection: Option<ProjectionKind>,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            variant: MocoVariant::Cxr,
            queue_size: 4096,
            momentum: 0.999,
            temperature: None,
            proj_dim: 128,
            projection: None,
        }
    }
}

impl MocoConfig {
    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or_else(|| self.variant.default_temperature())
    }

    pub fn projection_kind(&self) -> ProjectionKind {
        self.projection.unwrap_or(match self.variant {
            MocoVariant::V2 => ProjectionKind::Mlp,
            _ => ProjectionKind::Linear,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.queue_size == 0 || self.proj_dim == 0 {
            return Err(Error::Config("queueSize and projDim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1]", self.momentum)));
        }
        if !(self.temperature() > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct InpaintConfig {
    pub mask_mode: MaskMode,
    pub fill: FillMode,
    /// Write input / reconstruction / target grids after the last epoch.
    pub dump_grids: bool,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            mask_mode: MaskMode::TargetedCxr,
            fill: FillMode::DatasetMean,
            dump_grids: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct PretextConfig {
    pub moco: MocoConfig,
    pub inpaint: InpaintConfig,
}
