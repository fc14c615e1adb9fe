//! Intensity preprocessing and geometric/photometric augmentation.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Preprocessing

/// Value at nearest rank `ceil(p/100 · n)` (1-based, clamped to `[1, n]`) of
/// an ascending slice.
pub fn nearest_rank<T: Scalar>(sorted: &[T], percentile: f64) -> T {
    let n = sorted.len();
    let rank = ((percentile * n as f64) / 100.0 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Clamp intensities at nearest-rank percentiles. Two-sided clamps at
/// `100 - p` and `p`; `upper_only` clamps only the top.
pub fn winsorize<T: Scalar>(pixels: ArrayView2<T>, percentile: f64, upper_only: bool) -> Result<Array2<T>> {
    if !(percentile > 50.0 && percentile <= 100.0) {
        return Err(Error::Validation(format!(
            "winsorization percentile must lie in (50, 100], got {percentile}"
        )));
    }
    if pixels.is_empty() {
        return Err(Error::Validation("cannot winsorize an empty image".into()));
    }
    let mut sorted: Vec<T> = pixels.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let hi = nearest_rank(&sorted, percentile);
    let lo = if upper_only {
        sorted[0]
    } else {
        nearest_rank(&sorted, 100.0 - percentile)
    };
    Ok(pixels.mapv(|v| v.max(lo).min(hi)))
}

/// How the equalization lookup table is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum HistEqConvention {
    /// `round(L · CDF(v))`.
    #[default]
    Plain,
    /// `round(L · (CDF(v) - CDF(v_min)) / (1 - CDF(v_min)))`; lowest occupied level maps to 0.
    Offset,
}

/// Histogram equalization over integer levels `0..=max_level` (255 or 65535).
/// Inputs are rounded to the nearest level first. A constant image maps to zeros.
pub fn histogram_equalize<T: Scalar>(
    pixels: ArrayView2<T>,
    max_level: u32,
    convention: HistEqConvention,
) -> Array2<T> {
    let levels = max_level as usize + 1;
    let level_of = |v: T| v.as_f64().round().clamp(0.0, max_level as f64) as usize;
    let mut hist = vec![0usize; levels];
    for &v in pixels.iter() {
        hist[level_of(v)] += 1;
    }
    let n = pixels.len();
    if n == 0 || hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return Array2::zeros(pixels.raw_dim());
    }
    let mut lut = vec![0.0f64; levels];
    let mut cum = 0usize;
    let cdf_min = hist.iter().find(|&&c| c > 0).copied().unwrap_or(0) as f64 / n as f64;
    for (level, &count) in hist.iter().enumerate() {
        cum += count;
        let cdf = cum as f64 / n as f64;
        let mapped = match convention {
            HistEqConvention::Plain => cdf,
            HistEqConvention::Offset => ((cdf - cdf_min) / (1.0 - cdf_min)).max(0.0),
        };
        lut[level] = (max_level as f64 * mapped).round();
    }
    pixels.mapv(|v| T::lit(lut[level_of(v)]))
}

/// Affine map to `[0, 1]`; a constant image maps to zeros.
pub fn normalize01<T: Scalar>(pixels: ArrayView2<T>) -> Array2<T> {
    let (lo, hi) = pixels
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > T::zero()) {
        return Array2::zeros(pixels.raw_dim());
    }
    pixels.mapv(|v| (v - lo) / range)
}

/// Bilinear sample with half-pixel centers; out-of-range coordinates clamp to the edge.
fn bilinear_clamped<T: Scalar>(img: &ArrayView2<T>, y: f64, x: f64) -> T {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (T::lit(y - y0 as f64), T::lit(x - x0 as f64));
    let one = T::one();
    let top = img[[y0, x0]] * (one - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (one - fx) + img[[y1, x1]] * fx;
    top * (one - fy) + bottom * fy
}

/// Bilinear resize (half-pixel centers, edge clamping).
pub fn resize<T: Scalar>(pixels: ArrayView2<T>, target: (usize, usize)) -> Array2<T> {
    let (h, w) = pixels.dim();
    let (th, tw) = target;
    if (h, w) == (th, tw) {
        return pixels.to_owned();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        bilinear_clamped(&pixels, (r as f64 + 0.5) * sy - 0.5, (c as f64 + 0.5) * sx - 0.5)
    })
}

/// Nearest-neighbour resize, used for masks.
pub fn resize_nearest<T: Scalar>(pixels: ArrayView2<T>, target: (usize, usize)) -> Array2<T> {
    let (h, w) = pixels.dim();
    let (th, tw) = target;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let y = (((r as f64 + 0.5) * h as f64 / th as f64).floor() as usize).min(h - 1);
        let x = (((c as f64 + 0.5) * w as f64 / tw as f64).floor() as usize).min(w - 1);
        pixels[[y, x]]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct PreprocConfig {
    pub winsor_percentile: Option<f64>,
    pub winsor_upper_only: bool,
    pub hist_eq: bool,
    pub hist_eq_convention: HistEqConvention,
    pub target_size: (usize, usize),
    pub normalize01: bool,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            winsor_percentile: Some(92.5),
            winsor_upper_only: false,
            hist_eq: false,
            hist_eq_convention: HistEqConvention::Plain,
            target_size: (224, 224),
            normalize01: true,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.winsor_percentile {
            if !(p > 50.0 && p <= 100.0) {
                return Err(Error::Config(format!("winsorPercentile {p} not in (50, 100]")));
            }
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        Ok(())
    }

    /// Winsorize → equalize → normalize → resize.
    pub fn apply<T: Scalar>(&self, raw: &Array2<f32>) -> Result<Array2<T>> {
        let mut img: Array2<T> = raw.mapv(|v| T::lit(v as f64));
        if let Some(p) = self.winsor_percentile {
            img = winsorize(img.view(), p, self.winsor_upper_only)?;
        }
        if self.hist_eq {
            let max_level = if raw.iter().any(|&v| v > 255.0) { 65535 } else { 255 };
            img = histogram_equalize(img.view(), max_level, self.hist_eq_convention);
        }
        if self.normalize01 {
            img = normalize01(img.view());
        }
        Ok(resize(img.view(), self.target_size))
    }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct IntensityJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct BlurPolicy {
    pub prob: f64,
    pub sigma: (f64, f64),
}

/// Declarative augmentation ranges. Geometric parameters are drawn uniformly;
/// the same geometry is applied to an optional mask with nearest sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct AugPolicy {
    /// Rotation drawn from `[-d, d]` degrees; positive is counter-clockwise on screen.
    pub rotation_deg: f64,
    pub hflip_prob: f64,
    /// Center-anchored zoom factor range.
    pub scale_range: (f64, f64),
    /// Horizontal shear factor range.
    pub shear_range: (f64, f64),
    /// Horizontal translation drawn from `[-f, f]` of the width.
    pub translate_frac: Option<f64>,
    /// Random resized crop: fraction of image area kept.
    pub crop_scale: Option<(f64, f64)>,
    pub jitter: Option<IntensityJitter>,
    pub blur: Option<BlurPolicy>,
    pub seed_stream: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugPolicy {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            hflip_prob: 0.0,
            scale_range: (1.0, 1.0),
            shear_range: (0.0, 0.0),
            translate_frac: None,
            crop_scale: None,
            jitter: None,
            blur: None,
            seed_stream: 0,
        }
    }

    /// Best augmentation row of the ablation grid: rotation, flip, zoom and shear.
    pub fn reference() -> Self {
        Self {
            rotation_deg: 10.0,
            hflip_prob: 0.5,
            scale_range: (1.0, 1.2),
            shear_range: (0.0, 0.1),
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        let range_ok = |(lo, hi): (f64, f64)| lo <= hi;
        let mut ok = self.rotation_deg >= 0.0
            && prob_ok(self.hflip_prob)
            && range_ok(self.scale_range)
            && self.scale_range.0 > 0.0
            && range_ok(self.shear_range)
            && self.translate_frac.is_none_or(|t| (0.0..1.0).contains(&t));
        if let Some(c) = self.crop_scale {
            ok &= range_ok(c) && c.0 > 0.0 && c.1 <= 1.0;
        }
        if let Some(j) = self.jitter {
            ok &= prob_ok(j.prob) && j.brightness >= 0.0 && (0.0..1.0).contains(&j.contrast);
        }
        if let Some(b) = self.blur {
            ok &= prob_ok(b.prob) && range_ok(b.sigma) && b.sigma.0 > 0.0;
        }
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy: {self:?}")))
        }
    }
}

/// One concrete draw from an [`AugPolicy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugParams {
    pub angle_deg: f64,
    pub flip: bool,
    pub scale: f64,
    pub shear: f64,
    /// Horizontal shift in pixels.
    pub shift: f64,
    /// Crop window `(top, left, height, width)` in source pixels.
    pub crop: Option<(f64, f64, f64, f64)>,
    /// `(brightness offset, contrast factor)`.
    pub jitter: Option<(f64, f64)>,
    pub blur_sigma: Option<f64>,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl AugParams {
    /// Draw parameters. Zero-width ranges consume no randomness, so a null
    /// policy leaves the stream untouched.
    pub fn sample(policy: &AugPolicy, dims: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (dims.0 as f64, dims.1 as f64);
        let crop = policy.crop_scale.map(|range| {
            let area = draw(rng, range) * h * w;
            let log_ratio = draw(rng, ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln()));
            let ratio = log_ratio.exp();
            let cw = (area * ratio).sqrt().min(w);
            let ch = (area / ratio).sqrt().min(h);
            let top = draw(rng, (0.0, h - ch));
            let left = draw(rng, (0.0, w - cw));
            (top, left, ch, cw)
        });
        let angle_deg = draw(rng, (-policy.rotation_deg, policy.rotation_deg));
        let flip = policy.hflip_prob > 0.0 && rng.random_bool(policy.hflip_prob);
        let scale = draw(rng, policy.scale_range);
        let shear = draw(rng, policy.shear_range);
        let shift = policy.translate_frac.map_or(0.0, |t| draw(rng, (-t, t)) * w);
        let jitter = policy.jitter.and_then(|j| {
            (j.prob > 0.0 && rng.random_bool(j.prob)).then(|| {
                (
                    draw(rng, (-j.brightness, j.brightness)),
                    draw(rng, (1.0 - j.contrast, 1.0 + j.contrast)),
                )
            })
        });
        let blur_sigma = policy
            .blur
            .and_then(|b| (b.prob > 0.0 && rng.random_bool(b.prob)).then(|| draw(rng, b.sigma)));
        Self {
            angle_deg,
            flip,
            scale,
            shear,
            shift,
            crop,
            jitter,
            blur_sigma,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.angle_deg == 0.0 && !self.flip && self.scale == 1.0 && self.shear == 0.0 && self.shift == 0.0
    }

    /// Forward 2x2 map on `(x, y)` offsets from the image center (y pointing down).
    /// Composition order: flip, zoom, shear, rotate.
    pub fn forward_matrix(&self) -> [[f64; 2]; 2] {
        let f = if self.flip { -1.0 } else { 1.0 };
        let (sn, cs) = self.angle_deg.to_radians().sin_cos();
        // rotation (counter-clockwise on screen) · shear · zoom · flip
        let rot = [[cs, sn], [-sn, cs]];
        let shear = [[1.0, self.shear], [0.0, 1.0]];
        let zf = [[self.scale * f, 0.0], [0.0, self.scale]];
        mat_mul(rot, mat_mul(shear, zf))
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn invert(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

/// Warp by the geometric part of `params`, filling outside pixels with zero.
/// `nearest` selects nearest-neighbour sampling (masks) instead of bilinear.
pub fn warp<T: Scalar>(img: ArrayView2<T>, params: &AugParams, nearest: bool) -> Array2<T> {
    if params.is_geometric_identity() {
        return img.to_owned();
    }
    let (h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let inv = invert(params.forward_matrix());
    Array2::from_shape_fn((h, w), |(r, c)| {
        let dx = c as f64 - cx - params.shift;
        let dy = r as f64 - cy;
        let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
        let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
        if nearest {
            let (yi, xi) = (sy.round(), sx.round());
            if yi < 0.0 || xi < 0.0 || yi > (h - 1) as f64 || xi > (w - 1) as f64 {
                T::zero()
            } else {
                img[[yi as usize, xi as usize]]
            }
        } else {
            bilinear_zero(&img, sy, sx)
        }
    })
}

/// Bilinear sample treating out-of-bounds neighbours as zero.
fn bilinear_zero<T: Scalar>(img: &ArrayView2<T>, y: f64, x: f64) -> T {
    let (h, w) = img.dim();
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return T::zero();
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            img[[yy as usize, xx as usize]].as_f64()
        }
    };
    let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx;
    T::lit(v)
}

fn crop_resize<T: Scalar>(img: ArrayView2<T>, crop: (f64, f64, f64, f64), nearest: bool) -> Array2<T> {
    let (h, w) = img.dim();
    let (top, left, ch, cw) = crop;
    let y0 = (top.floor() as usize).min(h - 1);
    let x0 = (left.floor() as usize).min(w - 1);
    let y1 = ((top + ch).round() as usize).clamp(y0 + 1, h);
    let x1 = ((left + cw).round() as usize).clamp(x0 + 1, w);
    let window = img.slice(s![y0..y1, x0..x1]);
    if nearest {
        resize_nearest(window, (h, w))
    } else {
        resize(window, (h, w))
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur<T: Scalar>(img: ArrayView2<T>, sigma: f64) -> Array2<T> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = img.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(r, c)| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| {
                    let off = k as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, (c as isize + off).clamp(0, w as isize - 1))
                    } else {
                        ((r as isize + off).clamp(0, h as isize - 1), c as isize)
                    };
                    wt * src[[rr as usize, cc as usize]]
                })
                .sum()
        })
    };
    let src = img.mapv(|v| v.as_f64());
    pass(&pass(&src, true), false).mapv(T::lit)
}

/// Apply one random draw of `policy` to an image and, optionally, its mask.
pub fn apply_augment<T: Scalar>(
    pixels: ArrayView2<T>,
    mask: Option<ArrayView2<T>>,
    policy: &AugPolicy,
    rng: &mut ChaCha8Rng,
) -> (Array2<T>, Option<Array2<T>>) {
    if let Some(m) = &mask {
        assert_eq!(m.dim(), pixels.dim(), "mask and image dims differ");
    }
    let params = AugParams::sample(policy, pixels.dim(), rng);
    apply_params(pixels, mask, &params)
}

pub fn apply_params<T: Scalar>(
    pixels: ArrayView2<T>,
    mask: Option<ArrayView2<T>>,
    params: &AugParams,
) -> (Array2<T>, Option<Array2<T>>) {
    let (mut img, mut msk) = match params.crop {
        Some(c) => (crop_resize(pixels, c, false), mask.map(|m| crop_resize(m, c, true))),
        None => (pixels.to_owned(), mask.map(|m| m.to_owned())),
    };
    img = warp(img.view(), params, false);
    msk = msk.map(|m| warp(m.view(), params, true));
    if let Some((brightness, contrast)) = params.jitter {
        let mean = img.mean().unwrap_or_else(T::zero);
        let (b, c) = (T::lit(brightness), T::lit(contrast));
        img.mapv_inplace(|v| ((v - mean) * c + mean + b).max(T::zero()).min(T::one()));
    }
    if let Some(sigma) = params.blur_sigma {
        img = gaussian_blur(img.view(), sigma);
    }
    (img, msk)
}

// ---------------------------------------------------------------------------
// Contrastive view pipelines

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MocoVariant {
    Cxr,
    CxrModified,
    V2,
}

impl MocoVariant {
    pub fn name(self) -> &'static str {
        match self {
            MocoVariant::Cxr => "cxr",
            MocoVariant::CxrModified => "cxrModified",
            MocoVariant::V2 => "v2",
        }
    }

    /// Temperature used with this variant unless overridden.
    pub fn default_temperature(self) -> f64 {
        match self {
            MocoVariant::Cxr => 0.2,
            MocoVariant::CxrModified | MocoVariant::V2 => 0.07,
        }
    }
}

impl std::str::FromStr for MocoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cxr" => Ok(MocoVariant::Cxr),
            "cxrModified" | "cxr-modified" | "cxr_modified" => Ok(MocoVariant::CxrModified),
            "v2" => Ok(MocoVariant::V2),
            other => Err(Error::Config(format!("unknown MoCo variant `{other}`"))),
        }
    }
}

/// The augmentation policy behind one contrastive variant.
pub fn moco_policy(variant: MocoVariant) -> AugPolicy {
    match variant {
        MocoVariant::Cxr => AugPolicy {
            rotation_deg: 10.0,
            hflip_prob: 0.5,
            ..AugPolicy::identity()
        },
        MocoVariant::CxrModified => AugPolicy {
            rotation_deg: 20.0,
            hflip_prob: 0.5,
            translate_frac: Some(0.2),
            scale_range: (1.0, 1.2),
            ..AugPolicy::identity()
        },
        // Color jitter becomes brightness/contrast jitter; grayscale conversion is the identity.
        MocoVariant::V2 => AugPolicy {
            hflip_prob: 0.5,
            crop_scale: Some((0.2, 1.0)),
            jitter: Some(IntensityJitter {
                brightness: 0.4,
                contrast: 0.4,
                prob: 0.8,
            }),
            blur: Some(BlurPolicy {
                prob: 0.5,
                sigma: (0.1, 2.0),
            }),
            ..AugPolicy::identity()
        },
    }
}

/// Produces two independently augmented views per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPairGenerator {
    pub policy: AugPolicy,
}

impl ViewPairGenerator {
    pub fn new(policy: AugPolicy) -> Self {
        Self { policy }
    }

    pub fn views<T: Scalar>(
        &self,
        pixels: ArrayView2<T>,
        rng_q: &mut ChaCha8Rng,
        rng_k: &mut ChaCha8Rng,
    ) -> (Array2<T>, Array2<T>) {
        let (q, _) = apply_augment(pixels, None, &self.policy, rng_q);
        let (k, _) = apply_augment(pixels, None, &self.policy, rng_k);
        (q, k)
    }
}

pub fn moco_aug_pipeline(variant: MocoVariant) -> ViewPairGenerator {
    ViewPairGenerator::new(moco_policy(variant))
}
