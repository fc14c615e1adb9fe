//! Image records, manifest I/O, stratified splitting and the phantom generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RSNA appearance category. The ordinal codes are part of every file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Negative = 0,
    Typical = 1,
    Indeterminate = 2,
    Atypical = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Negative,
        ClassLabel::Typical,
        ClassLabel::Indeterminate,
        ClassLabel::Atypical,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Negative => "negative",
            ClassLabel::Typical => "typical",
            ClassLabel::Indeterminate => "indeterminate",
            ClassLabel::Atypical => "atypical",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "negative" => Ok(ClassLabel::Negative),
            "typical" => Ok(ClassLabel::Typical),
            "indeterminate" => Ok(ClassLabel::Indeterminate),
            "atypical" => Ok(ClassLabel::Atypical),
            other => Err(Error::Validation(format!("unknown class label `{other}`"))),
        }
    }
}

/// Axis-aligned box in source-pixel coordinates: `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Intersect with `[0, width) × [0, height)`; `None` when nothing is left.
    pub fn clip(&self, height: usize, width: usize) -> Option<BoundingBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        if x1 > x0 && y1 > y0 {
            Some(BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// One grayscale radiograph. Pixels hold raw intensities (8- or 16-bit range).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Array2<f32>,
    pub label: ClassLabel,
    pub boxes: Vec<BoundingBox>,
    pub group: Option<String>,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!(
                "record {} has NaN or negative pixels",
                self.id
            )));
        }
        for b in &self.boxes {
            if !(b.w > 0.0 && b.h > 0.0) || b.clip(self.height(), self.width()).is_none() {
                return Err(Error::Validation(format!(
                    "record {} has a box outside the image: {b:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Key used to keep radiographs of one case on the same side of a split.
    pub fn group_key(&self) -> &str {
        self.group.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub fold_index: usize,
    pub seed: u64,
}

impl DatasetSplit {
    /// Select `(train, test)` records in manifest order.
    pub fn partition<'a>(
        &self,
        records: &'a [ImageRecord],
    ) -> (Vec<&'a ImageRecord>, Vec<&'a ImageRecord>) {
        let test: std::collections::HashSet<&str> =
            self.test_ids.iter().map(String::as_str).collect();
        records.iter().partition(|r| !test.contains(r.id.as_str()))
    }
}

// ---------------------------------------------------------------------------
// Manifest

fn parse_boxes(field: &str, row: usize) -> Result<Vec<BoundingBox>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .filter(|q| !q.trim().is_empty())
        .map(|quad| {
            let nums: Vec<f64> = quad
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    row,
                    msg: format!("bad box `{quad}`: {e}"),
                })?;
            match nums[..] {
                [x, y, w, h] if w > 0.0 && h > 0.0 => Ok(BoundingBox::new(x, y, w, h)),
                [..] if nums.len() == 4 => Err(Error::Parse {
                    row,
                    msg: format!("box `{quad}` has non-positive size"),
                }),
                _ => Err(Error::Parse {
                    row,
                    msg: format!("box `{quad}` is not an x,y,w,h quadruple"),
                }),
            }
        })
        .collect()
}

fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{},{},{},{}", b.x, b.y, b.w, b.h))
        .collect::<Vec<_>>()
        .join(";")
}

/// Read an 8- or 16-bit single-channel PNG into raw intensities.
pub fn read_grayscale(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f32::from).collect(),
        image::DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(f32::from).collect()
        }
        other => other.to_luma8().into_raw().into_iter().map(f32::from).collect(),
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("buffer matches image dims"))
}

/// Write intensities as an 8-bit PNG (values rounded and clamped to 0..=255).
pub fn write_grayscale8(path: &Path, pixels: &Array2<f32>) -> Result<()> {
    let (h, w) = pixels.dim();
    let raw: Vec<u8> = pixels
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
}

/// Load a manifest CSV (`id,path,label,boxes,group`). Image paths are
/// relative to the manifest's directory. Rows sharing an id are merged.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (c_id, c_path, c_label, c_boxes, c_group) =
        (col("id"), col("path"), col("label"), col("boxes"), col("group"));
    let (c_path, c_label) = match (c_path, c_label) {
        (Some(p), Some(l)) => (p, l),
        _ => {
            return Err(Error::Parse {
                row: 0,
                msg: "manifest header must contain `path` and `label`".into(),
            })
        }
    };

    let mut records: Vec<ImageRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Parse {
            row: row_no,
            msg: e.to_string(),
        })?;
        let get = |c: Option<usize>| c.and_then(|c| row.get(c)).unwrap_or("").to_string();
        let rel = get(Some(c_path));
        if rel.is_empty() {
            return Err(Error::Parse {
                row: row_no,
                msg: "empty path".into(),
            });
        }
        let label: ClassLabel = get(Some(c_label)).parse()?;
        let mut boxes = parse_boxes(&get(c_boxes), row_no)?;
        let id = match get(c_id) {
            s if s.is_empty() => Path::new(&rel)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| rel.clone()),
            s => s,
        };
        let group = Some(get(c_group)).filter(|g| !g.is_empty());

        if let Some(&idx) = by_id.get(&id) {
            let rec = &mut records[idx];
            let (h, w) = rec.pixels.dim();
            rec.boxes.extend(boxes.iter().filter_map(|b| b.clip(h, w)));
            continue;
        }
        let img_path: PathBuf = base.join(&rel);
        let pixels = read_grayscale(&img_path)?;
        let (h, w) = pixels.dim();
        boxes = boxes.iter().filter_map(|b| b.clip(h, w)).collect();
        by_id.insert(id.clone(), records.len());
        records.push(ImageRecord {
            id,
            pixels,
            label,
            boxes,
            group,
        });
    }
    Ok(records)
}

/// Write PNGs plus `manifest.csv` into `dir`; returns the manifest path.
pub fn write_dataset(records: &[ImageRecord], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Validation(format!("writing {}: {e}", manifest.display()));
    w.write_record(["id", "path", "label", "boxes", "group"])
        .map_err(csv_err)?;
    for r in records {
        let rel = format!("images/{}.png", r.id);
        write_grayscale8(&dir.join(&rel), &r.pixels)?;
        w.write_record([
            r.id.as_str(),
            rel.as_str(),
            r.label.name(),
            format_boxes(&r.boxes).as_str(),
            r.group.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Masks

/// Pixel span `[lo, hi)` of `[start, start+len)` rescaled by `scale`,
/// flooring the start and ceiling the end, clipped to `[0, limit)`.
fn scaled_span(start: f64, len: f64, scale: f64, limit: usize) -> (usize, usize) {
    let lo = (start * scale).floor().max(0.0) as usize;
    let hi = ((start + len) * scale).ceil().min(limit as f64).max(0.0) as usize;
    (lo.min(limit), hi)
}

/// Rasterize the union of a record's boxes at `out_size = (h, w)`.
pub fn boxes_to_mask(record: &ImageRecord, out_size: (usize, usize)) -> Array2<u8> {
    let (oh, ow) = out_size;
    let sy = oh as f64 / record.height() as f64;
    let sx = ow as f64 / record.width() as f64;
    let mut mask = Array2::<u8>::zeros((oh, ow));
    for b in &record.boxes {
        let (y0, y1) = scaled_span(b.y, b.h, sy, oh);
        let (x0, x1) = scaled_span(b.x, b.w, sx, ow);
        if y1 > y0 && x1 > x0 {
            mask.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(1);
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Splits

/// Records grouped into split units (a case with several radiographs is one unit).
struct Unit {
    label: ClassLabel,
    ids: Vec<String>,
}

fn units(records: &[ImageRecord]) -> Vec<Unit> {
    let mut out: Vec<Unit> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for r in records {
        match pos.get(r.group_key()) {
            Some(&i) => out[i].ids.push(r.id.clone()),
            None => {
                pos.insert(r.group_key(), out.len());
                out.push(Unit {
                    label: r.label,
                    ids: vec![r.id.clone()],
                });
            }
        }
    }
    out
}

/// Per-class unit indices, each list shuffled with a class-specific stream.
fn shuffled_by_class(units: &[Unit], seed: u64) -> BTreeMap<ClassLabel, Vec<usize>> {
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, u) in units.iter().enumerate() {
        by_class.entry(u.label).or_default().push(i);
    }
    for (label, idx) in by_class.iter_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.index() as u64 + 1);
        idx.shuffle(&mut rng);
    }
    by_class
}

fn collect_ids(records: &[ImageRecord], units: &[Unit], test_units: &[bool]) -> (Vec<String>, Vec<String>) {
    let mut test_ids = std::collections::HashSet::new();
    for (u, &is_test) in units.iter().zip(test_units) {
        if is_test {
            test_ids.extend(u.ids.iter().cloned());
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if test_ids.contains(&r.id) {
            test.push(r.id.clone());
        } else {
            train.push(r.id.clone());
        }
    }
    (train, test)
}

/// Stratified train/test split with largest-remainder allocation.
///
/// The overall test size is `round(test_fraction · units)`; each class receives
/// the floor of its proportional share, and leftover slots go to the classes
/// with the largest fractional remainders. Classes with fewer than two units
/// stay entirely in train.
pub fn make_split(records: &[ImageRecord], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if records.len() < 2 {
        return Err(Error::Validation("need at least 2 records to split".into()));
    }
    let units = units(records);
    let by_class = shuffled_by_class(&units, seed);

    let eligible: Vec<(ClassLabel, usize)> = by_class
        .iter()
        .filter_map(|(label, idx)| {
            if idx.len() < 2 {
                log::warn!("class {label} has {} unit(s); kept whole in train", idx.len());
                None
            } else {
                Some((*label, idx.len()))
            }
        })
        .collect();
    let eligible_total: usize = eligible.iter().map(|(_, n)| n).sum();
    let target = (test_fraction * eligible_total as f64).round() as usize;

    let mut alloc: BTreeMap<ClassLabel, usize> = BTreeMap::new();
    let mut remainders: Vec<(f64, ClassLabel)> = Vec::new();
    for &(label, n) in &eligible {
        let share = test_fraction * n as f64;
        // Each eligible class keeps at least one unit in train.
        let base = (share.floor() as usize).min(n - 1);
        alloc.insert(label, base);
        remainders.push((share - base as f64, label));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned: usize = alloc.values().sum();
    for (_, label) in remainders {
        if assigned >= target {
            break;
        }
        let n = by_class[&label].len();
        let slot = alloc.get_mut(&label).expect("allocated");
        if *slot + 1 < n {
            *slot += 1;
            assigned += 1;
        }
    }

    let mut is_test = vec![false; units.len()];
    for (label, count) in &alloc {
        for &u in by_class[label].iter().take(*count) {
            is_test[u] = true;
        }
    }
    let (train_ids, test_ids) = collect_ids(records, &units, &is_test);
    Ok(DatasetSplit {
        train_ids,
        test_ids,
        fold_index: 0,
        seed,
    })
}

/// Stratified k-fold partition. Units of every class are dealt round-robin
/// with a running fold pointer, so fold sizes differ by at most one unit and
/// each fold's class counts are `floor` or `ceil` of `class_count / k`.
pub fn make_kfolds(records: &[ImageRecord], k: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    if k > records.len() {
        return Err(Error::Validation(format!(
            "k = {k} exceeds the number of records ({})",
            records.len()
        )));
    }
    let units = units(records);
    let by_class = shuffled_by_class(&units, seed);
    let mut fold_of = vec![0usize; units.len()];
    let mut next = 0usize;
    for (label, idx) in &by_class {
        if idx.len() < k {
            log::warn!("class {label} has {} unit(s) for {k} folds", idx.len());
        }
        for &u in idx {
            fold_of[u] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|fold| {
            let is_test: Vec<bool> = fold_of.iter().map(|&f| f == fold).collect();
            let (train_ids, test_ids) = collect_ids(records, &units, &is_test);
            DatasetSplit {
                train_ids,
                test_ids,
                fold_index: fold,
                seed,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Phantom generator

/// Ellipse in normalized image coordinates (`u` = column / width, `v` = row / height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cu: f64,
    pub cv: f64,
    pub au: f64,
    pub av: f64,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let du = (u - self.cu) / self.au;
        let dv = (v - self.cv) / self.av;
        du * du + dv * dv <= 1.0
    }

    /// Point at polar offset `(r, theta)` in ellipse-normalized coordinates.
    fn point(&self, r: f64, theta: f64) -> (f64, f64) {
        (
            self.cu + r * self.au * theta.cos(),
            self.cv + r * self.av * theta.sin(),
        )
    }
}

/// Phantom anatomy and lesion parameters. Intensities are in `[0, 1]` before
/// 8-bit quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub left_lung: Ellipse,
    pub right_lung: Ellipse,
    pub body: Ellipse,
    pub body_level: f64,
    pub mediastinum_level: f64,
    pub lung_level: f64,
    pub noise_sigma: f64,
    /// Peak added intensity of soft opacities.
    pub blob_amplitude: f64,
    /// Added intensity of sharp-edged findings.
    pub line_amplitude: f64,
    /// Blob standard deviation range as a fraction of image width.
    pub typical_sigma: (f64, f64),
    pub indeterminate_sigma: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            left_lung: Ellipse { cu: 0.31, cv: 0.50, au: 0.15, av: 0.30 },
            right_lung: Ellipse { cu: 0.69, cv: 0.50, au: 0.15, av: 0.30 },
            body: Ellipse { cu: 0.50, cv: 0.55, au: 0.47, av: 0.52 },
            body_level: 0.55,
            mediastinum_level: 0.78,
            lung_level: 0.22,
            noise_sigma: 0.04,
            blob_amplitude: 0.16,
            line_amplitude: 0.20,
            typical_sigma: (0.040, 0.055),
            indeterminate_sigma: (0.026, 0.036),
        }
    }
}

impl PhantomConfig {
    pub fn lung(&self, left: bool) -> &Ellipse {
        if left {
            &self.left_lung
        } else {
            &self.right_lung
        }
    }
}

struct Lesion {
    /// Center in normalized coordinates.
    u: f64,
    v: f64,
    kind: LesionKind,
}

enum LesionKind {
    Blob { sigma: f64 },
    Band { half_len: f64, half_thick: f64, angle: f64 },
}

impl Lesion {
    /// Added intensity at normalized `(u, v)`; `aspect` = height / width.
    fn value(&self, u: f64, v: f64, aspect: f64, cfg: &PhantomConfig) -> f64 {
        let du = u - self.u;
        let dv = (v - self.v) * aspect;
        match self.kind {
            LesionKind::Blob { sigma } => {
                cfg.blob_amplitude * (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp()
            }
            LesionKind::Band {
                half_len,
                half_thick,
                angle,
            } => {
                let along = du * angle.cos() + dv * angle.sin();
                let across = -du * angle.sin() + dv * angle.cos();
                if along.abs() <= half_len && across.abs() <= half_thick {
                    cfg.line_amplitude
                } else {
                    0.0
                }
            }
        }
    }

    /// Tight pixel box: two standard deviations for blobs, the band's hull otherwise.
    fn bounding_box(&self, h: usize, w: usize) -> Option<BoundingBox> {
        let aspect = h as f64 / w as f64;
        let (ru, rv) = match self.kind {
            LesionKind::Blob { sigma } => (2.0 * sigma, 2.0 * sigma / aspect),
            LesionKind::Band {
                half_len,
                half_thick,
                angle,
            } => {
                let (c, s) = (angle.cos().abs(), angle.sin().abs());
                (half_len * c + half_thick * s, (half_len * s + half_thick * c) / aspect)
            }
        };
        let x0 = ((self.u - ru) * w as f64).floor();
        let x1 = ((self.u + ru) * w as f64).ceil();
        let y0 = ((self.v - rv) * h as f64).floor();
        let y1 = ((self.v + rv) * h as f64).ceil();
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0).clip(h, w)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn lesions_for(label: ClassLabel, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Lesion> {
    use std::f64::consts::PI;
    match label {
        ClassLabel::Negative => Vec::new(),
        ClassLabel::Typical => {
            // Bilateral, peripheral, lower zones: one per lung plus up to two extra.
            let count = rng.random_range(2..=4usize);
            (0..count)
                .map(|i| {
                    let left = if i < 2 { i == 0 } else { rng.random_bool(0.5) };
                    // Outward-and-down quadrant; image rows grow downwards.
                    let theta = if left {
                        uniform(rng, 0.58 * PI, 0.92 * PI)
                    } else {
                        uniform(rng, 0.08 * PI, 0.42 * PI)
                    };
                    let r = uniform(rng, 0.40, 0.70);
                    let (u, v) = cfg.lung(left).point(r, theta);
                    let sigma = uniform(rng, cfg.typical_sigma.0, cfg.typical_sigma.1);
                    Lesion { u, v, kind: LesionKind::Blob { sigma } }
                })
                .collect()
        }
        ClassLabel::Indeterminate => {
            // Unilateral, upper/central zone.
            let left = rng.random_bool(0.5);
            let count = rng.random_range(1..=2usize);
            (0..count)
                .map(|_| {
                    let theta = if left {
                        uniform(rng, 1.55 * PI, 1.95 * PI)
                    } else {
                        uniform(rng, 1.05 * PI, 1.45 * PI)
                    };
                    let r = uniform(rng, 0.20, 0.60);
                    let (u, v) = cfg.lung(left).point(r, theta);
                    let sigma = uniform(rng, cfg.indeterminate_sigma.0, cfg.indeterminate_sigma.1);
                    Lesion { u, v, kind: LesionKind::Blob { sigma } }
                })
                .collect()
        }
        ClassLabel::Atypical => {
            let left = rng.random_bool(0.5);
            let theta = uniform(rng, 0.0, 2.0 * PI);
            let r = uniform(rng, 0.0, 0.45);
            let (u, v) = cfg.lung(left).point(r, theta);
            vec![Lesion {
                u,
                v,
                kind: LesionKind::Band {
                    half_len: uniform(rng, 0.07, 0.11),
                    half_thick: uniform(rng, 0.012, 0.018),
                    angle: uniform(rng, 0.0, PI),
                },
            }]
        }
    }
}

fn render_phantom(
    size: (usize, usize),
    label: ClassLabel,
    cfg: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Vec<BoundingBox>) {
    let (h, w) = size;
    let aspect = h as f64 / w as f64;
    let lesions = lesions_for(label, cfg, rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
    let mut pixels = Array2::<f32>::zeros((h, w));
    for ((row, col), px) in pixels.indexed_iter_mut() {
        let u = (col as f64 + 0.5) / w as f64;
        let v = (row as f64 + 0.5) / h as f64;
        let mut value = 0.0;
        if cfg.body.contains(u, v) {
            let mediastinum = (-((u - 0.5) / 0.07).powi(2)).exp();
            value = cfg.body_level + (cfg.mediastinum_level - cfg.body_level) * mediastinum;
            value += 0.05 * (v - 0.5);
            let in_lung = cfg.left_lung.contains(u, v) || cfg.right_lung.contains(u, v);
            if in_lung {
                value = cfg.lung_level;
                for l in &lesions {
                    value += l.value(u, v, aspect, cfg);
                }
            }
        }
        value += noise.sample(rng);
        *px = (value.clamp(0.0, 1.0) * 255.0).round() as f32;
    }
    let boxes = lesions.iter().filter_map(|l| l.bounding_box(h, w)).collect();
    (pixels, boxes)
}

/// Class-balanced synthetic radiographs (labels assigned round-robin).
pub fn generate_phantom_dataset(n: usize, size: (usize, usize), seed: u64) -> Result<Vec<ImageRecord>> {
    generate_phantom_dataset_with(n, size, seed, &PhantomConfig::default())
}

pub fn generate_phantom_dataset_with(
    n: usize,
    size: (usize, usize),
    seed: u64,
    cfg: &PhantomConfig,
) -> Result<Vec<ImageRecord>> {
    if n < 4 {
        return Err(Error::Validation(format!("phantom dataset needs n >= 4, got {n}")));
    }
    if size.0 < 32 || size.1 < 32 {
        return Err(Error::Validation(format!(
            "phantom images must be at least 32x32, got {}x{}",
            size.0, size.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let label = ClassLabel::ALL[i % 4];
            let (pixels, boxes) = render_phantom(size, label, cfg, &mut rng);
            ImageRecord {
                id: format!("phantom_{i:05}"),
                pixels,
                label,
                boxes,
                group: None,
            }
        })
        .collect())
}

/// Per-class record counts in label order.
pub fn class_counts(records: &[ImageRecord]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for r in records {
        counts[r.label.index()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blank(id: &str, label: ClassLabel, h: usize, w: usize) -> ImageRecord {
        ImageRecord {
            id: id.to_string(),
            pixels: Array2::zeros((h, w)),
            label,
            boxes: Vec::new(),
            group: None,
        }
    }

    fn balanced(n_per_class: usize) -> Vec<ImageRecord> {
        (0..4 * n_per_class)
            .map(|i| blank(&format!("r{i}"), ClassLabel::ALL[i % 4], 4, 4))
            .collect()
    }

    /// Interval intersection computed independently of `BoundingBox::clip`.
    fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
        (a1.min(b1) - a0.max(b0)).max(0.0)
    }

    #[test]
    fn clip_matches_interval_oracle() {
        let b = BoundingBox::new(50.0, 50.0, 30.0, 30.0).clip(64, 64).unwrap();
        assert_eq!(b.w, interval_overlap(50.0, 80.0, 0.0, 64.0));
        assert_eq!(b.h, interval_overlap(50.0, 80.0, 0.0, 64.0));
        assert_eq!((b.w, b.h), (14.0, 14.0));
        assert!(BoundingBox::new(70.0, 0.0, 5.0, 5.0).clip(64, 64).is_none());
    }

    #[test]
    fn label_parsing() {
        assert_eq!("Typical".parse::<ClassLabel>().unwrap(), ClassLabel::Typical);
        assert!(matches!("covid".parse::<ClassLabel>(), Err(Error::Validation(_))));
        for l in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_index(l.index()), Some(l));
        }
    }

    #[test]
    fn mask_examples() {
        let mut r = blank("a", ClassLabel::Typical, 10, 10);
        assert_eq!(boxes_to_mask(&r, (10, 10)).sum(), 0);
        r.boxes.push(BoundingBox::new(2.0, 3.0, 4.0, 5.0));
        let m = boxes_to_mask(&r, (10, 10));
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 20);
        assert_eq!(m[[3, 2]], 1);
        assert_eq!(m[[7, 5]], 1);
        assert_eq!(m[[8, 5]], 0);
    }

    #[test]
    fn overlapping_boxes_match_membership_oracle() {
        let mut r = blank("a", ClassLabel::Typical, 20, 20);
        r.boxes = vec![
            BoundingBox::new(2.0, 2.0, 8.0, 6.0),
            BoundingBox::new(6.0, 4.0, 7.0, 9.0),
        ];
        let m = boxes_to_mask(&r, (20, 20));
        let mut oracle = 0;
        for y in 0..20 {
            for x in 0..20 {
                let inside = r.boxes.iter().any(|b| {
                    (x as f64) >= b.x && (x as f64) < b.x + b.w && (y as f64) >= b.y && (y as f64) < b.y + b.h
                });
                oracle += inside as usize;
                assert_eq!(m[[y, x]] == 1, inside);
            }
        }
        assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), oracle);
    }

    #[test]
    fn mask_rescale_never_loses_pixels() {
        let mut r = blank("a", ClassLabel::Typical, 100, 100);
        r.boxes.push(BoundingBox::new(11.0, 13.0, 3.0, 3.0));
        // 3px box at 1/10 scale spans 0.3 px: floor/ceil keeps it as a full pixel.
        let m = boxes_to_mask(&r, (10, 10));
        assert_eq!(m.sum(), 1);
        assert_eq!(m[[1, 1]], 1);
    }

    #[test]
    fn split_exact_divisibility() {
        let recs = balanced(25);
        let s = make_split(&recs, 0.2, 7).unwrap();
        assert_eq!(s.test_ids.len(), 20);
        let (_, test) = s.partition(&recs);
        assert_eq!(class_counts(&test.into_iter().cloned().collect::<Vec<_>>()), [5; 4]);
        assert_eq!(s, make_split(&recs, 0.2, 7).unwrap());
    }

    #[test]
    fn split_size_on_reference_count() {
        // 6334 round-robin records: class counts 1584, 1584, 1583, 1583.
        let recs: Vec<_> = (0..6334)
            .map(|i| blank(&format!("r{i}"), ClassLabel::ALL[i % 4], 1, 1))
            .collect();
        let s = make_split(&recs, 0.2, 3).unwrap();
        let counts = class_counts(&recs);
        let floor_sum: usize = counts.iter().map(|&c| (0.2 * c as f64).floor() as usize).sum();
        let ceil_sum: usize = counts.iter().map(|&c| (0.2 * c as f64).ceil() as usize).sum();
        assert!((floor_sum..=ceil_sum).contains(&s.test_ids.len()));
        assert!((1266..=1267).contains(&s.test_ids.len()));
        let (_, test) = s.partition(&recs);
        let test: Vec<_> = test.into_iter().cloned().collect();
        for (c, t) in counts.iter().zip(class_counts(&test)) {
            assert!((t as f64 - 0.2 * *c as f64).abs() < 1.0);
        }
    }

    #[test]
    fn singleton_class_stays_in_train() {
        let mut recs = balanced(5);
        recs.retain(|r| r.label != ClassLabel::Atypical);
        recs.push(blank("lonely", ClassLabel::Atypical, 4, 4));
        let s = make_split(&recs, 0.5, 1).unwrap();
        assert!(s.train_ids.contains(&"lonely".to_string()));
    }

    #[test]
    fn groups_are_never_separated() {
        let mut recs = balanced(10);
        for (i, r) in recs.iter_mut().enumerate() {
            r.group = Some(format!("case{}", i / 2));
            r.label = ClassLabel::ALL[(i / 2) % 4];
        }
        for seed in 0..20 {
            let s = make_split(&recs, 0.3, seed).unwrap();
            for pair in recs.chunks(2) {
                let a = s.test_ids.contains(&pair[0].id);
                let b = s.test_ids.contains(&pair[1].id);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let recs = balanced(2);
        assert!(make_split(&recs, 0.0, 0).is_err());
        assert!(make_split(&recs, 1.0, 0).is_err());
        assert!(make_split(&recs[..1], 0.5, 0).is_err());
    }

    #[test]
    fn kfold_examples() {
        let recs: Vec<_> = (0..50)
            .map(|i| blank(&format!("r{i}"), ClassLabel::ALL[i % 4], 1, 1))
            .collect();
        let folds = make_kfolds(&recs, 5, 11).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = Vec::new();
        let global = class_counts(&recs);
        for f in &folds {
            assert_eq!(f.test_ids.len(), 10);
            assert_eq!(f.train_ids.len() + f.test_ids.len(), 50);
            seen.extend(f.test_ids.iter().cloned());
            let (_, test) = f.partition(&recs);
            let test: Vec<_> = test.into_iter().cloned().collect();
            let counts = class_counts(&test);
            for c in 0..4 {
                let expected = global[c] as f64 * test.len() as f64 / recs.len() as f64;
                assert!((counts[c] as f64 - expected).abs() <= 1.0);
            }
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 50);
        assert!(make_kfolds(&recs[..3], 5, 0).is_err());
        assert!(make_kfolds(&recs, 1, 0).is_err());
    }

    #[test]
    fn phantom_contract() {
        let recs = generate_phantom_dataset(8, (64, 64), 1).unwrap();
        assert_eq!(class_counts(&recs), [2; 4]);
        for r in &recs {
            r.validate().unwrap();
            assert_eq!(r.label == ClassLabel::Negative, r.boxes.is_empty());
        }
        assert!(generate_phantom_dataset(3, (64, 64), 1).is_err());
        assert!(generate_phantom_dataset(8, (16, 64), 1).is_err());
    }

    #[test]
    fn typical_boxes_are_bilateral() {
        let cfg = PhantomConfig::default();
        let recs = generate_phantom_dataset(200, (64, 64), 5).unwrap();
        for r in recs.iter().filter(|r| r.label == ClassLabel::Typical) {
            let centers: Vec<(f64, f64)> = r
                .boxes
                .iter()
                .map(|b| {
                    let (x, y) = b.center();
                    (x / 64.0, y / 64.0)
                })
                .collect();
            assert!(centers.iter().any(|&(u, v)| cfg.left_lung.contains(u, v)), "{}", r.id);
            assert!(centers.iter().any(|&(u, v)| cfg.right_lung.contains(u, v)), "{}", r.id);
        }
    }

    #[test]
    fn phantom_is_reproducible() {
        let a = generate_phantom_dataset(12, (48, 40), 99).unwrap();
        let b = generate_phantom_dataset(12, (48, 40), 99).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_dataset(12, (48, 40), 100).unwrap();
        assert_ne!(a[0].pixels, c[0].pixels);
    }

    #[test]
    fn manifest_round_trip_and_merge() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate_phantom_dataset(8, (32, 32), 4).unwrap();
        let manifest = write_dataset(&recs, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded, recs);

        let extra = dir.path().join("extra.csv");
        std::fs::write(
            &extra,
            "path,label,boxes\nimages/phantom_00001.png,typical,\"10,20,30,40\"\n\
             images/phantom_00001.png,typical,\"1,1,2,2;50,50,30,30\"\n",
        )
        .unwrap();
        let merged = load_manifest(&extra).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].id, "phantom_00001");
        assert_eq!(merged[0].boxes.len(), 2);
        // The 50,50 box lies outside the 32x32 image and is dropped by clipping.
        assert_eq!(merged[0].boxes[0], BoundingBox::new(10.0, 20.0, 22.0, 12.0));
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        match load_manifest(&missing) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("expected I/O error, got {other:?}"),
        }
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "id,path,label,boxes,group\n").unwrap();
        assert!(load_manifest(&empty).unwrap().is_empty());

        let recs = generate_phantom_dataset(4, (32, 32), 4).unwrap();
        write_dataset(&recs, dir.path()).unwrap();
        let bad_label = dir.path().join("bad_label.csv");
        std::fs::write(&bad_label, "id,path,label\na,images/phantom_00000.png,covid\n").unwrap();
        assert!(matches!(load_manifest(&bad_label), Err(Error::Validation(_))));
        let bad_box = dir.path().join("bad_box.csv");
        std::fs::write(
            &bad_box,
            "id,path,label,boxes\na,images/phantom_00000.png,negative,\nb,images/phantom_00001.png,typical,\"1,2,3\"\n",
        )
        .unwrap();
        assert!(matches!(load_manifest(&bad_box), Err(Error::Parse { row: 2, .. })));
    }

    proptest! {
        #[test]
        fn mask_is_monotone(boxes in proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0, 1.0f64..15.0, 1.0f64..15.0), 1..5)) {
            let mut r = blank("p", ClassLabel::Typical, 32, 32);
            let mut prev = boxes_to_mask(&r, (16, 24));
            for (x, y, w, h) in boxes {
                r.boxes.push(BoundingBox::new(x, y, w, h));
                let next = boxes_to_mask(&r, (16, 24));
                prop_assert!(prev.iter().zip(next.iter()).all(|(a, b)| b >= a));
                prev = next;
            }
        }

        #[test]
        fn splits_partition_ids(seed in 0u64..1000, n in 8usize..60, frac in 0.1f64..0.9) {
            let recs: Vec<_> = (0..n).map(|i| blank(&format!("r{i}"), ClassLabel::ALL[(i * 7 + seed as usize) % 4], 1, 1)).collect();
            let s = make_split(&recs, frac, seed).unwrap();
            let mut all: Vec<_> = s.train_ids.iter().chain(&s.test_ids).cloned().collect();
            all.sort();
            let mut ids: Vec<_> = recs.iter().map(|r| r.id.clone()).collect();
            ids.sort();
            prop_assert_eq!(all, ids);
            for f in make_kfolds(&recs, 3, seed).unwrap() {
                prop_assert_eq!(f.train_ids.len() + f.test_ids.len(), n);
                prop_assert!(f.test_ids.iter().all(|t| !f.train_ids.contains(t)));
            }
        }
    }
}
