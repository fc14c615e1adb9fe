//! Post-hoc analysis: GradCAM heatmaps, feature-map grids, embedding export
//! with a pluggable 2-D reducer, and bounding-box size statistics.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_grayscale8, ClassLabel, ImageRecord};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::nn::{Mode, Parameterized};
use crate::scalar::Scalar;
use crate::transforms::resize;

/// Box sizes are reported at this square reference resolution.
pub const REFERENCE_SIDE: f64 = 224.0;

/// Class-evidence map in `[0, 1]` at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f64>,
    pub source_layer: String,
    pub target_class: usize,
}

impl Heatmap {
    /// Mean heatmap value inside and outside a binary mask.
    pub fn inside_outside_means<M: Scalar>(&self, mask: ArrayView2<M>) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask.iter()) {
            if m > M::zero() {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_grayscale8(path, &self.values.mapv(|v| (v * 255.0) as f32))
    }

    /// Raw values as CSV, one image row per line.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
        for row in self.values.outer_iter() {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn unknown_layer(name: &str, available: &[&str]) -> Error {
    Error::Validation(format!("unknown layer '{name}'; available layers: {}", available.join(", ")))
}

/// GradCAM from one image's activation `A` (C, h, w) and the gradient of the
/// target logit with respect to it: `ReLU(Σ_k mean(∂y/∂A_k) · A_k)`,
/// bilinearly upsampled to `out` and divided by its maximum.
pub fn grad_cam_map<T: Scalar>(activation: ArrayView3<T>, grad: ArrayView3<T>, out: (usize, usize)) -> Array2<f64> {
    let (c, h, w) = activation.dim();
    let mut raw = Array2::<f64>::zeros((h, w));
    for k in 0..c {
        let alpha = grad.index_axis(Axis(0), k).iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
        raw.zip_mut_with(&activation.index_axis(Axis(0), k), |r, a| *r += alpha * a.as_f64());
    }
    raw.mapv_inplace(|v| v.max(0.0));
    let mut up = resize(raw.view(), out);
    up.mapv_inplace(|v| v.max(0.0));
    let max = up.fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        up.mapv_inplace(|v| (v / max).min(1.0));
    }
    up
}

/// GradCAM of `target_class` for a single (H, W) image at the named encoder layer.
pub fn grad_cam<T: Scalar>(
    model: &mut Classifier<T>,
    image: ArrayView2<T>,
    target_class: usize,
    layer: &str,
) -> Result<Heatmap> {
    let available = model.encoder.layer_names();
    if !available.contains(&layer) {
        return Err(unknown_layer(layer, available));
    }
    let (h, w) = image.dim();
    let x = image.to_owned().into_shape_with_order((1, 1, h, w)).expect("contiguous image");
    let logits = model.forward(&x, &mut Mode::eval());
    let n_classes = logits.ncols();
    if target_class >= n_classes {
        return Err(Error::Validation(format!(
            "target class {target_class} out of range for {n_classes} outputs"
        )));
    }
    let mut d = Array2::<T>::zeros((1, n_classes));
    d[[0, target_class]] = T::one();
    model.zero_grad();
    model.backward(&d);
    let act = model.encoder.activation(layer).expect("layer recorded on forward");
    let grad = model.encoder.activation_grad(layer).expect("layer recorded on backward");
    let values = grad_cam_map(act.index_axis(Axis(0), 0), grad.index_axis(Axis(0), 0), (h, w));
    model.zero_grad();
    Ok(Heatmap {
        values,
        source_layer: layer.to_string(),
        target_class,
    })
}

/// Activations of one image at a named layer, as (C, h, w).
pub fn feature_maps<T: Scalar>(model: &mut Classifier<T>, image: ArrayView2<T>, layer: &str) -> Result<Array3<T>> {
    let available = model.encoder.layer_names();
    if !available.contains(&layer) {
        return Err(unknown_layer(layer, available));
    }
    let (h, w) = image.dim();
    let x = image.to_owned().into_shape_with_order((1, 1, h, w)).expect("contiguous image");
    model.forward(&x, &mut Mode::eval());
    Ok(model
        .encoder
        .activation(layer)
        .expect("layer recorded on forward")
        .index_axis(Axis(0), 0)
        .to_owned())
}

/// Tile (C, h, w) maps into a near-square grid in row-major channel order,
/// each map min-max normalized to `[0, 1]` (constant maps become 0).
pub fn feature_grid<T: Scalar>(maps: ArrayView3<T>) -> Array2<f64> {
    let (c, h, w) = maps.dim();
    let cols = (c as f64).sqrt().ceil().max(1.0) as usize;
    let rows = c.div_ceil(cols);
    let mut grid = Array2::<f64>::zeros((rows * h, cols * w));
    for k in 0..c {
        let m = maps.index_axis(Axis(0), k).mapv(|v| v.as_f64());
        let lo = m.fold(f64::INFINITY, |a, &v| a.min(v));
        let hi = m.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let span = hi - lo;
        let tile = m.mapv(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
        let (r, col) = (k / cols, k % cols);
        grid.slice_mut(s![r * h..(r + 1) * h, col * w..(col + 1) * w]).assign(&tile);
    }
    grid
}

/// Write the grid PNG and the raw (C, h, w) tensor as safetensors; returns both paths.
pub fn write_feature_maps<T: Scalar>(maps: ArrayView3<T>, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let png = stem.with_extension("png");
    write_grayscale8(&png, &feature_grid(maps).mapv(|v| (v * 255.0) as f32))?;
    let raw = stem.with_extension("safetensors");
    let values: Vec<T> = maps.iter().copied().collect();
    let bytes = T::to_le_bytes_vec(&values);
    let view = safetensors::tensor::TensorView::new(dtype_of::<T>(), maps.shape().to_vec(), &bytes)
        .map_err(|e| Error::io(&raw, std::io::Error::other(e)))?;
    safetensors::tensor::serialize_to_file([("activation", view)], &None, &raw)
        .map_err(|e| Error::io(&raw, std::io::Error::other(e)))?;
    Ok((png, raw))
}

fn dtype_of<T: Scalar>() -> safetensors::Dtype {
    match T::DTYPE {
        "f64" => safetensors::Dtype::F64,
        _ => safetensors::Dtype::F32,
    }
}

/// Pooled per-record features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Vec<ClassLabel>,
    pub meta: EmbeddingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EmbeddingMeta {
    pub layer_name: String,
    pub checkpoint: Option<PathBuf>,
}

/// Spatially averaged activations of `layer` for each image, in input order.
pub fn export_embeddings<T: Scalar>(
    model: &mut Classifier<T>,
    ids: &[String],
    images: &[ArrayView2<T>],
    labels: &[ClassLabel],
    layer: &str,
) -> Result<EmbeddingDump> {
    if images.is_empty() || images.len() != labels.len() || images.len() != ids.len() {
        return Err(Error::Validation(format!(
            "need matching non-empty ids/images/labels, got {}/{}/{}",
            ids.len(),
            images.len(),
            labels.len()
        )));
    }
    let available = model.encoder.layer_names();
    if !available.contains(&layer) {
        return Err(unknown_layer(layer, available));
    }
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let owned: Vec<Array2<T>> = chunk.iter().map(|v| v.to_owned()).collect();
        let x = crate::nn::layers::stack_images(&owned.iter().collect::<Vec<_>>());
        model.forward(&x, &mut Mode::eval());
        let act: &Array4<T> = model.encoder.activation(layer).expect("layer recorded on forward");
        let (_, c, h, w) = act.dim();
        for a in act.outer_iter() {
            let mut row = vec![0.0; c];
            for (k, plane) in a.outer_iter().enumerate() {
                row[k] = plane.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
            }
            rows.push(row);
        }
    }
    let d = rows[0].len();
    let features = Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("uniform rows");
    Ok(EmbeddingDump {
        ids: ids.to_vec(),
        features,
        labels: labels.to_vec(),
        meta: EmbeddingMeta {
            layer_name: layer.to_string(),
            checkpoint: None,
        },
    })
}

impl EmbeddingDump {
    /// CSV `id,label,f0..f{d-1}` plus a `.json` sidecar with the metadata.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labelled_rows(path, &self.ids, &self.labels, self.features.view(), "f")?;
        let sidecar = path.with_extension("json");
        std::fs::write(&sidecar, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&sidecar, e))
    }

    /// Mean pairwise cosine similarity within classes and across classes.
    pub fn cosine_similarity_summary(&self) -> (f64, f64) {
        let norms: Vec<f64> = self.features.outer_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..self.features.nrows() {
            for j in i + 1..self.features.nrows() {
                let c = self.features.row(i).dot(&self.features.row(j)) / (norms[i] * norms[j]);
                if self.labels[i] == self.labels[j] {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
    }
}

fn write_labelled_rows(
    path: &Path,
    ids: &[String],
    labels: &[ClassLabel],
    values: ArrayView2<f64>,
    prefix: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..values.ncols()).map(|k| format!("{prefix}{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for ((id, label), row) in ids.iter().zip(labels).zip(values.outer_iter()) {
        let mut rec = vec![id.clone(), label.name().to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Maps N×d features to N×2 plot coordinates.
pub trait Reducer {
    fn reduce(&self, features: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Projection onto the top two principal components (power iteration with
/// deflation). A stand-in for an external t-SNE/UMAP reducer.
#[derive(Debug, Clone, Copy)]
pub struct Pca2 {
    pub iterations: usize,
}

impl Default for Pca2 {
    fn default() -> Self {
        Self { iterations: 200 }
    }
}

impl Reducer for Pca2 {
    fn reduce(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::Validation("cannot reduce an empty feature matrix".into()));
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let centered = &features - &mean;
        let mut cov = centered.t().dot(&centered) / n.max(2) as f64;
        let mut out = Array2::<f64>::zeros((n, 2));
        for comp in 0..2.min(d) {
            // deterministic start vector
            let mut v = ndarray::Array1::from_shape_fn(d, |i| 1.0 + (i as f64) * 1e-3);
            v /= v.dot(&v).sqrt();
            let mut lambda = 0.0;
            for _ in 0..self.iterations {
                let next = cov.dot(&v);
                let norm = next.dot(&next).sqrt();
                if norm < 1e-300 {
                    break;
                }
                lambda = v.dot(&next);
                v = next / norm;
            }
            out.column_mut(comp).assign(&centered.dot(&v));
            let outer = v
                .view()
                .insert_axis(Axis(1))
                .dot(&v.view().insert_axis(Axis(0)));
            cov = cov - outer * lambda;
        }
        Ok(out)
    }
}

/// Write reduced coordinates as CSV `id,label,x0,x1`.
pub fn write_reduced_csv(path: &Path, dump: &EmbeddingDump, coords: ArrayView2<f64>) -> Result<()> {
    write_labelled_rows(path, &dump.ids, &dump.labels, coords, "x")
}

/// Box sizes of one class at the reference resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClassBoxDims {
    pub label: ClassLabel,
    pub dims: Vec<f64>,
    pub mean: Option<f64>,
    /// `(bin start, count)` with bins of the stats' `bin_width`.
    pub histogram: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoxDimStats {
    pub bin_width: f64,
    pub per_class: Vec<ClassBoxDims>,
}

/// √(w·h) of every box after rescaling its image to 224×224, grouped by class.
pub fn box_dim_stats(records: &[ImageRecord], bin_width: f64) -> Result<BoxDimStats> {
    if !(bin_width > 0.0) {
        return Err(Error::Validation(format!("bin width must be positive, got {bin_width}")));
    }
    let mut dims: HashMap<ClassLabel, Vec<f64>> = HashMap::new();
    for r in records {
        let (h, w) = r.pixels.dim();
        let (sy, sx) = (REFERENCE_SIDE / h as f64, REFERENCE_SIDE / w as f64);
        for b in &r.boxes {
            dims.entry(r.label).or_default().push((b.w * sx * b.h * sy).sqrt());
        }
    }
    let per_class = ClassLabel::ALL
        .iter()
        .map(|&label| {
            let d = dims.remove(&label).unwrap_or_default();
            let mean = (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64);
            let mut counts: Vec<usize> = Vec::new();
            for &v in &d {
                let bin = (v / bin_width).floor() as usize;
                if counts.len() <= bin {
                    counts.resize(bin + 1, 0);
                }
                counts[bin] += 1;
            }
            let histogram = counts.into_iter().enumerate().map(|(i, c)| (i as f64 * bin_width, c)).collect();
            ClassBoxDims {
                label,
                dims: d,
                mean,
                histogram,
            }
        })
        .collect();
    Ok(BoxDimStats { bin_width, per_class })
}

impl BoxDimStats {
    /// Histogram plot data: `class,binStart,binEnd,count`, then one `mean` row per class.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("class,binStart,binEnd,count\n");
        for c in &self.per_class {
            for &(start, count) in &c.histogram {
                out.push_str(&format!("{},{},{},{}\n", c.label.name(), start, start + self.bin_width, count));
            }
        }
        out.push_str("\nclass,mean,n\n");
        for c in &self.per_class {
            let mean = c.mean.map(|m| m.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", c.label.name(), mean, c.dims.len()));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BoundingBox;
    use ndarray::Array3;

    #[test]
    fn constant_map_gives_uniform_heatmap() {
        let a = Array3::<f64>::ones((1, 4, 4));
        let g = Array3::<f64>::from_elem((1, 4, 4), 0.3);
        let h = grad_cam_map(a.view(), g.view(), (8, 8));
        assert!(h.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn negative_contributions_give_zero_heatmap() {
        let a = Array3::<f64>::from_shape_fn((2, 3, 3), |(_, i, j)| (i + j) as f64);
        let g = Array3::<f64>::from_elem((2, 3, 3), -1.0);
        let h = grad_cam_map(a.view(), g.view(), (6, 6));
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_has_one_tile_per_channel() {
        let maps = Array3::<f32>::from_shape_fn((5, 2, 3), |(k, i, j)| (k * 10 + i * 3 + j) as f32);
        let g = feature_grid(maps.view());
        // 5 channels -> 3 columns, 2 rows
        assert_eq!(g.dim(), (4, 9));
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[1, 2]], 1.0);
        // the sixth slot is empty
        assert!(g.slice(s![2..4, 6..9]).iter().all(|&v| v == 0.0));
    }

    fn record_with_box(label: ClassLabel, side: usize, b: BoundingBox) -> ImageRecord {
        ImageRecord {
            id: "r".into(),
            pixels: Array2::zeros((side, side)),
            label,
            boxes: vec![b],
            group: None,
        }
    }

    #[test]
    fn box_dims_at_reference_scale() {
        let native = record_with_box(ClassLabel::Typical, 224, BoundingBox::new(0.0, 0.0, 50.0, 50.0));
        let large = record_with_box(ClassLabel::Atypical, 448, BoundingBox::new(0.0, 0.0, 30.0, 40.0));
        let stats = box_dim_stats(&[native, large], 5.0).unwrap();
        assert_eq!(stats.per_class[1].dims, vec![50.0]);
        assert!((stats.per_class[3].dims[0] - 300f64.sqrt()).abs() < 1e-12);
        assert_eq!(stats.per_class[0].mean, None);
        assert!(stats.per_class[0].histogram.is_empty());
        assert_eq!(stats.per_class[1].histogram.last(), Some(&(50.0, 1)));
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let f = Array2::from_shape_fn((20, 3), |(i, j)| match j {
            0 => i as f64,
            1 => 0.01 * ((i * 7) % 5) as f64,
            _ => 1.0,
        });
        let c = Pca2::default().reduce(f.view()).unwrap();
        let spread0 = c.column(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let spread1 = c.column(1).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(spread0 > 9.0 && spread1 < 0.1, "{spread0} {spread1}");
    }
}
