use cxrlab::dataset::{generate_phantom_dataset, make_split, ClassLabel, ImageRecord};
use cxrlab::interpret::{box_dim_stats, export_embeddings, feature_grid, feature_maps, grad_cam, Pca2, Reducer};
use cxrlab::models::{BackboneConfig, Classifier};
use cxrlab::training::{prepare, train_baseline, RunEnv, Sample, Schedule, TrainConfig};
use cxrlab::transforms::{AugPolicy, PreprocConfig};
use cxrlab::Error;
use ndarray::{Array2, ArrayView2};

fn preproc() -> PreprocConfig {
    PreprocConfig { target_size: (64, 64), ..PreprocConfig::default() }
}

fn samples(n: usize, seed: u64) -> Vec<Sample<f32>> {
    prepare(&generate_phantom_dataset(n, (64, 64), seed).unwrap(), &preproc()).unwrap()
}

fn untrained() -> Classifier<f32> {
    Classifier::build(&BackboneConfig::tiny(16), 4, 2).unwrap()
}

fn dump_of(model: &mut Classifier<f32>, s: &[Sample<f32>], layer: &str) -> cxrlab::interpret::EmbeddingDump {
    let ids: Vec<String> = s.iter().map(|x| x.id.clone()).collect();
    let images: Vec<ArrayView2<f32>> = s.iter().map(|x| x.image.view()).collect();
    let labels: Vec<ClassLabel> = s.iter().map(|x| x.label).collect();
    export_embeddings(model, &ids, &images, &labels, layer).unwrap()
}

#[test]
fn duplicate_images_give_identical_embeddings() {
    let mut s = samples(8, 1);
    let mut copy = s[3].clone();
    copy.id = "copy".into();
    s.push(copy);
    let mut model = untrained();
    let dump = dump_of(&mut model, &s, "block4");
    assert_eq!(dump.features.dim(), (9, 16));
    assert_eq!(dump.features.row(3), dump.features.row(8));
    assert_eq!(dump.ids[8], "copy");
}

#[test]
fn embeddings_do_not_depend_on_batching() {
    // More than one internal chunk of 32.
    let s = samples(40, 2);
    let mut model = untrained();
    let all = dump_of(&mut model, &s, "block3");
    for i in [0, 31, 32, 39] {
        let one = dump_of(&mut model, &s[i..i + 1], "block3");
        for (a, b) in all.features.row(i).iter().zip(one.features.row(0)) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn trained_features_cluster_by_class() {
    let records: Vec<ImageRecord> = generate_phantom_dataset(120, (64, 64), 3).unwrap();
    let split = make_split(&records, 0.25, 3).unwrap();
    let (train, test) = split.partition(&records);
    let train: Vec<ImageRecord> = train.into_iter().cloned().collect();
    let test: Vec<ImageRecord> = test.into_iter().cloned().collect();
    let dir = tempfile::tempdir().unwrap();
    let flip = AugPolicy { hflip_prob: 0.5, ..AugPolicy::identity() };
    let env = RunEnv::new(dir.path(), preproc(), flip, BackboneConfig::tiny(32));
    let cfg = TrainConfig { epochs: 10, batch_size: 8, schedule: Schedule::Cosine, lr_min: 1e-5, seed: 1, ..TrainConfig::default() };
    let mut run = train_baseline::<f32>(&cfg, &env, &train).unwrap();
    let test = prepare::<f32>(&test, &preproc()).unwrap();
    let dump = dump_of(&mut run.model, &test, "block4");
    let (intra, inter) = dump.cosine_similarity_summary();
    assert!(intra > inter, "intra {intra} vs inter {inter}");
}

#[test]
fn heatmaps_match_input_and_stay_in_unit_range() {
    let s = samples(8, 4);
    let mut model = untrained();
    for layer in model.encoder.layer_names().to_vec() {
        for x in &s {
            let heat = grad_cam(&mut model, x.image.view(), ClassLabel::Typical.index(), layer).unwrap();
            assert_eq!(heat.values.dim(), (64, 64));
            assert_eq!(heat.source_layer, layer);
            assert!(heat.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = heat.values.fold(0.0f64, |m, &v| m.max(v));
            assert!(max == 0.0 || (max - 1.0).abs() < 1e-12, "max {max}");
        }
    }
}

#[test]
fn bad_layer_and_class_are_validation_errors() {
    let s = samples(4, 5);
    let mut model = untrained();
    match grad_cam(&mut model, s[0].image.view(), 0, "block9") {
        Err(Error::Validation(msg)) => assert!(msg.contains("block1") && msg.contains("block4"), "{msg}"),
        other => panic!("expected validation error, got {other:?}"),
    }
    assert!(matches!(grad_cam(&mut model, s[0].image.view(), 4, "block4"), Err(Error::Validation(_))));
    assert!(matches!(feature_maps(&mut model, s[0].image.view(), "stem"), Err(Error::Validation(_))));
}

#[test]
fn feature_grid_has_one_normalized_tile_per_channel() {
    let s = samples(4, 6);
    let mut model = untrained();
    let maps = feature_maps(&mut model, s[0].image.view(), "block2").unwrap();
    let (c, h, w) = maps.dim();
    let grid = feature_grid(maps.view());
    let cols = (c as f64).sqrt().ceil() as usize;
    assert_eq!(grid.dim(), (c.div_ceil(cols) * h, cols * w));
    assert!(grid.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn pca_orders_components_by_variance() {
    let s = samples(24, 7);
    let mut model = untrained();
    let dump = dump_of(&mut model, &s, "block4");
    let coords = Pca2::default().reduce(dump.features.view()).unwrap();
    assert_eq!(coords.dim(), (24, 2));
    let var = |k: usize| coords.column(k).mapv(|v| v * v).sum();
    assert!(var(0) >= var(1));
    let cross: f64 = coords.column(0).dot(&coords.column(1));
    assert!(cross.abs() <= 1e-6 * var(0).max(1e-12), "components correlate: {cross}");
    assert!(Pca2::default().reduce(Array2::<f64>::zeros((0, 3)).view()).is_err());
}

#[test]
fn box_dims_recomputed_from_records() {
    let records = generate_phantom_dataset(40, (112, 112), 8).unwrap();
    let stats = box_dim_stats(&records, 8.0).unwrap();
    for class in &stats.per_class {
        let want: Vec<f64> = records
            .iter()
            .filter(|r| r.label == class.label)
            .flat_map(|r| r.boxes.iter().map(|b| (b.w * 2.0 * b.h * 2.0).sqrt()))
            .collect();
        assert_eq!(class.dims.len(), want.len());
        for (a, b) in class.dims.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        let counted: usize = class.histogram.iter().map(|h| h.1).sum();
        assert_eq!(counted, want.len());
        if class.label == ClassLabel::Negative {
            assert!(class.dims.is_empty() && class.mean.is_none());
        }
    }
    assert!(box_dim_stats(&records, 0.0).is_err());
}
