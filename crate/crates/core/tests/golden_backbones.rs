//! Native backbones against Keras references computed with the same seeded
//! weights. Reference files are produced by `tools/keras_backbones.py golden`.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use retino_bench::model::{Backbone, BackboneId, IngressMode, WeightSource};
use retino_bench::preprocess::{ImageTensor, ValueDomain};
use retino_bench::seed::keyed_uniform;
use serde_json::Value;

const TOLERANCE: f64 = 1e-4;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

fn read_f32(path: &Path) -> Vec<f32> {
    let bytes = std::fs::read(path).unwrap();
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn seeded_image(seed: u64) -> ImageTensor {
    let data: Vec<f32> = (0..224 * 224 * 3).map(|i| (keyed_uniform(seed, "golden/image", i) + 1.0) * 127.5).collect();
    ImageTensor::new(Array3::from_shape_vec((224, 224, 3), data).unwrap(), ValueDomain::Raw0To255).unwrap()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check(id: BackboneId) {
    let header: Value = serde_json::from_slice(&std::fs::read(golden_dir().join("golden.json")).unwrap()).unwrap();
    let weights_seed = header["weights_seed"].as_u64().unwrap();
    let image_seed = header["image_seed"].as_u64().unwrap();
    let backbone = Backbone::load(id, WeightSource::RandomSeeded { seed: weights_seed }, IngressMode::Native).unwrap();

    let mut ours = Vec::new();
    let mut theirs = Vec::new();
    for case in header["cases"].as_array().unwrap().iter().filter(|c| c["backbone"] == id.name()) {
        let image = match case["input"].as_str().unwrap() {
            "zeros" => ImageTensor::filled(224, 224, 0.0, ValueDomain::Raw0To255),
            "seeded" => seeded_image(image_seed),
            other => panic!("unknown input {other}"),
        };
        let reference: Vec<f64> = read_f32(&golden_dir().join(case["file"].as_str().unwrap())).into_iter().map(f64::from).collect();
        let got: Vec<f64> = backbone.features(&image).unwrap().into_iter().map(f64::from).collect();
        assert_eq!(got.len(), reference.len());
        let diff: Vec<f64> = got.iter().zip(&reference).map(|(a, b)| a - b).collect();
        let rel = max_abs(&diff) / max_abs(&reference);
        assert!(rel <= TOLERANCE, "{id} {}: relative error {rel:e}", case["input"]);
        ours.push(got);
        theirs.push(reference);
    }
    assert_eq!(ours.len(), 2);

    // the image-dependent part of the features must agree too, not only the
    // part driven by biases
    let delta = |v: &[Vec<f64>]| v[1].iter().zip(&v[0]).map(|(a, b)| a - b).collect::<Vec<f64>>();
    let (d_ours, d_theirs) = (delta(&ours), delta(&theirs));
    assert!(max_abs(&d_theirs) > 100.0 * TOLERANCE * max_abs(&theirs[1]), "{id}: reference barely depends on the input");
    let gap: Vec<f64> = d_ours.iter().zip(&d_theirs).map(|(a, b)| a - b).collect();
    let rel = max_abs(&gap) / max_abs(&d_theirs);
    assert!(rel <= 1e-2, "{id}: input response differs by {rel:e}");
}

#[test]
fn vgg16_matches_keras() {
    check(BackboneId::Vgg16);
}

#[test]
fn resnet50v2_matches_keras() {
    check(BackboneId::ResNet50V2);
}

#[test]
fn efficientnet_b0_matches_keras() {
    check(BackboneId::EfficientNetB0);
}
