use seqkit::io::{load_checkpoint, load_dataset, load_manifest, save_checkpoint, save_dataset, Dtype};
use seqkit::model::{Model, ModelConfig};
use seqkit::training::synthetic_bars;
use seqkit::{Module, Tensor};

fn params(m: &Model) -> Vec<(String, Tensor)> {
    let mut v = Vec::new();
    m.visit("", &mut |n, p| v.push((n.to_string(), p.value.clone())));
    v
}

#[test]
fn checkpoint_round_trip_f64_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::new(&ModelConfig::preset("mini").unwrap(), 11).unwrap();
    m.randomize_head(3);
    save_checkpoint(dir.path(), &m, Dtype::F64).unwrap();
    let manifest = load_manifest(dir.path()).unwrap();
    assert_eq!(manifest.tensors.len(), params(&m).len());
    let back = load_checkpoint(dir.path()).unwrap();
    for ((na, a), (nb, b)) in params(&m).iter().zip(params(&back)) {
        assert_eq!(na, &nb);
        assert_eq!(a.data(), b.data(), "{na}");
    }
    let x = Tensor::full(&[1, 28, 28, 3], 0.5);
    assert_eq!(m.logits(&x).unwrap().data(), back.logits(&x).unwrap().data());
}

#[test]
fn checkpoint_f32_rounds_each_value() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(&ModelConfig::preset("mini").unwrap(), 1).unwrap();
    save_checkpoint(dir.path(), &m, Dtype::F32).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    for ((_, a), (_, b)) in params(&m).iter().zip(params(&back)) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
}

#[test]
fn missing_tensor_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(&ModelConfig::preset("mini").unwrap(), 1).unwrap();
    save_checkpoint(dir.path(), &m, Dtype::F64).unwrap();
    std::fs::remove_file(dir.path().join("head.weight.sqtn")).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_bars(6, 14, 2).unwrap();
    save_dataset(dir.path(), &data, Dtype::F64).unwrap();
    let back = load_dataset(dir.path(), Some(2)).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.num_classes, 2);
    for (a, b) in data.images.iter().zip(&back.images) {
        assert_eq!(a.data(), b.data());
    }
}
