use std::path::PathBuf;

use sparselab::data::{evaluate, load_mnist, make_synthetic, make_synthetic_with, parse_idx_images, parse_idx_labels};
use sparselab::train::{train, LrPolicy, TrainConfig};
use sparselab::NetworkSpec;

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

/// First training image read straight from the file with nothing but byte
/// offsets, standardized and summed.
fn first_image_sum(dir: &std::path::Path) -> f64 {
    let bytes = std::fs::read(dir.join("train-images-idx3-ubyte")).unwrap();
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    bytes[16..16 + 784]
        .iter()
        .map(|&p| (p as f64 / 255.0 - 0.1307) / 0.3081)
        .sum()
}

#[test]
fn mnist_counts_and_first_image() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST files not found, skipping");
        return;
    };
    let data = load_mnist(&dir).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (60_000, 10_000));
    assert_eq!(data.train.example_shape, vec![1, 28, 28]);
    assert!(data.train.labels.iter().chain(&data.test.labels).all(|&l| l < 10));
    let got: f64 = data.train.example(0).iter().sum();
    let want = first_image_sum(&dir);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!((got - 17.76168929110103).abs() < 1e-9);
}

#[test]
fn idx_parse_errors() {
    let p = PathBuf::from("x");
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4];
    assert_eq!(parse_idx_images(&img, &p).unwrap().1, 1);
    img[3] = 4;
    assert!(parse_idx_images(&img, &p).is_err());
    img[3] = 3;
    img.pop();
    assert!(parse_idx_images(&img, &p).is_err());
    assert!(parse_idx_images(&img[..10], &p).is_err());
    let lab = [0, 0, 8, 1, 0, 0, 0, 3, 1, 2];
    assert!(parse_idx_labels(&lab, &p).is_err());
    let bad_magic = [0, 0, 8, 3, 0, 0, 0, 0];
    assert!(parse_idx_labels(&bad_magic, &p).is_err());
}

#[test]
fn corrupted_mnist_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train-images-idx3-ubyte"), [0u8, 0, 8, 9, 0, 0, 0, 0]).unwrap();
    let err = load_mnist(dir.path()).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
}

#[test]
fn synthetic_is_deterministic_with_uniform_priors() {
    let a = make_synthetic(103, 4, 6, 9).unwrap();
    let b = make_synthetic(103, 4, 6, 9).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_ne!(a.train, make_synthetic(103, 4, 6, 10).unwrap().train);
    let mut counts = [0usize; 4];
    for &y in &a.train.labels {
        counts[y] += 1;
    }
    assert_eq!(counts, [26, 26, 26, 25]);
    assert!(make_synthetic(10, 1, 3, 0).is_err());
}

#[test]
fn separable_blobs_are_learned_quickly() {
    let data = make_synthetic_with(500, 4, 10, 10.0, 3).unwrap();
    let mut cfg = TrainConfig::new(NetworkSpec::mlp(&[10, 4], true), 1);
    cfg.epochs = 20;
    cfg.batch_size = 50;
    cfg.lr = 0.05;
    cfg.lr_policy = LrPolicy::Constant;
    cfg.weight_decay = 0.0;
    let run = train(&cfg, &data).unwrap();
    assert!(run.total_steps <= 200);
    let acc = evaluate(&run.net, &data.train).unwrap().accuracy;
    assert!(acc >= 0.99, "{acc}");
}
