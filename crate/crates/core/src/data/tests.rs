use std::collections::BTreeSet;
use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;

use super::*;

fn idx_images(pixels: &[u8], n: u32, side: u32) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IDX_IMAGES, n, side, side] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IDX_LABELS, labels.len() as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

fn repo_mnist() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k")
}

#[test]
fn idx_pixel_scaling_and_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut px = vec![0u8; 2 * 784];
    px[0] = 255;
    px[784 + 5] = 51;
    let i = write(dir.path(), "i", &idx_images(&px, 2, 28));
    let l = write(dir.path(), "l", &idx_labels(&[3, 9]));
    let ds = load_idx(DatasetKind::Mnist, Split::Train, &i, &l).unwrap();
    assert_eq!(ds.images().shape(), &[2, 1, 28, 28]);
    assert_eq!(ds.image(0)[0], 1.0);
    assert_eq!(ds.image(1)[5], 0.2);
    assert_eq!(ds.labels().unwrap(), &[3, 9]);
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let px = vec![7u8; 3 * 784];
    let good = idx_images(&px, 3, 28);
    let labels = write(dir.path(), "l", &idx_labels(&[1, 2, 3]));

    let truncated = write(dir.path(), "t", &good[..good.len() - 10]);
    let err = load_idx(DatasetKind::Mnist, Split::Test, &truncated, &labels).unwrap_err();
    assert!(matches!(err, Error::Integrity { .. }), "{err}");

    let mut swapped = good.clone();
    swapped[3] = 0x01;
    let bad_magic = write(dir.path(), "m", &swapped);
    let err = load_idx(DatasetKind::Mnist, Split::Test, &bad_magic, &labels).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");

    let images = write(dir.path(), "i", &good);
    let short = write(dir.path(), "s", &idx_labels(&[1, 2]));
    let err = load_idx(DatasetKind::Mnist, Split::Test, &images, &short).unwrap_err();
    assert!(matches!(err, Error::Integrity { .. }), "{err}");

    let out_of_range = write(dir.path(), "r", &idx_labels(&[1, 2, 10]));
    let err = load_idx(DatasetKind::Mnist, Split::Test, &images, &out_of_range).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn gzip_and_plain_load_identically() {
    let dir = tempfile::tempdir().unwrap();
    let px: Vec<u8> = (0..4 * 784).map(|i| (i % 256) as u8).collect();
    let raw = idx_images(&px, 4, 28);
    let mut gz = GzEncoder::new(Vec::new(), Compression::default());
    gz.write_all(&raw).unwrap();
    let plain = write(dir.path(), "p", &raw);
    let packed = write(dir.path(), "p.gz", &gz.finish().unwrap());
    let labels = write(dir.path(), "l", &idx_labels(&[0, 1, 2, 3]));
    let a = load_idx(DatasetKind::FashionMnist, Split::Train, &plain, &labels).unwrap();
    let b = load_idx(DatasetKind::FashionMnist, Split::Train, &packed, &labels).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bundled_mnist_subset_loads() {
    let train = Dataset::load(DatasetKind::Mnist, &repo_mnist(), Split::Train).unwrap();
    let test = Dataset::load(DatasetKind::Mnist, &repo_mnist(), Split::Test).unwrap();
    assert_eq!(train.len(), 8000);
    assert_eq!(test.len(), 2000);
    assert_eq!(train.image_shape(), &[1, 28, 28]);
    let mut hist = [0usize; 10];
    for &l in test.labels().unwrap() {
        hist[l] += 1;
    }
    assert_eq!(hist, [200; 10]);
    // loading is idempotent
    assert_eq!(
        train,
        Dataset::load(DatasetKind::Mnist, &repo_mnist(), Split::Train).unwrap()
    );
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(DatasetKind::Mnist, dir.path(), Split::Train).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn usps_standard_archive_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let mut total = 0;
    let mut seen = BTreeSet::new();
    for (split, n) in [(Split::Train, 7291usize), (Split::Test, 2007)] {
        let px: Vec<f32> = (0..n * 256).map(|i| (i % 97) as f32 / 96.0).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        write(
            dir.path(),
            &format!("usps-{split}.bin"),
            &encode_usps(&px, &labels).unwrap(),
        );
        let ds = Dataset::load(DatasetKind::Usps, dir.path(), split).unwrap();
        assert_eq!(ds.image_shape(), &[1, 16, 16]);
        let data = ds.images().data();
        assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(data[96], 1.0);
        seen.extend(ds.labels().unwrap().iter().copied());
        total += ds.len();
    }
    assert_eq!(total, 9298);
    assert_eq!(seen.len(), 10);
}

#[test]
fn usps_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = encode_usps(&[0.5; 512], &[1, 2]).unwrap();
    bytes.pop();
    let p = write(dir.path(), "a", &bytes);
    assert!(matches!(load_usps(&p, Split::Train), Err(Error::Integrity { .. })));
    let p = write(dir.path(), "b", &encode_usps(&[-0.5; 256], &[1]).unwrap());
    assert!(matches!(load_usps(&p, Split::Train), Err(Error::Data(_))));
}

#[test]
fn cifar_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![0u8; 2 * CIFAR_RECORD];
    rec[0] = 6;
    rec[1] = 255; // red (0, 0)
    rec[1 + 1024] = 51; // green (0, 0)
    rec[CIFAR_RECORD] = 2;
    let p = write(dir.path(), "test_batch.bin", &rec);
    let ds = Dataset::load(DatasetKind::Cifar10, dir.path(), Split::Test).unwrap();
    assert_eq!(ds.images().shape(), &[2, 3, 32, 32]);
    assert_eq!(ds.labels().unwrap(), &[6, 2]);
    assert_eq!(ds.image(0)[0], 1.0);
    assert_eq!(ds.image(0)[1024], 0.2);
    fs::write(&p, &rec[..CIFAR_RECORD + 5]).unwrap();
    assert!(matches!(load_cifar(&[p], Split::Test), Err(Error::Integrity { .. })));
}

fn noise(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn clustering_augmentation_is_identity() {
    let img = noise(1, &[1, 28, 28]);
    for seed in 0..5 {
        let out = augment(&img, Task::Clustering, DatasetKind::Mnist, seed).unwrap();
        assert_eq!(out, img);
    }
}

#[test]
fn augmentation_is_seed_deterministic() {
    let img = noise(2, &[3, 32, 32]);
    let a = augment(&img, Task::Classification, DatasetKind::Cifar10, 11).unwrap();
    let b = augment(&img, Task::Classification, DatasetKind::Cifar10, 11).unwrap();
    assert_eq!(a, b);
    let differs = (0..20).any(|s| augment(&img, Task::Classification, DatasetKind::Cifar10, s).unwrap() != a);
    assert!(differs);
}

#[test]
fn flip_is_an_involution() {
    let img = noise(3, &[3, 5, 7]);
    let once = flip_horizontal(&img).unwrap();
    assert_ne!(once, img);
    assert_eq!(once.data()[0], img.data()[6]);
    assert_eq!(flip_horizontal(&once).unwrap(), img);
}

#[test]
fn digits_are_never_flipped() {
    let policy = Augmentation::for_task(Task::Classification, DatasetKind::Mnist).unwrap();
    assert!(!policy.flip);
    assert!(Augmentation::for_task(Task::Classification, DatasetKind::Usps).is_some_and(|a| !a.flip));
    assert!(Augmentation::for_task(Task::Classification, DatasetKind::Cifar10).is_some_and(|a| a.flip));
    // A vertical stripe at column 10 may shift by up to 4 but a mirror
    // would put it at column 17.
    let mut img = Tensor::zeros(&[1, 28, 28]);
    for y in 0..28 {
        img.data_mut()[y * 28 + 10] = 1.0;
    }
    for seed in 0..50 {
        let out = policy.apply(&img, seed).unwrap();
        let col = (0..28).find(|&x| out.data()[14 * 28 + x] == 1.0).unwrap();
        assert!((6..=14).contains(&col), "seed {seed}: stripe at column {col}");
    }
}

#[test]
fn shift_examples() {
    let img = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(shift(&img, 0, 0).unwrap(), img);
    assert_eq!(shift(&img, 1, 0).unwrap().data(), &[3.0, 4.0, 0.0, 0.0]);
    assert_eq!(shift(&img, 0, -1).unwrap().data(), &[0.0, 1.0, 0.0, 3.0]);
}

#[test]
fn batch_sizes() {
    let it = BatchIterator::new(3, 0, false).unwrap();
    let sizes: Vec<usize> = it.epoch(10, 0).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, [3, 3, 3, 1]);
    assert_eq!(it.batches_per_epoch(10), 4);
    let dropping = BatchIterator::new(3, 0, true).unwrap();
    assert_eq!(dropping.epoch(10, 0).unwrap().len(), 3);
    assert_eq!(dropping.batches_per_epoch(10), 3);
    assert!(matches!(it.epoch(2, 0), Err(Error::Config(_))));
    assert!(BatchIterator::new(0, 0, false).is_err());
}

#[test]
fn batches_cover_everything_and_repeat_per_seed() {
    let it = BatchIterator::new(4, 42, false).unwrap();
    let e0 = it.epoch(37, 0).unwrap();
    assert_eq!(e0, it.epoch(37, 0).unwrap());
    assert_ne!(e0, it.epoch(37, 1).unwrap());
    let all: BTreeSet<usize> = e0.iter().flatten().copied().collect();
    assert_eq!(all, (0..37).collect());
    assert_eq!(e0.iter().map(Vec::len).sum::<usize>(), 37);
}

#[test]
fn materialized_batches_match_dataset_rows() {
    let ds = Dataset::load(DatasetKind::Mnist, &repo_mnist(), Split::Test)
        .unwrap()
        .take(20)
        .unwrap();
    let it = BatchIterator::new(8, 5, true).unwrap();
    let got: Vec<Batch> = batches(&ds, &it, 0, None).unwrap().collect::<Result<_>>().unwrap();
    assert_eq!(got.len(), 2);
    for b in &got {
        assert_eq!(b.images.shape(), &[8, 1, 28, 28]);
        for (row, &i) in b.indices.iter().enumerate() {
            assert_eq!(&b.images.data()[row * 784..(row + 1) * 784], ds.image(i));
            assert_eq!(b.labels.as_ref().unwrap()[row], ds.labels().unwrap()[i]);
        }
    }
}
