//! Datasets: the synthetic threshold distribution, MNIST (IDX) and CIFAR-10
//! (binary) loaders, feature scaling and five-fold role rotation.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Labeled examples stored one feature row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", features.nrows()),
                labels.len(),
            ));
        }
        if n_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Index {
                index: bad,
                len: n_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features must be finite".into()));
        }
        Ok(Dataset {
            features: features.as_standard_layout().into_owned(),
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Label rule of the threshold distribution: class 1 on [0, α], else 0.
pub fn toy_label(x: f64, alpha: f64) -> usize {
    usize::from((0.0..=alpha).contains(&x))
}

/// `m` draws of x ~ U[−1, 1] labeled by [`toy_label`]. Class 0 stands for
/// the label −1 and class 1 for +1.
pub fn gen_toy<R: Rng + ?Sized>(m: usize, alpha: f64, rng: &mut R) -> Result<Dataset> {
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0.5, 1), got {alpha}"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("toy dataset needs m > 0".into()));
    }
    let xs: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let labels = xs.iter().map(|&x| toy_label(x, alpha)).collect();
    Dataset::new(
        Array2::from_shape_vec((m, 1), xs).expect("m x 1"),
        labels,
        2,
    )
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_SIDE: usize = 28;

fn read_u32_be(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file truncated inside header"))
}

/// Parses MNIST IDX image and label buffers. Features are raw byte values
/// in [0, 255]; see [`scale_features`].
pub fn parse_mnist_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32_be(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "image magic",
            format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let count = read_u32_be(images, 4, "image count")? as usize;
    let rows = read_u32_be(images, 8, "image rows")? as usize;
    let cols = read_u32_be(images, 12, "image cols")? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(Error::format(
            "image dimensions",
            format!("expected 28x28, found {rows}x{cols}"),
        ));
    }

    let label_magic = read_u32_be(labels, 0, "label magic")?;
    if label_magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "label magic",
            format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{label_magic:08x}"),
        ));
    }
    let label_count = read_u32_be(labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::format(
            "label count",
            format!("{label_count} labels for {count} images"),
        ));
    }

    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() < count * pixels {
        return Err(Error::format(
            "image data",
            format!("expected {} bytes, found {}", count * pixels, body.len()),
        ));
    }
    let label_body = &labels[8..];
    if label_body.len() < count {
        return Err(Error::format(
            "label data",
            format!("expected {count} bytes, found {}", label_body.len()),
        ));
    }
    let features: Vec<f64> = body[..count * pixels].iter().map(|&b| f64::from(b)).collect();
    let mut ys = Vec::with_capacity(count);
    for &b in &label_body[..count] {
        if b > 9 {
            return Err(Error::format("label value", format!("{b} is not a digit")));
        }
        ys.push(usize::from(b));
    }
    Dataset::new(
        Array2::from_shape_vec((count, pixels), features).expect("count x pixels"),
        ys,
        10,
    )
}

/// Loads an MNIST image/label file pair with raw [0, 255] features.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_mnist_idx(&images, &labels)
}

const CIFAR_PIXELS: usize = 3072;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

/// Parses CIFAR-10 binary records (1 label byte + 3072 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            "cifar record",
            format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut features = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        if record[0] > 9 {
            return Err(Error::format(
                "cifar label",
                format!("{} is out of range", record[0]),
            ));
        }
        labels.push(usize::from(record[0]));
        features.extend(record[1..].iter().map(|&b| f64::from(b)));
    }
    Ok((features, labels))
}

/// Concatenates CIFAR-10 batch files into one dataset of raw byte features.
pub fn load_cifar10(paths: &[PathBuf]) -> Result<Dataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (f, l) = parse_cifar10(&std::fs::read(path)?)?;
        features.extend(f);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(
        Array2::from_shape_vec((n, CIFAR_PIXELS), features).expect("n x 3072"),
        labels,
        10,
    )
}

/// Train (data_batch_1..5) and test (test_batch) sets from a CIFAR-10
/// binary distribution directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_cifar10(&train)?;
    let test = load_cifar10(&[dir.join("test_batch.bin")])?;
    Ok((train, test))
}

/// Affine map of every feature from [source_min, source_max] to [−1, 1].
pub fn scale_features(ds: &Dataset, source_min: f64, source_max: f64) -> Result<Dataset> {
    if !(source_min < source_max) || !source_min.is_finite() || !source_max.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "degenerate source range [{source_min}, {source_max}]"
        )));
    }
    if source_min == -1.0 && source_max == 1.0 {
        return Ok(ds.clone());
    }
    let width = source_max - source_min;
    let features = ds
        .features
        .mapv(|v| 2.0 * (v - source_min) / width - 1.0);
    Ok(Dataset {
        features,
        labels: ds.labels.clone(),
        n_classes: ds.n_classes,
    })
}

pub const N_FOLDS: usize = 5;

/// Five disjoint index lists covering a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    folds: [Vec<usize>; N_FOLDS],
}

impl FoldSplit {
    pub fn folds(&self) -> &[Vec<usize>; N_FOLDS] {
        &self.folds
    }

    pub fn indices(&self, fold_ids: &[usize]) -> Vec<usize> {
        fold_ids
            .iter()
            .flat_map(|&f| self.folds[f].iter().copied())
            .collect()
    }
}

/// Random permutation of `0..n` cut into five parts whose sizes differ by
/// at most one; the first `n % 5` parts carry the extra element.
pub fn split_folds<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<FoldSplit> {
    if n < N_FOLDS {
        return Err(Error::InvalidInput(format!(
            "need at least {N_FOLDS} examples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / N_FOLDS;
    let extra = n % N_FOLDS;
    let mut folds: [Vec<usize>; N_FOLDS] = Default::default();
    let mut start = 0;
    for (f, fold) in folds.iter_mut().enumerate() {
        let size = base + usize::from(f < extra);
        *fold = order[start..start + size].to_vec();
        start += size;
    }
    Ok(FoldSplit { folds })
}

/// Which folds train, early-stop and validate in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldRoles {
    pub train: [usize; 3],
    pub early_stop: usize,
    pub validation: usize,
}

/// Cyclic role assignment: round t trains on folds t, t+1, t+2 (mod 5),
/// early-stops on t+3 and validates on t+4.
pub fn rotate_roles(round: usize) -> FoldRoles {
    let f = |offset: usize| (round + offset) % N_FOLDS;
    FoldRoles {
        train: [f(0), f(1), f(2)],
        early_stop: f(3),
        validation: f(4),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(count: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        v.extend(count.to_be_bytes());
        v.extend(rows.to_be_bytes());
        v.extend(cols.to_be_bytes());
        v.extend(body);
        v
    }

    fn idx_labels(count: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend(count.to_be_bytes());
        v.extend(body);
        v
    }

    #[test]
    fn toy_labels() {
        assert_eq!(toy_label(0.5, 0.95), 1);
        assert_eq!(toy_label(-0.5, 0.95), 0);
        assert_eq!(toy_label(0.97, 0.95), 0);
        assert_eq!(toy_label(0.0, 0.95), 1);
        assert_eq!(toy_label(0.95, 0.95), 1);
    }

    #[test]
    fn toy_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = gen_toy(1000, 0.95, &mut rng).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.feature_dim(), 1);
        for (x, &y) in ds.features().column(0).iter().zip(ds.labels()) {
            assert!((-1.0..=1.0).contains(x));
            assert_eq!(y, toy_label(*x, 0.95));
        }
        let again = gen_toy(1000, 0.95, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ds, again);
        assert!(gen_toy(10, 0.5, &mut rng).is_err());
        assert!(gen_toy(10, 1.0, &mut rng).is_err());
        assert!(gen_toy(10, 0.4, &mut rng).is_err());
    }

    #[test]
    fn toy_class_fraction_tracks_half_alpha() {
        for seed in 0..5 {
            let ds = gen_toy(30_000, 0.95, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let ones = ds.labels().iter().filter(|&&y| y == 1).count() as f64 / 30_000.0;
            assert!((ones - 0.475).abs() < 0.02, "fraction {ones}");
        }
    }

    #[test]
    fn idx_parse_and_scale() {
        let mut body = vec![0u8; 2 * 784];
        body[1] = 255;
        body[784] = 128;
        let ds = parse_mnist_idx(&idx_images(2, 28, 28, &body), &idx_labels(2, &[7, 0])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.labels(), &[7, 0]);
        let scaled = scale_features(&ds, 0.0, 255.0).unwrap();
        assert_eq!(scaled.features()[[0, 0]], -1.0);
        assert_eq!(scaled.features()[[0, 1]], 1.0);
    }

    #[test]
    fn idx_errors_name_the_field() {
        let good_images = idx_images(1, 28, 28, &[0u8; 784]);
        let good_labels = idx_labels(1, &[3]);

        let mut bad = good_images.clone();
        bad[3] = 0x01;
        let err = parse_mnist_idx(&bad, &good_labels).unwrap_err();
        assert!(err.to_string().contains("image magic"), "{err}");

        let mut bad = good_labels.clone();
        bad[3] = 0x03;
        let err = parse_mnist_idx(&good_images, &bad).unwrap_err();
        assert!(err.to_string().contains("label magic"), "{err}");

        let err = parse_mnist_idx(&idx_images(60_000, 28, 28, &[]), &idx_labels(59_999, &[]))
            .unwrap_err();
        assert!(err.to_string().contains("label count"), "{err}");

        let err = parse_mnist_idx(&good_images[..700], &good_labels).unwrap_err();
        assert!(err.to_string().contains("image data"), "{err}");

        let err = parse_mnist_idx(&good_images[..10], &good_labels).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));

        let err = parse_mnist_idx(&idx_images(1, 32, 32, &[0u8; 1024]), &good_labels).unwrap_err();
        assert!(err.to_string().contains("image dimensions"), "{err}");
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![3u8];
        bytes.extend(vec![255u8; CIFAR_PIXELS]);
        bytes.push(9);
        bytes.extend(vec![0u8; CIFAR_PIXELS]);
        let (f, l) = parse_cifar10(&bytes).unwrap();
        assert_eq!(l, vec![3, 9]);
        assert_eq!(f.len(), 2 * CIFAR_PIXELS);
        assert!(parse_cifar10(&bytes[..100]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(parse_cifar10(&bad).is_err());
    }

    #[test]
    fn scaling_examples_and_inverse() {
        let ds = Dataset::new(
            Array2::from_shape_vec((1, 3), vec![2.0, 10.0, 6.0]).unwrap(),
            vec![0],
            2,
        )
        .unwrap();
        let s = scale_features(&ds, 2.0, 10.0).unwrap();
        assert_eq!(s.features().row(0).to_vec(), vec![-1.0, 1.0, 0.0]);
        let back = s.features().mapv(|v| (v + 1.0) / 2.0 * 8.0 + 2.0);
        for (a, b) in back.iter().zip(ds.features().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(scale_features(&s, -1.0, 1.0).unwrap(), s);
        assert!(scale_features(&ds, 1.0, 1.0).is_err());
        assert!(scale_features(&ds, 2.0, 1.0).is_err());
    }

    #[test]
    fn folds_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let split = split_folds(100, &mut rng).unwrap();
        assert!(split.folds().iter().all(|f| f.len() == 20));
        let mut all = split.indices(&[0, 1, 2, 3, 4]);
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let split = split_folds(101, &mut rng).unwrap();
        let sizes: Vec<usize> = split.folds().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![21, 20, 20, 20, 20]);

        let a = split_folds(57, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = split_folds(57, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(split_folds(4, &mut rng).is_err());
    }

    #[test]
    fn role_rotation() {
        assert_eq!(
            rotate_roles(0),
            FoldRoles { train: [0, 1, 2], early_stop: 3, validation: 4 }
        );
        assert_eq!(
            rotate_roles(1),
            FoldRoles { train: [1, 2, 3], early_stop: 4, validation: 0 }
        );
        assert_eq!(rotate_roles(5), rotate_roles(0));
        for start in 0..5 {
            let mut early = [0; 5];
            let mut val = [0; 5];
            let mut train = [0; 5];
            for t in start..start + 5 {
                let r = rotate_roles(t);
                early[r.early_stop] += 1;
                val[r.validation] += 1;
                for f in r.train {
                    train[f] += 1;
                }
            }
            assert_eq!(early, [1; 5]);
            assert_eq!(val, [1; 5]);
            assert_eq!(train, [3; 5]);
        }
    }
}
