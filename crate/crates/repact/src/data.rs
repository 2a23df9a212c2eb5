//! Dataset ingestion: MNIST-style IDX files, CIFAR-10 binary batches, and a
//! deterministic synthetic pattern generator that writes both formats.
//!
//! Loaders report malformed files with the byte offset of the first problem.
//! Subset selection is a seeded permutation prefix, so a (seed, size) pair
//! always picks the same examples.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 2051; // 0x00000803
pub const IDX_LABEL_MAGIC: u32 = 2049; // 0x00000801
pub const CIFAR_RECORD_BYTES: usize = 3073; // 1 label byte + 3·32·32 pixels
pub const NUM_CLASSES: usize = 10;

/// One split: normalized images in `[0,1]` shaped `[N, C, H, W]` plus labels.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a batch `[B, C, H, W]` with its labels as usize.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let shape = self.images.shape();
        let sample = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i] as usize);
        }
        let batch = Tensor::new(
            vec![indices.len(), shape[1], shape[2], shape[3]],
            data,
        )
        .expect("batch shape is valid by construction");
        (batch, labels)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    /// `[C, H, W]` of one example.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.train.images.shape();
        [s[1], s[2], s[3]]
    }
}

// ---------------------------------------------------------------------------
// IDX (MNIST layout)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// The canonical unpacked file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }
}

fn be_u32(bytes: &[u8], off: usize) -> u32 {
    u32::from_be_bytes(bytes[off..off + 4].try_into().expect("bounds checked"))
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            "truncated IDX image header (need 16 bytes)",
        ));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let n = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated image data: need {need} bytes, file has {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            "truncated IDX label header (need 8 bytes)",
        ));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let n = be_u32(&bytes, 4) as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated label data: need {need} bytes, file has {}", bytes.len()),
        ));
    }
    let labels = bytes[8..need].to_vec();
    for (i, &l) in labels.iter().enumerate() {
        if l > 9 {
            return Err(Error::format(
                path,
                (8 + i) as u64,
                format!("label {l} out of range [0, 9]"),
            ));
        }
    }
    Ok(labels)
}

fn idx_split(
    images: &Path,
    labels: &Path,
    subset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSplit> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(Error::format(
            labels,
            4,
            format!("label count {} does not match image count {n}", raw_labels.len()),
        ));
    }
    let picks = subset_indices(n, subset, rng)?;
    let sample = rows * cols;
    let mut data = Vec::with_capacity(picks.len() * sample);
    let mut out_labels = Vec::with_capacity(picks.len());
    for &i in &picks {
        data.extend(
            pixels[i * sample..(i + 1) * sample]
                .iter()
                .map(|&b| b as f32 / 255.0),
        );
        out_labels.push(raw_labels[i]);
    }
    Ok(DatasetSplit {
        images: Tensor::new(vec![picks.len(), 1, rows, cols], data)?,
        labels: out_labels,
    })
}

/// Load the four IDX files, taking seed-deterministic subsets of each split.
pub fn load_mnist(
    files: &MnistFiles,
    train_subset: usize,
    test_subset: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7374); // "test"
    Ok(Dataset {
        train: idx_split(&files.train_images, &files.train_labels, train_subset, &mut train_rng)?,
        test: idx_split(&files.test_images, &files.test_labels, test_subset, &mut test_rng)?,
    })
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Cifar10Files {
    pub train_batches: Vec<PathBuf>,
    pub test_batch: PathBuf,
}

impl Cifar10Files {
    /// The canonical batch names present inside `dir` (`data_batch_1.bin` …
    /// `data_batch_5.bin`, any subset of which may exist, plus
    /// `test_batch.bin`).
    pub fn in_dir(dir: &Path) -> Self {
        let train_batches = (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect();
        Cifar10Files {
            train_batches,
            test_batch: dir.join("test_batch.bin"),
        }
    }
}

/// Parse one 3073-byte-record batch file into (labels, pixel bytes).
fn read_cifar_batch(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES;
        return Err(Error::format(
            path,
            (whole * CIFAR_RECORD_BYTES) as u64,
            format!(
                "file length {} is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for i in 0..n {
        let off = i * CIFAR_RECORD_BYTES;
        let label = bytes[off];
        if label > 9 {
            return Err(Error::format(
                path,
                off as u64,
                format!("label {label} out of range [0, 9]"),
            ));
        }
        labels.push(label);
        pixels.extend_from_slice(&bytes[off + 1..off + CIFAR_RECORD_BYTES]);
    }
    Ok((labels, pixels))
}

fn cifar_split(
    paths: &[PathBuf],
    subset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSplit> {
    if paths.is_empty() {
        return Err(Error::invalid("no CIFAR-10 batch files found"));
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        let (l, p) = read_cifar_batch(path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let picks = subset_indices(labels.len(), subset, rng)?;
    let sample = CIFAR_RECORD_BYTES - 1;
    let mut data = Vec::with_capacity(picks.len() * sample);
    let mut out_labels = Vec::with_capacity(picks.len());
    for &i in &picks {
        data.extend(
            pixels[i * sample..(i + 1) * sample]
                .iter()
                .map(|&b| b as f32 / 255.0),
        );
        out_labels.push(labels[i]);
    }
    Ok(DatasetSplit {
        images: Tensor::new(vec![picks.len(), 3, 32, 32], data)?,
        labels: out_labels,
    })
}

pub fn load_cifar10(
    files: &Cifar10Files,
    train_subset: usize,
    test_subset: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7374);
    Ok(Dataset {
        train: cifar_split(&files.train_batches, train_subset, &mut train_rng)?,
        test: cifar_split(std::slice::from_ref(&files.test_batch), test_subset, &mut test_rng)?,
    })
}

fn subset_indices(n: usize, subset: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if subset == 0 || subset > n {
        return Err(Error::invalid(format!(
            "subset size {subset} out of range 1..={n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    indices.truncate(subset);
    Ok(indices)
}

// ---------------------------------------------------------------------------
// synthetic pattern dataset
// ---------------------------------------------------------------------------

/// Deterministic 10-class image generator written in the real container
/// formats, so the full pipeline (loader included) runs without external
/// downloads. Each class is an oriented grating (distinct angle and spatial
/// frequency); samples get a random phase, contrast jitter, and pixel noise.
/// Orientation is a local feature, so a small CNN with global pooling can
/// learn it, and the noise keeps accuracy off the ceiling.
pub mod synth {
    use super::*;
    use std::io::Write;

    const SIDE: usize = 28;
    const NOISE: f64 = 0.52;

    fn render(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let theta = std::f64::consts::PI * class as f64 / NUM_CLASSES as f64;
        let cycles = 3.0 + 0.2 * class as f64;
        let freq = 2.0 * std::f64::consts::PI * cycles / side as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        let phase = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));
        let contrast = rng.gen_range(0.055..0.095);
        let mut out = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let along = x as f64 * cos_t + y as f64 * sin_t;
                let base = 0.5 + contrast * (freq * along + phase).sin();
                let noisy = base + rng.gen_range(-NOISE..NOISE);
                out.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(path, e))
    }

    fn idx_images(samples: &[Vec<u8>], side: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + samples.len() * side * side);
        out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&(samples.len() as u32).to_be_bytes());
        out.extend_from_slice(&(side as u32).to_be_bytes());
        out.extend_from_slice(&(side as u32).to_be_bytes());
        for s in samples {
            out.extend_from_slice(s);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn generate(n: usize, side: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<u8>>, Vec<u8>) {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % NUM_CLASSES) as u8;
            images.push(render(class as usize, side, rng));
            labels.push(class);
        }
        (images, labels)
    }

    /// Write `train-images-idx3-ubyte` etc. into `dir`.
    pub fn write_mnist_format(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut train_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut test_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let (train_images, train_labels) = generate(n_train, SIDE, &mut train_rng);
        let (test_images, test_labels) = generate(n_test, SIDE, &mut test_rng);
        let files = MnistFiles::in_dir(dir);
        write_file(&files.train_images, &idx_images(&train_images, SIDE))?;
        write_file(&files.train_labels, &idx_labels(&train_labels))?;
        write_file(&files.test_images, &idx_images(&test_images, SIDE))?;
        write_file(&files.test_labels, &idx_labels(&test_labels))?;
        Ok(())
    }

    /// Write `data_batch_1.bin` and `test_batch.bin` in the 3073-byte record
    /// layout.
    pub fn write_cifar10_format(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let side = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let batch = |n: usize, rng: &mut ChaCha8Rng| -> Vec<u8> {
            let mut out = Vec::with_capacity(n * CIFAR_RECORD_BYTES);
            for i in 0..n {
                let class = (i % NUM_CLASSES) as u8;
                out.push(class);
                let gray = render(class as usize, side, rng);
                // three identical planes: grayscale in RGB clothing
                for _ in 0..3 {
                    out.extend_from_slice(&gray);
                }
            }
            out
        };
        let train = batch(n_train, &mut rng);
        let test = batch(n_test, &mut rng);
        write_file(&dir.join("data_batch_1.bin"), &train)?;
        write_file(&dir.join("test_batch.bin"), &test)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn synth_idx_round_trip() {
        let dir = tmp();
        synth::write_mnist_format(dir.path(), 40, 20, 7).unwrap();
        let files = MnistFiles::in_dir(dir.path());
        let ds = load_mnist(&files, 30, 20, 0).unwrap();
        assert_eq!(ds.train.images.shape(), &[30, 1, 28, 28]);
        assert_eq!(ds.test.images.shape(), &[20, 1, 28, 28]);
        assert!(ds.train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.train.labels.iter().all(|&l| l <= 9));
    }

    #[test]
    fn subset_selection_is_seed_deterministic() {
        let dir = tmp();
        synth::write_mnist_format(dir.path(), 50, 10, 3).unwrap();
        let files = MnistFiles::in_dir(dir.path());
        let a = load_mnist(&files, 20, 10, 0).unwrap();
        let b = load_mnist(&files, 20, 10, 0).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.train.images.data(), b.train.images.data());
        let c = load_mnist(&files, 20, 10, 1).unwrap();
        assert_ne!(a.train.labels, c.train.labels);
    }

    #[test]
    fn corrupt_magic_is_reported_at_byte_zero() {
        let dir = tmp();
        synth::write_mnist_format(dir.path(), 12, 10, 0).unwrap();
        let files = MnistFiles::in_dir(dir.path());
        let mut bytes = fs::read(&files.train_images).unwrap();
        bytes[1] = 0xff;
        fs::write(&files.train_images, &bytes).unwrap();
        let err = load_mnist(&files, 10, 10, 0).unwrap_err();
        match err {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"), "{message}");
            }
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_image_file_names_the_offset() {
        let dir = tmp();
        synth::write_mnist_format(dir.path(), 12, 10, 0).unwrap();
        let files = MnistFiles::in_dir(dir.path());
        let bytes = fs::read(&files.train_images).unwrap();
        fs::write(&files.train_images, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_mnist(&files, 10, 10, 0).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, (bytes.len() - 5) as u64),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_names_its_byte() {
        let dir = tmp();
        synth::write_mnist_format(dir.path(), 12, 10, 0).unwrap();
        let files = MnistFiles::in_dir(dir.path());
        let mut bytes = fs::read(&files.train_labels).unwrap();
        bytes[8 + 3] = 11;
        fs::write(&files.train_labels, &bytes).unwrap();
        let err = load_mnist(&files, 10, 10, 0).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 11),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tmp();
        let files = MnistFiles::in_dir(dir.path());
        assert!(matches!(
            load_mnist(&files, 1, 1, 0).unwrap_err(),
            Error::Io { .. }
        ));
    }

    #[test]
    fn cifar_record_layout_and_truncation() {
        let dir = tmp();
        synth::write_cifar10_format(dir.path(), 25, 10, 0).unwrap();
        let files = Cifar10Files::in_dir(dir.path());
        assert_eq!(files.train_batches.len(), 1);
        let meta = fs::metadata(&files.train_batches[0]).unwrap();
        assert_eq!(meta.len() as usize, 25 * CIFAR_RECORD_BYTES);

        let ds = load_cifar10(&files, 20, 10, 0).unwrap();
        assert_eq!(ds.train.images.shape(), &[20, 3, 32, 32]);

        // chop mid-record
        let bytes = fs::read(&files.train_batches[0]).unwrap();
        fs::write(&files.train_batches[0], &bytes[..bytes.len() - 10]).unwrap();
        let err = load_cifar10(&files, 10, 10, 0).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, (24 * CIFAR_RECORD_BYTES) as u64),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn subset_bounds_are_validated() {
        let dir = tmp();
        synth::write_mnist_format(dir.path(), 12, 10, 0).unwrap();
        let files = MnistFiles::in_dir(dir.path());
        assert!(load_mnist(&files, 0, 10, 0).is_err());
        assert!(load_mnist(&files, 13, 10, 0).is_err());
    }
}
