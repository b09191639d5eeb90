//! Dataset ingestion: MNIST IDX files, 2x2 mean-pool downsampling, a seeded
//! keyword-sequence task, and a small binary cache for both dataset kinds.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CACHE_MAGIC: &[u8; 8] = b"LRPDSET\x01";
const CACHE_KIND_IMAGES: u8 = 1;
const CACHE_KIND_SEQUENCES: u8 = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("byte offset {offset}: bad IDX magic 0x{found:08x} (expected 0x00000803 images or 0x00000801 labels)")]
    BadMagic { offset: usize, found: u32 },
    #[error("byte offset {offset}: truncated {what}, expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("byte offset {offset}: IDX dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { offset: usize, dims: Vec<u32> },
    #[error("byte offset {offset}: {extra} trailing bytes after the IDX payload")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("expected a {expected:?} image, got {actual:?}")]
    BadImageShape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid synthetic task parameters: {0}")]
    BadParameters(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("not a dataset cache file: {0}")]
    BadCache(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Decoded content of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Images scaled from 0..255 to [0, 1].
    Images(Vec<Matrix>),
    Labels(Vec<u8>),
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            offset,
            what,
            expected: 4,
            actual: bytes.len().saturating_sub(offset),
        })
}

/// Parses an uncompressed IDX byte buffer (u8 images or u8 labels).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32_be(bytes, 0, "magic number")?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        found => return Err(DataError::BadMagic { offset: 0, found }),
    };
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(read_u32_be(bytes, 4 + 4 * d, "dimension header")?);
    }
    let header = 4 + 4 * ndims;
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| DataError::DimensionOverflow {
            offset: 4,
            dims: dims.clone(),
        })?;
    let available = bytes.len() - header;
    if available < payload {
        return Err(DataError::Truncated {
            offset: header,
            what: "payload",
            expected: payload,
            actual: available,
        });
    }
    if available > payload {
        return Err(DataError::TrailingBytes {
            offset: header + payload,
            extra: available - payload,
        });
    }
    let body = &bytes[header..];
    if ndims == 1 {
        return Ok(IdxData::Labels(body.to_vec()));
    }
    let (rows, cols) = (dims[1] as usize, dims[2] as usize);
    if rows == 0 || cols == 0 {
        return Ok(IdxData::Images(Vec::new()));
    }
    let images = body
        .chunks_exact(rows * cols)
        .map(|px| {
            let data = px.iter().map(|&b| f64::from(b) / 255.0).collect();
            Matrix::new(rows, cols, data).expect("chunk length matches image size")
        })
        .collect();
    Ok(IdxData::Images(images))
}

/// Inverse of [`parse_idx`]. Pixel values are quantized with `round(v * 255)`.
pub fn serialize_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Labels(labels) => {
            out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
        IdxData::Images(images) => {
            let (rows, cols) = images.first().map_or((0, 0), Matrix::shape);
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for d in [images.len(), rows, cols] {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            for img in images {
                out.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
            }
        }
    }
    out
}

/// Reads an IDX file, transparently gunzipping `.gz` content.
pub fn read_idx_file(path: &Path) -> Result<IdxData> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut bytes = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        parse_idx(&bytes)
    } else {
        parse_idx(&raw)
    }
}

/// 2x2 mean pooling of a 28x28 image.
pub fn downsample_14(img: &Matrix) -> Result<Matrix> {
    if img.shape() != (28, 28) {
        return Err(DataError::BadImageShape {
            expected: (28, 28),
            actual: img.shape(),
        });
    }
    let mut out = Matrix::zeros(14, 14);
    for r in 0..14 {
        for c in 0..14 {
            let s = img.get(2 * r, 2 * c)
                + img.get(2 * r, 2 * c + 1)
                + img.get(2 * r + 1, 2 * c)
                + img.get(2 * r + 1, 2 * c + 1);
            out.set(r, c, s / 4.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// 14x14 images with pixels in [0, 1].
    pub images: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl ImageDataset {
    pub fn new(images: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(DataError::Io {
        path: plain,
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (plain or .gz)"),
    })
}

/// Loads one MNIST split from the standard file names in `dir` and downsamples to 14x14.
pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<ImageDataset> {
    let prefix = split.prefix();
    let images = match read_idx_file(&locate(dir, &format!("{prefix}-images-idx3-ubyte"))?)? {
        IdxData::Images(images) => images,
        IdxData::Labels(_) => {
            return Err(DataError::BadMagic {
                offset: 0,
                found: IDX_LABELS_MAGIC,
            })
        }
    };
    let labels = match read_idx_file(&locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?)? {
        IdxData::Labels(labels) => labels,
        IdxData::Images(_) => {
            return Err(DataError::BadMagic {
                offset: 0,
                found: IDX_IMAGES_MAGIC,
            })
        }
    };
    let small = images.iter().map(downsample_14).collect::<Result<Vec<_>>>()?;
    ImageDataset::new(small, labels.into_iter().map(usize::from).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits off the first `round(frac * n)` examples as the training part.
    pub fn split(&self, train_frac: f64) -> (SequenceDataset, SequenceDataset) {
        let cut = ((self.len() as f64) * train_frac).round() as usize;
        let part = |range: std::ops::Range<usize>| SequenceDataset {
            sequences: self.sequences[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            ..*self
        };
        (part(0..cut), part(cut..self.len()))
    }

    /// Position of the keyword token (ids below `num_classes`) in example `i`.
    pub fn keyword_position(&self, i: usize) -> Option<usize> {
        self.sequences[i].iter().position(|&t| t < self.num_classes)
    }
}

/// Keyword task: token ids `0..classes` are keywords (id == class), the rest are
/// filler. Each sequence holds exactly one keyword at a random position.
/// Labels cycle through the classes before shuffling, so class counts differ by
/// at most one.
pub fn gen_synthetic(seed: u64, n: usize, vocab: usize, seq_len: usize, classes: usize) -> Result<SequenceDataset> {
    if classes < 2 {
        return Err(DataError::BadParameters(format!("need at least 2 classes, got {classes}")));
    }
    if vocab < classes + 2 {
        return Err(DataError::BadParameters(format!(
            "vocab {vocab} must be at least classes + 2 = {}",
            classes + 2
        )));
    }
    if seq_len < 4 {
        return Err(DataError::BadParameters(format!("seq_len {seq_len} must be at least 4")));
    }
    if n == 0 {
        return Err(DataError::BadParameters("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let sequences = labels
        .iter()
        .map(|&label| {
            let mut seq: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(classes..vocab)).collect();
            seq[rng.gen_range(0..seq_len)] = label;
            seq
        })
        .collect();
    Ok(SequenceDataset {
        sequences,
        labels,
        vocab_size: vocab,
        seq_len,
        num_classes: classes,
    })
}

// Cache layout (all integers little-endian u64 unless noted):
//   magic "LRPDSET\x01", kind byte (1 = images, 2 = sequences), then
//   images:    count, rows, cols, count * rows * cols f64 pixels, count labels
//   sequences: vocab, seq_len, classes, count, count * seq_len token ids, count labels

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(DataError::Truncated {
            offset: self.pos,
            what,
            expected: n,
            actual: self.bytes.len().saturating_sub(self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &'static str) -> Result<usize> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn encode_image_cache(ds: &ImageDataset) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    out.push(CACHE_KIND_IMAGES);
    let (rows, cols) = ds.images.first().map_or((0, 0), Matrix::shape);
    put_u64(&mut out, ds.len());
    put_u64(&mut out, rows);
    put_u64(&mut out, cols);
    for img in &ds.images {
        for v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in &ds.labels {
        put_u64(&mut out, l);
    }
    out
}

pub fn encode_sequence_cache(ds: &SequenceDataset) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    out.push(CACHE_KIND_SEQUENCES);
    for v in [ds.vocab_size, ds.seq_len, ds.num_classes, ds.len()] {
        put_u64(&mut out, v);
    }
    for seq in &ds.sequences {
        for &t in seq {
            put_u64(&mut out, t);
        }
    }
    for &l in &ds.labels {
        put_u64(&mut out, l);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum CachedDataset {
    Images(ImageDataset),
    Sequences(SequenceDataset),
}

pub fn decode_cache(bytes: &[u8]) -> Result<CachedDataset> {
    if bytes.len() < 9 || &bytes[..8] != CACHE_MAGIC {
        return Err(DataError::BadCache("missing LRPDSET header".into()));
    }
    let mut cur = Cursor { bytes, pos: 9 };
    let ds = match bytes[8] {
        CACHE_KIND_IMAGES => {
            let count = cur.u64("image count")?;
            let rows = cur.u64("image rows")?;
            let cols = cur.u64("image cols")?;
            let mut images = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                let data = (0..rows * cols).map(|_| cur.f64("pixels")).collect::<Result<Vec<_>>>()?;
                images.push(Matrix::new(rows, cols, data).map_err(|e| DataError::BadCache(e.to_string()))?);
            }
            let labels = (0..count).map(|_| cur.u64("labels")).collect::<Result<Vec<_>>>()?;
            CachedDataset::Images(ImageDataset::new(images, labels)?)
        }
        CACHE_KIND_SEQUENCES => {
            let vocab_size = cur.u64("vocab")?;
            let seq_len = cur.u64("seq_len")?;
            let num_classes = cur.u64("classes")?;
            let count = cur.u64("count")?;
            let sequences = (0..count)
                .map(|_| (0..seq_len).map(|_| cur.u64("tokens")).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let labels = (0..count).map(|_| cur.u64("labels")).collect::<Result<Vec<_>>>()?;
            CachedDataset::Sequences(SequenceDataset {
                sequences,
                labels,
                vocab_size,
                seq_len,
                num_classes,
            })
        }
        other => return Err(DataError::BadCache(format!("unknown dataset kind {other}"))),
    };
    if cur.pos != bytes.len() {
        return Err(DataError::TrailingBytes {
            offset: cur.pos,
            extra: bytes.len() - cur.pos,
        });
    }
    Ok(ds)
}

pub fn write_cache(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_cache(path: &Path) -> Result<CachedDataset> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn image_file(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(payload);
        bytes
    }

    #[test]
    fn parses_two_28x28_images() {
        let payload: Vec<u8> = (0..1568).map(|i| (i % 256) as u8).collect();
        let bytes = image_file(2, 28, 28, &payload);
        assert_eq!(u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]), 2051);
        let IdxData::Images(images) = parse_idx(&bytes).unwrap() else {
            panic!("expected images")
        };
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].shape(), (28, 28));
        assert_eq!(images[0].get(0, 1), 1.0 / 255.0);
        assert_eq!(images[1].get(0, 0), f64::from((784 % 256) as u8) / 255.0);
    }

    #[test]
    fn parses_labels() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2049u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[7, 2, 1]);
        assert_eq!(parse_idx(&bytes).unwrap(), IdxData::Labels(vec![7, 2, 1]));
    }

    #[test]
    fn truncated_payload_reports_lengths() {
        let bytes = image_file(1, 28, 28, &[0u8; 783]);
        let err = parse_idx(&bytes).unwrap_err();
        assert!(matches!(
            err,
            DataError::Truncated {
                offset: 16,
                expected: 784,
                actual: 783,
                ..
            }
        ));
        let msg = err.to_string();
        assert!(msg.contains("784") && msg.contains("783"), "{msg}");
    }

    #[test]
    fn rejects_bad_magic_and_overflow() {
        let mut bytes = image_file(1, 1, 1, &[0]);
        bytes[3] = 0x04;
        assert!(matches!(parse_idx(&bytes), Err(DataError::BadMagic { found: 0x804, .. })));
        let huge = image_file(u32::MAX, u32::MAX, u32::MAX, &[]);
        if usize::BITS == 64 {
            assert!(matches!(parse_idx(&huge), Err(DataError::DimensionOverflow { .. })));
        }
        assert!(matches!(parse_idx(&[0, 0]), Err(DataError::Truncated { offset: 0, .. })));
    }

    #[test]
    fn downsample_examples() {
        let c = Matrix::filled(28, 28, 0.3);
        let d = downsample_14(&c).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let mut checker = Matrix::zeros(28, 28);
        for r in 0..28 {
            for col in 0..28 {
                checker.set(r, col, ((r + col) % 2) as f64);
            }
        }
        assert!(downsample_14(&checker).unwrap().data().iter().all(|&v| v == 0.5));

        let mut block = Matrix::zeros(28, 28);
        block.set(0, 1, 1.0);
        block.set(1, 1, 1.0);
        assert_eq!(downsample_14(&block).unwrap().get(0, 0), 0.5);

        assert!(matches!(
            downsample_14(&Matrix::zeros(14, 14)),
            Err(DataError::BadImageShape { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(0, 103, 16, 12, 4).unwrap();
        let b = gen_synthetic(0, 103, 16, 12, 4).unwrap();
        let c = gen_synthetic(1, 103, 16, 12, 4).unwrap();
        assert_eq!(encode_sequence_cache(&a), encode_sequence_cache(&b));
        assert_ne!(a, c);
        let mut counts = [0usize; 4];
        for (i, &l) in a.labels.iter().enumerate() {
            counts[l] += 1;
            let seq = &a.sequences[i];
            assert_eq!(seq.len(), 12);
            assert!(seq.iter().all(|&t| t < 16));
            assert_eq!(seq.iter().filter(|&&t| t < 4).count(), 1);
            assert_eq!(seq[a.keyword_position(i).unwrap()], l);
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn synthetic_rejects_bad_bounds() {
        assert!(gen_synthetic(0, 10, 5, 12, 4).is_err());
        assert!(gen_synthetic(0, 10, 16, 3, 4).is_err());
        assert!(gen_synthetic(0, 0, 16, 12, 4).is_err());
    }

    #[test]
    fn split_is_80_20() {
        let ds = gen_synthetic(4, 100, 10, 6, 3).unwrap();
        let (train, test) = ds.split(0.8);
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(train.sequences[0], ds.sequences[0]);
        assert_eq!(test.sequences[0], ds.sequences[80]);
    }

    #[test]
    fn cache_round_trips_both_kinds() {
        let seq = gen_synthetic(2, 17, 9, 5, 3).unwrap();
        assert_eq!(decode_cache(&encode_sequence_cache(&seq)).unwrap(), CachedDataset::Sequences(seq));
        let imgs = ImageDataset::new(vec![Matrix::filled(14, 14, 0.25), Matrix::zeros(14, 14)], vec![3, 9]).unwrap();
        let bytes = encode_image_cache(&imgs);
        assert_eq!(decode_cache(&bytes).unwrap(), CachedDataset::Images(imgs));
        assert!(matches!(decode_cache(&bytes[..bytes.len() - 1]), Err(DataError::Truncated { .. })));
        assert!(decode_cache(b"nope").is_err());
    }

    #[test]
    fn reads_gzipped_idx() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let labels = IdxData::Labels(vec![4, 0, 9]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&serialize_idx(&labels)).unwrap();
        let path = dir.path().join("labels.gz");
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx_file(&path).unwrap(), labels);
    }

    proptest! {
        #[test]
        fn idx_round_trip(count in 1usize..4, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let images: Vec<Matrix> = (0..count).map(|_| {
                let d = (0..rows * cols).map(|_| f64::from(rng.gen::<u8>()) / 255.0).collect();
                Matrix::new(rows, cols, d).unwrap()
            }).collect();
            let data = IdxData::Images(images);
            let bytes = serialize_idx(&data);
            prop_assert_eq!(parse_idx(&bytes).unwrap(), data);
            prop_assert_eq!(serialize_idx(&parse_idx(&bytes).unwrap()), bytes);
        }

        #[test]
        fn downsample_preserves_mean(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Matrix::new(28, 28, (0..784).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let small = downsample_14(&img).unwrap();
            prop_assert!((img.sum() / 784.0 - small.sum() / 196.0).abs() < 1e-12);
        }
    }
}
