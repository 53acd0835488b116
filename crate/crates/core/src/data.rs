//! IDX image ingestion and binarization.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::Rng;
use thiserror::Error;

use crate::rng::{derive_rng, stream};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x} at byte offset {offset} (expected {expected:#010x})")]
    BadMagic {
        found: u32,
        expected: u32,
        offset: u64,
    },
    #[error("truncated IDX file at byte offset {offset}: {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("dimension mismatch: {what} ({a} vs {b})")]
    DimensionMismatch {
        what: &'static str,
        a: usize,
        b: usize,
    },
}

/// How grayscale pixels in `[0, 1]` become bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    /// `pixel >= 0.5` maps to 1. Deterministic.
    Threshold,
    /// Each pixel is an independent Bernoulli draw with the pixel value as
    /// its mean, on a stream derived from the seed and image index.
    Sample { seed: u64 },
}

/// Binary image vectors plus provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<u8>>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Option<Vec<u8>>,
    pub source: String,
    pub binarize: BinarizeMode,
}

impl Dataset {
    pub fn image_dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Standard 50,000/10,000 train/validation split of a 60,000-image
    /// training file. Returns `None` for any other size.
    #[allow(clippy::type_complexity)]
    pub fn standard_train_valid(&self) -> Option<(&[Vec<u8>], &[Vec<u8>])> {
        if self.len() == 60_000 {
            Some((&self.images[..50_000], &self.images[50_000..]))
        } else {
            None
        }
    }

    /// First `n` images as a new dataset.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            images: self.images[..n.min(self.len())].to_vec(),
            labels: self
                .labels
                .as_ref()
                .map(|l| l[..n.min(self.len())].to_vec()),
            ..self.clone()
        }
    }
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn read_u32(&mut self, what: &'static str) -> Result<u32, DataError> {
        let v = self.inner.read_u32::<BigEndian>().map_err(|_| DataError::Truncated {
            offset: self.offset,
            what,
        })?;
        self.offset += 4;
        Ok(v)
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), DataError> {
        self.inner.read_exact(buf).map_err(|_| DataError::Truncated {
            offset: self.offset,
            what,
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

fn open(path: &Path) -> Result<Counted<std::io::BufReader<std::fs::File>>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Counted {
        inner: std::io::BufReader::new(file),
        offset: 0,
    })
}

fn binarize_pixel(raw: u8, mode: BinarizeMode, rng: &mut Option<impl Rng>) -> u8 {
    let value = raw as f64 / 255.0;
    match mode {
        BinarizeMode::Threshold => u8::from(value >= 0.5),
        BinarizeMode::Sample { .. } => {
            let rng = rng.as_mut().expect("sampling rng present");
            u8::from(rng.random::<f64>() < value)
        }
    }
}

/// Binarizes grayscale images, one derived RNG stream per image in sample
/// mode.
pub fn binarize_images(raw: &[Vec<u8>], mode: BinarizeMode) -> Vec<Vec<u8>> {
    raw.iter()
        .enumerate()
        .map(|(index, image)| {
            let mut rng = match mode {
                BinarizeMode::Sample { seed } => {
                    Some(derive_rng(seed, stream::BINARIZE, index as u64))
                }
                BinarizeMode::Threshold => None,
            };
            image
                .iter()
                .map(|&p| binarize_pixel(p, mode, &mut rng))
                .collect()
        })
        .collect()
}

/// Reads an IDX image file (and optionally its label file), scales pixels to
/// `[0, 1]`, and binarizes them.
pub fn ingest_idx(
    images_path: &Path,
    labels_path: Option<&Path>,
    binarize: BinarizeMode,
) -> Result<Dataset, DataError> {
    let mut reader = open(images_path)?;
    let magic = reader.read_u32("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IMAGES_MAGIC,
            offset: 0,
        });
    }
    let count = reader.read_u32("image count")? as usize;
    let rows = reader.read_u32("row count")? as usize;
    let cols = reader.read_u32("column count")? as usize;
    let dim = rows * cols;

    let mut raw_images = Vec::with_capacity(count);
    let mut raw = vec![0u8; dim];
    for _ in 0..count {
        reader.read_exact(&mut raw, "pixel data")?;
        raw_images.push(raw.clone());
    }
    let images = binarize_images(&raw_images, binarize);

    let labels = match labels_path {
        None => None,
        Some(path) => {
            let mut reader = open(path)?;
            let magic = reader.read_u32("magic")?;
            if magic != LABELS_MAGIC {
                return Err(DataError::BadMagic {
                    found: magic,
                    expected: LABELS_MAGIC,
                    offset: 0,
                });
            }
            let label_count = reader.read_u32("label count")? as usize;
            if label_count != count {
                return Err(DataError::DimensionMismatch {
                    what: "image/label counts",
                    a: count,
                    b: label_count,
                });
            }
            let mut labels = vec![0u8; label_count];
            reader.read_exact(&mut labels, "label data")?;
            Some(labels)
        }
    };

    Ok(Dataset {
        images,
        rows,
        cols,
        labels,
        source: images_path.display().to_string(),
        binarize,
    })
}

/// Writes grayscale images as an IDX file; used for fixtures and for
/// materializing synthetic datasets.
pub fn write_idx_images(
    path: &Path,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    use byteorder::WriteBytesExt;
    use std::io::Write;
    let to_io = |source: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(to_io)?);
    out.write_u32::<BigEndian>(IMAGES_MAGIC).map_err(to_io)?;
    out.write_u32::<BigEndian>(images.len() as u32).map_err(to_io)?;
    out.write_u32::<BigEndian>(rows as u32).map_err(to_io)?;
    out.write_u32::<BigEndian>(cols as u32).map_err(to_io)?;
    for image in images {
        assert_eq!(image.len(), rows * cols);
        out.write_all(image).map_err(to_io)?;
    }
    Ok(())
}

/// Deterministic digit-like grayscale images: blocky stroke glyphs with
/// per-image jitter and pixel noise. A stand-in corpus for desk-scale runs
/// when the real handwriting data is not on disk.
pub fn synthetic_digits(count: usize, side: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut images = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = derive_rng(seed, stream::BINARIZE ^ 0x5151, index as u64);
        let glyph = index % 10;
        let dx = rng.random_range(-2i64..=2);
        let dy = rng.random_range(-2i64..=2);
        let mut img = vec![0u8; side * side];
        let s = side as i64;
        let mut paint = |r: i64, c: i64, v: u8| {
            let (r, c) = (r + dy, c + dx);
            if (0..s).contains(&r) && (0..s).contains(&c) {
                let cell = (r * s + c) as usize;
                img[cell] = img[cell].max(v);
            }
        };
        let q = s / 4;
        let mid = s / 2;
        // Strokes per glyph class: verticals, horizontals, and diagonals in
        // varying combinations, thickness 2.
        for t in 0..2i64 {
            match glyph {
                0 => {
                    for r in q..(3 * q) {
                        paint(r, q + t, 230);
                        paint(r, 3 * q + t, 230);
                    }
                    for c in q..(3 * q) {
                        paint(q + t, c, 230);
                        paint(3 * q + t, c, 230);
                    }
                }
                1 => {
                    for r in q..(3 * q) {
                        paint(r, mid + t, 240);
                    }
                }
                2 => {
                    for c in q..(3 * q) {
                        paint(q + t, c, 220);
                        paint(3 * q + t, c, 220);
                    }
                    for r in q..(3 * q) {
                        paint(r, (3 * q - (r - q)) + t, 200);
                    }
                }
                3 => {
                    for c in q..(3 * q) {
                        paint(q + t, c, 220);
                        paint(mid + t, c, 220);
                        paint(3 * q + t, c, 220);
                    }
                    for r in q..(3 * q) {
                        paint(r, 3 * q + t, 200);
                    }
                }
                4 => {
                    for r in q..mid {
                        paint(r, q + t, 230);
                    }
                    for c in q..(3 * q) {
                        paint(mid + t, c, 230);
                    }
                    for r in q..(3 * q) {
                        paint(r, 3 * q + t, 230);
                    }
                }
                5 => {
                    for c in q..(3 * q) {
                        paint(q + t, c, 220);
                        paint(mid + t, c, 220);
                        paint(3 * q + t, c, 220);
                    }
                    for r in q..mid {
                        paint(r, q + t, 200);
                    }
                    for r in mid..(3 * q) {
                        paint(r, 3 * q + t, 200);
                    }
                }
                6 => {
                    for r in q..(3 * q) {
                        paint(r, q + t, 230);
                    }
                    for c in q..(3 * q) {
                        paint(mid + t, c, 220);
                        paint(3 * q + t, c, 220);
                    }
                    for r in mid..(3 * q) {
                        paint(r, 3 * q + t, 200);
                    }
                }
                7 => {
                    for c in q..(3 * q) {
                        paint(q + t, c, 230);
                    }
                    for r in q..(3 * q) {
                        paint(r, (3 * q - (r - q) / 2) + t, 210);
                    }
                }
                8 => {
                    for r in q..(3 * q) {
                        paint(r, q + t, 220);
                        paint(r, 3 * q + t, 220);
                    }
                    for c in q..(3 * q) {
                        paint(q + t, c, 220);
                        paint(mid + t, c, 220);
                        paint(3 * q + t, c, 220);
                    }
                }
                _ => {
                    for r in q..mid {
                        paint(r, q + t, 220);
                    }
                    for c in q..(3 * q) {
                        paint(q + t, c, 220);
                        paint(mid + t, c, 220);
                    }
                    for r in q..(3 * q) {
                        paint(r, 3 * q + t, 220);
                    }
                }
            }
        }
        // Light speckle so binarization modes differ.
        for p in img.iter_mut() {
            if *p == 0 && rng.random::<f64>() < 0.02 {
                *p = rng.random_range(40..120);
            } else if *p > 0 {
                let jitter: i16 = rng.random_range(-30..=25);
                *p = (*p as i16 + jitter).clamp(0, 255) as u8;
            }
        }
        images.push(img);
    }
    images
}
