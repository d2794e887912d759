//! CIFAR-10 binary batches.
//!
//! A record is one label byte followed by 1024 red, 1024 green and 1024 blue
//! bytes, each plane row-major 32x32. Pixels decode to `byte / 255`.

use std::fs;
use std::path::{Path, PathBuf};

use orthosphere_core::data::{Dataset, ImageShape};

pub const CLASSES: usize = 10;
pub const PIXELS: usize = 3 * 32 * 32;
pub const RECORD_LEN: usize = 1 + PIXELS;

pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, thiserror::Error)]
pub enum CifarError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("truncated record at byte offset {offset}: {len} bytes is not a multiple of {RECORD_LEN}")]
    Truncated { offset: usize, len: usize },

    #[error("label {label} at byte offset {offset} exceeds 9")]
    BadLabel { offset: usize, label: u8 },

    #[error("cannot encode: {0}")]
    Encode(String),

    #[error("no training batches (data_batch_*.bin) in {}", .0.display())]
    NoBatches(PathBuf),

    #[error(transparent)]
    Core(#[from] orthosphere_core::Error),
}

/// Decodes a whole batch file held in memory.
pub fn decode(bytes: &[u8]) -> Result<Dataset, CifarError> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(CifarError::Truncated { offset: bytes.len() - bytes.len() % RECORD_LEN, len: bytes.len() });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(CifarError::BadLabel { offset: i * RECORD_LEN, label: rec[0] });
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset::new(ImageShape::CIFAR, images, labels, CLASSES)?)
}

/// Encodes a 3x32x32 dataset with at most ten classes; pixels round to the
/// nearest multiple of 1/255 and must lie in `[0, 1]`.
pub fn encode(data: &Dataset) -> Result<Vec<u8>, CifarError> {
    if data.shape() != ImageShape::CIFAR {
        return Err(CifarError::Encode(format!("image shape {:?} is not 3x32x32", data.shape())));
    }
    if data.classes() > CLASSES {
        return Err(CifarError::Encode(format!("{} classes do not fit a label byte below 10", data.classes())));
    }
    if !data.in_unit_range() {
        return Err(CifarError::Encode("pixels outside [0, 1]".into()));
    }
    let mut out = Vec::with_capacity(data.len() * RECORD_LEN);
    for i in 0..data.len() {
        out.push(data.label(i) as u8);
        out.extend(data.image(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Dataset, CifarError> {
    let bytes = fs::read(path).map_err(|source| CifarError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

pub fn write(path: &Path, data: &Dataset) -> Result<(), CifarError> {
    let bytes = encode(data)?;
    fs::write(path, bytes).map_err(|source| CifarError::Io { path: path.to_path_buf(), source })
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset, CifarError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        images.extend_from_slice(p.images());
        labels.extend_from_slice(p.labels());
    }
    Ok(Dataset::new(ImageShape::CIFAR, images, labels, CLASSES)?)
}

/// Reads the training batches present in `dir` (in file order) and the test
/// batch.
pub fn read_dir(dir: &Path) -> Result<(Dataset, Dataset), CifarError> {
    let present: Vec<PathBuf> = TRAIN_FILES.iter().map(|f| dir.join(f)).filter(|p| p.is_file()).collect();
    if present.is_empty() {
        return Err(CifarError::NoBatches(dir.to_path_buf()));
    }
    let train = concat(present.iter().map(|p| read(p)).collect::<Result<_, _>>()?)?;
    let test = read(&dir.join(TEST_FILE))?;
    Ok((train, test))
}

/// Writes `train` as `data_batch_1.bin` and `test` as `test_batch.bin`.
pub fn write_dir(dir: &Path, train: &Dataset, test: &Dataset) -> Result<(), CifarError> {
    fs::create_dir_all(dir).map_err(|source| CifarError::Io { path: dir.to_path_buf(), source })?;
    write(&dir.join(TRAIN_FILES[0]), train)?;
    write(&dir.join(TEST_FILE), test)
}
