//! On-disk dataset layout.
//!
//! A dataset directory holds four matrix files in the `ATMD` binary format
//! (`train.atmd`, `test.atmd`, `train_codes.atmd`, `test_codes.atmd`) and a
//! JSON sidecar `dataset.json` with the ground-truth dictionary.
//!
//! `ATMD` layout (little-endian): magic `"ATMD"`, `u32` version = 1,
//! `u32` row width, `u64` row count, then `count × width` `f32` values in
//! row-major order.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ActivationBatch, CodeMatrix, Dataset, GroundTruthDictionary, Implication};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATMD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub const TRAIN_FILE: &str = "train.atmd";
pub const TEST_FILE: &str = "test.atmd";
pub const TRAIN_CODES_FILE: &str = "train_codes.atmd";
pub const TEST_CODES_FILE: &str = "test_codes.atmd";
pub const METADATA_FILE: &str = "dataset.json";

/// Files that make up a dataset, in hashing order.
pub const DATASET_FILES: [&str; 5] = [METADATA_FILE, TRAIN_FILE, TEST_FILE, TRAIN_CODES_FILE, TEST_CODES_FILE];

/// Serializes a matrix as an `ATMD` payload. Values are rounded to `f32`.
pub fn encode_matrix(data: &Array2<f64>) -> Vec<u8> {
    let (count, width) = data.dim();
    let mut out = vec![0u8; HEADER_LEN + count * width * 4];
    out[..4].copy_from_slice(MAGIC);
    LittleEndian::write_u32(&mut out[4..8], VERSION);
    LittleEndian::write_u32(&mut out[8..12], width as u32);
    LittleEndian::write_u64(&mut out[12..20], count as u64);
    for (chunk, v) in out[HEADER_LEN..].chunks_exact_mut(4).zip(data.iter()) {
        LittleEndian::write_f32(chunk, *v as f32);
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:?}, expected \"ATMD\"", &bytes[..4]),
        ));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let width = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let count = LittleEndian::read_u64(&bytes[12..20]);
    let expected = (count as u128) * (width as u128) * 4;
    let actual = (bytes.len() - HEADER_LEN) as u128;
    if expected != actual {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| LittleEndian::read_f32(c) as f64)
        .collect();
    Array2::from_shape_vec((count as usize, width), values).map_err(|e| Error::format(HEADER_LEN as u64, e.to_string()))
}

pub fn write_matrix(path: &Path, data: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_matrix(data)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub format_version: u32,
    pub d: usize,
    pub m: usize,
    /// Row-major `d × m`; column `j` is atom `j`.
    pub atoms: Vec<f64>,
    /// `[child, parent]` pairs.
    pub implications: Vec<[usize; 2]>,
    pub base_rates: Vec<f64>,
    pub seed: u64,
    pub noise_sigma: f64,
    pub s_mean: f64,
    pub train_count: usize,
    pub test_count: usize,
}

impl DatasetMetadata {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            format_version: VERSION,
            d: ds.dict.dim(),
            m: ds.dict.atom_count(),
            atoms: ds.dict.atoms.iter().copied().collect(),
            implications: ds.dict.implications.iter().map(|i| [i.child, i.parent]).collect(),
            base_rates: ds.dict.base_rates.clone(),
            seed: ds.dict.seed,
            noise_sigma: ds.noise_sigma,
            s_mean: ds.s_mean,
            train_count: ds.train.count(),
            test_count: ds.test.count(),
        }
    }

    pub fn dictionary(&self) -> Result<GroundTruthDictionary> {
        let atoms = Array2::from_shape_vec((self.d, self.m), self.atoms.clone())
            .map_err(|e| Error::config("atoms", e.to_string()))?;
        let dict = GroundTruthDictionary {
            atoms,
            implications: self
                .implications
                .iter()
                .map(|&[child, parent]| Implication { child, parent })
                .collect(),
            base_rates: self.base_rates.clone(),
            seed: self.seed,
        };
        dict.validate()?;
        Ok(dict)
    }
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&DatasetMetadata::from_dataset(self))
            .map_err(|e| Error::Training(e.to_string()))?;
        let meta_path = dir.join(METADATA_FILE);
        fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
        write_matrix(&dir.join(TRAIN_FILE), &self.train.data)?;
        write_matrix(&dir.join(TEST_FILE), &self.test.data)?;
        write_matrix(&dir.join(TRAIN_CODES_FILE), &self.train_codes.codes)?;
        write_matrix(&dir.join(TEST_CODES_FILE), &self.test_codes.codes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMetadata =
            serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != VERSION {
            return Err(Error::format(
                0,
                format!("unsupported metadata version {}", meta.format_version),
            ));
        }
        let dict = meta.dictionary()?;
        let train = read_matrix(&dir.join(TRAIN_FILE))?;
        let test = read_matrix(&dir.join(TEST_FILE))?;
        let train_codes = read_matrix(&dir.join(TRAIN_CODES_FILE))?;
        let test_codes = read_matrix(&dir.join(TEST_CODES_FILE))?;
        for (name, mat, rows, cols) in [
            (TRAIN_FILE, &train, meta.train_count, meta.d),
            (TEST_FILE, &test, meta.test_count, meta.d),
            (TRAIN_CODES_FILE, &train_codes, meta.train_count, meta.m),
            (TEST_CODES_FILE, &test_codes, meta.test_count, meta.m),
        ] {
            if mat.dim() != (rows, cols) {
                return Err(Error::Shape(format!(
                    "{name}: expected {rows}x{cols}, found {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        Ok(Self {
            dict,
            train: ActivationBatch::new(train)?,
            test: ActivationBatch::new(test)?,
            train_codes: CodeMatrix { codes: train_codes },
            test_codes: CodeMatrix { codes: test_codes },
            noise_sigma: meta.noise_sigma,
            s_mean: meta.s_mean,
        })
    }
}

/// SHA-256 over every dataset file, in [`DATASET_FILES`] order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in DATASET_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
