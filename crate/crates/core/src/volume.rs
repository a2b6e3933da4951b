//! Labeled intensity volumes and their on-disk container.
//!
//! File layout (all integers little-endian):
//!
//! | offset | size      | field                                              |
//! |--------|-----------|----------------------------------------------------|
//! | 0      | 4         | magic `b"UVOL"`                                    |
//! | 4      | 2         | format version (`u16`, currently 1)                |
//! | 6      | 1         | domain tag (`u8`: 0 A, 1 B, 2 synthetic AB, 3 pseudo B) |
//! | 7      | 1         | dtype (`u8`: 1 = `f32` intensities + `u8` labels)  |
//! | 8      | 24        | shape `D, H, W` as three `u64`                     |
//! | 32     | 24        | spacing in mm as three `f64`                       |
//! | 56     | 4         | metadata length `m` (`u32`)                        |
//! | 60     | m         | metadata, UTF-8 JSON ([`VolumeMeta`])              |
//! | 60+m   | 4·n       | intensities, `f32`, slice-major (`z`, `y`, `x`)    |
//! | 60+m+4n| n         | labels, `u8` (255 marks ignored voxels)            |
//!
//! where `n = D·H·W`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UVOL";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F32_U8: u8 = 1;
const HEADER_LEN: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    A,
    B,
    #[serde(rename = "synthetic_AB")]
    SyntheticAB,
    /// A target-domain scan whose labels are model predictions.
    #[serde(rename = "pseudo_B")]
    PseudoB,
}

impl DomainTag {
    fn code(self) -> u8 {
        match self {
            DomainTag::A => 0,
            DomainTag::B => 1,
            DomainTag::SyntheticAB => 2,
            DomainTag::PseudoB => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => DomainTag::A,
            1 => DomainTag::B,
            2 => DomainTag::SyntheticAB,
            3 => DomainTag::PseudoB,
            _ => return None,
        })
    }
}

/// Free-form provenance carried in the file header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeMeta {
    pub id: String,
    pub anatomy_id: Option<String>,
    pub seed: Option<u64>,
    pub checkpoint_id: Option<String>,
    pub config_hash: Option<String>,
    pub upstream: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    /// `[D, H, W]`.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub intensities: Vec<f32>,
    pub labels: Vec<u8>,
    pub domain: DomainTag,
    pub meta: VolumeMeta,
}

impl LabeledVolume {
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        intensities: Vec<f32>,
        labels: Vec<u8>,
        domain: DomainTag,
    ) -> Result<Self> {
        let v = LabeledVolume {
            shape,
            spacing,
            intensities,
            labels,
            domain,
            meta: VolumeMeta::default(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.intensities.len() != n || self.labels.len() != n {
            return Err(Error::shape(
                "volume grids",
                &[n, n],
                &[self.intensities.len(), self.labels.len()],
            ));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn depth(&self) -> usize {
        self.shape[0]
    }

    pub fn slice_intensities(&self, z: usize) -> &[f32] {
        let m = self.slice_len();
        &self.intensities[z * m..(z + 1) * m]
    }

    pub fn slice_labels(&self, z: usize) -> &[u8] {
        let m = self.slice_len();
        &self.labels[z * m..(z + 1) * m]
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    /// Sorted distinct label values, excluding the ignore marker.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let n = self.len();
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 5 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.domain.code());
        out.push(DTYPE_F32_U8);
        for &s in &self.shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for &v in &self.intensities {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < HEADER_LEN || &bytes[0..4] != MAGIC {
            return Err(bad("not a volume file (bad magic)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let domain = DomainTag::from_code(bytes[6]).ok_or_else(|| bad("unknown domain tag"))?;
        if bytes[7] != DTYPE_F32_U8 {
            return Err(bad("unknown dtype"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let shape = [u64_at(8) as usize, u64_at(16) as usize, u64_at(24) as usize];
        let spacing = [f64_at(32), f64_at(40), f64_at(48)];
        let mlen = u32::from_le_bytes(bytes[56..60].try_into().unwrap()) as usize;
        let n: usize = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| bad("shape overflow"))?;
        let expected = HEADER_LEN + mlen + 5 * n;
        if bytes.len() != expected {
            return Err(bad(&format!(
                "expected {expected} bytes for shape {shape:?}, found {}",
                bytes.len()
            )));
        }
        let meta: VolumeMeta = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + mlen])
            .map_err(|e| bad(&format!("metadata: {e}")))?;
        let data = &bytes[HEADER_LEN + mlen..];
        let intensities = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = data[4 * n..].to_vec();
        let v = LabeledVolume {
            shape,
            spacing,
            intensities,
            labels,
            domain,
            meta,
        };
        v.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(v)
    }

    /// Writes the file and returns the SHA-256 of its bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
