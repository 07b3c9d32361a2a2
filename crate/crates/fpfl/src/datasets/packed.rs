//! Packed binary dataset file and its manifest.
//!
//! Byte layout (integers little-endian):
//!
//! ```text
//! offset  size   field
//! 0       4      magic "FPDS"
//! 4       4      format version, u32 (currently 1)
//! 8       4      header length H, u32
//! 12      H      header: UTF-8 JSON (PackedHeader)
//! 12+H    ...    payload, in order:
//!                train features  n_train * dim f64
//!                train labels    n_train u8
//!                train groups    n_train u8
//!                test features   n_test * dim f64
//!                test labels     n_test u8
//!                test groups     n_test u8
//! ```
//!
//! `dim` is `feature_dim` for tabular data and `channels*height*width` for
//! images. The file must end exactly after the last payload byte. The
//! manifest is a separate JSON file with counts, histograms, and the
//! sha256 checksum of the packed file.

use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    FederatedSplit, ImageDataset, PreparedDataset, SplitData, TabularDataset, UserShard,
};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPDS";
pub const VERSION: u32 = 1;
const MAX_HEADER_LEN: u32 = 1 << 26;
const MAX_ELEMENTS: u64 = 1 << 33;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackedKind {
    Tabular { feature_dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedUser {
    pub id: String,
    /// Row indices into the train split owned by this user.
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedHeader {
    pub name: String,
    pub kind: PackedKind,
    pub group_count: usize,
    pub group_names: Vec<String>,
    pub label_count: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub users: Vec<PackedUser>,
}

/// Summary written next to the packed file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: String,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub label_count: usize,
    pub group_count: usize,
    pub group_names: Vec<String>,
    pub user_count: usize,
    pub mean_shard_size: f64,
    pub train_group_histogram: Vec<usize>,
    pub test_group_histogram: Vec<usize>,
    pub group_user_counts: Vec<usize>,
    pub train_label_histogram: Vec<usize>,
    pub sha256: String,
    /// Normalization statistics were computed from the raw train split; no
    /// privacy budget is spent on them by this tool.
    pub normalization_on_raw_data: bool,
    pub skipped_rows: usize,
}

fn dim_of(kind: &PackedKind) -> usize {
    match *kind {
        PackedKind::Tabular { feature_dim } => feature_dim,
        PackedKind::Image {
            channels,
            height,
            width,
        } => channels * height * width,
    }
}

pub fn encode(dataset: &PreparedDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let kind = match &dataset.train {
        SplitData::Tabular(t) => PackedKind::Tabular {
            feature_dim: t.features.ncols(),
        },
        SplitData::Image(i) => {
            let s = i.images.shape();
            PackedKind::Image {
                channels: s[1],
                height: s[2],
                width: s[3],
            }
        }
    };
    let header = PackedHeader {
        name: dataset.name.clone(),
        kind,
        group_count: dataset.group_count,
        group_names: dataset.group_names.clone(),
        label_count: dataset.label_count,
        n_train: dataset.train.len(),
        n_test: dataset.test.len(),
        users: dataset
            .split
            .shards
            .iter()
            .map(|s| PackedUser {
                id: s.id.clone(),
                indices: s.indices.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let dim = dim_of(&header.kind);
    let mut out = Vec::with_capacity(
        12 + header_bytes.len() + 8 * dim * (header.n_train + header.n_test),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);

    let mut write_split = |split: &SplitData| {
        let (features, labels, groups): (&[f64], &[u32], &[u32]) = match split {
            SplitData::Tabular(t) => (
                t.features.as_slice().expect("contiguous"),
                &t.labels,
                &t.groups,
            ),
            SplitData::Image(i) => (
                i.images.as_slice().expect("contiguous"),
                &i.labels,
                &i.groups,
            ),
        };
        for v in features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(labels.iter().map(|&l| l as u8));
        out.extend(groups.iter().map(|&g| g as u8));
    };
    write_split(&dataset.train);
    write_split(&dataset.test);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<PreparedDataset> {
    let take = |at: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + len)
            .ok_or_else(|| Error::Format("packed dataset truncated".into()))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::Format("bad packed-dataset magic".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let header_len = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Format(format!("header length {header_len} too large")));
    }
    let header: PackedHeader = serde_json::from_slice(take(12, header_len as usize)?)
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;

    let dim = dim_of(&header.kind);
    if dim == 0 || header.n_train == 0 || header.n_test == 0 {
        return Err(Error::Format("empty dimension or split".into()));
    }
    if header.group_count == 0 || header.group_count > 255 || header.label_count > 256 {
        return Err(Error::Format("group/label domain out of range".into()));
    }
    let elements = (header.n_train as u64 + header.n_test as u64) * dim as u64;
    if elements > MAX_ELEMENTS {
        return Err(Error::Format("payload too large".into()));
    }
    let expected = 12
        + header_len as usize
        + (header.n_train + header.n_test) * (8 * dim + 2);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "packed length {} does not match expected {expected}",
            bytes.len()
        )));
    }

    let mut at = 12 + header_len as usize;
    let mut read_split = |n: usize| -> Result<(Vec<f64>, Vec<u32>, Vec<u32>)> {
        let mut features = Vec::with_capacity(n * dim);
        for chunk in take(at, n * dim * 8)?.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format("non-finite feature value".into()));
            }
            features.push(v);
        }
        at += n * dim * 8;
        let labels: Vec<u32> = take(at, n)?.iter().map(|&b| b as u32).collect();
        at += n;
        let groups: Vec<u32> = take(at, n)?.iter().map(|&b| b as u32).collect();
        at += n;
        Ok((features, labels, groups))
    };
    let train_raw = read_split(header.n_train)?;
    let test_raw = read_split(header.n_test)?;

    let build = |raw: (Vec<f64>, Vec<u32>, Vec<u32>), n: usize| -> Result<SplitData> {
        Ok(match header.kind {
            PackedKind::Tabular { feature_dim } => SplitData::Tabular(TabularDataset {
                features: Array2::from_shape_vec((n, feature_dim), raw.0)
                    .map_err(|e| Error::Format(format!("feature shape: {e}")))?,
                labels: raw.1,
                groups: raw.2,
            }),
            PackedKind::Image {
                channels,
                height,
                width,
            } => SplitData::Image(ImageDataset {
                images: Array4::from_shape_vec((n, channels, height, width), raw.0)
                    .map_err(|e| Error::Format(format!("image shape: {e}")))?,
                labels: raw.1,
                groups: raw.2,
            }),
        })
    };

    let dataset = PreparedDataset {
        name: header.name,
        group_count: header.group_count,
        group_names: header.group_names,
        label_count: header.label_count,
        train: build(train_raw, header.n_train)?,
        test: build(test_raw, header.n_test)?,
        split: FederatedSplit {
            shards: header
                .users
                .into_iter()
                .map(|u| UserShard {
                    id: u.id,
                    indices: u.indices,
                })
                .collect(),
        },
    };
    dataset
        .validate()
        .map_err(|e| Error::Format(format!("packed dataset invalid: {e}")))?;
    Ok(dataset)
}

pub fn save(dataset: &PreparedDataset, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode(dataset)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<PreparedDataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Build the manifest for a dataset whose packed bytes are `packed`.
pub fn manifest_for(
    dataset: &PreparedDataset,
    packed: &[u8],
    group_user_counts: Vec<usize>,
    skipped_rows: usize,
) -> DatasetManifest {
    let mut hasher = Sha256::new();
    hasher.update(packed);
    let sha256 = format!("{:x}", hasher.finalize());
    let mut label_hist = vec![0usize; dataset.label_count];
    for &l in dataset.train.labels() {
        label_hist[l as usize] += 1;
    }
    let input_dim = match &dataset.train {
        SplitData::Tabular(t) => t.features.ncols(),
        SplitData::Image(i) => {
            let s = i.images.shape();
            s[1] * s[2] * s[3]
        }
    };
    DatasetManifest {
        name: dataset.name.clone(),
        kind: match dataset.train {
            SplitData::Tabular(_) => "tabular".into(),
            SplitData::Image(_) => "image".into(),
        },
        n_train: dataset.train.len(),
        n_test: dataset.test.len(),
        input_dim,
        label_count: dataset.label_count,
        group_count: dataset.group_count,
        group_names: dataset.group_names.clone(),
        user_count: dataset.split.user_count(),
        mean_shard_size: dataset.split.total_samples() as f64
            / dataset.split.user_count() as f64,
        train_group_histogram: dataset.group_histogram(&dataset.train),
        test_group_histogram: dataset.group_histogram(&dataset.test),
        group_user_counts,
        train_label_histogram: label_hist,
        sha256,
        normalization_on_raw_data: true,
        skipped_rows,
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
