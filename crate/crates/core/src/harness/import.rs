//! Importing externally computed image features.
//!
//! Accepts an EMB1 file or a headerless CSV of floats (one row per item)
//! plus a labels CSV (`index,category`), optionally applies the subset
//! recipe below, and writes an EMB1 file with a matching labels file.
//!
//! Subset recipe:
//! 1. keep only categories with more than `min_count` items;
//! 2. from each kept category draw `per_category` items uniformly without
//!    replacement (seeded), preserving their original order.
//!
//! With `min_count = 100` and `per_category = 100` on a labelled feature
//! dump of 1200 images over categories of very different sizes, this yields
//! a balanced subset suitable for an 80/20 split.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_json, HarnessError};
use crate::datasets::{read_embeddings, read_labels, save_embeddings, write_labels, DatasetError};

pub const EMBEDDINGS_FILE: &str = "embeddings.emb1";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Debug)]
pub struct ImportOptions {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub out_dir: PathBuf,
    /// Keep categories with strictly more items than this.
    pub min_count: Option<usize>,
    /// Items drawn per kept category.
    pub per_category: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub items_in: usize,
    pub items_out: usize,
    pub dim: usize,
    /// Kept categories with their output item counts, by name.
    pub categories: BTreeMap<String, usize>,
    pub dropped_categories: Vec<String>,
    pub embeddings: PathBuf,
    pub labels: PathBuf,
}

/// Reads features from an EMB1 file or a headerless float CSV.
pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f64>), HarnessError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HarnessError::io(path, e))?;
    if bytes.starts_with(b"EMB1") {
        return Ok(read_embeddings(&bytes[..])?);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(&bytes[..]);
    let (mut n, mut d, mut data) = (0usize, 0usize, Vec::new());
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        if row_no == 0 {
            d = record.len();
        } else if record.len() != d {
            return Err(DatasetError::Format(format!(
                "row {row_no} has {} values, expected {d}",
                record.len()
            ))
            .into());
        }
        for field in &record {
            let v: f64 = field.parse().map_err(|_| {
                DatasetError::Format(format!("row {row_no}: '{field}' is not a number"))
            })?;
            data.push(v);
        }
        n += 1;
    }
    if n == 0 || d == 0 {
        return Err(DatasetError::Format(format!("{} holds no feature rows", path.display())).into());
    }
    Ok((n, d, data))
}

pub fn import_embeddings(opts: &ImportOptions) -> Result<ImportSummary, HarnessError> {
    let (n, d, data) = read_features(&opts.embeddings)?;
    let labels_file = std::fs::File::open(&opts.labels).map_err(|e| HarnessError::io(&opts.labels, e))?;
    let (ids, names) = read_labels(labels_file)?;
    if ids.len() != n {
        return Err(DatasetError::LabelCount {
            labels: ids.len(),
            items: n,
        }
        .into());
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for (item, &c) in ids.iter().enumerate() {
        members[c].push(item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut keep = Vec::new();
    let mut categories = BTreeMap::new();
    let mut dropped = Vec::new();
    for (c, items) in members.iter().enumerate() {
        if opts.min_count.is_some_and(|m| items.len() <= m) {
            dropped.push(names[c].clone());
            continue;
        }
        let chosen: Vec<usize> = match opts.per_category {
            Some(k) if k < items.len() => {
                let mut picked: Vec<usize> = items.choose_multiple(&mut rng, k).copied().collect();
                picked.sort_unstable();
                picked
            }
            Some(k) if k > items.len() => {
                return Err(HarnessError::Config(format!(
                    "category '{}' has {} items, fewer than the {k} requested",
                    names[c],
                    items.len()
                )))
            }
            _ => items.clone(),
        };
        categories.insert(names[c].clone(), chosen.len());
        keep.extend(chosen);
    }
    keep.sort_unstable();
    if keep.is_empty() {
        return Err(HarnessError::Config("the subset recipe kept no items".into()));
    }
    let out_data: Vec<f64> = keep
        .iter()
        .flat_map(|&i| data[i * d..(i + 1) * d].iter().copied())
        .collect();
    let out_labels: Vec<String> = keep.iter().map(|&i| names[ids[i]].clone()).collect();
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| HarnessError::io(&opts.out_dir, e))?;
    let emb_path = opts.out_dir.join(EMBEDDINGS_FILE);
    let lab_path = opts.out_dir.join(LABELS_FILE);
    save_embeddings(&emb_path, keep.len(), d, &out_data)?;
    let f = std::fs::File::create(&lab_path).map_err(|e| HarnessError::io(&lab_path, e))?;
    write_labels(f, &out_labels)?;
    let summary = ImportSummary {
        items_in: n,
        items_out: keep.len(),
        dim: d,
        categories,
        dropped_categories: dropped,
        embeddings: emb_path,
        labels: lab_path,
    };
    write_json(&opts.out_dir.join("import.json"), &summary)?;
    Ok(summary)
}
