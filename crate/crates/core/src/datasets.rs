//! Data regimes: embedding files, synthetic compositional data, Gaussian
//! noise pairs and fixed compositional-swap pairs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Fraction of items assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("labels: {0}")]
    Csv(#[from] csv::Error),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("labels file: {0}")]
    Labels(String),
    #[error("{labels} labels for {items} embeddings")]
    LabelCount { labels: usize, items: usize },
    #[error("category '{category}' has {count} training items; at least 2 are needed")]
    SmallCategory { category: String, count: usize },
    #[error("category '{category}' has {available} candidates for {needed} distractors")]
    CategoryExhausted {
        category: String,
        available: usize,
        needed: usize,
    },
    #[error("dataset split is empty")]
    Empty,
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Items with embeddings, categories and a fixed train/validation partition.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    embeddings: Vec<f64>,
    categories: Vec<usize>,
    category_names: Vec<String>,
    /// Ground-truth attribute tuples (synthetic data only).
    attributes: Option<Vec<Vec<usize>>>,
    train: Vec<usize>,
    validation: Vec<usize>,
    /// Item ids per (split, category); used for distractor sampling.
    train_by_category: Vec<Vec<usize>>,
    validation_by_category: Vec<Vec<usize>>,
    all_by_category: Vec<Vec<usize>>,
}

impl EmbeddingDataset {
    /// Builds a dataset and partitions it 80/20 by a shuffle seeded with
    /// `split_seed`.
    pub fn new(
        dim: usize,
        embeddings: Vec<f64>,
        categories: Vec<usize>,
        category_names: Vec<String>,
        attributes: Option<Vec<Vec<usize>>>,
        split_seed: u64,
    ) -> Result<Self, DatasetError> {
        if dim == 0 {
            return Err(DatasetError::InvalidSpec("embedding dimension is 0".into()));
        }
        if embeddings.len() != categories.len() * dim {
            return Err(DatasetError::LabelCount {
                labels: categories.len(),
                items: embeddings.len() / dim,
            });
        }
        if let Some(c) = categories.iter().find(|c| **c >= category_names.len()) {
            return Err(DatasetError::Labels(format!("category id {c} has no name")));
        }
        let n = categories.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
        let mut train = order[..n_train].to_vec();
        let mut validation = order[n_train..].to_vec();
        train.sort_unstable();
        validation.sort_unstable();

        let group = |ids: &[usize]| {
            let mut g = vec![Vec::new(); category_names.len()];
            for &i in ids {
                g[categories[i]].push(i);
            }
            g
        };
        let train_by_category = group(&train);
        let validation_by_category = group(&validation);
        let all: Vec<usize> = (0..n).collect();
        let all_by_category = group(&all);
        for (c, items) in train_by_category.iter().enumerate() {
            if items.len() < 2 && !all_by_category[c].is_empty() {
                return Err(DatasetError::SmallCategory {
                    category: category_names[c].clone(),
                    count: items.len(),
                });
            }
        }
        Ok(EmbeddingDataset {
            dim,
            embeddings,
            categories,
            category_names,
            attributes,
            train,
            validation,
            train_by_category,
            validation_by_category,
            all_by_category,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn embedding(&self, item: usize) -> &[f64] {
        &self.embeddings[item * self.dim..(item + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn category(&self, item: usize) -> usize {
        self.categories[item]
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn attributes(&self) -> Option<&[Vec<usize>]> {
        self.attributes.as_deref()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    /// Row-major embeddings of the given items.
    pub fn gather(&self, items: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(items.len() * self.dim);
        for &i in items {
            out.extend_from_slice(self.embedding(i));
        }
        out
    }

    /// Distractor pool for `target` within `split`: same-category items of
    /// that split. A validation category too small to supply the
    /// distractors falls back to the same category across the whole dataset.
    fn distractor_pool(&self, split: Split, target: usize, n_candidates: usize) -> &[usize] {
        let c = self.categories[target];
        match split {
            Split::Train => &self.train_by_category[c],
            Split::Validation => {
                if self.validation_by_category[c].len() >= n_candidates {
                    &self.validation_by_category[c]
                } else {
                    &self.all_by_category[c]
                }
            }
        }
    }

    /// One round batch: distractors are drawn uniformly (without
    /// replacement) from the target's category, then candidate order is
    /// shuffled per row.
    pub fn round_inputs<R: Rng + ?Sized>(
        &self,
        split: Split,
        targets: &[usize],
        n_candidates: usize,
        rng: &mut R,
    ) -> Result<RoundInputs, DatasetError> {
        if n_candidates < 2 {
            return Err(DatasetError::InvalidSpec(
                "at least 2 candidates are required".into(),
            ));
        }
        let needed = n_candidates - 1;
        let mut candidate_items = Vec::with_capacity(targets.len() * n_candidates);
        let mut target_index = Vec::with_capacity(targets.len());
        for &t in targets {
            let pool: Vec<usize> = self
                .distractor_pool(split, t, n_candidates)
                .iter()
                .copied()
                .filter(|&i| i != t)
                .collect();
            if pool.len() < needed {
                return Err(DatasetError::CategoryExhausted {
                    category: self.category_names[self.categories[t]].clone(),
                    available: pool.len(),
                    needed,
                });
            }
            let mut row: Vec<usize> = pool.choose_multiple(rng, needed).copied().collect();
            row.push(t);
            row.shuffle(rng);
            target_index.push(row.iter().position(|&i| i == t).expect("target present"));
            candidate_items.extend(row);
        }
        Ok(RoundInputs {
            dim: self.dim,
            n_candidates,
            target_embeddings: self.gather(targets),
            candidate_embeddings: self.gather(&candidate_items),
            target_index,
            target_items: Some(targets.to_vec()),
            candidate_items: Some(candidate_items),
        })
    }

    /// Batches covering `split` once, targets drawn without replacement in
    /// an order shuffled by `rng`. The final partial batch is kept.
    pub fn epoch_batches<R: Rng + ?Sized>(
        &self,
        split: Split,
        batch_size: usize,
        n_candidates: usize,
        rng: &mut R,
    ) -> Result<Vec<RoundInputs>, DatasetError> {
        let items = self.split(split);
        if items.is_empty() {
            return Err(DatasetError::Empty);
        }
        if batch_size == 0 {
            return Err(DatasetError::InvalidSpec("batch size is 0".into()));
        }
        let mut order = items.to_vec();
        order.shuffle(rng);
        order
            .chunks(batch_size)
            .map(|chunk| self.round_inputs(split, chunk, n_candidates, rng))
            .collect()
    }
}

/// Inputs of one batch of rounds, before the agents act.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundInputs {
    pub dim: usize,
    pub n_candidates: usize,
    /// `[batch × dim]`
    pub target_embeddings: Vec<f64>,
    /// `[batch × n_candidates × dim]`, row-major.
    pub candidate_embeddings: Vec<f64>,
    /// Position of the target among each row's candidates.
    pub target_index: Vec<usize>,
    /// Dataset item ids, when the round comes from an [`EmbeddingDataset`].
    pub target_items: Option<Vec<usize>>,
    pub candidate_items: Option<Vec<usize>>,
}

impl RoundInputs {
    pub fn batch_size(&self) -> usize {
        self.target_index.len()
    }

    pub fn candidate(&self, row: usize, c: usize) -> &[f64] {
        let start = (row * self.n_candidates + c) * self.dim;
        &self.candidate_embeddings[start..start + self.dim]
    }
}

// ---------------------------------------------------------------------------
// Embedding files

/// Writes an `EMB1` file. Values are stored as 32-bit floats.
pub fn save_embeddings(path: &Path, n: usize, d: usize, data: &[f64]) -> Result<(), DatasetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_embeddings(&mut w, n, d, data)?;
    w.flush()?;
    Ok(())
}

pub fn write_embeddings<W: Write>(
    mut w: W,
    n: usize,
    d: usize,
    data: &[f64],
) -> Result<(), DatasetError> {
    if data.len() != n * d {
        return Err(DatasetError::Format(format!(
            "{} values for a {n}×{d} matrix",
            data.len()
        )));
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| DatasetError::Format(format!("{what} {v} exceeds u32")))
    };
    w.write_all(EMB_MAGIC)?;
    w.write_all(&to_u32(n, "row count")?.to_le_bytes())?;
    w.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads an `EMB1` stream into `(n, d, row-major values)`.
pub fn read_embeddings<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f64>), DatasetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| DatasetError::Format(format!("missing header: {e}")))?;
    if &magic != EMB_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad magic bytes {magic:?}, expected \"EMB1\""
        )));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| DatasetError::Format(format!("missing row count: {e}")))?;
    let n = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)
        .map_err(|e| DatasetError::Format(format!("missing dimension: {e}")))?;
    let d = u32::from_le_bytes(b) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * d * 4 {
        return Err(DatasetError::Format(format!(
            "header declares {n}×{d} floats ({} bytes) but the payload has {} bytes",
            n * d * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((n, d, data))
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    index: usize,
    category: String,
}

/// Reads a labels CSV (`index,category`) into category ids and names, ids
/// assigned in order of first appearance.
pub fn read_labels<R: Read>(r: R) -> Result<(Vec<usize>, Vec<String>), DatasetError> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "category"] {
        return Err(DatasetError::Labels(format!(
            "expected header 'index,category', found '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut ids = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut lookup = BTreeMap::new();
    for (row_no, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row?;
        if row.index != row_no {
            return Err(DatasetError::Labels(format!(
                "row {row_no} has index {}; indices must run 0..n-1 in order",
                row.index
            )));
        }
        let id = *lookup.entry(row.category.clone()).or_insert_with(|| {
            names.push(row.category.clone());
            names.len() - 1
        });
        ids.push(id);
    }
    Ok((ids, names))
}

pub fn write_labels<W: Write>(w: W, categories: &[String]) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_writer(w);
    for (index, category) in categories.iter().enumerate() {
        writer.serialize(LabelRow {
            index,
            category: category.clone(),
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads an embedding file plus its labels file.
pub fn load_embeddings(
    path: &Path,
    labels_path: &Path,
    split_seed: u64,
) -> Result<EmbeddingDataset, DatasetError> {
    let (n, d, data) = read_embeddings(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let (categories, names) = read_labels(std::fs::File::open(labels_path)?)?;
    if categories.len() != n {
        return Err(DatasetError::LabelCount {
            labels: categories.len(),
            items: n,
        });
    }
    EmbeddingDataset::new(d, data, categories, names, None, split_seed)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Compositional data: each item is a tuple of `n_attributes` values in
/// `0..n_values`; its category is the value of attribute 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_attributes: usize,
    pub n_values: usize,
    pub items_per_category: usize,
    pub dim: usize,
    pub noise: f64,
    /// Fraction of each value's projection that is shared across attribute
    /// positions, in [0, 1]. At 0 every (position, value) pair projects
    /// independently; above 0 the same value contributes a common direction
    /// wherever it appears, so tuples with equal value multisets look alike.
    pub value_sharing: f64,
    /// Seeds the projection matrix, the item sample and the split.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_attributes: 4,
            n_values: 4,
            items_per_category: 256,
            dim: 64,
            noise: 0.05,
            value_sharing: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_attributes < 2 || self.n_values < 2 {
            return Err(DatasetError::InvalidSpec(
                "synthetic data needs at least 2 attributes and 2 values".into(),
            ));
        }
        if self.items_per_category < 2 {
            return Err(DatasetError::InvalidSpec(
                "synthetic data needs at least 2 items per category".into(),
            ));
        }
        if self.dim == 0 {
            return Err(DatasetError::InvalidSpec("embedding dimension is 0".into()));
        }
        if !(0.0..=1.0).contains(&self.value_sharing) {
            return Err(DatasetError::InvalidSpec(format!(
                "value sharing {} is outside [0, 1]",
                self.value_sharing
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DatasetError::InvalidSpec(format!(
                "noise scale {} is not a finite non-negative number",
                self.noise
            )));
        }
        Ok(())
    }

    /// The fixed random linear map from concatenated one-hot attributes to
    /// embedding space, `[dim × (k·v)]` with N(0, 1/k) entries so embeddings
    /// have roughly unit scale per coordinate.
    pub fn projection(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (self.n_attributes as f64).sqrt();
        let (v, kv) = (self.n_values, self.n_attributes * self.n_values);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let mut proj = draw(self.dim * kv);
        if self.value_sharing > 0.0 {
            let shared = draw(self.dim * v);
            let (ws, wp) = (self.value_sharing.sqrt(), (1.0 - self.value_sharing).sqrt());
            for (i, x) in proj.iter_mut().enumerate() {
                let (r, col) = (i / kv, i % kv);
                *x = wp * *x + ws * shared[r * v + col % v];
            }
        }
        proj
    }

    /// Noise-free embedding of an attribute tuple.
    pub fn embed(&self, projection: &[f64], attrs: &[usize]) -> Vec<f64> {
        let kv = self.n_attributes * self.n_values;
        (0..self.dim)
            .map(|r| {
                attrs
                    .iter()
                    .enumerate()
                    .map(|(a, &v)| projection[r * kv + a * self.n_values + v])
                    .sum()
            })
            .collect()
    }

    fn embed_noisy<R: Rng + ?Sized>(&self, projection: &[f64], attrs: &[usize], rng: &mut R) -> Vec<f64> {
        let mut e = self.embed(projection, attrs);
        if self.noise > 0.0 {
            for x in &mut e {
                let z: f64 = StandardNormal.sample(rng);
                *x += self.noise * z;
            }
        }
        e
    }
}

/// Samples `items_per_category` items per value of attribute 0, the other
/// attributes uniform, and embeds them through the spec's projection plus
/// Gaussian noise. The split is seeded from the spec.
pub fn generate_synthetic<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<EmbeddingDataset, DatasetError> {
    spec.validate()?;
    let projection = spec.projection();
    let n = spec.n_values * spec.items_per_category;
    let mut embeddings = Vec::with_capacity(n * spec.dim);
    let mut categories = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    for category in 0..spec.n_values {
        for _ in 0..spec.items_per_category {
            let mut attrs = vec![category];
            attrs.extend((1..spec.n_attributes).map(|_| rng.random_range(0..spec.n_values)));
            embeddings.extend(spec.embed_noisy(&projection, &attrs, rng));
            categories.push(category);
            attributes.push(attrs);
        }
    }
    let names = (0..spec.n_values).map(|v| format!("a0={v}")).collect();
    EmbeddingDataset::new(
        spec.dim,
        embeddings,
        categories,
        names,
        Some(attributes),
        spec.seed.wrapping_add(1),
    )
}

/// The synthetic dataset fully determined by `spec`.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<EmbeddingDataset, DatasetError> {
    generate_synthetic(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2)))
}

// ---------------------------------------------------------------------------
// Fixed pairs

/// Fixed evaluation pairs, each visited in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPairSet {
    pub dim: usize,
    /// `(a, b)` embeddings per pair.
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Attribute tuples of `(a, b)` when known.
    pub attributes: Option<Vec<(Vec<usize>, Vec<usize>)>>,
}

impl FixedPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Rounds with candidates `[a, b]`. With `both_directions`, each pair
    /// appears twice: `a` as target (index 0), then `b` (index 1);
    /// otherwise only `a` is a target.
    pub fn round_inputs(&self, both_directions: bool) -> RoundInputs {
        let mut targets = Vec::new();
        let mut candidates = Vec::new();
        let mut target_index = Vec::new();
        for (a, b) in &self.pairs {
            let directions: &[usize] = if both_directions { &[0, 1] } else { &[0] };
            for &dir in directions {
                targets.extend_from_slice(if dir == 0 { a } else { b });
                candidates.extend_from_slice(a);
                candidates.extend_from_slice(b);
                target_index.push(dir);
            }
        }
        RoundInputs {
            dim: self.dim,
            n_candidates: 2,
            target_embeddings: targets,
            candidate_embeddings: candidates,
            target_index,
            target_items: None,
            candidate_items: None,
        }
    }
}

/// `n` pairs of independent standard-normal `d`-vectors.
pub fn noise_pairs<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> FixedPairSet {
    let mut draw = || -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let pairs = (0..n).map(|_| (draw(), draw())).collect();
    FixedPairSet {
        dim: d,
        pairs,
        attributes: None,
    }
}

/// Pairs sharing an attribute-value multiset but differing in composition:
/// the second tuple swaps the values of two positions of the first. With
/// three or more attributes the category attribute is left in place, so
/// both items of a pair belong to the same category.
pub fn winoground_analog<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    n_pairs: usize,
    rng: &mut R,
) -> Result<FixedPairSet, DatasetError> {
    spec.validate()?;
    let projection = spec.projection();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut attributes = Vec::with_capacity(n_pairs);
    let first = usize::from(spec.n_attributes >= 3);
    let positions: Vec<(usize, usize)> = (first..spec.n_attributes)
        .flat_map(|i| (i + 1..spec.n_attributes).map(move |j| (i, j)))
        .collect();
    for _ in 0..n_pairs {
        // Rejection-sample a tuple with two distinct values among the
        // swappable positions; with v ≥ 2 this terminates quickly.
        let a: Vec<usize> = loop {
            let t: Vec<usize> = (0..spec.n_attributes)
                .map(|_| rng.random_range(0..spec.n_values))
                .collect();
            if t[first..].iter().any(|x| *x != t[first]) {
                break t;
            }
        };
        let swappable: Vec<&(usize, usize)> = positions.iter().filter(|(i, j)| a[*i] != a[*j]).collect();
        let &&(i, j) = swappable.choose(rng).expect("tuple has two distinct values");
        let mut b = a.clone();
        b.swap(i, j);
        let ea = spec.embed_noisy(&projection, &a, rng);
        let eb = spec.embed_noisy(&projection, &b, rng);
        pairs.push((ea, eb));
        attributes.push((a, b));
    }
    Ok(FixedPairSet {
        dim: spec.dim,
        pairs,
        attributes: Some(attributes),
    })
}
