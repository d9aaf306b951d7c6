//! Dataset representation, synthetic generation, CSV ingestion, per-class
//! label-noise injection, and class indexing.
//!
//! A [`Dataset`] holds `N` feature vectors of identical dimension `M` with
//! dense integer labels in `[0, C)`. Sample ids are implicit row indices
//! `0..N-1`. Every class must contain at least two samples; downstream
//! objectives divide by `N^c - 1`.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Immutable labeled dataset. Ids are row indices `0..N-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    /// Validates the dataset invariants: label range, class sizes >= 2,
    /// consistent feature dimension (guaranteed by `Array2`), finite features.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::contract(format!(
                "feature rows ({}) != label count ({})",
                features.nrows(),
                labels.len()
            )));
        }
        if n_classes < 1 {
            return Err(Error::contract("dataset must have at least one class"));
        }
        let mut counts = vec![0usize; n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::contract(format!(
                    "sample {i} has label {l} outside [0, {n_classes})"
                )));
            }
            counts[l] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n < 2 {
                return Err(Error::contract(format!(
                    "class {c} has {n} sample(s): class size < 2"
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("dataset contains non-finite features"));
        }
        Ok(Self {
            features,
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

    /// Feature dimension `M`.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of classes `C`.
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature(&self, id: usize) -> ArrayView1<'_, f64> {
        self.features.row(id)
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Returns a copy with the given labels (features shared layout, cloned).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(self.features.clone(), labels, self.n_classes)
    }
}

/// Parameters of the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum distance between any two cluster centers.
    pub separation: f64,
    /// Isotropic within-class standard deviation.
    pub std_dev: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!(
                "synthetic spec needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.per_class < 2 {
            return Err(Error::config(format!(
                "synthetic spec needs at least 2 samples per class, got {}",
                self.per_class
            )));
        }
        if self.dim < 1 {
            return Err(Error::config("synthetic feature dimension must be >= 1"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::config("cluster separation must be > 0"));
        }
        if !(self.std_dev > 0.0) {
            return Err(Error::config("within-class standard deviation must be > 0"));
        }
        Ok(())
    }
}

/// Cluster centers: evenly spaced on a circle in the first two coordinates
/// (radius chosen so adjacent centers sit `separation` apart), or on a line
/// when `dim == 1`. Center placement does not consume randomness, so the seed
/// only drives the within-class noise.
fn cluster_centers(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let c = spec.classes;
    let mut centers = vec![vec![0.0; spec.dim]; c];
    if spec.dim == 1 {
        for (k, center) in centers.iter_mut().enumerate() {
            center[0] = spec.separation * k as f64;
        }
    } else {
        let radius = spec.separation / (2.0 * (std::f64::consts::PI / c as f64).sin());
        for (k, center) in centers.iter_mut().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
            center[0] = radius * angle.cos();
            center[1] = radius * angle.sin();
        }
    }
    centers
}

/// Draws `per_class` samples per class from isotropic Gaussians around the
/// cluster centers. Ids are assigned class-major; deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let centers = cluster_centers(spec);
    let n = spec.classes * spec.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::<f64>::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0usize;
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for (j, &cj) in center.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                features[(row, j)] = cj + spec.std_dev * z;
            }
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(features, labels, spec.classes)
}

/// Per-class sample-id lists. The lists partition `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    members: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn n_classes(&self) -> usize {
        self.members.len()
    }

    /// Ids of class `c`, in increasing id order.
    pub fn class(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    /// `N^c`, the number of samples in class `c`.
    pub fn size(&self, c: usize) -> usize {
        self.members[c].len()
    }

    pub fn total(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.members
            .iter()
            .enumerate()
            .map(|(c, m)| (c, m.as_slice()))
    }
}

/// Partitions sample ids by label; within-class order preserves id order.
pub fn split_by_class(ds: &Dataset) -> ClassIndex {
    let mut members = vec![Vec::new(); ds.n_classes()];
    for (id, &l) in ds.labels().iter().enumerate() {
        members[l].push(id);
    }
    ClassIndex { members }
}

/// One relabeled sample: which id flipped and between which dense labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flip {
    pub id: usize,
    pub original_label: usize,
    pub new_label: usize,
}

/// Record of a label-noise injection, sufficient to undo it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseMask {
    flips: Vec<Flip>,
}

impl NoiseMask {
    pub fn flips(&self) -> &[Flip] {
        &self.flips
    }

    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    pub fn is_flipped(&self, id: usize) -> bool {
        self.flips.binary_search_by_key(&id, |f| f.id).is_ok()
    }

    /// Restores the pre-noise labels, undoing the injection exactly.
    pub fn restore(&self, noisy: &Dataset) -> Result<Dataset> {
        let mut labels = noisy.labels().to_vec();
        for f in &self.flips {
            if f.id >= labels.len() {
                return Err(Error::contract(format!(
                    "mask id {} outside dataset of size {}",
                    f.id,
                    labels.len()
                )));
            }
            labels[f.id] = f.original_label;
        }
        noisy.with_labels(labels)
    }

    /// Serializes as CSV `id,original_label,new_label` (header always present).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,original_label,new_label\n");
        for f in &self.flips {
            let _ = writeln!(out, "{},{},{}", f.id, f.original_label, f.new_label);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut flips = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != "id,original_label,new_label" {
                    return Err(Error::ingest(format!(
                        "line 1: expected mask header `id,original_label,new_label`, got `{line}`"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::ingest(format!(
                    "line {}: expected 3 fields, got {}",
                    i + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str, what: &str| -> Result<usize> {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::ingest(format!("line {}: bad {what} `{s}`", i + 1)))
            };
            flips.push(Flip {
                id: parse(fields[0], "id")?,
                original_label: parse(fields[1], "original label")?,
                new_label: parse(fields[2], "new label")?,
            });
        }
        flips.sort_by_key(|f| f.id);
        Ok(NoiseMask { flips })
    }
}

/// Relabels exactly `floor(ratio * N^c)` uniformly chosen samples of each
/// class to a uniformly chosen different class. Features are untouched.
/// Deterministic for a fixed seed.
pub fn inject_label_noise(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, NoiseMask)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!(
            "noise ratio must be in [0, 1), got {ratio}"
        )));
    }
    if ds.n_classes() < 2 {
        return Err(Error::config(
            "label noise needs at least 2 classes to flip between",
        ));
    }
    let index = split_by_class(ds);
    let c_total = ds.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = ds.labels().to_vec();
    let mut flips = Vec::new();
    for c in 0..c_total {
        let members = index.class(c);
        let count = (ratio * members.len() as f64).floor() as usize;
        if count == 0 {
            continue;
        }
        let mut chosen: Vec<usize> = sample_indices(&mut rng, members.len(), count)
            .into_iter()
            .map(|i| members[i])
            .collect();
        chosen.sort_unstable();
        for id in chosen {
            // uniform over the C-1 other classes
            let t = rng.gen_range(0..c_total - 1);
            let new_label = if t < c { t } else { t + 1 };
            labels[id] = new_label;
            flips.push(Flip {
                id,
                original_label: c,
                new_label,
            });
        }
    }
    flips.sort_by_key(|f| f.id);
    let noisy = Dataset::new(ds.features().to_owned(), labels, c_total)
        .map_err(|e| Error::config(format!("label noise produced an invalid dataset: {e}")))?;
    Ok((noisy, NoiseMask { flips }))
}

/// Mapping from dense labels back to the integers found in an ingested file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelMap {
    /// `original[c]` is the file label remapped to dense label `c`.
    pub original: Vec<i64>,
}

impl LabelMap {
    pub fn identity(n_classes: usize) -> Self {
        LabelMap {
            original: (0..n_classes as i64).collect(),
        }
    }
}

/// Reads the CSV schema `id,label,f0,...,f{M-1}`. Ids are renumbered
/// `0..N-1` in file order; labels are densified to `[0, C)` in sorted order
/// of the original integers, with the mapping returned alongside.
pub fn load_dataset(path: &Path) -> Result<(Dataset, LabelMap)> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    {
        let headers = reader
            .headers()
            .map_err(|e| Error::ingest(format!("line 1: {e}")))?;
        let mut fields = headers.iter();
        if fields.next() != Some("id") || fields.next() != Some("label") {
            return Err(Error::ingest(
                "line 1: header must start with `id,label`".to_string(),
            ));
        }
    }

    let mut raw_labels: Vec<i64> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (rec_idx, record) in reader.records().enumerate() {
        let line = rec_idx + 2; // header is line 1
        let record = record.map_err(|e| Error::ingest(format!("line {line}: {e}")))?;
        if record.len() < 3 {
            return Err(Error::ingest(format!(
                "line {line}: expected at least 3 fields (id,label,f0), got {}",
                record.len()
            )));
        }
        let label: i64 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::ingest(format!("line {line}: bad label `{}`", &record[1])))?;
        let feats: Vec<f64> = record
            .iter()
            .skip(2)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::ingest(format!("line {line}: bad feature value `{s}`")))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::ingest(format!(
                    "line {line}: expected {d} features, got {}",
                    feats.len()
                )));
            }
            _ => {}
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::ingest(format!("line {line}: non-finite feature")));
        }
        raw_labels.push(label);
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::ingest("file contains no data rows".to_string()));
    }
    let dim = dim.unwrap();

    // densify labels in sorted order of the originals
    let mut remap: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in &raw_labels {
        remap.entry(l).or_default();
    }
    for (dense, (_, v)) in remap.iter_mut().enumerate() {
        *v = dense;
    }
    let label_map = LabelMap {
        original: remap.keys().copied().collect(),
    };
    let labels: Vec<usize> = raw_labels.iter().map(|l| remap[l]).collect();

    let n = rows.len();
    let mut features = Array2::<f64>::zeros((n, dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            features[(i, j)] = v;
        }
    }

    let n_classes = label_map.original.len();
    let mut counts = vec![0usize; n_classes];
    for &l in &labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::ingest(format!(
            "class {} (dense {c}): class size < 2",
            label_map.original[c]
        )));
    }

    let ds = Dataset::new(features, labels, n_classes)?;
    Ok((ds, label_map))
}

/// Writes the CSV schema `id,label,f0,...,f{M-1}` with dense labels.
/// `f64` values print in Rust's shortest round-trip form, so a write/load
/// round trip reproduces the features exactly.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("id,label");
    for j in 0..ds.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for id in 0..ds.len() {
        let _ = write!(out, "{id},{}", ds.label(id));
        for &v in ds.feature(id).iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
