use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub caption: String,
    #[serde(default)]
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    /// `seq_len x patch_input_dim`, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_patches: Option<Vec<Vec<f32>>>,
}

impl DatasetRecord {
    pub fn validate(&self, classes: usize, vocab_size: Option<usize>) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&c| c >= classes) {
            return Err(Error::OutOfRange {
                what: "label",
                value: format!("{bad} (record {})", self.id),
                allowed: format!("[0, {classes})"),
            });
        }
        if let (Some(tokens), Some(vocab)) = (&self.tokens, vocab_size) {
            if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::OutOfRange {
                    what: "token",
                    value: format!("{bad} (record {})", self.id),
                    allowed: format!("[0, {vocab})"),
                });
            }
        }
        if let Some(p) = &self.image_patches {
            let width = p.first().map_or(0, Vec::len);
            if p.iter().any(|row| row.len() != width) {
                return Err(Error::shape(format!("record {} has ragged image patches", self.id)));
            }
        }
        Ok(())
    }

    pub fn patches_array(&self) -> Option<Array2<f32>> {
        let p = self.image_patches.as_ref()?;
        let cols = p.first().map_or(0, Vec::len);
        Array2::from_shape_vec((p.len(), cols), p.concat()).ok()
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Dense `N x K` 0/1 label matrix.
pub fn label_matrix(records: &[DatasetRecord], classes: usize) -> Result<Array2<u8>> {
    let mut y = Array2::zeros((records.len(), classes));
    for (i, r) in records.iter().enumerate() {
        r.validate(classes, None)?;
        for &c in &r.labels {
            y[[i, c]] = 1;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub names: Vec<String>,
    /// Training-split occurrence counts.
    pub counts: Vec<usize>,
    /// Training-split size the counts refer to.
    pub n: usize,
    #[serde(default = "default_rare_threshold")]
    pub rare_threshold: f64,
    /// Irregular plurals, keyed by class name.
    #[serde(default)]
    pub plural_overrides: BTreeMap<String, String>,
    /// Names that are never pluralized (mass nouns).
    #[serde(default)]
    pub uncountable: Vec<String>,
}

fn default_rare_threshold() -> f64 {
    0.01
}

impl ClassCatalog {
    pub fn new(names: Vec<String>) -> Self {
        let k = names.len();
        Self {
            names,
            counts: vec![0; k],
            n: 0,
            rare_threshold: default_rare_threshold(),
            plural_overrides: BTreeMap::new(),
            uncountable: Vec::new(),
        }
    }

    /// Catalog with counts taken from a training split.
    pub fn from_records(names: Vec<String>, train: &[DatasetRecord]) -> Result<Self> {
        let mut cat = Self::new(names);
        cat.counts = class_counts(train, cat.classes())?;
        cat.n = train.len();
        Ok(cat)
    }

    pub fn classes(&self) -> usize {
        self.names.len()
    }

    pub fn is_rare(&self, class: usize) -> bool {
        self.n > 0 && (self.counts[class] as f64 / self.n as f64) < self.rare_threshold
    }

    pub fn plural(&self, class: usize) -> String {
        let name = &self.names[class];
        if let Some(p) = self.plural_overrides.get(name) {
            p.clone()
        } else if self.uncountable.iter().any(|u| u == name) {
            name.clone()
        } else {
            format!("{name}s")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.len() != self.names.len() {
            return Err(Error::shape(format!(
                "catalog has {} names and {} counts",
                self.names.len(),
                self.counts.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.rare_threshold) {
            return Err(Error::invalid(format!("rare_threshold {} outside [0, 1]", self.rare_threshold)));
        }
        Ok(())
    }
}

fn class_counts(records: &[DatasetRecord], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; classes];
    for r in records {
        r.validate(classes, None)?;
        let mut seen = r.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            counts[c] += 1;
        }
    }
    Ok(counts)
}

pub const AUGMENT_MARKER: &str = " In this photo, there are also some ";
pub const RARE_MARKER: &str = " In the photo's subtle background, you can also spot some ";

/// Appends the label sentence (and, for rare classes, the background
/// sentence) to a caption. Names are listed in catalog index order. A
/// caption that already carries the label sentence is returned unchanged.
pub fn augment_caption(record: &DatasetRecord, catalog: &ClassCatalog) -> Result<String> {
    let mut labels = record.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    if let Some(&bad) = labels.iter().find(|&&c| c >= catalog.classes()) {
        return Err(Error::OutOfRange {
            what: "label",
            value: format!("{bad} (record {})", record.id),
            allowed: format!("[0, {})", catalog.classes()),
        });
    }
    if labels.is_empty() || record.caption.contains(AUGMENT_MARKER) {
        return Ok(record.caption.clone());
    }
    let all: Vec<String> = labels.iter().map(|&c| catalog.plural(c)).collect();
    let mut out = format!("{}{AUGMENT_MARKER}{}.", record.caption, all.join(", "));
    let rare: Vec<String> = labels.iter().filter(|&&c| catalog.is_rare(c)).map(|&c| catalog.plural(c)).collect();
    if !rare.is_empty() {
        out.push_str(&format!("{RARE_MARKER}{}.", rare.join(", ")));
    }
    Ok(out)
}

/// Exactly `len` tokens: truncated, or padded with `eos_id`.
pub fn pad_or_truncate(tokens: &[u32], len: usize, eos_id: u32) -> Vec<u32> {
    let mut out: Vec<u32> = tokens.iter().copied().take(len).collect();
    out.resize(len, eos_id);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

/// Counts lengths in buckets `[1, w], [w+1, 2w], ...` up to the longest
/// one present. A zero length is counted in the first bucket.
pub fn token_length_histogram(lengths: &[usize], width: usize) -> Result<Vec<LengthBucket>> {
    if width == 0 {
        return Err(Error::invalid("bucket width must be >= 1"));
    }
    let bucket = |len: usize| len.saturating_sub(1) / width;
    let n_buckets = lengths.iter().map(|&l| bucket(l) + 1).max().unwrap_or(0);
    let mut out: Vec<LengthBucket> = (0..n_buckets)
        .map(|i| LengthBucket {
            lo: i * width + 1,
            hi: (i + 1) * width,
            count: 0,
        })
        .collect();
    for &l in lengths {
        out[bucket(l)].count += 1;
    }
    Ok(out)
}

pub fn histogram_csv(buckets: &[LengthBucket]) -> String {
    let mut out = String::from("lo,hi,count\n");
    for b in buckets {
        out.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareRow {
    pub name: String,
    pub count: usize,
    pub percentage: f64,
}

/// Classes whose share of the split is below the catalog threshold, most
/// frequent first (ties in catalog order).
pub fn rare_category_stats(records: &[DatasetRecord], catalog: &ClassCatalog) -> Result<Vec<RareRow>> {
    if records.is_empty() {
        return Err(Error::invalid("rare-category statistics need a non-empty split"));
    }
    let counts = class_counts(records, catalog.classes())?;
    let n = records.len() as f64;
    let mut rows: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| (c as f64 / n) < catalog.rare_threshold)
        .map(|(i, &c)| (i, c))
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rows
        .into_iter()
        .map(|(i, c)| RareRow {
            name: catalog.names[i].clone(),
            count: c,
            percentage: 100.0 * c as f64 / n,
        })
        .collect())
}

pub fn rare_stats_csv(rows: &[RareRow]) -> String {
    let mut out = String::from("name,count,percentage\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.4}\n", r.name, r.count, r.percentage));
    }
    out
}
