//! Synthetic multi-label benchmark with a planted discriminability landscape.
//!
//! Every record carries image patches and a token sequence at full class
//! signal. When features are requested for grid cell `(t, b)`, the signal
//! is scaled by the modality profile value `v(t, b)` before the sample
//! enters the backbone:
//!
//! * image: `patches = nuisance + v * a * sum_c s_img[c] * pattern_c`;
//! * text: each class-word token of class `c` survives with probability
//!   `v * s_txt[c]` and is otherwise replaced by a filler token. The
//!   per-position uniforms are fixed per record, so surviving sets are
//!   nested as `v` grows.
//!
//! The per-class strengths `s_img`, `s_txt` let the two modalities be good
//! at different classes.

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::records::{ClassCatalog, DatasetRecord};
use crate::backbone::{Sample, SampleInput};
use crate::error::{Error, Result};
use crate::features::Modality;
use crate::rng;

/// Token id used for padding and end of sequence.
pub const EOS_TOKEN: u32 = 0;
/// Token that replaces a suppressed class word.
pub const FILLER_TOKEN: u32 = 1;
/// Class `c` is spelled by token `WORD_BASE + c`.
pub const WORD_BASE: u32 = 2;

const DEFAULT_NAMES: [&str; 12] = [
    "person", "bicycle", "car", "dog", "chair", "bottle", "cup", "kite", "bench", "clock", "umbrella", "toaster",
];

const STREAM_LABELS: u64 = 1;
const STREAM_PATCHES: u64 = 2;
const STREAM_TOKENS: u64 = 3;
const STREAM_KEEP: u64 = 4;
const STREAM_PATTERNS: u64 = 5;

/// Discriminability `v(t, b)` in `[0, 1]` over a candidate grid; rows are
/// timesteps and columns are blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrProfile {
    pub timesteps: Vec<usize>,
    pub blocks: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

/// Parametric profile families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileShape {
    /// Isotropic Gaussian bump over grid indices with its maximum at `peak`.
    Peaked { peak: [usize; 2], spread: f64, floor: f64 },
    /// `floor + (1 - floor) * exp(-i_t / t_scale) * exp(-(n_b - 1 - i_b) / b_scale)`:
    /// decreasing in t, increasing in b.
    Monotone { t_scale: f64, b_scale: f64, floor: f64 },
    Table { values: Vec<Vec<f64>> },
}

impl SnrProfile {
    pub fn from_shape(timesteps: Vec<usize>, blocks: Vec<usize>, shape: &ProfileShape) -> Result<Self> {
        let (nt, nb) = (timesteps.len(), blocks.len());
        let values = match shape {
            ProfileShape::Peaked { peak, spread, floor } => {
                if peak[0] >= nt || peak[1] >= nb {
                    return Err(Error::invalid(format!("profile peak {peak:?} outside a {nt}x{nb} grid")));
                }
                if *spread <= 0.0 {
                    return Err(Error::invalid("profile spread must be positive"));
                }
                (0..nt)
                    .map(|i| {
                        (0..nb)
                            .map(|j| {
                                let d2 = (i as f64 - peak[0] as f64).powi(2) + (j as f64 - peak[1] as f64).powi(2);
                                floor + (1.0 - floor) * (-d2 / (2.0 * spread * spread)).exp()
                            })
                            .collect()
                    })
                    .collect()
            }
            ProfileShape::Monotone { t_scale, b_scale, floor } => {
                if *t_scale <= 0.0 || *b_scale <= 0.0 {
                    return Err(Error::invalid("profile scales must be positive"));
                }
                (0..nt)
                    .map(|i| {
                        (0..nb)
                            .map(|j| {
                                let decay = (-(i as f64) / t_scale).exp() * (-((nb - 1 - j) as f64) / b_scale).exp();
                                floor + (1.0 - floor) * decay
                            })
                            .collect()
                    })
                    .collect()
            }
            ProfileShape::Table { values } => values.clone(),
        };
        let profile = Self { timesteps, blocks, values };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps.is_empty() || self.blocks.is_empty() {
            return Err(Error::invalid("profile grid is empty"));
        }
        if self.values.len() != self.timesteps.len() || self.values.iter().any(|r| r.len() != self.blocks.len()) {
            return Err(Error::shape(format!(
                "profile values do not form a {}x{} table",
                self.timesteps.len(),
                self.blocks.len()
            )));
        }
        let flat = self.values.iter().flatten();
        if flat.clone().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("profile values must lie in [0, 1]"));
        }
        if flat.clone().all(|&v| v == 0.0) {
            return Err(Error::Degenerate("profile is zero everywhere".into()));
        }
        Ok(())
    }

    /// Grid indices of `(t, b)`.
    pub fn index_of(&self, t: usize, b: usize) -> Option<(usize, usize)> {
        let i = self.timesteps.iter().position(|&x| x == t)?;
        let j = self.blocks.iter().position(|&x| x == b)?;
        Some((i, j))
    }

    pub fn value(&self, t: usize, b: usize) -> Option<f64> {
        self.index_of(t, b).map(|(i, j)| self.values[i][j])
    }

    /// Index of the maximum; ties go to the smaller timestep, then block.
    pub fn argmax_index(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > self.values[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// `(t, b)` values of the maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let (i, j) = self.argmax_index();
        (self.timesteps[i], self.blocks[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub classes: usize,
    /// Expected number of labels per record (at least 1).
    pub label_density: f64,
    /// Relative class frequencies; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_frequencies: Option<Vec<f64>>,
    pub seed: u64,
    pub image_profile: SnrProfile,
    pub text_profile: SnrProfile,
    pub image_seq_len: usize,
    pub patch_dim: usize,
    /// Amplitude `a` of the class patterns relative to unit nuisance.
    pub image_signal: f64,
    pub image_class_strength: Vec<f64>,
    pub text_seq_len: usize,
    pub vocab_size: usize,
    /// Copies of each class word in a record's token sequence.
    pub word_repeats: usize,
    pub text_class_strength: Vec<f64>,
}

impl SyntheticSpec {
    pub fn max_labels(&self) -> usize {
        (self.text_seq_len / self.word_repeats.max(1)).min(self.classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::invalid("synthetic splits must be non-empty"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("synthetic benchmark needs at least 2 classes"));
        }
        if self.word_repeats == 0 || self.max_labels() == 0 {
            return Err(Error::invalid("text sequence too short to hold a class word"));
        }
        if !(1.0..=self.max_labels() as f64).contains(&self.label_density) {
            return Err(Error::invalid(format!(
                "label_density {} outside [1, {}]",
                self.label_density,
                self.max_labels()
            )));
        }
        if self.vocab_size <= (WORD_BASE as usize + self.classes) {
            return Err(Error::invalid("vocab_size leaves no room for distractor tokens"));
        }
        if self.image_seq_len == 0 || self.patch_dim == 0 {
            return Err(Error::invalid("image patches must be non-empty"));
        }
        for (name, s) in [("image", &self.image_class_strength), ("text", &self.text_class_strength)] {
            if s.len() != self.classes || s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("{name}_class_strength must hold {} values in [0, 1]", self.classes)));
            }
        }
        if let Some(f) = &self.class_frequencies {
            if f.len() != self.classes || f.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("class_frequencies must hold one positive weight per class"));
            }
        }
        if !self.image_signal.is_finite() || self.image_signal < 0.0 {
            return Err(Error::invalid("image_signal must be finite and non-negative"));
        }
        self.image_profile.validate()?;
        self.text_profile.validate()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes)
            .map(|i| DEFAULT_NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedOptima {
    /// `(t, b)` of the image profile maximum.
    pub image: (usize, usize),
    pub text: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub catalog: ClassCatalog,
    pub planted: PlantedOptima,
}

/// Per-sample backbone input for a grid cell.
pub trait InputProvider: Sync {
    fn sample(&self, record: &DatasetRecord, modality: Modality, t: usize, b: usize) -> Result<Sample>;
}

/// Uses records as stored: patches for images, tokens padded or truncated
/// to `text_seq_len` for text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordInputs {
    pub text_seq_len: usize,
    pub eos_id: u32,
}

impl InputProvider for RecordInputs {
    fn sample(&self, record: &DatasetRecord, modality: Modality, _t: usize, _b: usize) -> Result<Sample> {
        let input = match modality {
            Modality::Image => SampleInput::Patches(
                record
                    .patches_array()
                    .ok_or_else(|| Error::invalid(format!("record {} has no image patches", record.id)))?,
            ),
            Modality::Text => {
                let tokens = record
                    .tokens
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("record {} has no tokens", record.id)))?;
                SampleInput::Tokens(super::pad_or_truncate(tokens, self.text_seq_len, self.eos_id))
            }
            Modality::Fused => return Err(Error::invalid("fused features are not extracted from records")),
        };
        Ok(Sample { id: record.id, input })
    }
}

/// Generator state needed to re-derive the per-cell signal strength.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    spec: SyntheticSpec,
    /// `K x patch_dim` class directions.
    patterns: Array2<f32>,
}

impl SyntheticTruth {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut stream = rng::keyed(rng::domain::SYNTHETIC, spec.seed, &[STREAM_PATTERNS]);
        let patterns =
            Array2::from_shape_simple_fn((spec.classes, spec.patch_dim), || stream.sample::<f64, _>(StandardNormal) as f32);
        Ok(Self { spec, patterns })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn signal_row(&self, labels: &[usize], scale: f64) -> Array1<f32> {
        let mut row = Array1::<f32>::zeros(self.spec.patch_dim);
        for &c in labels {
            let w = (scale * self.spec.image_signal * self.spec.image_class_strength[c]) as f32;
            row.scaled_add(w, &self.patterns.row(c));
        }
        row
    }

    fn profile(&self, modality: Modality) -> Result<&SnrProfile> {
        match modality {
            Modality::Image => Ok(&self.spec.image_profile),
            Modality::Text => Ok(&self.spec.text_profile),
            Modality::Fused => Err(Error::invalid("fused features are not extracted from records")),
        }
    }

    fn keep_draws(&self, id: u64) -> Vec<f64> {
        let mut stream = rng::keyed(rng::domain::SYNTHETIC, self.spec.seed, &[STREAM_KEEP, id]);
        (0..self.spec.text_seq_len).map(|_| stream.random::<f64>()).collect()
    }
}

impl InputProvider for SyntheticTruth {
    fn sample(&self, record: &DatasetRecord, modality: Modality, t: usize, b: usize) -> Result<Sample> {
        let profile = self.profile(modality)?;
        let v = profile.value(t, b).ok_or_else(|| Error::OutOfRange {
            what: "grid cell",
            value: format!("({t}, {b})"),
            allowed: format!("timesteps {:?} x blocks {:?}", profile.timesteps, profile.blocks),
        })?;
        let input = match modality {
            Modality::Image => {
                let mut patches = record
                    .patches_array()
                    .ok_or_else(|| Error::invalid(format!("record {} has no image patches", record.id)))?;
                // Stored patches carry the full signal; remove the suppressed share.
                let removed = self.signal_row(&record.labels, 1.0 - v);
                patches -= &removed;
                SampleInput::Patches(patches)
            }
            _ => {
                let tokens = record
                    .tokens
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("record {} has no tokens", record.id)))?;
                let draws = self.keep_draws(record.id);
                let k = self.spec.classes as u32;
                let out = tokens
                    .iter()
                    .zip(&draws)
                    .map(|(&tok, &u)| {
                        if (WORD_BASE..WORD_BASE + k).contains(&tok) {
                            let c = (tok - WORD_BASE) as usize;
                            if u < v * self.spec.text_class_strength[c] {
                                tok
                            } else {
                                FILLER_TOKEN
                            }
                        } else {
                            tok
                        }
                    })
                    .collect();
                SampleInput::Tokens(out)
            }
        };
        Ok(Sample { id: record.id, input })
    }
}

fn draw_labels(spec: &SyntheticSpec, stream: &mut impl Rng) -> Vec<usize> {
    let extra = if spec.classes > 1 && spec.label_density > 1.0 {
        let p = ((spec.label_density - 1.0) / (spec.classes - 1) as f64).min(1.0);
        Binomial::new((spec.classes - 1) as u64, p).expect("valid binomial").sample(stream) as usize
    } else {
        0
    };
    let count = (1 + extra).min(spec.max_labels());
    let weights = spec.class_frequencies.clone().unwrap_or_else(|| vec![1.0; spec.classes]);
    let classes: Vec<usize> = (0..spec.classes).collect();
    let mut labels: Vec<usize> = classes
        .choose_multiple_weighted(stream, count, |&c| weights[c])
        .expect("positive weights")
        .copied()
        .collect();
    labels.sort_unstable();
    labels
}

fn make_record(spec: &SyntheticSpec, truth: &SyntheticTruth, id: u64, names: &[String]) -> DatasetRecord {
    let labels = draw_labels(spec, &mut rng::keyed(rng::domain::SYNTHETIC, spec.seed, &[STREAM_LABELS, id]));

    let mut stream = rng::keyed(rng::domain::SYNTHETIC, spec.seed, &[STREAM_PATCHES, id]);
    let signal = truth.signal_row(&labels, 1.0);
    let patches: Vec<Vec<f32>> = (0..spec.image_seq_len)
        .map(|_| {
            signal
                .iter()
                .map(|&s| s + stream.sample::<f64, _>(StandardNormal) as f32)
                .collect()
        })
        .collect();

    let mut stream = rng::keyed(rng::domain::SYNTHETIC, spec.seed, &[STREAM_TOKENS, id]);
    let first_distractor = WORD_BASE + spec.classes as u32;
    let mut tokens: Vec<u32> = labels
        .iter()
        .flat_map(|&c| std::iter::repeat_n(WORD_BASE + c as u32, spec.word_repeats))
        .collect();
    while tokens.len() < spec.text_seq_len {
        tokens.push(stream.random_range(first_distractor..spec.vocab_size as u32));
    }
    tokens.shuffle(&mut stream);

    let words: Vec<&str> = labels.iter().map(|&c| names[c].as_str()).collect();
    DatasetRecord {
        id,
        caption: format!("A synthetic scene with {}.", words.join(" and ")),
        labels,
        tokens: Some(tokens),
        image_patches: Some(patches),
    }
}

/// Train and validation records plus the planted optimum of each profile.
/// Record ids are `0..n_train` for training and continue for validation.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let truth = SyntheticTruth::new(spec.clone())?;
    let names = spec.class_names();
    let total = (spec.n_train + spec.n_val) as u64;
    let mut records: Vec<DatasetRecord> = (0..total).map(|id| make_record(spec, &truth, id, &names)).collect();
    let val = records.split_off(spec.n_train);
    let catalog = ClassCatalog::from_records(names, &records)?;
    Ok(SyntheticData {
        train: records,
        val,
        catalog,
        planted: PlantedOptima {
            image: spec.image_profile.argmax(),
            text: spec.text_profile.argmax(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> (Vec<usize>, Vec<usize>) {
        (vec![10, 20, 30, 50, 100, 150], vec![3, 4, 5, 7, 8])
    }

    pub(crate) fn small_spec() -> SyntheticSpec {
        let (ts, bs) = grid();
        SyntheticSpec {
            n_train: 40,
            n_val: 20,
            classes: 4,
            label_density: 1.5,
            class_frequencies: None,
            seed: 3,
            image_profile: SnrProfile::from_shape(
                ts,
                bs.clone(),
                &ProfileShape::Peaked { peak: [2, 1], spread: 1.0, floor: 0.0 },
            )
            .unwrap(),
            text_profile: SnrProfile::from_shape(
                vec![0, 10, 20, 30],
                bs,
                &ProfileShape::Monotone { t_scale: 1.0, b_scale: 1.0, floor: 0.0 },
            )
            .unwrap(),
            image_seq_len: 4,
            patch_dim: 6,
            image_signal: 0.5,
            image_class_strength: vec![1.0, 1.0, 0.3, 0.3],
            text_seq_len: 8,
            vocab_size: 20,
            word_repeats: 2,
            text_class_strength: vec![0.3, 0.3, 1.0, 1.0],
        }
    }

    #[test]
    fn planted_optima() {
        let data = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(data.planted.image, (30, 4));
        assert_eq!(data.planted.text, (0, 8));
        let small = SnrProfile::from_shape(
            vec![1, 2, 3, 4],
            vec![1, 2, 3],
            &ProfileShape::Peaked { peak: [2, 1], spread: 0.7, floor: 0.1 },
        )
        .unwrap();
        assert_eq!(small.argmax_index(), (2, 1));
    }

    #[test]
    fn profile_shapes_follow_trends() {
        let s = small_spec();
        let img = &s.image_profile.values;
        for row in img {
            assert!(row[0] < row[1] && row[1] > row[2] && row[2] > row[3]);
        }
        let txt = &s.text_profile.values;
        for i in 0..txt.len() {
            for j in 0..txt[0].len() {
                if i + 1 < txt.len() {
                    assert!(txt[i][j] > txt[i + 1][j]);
                }
                if j + 1 < txt[0].len() {
                    assert!(txt[i][j] < txt[i][j + 1]);
                }
            }
        }
    }

    #[test]
    fn degenerate_profiles_rejected() {
        let zero = ProfileShape::Table { values: vec![vec![0.0; 2]; 2] };
        assert!(matches!(
            SnrProfile::from_shape(vec![1, 2], vec![1, 2], &zero),
            Err(Error::Degenerate(_))
        ));
        let bad = ProfileShape::Peaked { peak: [5, 0], spread: 1.0, floor: 0.0 };
        assert!(SnrProfile::from_shape(vec![1, 2], vec![1, 2], &bad).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 4;
        assert_ne!(generate_synthetic(&other).unwrap().train, a.train);
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.val[0].id, 40);
        for r in a.train.iter().chain(&a.val) {
            r.validate(4, Some(20)).unwrap();
            assert!(!r.labels.is_empty());
            assert_eq!(r.tokens.as_ref().unwrap().len(), 8);
        }
    }

    #[test]
    fn full_signal_cell_reproduces_stored_inputs() {
        let spec = small_spec();
        let data = generate_synthetic(&spec).unwrap();
        let truth = SyntheticTruth::new(spec).unwrap();
        let r = &data.train[0];
        let s = truth.sample(r, Modality::Text, 0, 8).unwrap();
        assert_eq!(s.input, SampleInput::Tokens(r.tokens.clone().unwrap()));
        let s = truth.sample(r, Modality::Image, 30, 4).unwrap();
        match s.input {
            SampleInput::Patches(p) => assert_eq!(p, r.patches_array().unwrap()),
            _ => panic!("expected patches"),
        }
        assert!(truth.sample(r, Modality::Image, 31, 4).is_err());
    }

    #[test]
    fn text_signal_is_nested_in_profile_value() {
        let spec = small_spec();
        let data = generate_synthetic(&spec).unwrap();
        let truth = SyntheticTruth::new(spec).unwrap();
        let kept = |t, b, r: &DatasetRecord| match truth.sample(r, Modality::Text, t, b).unwrap().input {
            SampleInput::Tokens(tok) => tok.iter().map(|&x| x != FILLER_TOKEN).collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        for r in &data.train {
            let weak = kept(30, 3, r);
            let strong = kept(0, 7, r);
            assert!(weak.iter().zip(&strong).all(|(w, s)| !w || *s));
        }
    }

    #[test]
    fn planted_frequencies() {
        let mut spec = small_spec();
        spec.n_train = 400;
        spec.class_frequencies = Some(vec![1.0, 1.0, 1.0, 0.01]);
        let data = generate_synthetic(&spec).unwrap();
        let c = &data.catalog.counts;
        assert!(c[3] < c[0] / 10, "{c:?}");
        assert_eq!(data.catalog.n, 400);
    }
}
