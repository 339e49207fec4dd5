//! Dataset records, caption augmentation, token-length handling, class
//! statistics and the synthetic benchmark generator.

mod records;
mod synthetic;

pub use records::{
    augment_caption, histogram_csv, label_matrix, pad_or_truncate, rare_category_stats, rare_stats_csv, read_jsonl,
    token_length_histogram, write_jsonl, ClassCatalog, DatasetRecord, LengthBucket, RareRow, AUGMENT_MARKER,
    RARE_MARKER,
};
pub use synthetic::{
    generate_synthetic, InputProvider, PlantedOptima, ProfileShape, RecordInputs, SnrProfile, SyntheticData,
    SyntheticSpec, SyntheticTruth, EOS_TOKEN, FILLER_TOKEN, WORD_BASE,
};
