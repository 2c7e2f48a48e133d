//! Records, vocabularies, splits, batching and the synthetic generator.

pub mod batch;
pub mod dataset;
pub mod generator;
pub mod record;
pub mod vocab;

pub use batch::{collate, mask_count, mask_sample, Batch, BatchItem, MaskSample, Mode, TowerInput, DEFAULT_MASK_RATIO};
pub use dataset::{
    ingest, ingest_lines, parse_record_lines, IngestOptions, IngestReport, MultiCenterDataset, Partition, Split,
    VocabSource, DEFAULT_MIN_RECORDS_PER_CENTER, RECORDS_FILE,
};
pub use generator::{generate, GeneratorConfig};
pub use record::{Record, RecordLine};
pub use vocab::{VocabSizes, Vocabularies, Vocabulary};
