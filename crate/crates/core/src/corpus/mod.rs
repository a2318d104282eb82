//! Command grammar, vocabulary, and the demonstration dataset.

pub(crate) mod dataset;
mod grammar;

pub use dataset::{
    build_dataset, default_cells, iterate, load_dataset, split_of, Batch, CorpusError,
    DatasetConfig, DatasetHandle, Demonstration, Split, SCHEMA, SCHEMA_VERSION,
};
pub use grammar::{grammar_sample, Command, Vocabulary};
