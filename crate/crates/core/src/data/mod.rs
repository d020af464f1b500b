//! Datasets, corruption and synthetic corpora.

mod corpus;
mod corrupt;
mod dataset;

pub use corpus::{
    make_pretrain_corpus, make_toy_corpus, split_fragments, write_pretrain_corpus, CorruptionStats, ToyCorpus,
    ToyManifest, ToySpec, MAX_FRAGMENT,
};
pub use corrupt::{corrupt_fragment, Branch, Corruption, CorruptionPolicy, Selection};
pub use dataset::{
    dataset_stats, format_dataset, parse_dataset, read_dataset, write_dataset, CorrectionExample, DatasetStats,
};
