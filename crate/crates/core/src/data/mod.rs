//! Synthetic corpus, byte tokenizer, augmentation, shards and batching.

pub mod augment;
pub mod corpus;
pub mod loader;
pub mod shard;
pub mod tokenizer;

pub use augment::random_resized_crop;
pub use corpus::{generate_corpus, recover_class, write_corpus, Corpus, CorpusSpec, Manifest};
pub use loader::{to_unit_range, Batch, BatchPlan, Dataset, Prefetcher};
pub use shard::{decode_shard, encode_shard, read_shard, write_shard, Record};
pub use tokenizer::Tokenizer;
