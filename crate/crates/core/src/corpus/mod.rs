//! Corpus ingestion: manifests, vocabularies, pretrained embedding tables,
//! figure preprocessing, balanced pair sampling and data splits.

mod dataset;
mod embeddings;
mod image;
mod record;
mod sampler;
mod splits;
pub mod synth;
mod vocab;

pub use dataset::Dataset;
pub use embeddings::{EmbeddingTable, PretrainedTables, TableKind};
pub use image::{load_image, preprocess, rgb_to_tensor, tensor_to_rgb, IMAGE_SIZE};
pub use record::{load_manifest, tokenize, write_manifest, CorpusRecord};
pub use sampler::{sample_batches, Pair, PairBatch, PairSampler, BATCH_SIZE};
pub use splits::{make_splits, retrieval_test_size, SplitMode, Splits, RETRIEVAL_TEST_SIZE};
pub use vocab::{encode_caption, EncodedCaption, Vocab, MAX_CAPTION_LEN, PAD, UNK};
