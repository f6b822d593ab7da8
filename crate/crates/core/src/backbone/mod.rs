//! Frozen encoder stub, synthetic corpus and feature-file I/O.

mod corpus;
mod features;
mod stub;

pub use corpus::{gen_corpus, Corpus, CorpusConfig, Split, CAPTIONS_PER_IMAGE};
pub use features::{
    decode_bank, encode_bank, entry, load_features, read_text_entry, save_features, text_entry, FeatureBank, MAGIC,
    VERSION,
};
pub use stub::{BackboneStub, Block, Pooling, StubConfig, StubVars};
