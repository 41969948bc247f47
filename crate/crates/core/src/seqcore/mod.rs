//! Interleaved sequence data model: vocabulary, patch grids, flattening with
//! target-modality routing keys, dataset instances, configuration and the
//! corpus file format.

pub mod config;
pub mod corpus;
pub mod grid;
pub mod instance;
pub mod sequence;
pub mod vocab;

pub use config::{AdapterVariant, ModelConfig, WrappedLayer};
pub use corpus::{
    decode_corpus, deserialize_instance, encode_corpus, read_corpus, serialize_instance,
    write_corpus,
};
pub use grid::PatchGrid;
pub use instance::{DatasetInstance, Example, Metadata};
pub use sequence::{
    flatten, Element, FlatBuilder, FlatSequence, ImageSpan, InterleavedSequence, Segment,
    TargetModality,
};
pub use vocab::{ByteCodec, SpecialToken, TokenId, Vocab};
