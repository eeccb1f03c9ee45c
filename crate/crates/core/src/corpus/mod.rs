//! Synthetic dubbing corpus: generator, on-disk tensor format and manifest.

mod generate;
mod manifest;
mod tensor;

pub use generate::{
    generate_triples, phoneme_symbol, CorpusConfig, GeneratedSentence, Generator, GeneratorTables, NoiseScales, Split,
    StreamEncoding, Triple, SYMBOLS,
};
pub use manifest::{
    corpus_hash, generate_corpus, load_manifest, write_corpus, Corpus, CorpusInfo, Manifest, SampleRecord,
    SentenceRecord, INFO_FILE, MANIFEST_FILE, TEMPLATES_FILE,
};
pub use tensor::{decode_tensor, encode_tensor, header_len, read_matrix, read_tensor, write_tensor, MAGIC};

#[cfg(test)]
mod tests;
