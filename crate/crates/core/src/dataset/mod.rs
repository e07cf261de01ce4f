//! Synthetic bilingual fact corpora, tokenization and pretraining.

mod corpus;
mod jaccard;
mod pretrain;
mod tokenizer;

pub use corpus::{
    by_language, by_pairs, fill, generate_corpus, load_records, pair_ids, save_records, CorpusConfig, FactRecord,
    JaccardProfile, Language, NeighborhoodPrompt, Stratum, N_NEIGHBORS, N_PARAPHRASES, SUBJECT_SLOT,
};
pub use jaccard::{
    jaccard_index, matched_pairs, pair_subject_jaccard, similarity_histogram, Histogram, SimilarityReport, N_BINS,
};
pub use pretrain::{
    category_of, corpus_texts, corpus_tokenizer, encode_prompt, fact_recall, is_a_prompt, pretrain, PretrainConfig,
    PretrainData, PretrainReport,
};
pub use tokenizer::{Tokenizer, BOS, PAD, SEP, TOKENIZER_VERSION};
