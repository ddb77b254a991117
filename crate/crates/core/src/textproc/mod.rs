//! Tokenization, vocabulary, overlap metrics and copy diagnostics.

mod hallucination;
mod metrics;
mod tokenize;
mod vocab;

pub use hallucination::{
    align_predictions, hallucination_report, prediction_records, read_predictions, write_predictions, HallucinationReport,
    ItemScores, PredictionRecord, SimilarityBlock, SourceScores, COPY_NGRAM, INCORRECT_THRESHOLD,
};
pub use metrics::{bleu, corpus_bleu, lcs_len, rouge_l, shares_ngram, BleuStats, BLEU_EPSILON, ROUGE_BETA};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SEP, UNK};
