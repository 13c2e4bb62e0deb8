//! Acoustic word embedding laboratory.
//!
//! Trains fixed-dimensional embeddings of variable-length spoken word
//! segments under three learning objectives (phone n-gram detection,
//! word-to-phones decoding, contrastive triplets) with convolutional and
//! recurrent encoders, and evaluates the resulting spaces on word
//! discrimination (mAP) and phonological similarity (Kendall's tau against a
//! phonologically weighted Levenshtein distance).

pub mod checks;
pub mod corpus;
pub mod encoders;
pub mod evalkit;
pub mod objectives;
pub mod phonology;
pub mod rng;
pub mod trainer;
pub mod tensor;
