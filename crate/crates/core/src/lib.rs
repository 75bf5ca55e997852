//! Sequence-labeling toolkit built around a differentiable,
//! lexicon-constrained beam search decoder.
//!
//! A frame scorer, a token-transition model and a word-level language model
//! are trained jointly by backpropagating through the beam search itself;
//! the ASG criterion (Forward numerator against an unconstrained
//! normalizer) bootstraps the scorer before beam training takes over.
//! Everything runs on plain f64 log-domain scores.

pub mod align;
pub mod config;
pub mod data;
pub mod dbd;
pub mod error;
pub mod gradcheck;
pub mod lexicon;
pub mod lm;
pub mod lognum;
pub mod metrics;
pub mod scorer;
pub mod tensor;
pub mod token;
pub mod train;

pub use align::{
    asg_loss, asg_normalizer, forward_grad, forward_score, viterbi_align, viterbi_decode,
    EmissionTable, TargetTokens, TransitionMatrix,
};
pub use dbd::{
    dbd_backward, dbd_decode, dbd_forward, dbd_loss, frozen_replay, Aggregation, DecodeLattice,
    DecoderOpts, LossReport,
};
pub use error::{CoreError, Result};
pub use lexicon::{build_trie, spell, Lexicon, Trie, TrieState, WordId};
pub use lm::{arpa_load, arpa_save, ngram_train, BilinearLm, NGramLm, PretrainedWrapper, WordLm};
pub use lognum::{dlogadd, logadd, logadd_many, logsubexp, LogScore, NEG_INF};
pub use scorer::{FeatureSequence, GluArch, GluConvScorer, LinearScorer, Scorer};
pub use tensor::Mat;
pub use token::{TokenId, TokenSet};
