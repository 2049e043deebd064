//! GPTRec: generative sequential recommendation.
//!
//! A GPT-2 style causal decoder over item (or sub-item) tokens, SVD-based
//! sub-item tokenisation, Top-K / Next-K / multi-token generation and a
//! leave-one-out evaluation harness.

pub mod binio;
pub mod data;
pub mod eval;
pub mod generate;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod svd;
pub mod tokeniser;
pub mod train;
