//! Model criticism in latent space.
//!
//! A critic is a latent-variable generative model used only to project
//! documents into latent structure and score that structure under its prior.
//! Comparing the scores of real data and model samples exposes failures that
//! are hard to see at the token level.

pub mod corpus;
pub mod critic;
pub mod error;
pub mod hsmm;
pub mod math;
pub mod ngram;
pub mod topics;

pub use critic::{
    compare, corpus_score, latent_nll, score_documents, Critic, CriticScore, Decomposition, LatentProjection,
    OnUnscorable, ProjectionMode,
};
pub use error::{Error, ErrorClass, Result};
