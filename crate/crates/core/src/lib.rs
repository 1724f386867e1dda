//! Multilingual visual-semantic embeddings with diversity-regularized
//! multi-head attention: encoders, objectives, training, and evaluation on
//! (image, language-A sentence, language-B sentence) triples.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod training;
