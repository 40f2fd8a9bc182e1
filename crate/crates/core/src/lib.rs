//! Multimodal domain-generalization engine for egocentric action recognition.
//!
//! Per-modality encoders are trained over precomputed appearance, motion and
//! audio embeddings, aligned contrastively with narration features, and fused
//! with consistency-weighted audio. Evaluation holds out one
//! (scenario, location) domain at a time and reports the relative performance
//! drop against in-domain training.

pub mod consistency;
pub mod datamodel;
pub mod eval_report;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;
