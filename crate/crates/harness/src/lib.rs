//! Training, evaluation, and experiment plumbing around the core augmentor.

pub mod placeholder {}
