//! Frozen-backbone transfer learning benchmark for five-grade diabetic
//! retinopathy classification: data ingestion, seeded augmentation, native
//! backbones, a trainable dense head, Adam, per-class evaluation and reports.

pub mod config;
pub mod container;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod seed;
pub mod train;
