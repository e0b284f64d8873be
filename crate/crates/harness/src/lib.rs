//! Training, evaluation, ablation and reporting around `seanet-core`.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod optim;
pub mod plots;
pub mod report;
pub mod train;
