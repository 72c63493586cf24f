//! Negative-margin contrastive learning for audio-visual sound source
//! localization.
//!
//! * [`numerics`]: small dense containers, deterministic RNG streams and a
//!   central-difference gradient checker.
//! * [`avmap`]: cosine response maps and sigmoid-thresholded pooling.
//! * [`marginnce`]: batch similarity matrices and the margin InfoNCE loss.
//! * [`metrics`]: cIoU, success curves and AUC.
//! * [`synthdata`]: synthetic scenes with faulty positives and negatives.
//! * [`trainer`]: toy encoders, hand-written backprop, training and experiments.
//! * [`formats`]: on-disk schemas (datasets, annotations, predictions,
//!   checkpoints, CSV reports).
//! * [`cli`]: the `marginnce` command-line tool.

pub mod avmap;
pub mod cli;
pub mod formats;
pub mod marginnce;
pub mod metrics;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use avmap::{cosine_response_map, soft_threshold_pool, soft_threshold_pool_grad, PoolConfig, ResponseMap};
pub use marginnce::{info_nce_loss, margin_nce_grad, margin_nce_loss, similarity_matrix, LossConfig, SimilarityMatrix};
pub use numerics::{finite_diff_grad, sigmoid, Grid3, Mat2, RngStream, Vec1};
