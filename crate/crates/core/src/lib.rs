//! Streamline classification for a target fiber pathway.
//!
//! The crate covers the whole path from tractography files to evaluated
//! predictions:
//!
//! * [`tract_io`]: TRK v2 and text tractogram files;
//! * [`streamline`]: arc length, length filtering, mean FA, resampling and
//!   coordinate normalization;
//! * [`augment`]: class balancing by repeated ordered point subsampling;
//! * [`nn`]: the point-cloud encoder, projection and classifier heads, their
//!   gradients and the Adam optimizer;
//! * [`contrastive`]: the supervised contrastive loss with FA-constrained
//!   positive pairs;
//! * [`pipeline`]: two-stage training, prediction, dataset files and metrics;
//! * [`synth`]: labeled synthetic tractograms for controlled experiments.

pub mod augment;
mod kv;
pub mod contrastive;
pub mod nn;
pub mod pipeline;
pub mod streamline;
pub mod synth;
pub mod tract_io;
