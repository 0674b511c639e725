//! Human-centric LiDAR scene perception at desk scale.
//!
//! The crate bundles everything needed to train and evaluate two
//! point-cloud perception pipelines on synthetic labeled scenes:
//!
//! - an interaction-aware instance-segmentation head ([`seg`]) on top of a
//!   PointNet++-style backbone ([`backbone`]),
//! - a two-stage action-recognition pipeline ([`action`]) built from
//!   multi-resolution crop features and ego-neighbour cross-attention,
//! - the full evaluation-metric suite ([`metrics`]): semantic mIoU,
//!   instance-mask AP, center-distance detection AP, and action
//!   mAP/mRecall/mPrecision/mAcc,
//! - a deterministic synthetic scene generator ([`synth`]) that stands in
//!   for real captures, with oracle annotations,
//! - dense fp64 linear algebra with reverse-mode gradients ([`tensor`]),
//! - geometric primitives ([`points`]) and bit-exact file formats ([`io`]),
//! - a finite-difference gradient-check registry ([`gradcheck`]) covering
//!   every differentiable block end to end.

pub mod action;
pub mod backbone;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod points;
pub mod seg;
pub mod synth;
pub mod tensor;
pub mod types;
