//! Combination-homomorphic feature learning for two-part gesture labels.
//!
//! An encoder and a feature combination operator are pretrained so that
//! combining the features of a direction gesture and a modifier gesture
//! lands near the features of the real simultaneous gesture. A new subject
//! then only records the eight single gestures; synthetic combination
//! features fill in the remaining sixteen classes when fitting that
//! subject's classifier.

pub mod calibrate;
pub mod data;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nncore;
pub mod pretrain;
pub mod rng;
pub mod verify;
