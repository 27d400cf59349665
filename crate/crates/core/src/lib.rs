//! Statistics of 3×3 convolution filters and their transfer into new networks.
//!
//! The crate covers the whole pipeline:
//!
//! * [`tensorio`] reads and writes tensor archives, filter banks and mixture files,
//!   and slices 3×3 kernels out of weight tensors.
//! * [`stats`] clusters filters with k-means and summarizes each cluster.
//! * [`gmm`] holds the diagonal Gaussian mixture prior: densities, negative
//!   log-likelihoods, gradients and EM fitting.
//! * [`regularizer`] turns a fitted mixture into a penalty on a network's filters.
//! * [`nn`] is a small deterministic CNN harness used to train with the penalty,
//!   freeze filters and continue training.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and a plain loop otherwise. Both paths reduce
//! in the same fixed order, so results are bitwise identical.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod gmm;
pub mod nn;
pub mod numeric;
pub mod regularizer;
pub mod stats;
pub mod tensor;
pub mod tensorio;

pub use error::{Error, Result};
pub use gmm::{EmConfig, EmFit, GaussianMixture};
pub use regularizer::{GradientMode, RegConfig, Scope};
pub use stats::{ClusterReport, KMeansModel};
pub use tensor::{ParamSet, Tensor};
pub use tensorio::{FilterBank, FilterMeta, TensorArchive, TensorEntry};
