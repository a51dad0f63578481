//! Auxiliary attention over class activation maps.
//!
//! A trained CNN's last feature maps are weighted by the classifier head into
//! one class activation map per class. Each map is min-max normalized,
//! thresholded at `tau`, flattened and packed into an integer key. A per-class
//! table of key counts, trained once over a labelled set, turns those keys
//! into class likelihoods at inference time.
//!
//! - [`tensorio`]: GCT1 tensor files and dataset manifests
//! - [`cam`]: class scores, CAMs, pooling, normalization, heatmaps
//! - [`attention`]: CAM to key
//! - [`store`]: the count table, training, merging, prediction, GCS1 files
//! - [`eval`]: confusion matrices, metrics, intervals, Z test, tau sweeps
//! - [`synth`]: spatial synthetic data and a reference trainer

pub mod attention;
pub mod cam;
pub mod cli;
pub mod error;
pub mod eval;
pub mod store;
pub mod synth;
pub mod tensorio;

pub use attention::{attention_key, BitKey, BitOrder, GcmlConfig};
pub use cam::{class_score, compute_cam, Cam, ClassifierHead, FeatureMapStack, PoolingMode};
pub use error::{Error, Result};
pub use store::{GcmlStore, PredictOptions, Prediction, Sample};
pub use tensorio::{DatasetManifest, TensorF32};
