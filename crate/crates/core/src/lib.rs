//! Naturalness mapping from multispectral patches, fused with encoded
//! coordinates and the latent of a frozen context autoencoder.
//!
//! Modules follow the pipeline: [`geo`] encodes coordinates, [`data`]
//! synthesizes and stores samples, [`model`] holds the networks, [`optim`]
//! and [`train`] fit them, [`metrics`] scores predictions and
//! [`checkpoint`] persists bundles.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geo;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{generate_dataset, DatasetManifest, Sample, Split, SynthParams};
pub use error::{Error, Result};
pub use geo::{build_geo_grid, encode_latitude, encode_longitude, GeoGrid, GeoPoint, LonMode};
pub use metrics::{evaluate, masked_mae, masked_mse, mssim, EvalReport};
pub use model::{predict, ArchConfig, Component, ModelBundle, Variant};
pub use optim::{lr_at, TrainConfig};
pub use tensor::{read_tensor, write_tensor, TensorArray};
pub use train::{train_autoencoder, train_model, TrainReport};
