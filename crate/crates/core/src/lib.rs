//! Anomaly segmentation from the epistemic uncertainty of a layer-segmentation
//! network trained only on healthy anatomy.
//!
//! The crate is organised along the pipeline:
//!
//! * [`phantom`] generates layered synthetic B-scans with weak layer labels
//!   (healthy) or injected anomalies with ground-truth masks (diseased).
//! * [`segnet`] is a from-scratch U-shaped encoder-decoder with dropout, its
//!   training loop and Monte-Carlo dropout sampling.
//! * [`uncertainty`] turns a stack of stochastic predictions into a per-pixel
//!   uncertainty map (mean of the class-wise variances), plus an entropy
//!   baseline.
//! * [`postproc`] converts an uncertainty map into a compact binary anomaly
//!   mask (threshold, small-component removal, majority ray casting,
//!   closing/opening, optional flattening).
//! * [`eval`] holds pixel, lesion and volume level metrics and the
//!   hyperparameter sweeps.
//! * [`io`] reads and writes the on-disk formats (PGM, raw f32 maps, weights).

pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod phantom;
pub mod postproc;
pub mod rng;
pub mod segnet;
pub mod uncertainty;

pub use error::{Error, Result};
pub use grid::{BScan, BinaryMask, Grid, LabelMap, VoteMap};
pub use phantom::{AnomalyKind, AnomalySpec, Condition, PhantomConfig, VolumeRecord};
pub use postproc::{PostprocParams, Variant};
pub use segnet::{
    ClassProbabilityMap, ForwardMode, NetworkConfig, PredictionStack, TrainConfig, TrainingLog,
    WeightStore,
};
pub use uncertainty::{UncertaintyKind, UncertaintyMap};
