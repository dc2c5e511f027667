//! Volumetric lung nodule segmentation from a single seed ROI.
//!
//! The pipeline crops fixed-size 96x96 patches around a region of interest,
//! augments them with forward/backward maximum intensity projections, and runs
//! a three-encoder hard-attention network that predicts the nodule mask for
//! the current slice together with ROI masks for both adjacent slices. An
//! iterative driver propagates those ROIs slice by slice in both directions to
//! assemble the 3D segmentation.
//!
//! Modules:
//! - [`volume`]: volume/mask storage (NVOL1 format), rater annotation sets,
//!   consensus ground truth.
//! - [`preproc`]: patch cropping, HU normalization, MIP construction, ROI
//!   mask/box conversions.
//! - [`nn`]: minimal reverse-mode tensor tape used by the network.
//! - [`net`]: the segmentation network itself (encoders, attention gating,
//!   decoder, heads) plus checkpoint I/O.
//! - [`loss`]: boundary loss on signed distance maps, ROI dice loss, and the
//!   dynamic blend between them.
//! - [`infer`]: the iterative bidirectional slice-propagation driver and
//!   multi-view fusion.
//! - [`train`]: dataset construction from annotated volumes, Adam, and the
//!   optimization loop.
//! - [`metrics`]: overlap and surface-distance metrics, rater agreement,
//!   grouped reporting.
//! - [`phantom`]: synthetic CT phantoms with ellipsoidal nodules and
//!   simulated raters, for desk-scale evaluation.

pub mod edt;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod phantom;
pub mod preproc;
pub mod train;
pub mod volume;

pub use error::{CoreError, Result};
