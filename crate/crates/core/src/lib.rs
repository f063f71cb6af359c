//! Volumetric toolkit for topology-aware segmentation of hepatic anatomy.
//!
//! The crate covers the whole path from label volumes on disk to evaluation
//! reports:
//!
//! - [`volume`] and [`nifti`]: dense grids, the hepatic label schema and
//!   NIfTI-1 I/O.
//! - [`morphology`]: min/max pooling with argmax traces, the soft skeleton,
//!   connected components and an exact distance transform.
//! - [`losses`]: soft Dice, cross-entropy, bootstrapped cross-entropy with its
//!   warm-up schedule, clDice and their combination, all with analytic
//!   gradients.
//! - [`vessel`]: skeleton graphs, Strahler orders and the central/peripheral
//!   vessel split; gallbladder identification in the biliary tree.
//! - [`metrics`]: DSC, clDice, lesion detection, per-case reports,
//!   aggregation and the Mann-Whitney U test.
//! - [`phantom`]: procedural liver phantoms with known ground truth and
//!   controlled degradations.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod morphology;
pub mod nifti;
pub mod phantom;
pub mod vessel;
pub mod volume;

pub use error::{Error, Result};
pub use morphology::Connectivity;
pub use volume::{
    extract_mask, physical_volume, BinaryMask, Geometry, LabelSchema, LabelVolume, ProbVolume,
    ScalarField, Structure,
};
