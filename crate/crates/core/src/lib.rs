//! Deterministic curation, balancing, and preference mining for embodied
//! manipulation video corpora.
//!
//! The crate turns a raw aggregation of clip manifests into training-ready
//! data through a fixed stage order:
//!
//! 1. [`gate`] — resolution/length/camera-motion quality gate plus temporal
//!    segmentation of over-long episodes,
//! 2. [`flow`] — dense optical flow and the global kinematic motion filter,
//! 3. [`coherence`] — embedding-based temporal continuity filtering,
//! 4. [`actionmap`] — camera-projected action maps and vision–action
//!    alignment checks,
//! 5. [`balance`] — four-level hierarchical distribution balancing,
//! 6. [`judge`] — checklist scoring, preference-triplet mining, and the
//!    preference-alignment loss,
//! 7. [`metrics`] — PSNR / SSIM / normalized-DTW evaluation,
//!
//! all orchestrated by [`pipeline`]. Every stage is reproducible from
//! `(manifest, config, seed)`; see [`rng`] for the seeding discipline.

pub mod actionmap;
pub mod balance;
pub mod coherence;
pub mod error;
pub mod flow;
pub mod gate;
pub mod imaging;
pub mod judge;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod testutil;
pub mod vlm;

pub use error::{Error, Result};
