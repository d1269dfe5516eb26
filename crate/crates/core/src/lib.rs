//! Measurement toolkit for annotation campaigns on point-annotated cell
//! datasets.
//!
//! The pipeline, end to end:
//!
//! 1. **model / io** — patch and annotation tables, validation, CSV I/O.
//! 2. **matching** — greedy ascending-distance matching under a physical
//!    threshold; per-class F1 and the mean-F1 conformity of an annotator
//!    against an anchor annotator.
//! 3. **stats** — Fleiss' kappa over tumor/lymphocyte/unmatched ratings,
//!    Shapiro-Wilk, skewness, paired Wilcoxon signed-rank, distribution
//!    summaries.
//! 4. **campaign** — anchor selection, crowd scoring, conformity-percentile
//!    partitioning, and blind control-task assignment.
//! 5. **detection** — disk rasterization, Gaussian smoothing, local-maxima
//!    extraction, and hit-criterion evaluation of detections.
//! 6. **simulator** — synthetic ground truth and annotator crowds for
//!    end-to-end validation of everything above.

pub mod campaign;
pub mod detection;
pub mod error;
pub mod io;
pub mod matching;
pub mod model;
pub mod pgm;
pub mod rng;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use matching::{ConformityReport, MatchConfig};
pub use model::{CellAnnotation, Dataset, PatchMeta, RawClass, Split, TaskClass};
