//! Two-stage dimension reduction for stacks of noisy images.
//!
//! Stage one fits a multilinear (MPCA) model with ranks chosen by SURE;
//! stage two runs PCA on the vectorized cores with a GIC-chosen rank.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod eval;
pub mod gamma_sup;
pub mod io;
pub mod linalg;
pub mod mpca;
pub mod pca_gic;
pub mod pipeline;
pub mod sure;
pub mod synth;
pub mod tsne;

pub use error::{Error, Result, Stage};
pub use linalg::ImageStack;
pub use mpca::{CoreStack, MpcaModel};
pub use pca_gic::{GicCurve, PcaModel};
pub use pipeline::{
    denoise, fit_2sdr, rank_selection_report, scores, FitConfig, Hybrid2SdrModel,
    RankSelectionReport,
};
