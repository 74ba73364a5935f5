//! Measurements of the quantities the collapse theory predicts.

pub mod bea;
pub mod cosine;
pub mod fit;
pub mod sweep;
pub mod tau;

pub use bea::{bea_agreement, effective_field, BeaPoint, BeaSweep};
pub use cosine::{cosine_similarity_track, CosineSimilarity};
pub use fit::{OrderFit, MIN_FIT_POINTS, MIN_R_SQUARED};
pub use sweep::{
    e_tss_order_sweep, lte_order_sweep, measure_e_tss, surrogate_sweep, Span, SweepPoint,
};
pub use tau::{measure_tau, tau_from_noises, tau_leading_order, tau_sweep, TauPoint};
