//! Noise-aware alignment: a two-component Gaussian mixture over lexicon
//! pairs fitted by hard or soft EM.

mod density;
mod fit;
mod model;

pub use density::{log_add_exp, log_gaussian_iso, log_gaussian_iso_sq, sigmoid};
pub use fit::{
    complete_log_likelihood, em_fit, EmConfig, EmFit, EmMode, EmStep, EmTrace, Frozen, Label,
    Responsibilities,
};
pub use model::{
    initialize, log_likelihood, posterior, sample_generative, AlignmentModel, VARIANCE_FLOOR,
};
