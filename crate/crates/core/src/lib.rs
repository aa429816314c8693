//! Cross-domain few-shot learning with domain knowledge mapping.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: dense tensors and an eager
//!   reverse-mode tape, with a finite-difference checker.
//! * [`nets`]: encoder, classifier, domain classifier and mapping layer.
//! * [`domains`], [`emd`]: synthetic domains with controllable shift,
//!   pseudo-unseen mixing, episode sampling and the earth mover's distance.
//! * [`losses`]: cross-entropy, contrastive and adversarial objectives.
//! * [`training`]: mixed-supervision pretraining and episodic meta-training.
//! * [`evaluation`]: meta-test calibration, accuracy reports, ablations and
//!   the kappa sweep.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod domains;
pub mod emd;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
