//! Group-relative policy optimization with static, clip-higher and elastic
//! trust regions, trained on tiny autoregressive policies over synthetic
//! tasks with verifiable rewards.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod autodiff;
pub mod gradcheck;
pub mod metrics_io;
pub mod objectives;
pub mod policy;
pub mod tasks;
pub mod trainer;
