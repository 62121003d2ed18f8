// Guards of the form `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod linalg;
pub mod rmt;
pub mod rng;
pub mod features;
pub mod monitor;
pub mod datagen;
pub mod optim;
pub mod head;
pub mod rmtkd;
