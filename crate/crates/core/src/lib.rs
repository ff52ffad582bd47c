#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dapsm;
pub mod datamodel;
pub mod exposure;
pub mod glm;
pub mod diagnostics;
pub mod matching;
pub mod pipeline;
pub mod synth;
