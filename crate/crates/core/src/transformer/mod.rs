//! Patch embedding, attention blocks in the regular and efficient styles,
//! and the classification head, all recorded on the autodiff tape.

pub mod layers;
mod model;
mod params;
mod spec;

pub use model::{BlockTrace, ForwardTrace, MaskMode, Model, UpdateContext};
pub use params::{is_mask_param, Bound, ParamStore, BACKBONE_STREAM, MASK_STREAM};
pub use spec::{BlockLayout, BlockStyle, MaskRole, ModelSpec, StageSpec};
