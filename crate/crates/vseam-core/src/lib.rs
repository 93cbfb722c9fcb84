//! vseam-core: causal interpretability for vision-language models.
//!
//! Two-stage pipeline over an intervention-capable transformer abstraction:
//! semantic visual editing produces counterfactual image inputs, then
//! activation patching, attention-head attribution, and attention-head
//! rescaling locate and modulate the components that carry the answer.
//! A bundled deterministic toy VLM makes every operation verifiable at
//! desk scale against brute-force oracles.

pub mod dataset;
pub mod editing;
pub mod error;
pub mod heads;
pub mod img;
pub mod lens;
pub mod model;
pub mod patching;
pub mod pipeline;
pub mod report;
pub mod rescale;
pub mod synthetic;
pub mod workers;

pub use error::{Result, VseamError};
pub use model::{
    readout, ActivationCache, Action, BackendKind, BinaryAnswer, CaptureOptions, InterventionPlan,
    InterventionVlm, Modality, ModelHandle, ModuleKind, PatchGrid, PixelBox, TokenSequence,
    ToyConfig, ToyVlm,
};
