//! The multimodal encoder–decoder network.

pub mod checkpoint;
pub mod config;
pub mod esbc;
pub mod layers;
pub mod net;
pub mod params;

pub use config::{EncoderMode, Modality, ModelConfig};
pub use layers::{ForwardCtx, Session};
pub use net::{ModalInputs, ModelParams};
pub use params::{ParamKind, ParamStore};
