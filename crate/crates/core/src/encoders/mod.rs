//! The collaborative tower over field embeddings and the text tower over
//! prompt tokens.

mod collaborative;
mod layers;
mod text;

pub use collaborative::{cross_layer_reference, Backbone, CollabConfig, CollabOutput, CollaborativeEncoder};
pub use layers::{Linear, Mlp, BN_MOMENTUM};
pub use text::{TextConfig, TextEncoder, TextOutput};
