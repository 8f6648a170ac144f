//! Neural radiance field: encodings, MLP and volume rendering.

pub mod encoding;
pub mod mlp;
pub mod render;

pub use encoding::{band_mask, encoded_width, positional_encoding, EncodingConfig};
pub use mlp::{FieldCache, FieldConfig, FieldParams, FieldState, Linear};
pub use render::{sample_depths, volume_render, volume_render_backward, RenderConfig, RenderGrads, RenderOutput};
