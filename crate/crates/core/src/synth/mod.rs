//! Synthetic stomach-like cavity, fisheye rendering, and evaluation against ground truth.

mod eval;
mod render;
mod scene;

pub use eval::{align_similarity, evaluate, EvalReport, Similarity};
pub use render::{render_frame, render_views, shade_pixel, DepthMap, RenderedView};
pub use scene::{SceneSpec, SyntheticScene, TextureVariant, MAX_BUMP_AMPLITUDE};
