//! Synthetic scene world: attribute vocabularies, captions, layouts,
//! rendering and the latent codec.

pub mod attributes;
pub mod bench;
pub mod latent;
pub mod render;
pub mod scene;

pub use bench::{generate_bench, read_bench_dir, generate_scene, write_bench_dir, BenchConfig, BenchError, Manifest};
pub use latent::LatentCodec;
pub use render::{render_scene, Raster};
pub use scene::{
    caption_from_attrs, parse_caption, AttributeSpec, InstanceAttrs, Level, PersonSpec, RegionSpec, SceneInstance,
    SceneSpec,
};
