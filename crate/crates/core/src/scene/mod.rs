//! Domain types shared by every stage of the pipeline.

pub mod image;
pub mod instance;
pub mod mesh;
pub mod params;
pub mod texture;
pub mod vehicle;

pub use image::{Image, ImageError, ImageGrad, Mask};
pub use instance::{SceneInstance, SceneTags};
pub use mesh::{load_mesh, parse_obj, Mesh, MeshError};
pub use params::{EnvironmentParams, ParamError, Pose, Sidecar, SidecarError};
pub use vehicle::{procedural_car, procedural_car_paint, VEHICLE_CENTER_HEIGHT};
pub use texture::{
    barycentric_bin, DEFAULT_RESOLUTION, validate_texture, Texture, TextureError, TextureGradient, TextureShape,
};
