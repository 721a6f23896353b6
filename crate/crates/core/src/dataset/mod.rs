//! Dataset construction: weather presets, manifests and on-disk materialization.

pub mod manifest;
pub mod materialize;
pub mod weather;

pub use manifest::{
    build_continuous_manifest, build_discrete_manifest, default_scripts, even_azimuths,
    grid_locations, DiscreteSpace, Manifest, ManifestEntry, ManifestError, Part, SceneScript,
    TrajectoryRef,
};
pub use materialize::{
    build_scene, build_scenes, materialize, DatasetIndex, Failure, IndexEntry, Label,
    MaterializeError, MaterializeSummary,
};
pub use weather::{default_presets, find_preset, validate_presets, WeatherError, WeatherPreset};
