//! Render a manifest to disk.
//!
//! Layout:
//!
//! ```text
//! out_dir/images/<entry_id>.png
//! out_dir/labels/<entry_id>.json   Label
//! out_dir/index.json               DatasetIndex
//! ```
//!
//! Entries render in parallel. A failing entry is logged and recorded in the
//! index; the others still complete.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::{build_scene_instance, BackgroundProvider, BackgroundRequest, BuiltScene, CompositeError};
use crate::dataset::manifest::{Manifest, ManifestEntry, Part};
use crate::geometry::BBox;
use crate::renderer::Resolution;
use crate::scalar::Scalar;
use crate::scene::{Mesh, Pose, SceneTags, Texture};

#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MaterializeError + '_ {
    move |source| MaterializeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ground truth for one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Label<T> {
    pub entry_id: String,
    pub scene_id: String,
    pub weather: String,
    pub viewpoint: String,
    pub visible: bool,
    #[serde(rename = "box")]
    pub bbox: Option<BBox<T>>,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub pose: Pose<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub entry_id: String,
    pub image: String,
    pub label: String,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub entry_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub part: Part,
    pub seed: u64,
    pub resolution: Resolution,
    pub texture_checksum: String,
    pub entries: Vec<IndexEntry>,
    pub failures: Vec<Failure>,
}

impl DatasetIndex {
    pub fn load(out_dir: impl AsRef<Path>) -> Result<Self, MaterializeError> {
        let path = out_dir.as_ref().join("index.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| MaterializeError::Parse {
            path,
            message: e.to_string(),
        })
    }

    pub fn load_label<T: Scalar>(
        out_dir: impl AsRef<Path>,
        entry: &IndexEntry,
    ) -> Result<Label<T>, MaterializeError> {
        let path = out_dir.as_ref().join(&entry.label);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| MaterializeError::Parse {
            path,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaterializeSummary {
    pub written: usize,
    pub visible: usize,
    pub failures: Vec<Failure>,
}

impl MaterializeSummary {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

fn request<T: Scalar>(entry: &ManifestEntry<T>, resolution: Resolution) -> BackgroundRequest<T> {
    BackgroundRequest {
        tags: SceneTags {
            scene_id: entry.scene_id.clone(),
            weather_tag: entry.weather.clone(),
            viewpoint_tag: entry.viewpoint.clone(),
        },
        pose: Some(entry.pose),
        frame: Some(entry.background.clone()),
        resolution,
    }
}

/// Background, render and composite for one manifest entry.
pub fn build_scene<T: Scalar>(
    entry: &ManifestEntry<T>,
    mesh: &Mesh<T>,
    texture: &Texture<T>,
    provider: &dyn BackgroundProvider<T>,
    resolution: Resolution,
) -> Result<BuiltScene<T>, CompositeError> {
    build_scene_instance(mesh, texture, provider, &request(entry, resolution))
}

/// [`build_scene`] for every entry, in manifest order.
pub fn build_scenes<T: Scalar>(
    entries: &[ManifestEntry<T>],
    mesh: &Mesh<T>,
    texture: &Texture<T>,
    provider: &dyn BackgroundProvider<T>,
    resolution: Resolution,
) -> Vec<Result<BuiltScene<T>, CompositeError>> {
    entries
        .par_iter()
        .map(|e| build_scene(e, mesh, texture, provider, resolution))
        .collect()
}

fn write_entry<T: Scalar>(
    entry: &ManifestEntry<T>,
    seed: u64,
    mesh: &Mesh<T>,
    texture: &Texture<T>,
    provider: &dyn BackgroundProvider<T>,
    resolution: Resolution,
    out_dir: &Path,
) -> Result<IndexEntry, String> {
    let scene = build_scene(entry, mesh, texture, provider, resolution).map_err(|e| e.to_string())?;
    let image = format!("images/{}.png", entry.entry_id);
    let label_path = format!("labels/{}.json", entry.entry_id);
    scene
        .composite
        .save_png(out_dir.join(&image))
        .map_err(|e| e.to_string())?;
    let label = Label {
        entry_id: entry.entry_id.clone(),
        scene_id: entry.scene_id.clone(),
        weather: entry.weather.clone(),
        viewpoint: entry.viewpoint.clone(),
        visible: scene.visible(),
        bbox: scene.instance.ground_truth_box,
        width: resolution.width,
        height: resolution.height,
        seed,
        pose: entry.pose,
    };
    let mut text = serde_json::to_string_pretty(&label).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(out_dir.join(&label_path), text).map_err(|e| e.to_string())?;
    Ok(IndexEntry {
        entry_id: entry.entry_id.clone(),
        image,
        label: label_path,
        visible: label.visible,
    })
}

/// Writes every entry of `manifest` and the index. Per-entry failures are
/// collected rather than returned; only directory and index I/O errors abort.
pub fn materialize<T: Scalar>(
    manifest: &Manifest<T>,
    mesh: &Mesh<T>,
    texture: &Texture<T>,
    provider: &dyn BackgroundProvider<T>,
    resolution: Resolution,
    out_dir: impl AsRef<Path>,
) -> Result<MaterializeSummary, MaterializeError> {
    let out_dir = out_dir.as_ref();
    for sub in ["images", "labels"] {
        let p = out_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let results: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| write_entry(e, manifest.seed, mesh, texture, provider, resolution, out_dir))
        .collect();

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (entry, result) in manifest.entries.iter().zip(results) {
        match result {
            Ok(ix) => entries.push(ix),
            Err(error) => {
                log::warn!("entry {} failed: {error}", entry.entry_id);
                failures.push(Failure {
                    entry_id: entry.entry_id.clone(),
                    error,
                });
            }
        }
    }
    let index = DatasetIndex {
        part: manifest.part,
        seed: manifest.seed,
        resolution,
        texture_checksum: texture.checksum(),
        entries,
        failures,
    };
    let path = out_dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    if !index.failures.is_empty() {
        log::warn!(
            "{} of {} entries failed",
            index.failures.len(),
            manifest.entries.len()
        );
    }
    Ok(MaterializeSummary {
        written: index.entries.len(),
        visible: index.entries.iter().filter(|e| e.visible).count(),
        failures: index.failures,
    })
}
