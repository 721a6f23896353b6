use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::scene::image::{Image, Mask};
use crate::scene::params::{EnvironmentParams, Pose};

/// Identifiers attached to every scene.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneTags {
    pub scene_id: String,
    pub weather_tag: String,
    pub viewpoint_tag: String,
}

/// One background frame with its transferred parameters and the vehicle's
/// ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance<T> {
    pub background: Image<T>,
    pub pose: Pose<T>,
    pub env: EnvironmentParams<T>,
    /// Tight box around the vehicle mask; `None` when the vehicle is not visible.
    pub ground_truth_box: Option<BBox<T>>,
    pub tags: SceneTags,
}

impl<T: Scalar> SceneInstance<T> {
    pub fn new(
        background: Image<T>,
        pose: Pose<T>,
        env: EnvironmentParams<T>,
        mask: &Mask,
        tags: SceneTags,
    ) -> Self {
        SceneInstance {
            background,
            pose,
            env,
            ground_truth_box: mask.bounding_box(),
            tags,
        }
    }

    pub fn visible(&self) -> bool {
        self.ground_truth_box.is_some()
    }
}
