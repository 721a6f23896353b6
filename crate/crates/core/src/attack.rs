//! Adversarial texture optimization by projected gradient descent over a set
//! of scenes, and AP comparison of two textures.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositor::{BuiltScene, CompositeError};
use crate::detector::{Detector, DifferentiableDetector};
use crate::evaluator::{EvalError, EvalRow, FrameResult};
use crate::geometry::BBox;
use crate::renderer::RenderError;
use crate::scalar::Scalar;
use crate::scene::{Image, ImageGrad, Texture, TextureGradient};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("no sampled scene shows the vehicle; nothing to attack")]
    NothingToAttack,
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize, trace: Vec<f64> },
    #[error("texture has {got} faces at resolution {got_res}, scenes expect {want} at {want_res}")]
    TextureShape {
        got: usize,
        got_res: usize,
        want: usize,
        want_res: usize,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub step: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the scene order.
    pub seed: u64,
    pub clamp: [f64; 2],
    /// Stop after this many updates; `Some(0)` returns the input texture.
    pub max_iterations: Option<usize>,
    pub loss: String,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            step: 1e-5,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            clamp: [0.0, 1.0],
            max_iterations: None,
            loss: MatchedScoreLoss::NAME.to_string(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(AttackError::Config(format!("step must be positive, got {}", self.step)));
        }
        if self.epochs == 0 {
            return Err(AttackError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AttackError::Config("batch size must be at least 1".into()));
        }
        let [lo, hi] = self.clamp;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(AttackError::Config(format!("clamp bounds [{lo}, {hi}] must satisfy 0 ≤ lo < hi ≤ 1")));
        }
        Ok(())
    }
}

/// Scalar objective of one composite and its image gradient. The attack
/// minimizes the batch mean.
pub trait AttackLoss<T: Scalar>: Sync {
    fn name(&self) -> &str;
    fn evaluate(
        &self,
        detector: &dyn DifferentiableDetector<T>,
        image: &Image<T>,
        target: &BBox<T>,
    ) -> (T, ImageGrad<T>);
}

/// The detector's best score on the vehicle's box: driving it down hides the vehicle.
#[derive(Debug, Clone, Copy, Default)]
pub struct MatchedScoreLoss;

impl MatchedScoreLoss {
    pub const NAME: &'static str = "matched_score";
}

impl<T: Scalar> AttackLoss<T> for MatchedScoreLoss {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn evaluate(
        &self,
        detector: &dyn DifferentiableDetector<T>,
        image: &Image<T>,
        target: &BBox<T>,
    ) -> (T, ImageGrad<T>) {
        let g = detector.detect_grad(image, target);
        (g.score, g.grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome<T> {
    pub texture: Texture<T>,
    /// Batch-mean loss before each update.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    /// Scenes with a visible vehicle, the only ones sampled.
    pub scenes_used: usize,
}

/// Everything needed to reproduce or audit an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: AttackConfig,
    pub detector: String,
    pub scenes: usize,
    pub iterations: usize,
    pub loss_trace: Vec<f64>,
    pub texture_checksum_before: String,
    pub texture_checksum_after: String,
}

impl RunRecord {
    pub fn new<T: Scalar>(
        config: &AttackConfig,
        detector: &str,
        before: &Texture<T>,
        outcome: &AttackOutcome<T>,
    ) -> Self {
        RunRecord {
            config: config.clone(),
            detector: detector.to_string(),
            scenes: outcome.scenes_used,
            iterations: outcome.iterations,
            loss_trace: outcome.loss_trace.clone(),
            texture_checksum_before: before.checksum(),
            texture_checksum_after: outcome.texture.checksum(),
        }
    }
}

/// Gradient descent on the texture over `scenes`.
///
/// Each epoch visits the visible scenes in a seeded shuffle, `batch_size` at a
/// time. A batch is re-textured with the current texture, scored by `loss`,
/// and its gradients are chained through the compositor and renderer and
/// averaged in batch order. The update is
/// `texture ← clamp(texture − step · grad, lo, hi)`.
pub fn attack_texture<T: Scalar>(
    texture0: &Texture<T>,
    scenes: &[BuiltScene<T>],
    detector: &dyn DifferentiableDetector<T>,
    loss: &dyn AttackLoss<T>,
    config: &AttackConfig,
) -> Result<AttackOutcome<T>, AttackError> {
    config.validate()?;
    for s in scenes {
        let want = s.render.texture_shape;
        if want != texture0.shape() {
            return Err(AttackError::TextureShape {
                got: texture0.faces(),
                got_res: texture0.resolution(),
                want: want.faces,
                want_res: want.resolution,
            });
        }
    }
    let visible: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].visible()).collect();
    if visible.is_empty() {
        return Err(AttackError::NothingToAttack);
    }

    let lo = T::lit(config.clamp[0]);
    let hi = T::lit(config.clamp[1]);
    let step = T::lit(config.step);
    let limit = config.max_iterations.unwrap_or(usize::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut texture = texture0.clone();
    let mut trace = Vec::new();
    let mut iterations = 0;

    'epochs: for _ in 0..config.epochs {
        let mut order = visible.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if iterations >= limit {
                break 'epochs;
            }
            let parts: Vec<Result<(T, TextureGradient<T>), AttackError>> = batch
                .par_iter()
                .map(|&i| {
                    let scene = scenes[i].retexture(&texture)?;
                    let target = scene.instance.ground_truth_box.expect("visible scene");
                    let (l, grad) = loss.evaluate(detector, &scene.composite, &target);
                    Ok((l, scene.texture_gradient(&grad)?))
                })
                .collect();
            let mut total = T::zero();
            let mut grad = TextureGradient::zeros(texture.shape());
            for part in parts {
                let (l, g) = part?;
                total += l;
                grad.accumulate(&g);
            }
            let n = T::from_usize_lossy(batch.len());
            let mean = total / n;
            if !mean.is_finite() || grad.data().iter().any(|g| !g.channels().iter().all(|c| c.is_finite())) {
                trace.push(mean.to_f64_lossy());
                return Err(AttackError::NonFinite {
                    iteration: iterations,
                    trace,
                });
            }
            trace.push(mean.to_f64_lossy());
            let scale = step / n;
            for (t, g) in texture.data_mut().iter_mut().zip(grad.data()) {
                *t = (*t - *g * scale).map(|v| v.max(lo).min(hi));
            }
            iterations += 1;
        }
    }
    Ok(AttackOutcome {
        texture,
        loss_trace: trace,
        iterations,
        scenes_used: visible.len(),
    })
}

/// Detections on `scenes` re-textured with `texture`. Image ids are
/// `<scene_id>#<index>`.
pub fn detect_scenes<T: Scalar>(
    texture: &Texture<T>,
    scenes: &[BuiltScene<T>],
    detector: &dyn Detector<T>,
) -> Result<Vec<FrameResult<T>>, AttackError> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let scene = s.retexture(texture)?;
            Ok(FrameResult {
                image_id: format!("{}#{i}", s.instance.tags.scene_id),
                scene_id: s.instance.tags.scene_id.clone(),
                detections: detector.detect(&scene.composite),
                ground_truth: scene.instance.ground_truth_box,
            })
        })
        .collect()
}

/// AP of one texture over `scenes`, as a report row.
pub fn evaluate_texture<T: Scalar>(
    name: &str,
    texture: &Texture<T>,
    scenes: &[BuiltScene<T>],
    detector: &dyn Detector<T>,
    iou_threshold: T,
) -> Result<EvalRow, AttackError> {
    let frames = detect_scenes(texture, scenes, detector)?;
    Ok(EvalRow::from_frames(name, detector.name(), &frames, iou_threshold)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackDecline {
    pub ap_before: f64,
    pub ap_after: f64,
    /// Percentage points, `ap_before − ap_after`.
    pub decline: f64,
}

impl AttackDecline {
    pub fn new(ap_before: f64, ap_after: f64) -> Self {
        AttackDecline {
            ap_before,
            ap_after,
            decline: ap_before - ap_after,
        }
    }
}

/// AP on `scenes` under each texture and the difference.
pub fn evaluate_attack<T: Scalar>(
    before: &Texture<T>,
    after: &Texture<T>,
    scenes: &[BuiltScene<T>],
    detector: &dyn Detector<T>,
    iou_threshold: T,
) -> Result<AttackDecline, AttackError> {
    let b = evaluate_texture("before", before, scenes, detector, iou_threshold)?;
    let a = evaluate_texture("after", after, scenes, detector, iou_threshold)?;
    Ok(AttackDecline::new(b.ap, a.ap))
}
