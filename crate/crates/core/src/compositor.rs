//! Dual-renderer fusion: acquire a background together with its camera and
//! lighting parameters, render the vehicle under the same parameters and
//! paste it in through its coverage mask.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::weather::{default_presets, find_preset, WeatherPreset};
use crate::geometry::{Rgb, Vec3};
use crate::renderer::{render, render_backward, Camera, RenderError, RenderOutput, Resolution};
use crate::scalar::Scalar;
use crate::scene::{
    EnvironmentParams, Image, ImageError, ImageGrad, Mask, Mesh, Pose, SceneInstance, SceneTags,
    Sidecar, SidecarError, Texture, TextureGradient,
};

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("missing sidecar {0}")]
    MissingSidecar(PathBuf),
    #[error("missing background image {0}")]
    MissingImage(PathBuf),
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: SidecarError,
    },
    #[error("unknown weather `{0}`")]
    UnknownWeather(String),
    #[error("frame {frame} is tagged weather `{found}`, requested `{requested}`")]
    WeatherMismatch {
        frame: String,
        found: String,
        requested: String,
    },
    #[error("synthetic backgrounds need a camera pose")]
    MissingPose,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// What the caller wants a background for.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundRequest<T> {
    pub tags: SceneTags,
    /// Camera pose to render from (synthetic provider) or to ignore (directory provider).
    pub pose: Option<Pose<T>>,
    /// Frame stem for directory providers; defaults to the scene id.
    pub frame: Option<String>,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background<T> {
    pub image: Image<T>,
    pub pose: Pose<T>,
    pub env: EnvironmentParams<T>,
}

pub trait BackgroundProvider<T: Scalar>: Sync {
    fn acquire(&self, request: &BackgroundRequest<T>) -> Result<Background<T>, CompositeError>;
}

/// Procedural backgrounds: a checkered ground plane at `z = 0`, a sky
/// gradient and a few box obstacles, all lit by the requested weather preset.
///
/// Sky at elevation `s = max(0, ray.z)`:
/// `horizon = clamp(0.8·(Ia·Ca + Id·Cd))`, `zenith = clamp(0.5·Ia·Ca + 0.25·Cd·Id)`,
/// `sky = (1 − s)·horizon + s·zenith`. Ground albedo alternates 0.30 / 0.38 on
/// 4 m tiles, is shaded with the vehicle's lighting model using normal `+z`,
/// and fades into the horizon color with distance `d` by `1 − exp(−d / 120)`.
#[derive(Debug, Clone)]
pub struct SyntheticProvider<T> {
    pub presets: Vec<WeatherPreset<T>>,
    pub obstacles: usize,
}

impl<T: Scalar> Default for SyntheticProvider<T> {
    fn default() -> Self {
        SyntheticProvider {
            presets: default_presets(),
            obstacles: 6,
        }
    }
}

impl<T: Scalar> SyntheticProvider<T> {
    pub fn new(presets: Vec<WeatherPreset<T>>) -> Self {
        SyntheticProvider {
            presets,
            obstacles: 6,
        }
    }

    fn sky(&self, env: &EnvironmentParams<T>, elevation: T) -> Rgb<T> {
        let horizon = ((env.ambient_color * env.ambient_intensity)
            + (env.directional_color * env.directional_intensity))
            * T::lit(0.8);
        let zenith = env.ambient_color * (T::lit(0.5) * env.ambient_intensity)
            + env.directional_color * (T::lit(0.25) * env.directional_intensity);
        let s = elevation.max(T::zero()).min(T::one());
        (horizon.clamp01() * (T::one() - s) + zenith.clamp01() * s).clamp01()
    }

    fn obstacle_mesh(&self, scene_id: &str, center: Vec3<T>) -> Option<Mesh<T>> {
        if self.obstacles == 0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(scene_id));
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for _ in 0..self.obstacles {
            let angle = rng.gen::<f64>() * std::f64::consts::TAU;
            let radius = 14.0 + rng.gen::<f64>() * 18.0;
            let half = 0.6 + rng.gen::<f64>() * 1.8;
            let height = 1.5 + rng.gen::<f64>() * 6.0;
            let cx = center.x.to_f64_lossy() + radius * angle.cos();
            let cy = center.y.to_f64_lossy() + radius * angle.sin();
            push_box(
                &mut vertices,
                &mut faces,
                [cx - half, cy - half, 0.0],
                [cx + half, cy + half, height],
            );
        }
        Mesh::new(vertices, vec![], faces).ok()
    }
}

/// FNV-1a, stable across platforms and releases.
fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn push_box<T: Scalar>(
    vertices: &mut Vec<Vec3<T>>,
    faces: &mut Vec<[u32; 3]>,
    min: [f64; 3],
    max: [f64; 3],
) {
    let base = vertices.len() as u32;
    for k in 0..8 {
        vertices.push(Vec3::from_f64(
            if k & 1 == 0 { min[0] } else { max[0] },
            if k & 2 == 0 { min[1] } else { max[1] },
            if k & 4 == 0 { min[2] } else { max[2] },
        ));
    }
    // Outward-wound quads over corner indices (bit0 = x, bit1 = y, bit2 = z).
    const QUADS: [[u32; 4]; 6] = [
        [1, 3, 7, 5],
        [0, 4, 6, 2],
        [2, 6, 7, 3],
        [0, 1, 5, 4],
        [4, 5, 7, 6],
        [0, 2, 3, 1],
    ];
    for q in QUADS {
        faces.push([base + q[0], base + q[1], base + q[2]]);
        faces.push([base + q[0], base + q[2], base + q[3]]);
    }
}

impl<T: Scalar> BackgroundProvider<T> for SyntheticProvider<T> {
    fn acquire(&self, request: &BackgroundRequest<T>) -> Result<Background<T>, CompositeError> {
        let preset = find_preset(&self.presets, &request.tags.weather_tag)
            .map_err(|_| CompositeError::UnknownWeather(request.tags.weather_tag.clone()))?;
        let env = preset.env;
        let pose = request.pose.ok_or(CompositeError::MissingPose)?;
        let res = request.resolution;
        let cam = Camera::new(&pose, res)?;
        let eye = cam.position();
        let ground_mult = crate::renderer::shade(Vec3::new(T::zero(), T::zero(), T::one()), &env);
        let tile = T::lit(4.0);

        let mut image = Image::from_fn(res.width, res.height, |x, y| {
            let ray = cam.world_ray(x, y);
            let horizon = self.sky(&env, T::zero());
            if ray.z < T::zero() && eye.z > T::zero() {
                let t = -eye.z / ray.z;
                let hit = eye + ray * t;
                let parity = ((hit.x / tile).floor() + (hit.y / tile).floor())
                    .to_i64()
                    .unwrap_or(0)
                    .rem_euclid(2);
                let albedo = if parity == 0 { T::lit(0.30) } else { T::lit(0.38) };
                let ground = (ground_mult * albedo).clamp01();
                let fog = T::one() - (-t / T::lit(120.0)).exp();
                (ground * (T::one() - fog) + horizon * fog).clamp01()
            } else {
                self.sky(&env, ray.z)
            }
        });

        if let Some(mesh) = self.obstacle_mesh(&request.tags.scene_id, pose.model_position) {
            let tex = Texture::uniform(mesh.face_count(), 1, Rgb::from_f64(0.55, 0.52, 0.5))
                .expect("nonzero resolution");
            let mut obstacle_pose = pose;
            obstacle_pose.model_angle = T::zero();
            obstacle_pose.model_position = Vec3::zero();
            let out = render(&mesh, &tex, &obstacle_pose, &env, res)?;
            image = composite(&out.image, &out.mask, &image)?;
        }

        Ok(Background { image, pose, env })
    }
}

/// Backgrounds exported from an external simulator: `<frame>.png` next to a
/// `<frame>.json` sidecar carrying the pose and lighting.
#[derive(Debug, Clone)]
pub struct DirectoryProvider {
    pub root: PathBuf,
}

impl DirectoryProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirectoryProvider { root: root.into() }
    }

    pub fn frame_paths(&self, frame: &str) -> (PathBuf, PathBuf) {
        (
            self.root.join(format!("{frame}.png")),
            self.root.join(format!("{frame}.json")),
        )
    }
}

impl<T: Scalar> BackgroundProvider<T> for DirectoryProvider {
    fn acquire(&self, request: &BackgroundRequest<T>) -> Result<Background<T>, CompositeError> {
        let frame = request
            .frame
            .clone()
            .unwrap_or_else(|| request.tags.scene_id.clone());
        let (png, json) = self.frame_paths(&frame);
        if !json.exists() {
            return Err(CompositeError::MissingSidecar(json));
        }
        if !png.exists() {
            return Err(CompositeError::MissingImage(png));
        }
        let text = std::fs::read_to_string(&json).map_err(|source| CompositeError::Io {
            path: json.clone(),
            source,
        })?;
        let sidecar = Sidecar::<T>::parse(&text).map_err(|source| CompositeError::Sidecar {
            path: json.clone(),
            source,
        })?;
        let image = Image::<T>::load_png(&png)?;
        if let (Some(w), Some(h)) = (sidecar.width, sidecar.height) {
            image.ensure_dims("background image vs sidecar", w, h)?;
        }
        let res = request.resolution;
        image.ensure_dims("background image vs requested resolution", res.width, res.height)?;
        if let Some(found) = &sidecar.weather {
            let requested = &request.tags.weather_tag;
            if !requested.is_empty() && found != requested {
                return Err(CompositeError::WeatherMismatch {
                    frame,
                    found: found.clone(),
                    requested: requested.clone(),
                });
            }
        }
        Ok(Background {
            image,
            pose: sidecar.pose,
            env: sidecar.env,
        })
    }
}

/// Writes a background frame and its sidecar in the layout [`DirectoryProvider`] reads.
pub fn write_frame<T: Scalar>(
    dir: &Path,
    frame: &str,
    background: &Background<T>,
    weather: Option<&str>,
) -> Result<(), CompositeError> {
    let provider = DirectoryProvider::new(dir);
    let (png, json) = provider.frame_paths(frame);
    background.image.save_png(&png)?;
    let sidecar = Sidecar {
        pose: background.pose,
        env: background.env,
        width: Some(background.image.width()),
        height: Some(background.image.height()),
        weather: weather.map(str::to_string),
    };
    std::fs::write(&json, sidecar.to_json()).map_err(|source| CompositeError::Io { path: json, source })
}

/// `out[p] = mask[p] ? car[p] : background[p]`.
pub fn composite<T: Scalar>(
    car: &Image<T>,
    mask: &Mask,
    background: &Image<T>,
) -> Result<Image<T>, CompositeError> {
    let (w, h) = background.dims();
    car.ensure_dims("car image", w, h)?;
    if mask.dims() != (w, h) {
        return Err(ImageError::DimensionMismatch {
            what: "mask".into(),
            got_w: mask.width(),
            got_h: mask.height(),
            want_w: w,
            want_h: h,
        }
        .into());
    }
    let pixels = car
        .pixels()
        .iter()
        .zip(background.pixels())
        .zip(mask.bits())
        .map(|((c, b), m)| if *m { *c } else { *b })
        .collect();
    Ok(Image::from_pixels(w, h, pixels)?)
}

/// Gradient with respect to the car image from the gradient with respect to
/// the composite: background pixels pass nothing.
pub fn composite_backward<T: Scalar>(mask: &Mask, grad: &ImageGrad<T>) -> ImageGrad<T> {
    let pixels = grad
        .pixels()
        .iter()
        .zip(mask.bits())
        .map(|(g, m)| if *m { *g } else { Rgb::black() })
        .collect();
    Image::from_pixels(grad.width(), grad.height(), pixels).expect("same dimensions")
}

/// A composited frame with everything needed to differentiate through it.
#[derive(Debug, Clone)]
pub struct BuiltScene<T> {
    pub instance: SceneInstance<T>,
    pub composite: Image<T>,
    pub render: RenderOutput<T>,
}

impl<T: Scalar> BuiltScene<T> {
    pub fn visible(&self) -> bool {
        self.instance.visible()
    }

    /// Texture gradient of a loss given `dL/dcomposite`.
    pub fn texture_gradient(&self, grad: &ImageGrad<T>) -> Result<TextureGradient<T>, RenderError> {
        let car_grad = composite_backward(&self.render.mask, grad);
        render_backward(
            &self.render,
            &self.instance.env,
            self.render.texture_shape,
            &car_grad,
        )
    }

    /// Same scene with a different texture; geometry and background are reused.
    pub fn retexture(&self, texture: &Texture<T>) -> Result<BuiltScene<T>, CompositeError> {
        let render = self.render.retexture(texture, &self.instance.env)?;
        let composite = composite(&render.image, &render.mask, &self.instance.background)?;
        Ok(BuiltScene {
            instance: self.instance.clone(),
            composite,
            render,
        })
    }
}

/// Acquire background, render the vehicle with the background's parameters,
/// composite. A vehicle outside the view yields an instance with no box.
pub fn build_scene_instance<T: Scalar>(
    mesh: &Mesh<T>,
    texture: &Texture<T>,
    provider: &dyn BackgroundProvider<T>,
    request: &BackgroundRequest<T>,
) -> Result<BuiltScene<T>, CompositeError> {
    let bg = provider.acquire(request)?;
    build_from_background(mesh, texture, bg, request.tags.clone())
}

pub fn build_from_background<T: Scalar>(
    mesh: &Mesh<T>,
    texture: &Texture<T>,
    bg: Background<T>,
    tags: SceneTags,
) -> Result<BuiltScene<T>, CompositeError> {
    let res = Resolution::new(bg.image.width(), bg.image.height());
    let render = render(mesh, texture, &bg.pose, &bg.env, res)?;
    let composite = composite(&render.image, &render.mask, &bg.image)?;
    let instance = SceneInstance::new(bg.image, bg.pose, bg.env, &render.mask, tags);
    Ok(BuiltScene {
        instance,
        composite,
        render,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose() -> Pose<f64> {
        Pose::look_at(
            Vec3::new(-8.0, -3.0, 2.5),
            Vec3::new(0.0, 0.0, 0.8),
            Vec3::new(0.0, 0.0, 1.0),
            0.9,
        )
        .unwrap()
    }

    fn request(weather: &str) -> BackgroundRequest<f64> {
        BackgroundRequest {
            tags: SceneTags {
                scene_id: "loc-3".into(),
                weather_tag: weather.into(),
                viewpoint_tag: "monitor".into(),
            },
            pose: Some(pose()),
            frame: None,
            resolution: Resolution::new(48, 32),
        }
    }

    #[test]
    fn synthetic_uses_the_preset_env() {
        let provider = SyntheticProvider::<f64>::default();
        let bg = provider.acquire(&request("ClearNoon")).unwrap();
        let preset = default_presets::<f64>()
            .into_iter()
            .find(|p| p.name == "ClearNoon")
            .unwrap();
        assert_eq!(bg.env, preset.env);
        assert_eq!(bg.pose, pose());
        assert!(bg.image.in_unit_range());
        assert_eq!(bg.image.dims(), (48, 32));
    }

    #[test]
    fn synthetic_unknown_weather_and_missing_pose() {
        let provider = SyntheticProvider::<f64>::default();
        assert!(matches!(
            provider.acquire(&request("Blizzard")),
            Err(CompositeError::UnknownWeather(w)) if w == "Blizzard"
        ));
        let mut r = request("ClearNight");
        r.pose = None;
        assert!(matches!(provider.acquire(&r), Err(CompositeError::MissingPose)));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let provider = SyntheticProvider::<f64>::default();
        let a = provider.acquire(&request("WetCloudySunset")).unwrap();
        let b = provider.acquire(&request("WetCloudySunset")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn directory_provider_passthrough_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bg = SyntheticProvider::<f64>::default()
            .acquire(&request("ClearNoon"))
            .unwrap();
        write_frame(dir.path(), "frame_0001", &bg, Some("ClearNoon")).unwrap();
        let provider = DirectoryProvider::new(dir.path());
        let mut r = request("ClearNoon");
        r.frame = Some("frame_0001".into());
        let got: Background<f64> = provider.acquire(&r).unwrap();
        assert_eq!(got.pose, bg.pose);
        assert_eq!(got.env, bg.env);

        let mut wrong = r.clone();
        wrong.resolution = Resolution::new(10, 10);
        assert!(matches!(
            BackgroundProvider::<f64>::acquire(&provider, &wrong),
            Err(CompositeError::Image(ImageError::DimensionMismatch { .. }))
        ));
        let mut other = r.clone();
        other.tags.weather_tag = "ClearNight".into();
        assert!(matches!(
            BackgroundProvider::<f64>::acquire(&provider, &other),
            Err(CompositeError::WeatherMismatch { .. })
        ));
        let mut missing = r.clone();
        missing.frame = Some("frame_0002".into());
        assert!(matches!(
            BackgroundProvider::<f64>::acquire(&provider, &missing),
            Err(CompositeError::MissingSidecar(_))
        ));
    }

    #[test]
    fn sidecar_without_light_direction_names_key() {
        let dir = tempfile::tempdir().unwrap();
        let bg = SyntheticProvider::<f64>::default()
            .acquire(&request("ClearNoon"))
            .unwrap();
        write_frame(dir.path(), "f", &bg, None).unwrap();
        let json = dir.path().join("f.json");
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("light_direction");
        std::fs::write(&json, v.to_string()).unwrap();
        let mut r = request("ClearNoon");
        r.frame = Some("f".into());
        let err = BackgroundProvider::<f64>::acquire(&DirectoryProvider::new(dir.path()), &r)
            .unwrap_err();
        assert!(err.to_string().contains("light_direction"), "{err}");
    }

    #[test]
    fn composite_rejects_mismatched_dims() {
        let a = Image::<f64>::black(4, 4);
        let b = Image::<f64>::black(4, 5);
        assert!(composite(&a, &Mask::full(4, 4), &b).is_err());
        assert!(composite(&a, &Mask::full(4, 5), &a).is_err());
    }
}
