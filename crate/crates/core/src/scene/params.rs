//! Camera pose and lighting parameters transferred between renderers, plus the
//! per-frame sidecar JSON that carries them.
//!
//! Sidecar keys (all required unless noted):
//!
//! | key | type |
//! |---|---|
//! | `model_angle` | vehicle yaw about +z, radians |
//! | `model_position` | optional `[x, y, z]`, default origin |
//! | `camera_position` | `[x, y, z]` meters |
//! | `camera_direction`, `camera_up` | unit `[x, y, z]` |
//! | `fov` | vertical field of view, radians |
//! | `ambient_intensity`, `directional_intensity` | ≥ 0 |
//! | `ambient_color`, `directional_color` | `[r, g, b]` in `[0, 1]` |
//! | `light_direction` | unit `[x, y, z]`, surface toward light |
//! | `width`, `height` | optional frame size in pixels |
//! | `weather` | optional weather name |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rgb, Vec3};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("{field} must be a unit vector (norm {norm})")]
    NotUnit { field: &'static str, norm: f64 },
    #[error("camera_direction and camera_up are parallel")]
    ParallelUp,
    #[error("fov {0} outside (0, pi)")]
    BadFov(f64),
    #[error("{field} must be finite and >= 0, got {value}")]
    BadIntensity { field: &'static str, value: f64 },
    #[error("{field} must have channels in [0, 1]")]
    BadColor { field: &'static str },
    #[error("{field} must be finite")]
    NonFinite { field: &'static str },
}

#[derive(Debug, Error)]
pub enum SidecarError {
    #[error("sidecar is not valid JSON: {0}")]
    Json(String),
    #[error("sidecar is missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("sidecar key `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("sidecar parameters invalid: {0}")]
    Invalid(#[from] ParamError),
}

const UNIT_TOL: f64 = 1e-6;

/// Geometric alignment parameters: vehicle yaw and camera placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Pose<T> {
    pub model_angle: T,
    #[serde(default = "Vec3::zero")]
    pub model_position: Vec3<T>,
    pub camera_position: Vec3<T>,
    pub camera_direction: Vec3<T>,
    pub camera_up: Vec3<T>,
    pub fov: T,
}

impl<T: Scalar> Pose<T> {
    /// Camera at `eye` looking at `target`; the vehicle sits at the origin with zero yaw.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, fov: T) -> Option<Self> {
        let dir = (target - eye).normalized()?;
        let up = up.normalized()?;
        Some(Pose {
            model_angle: T::zero(),
            model_position: Vec3::zero(),
            camera_position: eye,
            camera_direction: dir,
            camera_up: up,
            fov,
        })
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let tol = T::lit(UNIT_TOL);
        if !self.model_angle.is_finite() {
            return Err(ParamError::NonFinite {
                field: "model_angle",
            });
        }
        if !self.model_position.is_finite() {
            return Err(ParamError::NonFinite {
                field: "model_position",
            });
        }
        if !self.camera_position.is_finite() {
            return Err(ParamError::NonFinite {
                field: "camera_position",
            });
        }
        for (field, v) in [
            ("camera_direction", self.camera_direction),
            ("camera_up", self.camera_up),
        ] {
            if !v.is_finite() || !v.is_unit(tol) {
                return Err(ParamError::NotUnit {
                    field,
                    norm: v.norm().to_f64_lossy(),
                });
            }
        }
        if self.camera_direction.dot(self.camera_up).abs() >= T::one() - tol {
            return Err(ParamError::ParallelUp);
        }
        if !(self.fov > T::zero() && self.fov < T::PI()) {
            return Err(ParamError::BadFov(self.fov.to_f64_lossy()));
        }
        Ok(())
    }

    /// Vehicle model-space point to world space.
    pub fn model_to_world(&self, p: Vec3<T>) -> Vec3<T> {
        p.rotate_z(self.model_angle) + self.model_position
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        Pose {
            model_angle: U::lit(self.model_angle.to_f64_lossy()),
            model_position: self.model_position.cast(),
            camera_position: self.camera_position.cast(),
            camera_direction: self.camera_direction.cast(),
            camera_up: self.camera_up.cast(),
            fov: U::lit(self.fov.to_f64_lossy()),
        }
    }
}

/// Lighting parameters: ambient plus one directional light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct EnvironmentParams<T> {
    pub ambient_intensity: T,
    pub directional_intensity: T,
    pub ambient_color: Rgb<T>,
    pub directional_color: Rgb<T>,
    /// Direction from the surface toward the light.
    pub light_direction: Vec3<T>,
}

impl<T: Scalar> EnvironmentParams<T> {
    pub fn validate(&self) -> Result<(), ParamError> {
        for (field, v) in [
            ("ambient_intensity", self.ambient_intensity),
            ("directional_intensity", self.directional_intensity),
        ] {
            if !(v.is_finite() && v >= T::zero()) {
                return Err(ParamError::BadIntensity {
                    field,
                    value: v.to_f64_lossy(),
                });
            }
        }
        for (field, c) in [
            ("ambient_color", self.ambient_color),
            ("directional_color", self.directional_color),
        ] {
            if !c.in_unit_range() {
                return Err(ParamError::BadColor { field });
            }
        }
        let l = self.light_direction;
        if !l.is_finite() || !l.is_unit(T::lit(UNIT_TOL)) {
            return Err(ParamError::NotUnit {
                field: "light_direction",
                norm: l.norm().to_f64_lossy(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EnvironmentParams<U> {
        let c = |c: Rgb<T>| Rgb::new(U::lit(c.r.to_f64_lossy()), U::lit(c.g.to_f64_lossy()), U::lit(c.b.to_f64_lossy()));
        EnvironmentParams {
            ambient_intensity: U::lit(self.ambient_intensity.to_f64_lossy()),
            directional_intensity: U::lit(self.directional_intensity.to_f64_lossy()),
            ambient_color: c(self.ambient_color),
            directional_color: c(self.directional_color),
            light_direction: self.light_direction.cast(),
        }
    }
}

/// Parsed sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Sidecar<T> {
    #[serde(flatten)]
    pub pose: Pose<T>,
    #[serde(flatten)]
    pub env: EnvironmentParams<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<String>,
}

pub const SIDECAR_REQUIRED_KEYS: [&str; 10] = [
    "model_angle",
    "camera_position",
    "camera_direction",
    "camera_up",
    "fov",
    "ambient_intensity",
    "directional_intensity",
    "ambient_color",
    "directional_color",
    "light_direction",
];

impl<T: Scalar> Sidecar<T> {
    /// Parses and validates a sidecar; never fills in missing keys.
    pub fn parse(text: &str) -> Result<Self, SidecarError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SidecarError::Json(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| SidecarError::Json("top level must be an object".into()))?;
        for key in SIDECAR_REQUIRED_KEYS {
            if !obj.contains_key(key) {
                return Err(SidecarError::MissingKey(key));
            }
        }
        for (key, v) in obj {
            let probe: Result<(), String> = match key.as_str() {
                "model_angle" | "fov" | "ambient_intensity" | "directional_intensity" => {
                    serde_json::from_value::<f64>(v.clone()).map(|_| ()).map_err(|e| e.to_string())
                }
                "model_position" | "camera_position" | "camera_direction" | "camera_up"
                | "ambient_color" | "directional_color" | "light_direction" => {
                    serde_json::from_value::<[f64; 3]>(v.clone())
                        .map(|_| ())
                        .map_err(|e| e.to_string())
                }
                _ => Ok(()),
            };
            probe.map_err(|message| SidecarError::BadValue {
                key: key.clone(),
                message,
            })?;
        }
        let sidecar: Sidecar<T> =
            serde_json::from_value(value).map_err(|e| SidecarError::Json(e.to_string()))?;
        sidecar.pose.validate()?;
        sidecar.env.validate()?;
        Ok(sidecar)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_pose() -> Pose<f64> {
        Pose::look_at(
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::zero(),
            Vec3::new(0.0, 1.0, 0.0),
            std::f64::consts::FRAC_PI_2,
        )
        .unwrap()
    }

    fn sample_env() -> EnvironmentParams<f64> {
        EnvironmentParams {
            ambient_intensity: 0.4,
            directional_intensity: 0.6,
            ambient_color: Rgb::splat(1.0),
            directional_color: Rgb::new(1.0, 0.9, 0.8),
            light_direction: Vec3::new(0.0, 0.0, 1.0),
        }
    }

    #[test]
    fn pose_validation() {
        let mut p = sample_pose();
        p.validate().unwrap();
        p.camera_up = p.camera_direction;
        assert_eq!(p.validate(), Err(ParamError::ParallelUp));
        let mut p = sample_pose();
        p.fov = std::f64::consts::PI;
        assert!(matches!(p.validate(), Err(ParamError::BadFov(_))));
        let mut p = sample_pose();
        p.camera_up = Vec3::new(0.0, 2.0, 0.0);
        assert!(matches!(p.validate(), Err(ParamError::NotUnit { field: "camera_up", .. })));
    }

    #[test]
    fn env_validation() {
        sample_env().validate().unwrap();
        let mut e = sample_env();
        e.ambient_intensity = -0.1;
        assert!(e.validate().is_err());
        let mut e = sample_env();
        e.directional_color.g = 1.5;
        assert!(e.validate().is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let s = Sidecar {
            pose: sample_pose(),
            env: sample_env(),
            width: Some(64),
            height: Some(48),
            weather: Some("ClearNoon".into()),
        };
        let back = Sidecar::<f64>::parse(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sidecar_missing_key_is_named() {
        let s = Sidecar {
            pose: sample_pose(),
            env: sample_env(),
            width: None,
            height: None,
            weather: None,
        };
        let mut v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("light_direction");
        let err = Sidecar::<f64>::parse(&v.to_string()).unwrap_err();
        assert!(matches!(err, SidecarError::MissingKey("light_direction")));
        assert!(err.to_string().contains("light_direction"));
    }

    #[test]
    fn sidecar_bad_value_names_key() {
        let s = Sidecar {
            pose: sample_pose(),
            env: sample_env(),
            width: None,
            height: None,
            weather: None,
        };
        let mut v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        v["fov"] = serde_json::json!("wide");
        let err = Sidecar::<f64>::parse(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("`fov`"), "{err}");
    }
}
