//! Named lighting presets.
//!
//! The numeric values are this project's own choices for the three weather
//! names; they are tuned to look plausible, not measured from any simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rgb, Vec3};
use crate::scalar::Scalar;
use crate::scene::{EnvironmentParams, ParamError};

pub const CLEAR_NOON: &str = "ClearNoon";
pub const CLEAR_NIGHT: &str = "ClearNight";
pub const WET_CLOUDY_SUNSET: &str = "WetCloudySunset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct WeatherPreset<T> {
    pub name: String,
    pub env: EnvironmentParams<T>,
}

#[derive(Debug, Error)]
pub enum WeatherError {
    #[error("duplicate weather preset `{0}`")]
    Duplicate(String),
    #[error("weather preset `{name}`: {source}")]
    Invalid { name: String, source: ParamError },
    #[error("unknown weather `{0}`")]
    Unknown(String),
}

fn preset<T: Scalar>(
    name: &str,
    ambient: f64,
    ambient_color: [f64; 3],
    directional: f64,
    directional_color: [f64; 3],
    light: [f64; 3],
) -> WeatherPreset<T> {
    let c = |a: [f64; 3]| Rgb::from_f64(a[0], a[1], a[2]);
    WeatherPreset {
        name: name.to_string(),
        env: EnvironmentParams {
            ambient_intensity: T::lit(ambient),
            directional_intensity: T::lit(directional),
            ambient_color: c(ambient_color),
            directional_color: c(directional_color),
            light_direction: Vec3::from_f64(light[0], light[1], light[2])
                .normalized()
                .expect("nonzero light direction"),
        },
    }
}

/// ClearNoon, ClearNight and WetCloudySunset, in that order.
pub fn default_presets<T: Scalar>() -> Vec<WeatherPreset<T>> {
    vec![
        preset(CLEAR_NOON, 0.55, [1.0, 1.0, 1.0], 0.6, [1.0, 0.97, 0.9], [0.3, 0.2, 0.93]),
        preset(CLEAR_NIGHT, 0.18, [0.55, 0.6, 0.85], 0.12, [0.6, 0.65, 0.9], [-0.2, 0.4, 0.89]),
        preset(
            WET_CLOUDY_SUNSET,
            0.38,
            [0.78, 0.72, 0.72],
            0.5,
            [1.0, 0.62, 0.38],
            [0.85, -0.2, 0.3],
        ),
    ]
}

/// Checks names are unique and every env is valid.
pub fn validate_presets<T: Scalar>(presets: &[WeatherPreset<T>]) -> Result<(), WeatherError> {
    let mut seen = std::collections::BTreeSet::new();
    for p in presets {
        if !seen.insert(p.name.as_str()) {
            return Err(WeatherError::Duplicate(p.name.clone()));
        }
        p.env.validate().map_err(|source| WeatherError::Invalid {
            name: p.name.clone(),
            source,
        })?;
    }
    Ok(())
}

pub fn find_preset<'a, T: Scalar>(
    presets: &'a [WeatherPreset<T>],
    name: &str,
) -> Result<&'a WeatherPreset<T>, WeatherError> {
    presets
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| WeatherError::Unknown(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_named() {
        let p = default_presets::<f64>();
        validate_presets(&p).unwrap();
        let names: Vec<_> = p.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["ClearNoon", "ClearNight", "WetCloudySunset"]);
    }

    #[test]
    fn duplicates_rejected() {
        let mut p = default_presets::<f64>();
        p.push(p[0].clone());
        assert!(matches!(validate_presets(&p), Err(WeatherError::Duplicate(_))));
        assert!(find_preset(&p, "Foggy").is_err());
    }
}
