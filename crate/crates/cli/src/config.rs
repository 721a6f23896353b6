//! Resolved run configuration: defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use dci_core::attack::AttackConfig;
use dci_core::detector::ToyDetectorConfig;
use serde::{Deserialize, Serialize};

use crate::Fail;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every random choice derives from this.
    pub seed: u64,
    /// Worker threads; `None` uses all cores.
    pub workers: Option<usize>,
    /// Square image side in pixels.
    pub resolution: usize,
    /// OBJ vehicle model; the built-in box car when absent.
    pub mesh: Option<PathBuf>,
    /// Texture file; the built-in paint when absent.
    pub texture: Option<PathBuf>,
    /// Exported background frames; procedural backgrounds when absent.
    pub backgrounds: Option<PathBuf>,
    /// JSON list of weather presets; the three built-in presets when absent.
    pub weather_presets: Option<PathBuf>,
    /// JSON list of scene scripts; the seven bundled scripts when absent.
    pub scripts: Option<PathBuf>,
    pub generate: GenerateConfig,
    pub attack: AttackConfig,
    pub detector: DetectorConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: None,
            resolution: 128,
            mesh: None,
            texture: None,
            backgrounds: None,
            weather_presets: None,
            scripts: None,
            generate: GenerateConfig::default(),
            attack: AttackConfig::default(),
            detector: DetectorConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// `continuous` or `discrete`.
    pub part: String,
    /// Preset names, or `["all"]`. Empty means `all` for the continuous part
    /// and the first preset for the discrete part.
    pub weathers: Vec<String>,
    /// Meters between trajectory samples.
    pub step: f64,
    pub azimuths: usize,
    pub distances: usize,
    pub distance_start: f64,
    pub distance_step: f64,
    pub locations: usize,
    pub location_spacing: f64,
    pub pitches: Vec<f64>,
    pub fov: f64,
    /// Keep a seeded sample of at most this many discrete entries.
    pub cap: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            part: "continuous".into(),
            weathers: Vec::new(),
            step: 2.0,
            azimuths: 8,
            distances: 3,
            distance_start: 6.0,
            distance_step: 2.0,
            locations: 5,
            location_spacing: 25.0,
            pitches: vec![0.2],
            fov: 0.9,
            cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Saved toy model; trained from the dataset when absent.
    pub model: Option<PathBuf>,
    pub toy: ToyDetectorConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            model: None,
            toy: ToyDetectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub iou: f64,
    /// Split rows by weather as well as texture.
    pub by_weather: bool,
    /// Texture whose AP the others are compared with; the first one when absent.
    pub baseline: Option<String>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            iou: 0.5,
            by_weather: false,
            baseline: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Fail> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Fail::config(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Fail::config(format!("--config {}: {e}", path.display())))
    }

    /// `--config` when given, otherwise `fallback` when it exists, otherwise defaults.
    pub fn resolve(explicit: Option<&Path>, fallback: Option<&Path>) -> Result<Self, Fail> {
        match (explicit, fallback) {
            (Some(p), _) => Self::load(p),
            (None, Some(p)) if p.exists() => Self::load(p),
            _ => Ok(Self::default()),
        }
    }

    /// Pushes the top-level seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.attack.seed = self.seed;
        self.detector.toy.seed = self.seed;
    }

    /// Checks that referenced files exist, naming the flag that set them.
    pub fn check_paths(&self) -> Result<(), Fail> {
        let files = [
            ("--mesh", &self.mesh),
            ("--texture", &self.texture),
            ("--weather-presets", &self.weather_presets),
            ("--scripts", &self.scripts),
            ("--detector-model", &self.detector.model),
        ];
        for (flag, path) in files {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Fail::config(format!("{flag}: no such file {}", p.display())));
                }
            }
        }
        if let Some(p) = &self.backgrounds {
            if !p.is_dir() {
                return Err(Fail::config(format!("--backgrounds: no such directory {}", p.display())));
            }
        }
        if self.resolution == 0 {
            return Err(Fail::config("--res must be positive"));
        }
        if !(self.evaluate.iou > 0.0 && self.evaluate.iou <= 1.0) {
            return Err(Fail::config("evaluate.iou must lie in (0, 1]"));
        }
        if self.workers == Some(0) {
            return Err(Fail::config("--workers must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "attack": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.attack.epochs, 3);
        assert_eq!(c.attack.step, 1e-5);
        assert_eq!(c.resolution, 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 7}"#).is_err());
    }

    #[test]
    fn missing_mesh_names_flag() {
        let c = RunConfig {
            mesh: Some("/nonexistent/car.obj".into()),
            ..Default::default()
        };
        let e = c.check_paths().unwrap_err();
        assert_eq!(e.code, 1);
        assert!(e.message.contains("--mesh"));
    }

    #[test]
    fn seed_reaches_components() {
        let mut c = RunConfig {
            seed: 42,
            ..Default::default()
        };
        c.propagate_seed();
        assert_eq!(c.attack.seed, 42);
        assert_eq!(c.detector.toy.seed, 42);
    }
}
