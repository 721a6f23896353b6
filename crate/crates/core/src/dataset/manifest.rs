//! Dataset manifests: the combinatorial discrete part and the scripted
//! continuous part.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_graph::{
    poses_from_samples, sample_trajectory, shortest_path, CaseGraph, EdgeRecord, GraphError,
    GraphFile, NodeRecord, RigConfig, VehiclePlacement,
};
use crate::dataset::weather::{find_preset, WeatherPreset};
use crate::geometry::Vec3;
use crate::scalar::Scalar;
use crate::scene::{Pose, VEHICLE_CENTER_HEIGHT};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("`{0}` list is empty")]
    EmptyList(&'static str),
    #[error("cap {cap} exceeds the {cardinality} combinations available")]
    CapTooLarge { cap: u128, cardinality: u128 },
    #[error("discrete space of {0} entries is too large to index on this platform")]
    TooLarge(u128),
    #[error("pitch {0} rad leaves the camera looking straight up or down")]
    BadPitch(f64),
    #[error("distance {0} must be positive")]
    BadDistance(f64),
    #[error("script `{script}`: {source}")]
    Script {
        script: String,
        #[source]
        source: GraphError,
    },
    #[error("entry {entry}: pose is invalid ({reason})")]
    BadPose { entry: String, reason: String },
    #[error("duplicate entry id `{0}`")]
    DuplicateEntry(String),
    #[error("entry {entry}: unknown weather `{weather}`")]
    UnknownWeather { entry: String, weather: String },
    #[error("manifest {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Discrete,
    Continuous,
}

/// Where a continuous entry sits on its script's trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct TrajectoryRef<T> {
    pub script: String,
    pub sample: usize,
    pub arc_length: T,
    /// The sampled point; the vehicle (monitor, drone) or the camera foot
    /// point (driver) is placed here.
    pub position: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ManifestEntry<T> {
    pub entry_id: String,
    pub scene_id: String,
    pub weather: String,
    pub viewpoint: String,
    pub pose: Pose<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryRef<T>>,
    /// Frame stem handed to the background provider.
    pub background: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Manifest<T> {
    pub part: Part,
    pub seed: u64,
    pub entries: Vec<ManifestEntry<T>>,
}

impl<T: Scalar> Manifest<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry ids are unique and every weather names a preset.
    pub fn validate(&self, presets: &[WeatherPreset<T>]) -> Result<(), ManifestError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.entry_id.as_str()) {
                return Err(ManifestError::DuplicateEntry(e.entry_id.clone()));
            }
            find_preset(presets, &e.weather).map_err(|_| ManifestError::UnknownWeather {
                entry: e.entry_id.clone(),
                weather: e.weather.clone(),
            })?;
            e.pose.validate().map_err(|err| ManifestError::BadPose {
                entry: e.entry_id.clone(),
                reason: err.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let err = |message: String| ManifestError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

/// The discrete grid. Entries are indexed in mixed radix with location
/// outermost, then azimuth, distance, pitch and lighting, so any entry can be
/// produced without enumerating the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct DiscreteSpace<T> {
    /// Radians, measured from the vehicle's +x axis.
    pub azimuths: Vec<T>,
    /// Camera distance from the vehicle center, meters.
    pub distances: Vec<T>,
    /// Vehicle positions on the ground plane.
    pub locations: Vec<Vec3<T>>,
    /// Camera elevation above the horizontal, radians.
    pub pitches: Vec<T>,
    /// Weather preset names.
    pub lighting: Vec<String>,
    pub fov: T,
}

impl<T: Scalar> DiscreteSpace<T> {
    pub fn new(
        azimuths: Vec<T>,
        distances: Vec<T>,
        locations: Vec<Vec3<T>>,
        pitches: Vec<T>,
        lighting: Vec<String>,
        fov: T,
    ) -> Result<Self, ManifestError> {
        for (name, len) in [
            ("azimuths", azimuths.len()),
            ("distances", distances.len()),
            ("locations", locations.len()),
            ("pitch", pitches.len()),
            ("lighting", lighting.len()),
        ] {
            if len == 0 {
                return Err(ManifestError::EmptyList(name));
            }
        }
        let limit = T::FRAC_PI_2() - T::lit(1e-3);
        if let Some(p) = pitches.iter().find(|p| !(p.abs() < limit)) {
            return Err(ManifestError::BadPitch(p.to_f64_lossy()));
        }
        if let Some(d) = distances.iter().find(|d| !(**d > T::zero()) || !d.is_finite()) {
            return Err(ManifestError::BadDistance(d.to_f64_lossy()));
        }
        Ok(DiscreteSpace {
            azimuths,
            distances,
            locations,
            pitches,
            lighting,
            fov,
        })
    }

    /// A grid at the scale of the published benchmark: 40 azimuths, 15
    /// distances and 20,000 locations, one pitch, every given lighting name.
    pub fn full_scale(lighting: Vec<String>) -> Result<Self, ManifestError> {
        Self::new(
            even_azimuths(40),
            (0..15).map(|k| T::lit(4.0 + 2.0 * k as f64)).collect(),
            grid_locations(20_000, T::lit(25.0)),
            vec![T::lit(0.2)],
            lighting,
            T::lit(0.9),
        )
    }

    pub fn cardinality(&self) -> u128 {
        [
            self.locations.len(),
            self.azimuths.len(),
            self.distances.len(),
            self.pitches.len(),
            self.lighting.len(),
        ]
        .iter()
        .map(|&n| n as u128)
        .product()
    }

    /// The entry at mixed-radix `index`.
    pub fn entry(&self, index: u128) -> Result<ManifestEntry<T>, ManifestError> {
        let mut rest = index;
        let mut digit = |n: usize| {
            let d = (rest % n as u128) as usize;
            rest /= n as u128;
            d
        };
        let light = digit(self.lighting.len());
        let pitch = digit(self.pitches.len());
        let dist = digit(self.distances.len());
        let az = digit(self.azimuths.len());
        let loc = digit(self.locations.len());
        debug_assert_eq!(rest, 0, "index out of range");

        let center = self.locations[loc] + Vec3::new(T::zero(), T::zero(), T::lit(VEHICLE_CENTER_HEIGHT));
        let (a, p, d) = (self.azimuths[az], self.pitches[pitch], self.distances[dist]);
        let offset = Vec3::new(p.cos() * a.cos(), p.cos() * a.sin(), p.sin()) * d;
        let entry_id = format!("d{index:08}");
        let mut pose = Pose::look_at(
            center + offset,
            center,
            Vec3::new(T::zero(), T::zero(), T::one()),
            self.fov,
        )
        .ok_or_else(|| ManifestError::BadPose {
            entry: entry_id.clone(),
            reason: "camera coincides with the vehicle".into(),
        })?;
        pose.model_position = self.locations[loc];
        Ok(ManifestEntry {
            background: entry_id.clone(),
            entry_id,
            scene_id: format!("loc{loc:05}"),
            weather: self.lighting[light].clone(),
            viewpoint: "orbit".into(),
            pose,
            trajectory: None,
        })
    }
}

/// `n` azimuths evenly spaced over a full turn, starting at 0.
pub fn even_azimuths<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|k| T::lit(std::f64::consts::TAU * k as f64 / n as f64))
        .collect()
}

/// `n` ground positions on a square-ish grid with the given spacing, row by row.
pub fn grid_locations<T: Scalar>(n: usize, spacing: T) -> Vec<Vec3<T>> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|k| {
            Vec3::new(
                T::from_usize_lossy(k % cols) * spacing,
                T::from_usize_lossy(k / cols) * spacing,
                T::zero(),
            )
        })
        .collect()
}

/// Every combination of `space`, or a seeded uniform subsample of `cap` of them
/// kept in index order.
pub fn build_discrete_manifest<T: Scalar>(
    space: &DiscreteSpace<T>,
    cap: Option<usize>,
    seed: u64,
) -> Result<Manifest<T>, ManifestError> {
    let n = space.cardinality();
    let indices: Vec<u128> = match cap {
        None => {
            let n = usize::try_from(n).map_err(|_| ManifestError::TooLarge(n))?;
            (0..n as u128).collect()
        }
        Some(cap) if cap as u128 > n => {
            return Err(ManifestError::CapTooLarge {
                cap: cap as u128,
                cardinality: n,
            })
        }
        Some(cap) => {
            let total = usize::try_from(n).map_err(|_| ManifestError::TooLarge(n))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, total, cap).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| i as u128).collect()
        }
    };
    let entries = indices
        .into_iter()
        .map(|i| space.entry(i))
        .collect::<Result<_, _>>()?;
    Ok(Manifest {
        part: Part::Discrete,
        seed,
        entries,
    })
}

/// A scripted continuous scene: a graph, endpoints and a camera rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct SceneScript<T> {
    pub name: String,
    pub graph: GraphFile,
    pub start: u64,
    pub end: u64,
    pub viewpoint: String,
    pub rig: RigConfig<T>,
    /// Heading used when the path has no length.
    pub default_heading: [T; 2],
}

impl<T: Scalar> SceneScript<T> {
    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
            .collect()
    }
}

fn graph(nodes: &[(u64, f64, f64)], edges: &[(u64, u64)]) -> GraphFile {
    GraphFile {
        nodes: nodes
            .iter()
            .map(|&(id, x, y)| NodeRecord { id, x, y, z: 0.0 })
            .collect(),
        edges: edges
            .iter()
            .map(|&(a, b)| EdgeRecord { a, b, weight: None })
            .collect(),
    }
}

fn driver_rig<T: Scalar>(x: f64, y: f64, yaw: f64) -> RigConfig<T> {
    RigConfig {
        target: VehiclePlacement {
            position: Vec3::from_f64(x, y, 0.0),
            yaw: T::lit(yaw),
        },
        ..RigConfig::default()
    }
}

/// The seven bundled continuous scenes. Geometry is invented; only the scene
/// names and their viewpoints follow the benchmark layout.
pub fn default_scripts<T: Scalar>() -> Vec<SceneScript<T>> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let script = |name: &str, graph: GraphFile, start, end, viewpoint: &str, rig, heading: [f64; 2]| {
        SceneScript {
            name: name.to_string(),
            graph,
            start,
            end,
            viewpoint: viewpoint.to_string(),
            rig,
            default_heading: [T::lit(heading[0]), T::lit(heading[1])],
        }
    };

    let ring: Vec<(u64, f64, f64)> = (0..16)
        .map(|k| {
            let a = PI * 2.0 * k as f64 / 16.0;
            (k as u64, 12.0 * a.cos(), 12.0 * a.sin())
        })
        .collect();
    let ring_edges: Vec<(u64, u64)> = (0..16).map(|k| (k, (k + 1) % 16)).collect();
    let monitor = RigConfig {
        monitor_anchor: Vec3::from_f64(0.0, 0.0, 8.0),
        ..RigConfig::default()
    };

    let straight_a: Vec<(u64, f64, f64)> = (0..6).map(|k| (k as u64, -104.0 + 20.0 * k as f64, 0.0)).collect();
    let straight_a_edges: Vec<(u64, u64)> = (0..5).map(|k| (k, k + 1)).collect();
    let straight_b: Vec<(u64, f64, f64)> = (0..6).map(|k| (k as u64, -60.0 + 10.0 * k as f64, 3.0)).collect();
    let stationary_b = [-7.0f64, 3.0];
    let sb_norm = (stationary_b[0] * stationary_b[0] + stationary_b[1] * stationary_b[1]).sqrt();

    vec![
        script("Traffic Circle", graph(&ring, &ring_edges), 0, 8, "monitor", monitor, [1.0, 0.0]),
        script(
            "Parking Lot",
            graph(
                &[
                    (1, -34.0, 6.0),
                    (2, -18.0, 6.0),
                    (3, -12.0, 0.0),
                    (4, -4.0, 0.0),
                    (5, -18.0, -6.0),
                    (6, -26.0, -6.0),
                ],
                &[(1, 2), (2, 3), (3, 4), (1, 6), (6, 5), (5, 3)],
            ),
            1,
            4,
            "driver",
            driver_rig(6.0, 0.0, FRAC_PI_2),
            [1.0, 0.0],
        ),
        script(
            "Stationary A",
            graph(&[(1, -10.0, 0.0)], &[]),
            1,
            1,
            "driver",
            driver_rig(0.0, 0.0, 0.3),
            [1.0, 0.0],
        ),
        script("Straight A", graph(&straight_a, &straight_a_edges), 0, 5, "driver", driver_rig(6.0, 0.0, 0.0), [1.0, 0.0]),
        script(
            "Turning A",
            graph(
                &[(1, -20.0, -20.0), (2, -20.0, -6.0), (3, -14.0, 0.0), (4, -4.0, 0.0)],
                &[(1, 2), (2, 3), (3, 4)],
            ),
            1,
            4,
            "driver",
            driver_rig(8.0, 0.0, 0.0),
            [0.0, 1.0],
        ),
        script(
            "Stationary B",
            graph(&[(1, stationary_b[0], stationary_b[1])], &[]),
            1,
            1,
            "driver",
            driver_rig(0.0, 0.0, FRAC_PI_2),
            [-stationary_b[0] / sb_norm, -stationary_b[1] / sb_norm],
        ),
        script("Straight B", graph(&straight_b, &straight_a_edges), 0, 5, "driver", driver_rig(5.0, 0.0, PI), [1.0, 0.0]),
    ]
}

/// For each script and weather: shortest path, samples every `step` meters,
/// one pose per sample.
pub fn build_continuous_manifest<T: Scalar>(
    scripts: &[SceneScript<T>],
    presets: &[WeatherPreset<T>],
    step: T,
    seed: u64,
) -> Result<Manifest<T>, ManifestError> {
    if scripts.is_empty() {
        return Err(ManifestError::EmptyList("scene scripts"));
    }
    if presets.is_empty() {
        return Err(ManifestError::EmptyList("weather presets"));
    }
    let mut entries = Vec::new();
    for script in scripts {
        let wrap = |source| ManifestError::Script {
            script: script.name.clone(),
            source,
        };
        let g = CaseGraph::<T>::from_file(&script.graph).map_err(wrap)?;
        let traj = shortest_path(&g, script.start, script.end).map_err(wrap)?;
        let samples = sample_trajectory(&traj, step, script.default_heading).map_err(wrap)?;
        let poses = poses_from_samples(&samples, &script.viewpoint, &script.rig).map_err(wrap)?;
        let slug = script.slug();
        for preset in presets {
            for (k, (pose, sample)) in poses.iter().zip(&samples).enumerate() {
                let entry_id = format!("c-{slug}-{}-{k:05}", preset.name);
                entries.push(ManifestEntry {
                    background: entry_id.clone(),
                    entry_id,
                    scene_id: script.name.clone(),
                    weather: preset.name.clone(),
                    viewpoint: script.viewpoint.clone(),
                    pose: *pose,
                    trajectory: Some(TrajectoryRef {
                        script: script.name.clone(),
                        sample: k,
                        arc_length: sample.arc_length,
                        position: sample.position,
                    }),
                });
            }
        }
    }
    Ok(Manifest {
        part: Part::Continuous,
        seed,
        entries,
    })
}
