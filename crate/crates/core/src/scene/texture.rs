//! Per-face texture grids.
//!
//! Each triangle is subdivided into `T²` congruent sub-triangles by cutting
//! every edge into `T` equal parts. A surface point is colored by the
//! sub-triangle that contains it, located from its barycentric coordinates.
//! Row `i` of the subdivision (points with `floor(T·w1) = i`) holds `2(T-i)-1`
//! bins: upright cells at even offsets, inverted cells at odd offsets.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Rgb;
use crate::scalar::Scalar;
use crate::scene::mesh::Mesh;

pub const DEFAULT_RESOLUTION: usize = 4;

#[derive(Debug, Error)]
pub enum TextureError {
    #[error("texture has {texture} faces but the mesh has {mesh}")]
    FaceCountMismatch { texture: usize, mesh: usize },
    #[error("texture value {value} out of [0,1] at face {face}, bin {bin}, channel {channel}")]
    OutOfRange {
        face: usize,
        bin: usize,
        channel: usize,
        value: f64,
    },
    #[error("texture data has {got} bins, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("texture resolution must be at least 1")]
    ZeroResolution,
    #[error("texture file: {0}")]
    Format(String),
    #[error("texture file i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Bin index of the sub-triangle containing barycentric point `bary` (weights
/// of the face's three corners).
pub fn barycentric_bin<T: Scalar>(resolution: usize, bary: [T; 3]) -> usize {
    let n = T::from_usize_lossy(resolution);
    let a = (bary[1] * n).max(T::zero());
    let b = (bary[2] * n).max(T::zero());
    let i = a.floor().to_usize().unwrap_or(0).min(resolution - 1);
    let j = b.floor().to_usize().unwrap_or(0).min(resolution - 1 - i);
    let fa = a - T::from_usize_lossy(i);
    let fb = b - T::from_usize_lossy(j);
    let offset = i * (2 * resolution - i);
    if i + j + 1 < resolution && fa + fb > T::one() {
        offset + 2 * j + 1
    } else {
        offset + 2 * j
    }
}

/// RGB values per face and bin, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture<T> {
    faces: usize,
    resolution: usize,
    data: Vec<Rgb<T>>,
}

impl<T: Scalar> Texture<T> {
    pub fn uniform(faces: usize, resolution: usize, color: Rgb<T>) -> Result<Self, TextureError> {
        if resolution == 0 {
            return Err(TextureError::ZeroResolution);
        }
        Ok(Texture {
            faces,
            resolution,
            data: vec![color; faces * resolution * resolution],
        })
    }

    pub fn from_data(
        faces: usize,
        resolution: usize,
        data: Vec<Rgb<T>>,
    ) -> Result<Self, TextureError> {
        if resolution == 0 {
            return Err(TextureError::ZeroResolution);
        }
        let expected = faces * resolution * resolution;
        if data.len() != expected {
            return Err(TextureError::BadLength {
                got: data.len(),
                expected,
            });
        }
        Ok(Texture {
            faces,
            resolution,
            data,
        })
    }

    /// Uniformly random colors in `[0, 1)` from a seeded generator.
    pub fn random(faces: usize, resolution: usize, seed: u64) -> Result<Self, TextureError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..faces * resolution * resolution)
            .map(|_| {
                Rgb::new(
                    T::lit(rng.gen::<f64>()),
                    T::lit(rng.gen::<f64>()),
                    T::lit(rng.gen::<f64>()),
                )
            })
            .collect();
        Self::from_data(faces, resolution, data)
    }

    pub fn faces(&self) -> usize {
        self.faces
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bins_per_face(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn shape(&self) -> TextureShape {
        TextureShape {
            faces: self.faces,
            resolution: self.resolution,
        }
    }

    pub fn data(&self) -> &[Rgb<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Rgb<T>] {
        &mut self.data
    }

    pub fn bin(&self, face: usize, bin: usize) -> Rgb<T> {
        self.data[face * self.bins_per_face() + bin]
    }

    pub fn bin_mut(&mut self, face: usize, bin: usize) -> &mut Rgb<T> {
        let bpf = self.bins_per_face();
        &mut self.data[face * bpf + bin]
    }

    /// Color sampled at barycentric point `bary` of `face`.
    pub fn sample(&self, face: usize, bary: [T; 3]) -> Rgb<T> {
        self.bin(face, barycentric_bin(self.resolution, bary))
    }

    /// First channel value outside `[0, 1]`, if any.
    pub fn check_range(&self) -> Result<(), TextureError> {
        let bpf = self.bins_per_face();
        for (k, c) in self.data.iter().enumerate() {
            for (channel, v) in c.channels().into_iter().enumerate() {
                if !(v >= T::zero() && v <= T::one()) {
                    return Err(TextureError::OutOfRange {
                        face: k / bpf,
                        bin: k % bpf,
                        channel,
                        value: v.to_f64_lossy(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Little-endian `f64` bytes of every channel, bin-major.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 24);
        for c in &self.data {
            for v in c.channels() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of [`Texture::raw_bytes`].
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.raw_bytes()))
    }

    /// Writes the texture file: one JSON header line, then the raw grid.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), TextureError> {
        let raw = self.raw_bytes();
        let header = TextureFileHeader {
            format: TEXTURE_FORMAT.to_string(),
            version: 1,
            faces: self.faces,
            resolution: self.resolution,
            checksum: hex::encode(Sha256::digest(&raw)),
        };
        let mut line = serde_json::to_vec(&header).map_err(|e| TextureError::Format(e.to_string()))?;
        line.push(b'\n');
        w.write_all(&line)?;
        w.write_all(&raw)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TextureError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| TextureError::Format("missing header line".into()))?;
        let header: TextureFileHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| TextureError::Format(format!("bad header: {e}")))?;
        if header.format != TEXTURE_FORMAT {
            return Err(TextureError::Format(format!(
                "unknown format `{}`",
                header.format
            )));
        }
        let raw = &bytes[nl + 1..];
        let bins = header.faces * header.resolution * header.resolution;
        if raw.len() != bins * 24 {
            return Err(TextureError::Format(format!(
                "payload is {} bytes, expected {}",
                raw.len(),
                bins * 24
            )));
        }
        if hex::encode(Sha256::digest(raw)) != header.checksum {
            return Err(TextureError::Format("checksum mismatch".into()));
        }
        let data = raw
            .chunks_exact(24)
            .map(|c| {
                let f = |k: usize| {
                    T::lit(f64::from_le_bytes(c[k * 8..k * 8 + 8].try_into().unwrap()))
                };
                Rgb::new(f(0), f(1), f(2))
            })
            .collect();
        let tex = Self::from_data(header.faces, header.resolution, data)?;
        tex.check_range()?;
        Ok(tex)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextureError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextureError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

const TEXTURE_FORMAT: &str = "dci-texture";

#[derive(Debug, Serialize, Deserialize)]
struct TextureFileHeader {
    format: String,
    version: u32,
    faces: usize,
    resolution: usize,
    checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextureShape {
    pub faces: usize,
    pub resolution: usize,
}

impl TextureShape {
    pub fn bins(&self) -> usize {
        self.faces * self.resolution * self.resolution
    }
}

/// Checks that `tex` belongs to `mesh` and holds only values in `[0, 1]`.
pub fn validate_texture<T: Scalar>(tex: &Texture<T>, mesh: &Mesh<T>) -> Result<(), TextureError> {
    if tex.faces() != mesh.face_count() {
        return Err(TextureError::FaceCountMismatch {
            texture: tex.faces(),
            mesh: mesh.face_count(),
        });
    }
    tex.check_range()
}

/// Partial derivatives of a scalar loss with respect to every texture channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureGradient<T> {
    shape: TextureShape,
    data: Vec<Rgb<T>>,
}

impl<T: Scalar> TextureGradient<T> {
    pub fn zeros(shape: TextureShape) -> Self {
        TextureGradient {
            shape,
            data: vec![Rgb::black(); shape.bins()],
        }
    }

    pub fn shape(&self) -> TextureShape {
        self.shape
    }

    pub fn data(&self) -> &[Rgb<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Rgb<T>] {
        &mut self.data
    }

    pub fn bin(&self, face: usize, bin: usize) -> Rgb<T> {
        self.data[face * self.shape.resolution * self.shape.resolution + bin]
    }

    pub fn bin_mut(&mut self, face: usize, bin: usize) -> &mut Rgb<T> {
        let bpf = self.shape.resolution * self.shape.resolution;
        &mut self.data[face * bpf + bin]
    }

    /// `self += other`, bin by bin.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|c| c.channels().iter().all(|v| *v == T::zero()))
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .flat_map(|c| c.channels())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
