//! Built-in low-poly vehicle used when no OBJ model is supplied.
//!
//! Model space: +x forward, +y left, +z up; wheels touch `z = 0` and the body
//! is centered on the origin in x and y.

use crate::geometry::{Rgb, Vec3};
use crate::scalar::Scalar;
use crate::scene::mesh::Mesh;
use crate::scene::texture::{Texture, TextureError};

#[derive(Default)]
struct Builder {
    vertices: Vec<[f64; 3]>,
    normals: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
}

impl Builder {
    /// Axis-aligned box with each side split into `n x n` quads, outward winding.
    fn add_box(&mut self, min: [f64; 3], max: [f64; 3], n: usize) {
        let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
        let ex = [d[0], 0.0, 0.0];
        let ey = [0.0, d[1], 0.0];
        let ez = [0.0, 0.0, d[2]];
        let sides: [([f64; 3], [f64; 3], [f64; 3], [f64; 3]); 6] = [
            ([max[0], min[1], min[2]], ey, ez, [1.0, 0.0, 0.0]),
            (min, ez, ey, [-1.0, 0.0, 0.0]),
            ([min[0], max[1], min[2]], ez, ex, [0.0, 1.0, 0.0]),
            (min, ex, ez, [0.0, -1.0, 0.0]),
            ([min[0], min[1], max[2]], ex, ey, [0.0, 0.0, 1.0]),
            (min, ey, ex, [0.0, 0.0, -1.0]),
        ];
        for (origin, u, v, normal) in sides {
            self.normals.push(normal);
            let base = self.vertices.len() as u32;
            for j in 0..=n {
                for i in 0..=n {
                    let (a, b) = (i as f64 / n as f64, j as f64 / n as f64);
                    self.vertices.push([
                        origin[0] + a * u[0] + b * v[0],
                        origin[1] + a * u[1] + b * v[1],
                        origin[2] + a * u[2] + b * v[2],
                    ]);
                }
            }
            let idx = |i: usize, j: usize| base + (j * (n + 1) + i) as u32;
            for j in 0..n {
                for i in 0..n {
                    let (p00, p10, p11, p01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                    self.faces.push([p00, p10, p11]);
                    self.faces.push([p00, p11, p01]);
                }
            }
        }
    }

    fn build<T: Scalar>(self) -> Mesh<T> {
        let v = |a: [f64; 3]| Vec3::from_f64(a[0], a[1], a[2]);
        Mesh::new(
            self.vertices.into_iter().map(v).collect(),
            self.normals.into_iter().map(v).collect(),
            self.faces,
        )
        .expect("built-in vehicle mesh is valid")
    }
}

/// Sedan-sized box car: 4.6 m long, 1.9 m wide, 1.7 m tall.
pub fn procedural_car<T: Scalar>() -> Mesh<T> {
    let mut b = Builder::default();
    b.add_box([-2.3, -0.95, 0.35], [2.3, 0.95, 1.1], 3);
    b.add_box([-1.3, -0.85, 1.1], [1.0, 0.85, 1.7], 2);
    for (x, y) in [(1.45, 0.8), (1.45, -1.05), (-1.45, 0.8), (-1.45, -1.05)] {
        b.add_box([x - 0.35, y, 0.0], [x + 0.35, y + 0.25, 0.7], 1);
    }
    b.build()
}

/// Plain paint for [`procedural_car`]: red body and roof, dark glass on the
/// cabin sides, black tires.
pub fn procedural_car_paint<T: Scalar>(resolution: usize) -> Result<Texture<T>, TextureError> {
    const BODY: usize = 6 * 9 * 2;
    const CABIN: usize = 6 * 4 * 2;
    const WHEELS: usize = 4 * 6 * 2;
    // The fifth side added by `add_box` is the top.
    let roof = BODY + 4 * 8..BODY + 5 * 8;
    let red = Rgb::from_f64(0.78, 0.1, 0.08);
    let glass = Rgb::from_f64(0.12, 0.16, 0.24);
    let tire = Rgb::from_f64(0.04, 0.04, 0.04);
    let bins = resolution * resolution;
    let mut data = Vec::with_capacity((BODY + CABIN + WHEELS) * bins);
    for face in 0..BODY + CABIN + WHEELS {
        let c = if face < BODY || roof.contains(&face) {
            red
        } else if face < BODY + CABIN {
            glass
        } else {
            tire
        };
        data.extend(std::iter::repeat_n(c, bins));
    }
    Texture::from_data(BODY + CABIN + WHEELS, resolution, data)
}

/// Height of the vehicle's visual center above the ground, for aiming cameras.
pub const VEHICLE_CENTER_HEIGHT: f64 = 0.85;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paint_matches_mesh() {
        let m: Mesh<f64> = procedural_car();
        let t = procedural_car_paint::<f64>(2).unwrap();
        crate::scene::validate_texture(&t, &m).unwrap();
        // Roof faces are red and point up.
        for f in 140..148 {
            assert_eq!(m.face_normals()[f], Vec3::new(0.0, 0.0, 1.0));
            assert_eq!(t.bin(f, 0).r, 0.78);
        }
    }

    #[test]
    fn car_is_valid_and_outward_facing() {
        let m: Mesh<f64> = procedural_car();
        assert_eq!(m.face_count(), 6 * 9 * 2 + 6 * 4 * 2 + 4 * 6 * 2);
        // Top faces of the cabin point up; every normal is axis aligned and unit.
        for n in m.face_normals() {
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
        let top = m
            .face_normals()
            .iter()
            .zip(m.faces())
            .filter(|(_, f)| m.vertices()[f[0] as usize].z == 1.7)
            .count();
        assert_eq!(top, 8);
        for (n, f) in m.face_normals().iter().zip(m.faces()) {
            if m.vertices()[f[0] as usize].z == 1.7
                && m.vertices()[f[1] as usize].z == 1.7
                && m.vertices()[f[2] as usize].z == 1.7
            {
                assert_eq!(*n, Vec3::new(0.0, 0.0, 1.0));
            }
        }
    }
}
