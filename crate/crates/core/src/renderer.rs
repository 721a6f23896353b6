//! Deterministic z-buffered triangle rasterizer with flat Lambertian shading
//! and exact gradients of the rendered image with respect to the texture.
//!
//! Geometry is fixed during differentiation, so every covered pixel is a
//! linear function of exactly one texture bin (before clamping). The backward
//! pass scatters `shade ⊙ dL/dpixel` into that bin.
//!
//! Coverage is decided per pixel center by intersecting the camera ray with
//! each triangle. A pixel is covered when some triangle contains its center at
//! view depth greater than [`NEAR_CLIP`]; the nearest such triangle wins, the
//! lower face index on equal depth.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Rgb, Vec3};
use crate::scalar::Scalar;
use crate::scene::{
    barycentric_bin, validate_texture, EnvironmentParams, Image, ImageGrad, Mask, Mesh,
    ParamError, Pose, Texture, TextureError, TextureGradient, TextureShape,
};

pub const NEAR_CLIP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image resolution must be nonzero, got {0}x{1}")]
    ZeroArea(usize, usize),
    #[error("invalid pose: {0}")]
    Pose(ParamError),
    #[error("invalid environment: {0}")]
    Environment(ParamError),
    #[error(transparent)]
    Texture(#[from] TextureError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub const fn new(width: usize, height: usize) -> Self {
        Resolution { width, height }
    }

    pub const fn square(n: usize) -> Self {
        Resolution::new(n, n)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Point projected into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected<T> {
    /// Continuous pixel coordinates; pixel `(c, r)` has its center at `(c + 0.5, r + 0.5)`.
    pub x: T,
    pub y: T,
    /// Distance along the viewing direction.
    pub depth: T,
}

/// The point lies on or behind the near clip plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("point is behind the camera")]
pub struct BehindCamera;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error(transparent)]
    BehindCamera(#[from] BehindCamera),
    #[error(transparent)]
    Invalid(#[from] RenderError),
}

/// Pinhole camera with a right-handed basis: `right = up × forward`.
#[derive(Debug, Clone, Copy)]
pub struct Camera<T> {
    position: Vec3<T>,
    right: Vec3<T>,
    up: Vec3<T>,
    forward: Vec3<T>,
    focal: T,
    cx: T,
    cy: T,
}

impl<T: Scalar> Camera<T> {
    pub fn new(pose: &Pose<T>, res: Resolution) -> Result<Self, RenderError> {
        if res.width == 0 || res.height == 0 {
            return Err(RenderError::ZeroArea(res.width, res.height));
        }
        pose.validate().map_err(RenderError::Pose)?;
        let forward = pose.camera_direction.normalized().ok_or(RenderError::Pose(ParamError::ParallelUp))?;
        let right = pose
            .camera_up
            .cross(forward)
            .normalized()
            .ok_or(RenderError::Pose(ParamError::ParallelUp))?;
        let up = forward.cross(right);
        let two = T::lit(2.0);
        let height = T::from_usize_lossy(res.height);
        Ok(Camera {
            position: pose.camera_position,
            right,
            up,
            forward,
            focal: (height / two) / (pose.fov / two).tan(),
            cx: T::from_usize_lossy(res.width) / two,
            cy: height / two,
        })
    }

    /// World point to camera coordinates `(right, up, depth)`.
    pub fn to_view(&self, p: Vec3<T>) -> Vec3<T> {
        let rel = p - self.position;
        Vec3::new(rel.dot(self.right), rel.dot(self.up), rel.dot(self.forward))
    }

    pub fn project_view(&self, v: Vec3<T>) -> Result<Projected<T>, BehindCamera> {
        if v.z <= T::lit(NEAR_CLIP) {
            return Err(BehindCamera);
        }
        Ok(Projected {
            x: self.cx + self.focal * v.x / v.z,
            y: self.cy - self.focal * v.y / v.z,
            depth: v.z,
        })
    }

    pub fn project(&self, p: Vec3<T>) -> Result<Projected<T>, BehindCamera> {
        self.project_view(self.to_view(p))
    }

    /// View-space ray direction (depth component 1) through pixel center `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vec3<T> {
        let half = T::lit(0.5);
        Vec3::new(
            (T::from_usize_lossy(x) + half - self.cx) / self.focal,
            -(T::from_usize_lossy(y) + half - self.cy) / self.focal,
            T::one(),
        )
    }

    /// World-space unit ray direction through pixel center `(x, y)`.
    pub fn world_ray(&self, x: usize, y: usize) -> Vec3<T> {
        let d = self.pixel_ray(x, y);
        (self.right * d.x + self.up * d.y + self.forward * d.z)
            .normalized()
            .expect("camera ray is nonzero")
    }

    pub fn position(&self) -> Vec3<T> {
        self.position
    }
}

/// Projects a world point for `pose` at `res`.
pub fn project<T: Scalar>(
    pose: &Pose<T>,
    point: Vec3<T>,
    res: Resolution,
) -> Result<Projected<T>, ProjectError> {
    Ok(Camera::new(pose, res)?.project(point)?)
}

/// Per-channel color multiplier for a surface with unit normal `normal`:
/// `ambient_intensity·ambient_color + directional_intensity·directional_color·max(0, n·l)`.
pub fn shade<T: Scalar>(normal: Vec3<T>, env: &EnvironmentParams<T>) -> Rgb<T> {
    let lambert = normal.dot(env.light_direction).max(T::zero());
    env.ambient_color * env.ambient_intensity
        + env.directional_color * (env.directional_intensity * lambert)
}

/// Rendered frame plus the per-pixel buffers needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    pub resolution: Resolution,
    /// Shaded color clamped to `[0, 1]`; black where uncovered.
    pub image: Image<T>,
    /// Shaded color before clamping.
    pub raw: Image<T>,
    pub mask: Mask,
    pub face_buffer: Vec<Option<u32>>,
    /// Barycentric weights of the covering face's corners; zero where uncovered.
    pub bary_buffer: Vec<[T; 3]>,
    /// View depth; `+inf` where uncovered.
    pub depth_buffer: Vec<T>,
    /// Texture bin selected at each covered pixel.
    pub bin_buffer: Vec<u32>,
    /// World-space face normals (after applying the model yaw), indexed by face.
    pub world_normals: Vec<Vec3<T>>,
    pub texture_shape: TextureShape,
}

impl<T: Scalar> RenderOutput<T> {
    /// Recolors the fixed geometry with another texture of the same shape.
    /// Produces exactly what [`render`] would for that texture.
    pub fn retexture(
        &self,
        texture: &Texture<T>,
        env: &EnvironmentParams<T>,
    ) -> Result<RenderOutput<T>, RenderError> {
        if texture.shape() != self.texture_shape {
            return Err(RenderError::ShapeMismatch(format!(
                "texture {:?} vs rendered {:?}",
                texture.shape(),
                self.texture_shape
            )));
        }
        let mut out = self.clone();
        let mults: Vec<Rgb<T>> = self.world_normals.iter().map(|n| shade(*n, env)).collect();
        for p in 0..self.resolution.pixels() {
            if let Some(f) = self.face_buffer[p] {
                let raw = mults[f as usize].hadamard(texture.bin(f as usize, self.bin_buffer[p] as usize));
                out.raw.pixels_mut()[p] = raw;
                out.image.pixels_mut()[p] = raw.clamp01();
            }
        }
        Ok(out)
    }
}

struct FaceSetup<T> {
    v0: Vec3<T>,
    e1: Vec3<T>,
    e2: Vec3<T>,
    rows: (usize, usize),
    cols: (usize, usize),
}

struct Hit<T> {
    depth: T,
    bary: [T; 3],
}

/// Ray from the camera center with direction `d` against triangle `(v0, v0+e1, v0+e2)`.
fn intersect<T: Scalar>(f: &FaceSetup<T>, d: Vec3<T>) -> Option<Hit<T>> {
    let pvec = d.cross(f.e2);
    let det = f.e1.dot(pvec);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let inv = T::one() / det;
    let tvec = -f.v0;
    let u = tvec.dot(pvec) * inv;
    if u < T::zero() || u > T::one() {
        return None;
    }
    let qvec = tvec.cross(f.e1);
    let v = d.dot(qvec) * inv;
    if v < T::zero() || u + v > T::one() {
        return None;
    }
    let depth = f.e2.dot(qvec) * inv;
    Some(Hit {
        depth,
        bary: [T::one() - u - v, u, v],
    })
}

fn pixel_span<T: Scalar>(lo: T, hi: T, n: usize) -> Option<(usize, usize)> {
    // Pixel centers c + 0.5 within [lo, hi].
    let half = T::lit(0.5);
    let first = (lo - half).ceil().max(T::zero());
    let last = (hi - half).floor().min(T::from_usize_lossy(n) - T::one());
    if !(first <= last) {
        return None;
    }
    Some((first.to_usize()?, last.to_usize()?))
}

fn setup_faces<T: Scalar>(
    mesh: &Mesh<T>,
    pose: &Pose<T>,
    cam: &Camera<T>,
    res: Resolution,
) -> Vec<Option<FaceSetup<T>>> {
    let near = T::lit(NEAR_CLIP);
    let view: Vec<Vec3<T>> = mesh
        .vertices()
        .iter()
        .map(|v| cam.to_view(pose.model_to_world(*v)))
        .collect();
    mesh.faces()
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| view[i as usize]);
            if a.z <= near && b.z <= near && c.z <= near {
                return None;
            }
            let full = ((0, res.height - 1), (0, res.width - 1));
            let (rows, cols) = if a.z > near && b.z > near && c.z > near {
                let p = [a, b, c].map(|v| cam.project_view(v).expect("in front of near plane"));
                let min_x = p[0].x.min(p[1].x).min(p[2].x);
                let max_x = p[0].x.max(p[1].x).max(p[2].x);
                let min_y = p[0].y.min(p[1].y).min(p[2].y);
                let max_y = p[0].y.max(p[1].y).max(p[2].y);
                (
                    pixel_span(min_y, max_y, res.height)?,
                    pixel_span(min_x, max_x, res.width)?,
                )
            } else {
                full
            };
            Some(FaceSetup {
                v0: a,
                e1: b - a,
                e2: c - a,
                rows,
                cols,
            })
        })
        .collect()
}

struct RowBuffers<T> {
    faces: Vec<Option<u32>>,
    bary: Vec<[T; 3]>,
    depth: Vec<T>,
}

fn rasterize_row<T: Scalar>(
    y: usize,
    setups: &[Option<FaceSetup<T>>],
    cam: &Camera<T>,
    width: usize,
) -> RowBuffers<T> {
    let near = T::lit(NEAR_CLIP);
    let mut row = RowBuffers {
        faces: vec![None; width],
        bary: vec![[T::zero(); 3]; width],
        depth: vec![T::infinity(); width],
    };
    for (fi, setup) in setups.iter().enumerate() {
        let Some(s) = setup else { continue };
        if y < s.rows.0 || y > s.rows.1 {
            continue;
        }
        for x in s.cols.0..=s.cols.1 {
            let Some(hit) = intersect(s, cam.pixel_ray(x, y)) else {
                continue;
            };
            // Faces are visited in index order, so strict `<` keeps the lower index on ties.
            if hit.depth > near && hit.depth < row.depth[x] {
                row.depth[x] = hit.depth;
                row.faces[x] = Some(fi as u32);
                row.bary[x] = hit.bary;
            }
        }
    }
    row
}

/// Renders `mesh` with `texture` under `pose` and `env`.
pub fn render<T: Scalar>(
    mesh: &Mesh<T>,
    texture: &Texture<T>,
    pose: &Pose<T>,
    env: &EnvironmentParams<T>,
    res: Resolution,
) -> Result<RenderOutput<T>, RenderError> {
    let cam = Camera::new(pose, res)?;
    env.validate().map_err(RenderError::Environment)?;
    validate_texture(texture, mesh)?;

    let setups = setup_faces(mesh, pose, &cam, res);
    let rows: Vec<RowBuffers<T>> = (0..res.height)
        .into_par_iter()
        .map(|y| rasterize_row(y, &setups, &cam, res.width))
        .collect();

    let n = res.pixels();
    let mut face_buffer = Vec::with_capacity(n);
    let mut bary_buffer = Vec::with_capacity(n);
    let mut depth_buffer = Vec::with_capacity(n);
    for row in rows {
        face_buffer.extend(row.faces);
        bary_buffer.extend(row.bary);
        depth_buffer.extend(row.depth);
    }

    let world_normals: Vec<Vec3<T>> = mesh
        .face_normals()
        .iter()
        .map(|n| n.rotate_z(pose.model_angle))
        .collect();
    let mults: Vec<Rgb<T>> = world_normals.iter().map(|n| shade(*n, env)).collect();

    let mut raw = Image::black(res.width, res.height);
    let mut image = Image::black(res.width, res.height);
    let mut bin_buffer = vec![0u32; n];
    let mut bits = vec![false; n];
    for p in 0..n {
        if let Some(f) = face_buffer[p] {
            let bin = barycentric_bin(texture.resolution(), bary_buffer[p]);
            bin_buffer[p] = bin as u32;
            bits[p] = true;
            let color = mults[f as usize].hadamard(texture.bin(f as usize, bin));
            raw.pixels_mut()[p] = color;
            image.pixels_mut()[p] = color.clamp01();
        }
    }

    Ok(RenderOutput {
        resolution: res,
        image,
        raw,
        mask: Mask::from_bits(res.width, res.height, bits),
        face_buffer,
        bary_buffer,
        depth_buffer,
        bin_buffer,
        world_normals,
        texture_shape: texture.shape(),
    })
}

/// Gradient of a scalar loss with respect to the texture, given the loss
/// gradient with respect to the clamped rendered image.
///
/// Channels whose pre-clamp value is not strictly inside `(0, 1)` pass no
/// gradient. Accumulation runs in row-major pixel order.
pub fn render_backward<T: Scalar>(
    output: &RenderOutput<T>,
    env: &EnvironmentParams<T>,
    shape: TextureShape,
    loss_grad: &ImageGrad<T>,
) -> Result<TextureGradient<T>, RenderError> {
    let res = output.resolution;
    if loss_grad.dims() != (res.width, res.height) {
        return Err(RenderError::ShapeMismatch(format!(
            "loss gradient is {}x{}, image is {}x{}",
            loss_grad.width(),
            loss_grad.height(),
            res.width,
            res.height
        )));
    }
    if shape != output.texture_shape {
        return Err(RenderError::ShapeMismatch(format!(
            "texture shape {:?} vs rendered {:?}",
            shape, output.texture_shape
        )));
    }
    let mults: Vec<Rgb<T>> = output.world_normals.iter().map(|n| shade(*n, env)).collect();
    let mut grad = TextureGradient::zeros(shape);
    for (p, face) in output.face_buffer.iter().enumerate() {
        let Some(f) = *face else { continue };
        let raw = output.raw.pixels()[p];
        let upstream = loss_grad.pixels()[p];
        let mult = mults[f as usize];
        let slot = grad.bin_mut(f as usize, output.bin_buffer[p] as usize);
        for c in 0..3 {
            let v = raw.channel(c);
            if v > T::zero() && v < T::one() {
                *slot.channel_mut(c) += mult.channel(c) * upstream.channel(c);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::vehicle::procedural_car;
    use std::f64::consts::FRAC_PI_2;

    fn front_pose() -> Pose<f64> {
        Pose::look_at(
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::zero(),
            Vec3::new(0.0, 1.0, 0.0),
            FRAC_PI_2,
        )
        .unwrap()
    }

    fn white_light_along(dir: Vec3<f64>) -> EnvironmentParams<f64> {
        EnvironmentParams {
            ambient_intensity: 0.0,
            directional_intensity: 1.0,
            ambient_color: Rgb::splat(1.0),
            directional_color: Rgb::splat(1.0),
            light_direction: dir,
        }
    }

    /// One triangle in the plane z = 0 much larger than the view frustum,
    /// facing the camera at z = -5.
    fn full_screen_triangle() -> Mesh<f64> {
        Mesh::new(
            vec![
                Vec3::new(-100.0, -100.0, 0.0),
                Vec3::new(0.0, 200.0, 0.0),
                Vec3::new(100.0, -100.0, 0.0),
            ],
            vec![],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn on_axis_point_projects_to_center() {
        let p = project(&front_pose(), Vec3::zero(), Resolution::square(256)).unwrap();
        assert_eq!((p.x, p.y, p.depth), (128.0, 128.0, 5.0));
    }

    #[test]
    fn point_behind_camera_is_signalled() {
        let r = project(&front_pose(), Vec3::new(0.0, 0.0, -6.0), Resolution::square(256));
        assert!(matches!(r, Err(ProjectError::BehindCamera(_))));
    }

    #[test]
    fn right_edge_projection() {
        // tan(fov/2) = 1, so x = 5 at depth 5 lands on the right border.
        let p = project(&front_pose(), Vec3::new(5.0, 0.0, 0.0), Resolution::square(256)).unwrap();
        assert!((p.x - 256.0).abs() < 1e-12 && (p.y - 128.0).abs() < 1e-12);
        let up = project(&front_pose(), Vec3::new(0.0, 5.0, 0.0), Resolution::square(256)).unwrap();
        assert!(up.y.abs() < 1e-12, "+y maps to the top row");
    }

    #[test]
    fn shade_cases() {
        let n = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(shade(n, &white_light_along(n)), Rgb::splat(1.0));
        assert_eq!(
            shade(n, &white_light_along(Vec3::new(1.0, 0.0, 0.0))),
            Rgb::splat(0.0)
        );
        let env = EnvironmentParams {
            ambient_intensity: 0.3,
            directional_intensity: 0.0,
            ambient_color: Rgb::splat(0.5),
            directional_color: Rgb::splat(1.0),
            light_direction: n,
        };
        let m = shade(n, &env);
        for c in m.channels() {
            assert!((c - 0.15).abs() < 1e-15);
        }
        // Light from behind contributes nothing.
        assert_eq!(shade(-n, &white_light_along(n)), Rgb::splat(0.0));
    }

    #[test]
    fn full_screen_triangle_constant_red() {
        let mesh = full_screen_triangle();
        let tex = Texture::uniform(1, 4, Rgb::new(1.0, 0.0, 0.0)).unwrap();
        let env = white_light_along(Vec3::new(0.0, 0.0, -1.0));
        let out = render(&mesh, &tex, &front_pose(), &env, Resolution::new(32, 24)).unwrap();
        assert_eq!(out.mask.count(), 32 * 24);
        assert!(out.image.pixels().iter().all(|c| *c == Rgb::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn mesh_behind_camera_renders_nothing() {
        let mut pose = front_pose();
        pose.camera_direction = Vec3::new(0.0, 0.0, -1.0);
        let mesh: Mesh<f64> = procedural_car();
        let tex = Texture::uniform(mesh.face_count(), 2, Rgb::splat(0.5)).unwrap();
        let env = white_light_along(Vec3::new(0.0, 0.0, 1.0));
        let out = render(&mesh, &tex, &pose, &env, Resolution::square(16)).unwrap();
        assert!(out.mask.is_empty());
        assert!(out.image.pixels().iter().all(|c| *c == Rgb::black()));
        assert!(out.face_buffer.iter().all(Option::is_none));
    }

    #[test]
    fn zero_area_resolution_is_an_error() {
        let mesh = full_screen_triangle();
        let tex = Texture::uniform(1, 1, Rgb::splat(0.5)).unwrap();
        let env = white_light_along(Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            render(&mesh, &tex, &front_pose(), &env, Resolution::new(0, 10)),
            Err(RenderError::ZeroArea(0, 10))
        ));
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let mesh = full_screen_triangle();
        let tex = Texture::uniform(1, 2, Rgb::splat(0.5)).unwrap();
        let env = white_light_along(Vec3::new(0.0, 0.0, -1.0));
        let out = render(&mesh, &tex, &front_pose(), &env, Resolution::new(8, 8)).unwrap();
        let g = Image::black(4, 8);
        assert!(matches!(
            render_backward(&out, &env, tex.shape(), &g),
            Err(RenderError::ShapeMismatch(_))
        ));
        let zero = Image::black(8, 8);
        let grad = render_backward(&out, &env, tex.shape(), &zero).unwrap();
        assert!(grad.is_zero());
    }

    #[test]
    fn retexture_matches_full_render() {
        let mesh: Mesh<f64> = procedural_car();
        let pose = Pose::look_at(
            Vec3::new(6.0, -5.0, 3.0),
            Vec3::new(0.0, 0.0, 0.8),
            Vec3::new(0.0, 0.0, 1.0),
            0.9,
        )
        .unwrap();
        let env = EnvironmentParams {
            ambient_intensity: 0.5,
            directional_intensity: 0.8,
            ambient_color: Rgb::splat(1.0),
            directional_color: Rgb::new(1.0, 0.9, 0.7),
            light_direction: Vec3::new(0.3, -0.4, 0.866).normalized().unwrap(),
        };
        let a = Texture::random(mesh.face_count(), 3, 1).unwrap();
        let b = Texture::random(mesh.face_count(), 3, 2).unwrap();
        let ra = render(&mesh, &a, &pose, &env, Resolution::new(40, 30)).unwrap();
        let rb = render(&mesh, &b, &pose, &env, Resolution::new(40, 30)).unwrap();
        assert!(ra.mask.count() > 100);
        assert_eq!(ra.retexture(&b, &env).unwrap(), rb);
    }
}
