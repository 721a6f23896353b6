//! Small fixed-size vector types and axis-aligned pixel boxes.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// 3D vector, serialized as `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> From<[T; 3]> for Vec3<T> {
    fn from(a: [T; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl<T: Scalar> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<T: Scalar> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_f64(x: f64, y: f64, z: f64) -> Self {
        Vec3::new(T::lit(x), T::lit(y), T::lit(z))
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction, or `None` for a zero or non-finite vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn is_unit(self, tol: T) -> bool {
        (self.norm() - T::one()).abs() <= tol
    }

    /// Rotation about the world +z axis.
    pub fn rotate_z(self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Vec3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    pub fn cast<U: Scalar>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Scalar> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Scalar> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Scalar> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, s: T) -> Self {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Linear RGB triple, serialized as `[r, g, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Rgb<T> {
    pub r: T,
    pub g: T,
    pub b: T,
}

impl<T: Scalar> From<[T; 3]> for Rgb<T> {
    fn from(a: [T; 3]) -> Self {
        Rgb::new(a[0], a[1], a[2])
    }
}

impl<T: Scalar> From<Rgb<T>> for [T; 3] {
    fn from(c: Rgb<T>) -> Self {
        [c.r, c.g, c.b]
    }
}

impl<T: Scalar> Rgb<T> {
    pub const fn new(r: T, g: T, b: T) -> Self {
        Rgb { r, g, b }
    }

    pub fn splat(v: T) -> Self {
        Rgb::new(v, v, v)
    }

    pub fn black() -> Self {
        Rgb::splat(T::zero())
    }

    pub fn from_f64(r: f64, g: f64, b: f64) -> Self {
        Rgb::new(T::lit(r), T::lit(g), T::lit(b))
    }

    pub fn channels(self) -> [T; 3] {
        [self.r, self.g, self.b]
    }

    pub fn channel(self, c: usize) -> T {
        self.channels()[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut T {
        match c {
            0 => &mut self.r,
            1 => &mut self.g,
            2 => &mut self.b,
            _ => panic!("rgb channel {c} out of range"),
        }
    }

    pub fn map(self, f: impl Fn(T) -> T) -> Self {
        Rgb::new(f(self.r), f(self.g), f(self.b))
    }

    /// Component-wise product.
    pub fn hadamard(self, o: Self) -> Self {
        Rgb::new(self.r * o.r, self.g * o.g, self.b * o.b)
    }

    pub fn clamp01(self) -> Self {
        self.map(Scalar::clamp01)
    }

    pub fn in_unit_range(self) -> bool {
        self.channels()
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
    }
}

impl<T: Scalar> Add for Rgb<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Rgb::new(self.r + o.r, self.g + o.g, self.b + o.b)
    }
}

impl<T: Scalar> Sub for Rgb<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Rgb::new(self.r - o.r, self.g - o.g, self.b - o.b)
    }
}

impl<T: Scalar> Mul<T> for Rgb<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Rgb::new(self.r * s, self.g * s, self.b * s)
    }
}

/// Axis-aligned box in continuous pixel coordinates, serialized as `[x0, y0, x1, y1]`.
///
/// Pixel `(col, row)` covers `[col, col+1) x [row, row+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct BBox<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Scalar> From<[T; 4]> for BBox<T> {
    fn from(a: [T; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl<T: Scalar> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl<T: Scalar> BBox<T> {
    pub const fn new(x0: T, y0: T, x1: T, y1: T) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn from_f64(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::new(T::lit(x0), T::lit(y0), T::lit(x1), T::lit(y1))
    }

    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    pub fn height(&self) -> T {
        self.y1 - self.y0
    }

    /// Area, zero for inverted boxes.
    pub fn area(&self) -> T {
        self.width().max(T::zero()) * self.height().max(T::zero())
    }

    /// Positive width and height with finite coordinates.
    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && self.width() > T::zero()
            && self.height() > T::zero()
    }

    pub fn intersection_area(&self, o: &Self) -> T {
        let w = self.x1.min(o.x1) - self.x0.max(o.x0);
        let h = self.y1.min(o.y1) - self.y0.max(o.y0);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Intersection over union without validity checks; zero when the union is empty.
    pub fn iou_unchecked(&self, o: &Self) -> T {
        let inter = self.intersection_area(o);
        let union = self.area() + o.area() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    pub fn expanded(&self, by: T) -> Self {
        BBox::new(self.x0 - by, self.y0 - by, self.x1 + by, self.y1 + by)
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox::new(
            U::lit(self.x0.to_f64_lossy()),
            U::lit(self.y0.to_f64_lossy()),
            U::lit(self.x1.to_f64_lossy()),
            U::lit(self.y1.to_f64_lossy()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_follows_right_hand_rule() {
        let x = Vec3::<f64>::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn rotate_z_quarter_turn() {
        let v = Vec3::<f64>::new(1.0, 0.0, 2.0).rotate_z(std::f64::consts::FRAC_PI_2);
        assert!((v.x).abs() < 1e-15 && (v.y - 1.0).abs() < 1e-15 && v.z == 2.0);
    }

    #[test]
    fn vectors_serialize_as_arrays() {
        let v = Vec3::<f64>::new(1.0, 2.0, 3.0);
        assert_eq!(serde_json::to_string(&v).unwrap(), "[1.0,2.0,3.0]");
        let b: BBox<f64> = serde_json::from_str("[10,10,50,40]").unwrap();
        assert_eq!(b, BBox::new(10.0, 10.0, 50.0, 40.0));
    }

    #[test]
    fn intersection_of_disjoint_boxes_is_zero() {
        let a = BBox::<f32>::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(a.intersection_area(&b), 0.0);
    }
}
