//! The single-precision build agrees with the double-precision one.

use dci_core::detector::{DifferentiableDetector, ToyDetectorModel};
use dci_core::renderer::{render, Resolution};
use dci_core::scene::{procedural_car, procedural_car_paint, EnvironmentParams, Image, Mesh, Pose};
use dci_core::{BBox, Rgb, Vec3};

#[test]
fn f32_render_tracks_f64() {
    let pose = Pose::look_at(
        Vec3::new(7.0, 3.0, 2.5),
        Vec3::new(0.0, 0.0, 0.85),
        Vec3::new(0.0, 0.0, 1.0),
        0.9,
    )
    .unwrap();
    let env = EnvironmentParams {
        ambient_intensity: 0.4,
        directional_intensity: 0.5,
        ambient_color: Rgb::splat(1.0),
        directional_color: Rgb::new(1.0, 0.95, 0.9),
        light_direction: Vec3::new(0.3, 0.2, 0.93).normalized().unwrap(),
    };
    let res = Resolution::square(48);
    let m64: Mesh<f64> = procedural_car();
    let m32: Mesh<f32> = procedural_car();
    let a = render(&m64, &procedural_car_paint(4).unwrap(), &pose, &env, res).unwrap();
    let b = render(&m32, &procedural_car_paint(4).unwrap(), &pose.cast(), &env.cast(), res).unwrap();
    // Coverage can only differ on pixels whose center grazes an edge.
    let differ = a.mask.bits().iter().zip(b.mask.bits()).filter(|(x, y)| x != y).count();
    assert!(differ <= 3, "{differ} coverage differences");
    for (i, (p, q)) in a.image.pixels().iter().zip(b.image.pixels()).enumerate() {
        if a.mask.bits()[i] == b.mask.bits()[i] && a.face_buffer[i] == b.face_buffer[i] {
            for c in 0..3 {
                assert!((p.channel(c) - q.channel(c) as f64).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn f32_detector_gradient_tracks_f64() {
    let weights: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.4).collect();
    let m64 = ToyDetectorModel {
        stride: 2,
        sizes: vec![[8, 8]],
        grid: 2,
        squares: false,
        weights: vec![weights.clone()],
        biases: vec![0.3],
        score_threshold: 0.5,
        nms_iou: 0.5,
        seed: 0,
        training: None,
    };
    let m32 = ToyDetectorModel {
        stride: 2,
        sizes: vec![[8, 8]],
        grid: 2,
        squares: false,
        weights: vec![weights.iter().map(|w| *w as f32).collect()],
        biases: vec![0.3f32],
        score_threshold: 0.5,
        nms_iou: 0.5,
        seed: 0,
        training: None,
    };
    let f = |x: usize, y: usize| (((x * 31 + y * 17) % 23) as f64) / 23.0;
    let i64 = Image::from_fn(16, 16, |x, y| Rgb::new(f(x, y), f(y, x), f(x + 3, y)));
    let i32 = Image::from_fn(16, 16, |x, y| Rgb::new(f(x, y) as f32, f(y, x) as f32, f(x + 3, y) as f32));
    let g64 = m64.detect_grad(&i64, &BBox::new(4.0, 4.0, 12.0, 12.0));
    let g32 = m32.detect_grad(&i32, &BBox::new(4.0, 4.0, 12.0, 12.0));
    assert!((g64.score - g32.score as f64).abs() < 1e-6);
    for (p, q) in g64.grad.pixels().iter().zip(g32.grad.pixels()) {
        for c in 0..3 {
            assert!((p.channel(c) - q.channel(c) as f64).abs() < 1e-6);
        }
    }
}
