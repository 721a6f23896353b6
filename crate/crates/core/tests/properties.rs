use dci_core::attack::{attack_texture, AttackConfig, MatchedScoreLoss};
use dci_core::case_graph::{sample_trajectory, shortest_path, CaseGraph, Trajectory};
use dci_core::compositor::{build_from_background, Background};
use dci_core::dataset::{build_discrete_manifest, even_azimuths, grid_locations, DiscreteSpace};
use dci_core::detector::{nms, Detection, DifferentiableDetector, ToyDetectorModel, CAR_CLASS};
use dci_core::evaluator::{compute_ap, GroundTruth, ScoredDetection};
use dci_core::renderer::{render, render_backward, Resolution};
use dci_core::scene::{procedural_car, EnvironmentParams, Image, Mesh, Pose, SceneTags, Texture};
use dci_core::{BBox, Rgb, Vec3};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox<f64>> {
    (0.0..40.0f64, 0.0..40.0f64, 2.0..20.0f64, 2.0..20.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

/// Up to three images with up to three visible boxes each, and detections
/// that mostly jitter a ground-truth box.
fn instance() -> impl Strategy<Value = (Vec<ScoredDetection<f64>>, Vec<GroundTruth<f64>>)> {
    let gts = prop::collection::vec((0usize..3, bbox()), 0..6);
    gts.prop_flat_map(|gts| {
        let n = gts.len();
        let det = (0usize..3, any::<bool>(), 0usize..6, bbox(), -2.0..2.0f64, 0.0..1.0f64);
        (Just(gts), prop::collection::vec(det, 0..10), Just(n))
    })
    .prop_map(|(gts, dets, n)| {
        let mut ground = Vec::new();
        for img in 0..3 {
            ground.push(GroundTruth {
                image_id: format!("i{img}"),
                bbox: None,
                visible: false,
            });
        }
        for (img, b) in &gts {
            ground.push(GroundTruth {
                image_id: format!("i{img}"),
                bbox: Some(*b),
                visible: true,
            });
        }
        let dets = dets
            .into_iter()
            .map(|(img, near, k, b, jitter, score)| {
                let (image, bbox) = if near && n > 0 {
                    let (gi, g) = gts[k % n];
                    (gi, BBox::new(g.x0 + jitter, g.y0 + jitter, g.x1 + jitter, g.y1 + jitter))
                } else {
                    (img, b)
                };
                ScoredDetection {
                    image_id: format!("i{image}"),
                    detection: Detection {
                        bbox,
                        score,
                        class_id: CAR_CLASS,
                    },
                }
            })
            .collect();
        (dets, ground)
    })
}

proptest! {
    #[test]
    fn ap_depends_only_on_score_order((dets, gts) in instance(), k in -4i32..4) {
        let base = compute_ap(&dets, &gts, 0.5).unwrap();
        // Scaling by a power of two is exact and preserves order.
        let scaled: Vec<_> = dets
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.detection.score *= 2f64.powi(k);
                d
            })
            .collect();
        prop_assert_eq!(compute_ap(&scaled, &gts, 0.5).unwrap().ap, base.ap);
    }

    #[test]
    fn appending_lowest_false_positive_never_raises_ap((dets, gts) in instance()) {
        let base = compute_ap(&dets, &gts, 0.5).unwrap();
        let mut more = dets.clone();
        more.push(ScoredDetection {
            image_id: "i0".into(),
            detection: Detection {
                bbox: BBox::new(500.0, 500.0, 510.0, 510.0),
                score: -1.0,
                class_id: CAR_CLASS,
            },
        });
        prop_assert!(compute_ap(&more, &gts, 0.5).unwrap().ap <= base.ap);
    }

    #[test]
    fn pr_curve_is_well_formed((dets, gts) in instance()) {
        let r = compute_ap(&dets, &gts, 0.5).unwrap();
        prop_assert!((0.0..=100.0).contains(&r.ap));
        prop_assert_eq!(r.pr.len(), dets.len());
        for w in r.pr.windows(2) {
            prop_assert!(w[1].recall >= w[0].recall);
        }
        for p in &r.pr {
            prop_assert!((0.0..=1.0).contains(&p.precision));
            prop_assert!((0.0..=1.0).contains(&p.recall));
        }
    }

    #[test]
    fn greedy_matching_uses_each_box_once((dets, gts) in instance()) {
        let r = compute_ap(&dets, &gts, 0.5).unwrap();
        let tp = r.matches.iter().filter(|m| **m).count();
        prop_assert!(tp <= r.gt_count);
        for img in ["i0", "i1", "i2"] {
            let have = gts.iter().filter(|g| g.image_id == img && g.visible).count();
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].detection.score.partial_cmp(&dets[a].detection.score).unwrap());
            let hits = order
                .iter()
                .zip(&r.matches)
                .filter(|(&i, m)| **m && dets[i].image_id == img)
                .count();
            prop_assert!(hits <= have);
        }
    }

    #[test]
    fn nms_is_idempotent(boxes in prop::collection::vec((bbox(), 0.0..1.0f64), 0..12), thr in 0.1..0.9f64) {
        let dets: Vec<Detection<f64>> = boxes
            .into_iter()
            .map(|(bbox, score)| Detection { bbox, score, class_id: CAR_CLASS })
            .collect();
        let once = nms(dets, thr);
        let twice = nms(once.clone(), thr);
        prop_assert_eq!(&once, &twice);
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!(a.bbox.iou_unchecked(&b.bbox) <= thr);
            }
        }
    }

    #[test]
    fn discrete_cardinality_is_the_product(a in 1usize..5, d in 1usize..4, l in 1usize..4, p in 1usize..3, w in 1usize..4) {
        let space = DiscreteSpace::<f64>::new(
            even_azimuths(a),
            (0..d).map(|k| 5.0 + k as f64).collect(),
            grid_locations(l, 30.0),
            (0..p).map(|k| 0.1 + 0.1 * k as f64).collect(),
            ["ClearNoon", "ClearNight", "WetCloudySunset"][..w].iter().map(|s| s.to_string()).collect(),
            0.9,
        )
        .unwrap();
        let n = a * d * l * p * w;
        prop_assert_eq!(space.cardinality(), n as u128);
        let m = build_discrete_manifest(&space, None, 0).unwrap();
        prop_assert_eq!(m.len(), n);
        let ids: std::collections::BTreeSet<_> = m.entries.iter().map(|e| &e.entry_id).collect();
        prop_assert_eq!(ids.len(), n);
    }

    #[test]
    fn capped_manifest_is_seeded(seed in any::<u64>(), cap in 1usize..30) {
        let space = DiscreteSpace::<f64>::new(
            even_azimuths(4), vec![6.0, 8.0], grid_locations(4, 30.0), vec![0.2], vec!["ClearNoon".into()], 0.9,
        )
        .unwrap();
        let a = build_discrete_manifest(&space, Some(cap), seed).unwrap();
        let b = build_discrete_manifest(&space, Some(cap), seed).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert_eq!(a.len(), cap);
        let full = build_discrete_manifest(&space, None, seed).unwrap();
        for e in &a.entries {
            prop_assert!(full.entries.contains(e));
        }
    }

    #[test]
    fn samples_lie_on_the_polyline(xs in prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64), 2..6), step in 0.5..7.0f64) {
        let nodes: Vec<(u64, Vec3<f64>)> = xs.iter().enumerate().map(|(i, &(x, y))| (i as u64, Vec3::new(x, y, 0.0))).collect();
        let edges: Vec<(u64, u64, Option<f64>)> = (1..nodes.len() as u64).map(|i| (i - 1, i, None)).collect();
        prop_assume!(nodes.windows(2).all(|w| (w[0].1 - w[1].1).norm() > 1e-6));
        let g = CaseGraph::new(nodes.clone(), edges).unwrap();
        let traj: Trajectory<f64> = shortest_path(&g, 0, nodes.len() as u64 - 1).unwrap();
        let samples = sample_trajectory(&traj, step, [1.0, 0.0]).unwrap();
        prop_assert!((samples.last().unwrap().arc_length - traj.cost).abs() < 1e-9);
        for (k, s) in samples.iter().enumerate() {
            if k + 1 < samples.len() {
                prop_assert!((s.arc_length - k as f64 * step).abs() < 1e-9);
            }
            let on = traj.points.windows(2).any(|w| {
                let (a, b) = (w[0], w[1]);
                let d = b - a;
                let t = ((s.position - a).dot(d) / d.dot(d)).clamp(0.0, 1.0);
                (a + d * t - s.position).norm() < 1e-9
            });
            prop_assert!(on);
            prop_assert!((s.heading[0].hypot(s.heading[1]) - 1.0).abs() < 1e-12);
        }
    }
}

fn car_pose(azimuth: f64, distance: f64) -> Pose<f64> {
    let eye = Vec3::new(distance * azimuth.cos(), distance * azimuth.sin(), 2.0);
    Pose::look_at(eye, Vec3::new(0.0, 0.0, 0.85), Vec3::new(0.0, 0.0, 1.0), 0.9).unwrap()
}

fn env(ambient: f64, directional: f64) -> EnvironmentParams<f64> {
    EnvironmentParams {
        ambient_intensity: ambient,
        directional_intensity: directional,
        ambient_color: Rgb::splat(1.0),
        directional_color: Rgb::new(1.0, 0.9, 0.8),
        light_direction: Vec3::new(0.3, 0.2, 0.93).normalized().unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rendering_is_linear_below_the_clamp(az in 0.0..6.28f64, dist in 6.0..12.0f64, s1 in any::<u64>(), s2 in any::<u64>()) {
        let mesh: Mesh<f64> = procedural_car();
        let e = env(0.3, 0.3);
        let pose = car_pose(az, dist);
        let res = Resolution::square(24);
        let half = |seed| {
            let mut t = Texture::random(mesh.face_count(), 2, seed).unwrap();
            t.data_mut().iter_mut().for_each(|c| *c = *c * 0.5);
            t
        };
        let (t1, t2) = (half(s1), half(s2));
        let mut sum = t1.clone();
        sum.data_mut().iter_mut().zip(t2.data()).for_each(|(a, b)| *a = *a + *b);
        let r1 = render(&mesh, &t1, &pose, &e, res).unwrap();
        let r2 = render(&mesh, &t2, &pose, &e, res).unwrap();
        let rs = render(&mesh, &sum, &pose, &e, res).unwrap();
        prop_assert_eq!(&render(&mesh, &t1, &pose, &e, res).unwrap(), &r1);
        for ((a, b), s) in r1.image.pixels().iter().zip(r2.image.pixels()).zip(rs.image.pixels()) {
            for c in 0..3 {
                prop_assert!((a.channel(c) + b.channel(c) - s.channel(c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn texture_gradient_only_reaches_visible_faces(az in 0.0..6.28f64, dist in 6.0..12.0f64, seed in any::<u64>()) {
        let mesh: Mesh<f64> = procedural_car();
        let e = env(0.3, 0.3);
        let tex = Texture::random(mesh.face_count(), 2, seed).unwrap();
        let out = render(&mesh, &tex, &car_pose(az, dist), &e, Resolution::square(24)).unwrap();
        let ones = Image::new(24, 24, Rgb::splat(1.0));
        let grad = render_backward(&out, &e, tex.shape(), &ones).unwrap();
        let mut seen = vec![false; tex.data().len()];
        for (f, b) in out.face_buffer.iter().zip(&out.bin_buffer) {
            if let Some(f) = f {
                seen[*f as usize * tex.bins_per_face() + *b as usize] = true;
            }
        }
        for (g, s) in grad.data().iter().zip(seen) {
            if !s {
                prop_assert_eq!(*g, Rgb::black());
            }
        }
    }

    #[test]
    fn attack_respects_clamp(step in 0.01..50.0f64, lo in 0.0..0.4f64, width in 0.1..0.6f64, epochs in 1usize..6) {
        let (scene, tex) = pixel_scene();
        let config = AttackConfig { step, epochs, clamp: [lo, lo + width], ..Default::default() };
        let out = attack_texture(&tex, &[scene], &pixel_detector(), &MatchedScoreLoss, &config).unwrap();
        for c in out.texture.data() {
            for v in c.channels() {
                prop_assert!(v >= lo && v <= lo + width);
            }
        }
    }

    #[test]
    fn detector_gradient_is_local(pixels in prop::collection::vec(0.0..1.0f64, 16 * 16 * 3), x in 0usize..8, y in 0usize..8) {
        let image = Image::from_fn(16, 16, |px, py| {
            let i = 3 * (py * 16 + px);
            Rgb::new(pixels[i], pixels[i + 1], pixels[i + 2])
        });
        let det = small_detector();
        let target = BBox::new(x as f64, y as f64, x as f64 + 8.0, y as f64 + 8.0);
        let g = det.detect_grad(&image, &target);
        prop_assert!(g.matched);
        let a = g.anchor.unwrap();
        for py in 0..16 {
            for px in 0..16 {
                let inside = (px as f64) >= a.x0 && (px as f64) < a.x1 && (py as f64) >= a.y0 && (py as f64) < a.y1;
                if !inside {
                    prop_assert_eq!(g.grad.get(px, py), Rgb::black());
                }
            }
        }
    }
}

fn small_detector() -> ToyDetectorModel<f64> {
    let dim = 2 * 2 * 3 * 2;
    ToyDetectorModel {
        stride: 2,
        sizes: vec![[8, 8]],
        grid: 2,
        squares: true,
        weights: vec![(0..dim).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect()],
        biases: vec![0.1],
        score_threshold: 0.5,
        nms_iou: 0.5,
        seed: 0,
        training: None,
    }
}

/// A 1×1 frame fully covered by one triangle facing the camera.
fn pixel_scene() -> (dci_core::BuiltScene64, Texture<f64>) {
    let mesh = Mesh::new(
        vec![Vec3::new(-50.0, -50.0, 0.0), Vec3::new(50.0, -50.0, 0.0), Vec3::new(0.0, 50.0, 0.0)],
        vec![],
        vec![[0, 1, 2]],
    )
    .unwrap();
    let pose = Pose {
        model_angle: 0.0,
        model_position: Vec3::zero(),
        camera_position: Vec3::new(0.0, 0.0, 5.0),
        camera_direction: Vec3::new(0.0, 0.0, -1.0),
        camera_up: Vec3::new(0.0, 1.0, 0.0),
        fov: 0.5,
    };
    let tex = Texture::uniform(1, 1, Rgb::splat(0.5)).unwrap();
    let bg = Background {
        image: Image::black(1, 1),
        pose,
        env: env(0.5, 0.3),
    };
    (build_from_background(&mesh, &tex, bg, SceneTags::default()).unwrap(), tex)
}

fn pixel_detector() -> ToyDetectorModel<f64> {
    ToyDetectorModel {
        stride: 1,
        sizes: vec![[1, 1]],
        grid: 1,
        squares: false,
        weights: vec![vec![2.0, -1.0, 1.5]],
        biases: vec![0.2],
        score_threshold: 0.5,
        nms_iou: 0.5,
        seed: 0,
        training: None,
    }
}
