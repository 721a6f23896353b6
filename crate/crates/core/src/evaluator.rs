//! Detection scoring and report emission.
//!
//! AP is the all-point interpolated area under the precision-recall curve of
//! a single class at a fixed IoU threshold, in percent. Ground truths flagged
//! invisible are neither counted nor matchable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::geometry::BBox;
use crate::scalar::Scalar;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("box {0:?} has zero area")]
    ZeroArea([f64; 4]),
    #[error("detection references unknown image `{0}`")]
    UnknownImage(String),
    #[error("visible ground truth for image `{0}` has no box")]
    MissingBox(String),
    #[error("detector sets differ: baseline has {baseline:?}, `{texture}` has {attacked:?}")]
    DetectorMismatch {
        texture: String,
        baseline: Vec<String>,
        attacked: Vec<String>,
    },
    #[error("baseline report must hold exactly one texture, found {0:?}")]
    BaselineShape(Vec<String>),
    #[error("unknown report format `{0}` (expected csv, markdown or svg)")]
    UnknownFormat(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Intersection over union of two boxes with positive area.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<T, EvalError> {
    for bx in [a, b] {
        if !bx.is_valid() {
            let c = bx.cast::<f64>();
            return Err(EvalError::ZeroArea([c.x0, c.y0, c.x1, c.y1]));
        }
    }
    Ok(a.iou_unchecked(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ScoredDetection<T> {
    pub image_id: String,
    pub detection: Detection<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct GroundTruth<T> {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: Option<BBox<T>>,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct PrPoint<T> {
    pub recall: T,
    pub precision: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult<T> {
    /// Percent.
    pub ap: T,
    /// One point per ranked detection.
    pub pr: Vec<PrPoint<T>>,
    /// Visible ground truths.
    pub gt_count: usize,
    /// Per ranked detection, whether it matched.
    pub matches: Vec<bool>,
}

/// Ranks detections by score (ties keep input order), matches each greedily to
/// the unmatched visible ground truth of the same image with the highest IoU,
/// and integrates the monotone precision envelope over recall.
///
/// Recall only moves at true positives, by `1/G` each, so the area is
/// `Σ_tp envelope(tp) / G`. With no visible ground truth, AP is 0.
pub fn compute_ap<T: Scalar>(
    detections: &[ScoredDetection<T>],
    ground_truth: &[GroundTruth<T>],
    iou_threshold: T,
) -> Result<ApResult<T>, EvalError> {
    let mut by_image: BTreeMap<&str, Vec<BBox<T>>> = BTreeMap::new();
    for g in ground_truth {
        let slot = by_image.entry(g.image_id.as_str()).or_default();
        if g.visible {
            slot.push(g.bbox.ok_or_else(|| EvalError::MissingBox(g.image_id.clone()))?);
        }
    }
    let gt_count: usize = by_image.values().map(Vec::len).sum();
    for d in detections {
        if !by_image.contains_key(d.image_id.as_str()) {
            return Err(EvalError::UnknownImage(d.image_id.clone()));
        }
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .detection
            .score
            .partial_cmp(&detections[a].detection.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut taken: BTreeMap<&str, Vec<bool>> = by_image
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let mut matches = Vec::with_capacity(order.len());
    for &i in &order {
        let d = &detections[i];
        let boxes = &by_image[d.image_id.as_str()];
        let used = taken.get_mut(d.image_id.as_str()).expect("known image");
        let mut best: Option<(usize, T)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if used[j] || !d.detection.bbox.is_valid() {
                continue;
            }
            let v = d.detection.bbox.iou_unchecked(g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        matches.push(best.is_some());
    }

    let g = T::from_usize_lossy(gt_count);
    let mut tp = 0usize;
    let mut pr = Vec::with_capacity(matches.len());
    for (k, &m) in matches.iter().enumerate() {
        tp += usize::from(m);
        pr.push(PrPoint {
            recall: if gt_count == 0 { T::zero() } else { T::from_usize_lossy(tp) / g },
            precision: T::from_usize_lossy(tp) / T::from_usize_lossy(k + 1),
        });
    }
    let mut envelope = vec![T::zero(); pr.len()];
    let mut running = T::zero();
    for k in (0..pr.len()).rev() {
        running = running.max(pr[k].precision);
        envelope[k] = running;
    }
    let ap = if gt_count == 0 {
        T::zero()
    } else {
        let mut area = T::zero();
        for (k, &m) in matches.iter().enumerate() {
            if m {
                area += envelope[k];
            }
        }
        T::lit(100.0) * area / g
    };
    Ok(ApResult {
        ap,
        pr,
        gt_count,
        matches,
    })
}

/// Detections and ground truth for one evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct FrameResult<T> {
    pub image_id: String,
    pub scene_id: String,
    pub detections: Vec<Detection<T>>,
    pub ground_truth: Option<BBox<T>>,
}

fn split<T: Scalar>(frames: &[&FrameResult<T>]) -> (Vec<ScoredDetection<T>>, Vec<GroundTruth<T>>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for f in frames {
        gts.push(GroundTruth {
            image_id: f.image_id.clone(),
            bbox: f.ground_truth,
            visible: f.ground_truth.is_some(),
        });
        dets.extend(f.detections.iter().map(|d| ScoredDetection {
            image_id: f.image_id.clone(),
            detection: *d,
        }));
    }
    (dets, gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAp {
    pub scene_id: String,
    pub ap: f64,
    pub gt_count: usize,
}

/// One (texture, detector) cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub texture: String,
    pub detector: String,
    pub ap: f64,
    pub gt_count: usize,
    pub pr: Vec<PrPoint<f64>>,
    pub per_scene: Vec<SceneAp>,
}

impl EvalRow {
    /// Scores `frames` as a whole and per scene id.
    pub fn from_frames<T: Scalar>(
        texture: &str,
        detector: &str,
        frames: &[FrameResult<T>],
        iou_threshold: T,
    ) -> Result<Self, EvalError> {
        let all: Vec<&FrameResult<T>> = frames.iter().collect();
        let (dets, gts) = split(&all);
        let overall = compute_ap(&dets, &gts, iou_threshold)?;
        let scenes: BTreeSet<&str> = frames.iter().map(|f| f.scene_id.as_str()).collect();
        let mut per_scene = Vec::new();
        for scene in scenes {
            let subset: Vec<&FrameResult<T>> = frames.iter().filter(|f| f.scene_id == scene).collect();
            let (d, g) = split(&subset);
            let r = compute_ap(&d, &g, iou_threshold)?;
            per_scene.push(SceneAp {
                scene_id: scene.to_string(),
                ap: r.ap.to_f64_lossy(),
                gt_count: r.gt_count,
            });
        }
        Ok(EvalRow {
            texture: texture.to_string(),
            detector: detector.to_string(),
            ap: overall.ap.to_f64_lossy(),
            gt_count: overall.gt_count,
            pr: overall
                .pr
                .iter()
                .map(|p| PrPoint {
                    recall: p.recall.to_f64_lossy(),
                    precision: p.precision.to_f64_lossy(),
                })
                .collect(),
            per_scene,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn unique_in_order<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .filter(|s| seen.insert(*s))
        .map(str::to_string)
        .collect()
}

impl EvalReport {
    pub fn textures(&self) -> Vec<String> {
        unique_in_order(self.rows.iter().map(|r| r.texture.as_str()))
    }

    pub fn detectors(&self) -> Vec<String> {
        unique_in_order(self.rows.iter().map(|r| r.detector.as_str()))
    }

    pub fn row(&self, texture: &str, detector: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.texture == texture && r.detector == detector)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        write_file(path.as_ref(), &text)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclineRow {
    pub texture: String,
    /// Percentage points, one per detector.
    pub declines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDecline {
    pub texture: String,
    pub detector: String,
    pub scene_id: String,
    pub decline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclineTable {
    pub baseline: String,
    pub detectors: Vec<String>,
    pub rows: Vec<DeclineRow>,
    /// Mean decline per detector over the attacked textures.
    pub means: Vec<f64>,
    pub per_scene: Vec<SceneDecline>,
}

/// `baseline AP − attacked AP` per (texture, detector). The baseline report
/// holds one texture; every attacked texture must cover the same detectors.
pub fn ap_decline(baseline: &EvalReport, attacked: &EvalReport) -> Result<DeclineTable, EvalError> {
    let base_textures = baseline.textures();
    if base_textures.len() != 1 {
        return Err(EvalError::BaselineShape(base_textures));
    }
    let base_name = &base_textures[0];
    let detectors = baseline.detectors();
    let sorted = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
    let mut rows = Vec::new();
    let mut per_scene = Vec::new();
    for texture in attacked.textures() {
        let have: Vec<String> = attacked
            .rows
            .iter()
            .filter(|r| r.texture == texture)
            .map(|r| r.detector.clone())
            .collect();
        if sorted(&have) != sorted(&detectors) {
            return Err(EvalError::DetectorMismatch {
                texture,
                baseline: detectors,
                attacked: have,
            });
        }
        let mut declines = Vec::new();
        for det in &detectors {
            let b = baseline.row(base_name, det).expect("baseline detector");
            let a = attacked.row(&texture, det).expect("checked above");
            declines.push(b.ap - a.ap);
            for sa in &a.per_scene {
                if let Some(sb) = b.per_scene.iter().find(|s| s.scene_id == sa.scene_id) {
                    per_scene.push(SceneDecline {
                        texture: texture.clone(),
                        detector: det.clone(),
                        scene_id: sa.scene_id.clone(),
                        decline: sb.ap - sa.ap,
                    });
                }
            }
        }
        rows.push(DeclineRow { texture, declines });
    }
    let means = (0..detectors.len())
        .map(|k| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| r.declines[k]).sum::<f64>() / rows.len() as f64
            }
        })
        .collect();
    Ok(DeclineTable {
        baseline: base_name.clone(),
        detectors,
        rows,
        means,
        per_scene,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "svg" | "svg-pr-curve" => Ok(ReportFormat::Svg),
            _ => Err(EvalError::UnknownFormat(s.to_string())),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn header(detectors: &[String]) -> Vec<String> {
    std::iter::once("Texture Type".to_string())
        .chain(detectors.iter().map(|d| format!("AP@{d}")))
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn table(header: Vec<String>, rows: Vec<Vec<String>>, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            for line in std::iter::once(&header).chain(&rows) {
                let fields: Vec<String> = line.iter().map(|f| csv_field(f)).collect();
                out.push_str(&fields.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown | ReportFormat::Svg => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", " --- |".repeat(header.len()));
            for r in rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        }
    }
    out
}

/// Texture Type × AP@detector table.
pub fn report_table(report: &EvalReport, format: ReportFormat) -> String {
    let detectors = report.detectors();
    let rows = report
        .textures()
        .into_iter()
        .map(|t| {
            let mut line = vec![t.clone()];
            for d in &detectors {
                line.push(report.row(&t, d).map(|r| format!("{:.2}", r.ap)).unwrap_or_default());
            }
            line
        })
        .collect();
    table(header(&detectors), rows, format)
}

/// Decline rows with the same column layout, followed by a `Mean` row.
pub fn decline_table(t: &DeclineTable, format: ReportFormat) -> String {
    let mut rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            std::iter::once(r.texture.clone())
                .chain(r.declines.iter().map(|d| format!("{d:.2}")))
                .collect()
        })
        .collect();
    if !t.rows.is_empty() {
        rows.push(
            std::iter::once("Mean".to_string())
                .chain(t.means.iter().map(|d| format!("{d:.2}")))
                .collect(),
        );
    }
    table(header(&t.detectors), rows, format)
}

/// `texture,detector,rank,recall,precision` for every PR point.
pub fn pr_csv(report: &EvalReport) -> String {
    let mut out = String::from("texture,detector,rank,recall,precision\n");
    for r in &report.rows {
        for (k, p) in r.pr.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                csv_field(&r.texture),
                csv_field(&r.detector),
                k + 1,
                p.recall,
                p.precision
            );
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Precision-recall curves of every row overlaid in one chart. Each curve is a
/// polyline with one vertex per PR point on axes spanning recall and
/// precision from 0 to 1, labeled by texture (and detector when there are
/// several).
pub fn pr_svg(report: &EvalReport, title: &str) -> String {
    let (w, h) = (640.0, 480.0);
    let (left, right, top, bottom) = (60.0, 180.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |r: f64| left + r * pw;
    let py = |p: f64| top + (1.0 - p) * ph;
    let multi_detector = report.detectors().len() > 1;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black" fill="none"><line x1="{}" y1="{}" x2="{}" y2="{}"/><line x1="{}" y1="{}" x2="{}" y2="{}"/></g>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0),
        px(0.0),
        py(0.0),
        px(0.0),
        py(1.0)
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.1}</text>"#,
            px(v),
            py(0.0) + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.1}</text>"#,
            px(0.0) - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">Recall</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">Precision</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, row) in report.rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = if multi_detector {
            format!("{} @ {}", row.texture, row.detector)
        } else {
            row.texture.clone()
        };
        let points: Vec<String> = row
            .pr
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.recall), py(p.precision)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="pr-curve" data-label="{}" data-points="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            xml_escape(&label),
            points.len(),
            points.join(" ")
        );
        let ly = top + 14.0 + 20.0 * i as f64;
        let lx = w - right + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text class="legend" x="{}" y="{}" font-family="sans-serif" font-size="12">{} (AP {:.2})</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            xml_escape(&label),
            row.ap
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report` to `path` in `format`.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Csv | ReportFormat::Markdown => report_table(report, format),
        ReportFormat::Svg => pr_svg(report, "Precision-Recall"),
    };
    write_file(path.as_ref(), &text)
}

pub fn emit_decline(table: &DeclineTable, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    write_file(path.as_ref(), &decline_table(table, format))
}

pub fn emit_pr_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    write_file(path.as_ref(), &pr_csv(report))
}
