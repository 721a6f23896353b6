use std::path::{Path, PathBuf};

use dci_core::attack::{attack_texture, detect_scenes, AttackLoss, MatchedScoreLoss, RunRecord};
use dci_core::compositor::{BackgroundProvider, DirectoryProvider, SyntheticProvider};
use dci_core::dataset::{
    build_continuous_manifest, build_discrete_manifest, build_scenes, default_scripts, even_azimuths,
    grid_locations, materialize, validate_presets, DatasetIndex, DiscreteSpace, Manifest, SceneScript,
    WeatherPreset,
};
use dci_core::detector::{parse_detections, train_on_scenes, Detector, ExternalAdapter};
use dci_core::evaluator::{
    ap_decline, decline_table, pr_csv, pr_svg, report_table, EvalReport, EvalRow, FrameResult, ReportFormat,
};
use dci_core::renderer::Resolution;
use dci_core::scene::{load_mesh, procedural_car, procedural_car_paint, validate_texture, DEFAULT_RESOLUTION};
use dci_core::{BuiltScene64, Manifest64, Mesh64, Texture64, ToyDetector64};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{AttackArgs, EvaluateArgs, Fail, GenerateArgs, Globals, ReportArgs, SceneArgs};

const MANIFEST: &str = "manifest.json";
const CONFIG: &str = "config.json";
const TEXTURE: &str = "texture.bin";

fn pipeline<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> Fail + '_ {
    move |e| Fail::pipeline(format!("{context}: {e}"))
}

fn write_text(path: &Path, text: &str) -> Result<(), Fail> {
    std::fs::write(path, text).map_err(|e| Fail::pipeline(format!("writing {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Fail> {
    let mut text = serde_json::to_string_pretty(value).map_err(pipeline("serializing"))?;
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(dir).map_err(|e| Fail::pipeline(format!("creating {}: {e}", dir.display())))
}

/// Config file, then global flags, then command flags; validated.
fn resolve(globals: &Globals, fallback: Option<&Path>, scene: &SceneArgs) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::resolve(globals.config.as_deref(), fallback)?;
    if let Some(s) = globals.seed {
        cfg.seed = s;
    }
    if let Some(w) = globals.workers {
        cfg.workers = Some(w);
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = Some(v);
            }
        };
    }
    set!(scene.mesh, cfg.mesh);
    set!(scene.texture, cfg.texture);
    set!(scene.backgrounds, cfg.backgrounds);
    set!(scene.weather_presets, cfg.weather_presets);
    if let Some(r) = scene.res {
        cfg.resolution = r;
    }
    Ok(cfg)
}

fn finish_config(cfg: &mut RunConfig) -> Result<(), Fail> {
    cfg.propagate_seed();
    cfg.check_paths()?;
    if let Some(n) = cfg.workers {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn mesh(cfg: &RunConfig) -> Result<Mesh64, Fail> {
    match &cfg.mesh {
        Some(p) => load_mesh(p).map_err(|e| Fail::config(format!("--mesh {}: {e}", p.display()))),
        None => Ok(procedural_car()),
    }
}

/// `--texture`, else the dataset's texture, else the built-in paint.
fn texture(cfg: &RunConfig, data: Option<&Path>, mesh: &Mesh64) -> Result<Texture64, Fail> {
    let from_data = data.map(|d| d.join(TEXTURE)).filter(|p| p.is_file());
    let tex = match (&cfg.texture, from_data) {
        (Some(p), _) => Texture64::load(p).map_err(|e| Fail::config(format!("--texture {}: {e}", p.display())))?,
        (None, Some(p)) => Texture64::load(&p).map_err(pipeline(&p.display().to_string()))?,
        (None, None) if cfg.mesh.is_none() => {
            procedural_car_paint(DEFAULT_RESOLUTION).map_err(pipeline("built-in texture"))?
        }
        (None, None) => Texture64::uniform(mesh.face_count(), DEFAULT_RESOLUTION, dci_core::Rgb::splat(0.5))
            .map_err(pipeline("default texture"))?,
    };
    validate_texture(&tex, mesh).map_err(|e| Fail::config(format!("texture does not fit the mesh: {e}")))?;
    Ok(tex)
}

fn presets(cfg: &RunConfig) -> Result<Vec<WeatherPreset<f64>>, Fail> {
    let presets = match &cfg.weather_presets {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Fail::config(format!("--weather-presets {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Fail::config(format!("--weather-presets {}: {e}", p.display())))?
        }
        None => dci_core::dataset::default_presets(),
    };
    validate_presets(&presets).map_err(|e| Fail::config(format!("--weather-presets: {e}")))?;
    Ok(presets)
}

fn provider(cfg: &RunConfig, presets: Vec<WeatherPreset<f64>>) -> Box<dyn BackgroundProvider<f64>> {
    match &cfg.backgrounds {
        Some(dir) => Box::new(DirectoryProvider::new(dir)),
        None => Box::new(SyntheticProvider::new(presets)),
    }
}

fn select_weathers(
    presets: Vec<WeatherPreset<f64>>,
    wanted: &[String],
    discrete: bool,
) -> Result<Vec<WeatherPreset<f64>>, Fail> {
    if wanted.is_empty() {
        return Ok(if discrete { presets.into_iter().take(1).collect() } else { presets });
    }
    if wanted.iter().any(|w| w.eq_ignore_ascii_case("all")) {
        return Ok(presets);
    }
    wanted
        .iter()
        .map(|w| {
            presets
                .iter()
                .find(|p| p.name == *w)
                .cloned()
                .ok_or_else(|| Fail::config(format!("--weathers: unknown preset `{w}`")))
        })
        .collect()
}

fn scripts(cfg: &RunConfig) -> Result<Vec<SceneScript<f64>>, Fail> {
    match &cfg.scripts {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Fail::config(format!("--scripts {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Fail::config(format!("--scripts {}: {e}", p.display())))
        }
        None => Ok(default_scripts()),
    }
}

pub fn generate(globals: &Globals, args: GenerateArgs) -> Result<(), Fail> {
    let mut cfg = resolve(globals, None, &args.scene)?;
    let g = &mut cfg.generate;
    if let Some(p) = &args.part {
        g.part = p.clone();
    }
    if let Some(w) = &args.weathers {
        g.weathers = w.clone();
    }
    if let Some(s) = args.step {
        g.step = s;
    }
    if let Some(n) = args.azimuths {
        g.azimuths = n;
    }
    if let Some(n) = args.distances {
        g.distances = n;
    }
    if let Some(n) = args.locations {
        g.locations = n;
    }
    if args.cap.is_some() {
        g.cap = args.cap;
    }
    if args.scripts.is_some() {
        cfg.scripts = args.scripts.clone();
    }
    finish_config(&mut cfg)?;
    let g = &cfg.generate;

    let all = presets(&cfg)?;
    let discrete = match g.part.as_str() {
        "discrete" => true,
        "continuous" => false,
        other => return Err(Fail::config(format!("--part: expected continuous or discrete, got `{other}`"))),
    };
    let chosen = select_weathers(all.clone(), &g.weathers, discrete)?;
    let manifest: Manifest64 = if discrete {
        let distances = (0..g.distances)
            .map(|k| g.distance_start + g.distance_step * k as f64)
            .collect();
        let space = DiscreteSpace::new(
            even_azimuths(g.azimuths),
            distances,
            grid_locations(g.locations, g.location_spacing),
            g.pitches.clone(),
            chosen.iter().map(|p| p.name.clone()).collect(),
            g.fov,
        )
        .map_err(|e| Fail::config(format!("discrete grid: {e}")))?;
        if args.count_only {
            println!("{}", space.cardinality());
            return Ok(());
        }
        build_discrete_manifest(&space, g.cap, cfg.seed).map_err(|e| Fail::config(e.to_string()))?
    } else {
        if !(g.step > 0.0) {
            return Err(Fail::config("--step must be positive"));
        }
        build_continuous_manifest(&scripts(&cfg)?, &chosen, g.step, cfg.seed)
            .map_err(|e| Fail::config(e.to_string()))?
    };
    if args.count_only {
        println!("{}", manifest.len());
        return Ok(());
    }

    let mesh = mesh(&cfg)?;
    let tex = texture(&cfg, None, &mesh)?;
    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG), &cfg.to_json())?;
    manifest.save(args.out.join(MANIFEST)).map_err(pipeline("writing manifest"))?;
    tex.save(args.out.join(TEXTURE)).map_err(pipeline("writing texture"))?;
    let provider = provider(&cfg, all);
    let res = Resolution::square(cfg.resolution);
    let summary =
        materialize(&manifest, &mesh, &tex, provider.as_ref(), res, &args.out).map_err(pipeline("materializing"))?;
    println!(
        "wrote {} entries ({} with the vehicle visible) to {}",
        summary.written,
        summary.visible,
        args.out.display()
    );
    if !summary.is_complete() {
        for f in &summary.failures {
            eprintln!("  {}: {}", f.entry_id, f.error);
        }
        return Err(Fail::partial(format!(
            "{} of {} entries failed",
            summary.failures.len(),
            manifest.len()
        )));
    }
    Ok(())
}

struct Dataset {
    manifest: Manifest64,
    index: DatasetIndex,
}

fn load_dataset(dir: &Path) -> Result<Dataset, Fail> {
    let manifest = Manifest::load(dir.join(MANIFEST))
        .map_err(|e| Fail::config(format!("--data {}: {e}", dir.display())))?;
    let index = DatasetIndex::load(dir).map_err(|e| Fail::config(format!("--data {}: {e}", dir.display())))?;
    Ok(Dataset { manifest, index })
}

/// Rebuilds the successfully written entries of a dataset with `tex`.
fn scenes(cfg: &RunConfig, data: &Dataset, mesh: &Mesh64, tex: &Texture64) -> Result<Vec<BuiltScene64>, Fail> {
    let written: std::collections::BTreeSet<&str> =
        data.index.entries.iter().map(|e| e.entry_id.as_str()).collect();
    let entries: Vec<_> = data
        .manifest
        .entries
        .iter()
        .filter(|e| written.contains(e.entry_id.as_str()))
        .cloned()
        .collect();
    let provider = provider(cfg, presets(cfg)?);
    build_scenes(&entries, mesh, tex, provider.as_ref(), data.index.resolution)
        .into_iter()
        .zip(&entries)
        .map(|(r, e)| r.map_err(|err| Fail::pipeline(format!("entry {}: {err}", e.entry_id))))
        .collect()
}

fn detector(cfg: &RunConfig, scenes: &[BuiltScene64]) -> Result<ToyDetector64, Fail> {
    match &cfg.detector.model {
        Some(p) => ToyDetector64::load(p).map_err(|e| Fail::config(format!("--detector-model {}: {e}", p.display()))),
        None => {
            let model = train_on_scenes(scenes, &cfg.detector.toy).map_err(pipeline("training the toy detector"))?;
            if let Some(t) = &model.training {
                log::info!("toy detector recall {:.3}, false alarms {:.3}", t.recall, t.false_alarm_rate);
                if t.underfit {
                    log::warn!("toy detector underfits its training data");
                }
            }
            Ok(model)
        }
    }
}

#[derive(Serialize)]
struct AttackRun<'a> {
    seed: u64,
    config: &'a RunConfig,
    record: RunRecord,
}

pub fn attack(globals: &Globals, args: AttackArgs) -> Result<(), Fail> {
    let mut cfg = resolve(globals, Some(&args.data.join(CONFIG)), &args.scene)?;
    if args.detector_model.is_some() {
        cfg.detector.model = args.detector_model.clone();
    }
    let a = &mut cfg.attack;
    if let Some(s) = args.step {
        a.step = s;
    }
    if let Some(e) = args.epochs {
        a.epochs = e;
    }
    if let Some(b) = args.batch_size {
        a.batch_size = b;
    }
    if args.max_iterations.is_some() {
        a.max_iterations = args.max_iterations;
    }
    finish_config(&mut cfg)?;
    cfg.attack.validate().map_err(|e| Fail::config(e.to_string()))?;
    if cfg.attack.loss != MatchedScoreLoss::NAME {
        return Err(Fail::config(format!("attack.loss: unknown loss `{}`", cfg.attack.loss)));
    }

    let data = load_dataset(&args.data)?;
    let mesh = mesh(&cfg)?;
    let tex = texture(&cfg, Some(&args.data), &mesh)?;
    let scenes = scenes(&cfg, &data, &mesh, &tex)?;
    let model = detector(&cfg, &scenes)?;
    let loss: &dyn AttackLoss<f64> = &MatchedScoreLoss;
    let outcome = attack_texture(&tex, &scenes, &model, loss, &cfg.attack).map_err(pipeline("attack"))?;

    create_dir(&args.out)?;
    outcome
        .texture
        .save(args.out.join(TEXTURE))
        .map_err(pipeline("writing texture"))?;
    if cfg.detector.model.is_none() {
        model.save(args.out.join("detector.json")).map_err(pipeline("writing detector"))?;
    }
    let record = RunRecord::new(&cfg.attack, model.name(), &tex, &outcome);
    println!(
        "{} updates over {} scenes; loss {:.4} -> {:.4}; texture {}",
        record.iterations,
        record.scenes,
        record.loss_trace.first().copied().unwrap_or(f64::NAN),
        record.loss_trace.last().copied().unwrap_or(f64::NAN),
        record.texture_checksum_after
    );
    write_json(
        &args.out.join("run.json"),
        &AttackRun {
            seed: cfg.seed,
            config: &cfg,
            record,
        },
    )
}

/// `name=path`, or a bare name for external detections.
fn parse_texture_arg(s: &str) -> Result<(String, Option<PathBuf>), Fail> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), Some(path.into()))),
        None if !s.is_empty() => Ok((s.to_string(), None)),
        _ => Err(Fail::config(format!("--eval-texture: expected NAME=PATH, got `{s}`"))),
    }
}

/// A frame with the weather it was taken under.
struct Frame {
    weather: String,
    result: FrameResult<f64>,
}

fn rows(texture: &str, detector: &str, frames: &[Frame], iou: f64, by_weather: bool) -> Result<Vec<EvalRow>, Fail> {
    let score = |label: &str, subset: Vec<FrameResult<f64>>| {
        EvalRow::from_frames(label, detector, &subset, iou).map_err(pipeline("scoring"))
    };
    if !by_weather {
        return Ok(vec![score(texture, frames.iter().map(|f| f.result.clone()).collect())?]);
    }
    let mut weathers: Vec<&str> = Vec::new();
    for f in frames {
        if !weathers.contains(&f.weather.as_str()) {
            weathers.push(&f.weather);
        }
    }
    weathers
        .into_iter()
        .map(|w| {
            let subset = frames.iter().filter(|f| f.weather == w).map(|f| f.result.clone()).collect();
            score(&format!("{texture} {w}"), subset)
        })
        .collect()
}

fn external_frames(data_dir: &Path, data: &Dataset, dir: &Path) -> Result<Vec<Frame>, Fail> {
    let adapter = ExternalAdapter::new(dir);
    data.index
        .entries
        .iter()
        .map(|e| {
            let label = DatasetIndex::load_label::<f64>(data_dir, e).map_err(pipeline("reading label"))?;
            let answer = adapter.detections_path(Path::new(&e.image));
            let text = std::fs::read_to_string(&answer)
                .map_err(|err| Fail::pipeline(format!("--external: {}: {err}", answer.display())))?;
            let detections = parse_detections(&text).map_err(pipeline(&answer.display().to_string()))?;
            Ok(Frame {
                weather: label.weather,
                result: FrameResult {
                    image_id: e.entry_id.clone(),
                    scene_id: label.scene_id,
                    detections,
                    ground_truth: label.bbox,
                },
            })
        })
        .collect()
}

fn emit_tables(report: &EvalReport, out: &Path, stem: &str, title: &str, seed: u64) -> Result<(), Fail> {
    write_json(&out.join(format!("{stem}.json")), report)?;
    write_text(&out.join(format!("{stem}.csv")), &report_table(report, ReportFormat::Csv))?;
    write_text(&out.join(format!("{stem}.md")), &report_table(report, ReportFormat::Markdown))?;
    write_text(&out.join(format!("{stem}_pr.csv")), &pr_csv(report))?;
    write_text(&out.join(format!("{stem}_pr.svg")), &with_seed(&pr_svg(report, title), seed))
}

/// Adds the seed to an SVG as a `<desc>` element.
fn with_seed(svg: &str, seed: u64) -> String {
    match svg.find('\n') {
        Some(i) => format!("{}\n<desc>seed {seed}</desc>{}", &svg[..i], &svg[i..]),
        None => svg.to_string(),
    }
}

pub fn evaluate(globals: &Globals, args: EvaluateArgs) -> Result<(), Fail> {
    let mut cfg = resolve(globals, Some(&args.data.join(CONFIG)), &args.scene)?;
    if args.detector_model.is_some() {
        cfg.detector.model = args.detector_model.clone();
    }
    if let Some(i) = args.iou {
        cfg.evaluate.iou = i;
    }
    if args.by_weather {
        cfg.evaluate.by_weather = true;
    }
    if args.baseline.is_some() {
        cfg.evaluate.baseline = args.baseline.clone();
    }
    finish_config(&mut cfg)?;
    let mut textures = args
        .textures
        .iter()
        .map(|s| parse_texture_arg(s))
        .collect::<Result<Vec<_>, _>>()?;
    if textures.is_empty() {
        textures.push(("initial".into(), None));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in &textures {
        if !seen.insert(name.as_str()) {
            return Err(Fail::config(format!("--eval-texture: `{name}` given twice")));
        }
    }
    let baseline = cfg.evaluate.baseline.clone().unwrap_or_else(|| textures[0].0.clone());
    if !seen.contains(baseline.as_str()) {
        return Err(Fail::config(format!("--baseline: no texture named `{baseline}`")));
    }

    let data = load_dataset(&args.data)?;
    let iou = cfg.evaluate.iou;
    let mut report = EvalReport::default();
    let mut weather_report = EvalReport::default();
    let mut push = |name: &str, det: &str, frames: &[Frame]| -> Result<(), Fail> {
        report.rows.extend(rows(name, det, frames, iou, false)?);
        if cfg.evaluate.by_weather {
            weather_report.rows.extend(rows(name, det, frames, iou, true)?);
        }
        Ok(())
    };
    if let Some(ext) = &args.external {
        for (name, _) in &textures {
            let frames = external_frames(&args.data, &data, &ext.join(name))?;
            push(name, &args.external_name, &frames)?;
        }
    } else {
        let mesh = mesh(&cfg)?;
        let initial = texture(&cfg, Some(&args.data), &mesh)?;
        let base_scenes = scenes(&cfg, &data, &mesh, &initial)?;
        let model = detector(&cfg, &base_scenes)?;
        for (name, path) in &textures {
            let tex = match path {
                Some(p) => {
                    let t = Texture64::load(p)
                        .map_err(|e| Fail::config(format!("--eval-texture {name}: {}: {e}", p.display())))?;
                    validate_texture(&t, &mesh)
                        .map_err(|e| Fail::config(format!("--eval-texture {name}: {e}")))?;
                    t
                }
                None => initial.clone(),
            };
            let results = detect_scenes(&tex, &base_scenes, &model).map_err(pipeline("detecting"))?;
            let frames: Vec<Frame> = results
                .into_iter()
                .zip(&base_scenes)
                .map(|(result, s)| Frame {
                    weather: s.instance.tags.weather_tag.clone(),
                    result,
                })
                .collect();
            push(name, model.name(), &frames)?;
        }
    }

    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG), &cfg.to_json())?;
    emit_tables(&report, &args.out, "report", "Precision-recall by texture", cfg.seed)?;
    if cfg.evaluate.by_weather {
        emit_tables(&weather_report, &args.out, "weather", "Precision-recall by weather", cfg.seed)?;
    }
    print!("{}", report_table(&report, ReportFormat::Markdown));
    if textures.len() > 1 {
        let (base, attacked): (Vec<EvalRow>, Vec<EvalRow>) =
            report.rows.iter().cloned().partition(|r| r.texture == baseline);
        let table = ap_decline(&EvalReport { rows: base }, &EvalReport { rows: attacked })
            .map_err(pipeline("decline"))?;
        write_json(&args.out.join("decline.json"), &table)?;
        write_text(&args.out.join("decline.csv"), &decline_table(&table, ReportFormat::Csv))?;
        write_text(&args.out.join("decline.md"), &decline_table(&table, ReportFormat::Markdown))?;
        println!("AP decline versus {baseline}:");
        print!("{}", decline_table(&table, ReportFormat::Markdown));
    }
    Ok(())
}

pub fn report(args: ReportArgs) -> Result<(), Fail> {
    let format: ReportFormat = args
        .format
        .parse()
        .map_err(|_| Fail::config(format!("--format: expected csv, markdown or svg, got `{}`", args.format)))?;
    let report =
        EvalReport::load_json(&args.input).map_err(|e| Fail::config(format!("--input {}: {e}", args.input.display())))?;
    let text = match (&args.baseline, format) {
        (Some(_), ReportFormat::Svg) => {
            return Err(Fail::config("--baseline applies to csv and markdown output only"));
        }
        (Some(b), _) => {
            let (base, attacked): (Vec<EvalRow>, Vec<EvalRow>) =
                report.rows.iter().cloned().partition(|r| r.texture == *b);
            if base.is_empty() {
                return Err(Fail::config(format!("--baseline: no texture named `{b}` in the report")));
            }
            let table = ap_decline(&EvalReport { rows: base }, &EvalReport { rows: attacked })
                .map_err(pipeline("decline"))?;
            decline_table(&table, format)
        }
        (None, ReportFormat::Svg) => pr_svg(&report, &args.title),
        (None, _) => report_table(&report, format),
    };
    write_text(&args.out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_args() {
        assert_eq!(parse_texture_arg("asa=a.bin").unwrap(), ("asa".into(), Some("a.bin".into())));
        assert_eq!(parse_texture_arg("ext").unwrap(), ("ext".into(), None));
        assert_eq!(parse_texture_arg("=x").unwrap_err().code, 1);
    }

    #[test]
    fn seed_goes_after_the_svg_tag() {
        let s = with_seed("<svg>\n<rect/>\n</svg>\n", 9);
        assert_eq!(s, "<svg>\n<desc>seed 9</desc>\n<rect/>\n</svg>\n");
    }

    #[test]
    fn weather_selection() {
        let all = dci_core::dataset::default_presets::<f64>();
        assert_eq!(select_weathers(all.clone(), &[], false).unwrap().len(), 3);
        assert_eq!(select_weathers(all.clone(), &[], true).unwrap().len(), 1);
        assert_eq!(select_weathers(all.clone(), &["all".into()], true).unwrap().len(), 3);
        assert_eq!(select_weathers(all.clone(), &["ClearNight".into()], false).unwrap()[0].name, "ClearNight");
        assert_eq!(select_weathers(all, &["Fog".into()], false).unwrap_err().code, 1);
    }
}
