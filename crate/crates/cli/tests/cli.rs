use std::path::Path;
use std::process::{Command, Output};

use dci_core::Texture64;

fn dci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dci"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dci(args);
    assert!(
        out.status.success(),
        "dci {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_discrete(out: &Path) {
    ok(&[
        "generate", "--part", "discrete", "--azimuths", "4", "--distances", "3", "--locations", "5", "--res", "64",
        "--out", p(out),
    ]);
}

#[test]
fn discrete_grid_product() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    small_discrete(&out);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["entries"].as_array().unwrap().len(), 60);
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 60);
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 0);
}

#[test]
fn continuous_count_covers_every_weather() {
    let dir = tempfile::tempdir().unwrap();
    let all: usize = ok(&["generate", "--count-only", "--weathers", "all", "--out", p(dir.path())])
        .trim()
        .parse()
        .unwrap();
    let one: usize = ok(&["generate", "--count-only", "--weathers", "ClearNoon", "--out", p(dir.path())])
        .trim()
        .parse()
        .unwrap();
    assert_eq!(all, 3 * one);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn missing_mesh_is_a_config_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dci(&["generate", "--mesh", "/no/such/car.obj", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mesh"));
}

#[test]
fn bad_flags_exit_with_config_code() {
    assert_eq!(dci(&["generate", "--bogus"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dci(&["generate", "--part", "sideways", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--part"));
    assert_eq!(dci(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_backgrounds_are_a_partial_materialization() {
    let dir = tempfile::tempdir().unwrap();
    let bg = dir.path().join("bg");
    std::fs::create_dir(&bg).unwrap();
    let out = dci(&[
        "generate", "--part", "discrete", "--azimuths", "2", "--distances", "1", "--locations", "1", "--res", "32",
        "--backgrounds", p(&bg), "--out", p(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d/index.json")).unwrap()).unwrap();
    assert_eq!(index["failures"].as_array().unwrap().len(), 2);
}

#[test]
fn attack_defaults_and_zero_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_discrete(&data);
    let out = dir.path().join("a");
    ok(&["attack", "--data", p(&data), "--max-iterations", "0", "--out", p(&out)]);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    let cfg = &run["record"]["config"];
    assert_eq!(cfg["step"], 1e-5);
    assert_eq!(cfg["epochs"], 1);
    assert_eq!(cfg["batch_size"], 1);
    assert_eq!(run["seed"], 0);
    let before = Texture64::load(data.join("texture.bin")).unwrap();
    let after = Texture64::load(out.join("texture.bin")).unwrap();
    assert_eq!(before.checksum(), after.checksum());
    assert_eq!(run["record"]["iterations"], 0);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 5, "resolution": 48, "generate": {"part": "discrete", "locations": 2}}"#).unwrap();
    let out = dir.path().join("d");
    ok(&[
        "--config", p(&cfg), "--seed", "9", "generate", "--azimuths", "2", "--distances", "1", "--out", p(&out),
    ]);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 9);
    assert_eq!(echoed["resolution"], 48);
    assert_eq!(echoed["attack"]["seed"], 9);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 4);
}

#[test]
fn external_detections_need_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_discrete(&data);
    let ext = dir.path().join("ext");
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("index.json")).unwrap()).unwrap();
    for tex in ["initial", "adv"] {
        std::fs::create_dir_all(ext.join(tex)).unwrap();
        for e in index["entries"].as_array().unwrap() {
            let id = e["entry_id"].as_str().unwrap();
            let label: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(data.join(e["label"].as_str().unwrap())).unwrap())
                    .unwrap();
            // `initial` finds every vehicle, `adv` finds none.
            let dets = match (&label["box"], tex) {
                (serde_json::Value::Array(b), "initial") => {
                    format!(r#"[{{"box": [{}, {}, {}, {}], "score": 0.9, "class_id": 2}}]"#, b[0], b[1], b[2], b[3])
                }
                _ => "[]".to_string(),
            };
            std::fs::write(ext.join(tex).join(format!("{id}.png.detections.json")), dets).unwrap();
        }
    }
    let out = dir.path().join("e");
    ok(&[
        "evaluate", "--data", p(&data), "--external", p(&ext), "--eval-texture", "initial", "--eval-texture", "adv",
        "--out", p(&out),
    ]);
    assert_eq!(
        std::fs::read_to_string(out.join("report.csv")).unwrap(),
        "Texture Type,AP@external\ninitial,100.00\nadv,0.00\n"
    );
    assert_eq!(
        std::fs::read_to_string(out.join("decline.csv")).unwrap(),
        "Texture Type,AP@external\nadv,100.00\nMean,100.00\n"
    );
}

#[test]
fn weather_report_has_one_curve_per_weather() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c");
    ok(&["generate", "--part", "continuous", "--weathers", "all", "--res", "48", "--out", p(&data)]);
    let out = dir.path().join("e");
    ok(&["evaluate", "--data", p(&data), "--by-weather", "--out", p(&out)]);
    let svg_path = dir.path().join("w.svg");
    ok(&[
        "report", "--input", p(&out.join("weather.json")), "--format", "svg", "--title", "Weather", "--out",
        p(&svg_path),
    ]);
    let svg = std::fs::read_to_string(svg_path).unwrap();
    assert_eq!(svg.matches(r#"class="pr-curve""#).count(), 3);
    for w in ["ClearNoon", "ClearNight", "WetCloudySunset"] {
        assert!(svg.contains(&format!(r#"data-label="initial {w}""#)), "{w}");
    }
    let md_path = dir.path().join("t.md");
    ok(&["report", "--input", p(&out.join("report.json")), "--format", "markdown", "--out", p(&md_path)]);
    assert!(std::fs::read_to_string(md_path).unwrap().starts_with("| Texture Type | AP@toy |"));
    assert_eq!(
        dci(&["report", "--input", p(&out.join("report.json")), "--format", "pdf", "--out", p(&dir.path().join("x"))])
            .status
            .code(),
        Some(1)
    );
}
