use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use usaad::imaging;
use usaad::synth;
use usaad::trainer::TrainConfig;

fn usaad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usaad")).args(args).output().expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout).lines().map(str::to_string).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_scenes(dir: &Path, seeds: std::ops::Range<u64>, size: usize) {
    fs::create_dir_all(dir).unwrap();
    for s in seeds {
        imaging::save_png(&synth::natural(s, size, 3), 0, &dir.join(format!("img_{s:02}.png"))).unwrap();
    }
}

/// The one-line JSON error and the exit code.
fn failure(out: &Output) -> (i32, Value) {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap_or_default().to_string();
    (out.status.code().unwrap(), serde_json::from_str(&line).unwrap_or(Value::Null))
}

#[test]
fn make_dataset_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write_scenes(&tmp.path().join("src"), 0..6, 64);
    let run = |out: &str| {
        let o = usaad(&["make-dataset", "--src", p(&tmp.path().join("src")), "--out", p(&tmp.path().join(out)), "--seed", "7", "--kernel-size", "9"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let lines = stdout_lines(&o);
        let config: Value = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(config["seed"], 7);
        assert_eq!(config["kernel_size"], 9);
        assert!(lines[1].ends_with("manifest.json"));
        fs::read_to_string(&lines[1]).unwrap()
    };
    let a = run("a");
    assert_eq!(imaging::list_images(&tmp.path().join("a/blur")).unwrap().len(), 3);
    assert_eq!(imaging::list_images(&tmp.path().join("a/sharp")).unwrap().len(), 3);
    // identical up to the output folder name
    assert_eq!(a, run("b"));
}

#[test]
fn pre_blurred_copies_without_kernels() {
    let tmp = tempfile::tempdir().unwrap();
    write_scenes(&tmp.path().join("src"), 0..4, 32);
    write_scenes(&tmp.path().join("blurred"), 0..4, 32);
    let o = usaad(&[
        "make-dataset", "--src", p(&tmp.path().join("src")), "--out", p(&tmp.path().join("c")),
        "--pre-blurred", p(&tmp.path().join("blurred")),
    ]);
    assert!(o.status.success());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["blur_model"], "external blur");
    assert!(manifest["entries"].as_array().unwrap().iter().all(|e| e["kernel_seed"].is_null()));
}

#[test]
fn ablate_presets_resolve_and_unknown_ones_are_listed() {
    let o = usaad(&["ablate", "--preset", "Net12", "--iterations", "0"]);
    let (code, err) = failure(&o);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("Net1, Net2, Net3, Net4, Net5, Net6, Net7, Net8"));

    let tmp = tempfile::tempdir().unwrap();
    write_scenes(&tmp.path().join("blur"), 0..2, 64);
    write_scenes(&tmp.path().join("sharp"), 2..4, 64);
    for (preset, scales, fusion) in [("Net1", 1, "none"), ("Net4", 3, "add"), ("Net8", 3, "saam")] {
        let out = tmp.path().join(preset);
        let o = usaad(&[
            "ablate", "--preset", preset, "--iterations", "0", "--image-size", "64", "--disc-layers", "2",
            "--base-width", "4", "--blur-dir", p(&tmp.path().join("blur")), "--sharp-dir", p(&tmp.path().join("sharp")),
            "--out-dir", p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let cfg = TrainConfig::from_str_any(&stdout_lines(&o)[0]).unwrap();
        assert_eq!((cfg.n_scales, cfg.fusion.as_str()), (scales, fusion));
        assert!(out.join("ckpt_00000000.usaad").is_file());
    }
}

#[test]
fn train_prints_a_config_that_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    write_scenes(&t.join("blur"), 0..3, 32);
    write_scenes(&t.join("sharp"), 3..6, 32);
    fs::write(
        t.join("cfg.toml"),
        format!(
            "n_scales = 2\nimage_size = 32\nbase_width = 4\nreblur_width = 4\ndisc_width = 4\ndisc_layers = 1\nresidual_blocks = 1\niterations = 2\nblur_dir = {:?}\nsharp_dir = {:?}\n",
            p(&t.join("blur")),
            p(&t.join("sharp"))
        ),
    )
    .unwrap();
    // flags override the file
    let o = usaad(&["train", "--config", p(&t.join("cfg.toml")), "--seed", "3", "--iterations", "3", "--out-dir", p(&t.join("r1"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = &stdout_lines(&o)[0];
    let cfg = TrainConfig::from_str_any(printed).unwrap();
    assert_eq!((cfg.seed, cfg.iterations, cfg.n_scales, cfg.image_size), (3, 3, 2, 32));
    let summary: Value = serde_json::from_str(&stdout_lines(&o)[1]).unwrap();
    assert_eq!(summary["iterations"], 3);

    // the printed line, used as a config file with only the output moved,
    // gives the same loss history
    fs::write(t.join("printed.json"), printed).unwrap();
    let o = usaad(&["train", "--config", p(&t.join("printed.json")), "--out-dir", p(&t.join("r2"))]);
    assert!(o.status.success());
    let a = fs::read_to_string(t.join("r1/losses.csv")).unwrap();
    let b = fs::read_to_string(t.join("r2/losses.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1 + 3 * 3);

    let o = usaad(&["inspect", "--history", p(&t.join("r1/losses.csv")), "--out", p(&t.join("plot/loss.png"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let png = image::open(t.join("plot/loss.png")).unwrap();
    assert_eq!((png.width(), png.height()), (960, 540));
    let legend: Value = serde_json::from_str(&stdout_lines(&o)[1]).unwrap();
    assert!(legend["legend"]["total"].is_string());

    // deblur keeps file names and sizes, including sizes the pyramid does not divide
    write_scenes(&t.join("in"), 0..1, 36);
    let o = usaad(&["deblur", "--ckpt", p(&t.join("r1/ckpt_00000003.usaad")), "--in", p(&t.join("in")), "--out", p(&t.join("restored"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let restored = image::open(t.join("restored/img_00.png")).unwrap();
    assert_eq!((restored.width(), restored.height()), (36, 36));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let o = usaad(&["train", "--n-scales", "0"]);
    let (code, err) = failure(&o);
    assert_eq!((code, err["error"].as_str()), (2, Some("usage")));

    let o = usaad(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let o = usaad(&["train", "--blur-dir", p(&tmp.path().join("nope")), "--sharp-dir", p(tmp.path()), "--iterations", "1"]);
    let (code, err) = failure(&o);
    assert_eq!((code, err["error"].as_str()), (3, Some("data")));

    let o = usaad(&["deblur", "--ckpt", p(&tmp.path().join("missing.usaad")), "--in", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(failure(&o).0, 3);
}

#[test]
fn eval_fills_psnr_only_with_references() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    write_scenes(&t.join("test"), 0..2, 64);
    write_scenes(&t.join("ref"), 0..2, 64);

    let o = usaad(&["eval", "--test", p(&t.join("test")), "--ref", p(&t.join("ref")), "--out", p(&t.join("with.csv"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(t.join("with.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    // identical images hit the PSNR cap
    assert!(rows.iter().all(|r| r[1] == "100" && !r[2].is_empty() && !r[3].is_empty()));

    let o = usaad(&[
        "eval", "--test", p(&t.join("test")), "--out", p(&t.join("without.csv")), "--features", p(&t.join("f.json")),
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(t.join("without.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| {
        let r: Vec<&str> = l.split(',').collect();
        r[1].is_empty() && !r[2].is_empty() && !r[3].is_empty()
    }));
    let features: Value = serde_json::from_str(&fs::read_to_string(t.join("f.json")).unwrap()).unwrap();
    assert_eq!(features[0]["features"].as_array().unwrap().len(), 36);

    // a pristine folder replaces the built-in statistics
    let o = usaad(&["eval", "--test", p(&t.join("test")), "--pristine", p(&t.join("ref")), "--out", p(&t.join("p.csv"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
