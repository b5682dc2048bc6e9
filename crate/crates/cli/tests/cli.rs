use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sadm_core::autoencoder::{AutoencoderConfig, AutoencoderModel};
use sadm_core::canvas::{save_mask_png, save_rgb_png, CanvasMask, RgbImage};
use sadm_core::checkpoint;
use sadm_core::denoiser::{DenoiserConfig, DenoiserModel};
use sadm_core::metrics::ScoreReport;
use tempfile::TempDir;

fn sadm(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sadm"))
        .arg("--home")
        .arg(home)
        .args(args)
        .env_remove("SADM_HOME")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// A home directory holding freshly initialised tiny models.
fn tiny_home() -> TempDir {
    let dir = TempDir::new().unwrap();
    let d = DenoiserModel::<f32>::init(
        DenoiserConfig {
            base_channels: 8,
            n_heads: 2,
            ..DenoiserConfig::default()
        },
        1,
    )
    .unwrap();
    let a = AutoencoderModel::<f32>::init(
        AutoencoderConfig {
            channels: [8, 8, 8],
            ..AutoencoderConfig::default()
        },
        2,
    )
    .unwrap();
    std::fs::create_dir_all(dir.path().join("checkpoints")).unwrap();
    checkpoint::save(&dir.path().join("checkpoints/denoiser.sadm"), &d.to_tensors()).unwrap();
    checkpoint::save(&dir.path().join("checkpoints/ae.sadm"), &a.to_tensors()).unwrap();
    dir
}

fn disc_png(dir: &Path, name: &str, cx: f64, cy: f64, r: f64) -> PathBuf {
    let m = CanvasMask::from_fn(64, 64, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        dx * dx + dy * dy <= r * r
    });
    let p = dir.join(name);
    save_mask_png(&m, &p).unwrap();
    p
}

#[test]
fn usage_errors_exit_with_two() {
    let home = TempDir::new().unwrap();
    assert_eq!(code(&sadm(home.path(), &["no-such-command"])), 2);
    assert_eq!(code(&sadm(home.path(), &["generate", "--class", "1"])), 2);
}

#[test]
fn bad_config_exits_with_three() {
    let home = TempDir::new().unwrap();
    let cfg = home.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"steps": 10, "colour": "red"}"#).unwrap();
    let o = sadm(home.path(), &["--config", cfg.to_str().unwrap(), "gendata", "--size", "1"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(&cfg, r#"{"steps": 0}"#).unwrap();
    let o = sadm(home.path(), &["--config", cfg.to_str().unwrap(), "gendata", "--size", "1"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gendata_is_byte_identical_across_runs_and_job_counts() {
    let home = TempDir::new().unwrap();
    let a = home.path().join("a");
    let b = home.path().join("b");
    let oa = sadm(home.path(), &["--out", a.to_str().unwrap(), "gendata", "--size", "12"]);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    let ob = sadm(home.path(), &["--jobs", "3", "--out", b.to_str().unwrap(), "gendata", "--size", "12"]);
    assert_eq!(code(&ob), 0);
    let files = read_dir_bytes(&a);
    assert_eq!(files.len(), 12 * 2 + 1);
    assert_eq!(files, read_dir_bytes(&b));

    let c = home.path().join("c");
    let oc = sadm(home.path(), &["--seed", "5", "--out", c.to_str().unwrap(), "gendata", "--size", "12"]);
    assert_eq!(code(&oc), 0);
    assert_ne!(files, read_dir_bytes(&c));

    let e = home.path().join("empty");
    assert_eq!(code(&sadm(home.path(), &["--out", e.to_str().unwrap(), "gendata", "--size", "0"])), 0);
    assert_eq!(std::fs::read_to_string(e.join("manifest.jsonl")).unwrap(), "");
}

#[test]
fn eval_on_empty_suite_writes_an_empty_report() {
    let home = TempDir::new().unwrap();
    let suite = home.path().join("suite.json");
    std::fs::write(&suite, "[]").unwrap();
    let out = home.path().join("out");
    let o = sadm(home.path(), &["--out", out.to_str().unwrap(), "eval", "--suite", suite.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = ScoreReport::read_json(&out.join("report.json")).unwrap();
    assert!(r.cases.is_empty());
    assert_eq!(r.overall.n_cases, 0);
    assert!(r.overall.m_sim_int.is_none());
}

#[test]
fn malformed_suite_exits_with_eight() {
    let home = TempDir::new().unwrap();
    let suite = home.path().join("suite.json");
    std::fs::write(
        &suite,
        r#"[{"characters":"ABC","font_type":"HOBO","category":"Animal","prompt":"cat","language":"en"}]"#,
    )
    .unwrap();
    let o = sadm(home.path(), &["eval", "--suite", suite.to_str().unwrap()]);
    assert_eq!(code(&o), 8, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_checkpoint_and_bad_masks_have_stable_codes() {
    let home = TempDir::new().unwrap();
    let m = disc_png(home.path(), "a.png", 32.0, 32.0, 12.0);
    let o = sadm(home.path(), &["generate", "--class", "1", m.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));

    let full = home.path().join("full.png");
    save_mask_png(&CanvasMask::filled(64, 64, true), &full).unwrap();
    let o = sadm(home.path(), &["generate", "--class", "1", full.to_str().unwrap()]);
    assert_eq!(code(&o), 6);

    let o = sadm(home.path(), &["generate", "--class", "8", m.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = sadm(home.path(), &["generate", "--class", "1", "--noise-strength", "1.5", m.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn generate_is_deterministic_and_writes_sidecars() {
    let home = tiny_home();
    let masks = [
        disc_png(home.path(), "a.png", 30.0, 32.0, 14.0),
        disc_png(home.path(), "b.png", 34.0, 30.0, 20.0),
        disc_png(home.path(), "c.png", 32.0, 36.0, 10.0),
    ];
    let run = |out: &str, extra: &[&str]| {
        let out = home.path().join(out);
        let mut args = vec!["--steps", "3", "--out", out.to_str().unwrap(), "generate", "--class", "2", "--grid"];
        args.extend_from_slice(extra);
        let paths: Vec<&str> = masks.iter().map(|p| p.to_str().unwrap()).collect();
        args.extend(paths);
        let o = sadm(home.path(), &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        read_dir_bytes(&out)
    };
    let first = run("one", &[]);
    assert_eq!(first.len(), 3 * 2 + 1);
    assert_eq!(first, run("two", &[]));
    assert_ne!(first, run("seeded", &["--seed", "99"]));
    assert_ne!(first, run("plain", &["--ablate-saa"]));

    let side: serde_json::Value = serde_json::from_slice(&first.iter().find(|(n, _)| n == "01_b.json").unwrap().1).unwrap();
    assert_eq!(side["reference_index"], 1);
    assert_eq!(side["prompt"], 2);
    assert_eq!(side["saet"], true);

    let img = image::load_from_memory(&first.iter().find(|(n, _)| n == "00_a.png").unwrap().1).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    assert_eq!(img.color(), image::ColorType::Rgba8);
}

#[test]
fn transfer_results_do_not_depend_on_job_count() {
    let home = tiny_home();
    let refmask = disc_png(home.path(), "ref.png", 32.0, 32.0, 18.0);
    let refimg = home.path().join("ref_img.png");
    save_rgb_png(&RgbImage::from_fn(64, 64, |x, y| [x as f32 / 63.0, 0.5, y as f32 / 63.0]), &refimg).unwrap();
    let targets = [
        disc_png(home.path(), "t1.png", 28.0, 32.0, 12.0),
        disc_png(home.path(), "t2.png", 36.0, 30.0, 16.0),
    ];
    let run = |out: &str, jobs: &str| {
        let out = home.path().join(out);
        let mut args = vec![
            "--steps",
            "3",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
            "transfer",
            "--class",
            "4",
            "--reference",
            refimg.to_str().unwrap(),
            "--reference-mask",
            refmask.to_str().unwrap(),
        ];
        args.extend(targets.iter().map(|p| p.to_str().unwrap()));
        let o = sadm(home.path(), &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        read_dir_bytes(&out)
    };
    let a = run("j1", "1");
    assert_eq!(a.len(), 4);
    assert_eq!(a, run("j2", "2"));
}

#[test]
fn sweep_writes_one_row_per_mask_and_strength() {
    let home = tiny_home();
    let m = disc_png(home.path(), "m.png", 32.0, 32.0, 15.0);
    let out = home.path().join("sweep");
    let o = sadm(
        home.path(),
        &["--steps", "4", "--out", out.to_str().unwrap(), "sweep-strength", "--class", "0", "--strengths", "0,0.5,1", m.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(csv.starts_with("mask,strength,boundary_flexibility"));
}
