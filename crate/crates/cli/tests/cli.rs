use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flosslab::experiments::Preset;
use flosslab_cli::{report, run, verify, ExperimentConfig, Manifest, RunOptions};
use proptest::prelude::*;
use tempfile::TempDir;

const TINY: &str = r#"
name = "tiny"
preset = "convergence_trace"
seeds = [3, 1]

[overrides]
n_units = 8
k = 2
t_sim = 200
t_transient = 10
points = 5
"#;

fn flosslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flosslab"))
        .args(args)
        .env_remove("FLOSSLAB_WORKERS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn tiny_run(out: &Path, opts: RunOptions) -> Manifest {
    let cfg = ExperimentConfig::parse(TINY).unwrap();
    let opts = RunOptions {
        output: Some(out.to_path_buf()),
        workers: Some(2),
        ..opts
    };
    run(&cfg, &opts).unwrap().1
}

#[test]
fn list_presets_names_every_preset() {
    let out = flosslab(&["list-presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for p in Preset::ALL {
        assert!(text.contains(p.name()), "missing {}", p.name());
    }
}

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = write_config(dir.path(), TINY);
    assert_eq!(flosslab(&["validate", "--config", &good]).status.code(), Some(0));

    let bad = write_config(
        dir.path(),
        "name = \"x\"\npreset = \"fig3_prefloss\"\nbogus = 1\n[overrides]\ndelay = 400\n",
    );
    let out = flosslab(&["validate", "--config", &bad]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bogus"), "{err}");
    assert!(err.contains("delay"), "{err}");

    let missing = dir.path().join("absent.toml");
    let out = flosslab(&["validate", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_bundle_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = flosslab(&["run", "--config", &cfg, "--output", a.to_str().unwrap(), "--workers", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = flosslab(&["run", "--config", &cfg, "--output", b.to_str().unwrap(), "--workers", "1"]);
    assert!(out.status.success());

    let ma = Manifest::read(&a).unwrap();
    let mb = Manifest::read(&b).unwrap();
    assert_eq!(ma.seeds, vec![3, 1]);
    assert_eq!(ma.files, mb.files);
    assert_eq!(ma.config_hash, mb.config_hash);
    for file in ma.files.keys() {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
    }
    assert!(verify(&a).unwrap().is_empty());
}

#[test]
fn seeds_flag_replaces_config_seeds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("o");
    let out = flosslab(&["run", "--config", &cfg, "--output", out_dir.to_str().unwrap(), "--seeds", "7,8,9"]);
    assert!(out.status.success());
    assert_eq!(Manifest::read(&out_dir).unwrap().seeds, vec![7, 8, 9]);
}

#[test]
fn empty_seed_list_writes_manifest_only() {
    let dir = TempDir::new().unwrap();
    let m = tiny_run(
        dir.path(),
        RunOptions {
            seeds: Some(Vec::new()),
            plots: true,
            ..Default::default()
        },
    );
    assert!(m.seeds.is_empty());
    assert!(m.files.is_empty());
    assert!(dir.path().join("manifest.toml").exists());
    let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("Empty bundle"));
}

#[test]
fn tampering_is_detected() {
    let dir = TempDir::new().unwrap();
    let m = tiny_run(dir.path(), RunOptions::default());
    let file = m.files.keys().next().unwrap().clone();
    let path = dir.path().join(&file);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("0,0,0\n");
    fs::write(&path, text).unwrap();
    let problems = verify(dir.path()).unwrap();
    assert_eq!(problems, vec![format!("{file}: checksum mismatch")]);
    assert!(report(dir.path()).is_err());

    fs::remove_file(&path).unwrap();
    assert_eq!(verify(dir.path()).unwrap(), vec![format!("{file}: missing")]);
    let out = flosslab(&["report", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_keeps_finished_shards() {
    let dir = TempDir::new().unwrap();
    let first = tiny_run(dir.path(), RunOptions::default());
    let shard = dir.path().join("shards/seed_3");
    let csv = fs::read_dir(&shard)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "csv"))
        .unwrap();
    let before = fs::metadata(&csv).unwrap().modified().unwrap();
    // A shard with a stale hash must be recomputed.
    fs::write(dir.path().join("shards/seed_1/complete"), "stale").unwrap();

    let second = tiny_run(
        dir.path(),
        RunOptions {
            resume: true,
            ..Default::default()
        },
    );
    assert_eq!(fs::metadata(&csv).unwrap().modified().unwrap(), before);
    assert_eq!(
        fs::read_to_string(dir.path().join("shards/seed_1/complete")).unwrap(),
        first.config_hash
    );
    assert_eq!(first.files, second.files);
}

#[test]
fn report_writes_plots_and_markdown() {
    let dir = TempDir::new().unwrap();
    tiny_run(dir.path(), RunOptions::default());
    let out = flosslab(&["report", "--output", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains(".svg"));
    let svgs = fs::read_dir(dir.path().join("plots")).unwrap().count();
    assert!(svgs > 0);
}

#[test]
fn run_rejects_invalid_config() {
    let mut cfg = ExperimentConfig::parse(TINY).unwrap();
    cfg.overrides.insert("k".into(), flosslab::experiments::Value::Int(100));
    let dir = TempDir::new().unwrap();
    let err = run(
        &cfg,
        &RunOptions {
            output: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_config_round_trips(
        name in "[a-z][a-z0-9_-]{0,12}",
        seeds in proptest::option::of(proptest::collection::vec(0u64..1000, 0..5)),
        n in 2i64..64,
        gain in 0.0f64..3.0,
        points in 1i64..50,
    ) {
        let mut text = format!("name = \"{name}\"\npreset = \"convergence_trace\"\n");
        if let Some(s) = &seeds {
            text.push_str(&format!("seeds = {s:?}\n"));
        }
        text.push_str(&format!("[overrides]\nn_units = {n}\ngain = {gain:?}\npoints = {points}\n"));
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let canon = cfg.to_canonical();
        let again = ExperimentConfig::parse(&canon).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.to_canonical(), canon);
        prop_assert_eq!(again.hash(), cfg.hash());
    }
}
