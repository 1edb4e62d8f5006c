use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use p2v::pipeline::*;
use p2v::tensor_io::{read_volume, write_volume, z_mean_projection, Volume3D};
use p2v::Error;

/// A few seconds' worth of pipeline: 4 identities x 3 impressions, narrow
/// networks, two epochs per stage.
fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.seed = 11;
    c.dataset.identities = 4;
    c.dataset.impressions = 3;
    c.training.train_pairs = 8;
    c.training.pool_per_category = 2;
    c.style.base_channels = 4;
    c.style.negatives = 3;
    c.style.epochs = 2;
    c.expansion.base_channels = 2;
    c.expansion.epochs = 2;
    c.refiner.base_channels = 2;
    c.refiner.epochs = 2;
    c.evaluation.recognition_epochs = 1;
    c
}

fn run_chain(out: &Path, workers: usize) -> Pipeline {
    let p = Pipeline::new(tiny_config(), out, workers).unwrap();
    p.make_phantoms().unwrap();
    for s in [Stage::Style, Stage::Expansion, Stage::Refiner] {
        p.train(s).unwrap();
    }
    p.synthesize(2, 2).unwrap();
    let report = p.evaluate(p.phantoms_dir(), p.synth_dir()).unwrap();
    p.write_report(&report).unwrap();
    p
}

fn all_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn stage_ordering_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_config(), dir.path(), 1).unwrap();
    let err = p.train(Stage::Refiner).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));
    assert!(err.to_string().contains("missing expansion checkpoint"), "{err}");
    assert_eq!(exit_code(&err), 3);
    assert!(matches!(p.synthesize(1, 1), Err(Error::Missing(_))));
    assert!(matches!(p.train(Stage::Style), Err(Error::Missing(_))), "phantoms are a prerequisite too");
}

#[test]
fn chain_artifacts_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_chain(dir.path(), 2);
    let cfg = tiny_config();
    for (stage, width) in [(Stage::Style, 6), (Stage::Expansion, 4), (Stage::Refiner, 5)] {
        let csv = std::fs::read_to_string(p.loss_path(stage)).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert!(lines[0].starts_with("epoch,loss_total,"), "{}", lines[0]);
        assert_eq!(lines.len() - 1, cfg.expansion.epochs);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == width));
    }

    let synth = p2v::tensor_io::DatasetManifest::load(p.synth_dir()).unwrap();
    assert_eq!(synth.entries.len(), 4);
    for e in &synth.entries {
        for key in ["structural", "refined"] {
            let v = read_volume(synth.path(e, key).unwrap()).unwrap();
            assert_eq!(v.dims(), (8, 64, 64));
            assert!(v.values().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        }
    }

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.report_path()).unwrap()).unwrap();
    for key in ["fvd_structural", "fvd_refined", "fid_structural", "fid_refined"] {
        assert!(report[key].as_f64().unwrap() >= 0.0, "{key}");
    }

    let same = p.evaluate(p.phantoms_dir(), p.phantoms_dir()).unwrap();
    for v in [same.fvd_structural, same.fvd_refined, same.fid_structural, same.fid_refined] {
        assert!(v.abs() < 1e-6, "{v}");
    }
}

#[test]
fn chain_is_byte_reproducible_across_worker_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_chain(a.path(), 1);
    run_chain(b.path(), 3);
    let (fa, fb) = (all_files(a.path()), all_files(b.path()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }
}

#[test]
fn evaluate_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.evaluation.recognition = false;
    let p = Pipeline::new(cfg, dir.path(), 1).unwrap();
    let m = p.make_phantoms().unwrap();

    let other = dir.path().join("other");
    let mut entry = m.entries[0].clone();
    entry.paths.retain(|k, _| k == "volume");
    write_volume(&Volume3D::constant(16, 64, 64, 0.5).unwrap(), other.join(&entry.paths["volume"])).unwrap();
    p2v::tensor_io::DatasetManifest::new(&other, vec![entry]).unwrap().save().unwrap();
    assert!(matches!(p.evaluate(p.phantoms_dir(), &other), Err(Error::Shape(_))));
}

#[test]
fn export_views_counts_and_zmean_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume3D::new(8, 64, 64, (0..8 * 64 * 64).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap();
    let path = dir.path().join("vol").join("v.p2v");
    write_volume(&v, &path).unwrap();
    let out = dir.path().join("views");
    let files = export_views(&path, &out).unwrap();
    assert_eq!(files.len(), 6);

    let dims = |name: &str| {
        let img = read_png(out.join(name)).unwrap();
        (img.height(), img.width())
    };
    let bscans: Vec<_> = files.iter().filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("bscan")).collect();
    assert_eq!(bscans.len(), 3);
    for b in bscans {
        assert_eq!(dims(b.file_name().unwrap().to_str().unwrap()), (8, 64));
    }
    assert_eq!(dims("enface_surface.png"), (64, 64));
    assert_eq!(dims("enface_junction.png"), (64, 64));

    let zmean = z_mean_projection(&v);
    let back = read_png(out.join("zmean.png")).unwrap();
    let expected = quantize(zmean.values());
    for ((&a, &b), &q) in back.values().iter().zip(zmean.values()).zip(&expected) {
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
        assert_eq!((a * 255.0).round() as u8, q);
    }
    assert!(export_views(dir.path().join("missing.p2v"), &out).is_err());
}

#[test]
fn export_views_uses_stored_depth_maps() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_config(), dir.path(), 1).unwrap();
    let m = p.make_phantoms().unwrap();
    let e = &m.entries[0];
    let out = dir.path().join("views");
    export_views(m.path(e, "volume").unwrap(), &out).unwrap();
    let v = read_volume(m.path(e, "volume").unwrap()).unwrap();
    let surface = p2v::tensor_io::read_depth_map(m.path(e, "surface").unwrap()).unwrap();
    let expect = p2v::tensor_io::extract_enface_layer(&v, &surface, 1).unwrap();
    let got = read_png(out.join("enface_surface.png")).unwrap();
    assert_eq!(got.values(), read_png_of(&expect, dir.path()).values());
}

fn read_png_of(img: &p2v::tensor_io::Image2D, dir: &Path) -> p2v::tensor_io::Image2D {
    let p = dir.join("oracle.png");
    write_png(img, &p).unwrap();
    read_png(&p).unwrap()
}

#[test]
fn invalid_config_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = tiny_config();
    cfg.phantom.depth = 16;
    let err = Pipeline::new(cfg, &out, 1).err().unwrap();
    assert_eq!(exit_code(&err), 2);
    assert!(!out.exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"format_version": 1, "sed": 3}"#).unwrap();
    assert!(PipelineConfig::load(&bad).is_err(), "unknown keys are rejected");
    std::fs::write(&bad, r#"{"format_version": 7}"#).unwrap();
    assert!(PipelineConfig::load(&bad).is_err());
    assert_eq!(exit_code(&PipelineConfig::load(dir.path().join("none.json")).unwrap_err()), 4);
}

#[test]
fn config_json_round_trip() {
    let c = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, c.to_json().unwrap()).unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap(), c);
    std::fs::write(&path, r#"{"seed": 5}"#).unwrap();
    let partial = PipelineConfig::load(&path).unwrap();
    assert_eq!(partial.seed, 5);
    assert_eq!(partial.dataset, PipelineConfig::default().dataset);
    assert_ne!(c.style_config().seed, c.expansion_config().seed);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_p2v");
    let out = dir.path().join("run");
    let status = Command::new(bin).args(["train", "refiner", "--out"]).arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"format_version": 9}"#).unwrap();
    let status = Command::new(bin).args(["make-phantoms", "--config"]).arg(&bad).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());

    let status = Command::new(bin).args(["export-views"]).arg(dir.path().join("nope.p2v")).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(4));

    let cfg = Command::new(bin).arg("default-config").output().unwrap();
    assert!(cfg.status.success());
    let parsed: PipelineConfig = serde_json::from_slice(&cfg.stdout).unwrap();
    assert_eq!(parsed, PipelineConfig::default());
}
