use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sonic::data::Manifest;
use sonic::fields::{gaussian_field, Field, SeedRng};
use sonic::flow::{ClassId, ConvVelocityNet, GuidanceConfig, SamplerConfig};
use sonic::inpaint::blended_denoise;
use sonic::io::{read_field, read_mask};
use sonic::latent::{encode_observation, LatentCodec};

fn sonic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonic"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = sonic(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset and a briefly trained conditional model, shared by all tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }
    fn model(&self) -> PathBuf {
        self.root.join("model/model.json")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&[
            "make-data",
            "--out",
            s(&data),
            "--count",
            "3",
            "--height",
            "8",
            "--width",
            "8",
            "--mask",
            "six_rects",
        ]);
        ok(&[
            "train",
            "--manifest",
            s(&data.join("manifest.json")),
            "--out",
            s(&root.join("model")),
            "--epochs",
            "2",
            "--steps-per-epoch",
            "5",
            "--hidden",
            "4",
            "--conditional",
        ]);
        Fixture { _dir: dir, root }
    })
}

fn file_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(file_bytes(&p));
        } else {
            out.insert(p.clone(), std::fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn zero_iterations_match_direct_blended_denoise() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "inpaint",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(out.path()),
        "--iters",
        "0",
        "--T",
        "5",
        "--seed",
        "3",
    ]);
    let model: ConvVelocityNet = ConvVelocityNet::load(&f.model()).unwrap();
    let manifest = Manifest::load(&f.manifest()).unwrap();
    let base = f.manifest().parent().unwrap().to_path_buf();
    for e in &manifest.entries {
        let image: Field = read_field(&base.join(&e.scene_file)).unwrap();
        let mask = read_mask(&base.join(&e.mask_file)).unwrap();
        let obs = encode_observation(LatentCodec::Identity, &image, &mask).unwrap();
        let x_t: Field = gaussian_field(&mut SeedRng::new(3), obs.latent_shape()).unwrap();
        let guidance = GuidanceConfig::default().with_class(e.scene_kind.class_id());
        let direct = blended_denoise(
            &model,
            &x_t,
            &obs,
            &SamplerConfig::new(5).unwrap(),
            &guidance,
        )
        .unwrap();
        let dir = out.path().join(format!("{:04}", e.id));
        let latent: Field<f32> = read_field(&dir.join("latent.snf")).unwrap();
        assert_eq!(latent, direct.cast::<f32>());
        let result: Field<f32> = read_field(&dir.join("result.snf")).unwrap();
        let input: Field<f32> = read_field(&base.join(&e.scene_file)).unwrap();
        for (i, (a, b)) in result.data().iter().zip(input.data()).enumerate() {
            if mask.observed_at(i % 64) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn default_hyperparameters_are_recorded() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "inpaint",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(out.path()),
        "--iters",
        "1",
    ]);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join("0000/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["optim"]["lr"], 3.0);
    assert_eq!(meta["config"]["sampler"]["steps"], 20);
    assert_eq!(meta["config"]["guidance"]["scale"], 2.0);
    assert_eq!(meta["config"]["guidance"]["class"], ClassId(1).0);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn ablate_emits_four_methods_and_gt_row_per_instance() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "ablate",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(out.path()),
        "--iters",
        "2",
        "--T",
        "3",
        "--codec",
        "pool:2",
    ]);
    let mut reader = csv::Reader::from_path(out.path().join("ablate.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let id_col = headers.iter().position(|h| h == "id").unwrap();
    let method_col = headers.iter().position(|h| h == "method").unwrap();
    let mut per_id: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        per_id
            .entry(rec[id_col].to_string())
            .or_default()
            .push(rec[method_col].to_string());
    }
    assert_eq!(per_id.len(), 3);
    for methods in per_id.values() {
        assert_eq!(
            methods,
            &[
                "spectral_mask",
                "spectral_nomask",
                "spatial_mask",
                "spatial_nomask",
                "gt_encoder"
            ]
        );
    }
}

#[test]
fn replay_reproduces_outputs_and_inputs_are_untouched() {
    let f = fixture();
    let before = file_bytes(&f.root);
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    ok(&[
        "inpaint",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(first.path()),
        "--iters",
        "3",
        "--T",
        "4",
        "--domain",
        "spatial",
        "--seed",
        "9",
    ]);
    ok(&[
        "replay",
        "--snapshot",
        s(&first.path().join("run.json")),
        "--out",
        s(second.path()),
    ]);
    let a = file_bytes(first.path());
    let b = file_bytes(second.path());
    let mut compared = 0;
    for (path, bytes) in &a {
        let name = path.file_name().unwrap().to_str().unwrap();
        if name == "timing.csv" || name == "run.json" {
            continue;
        }
        let twin = second.path().join(path.strip_prefix(first.path()).unwrap());
        assert_eq!(Some(bytes), b.get(&twin), "{}", twin.display());
        compared += 1;
    }
    assert!(compared >= 3 * 6);
    assert_eq!(file_bytes(&f.root), before);
}

#[test]
fn gradcheck_and_eval_write_reports() {
    let f = fixture();
    let gc = tempfile::tempdir().unwrap();
    ok(&[
        "gradcheck",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.manifest()),
        "--id",
        "1",
        "--out",
        s(gc.path()),
        "--iters",
        "2",
        "--T",
        "3",
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(gc.path().join("report.json")).unwrap()).unwrap();
    assert!(report["fd_rel_err"].as_f64().unwrap() < 1e-4);
    let rows = csv::Reader::from_path(gc.path().join("gradcheck.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(rows, 3);

    let inp = tempfile::tempdir().unwrap();
    let ev = tempfile::tempdir().unwrap();
    ok(&[
        "inpaint",
        "--model",
        s(&f.model()),
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(inp.path()),
        "--iters",
        "1",
        "--T",
        "3",
    ]);
    ok(&[
        "eval",
        "--results",
        s(inp.path()),
        "--manifest",
        s(&f.manifest()),
        "--out",
        s(ev.path()),
    ]);
    let mut reader = csv::Reader::from_path(ev.path().join("metrics.csv")).unwrap();
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for r in rows.iter().filter(|r| &r[1] == "observed") {
        assert_eq!(&r[2], "0.0");
    }
}

fn assert_error_line(out: &Output, kind: &str, key: &str) {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(
        lines[0].starts_with(&format!("error: kind={kind} key={key} msg=")),
        "{}",
        lines[0]
    );
}

#[test]
fn failures_report_one_machine_readable_line() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let o = s(out.path());
    assert_error_line(
        &sonic(&[
            "inpaint",
            "--model",
            s(&f.model()),
            "--manifest",
            s(&f.manifest()),
            "--out",
            o,
            "--bogus",
        ]),
        "usage",
        "--bogus",
    );
    assert_error_line(
        &sonic(&[
            "inpaint",
            "--model",
            s(&f.model()),
            "--manifest",
            s(&f.manifest()),
            "--out",
            o,
            "--T",
            "0",
        ]),
        "config",
        "T",
    );
    assert_error_line(
        &sonic(&[
            "inpaint",
            "--model",
            s(&f.model()),
            "--manifest",
            s(&f.manifest()),
            "--out",
            o,
            "--codec",
            "pool:3",
        ]),
        "config",
        "codec",
    );
    let missing = out.path().join("missing.json");
    assert_error_line(
        &sonic(&[
            "inpaint",
            "--model",
            s(&missing),
            "--manifest",
            s(&f.manifest()),
            "--out",
            o,
        ]),
        "io",
        s(&missing),
    );
    assert_error_line(
        &sonic(&["replay", "--snapshot", s(&missing), "--out", o]),
        "io",
        s(&missing),
    );
}
