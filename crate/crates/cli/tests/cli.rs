use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use surfseq::data::{DatasetManifest, GaCategory};
use surfseq::model::Checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_surfseq");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("SURFSEQ_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn header_u64(path: &Path, offset: usize) -> u64 {
    let b = fs::read(path).unwrap();
    u64::from_le_bytes(b[offset..offset + 8].try_into().unwrap())
}

#[test]
fn help_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut cases = vec![("help.txt".to_string(), vec!["--help".to_string()])];
    for c in ["tessellate", "patch-table", "resample", "gen-data", "pretrain", "train", "eval", "predict"] {
        cases.push((format!("{c}.txt"), vec![c.to_string(), "--help".to_string()]));
    }
    for (file, args) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let want = fs::read_to_string(golden.join(&file)).unwrap();
        assert_eq!(ok(dir.path(), &args), want, "{file}");
    }
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let train = ok(dir.path(), &["train", "--help"]);
    for needle in ["[default: 1]", "[default: 0]", "[default: regression]", "1e-3", "[default: 16]", "not a published"] {
        assert!(train.contains(needle), "{needle}");
    }
}

#[test]
fn tessellate_header_reports_vertex_count() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["tessellate", "--order", "6", "--out", "ico6.mesh"]);
    assert!(stdout.contains("config: "));
    assert!(stdout.contains("seed: 0"));
    assert!(stdout.contains("V=40962"));
    let p = dir.path().join("ico6.mesh");
    assert_eq!(&fs::read(&p).unwrap()[..8], b"SRFMESH1");
    assert_eq!(header_u64(&p, 12), 40962);
    assert_eq!(header_u64(&p, 20), 81920);
}

#[test]
fn patch_table_header_reports_shape() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["tessellate", "--order", "6", "--out", "ico6.mesh"]);
    ok(dir.path(), &["tessellate", "--order", "2", "--out", "ico2.mesh"]);
    ok(dir.path(), &["patch-table", "--high", "ico6.mesh", "--low", "ico2.mesh", "--out", "t.tab"]);
    let p = dir.path().join("t.tab");
    assert_eq!(&fs::read(&p).unwrap()[..8], b"PTCHTBL1");
    assert_eq!(header_u64(&p, 12), 320);
    assert_eq!(header_u64(&p, 20), 153);
}

#[test]
fn resample_round_trip_and_rotation_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["tessellate", "--order", "3", "--out", "a.mesh"]);
    ok(d, &["tessellate", "--order", "2", "--out", "b.mesh"]);
    ok(d, &["gen-data", "--order", "3", "--samples", "10", "--out", "ds"]);
    let sig = "ds/signals/sample_00000.sig";
    let stdout = ok(d, &["resample", "--signal", sig, "--src", "a.mesh", "--dst", "b.mesh", "--out", "b.sig"]);
    assert!(stdout.contains("V=162 C=4"));
    ok(d, &["resample", "--signal", sig, "--src", "a.mesh", "--dst", "a.mesh", "--rotate", "z:0", "--out", "same.sig"]);
    assert_eq!(fs::read(d.join(sig)).unwrap(), fs::read(d.join("same.sig")).unwrap());
    let bad = run(d, &["resample", "--signal", sig, "--src", "a.mesh", "--dst", "a.mesh", "--rotate", "w:5", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(2));
}

/// A dataset where every label is the same, and a checkpoint whose head is
/// zero so it predicts the stored label mean exactly.
#[test]
fn eval_on_exact_predictions_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--order", "3", "--samples", "20", "--out", "ds"]);
    let mpath = d.join("ds/manifest.json");
    let mut m = DatasetManifest::load(&mpath).unwrap();
    for s in &mut m.samples {
        s.label = 30.0;
        s.ga_category = GaCategory::from_weeks(30.0);
    }
    m.store(&mpath).unwrap();
    ok(
        d,
        &["train", "--manifest", "ds/manifest.json", "--model", "micro", "--iterations", "1", "--out", "run"],
    );
    let mut ck = Checkpoint::load(&d.join("run/final.ckpt")).unwrap();
    for t in ck.tensors.iter_mut().filter(|t| t.name.starts_with("head.")) {
        t.data.iter_mut().for_each(|x| *x = 0.0);
    }
    ck.meta.label_mean = 30.0;
    ck.meta.label_std = 1.0;
    ck.store(&d.join("fixture.ckpt")).unwrap();
    let stdout = ok(d, &["eval", "--manifest", "ds/manifest.json", "--ckpt", "fixture.ckpt", "--split", "test"]);
    assert!(stdout.contains("mae=0.000"), "{stdout}");
    let stdout = ok(d, &["predict", "--signal", "ds/signals/sample_00000.sig", "--ckpt", "fixture.ckpt"]);
    assert!(stdout.contains("prediction=30"), "{stdout}");
}

#[test]
fn training_writes_outputs_and_prints_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--order", "3", "--samples", "20", "--out", "ds"]);
    fs::write(d.join("cfg.toml"), "batch_size = 4\niterations = 50\nval_every = 2\n").unwrap();
    let stdout = ok(
        d,
        &[
            "pretrain", "--manifest", "ds/manifest.json", "--model", "micro", "--config", "cfg.toml", "--iterations", "3",
            "--out", "pt",
        ],
    );
    for f in ["metrics.csv", "final.ckpt", "best.ckpt", "config.json"] {
        assert!(d.join("pt").join(f).is_file(), "{f}");
        assert!(stdout.contains(&format!("pt/{f}")), "{f}");
    }
    // flags win over the file, the file over defaults
    assert!(stdout.contains("\"iterations\":3"));
    assert!(stdout.contains("\"batch_size\":4"));
    let csv = fs::read_to_string(d.join("pt/metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,metric,value\n"));
    assert!(csv.contains(",val,mpp_loss,"));

    let stdout = ok(
        d,
        &["train", "--manifest", "ds/manifest.json", "--model", "micro", "--init", "pt/final.ckpt", "--iterations", "2",
          "--out", "ft"],
    );
    assert!(stdout.contains("\"learning_rate\":0.0001"));
    assert!(d.join("ft/best.ckpt").is_file());
}

#[test]
fn subcommands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps: [&[&str]; 3] = [
        &["tessellate", "--order", "2", "--out", "o/m.mesh"],
        &["gen-data", "--order", "2", "--samples", "12", "--seed", "3", "--out", "o/ds"],
        &["--deterministic", "train", "--manifest", "o/ds/manifest.json", "--model", "micro", "--iterations", "2",
          "--out", "o/run"],
    ];
    let snapshot = |d: &Path| {
        let mut files = Vec::new();
        let mut stack = vec![d.join("o")];
        while let Some(p) = stack.pop() {
            for e in fs::read_dir(&p).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push((p.strip_prefix(d).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    for s in steps {
        ok(d, s);
    }
    let first = snapshot(d);
    for s in steps {
        ok(d, s);
    }
    assert_eq!(first, snapshot(d));
    assert!(first.len() > 15);
}

fn error_line(out: &Output) -> String {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    stderr.trim_end().to_string()
}

#[test]
fn failures_exit_with_class_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = run(d, &["tessellate", "--order", "2", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["eval", "--manifest", "missing.json", "--ckpt", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).starts_with("error[data] data.missing_manifest: "));

    fs::write(d.join("junk.mesh"), b"not a mesh").unwrap();
    let out = run(d, &["patch-table", "--high", "junk.mesh", "--low", "junk.mesh", "--out", "t"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).starts_with("error[data] geom."));

    ok(d, &["gen-data", "--order", "2", "--samples", "12", "--out", "ds"]);
    fs::write(d.join("bad.toml"), "learning_rat = 1\n").unwrap();
    let out = run(d, &["train", "--manifest", "ds/manifest.json", "--model", "micro", "--config", "bad.toml", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error[usage] cli.config: "));

    let out = run(d, &["train", "--manifest", "ds/manifest.json", "--model", "micro", "--lr", "1e300", "--out", "r"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(error_line(&out).starts_with("error[numeric] train.non_finite"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["tessellate", "--order", "0", "--out", "m"])
        .current_dir(dir.path())
        .env("SURFSEQ_SEED", "41")
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains("seed: 41"));
}
