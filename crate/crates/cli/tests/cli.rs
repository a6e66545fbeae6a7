use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foura_core::adapter::{foura_forward, materialize_delta_w};
use foura_core::analysis::projection_norm;
use foura_core::train::matrix_fit::{base_weight, initial_layer};
use foura_core::train::TrainConfig;
use foura_core::workbench::checkpoint::adapters_to_checkpoint;
use foura_core::workbench::commands::probe_input;
use foura_core::workbench::load_adapters;

const FIT: &str = "task = matrix_fit\ntransform = dct\ngate_mode = soft\nlambda_entropy = 0.1\nsteps = 300\n";
const FIT_OTHER: &str = "task = matrix_fit\ntransform = dct\ngate_mode = soft\nlambda_entropy = 0.1\nsteps = 300\ntarget_seed = 9\n";
const DENOISE: &str = "task = toy_denoise\ntransform = dct\ngate_mode = hard_adaptive\nsteps = 100\ntimesteps = 20\n";

fn foura(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foura"))
        .args(args)
        .env_remove("FOURA_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, config: &str, out: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, &format!("{out}.conf"), config);
    let out = dir.join(out);
    let mut args = vec!["train", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = foura(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), FIT, "a", &["--seed", "7"]);
    let b = train(dir.path(), FIT, "b", &["--seed", "7"]);
    for f in ["losses.csv", "ranks.csv", "adapters.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    for f in ["losses.csv", "ranks.csv", "adapters.ckpt", "manifest.json"] {
        assert!(manifest.contains(f), "manifest misses {f}");
    }
    assert_eq!(csv_rows(&a.join("losses.csv")).len(), 300);
}

#[test]
fn threaded_multi_seed_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fit.conf", FIT);
    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    assert!(foura(&["train", s(&cfg), "--seed", "1", "2", "3", "--out", s(&serial)]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_foura"))
        .args(["train", s(&cfg), "--seed", "1", "2", "3", "--out", s(&parallel)])
        .env("FOURA_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    for seed in 1..=3 {
        let sub = format!("seed-{seed}");
        for f in ["losses.csv", "ranks.csv"] {
            assert_eq!(
                std::fs::read(serial.join(&sub).join(f)).unwrap(),
                std::fs::read(parallel.join(&sub).join(f)).unwrap()
            );
        }
    }
    let bad = Command::new(env!("CARGO_BIN_EXE_foura"))
        .args(["train", s(&cfg), "--out", s(&parallel)])
        .env("FOURA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn config_errors_exit_one_with_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.conf", "# comment\nsteps = 0\n");
    let o = foura(&["train", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("steps"), "{err}");

    assert_eq!(foura(&["train"]).status.code(), Some(1));
    assert_eq!(foura(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(foura(&["--help"]).status.code(), Some(0));
}

#[test]
fn denoise_ranks_have_one_row_per_timestep_and_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), DENOISE, "d", &[]);
    let rows = csv_rows(&out.join("ranks.csv"));
    let header = std::fs::read_to_string(out.join("ranks.csv")).unwrap();
    assert!(header.starts_with("timestep,layer,effective_rank,soft_mean\n"));
    for layer in ["0", "1"] {
        let n = rows.iter().filter(|r| r[1] == layer).count();
        assert_eq!(n, 20, "layer {layer}");
    }
}

#[test]
fn analyze_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), FIT, "a", &[]);
    let b = train(dir.path(), FIT_OTHER, "b", &[]);
    let (ca, cb) = (a.join("adapters.ckpt"), b.join("adapters.ckpt"));

    // Untrained adapters have B = 0.
    let cfg = TrainConfig::default();
    let layer = initial_layer(&cfg, base_weight(&cfg)).unwrap();
    let zero = dir.path().join("zero.ckpt");
    adapters_to_checkpoint(&[], &[layer], &[vec![true; 8]]).unwrap().save(&zero).unwrap();
    let out_zero = dir.path().join("an-zero");
    let o = foura(&["analyze", s(&zero), "--out", s(&out_zero)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spread = csv_rows(&out_zero.join("spread.csv"));
    assert_eq!(spread.len(), 32);
    assert!(spread.iter().all(|r| r[3].parse::<f64>().unwrap() == 0.0));

    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = foura(&["analyze", s(&ca), s(&cb), "--rank", "8", "--pairwise", "--svg", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (x, y) = (run("an-1"), run("an-2"));
    for f in ["spread.csv", "amplification.csv", "bound.csv", "projection.csv", "sigmas.svg"] {
        assert_eq!(std::fs::read(x.join(f)).unwrap(), std::fs::read(y.join(f)).unwrap(), "{f}");
    }

    // Both orientations are emitted and match direct library calls.
    let sa = load_adapters(&ca).unwrap();
    let sb = load_adapters(&cb).unwrap();
    let dwa = materialize_delta_w(&sa.layers[0], &sa.frozen_masks[0]).unwrap();
    let dwb = materialize_delta_w(&sb.layers[0], &sb.frozen_masks[0]).unwrap();
    let proj = csv_rows(&x.join("projection.csv"));
    assert_eq!(proj.len(), 2);
    for row in &proj {
        let (src, refd) = if row[1] == "0" { (&dwa, &dwb) } else { (&dwb, &dwa) };
        let want = projection_norm(src, refd, 8).unwrap();
        assert_eq!(row[5].parse::<f64>().unwrap(), want.normalized);
        assert_eq!(row[4].parse::<f64>().unwrap(), want.raw);
    }
    assert_eq!(csv_rows(&x.join("amplification.csv")).len(), 2);
    assert_eq!(csv_rows(&x.join("bound.csv")).len(), 2);

    // A denoiser checkpoint has a different layer layout.
    let d = train(dir.path(), DENOISE, "d", &[]);
    let o = foura(&["analyze", s(&ca), s(&d.join("adapters.ckpt")), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible checkpoints"));
}

fn outputs(dir: &Path) -> Vec<f64> {
    csv_rows(&dir.join("outputs.csv")).iter().map(|r| r[4].parse().unwrap()).collect()
}

#[test]
fn merge_identities() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), FIT, "a", &[]).join("adapters.ckpt");
    let b = train(dir.path(), FIT_OTHER, "b", &[]).join("adapters.ckpt");
    let merge = |x: &Path, y: &Path, a1: &str, a2: &str, name: &str| {
        let out = dir.path().join(name);
        let o = foura(&["merge", s(x), s(y), "--alphas", a1, a2, "--probe", "5", "--probes", "3", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };

    // (1, 0) is the first adapter alone.
    let only_a = merge(&a, &b, "1", "0", "m10");
    let frozen = load_adapters(&a).unwrap().frozen_layers().unwrap();
    let mut expect = Vec::new();
    for p in 0..3 {
        let z = probe_input(5, p, 16, 32);
        expect.extend(foura_forward(&frozen[0], &z).unwrap().0.data().iter().copied());
    }
    let got = outputs(&only_a);
    assert_eq!(got.len(), expect.len());
    assert!(got.iter().zip(&expect).all(|(g, e)| (g - e).abs() < 1e-12));
    assert_eq!(
        std::fs::read(only_a.join("merged.csv")).unwrap(),
        std::fs::read(merge(&a, &a, "1", "0", "m10-self").join("merged.csv")).unwrap()
    );

    // Self-merge at (0.5, 0.5) is the adapter at full strength.
    let half = outputs(&merge(&a, &a, "0.5", "0.5", "mhalf"));
    assert!(half.iter().zip(&expect).all(|(g, e)| (g - e).abs() < 1e-10));

    let compat = csv_rows(&only_a.join("compatibility.csv"));
    assert_eq!(compat.len(), 1);
    let self_compat = csv_rows(&dir.path().join("mhalf").join("compatibility.csv"));
    assert!((self_compat[0][2].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);

    let d = train(dir.path(), DENOISE, "d", &[]).join("adapters.ckpt");
    let o = foura(&["merge", s(&a), s(&d), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = foura(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.lines().filter(|l| l.starts_with("ok")).count() >= 6, "{text}");

    let bad = foura(&["gradcheck", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("worst op"));
}

#[test]
fn denoise_report_writes_both_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.conf", DENOISE);
    let out = dir.path().join("rep");
    let o = foura(&["denoise-report", s(&cfg), "--seed", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("denoise_ranks.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "adaptive").count(), 40);
    let frozen: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "frozen").collect();
    assert_eq!(frozen.len(), 40);
    for layer in ["0", "1"] {
        let mut ranks: Vec<&str> = frozen.iter().filter(|r| r[2] == layer).map(|r| r[3].as_str()).collect();
        ranks.dedup();
        assert_eq!(ranks.len(), 1);
    }
    assert!(out.join("denoise_ranks.svg").exists());

    let fit = write_config(dir.path(), "fit.conf", FIT);
    assert_eq!(foura(&["denoise-report", s(&fit), "--out", s(&out)]).status.code(), Some(1));
}
