use pansharp::fusion::{fuse, fuse_naive, FusionKind, FusionMethod};
use pansharp::metrics::{evaluate, to_csv, EvalConfig, EvalInputs};
use pansharp::models::{encode_weights, train, GeneratorVariant, TrainConfig, WeightsFile};
use pansharp::protocol::{read_dataset, synth_sample, wald_degrade, write_dataset, ManifestEntry};
use pansharp::raster::{encode_msrf, load_msrf, save_msrf, upsample, MultiBandImage, ResampleFilter, SampleType};
use std::path::Path;
use std::process::{Command, Output};

fn pansharp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pansharp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = pansharp(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_dir(dir: &Path, count: &str, size: &str) {
    ok(
        &[
            "synth",
            "--count",
            count,
            "--size",
            size,
            "--seed",
            "3",
            "--out-dir",
            "ds",
        ],
        dir,
    );
}

#[test]
fn synth_matches_library_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    synth_dir(tmp.path(), "2", "32");
    let lib = tmp.path().join("lib");
    let samples: Vec<_> = (0..2)
        .map(|i| {
            let entry = ManifestEntry {
                index: i,
                seed: 3 + i as u64,
                corner_x: 0,
                corner_y: 0,
            };
            (synth_sample(32, 4, 4, entry.seed).unwrap(), entry)
        })
        .collect();
    write_dataset(&lib, &samples).unwrap();
    for rel in [
        "manifest.tsv",
        "sample_000000/ms.msrf",
        "sample_000001/pan.msrf",
        "sample_000001/ref.msrf",
    ] {
        let a = std::fs::read(tmp.path().join("ds").join(rel)).unwrap();
        let b = std::fs::read(lib.join(rel)).unwrap();
        assert_eq!(a, b, "{rel}");
    }
}

#[test]
fn fuse_matches_library_for_every_classical_method() {
    let tmp = tempfile::tempdir().unwrap();
    synth_dir(tmp.path(), "1", "32");
    let s = tmp.path().join("ds/sample_000000");
    let ms = load_msrf(s.join("ms.msrf")).unwrap();
    let pan = load_msrf(s.join("pan.msrf")).unwrap();
    let (msn, pann) = (ms.normalized(), pan.normalized());
    let up = upsample(&msn, 4, ResampleFilter::Bicubic).unwrap();
    let ms_path = s.join("ms.msrf");
    let pan_path = s.join("pan.msrf");
    for kind in FusionKind::ALL {
        let out = tmp.path().join(format!("{kind}.msrf"));
        ok(
            &[
                "fuse",
                "--method",
                kind.name(),
                "--ms",
                ms_path.to_str().unwrap(),
                "--pan",
                pan_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            tmp.path(),
        );
        let lib = fuse(FusionMethod::new(kind), &up, &pann).unwrap().image;
        let expect = encode_msrf(&lib.denormalized(ms.value_range().1, ms.dtype()));
        assert_eq!(std::fs::read(&out).unwrap(), expect, "{kind}");
    }
}

#[test]
fn hpf_with_constant_pan_returns_bicubic() {
    let tmp = tempfile::tempdir().unwrap();
    let ms = synth_sample(32, 4, 4, 8).unwrap().ms;
    let pan = MultiBandImage::filled(32, 32, 1, 0.4).unwrap();
    save_msrf(&ms, tmp.path().join("ms.msrf")).unwrap();
    save_msrf(&pan, tmp.path().join("pan.msrf")).unwrap();
    for method in ["hpf", "bicubic"] {
        let out = format!("{method}.msrf");
        ok(
            &[
                "fuse", "--method", method, "--ms", "ms.msrf", "--pan", "pan.msrf", "--out", &out,
            ],
            tmp.path(),
        );
    }
    let hpf = load_msrf(tmp.path().join("hpf.msrf")).unwrap();
    let naive = load_msrf(tmp.path().join("bicubic.msrf")).unwrap();
    let lib = fuse_naive(&load_msrf(tmp.path().join("ms.msrf")).unwrap(), 4).unwrap();
    for ((a, b), c) in hpf.data().iter().zip(naive.data()).zip(lib.data()) {
        assert!((a - b).abs() <= 1e-6 && (b - c).abs() <= 1e-6);
    }
}

#[test]
fn eval_of_identical_images() {
    let tmp = tempfile::tempdir().unwrap();
    save_msrf(&synth_sample(32, 4, 4, 2).unwrap().reference, tmp.path().join("r.msrf")).unwrap();
    let csv = ok(
        &[
            "eval", "--fused", "r.msrf", "--ref", "r.msrf", "--ratio", "4", "--format", "csv",
        ],
        tmp.path(),
    );
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "r");
    assert_eq!((row[1], row[2], row[4]), ("0.000000", "1.000000", "0.000000"));
    let json = ok(
        &["eval", "--fused", "r.msrf", "--ref", "r.msrf", "--format", "json"],
        tmp.path(),
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!((v["q4"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(v["qnr"].is_null());
}

#[test]
fn eval_and_report_match_library() {
    let tmp = tempfile::tempdir().unwrap();
    synth_dir(tmp.path(), "1", "64");
    let d = tmp.path().join("ds/sample_000000");
    let arg = |f: &str| d.join(f).to_str().unwrap().to_owned();
    ok(
        &[
            "fuse",
            "--method",
            "sfim",
            "--ms",
            &arg("ms.msrf"),
            "--pan",
            &arg("pan.msrf"),
            "--out",
            "f.msrf",
        ],
        tmp.path(),
    );
    let csv = ok(
        &[
            "eval",
            "--fused",
            "f.msrf",
            "--ref",
            &arg("ref.msrf"),
            "--ms",
            &arg("ms.msrf"),
            "--pan",
            &arg("pan.msrf"),
            "--method",
            "SFIM",
        ],
        tmp.path(),
    );
    let load = |p: &Path| load_msrf(p).unwrap().normalized();
    let fused = load(&tmp.path().join("f.msrf"));
    let (r, ms, pan) = (
        load(&d.join("ref.msrf")),
        load(&d.join("ms.msrf")),
        load(&d.join("pan.msrf")),
    );
    let inputs = EvalInputs {
        fused: &fused,
        reference: Some(&r),
        ms: Some(&ms),
        pan: Some(&pan),
    };
    let report = evaluate("SFIM", inputs, 4, &EvalConfig::default());
    assert!(report.qnr.is_some());
    assert_eq!(csv, to_csv(&[report]));

    std::fs::write(tmp.path().join("a.csv"), &csv).unwrap();
    let md = ok(&["report", "--inputs", "a.csv", "a.csv", "--format", "md"], tmp.path());
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("| Method | SAM ↓ | CC ↑ | sCC ↑ | ERGAS ↓ | Q4 ↑ | D_λ ↓ | D_S ↓ | QNR ↑ |"));
    assert!(lines[2].starts_with("| SFIM | "));
}

#[test]
fn degrade_rejects_mismatched_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth_sample(64, 4, 4, 4).unwrap();
    save_msrf(&s.reference, tmp.path().join("ms.msrf")).unwrap();
    save_msrf(
        &MultiBandImage::filled(128, 128, 1, 0.5).unwrap(),
        tmp.path().join("pan.msrf"),
    )
    .unwrap();
    let out = pansharp(
        &["degrade", "--ms", "ms.msrf", "--pan", "pan.msrf", "--out-dir", "o"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("o/ms.msrf").exists());
}

#[test]
fn degrade_writes_the_wald_triple() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth_sample(64, 4, 4, 6).unwrap();
    let ms = s.reference.denormalized(65535.0, SampleType::U16);
    let pan = upsample(&s.pan, 4, ResampleFilter::Bicubic)
        .unwrap()
        .map(|v| v.clamp(0.0, 1.0))
        .denormalized(65535.0, SampleType::U16);
    save_msrf(&ms, tmp.path().join("ms.msrf")).unwrap();
    save_msrf(&pan, tmp.path().join("pan.msrf")).unwrap();
    ok(
        &["degrade", "--ms", "ms.msrf", "--pan", "pan.msrf", "--out-dir", "o"],
        tmp.path(),
    );
    let lib = wald_degrade(
        &load_msrf(tmp.path().join("ms.msrf")).unwrap().normalized(),
        &load_msrf(tmp.path().join("pan.msrf")).unwrap().normalized(),
        4,
        ResampleFilter::wald(4),
    )
    .unwrap();
    let expect = |img: &MultiBandImage| encode_msrf(&img.denormalized(65535.0, SampleType::U16));
    assert_eq!(std::fs::read(tmp.path().join("o/ms.msrf")).unwrap(), expect(&lib.ms));
    assert_eq!(std::fs::read(tmp.path().join("o/pan.msrf")).unwrap(), expect(&lib.pan));
    assert_eq!(
        std::fs::read(tmp.path().join("o/ref.msrf")).unwrap(),
        expect(&lib.reference)
    );
    assert_eq!(load_msrf(tmp.path().join("o/ms.msrf")).unwrap().dims(), (16, 16, 4));
}

#[test]
fn train_is_reproducible_and_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    synth_dir(tmp.path(), "4", "32");
    let args = |out: &'static str| {
        vec![
            "train",
            "--variant",
            "psgan",
            "--data-dir",
            "ds",
            "--steps",
            "3",
            "--batch",
            "2",
            "--seed",
            "7",
            "--out",
            out,
        ]
    };
    ok(&args("a.psgw"), tmp.path());
    ok(&args("b.psgw"), tmp.path());
    let a = std::fs::read(tmp.path().join("a.psgw")).unwrap();
    assert_eq!(a, std::fs::read(tmp.path().join("b.psgw")).unwrap());

    let data = read_dataset(&tmp.path().join("ds")).unwrap();
    let cfg = TrainConfig {
        steps: 3,
        batch: 2,
        seed: 7,
        ms_patch: 8,
        ..TrainConfig::default()
    };
    let t = train(&data, GeneratorVariant::Psgan, &cfg).unwrap();
    assert_eq!(
        a,
        encode_weights(&WeightsFile::from_generator(GeneratorVariant::Psgan, 4, &t.generator))
    );

    let d = "ds/sample_000000";
    ok(
        &[
            "fuse",
            "--method",
            "gan",
            "--weights",
            "a.psgw",
            "--ms",
            &format!("{d}/ms.msrf"),
            "--pan",
            &format!("{d}/pan.msrf"),
            "--out",
            "g.msrf",
        ],
        tmp.path(),
    );
    let g = load_msrf(tmp.path().join("g.msrf")).unwrap();
    assert_eq!(g.dims(), (32, 32, 4));
    assert!(g.data().iter().all(|&v| v >= 0.0));
    let out = pansharp(
        &[
            "fuse",
            "--method",
            "fu-psgan",
            "--weights",
            "a.psgw",
            "--ms",
            &format!("{d}/ms.msrf"),
            "--pan",
            &format!("{d}/pan.msrf"),
            "--out",
            "h.msrf",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fu-psgan"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let usage = pansharp(&["eval", "--fused", "x.msrf", "--nope"], tmp.path());
    assert_eq!(usage.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&usage.stderr);
    assert!(stderr.contains("--nope") && stderr.contains("pansharp eval"));
    assert_eq!(pansharp(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(pansharp(&[], tmp.path()).status.code(), Some(1));
    assert_eq!(pansharp(&["--help"], tmp.path()).status.code(), Some(0));
    let missing = pansharp(&["eval", "--fused", "x.msrf", "--ref", "y.msrf"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(missing.stdout.is_empty());

    save_msrf(&synth_sample(32, 4, 4, 1).unwrap().ms, tmp.path().join("m.msrf")).unwrap();
    save_msrf(&synth_sample(32, 4, 4, 1).unwrap().pan, tmp.path().join("p.msrf")).unwrap();
    let bad_method = pansharp(
        &[
            "fuse", "--method", "pnn", "--ms", "m.msrf", "--pan", "p.msrf", "--out", "c",
        ],
        tmp.path(),
    );
    assert_eq!(bad_method.status.code(), Some(1));
    let no_weights = pansharp(
        &[
            "fuse", "--method", "psgan", "--ms", "m.msrf", "--pan", "p.msrf", "--out", "c",
        ],
        tmp.path(),
    );
    assert_eq!(no_weights.status.code(), Some(1));
    std::fs::write(tmp.path().join("junk.psgw"), b"nope").unwrap();
    let junk = pansharp(
        &[
            "fuse",
            "--method",
            "gan",
            "--weights",
            "junk.psgw",
            "--ms",
            "m.msrf",
            "--pan",
            "p.msrf",
            "--out",
            "c",
        ],
        tmp.path(),
    );
    assert_eq!(junk.status.code(), Some(2));
    let q = pansharp(
        &["eval", "--fused", "m.msrf", "--ref", "m.msrf", "--q-block", "4"],
        tmp.path(),
    );
    assert_eq!(q.status.code(), Some(1));
    let threads = Command::new(env!("CARGO_BIN_EXE_pansharp"))
        .args(["eval", "--fused", "m.msrf", "--ref", "m.msrf"])
        .env("PANSHARP_THREADS", "zero")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    synth_dir(tmp.path(), "1", "64");
    let run = |threads: &str, out: &str| {
        let d = "ds/sample_000000";
        let status = Command::new(env!("CARGO_BIN_EXE_pansharp"))
            .args([
                "fuse",
                "--method",
                "lmvm",
                "--ms",
                &format!("{d}/ms.msrf"),
                "--pan",
                &format!("{d}/pan.msrf"),
            ])
            .args(["--out", out])
            .env("PANSHARP_THREADS", threads)
            .current_dir(tmp.path())
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(tmp.path().join(out)).unwrap()
    };
    assert_eq!(run("1", "a.msrf"), run("3", "b.msrf"));
}
