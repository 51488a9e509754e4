use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use babelkit::pivot_align::{AlignConfig, AlignSetup};
use babelkit_cli::RunManifest;
use serde_json::Value;
use tempfile::TempDir;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn asset(rel: &str) -> PathBuf {
    root().join(rel)
}

fn babelkit(args: &[&str]) -> Output {
    babelkit_env(args, &[])
}

fn babelkit_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_babelkit"));
    cmd.args(args).env_remove("BABELKIT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn babelkit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_valid(schema: &str, doc: &Path) {
    let schema: Value = serde_json::from_str(
        &fs::read_to_string(asset(&format!("schemas/{schema}.schema.json"))).unwrap(),
    )
    .unwrap();
    let instance: Value = serde_json::from_str(&fs::read_to_string(doc).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let msgs: Vec<String> = match compiled.validate(&instance) {
        Ok(()) => Vec::new(),
        Err(errors) => errors
            .map(|e| format!("{} at {}", e, e.instance_path))
            .collect(),
    };
    assert!(
        msgs.is_empty(),
        "{} violates schema: {msgs:?}",
        doc.display()
    );
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

/// Every file under `dir` except run manifests, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("run_manifest.json") {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

// eval

fn run_eval(gt: &Path, det: &Path, registry: &Path, out: &Path) -> Output {
    babelkit(&[
        "eval",
        "--gt",
        s(gt),
        "--det",
        s(det),
        "--registry",
        s(registry),
        "--out",
        s(out),
    ])
}

fn fixture_eval(out: &Path) -> Output {
    run_eval(
        &asset("fixtures/soi_det_reference/ground_truth.jsonl"),
        &asset("fixtures/soi_det_reference/detections.jsonl"),
        &asset("configs/registry_soi_det.json"),
        out,
    )
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    /// Two modalities with one category each; `hit` decides per modality
    /// whether the detection lands on the object.
    fn new(hit: [bool; 2]) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(
            dir.path().join("registry.json"),
            r#"{"modalities": {"sar": ["sar/ship"], "optical": ["optical/ship"]}}"#,
        )
        .unwrap();
        let mut gt = String::new();
        let mut det = String::new();
        for (m, ok) in ["sar", "optical"].into_iter().zip(hit) {
            for i in 0..3 {
                let img = format!("{m}-{i}");
                gt += &format!(
                    r#"{{"image_id": "{img}", "modality": "{m}", "category": "{m}/ship", "bbox": [0, 0, 10, 10]}}"#
                );
                gt.push('\n');
                let x = if ok { 0 } else { 50 };
                let x2 = x + 10;
                det += &format!(
                    r#"{{"image_id": "{img}", "modality": "{m}", "category": "{m}/ship", "bbox": [{x}, 0, {x2}, 10], "score": 0.9}}"#
                );
                det.push('\n');
            }
        }
        fs::write(dir.path().join("gt.jsonl"), gt).unwrap();
        fs::write(dir.path().join("det.jsonl"), det).unwrap();
        Toy { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn eval(&self) -> Output {
        run_eval(
            &self.path("gt.jsonl"),
            &self.path("det.jsonl"),
            &self.path("registry.json"),
            &self.path("out"),
        )
    }
}

#[test]
fn eval_fixture_prints_table_scores_and_valid_reports() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("eval");
    let o = fixture_eval(&out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "mAP=51.57 H-mAP=53.02");
    assert_valid("eval_report", &out.join("report.json"));
    assert_valid("run_manifest", &out.join("run_manifest.json"));
    let (header, rows) = csv_rows(&out.join("report.csv"));
    assert_eq!(header[0], "category");
    assert!(!rows.is_empty());
    let m = RunManifest::load(&out.join("run_manifest.json")).unwrap();
    assert_eq!(m.command, "eval");
    assert_eq!(m.outputs.len(), 2);
}

#[test]
fn eval_perfect_and_dead_modality() {
    let perfect = Toy::new([true, true]);
    let o = perfect.eval();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "mAP=100.00 H-mAP=100.00");

    let dead = Toy::new([true, false]);
    let o = dead.eval();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "mAP=50.00 H-mAP=0.00");
}

#[test]
fn eval_reports_parse_errors_with_line_and_exit_2() {
    let toy = Toy::new([true, true]);
    let mut det = fs::read_to_string(toy.path("det.jsonl")).unwrap();
    det += "{not json\n";
    fs::write(toy.path("det.jsonl"), det).unwrap();
    let o = toy.eval();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 7"), "{}", stderr(&o));

    let o = babelkit(&[
        "eval",
        "--gt",
        s(&toy.path("gt.jsonl")),
        "--det",
        s(&toy.path("gt.jsonl")),
        "--registry",
        s(&toy.path("registry.json")),
        "--ap-mode",
        "11pt",
        "--out",
        s(&toy.path("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_output_independent_of_thread_count() {
    let tmp = TempDir::new().unwrap();
    let mut snaps = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(threads);
        let o = babelkit_env(
            &[
                "eval",
                "--gt",
                s(&asset("fixtures/soi_det_reference/ground_truth.jsonl")),
                "--det",
                s(&asset("fixtures/soi_det_reference/detections.jsonl")),
                "--registry",
                s(&asset("configs/registry_soi_det.json")),
                "--out",
                s(&out),
            ],
            &[("BABELKIT_THREADS", threads)],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        snaps.push(snapshot(&out));
    }
    assert_eq!(snaps[0], snaps[1]);

    let o = babelkit_env(&["hmap", "50"], &[("BABELKIT_THREADS", "many")]);
    assert_eq!(o.status.code(), Some(2));
}

// hmap

#[test]
fn hmap_table_rows() {
    for (args, want) in [
        (&["63.30", "46.96", "51.32"][..], "53.02"),
        (&["53.46", "45.18", "44.99"][..], "47.57"),
        (&["60.64", "46.47", "48.87"][..], "51.31"),
        (&["50", "50", "50"][..], "50.00"),
        (&["40", "0"][..], "0.00"),
    ] {
        let mut full = vec!["hmap"];
        full.extend_from_slice(args);
        let o = babelkit(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        assert_eq!(stdout(&o).trim(), want, "{args:?}");
    }
}

#[test]
fn hmap_rejects_bad_values() {
    for bad in [
        &["abc"][..],
        &["50", "x1"][..],
        &["-3"][..],
        &["101"][..],
        &[][..],
    ] {
        let mut full = vec!["hmap"];
        full.extend_from_slice(bad);
        assert_eq!(babelkit(&full).status.code(), Some(2), "{bad:?}");
    }
}

// align

fn align_config(edit: impl FnOnce(&mut Value)) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let mut v: Value =
        serde_json::from_str(&fs::read_to_string(asset("configs/align_default.json")).unwrap())
            .unwrap();
    edit(&mut v);
    let path = dir.path().join("align.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    (dir, path)
}

#[test]
fn align_default_writes_trace_checkpoint_and_consistency() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("align");
    let config = asset("configs/align_default.json");
    let o = babelkit(&["align", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let steps = serde_json::from_str::<Value>(&fs::read_to_string(&config).unwrap()).unwrap()
        ["steps"]
        .as_u64()
        .unwrap();
    let (header, rows) = csv_rows(&out.join("trace.csv"));
    assert_eq!(header, ["step", "loss", "alpha"]);
    assert_eq!(rows.len() as u64, steps);

    for (schema, file) in [
        ("checkpoint", "checkpoint.json"),
        ("consistency", "consistency.json"),
        ("run_manifest", "run_manifest.json"),
    ] {
        assert_valid(schema, &out.join(file));
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("consistency.json")).unwrap()).unwrap();
    for pair in report["pairs"].as_array().unwrap() {
        let (before, after) = (
            pair["untrained"].as_f64().unwrap(),
            pair["trained"].as_f64().unwrap(),
        );
        assert!(after < before, "{pair}");
    }
    let ckpt: Value =
        serde_json::from_str(&fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    let total: u64 = ckpt["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["len"].as_u64().unwrap())
        .sum();
    assert_eq!(total as usize, ckpt["values"].as_array().unwrap().len());
}

#[test]
fn align_zero_steps_keeps_initial_encoder() {
    let (dir, config) = align_config(|v| v["steps"] = 0.into());
    let out = dir.path().join("out");
    let o = babelkit(&["align", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = csv_rows(&out.join("trace.csv"));
    assert!(rows.is_empty());

    let parsed: AlignConfig = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    let init = AlignSetup::build(&parsed)
        .unwrap()
        .initial_encoder()
        .unwrap()
        .flat();
    let ckpt: Value =
        serde_json::from_str(&fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    let values: Vec<f64> = ckpt["values"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(values, init);
}

#[test]
fn align_exit_codes() {
    let (dir, config) = align_config(|v| v["lr"] = 1e300.into());
    let o = babelkit(&[
        "align",
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));

    let (dir, config) = align_config(|v| v["dims"]["d_z"] = 0.into());
    let o = babelkit(&[
        "align",
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = babelkit(&[
        "align",
        "--config",
        "/nonexistent/align.json",
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn align_seed_flag_is_reproducible_and_recorded() {
    let tmp = TempDir::new().unwrap();
    let config = asset("configs/align_default.json");
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = babelkit(&[
            "--seed",
            seed,
            "align",
            "--config",
            s(&config),
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(snapshot(&a), snapshot(&b));
    assert_ne!(snapshot(&a), snapshot(&c));
    assert_eq!(
        RunManifest::load(&a.join("run_manifest.json"))
            .unwrap()
            .seed,
        Some(7)
    );
}

// gradlab

#[test]
fn gradlab_bundled_config() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("lab");
    let o = babelkit(&[
        "gradlab",
        "--config",
        s(&asset("configs/gradlab_default.json")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let (header, rows) = csv_rows(&out.join("conditioning_sweep.csv"));
    assert_eq!(header, ["lambda", "kappa", "lambda_max", "lambda_min"]);
    let kappa: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(kappa.windows(2).all(|w| w[1] > w[0]), "{kappa:?}");

    let (header, rows) = csv_rows(&out.join("stability_table.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let verdict = |id: &str| {
        rows.iter()
            .find(|r| r[0] == id)
            .map(|r| r[col("verdict")].clone())
            .unwrap()
    };
    for seed in 0..5 {
        assert_eq!(verdict(&format!("late-l5000-fp16-s{seed}")), "diverged");
        assert_eq!(
            verdict(&format!("two-stage-p2000-fp16-s{seed}")),
            "converged"
        );
        assert_eq!(verdict(&format!("late-l5000-exact-s{seed}")), "converged");
        assert_eq!(verdict(&format!("late-l0-exact-s{seed}")), "converged");
    }
    for r in rows.iter().filter(|r| r[col("verdict")] == "diverged") {
        assert!(
            r[col("first_nonfinite_step")].parse::<usize>().is_ok(),
            "{r:?}"
        );
    }
    for r in &rows {
        let trace = out.join("traces").join(format!("trace_{}.csv", r[0]));
        let (h, t) = csv_rows(&trace);
        assert_eq!(h, ["step", "loss", "grad_norm", "alpha"]);
        assert!(!t.is_empty());
    }
    let (h, _) = csv_rows(&out.join("trajectories.csv"));
    assert_eq!(h[0], "run_id");

    assert_valid("gradient_report", &out.join("gradient_report.json"));
    assert_valid("run_manifest", &out.join("run_manifest.json"));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("gradient_report.json")).unwrap())
            .unwrap();
    for seed in report["coherence"]["seeds"].as_array().unwrap() {
        assert!(
            seed["post_alignment_mean_cosine"].as_f64()
                > seed["pre_alignment_mean_cosine"].as_f64(),
            "{seed}"
        );
    }
    let init = &report["initial_losses"];
    assert!(init["mean_two_stage"].as_f64() < init["mean_late_total"].as_f64());
}

#[test]
fn gradlab_rerun_from_manifest_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    let config = asset("configs/gradlab_default.json");
    let o = babelkit(&[
        "--seed",
        "3",
        "gradlab",
        "--config",
        s(&config),
        "--out",
        s(&first),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let m = RunManifest::load(&first.join("run_manifest.json")).unwrap();
    assert_eq!(m.seed, Some(3));
    let second = tmp.path().join("second");
    let seed = m.seed.unwrap().to_string();
    let o = babelkit(&[
        "--seed",
        &seed,
        "gradlab",
        "--config",
        m.config.as_deref().unwrap(),
        "--out",
        s(&second),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(snapshot(&first), snapshot(&second));
}

#[test]
fn gradlab_config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let mut v: Value =
        serde_json::from_str(&fs::read_to_string(asset("configs/gradlab_default.json")).unwrap())
            .unwrap();
    v["stability"]["precisions"] = serde_json::json!(["fp8"]);
    let path = dir.path().join("bad.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = babelkit(&[
        "gradlab",
        "--config",
        s(&path),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    fs::write(&path, "{").unwrap();
    let o = babelkit(&[
        "gradlab",
        "--config",
        s(&path),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

// sample

#[test]
fn sample_bundled_recipe() {
    let tmp = TempDir::new().unwrap();
    let recipe = asset("recipes/pretrain_mixture.json");
    let a = tmp.path().join("a.csv");
    let o = babelkit(&[
        "sample",
        "--recipe",
        s(&recipe),
        "--seed",
        "0",
        "--out",
        s(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dataset,expected,drawn"));
    let counts: BTreeMap<String, (f64, u64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].to_string(),
                (f[1].parse().unwrap(), f[2].parse().unwrap()),
            )
        })
        .collect();
    let (expected, drawn) = counts["Mini-InternVL"];
    assert_eq!(expected, 13_940.0);
    let sigma = (1_394_000.0 * 0.01 * 0.99f64).sqrt();
    assert!((drawn as f64 - expected).abs() <= 3.0 * sigma, "{drawn}");
    assert_eq!(counts["RSVQA"].1, 100_000);
    assert_eq!(counts["GeoChat"].1, 64_000);

    let (header, rows) = csv_rows(&a);
    assert_eq!(header, ["position", "dataset", "index"]);
    assert_eq!(rows.len() as u64, counts.values().map(|c| c.1).sum::<u64>());

    let run = babelkit_cli::commands::sample_manifest_path(&a);
    assert_valid("run_manifest", &run);
    assert_eq!(RunManifest::load(&run).unwrap().seed, Some(0));

    let b = tmp.path().join("b.csv");
    assert!(babelkit(&[
        "sample",
        "--recipe",
        s(&recipe),
        "--seed",
        "0",
        "--out",
        s(&b)
    ])
    .status
    .success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = tmp.path().join("c.csv");
    assert!(babelkit(&[
        "--seed",
        "1",
        "sample",
        "--recipe",
        s(&recipe),
        "--out",
        s(&c)
    ])
    .status
    .success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn sample_recipe_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let recipe = dir.path().join("r.json");
    fs::write(&recipe, r#"{"seed": 0, "entries": [{"name": "a", "size": 10, "sample_rate": 1.5, "tasks": ["VQA"]}]}"#).unwrap();
    let o = babelkit(&[
        "sample",
        "--recipe",
        s(&recipe),
        "--out",
        s(&dir.path().join("m.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = babelkit(&["sample", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
}
